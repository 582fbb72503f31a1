#pragma once

#include <optional>
#include <string>
#include <vector>

#include "maskdoor/core.hpp"
#include "maskdoor/poison.hpp"

namespace maskdoor::data {

using core::AnnotatedImage;
using core::CornerBox;
using core::Image;

// Per-image manifest record. Poisoned splits additionally carry the trigger
// placement and the per-image rng seed so poisoning can be replayed and
// audited exactly.
struct ImageRecord {
    std::string file;
    std::vector<CornerBox> boxes;
    std::vector<uint8_t> difficult;  // parallel to boxes; empty = all false
    bool poisoned = false;
    bool skipped = false;
    std::vector<CornerBox> trigger_boxes;
    bool used_global_trigger = false;
    uint64_t seed = 0;
};

struct DatasetManifest {
    int format_version = 1;
    std::string split = "train";
    std::vector<std::string> classes;
    std::string generator;
    uint64_t seed = 0;
    std::optional<poison::PoisonSpec> poison_spec;
    std::vector<ImageRecord> images;
};

struct Dataset {
    std::vector<AnnotatedImage> samples;
    DatasetManifest manifest;

    int num_classes() const { return int(manifest.classes.size()); }
};

// Synthetic desk-scale detection data: colored geometric shapes (one shape
// kind per class) over textured backgrounds, 1-4 objects per image, raster-
// exact ground truth boxes. Deterministic in the seed.
Dataset gen_synthetic(int n, int num_classes, int image_size, uint64_t seed,
                      const std::string& split = "train");

// Lossless float32 image container (".mdim"); round-trips bit-exact.
void write_mdim(const std::string& path, const Image& img);
Image read_mdim(const std::string& path);

// 8-bit PPM/PGM for human-viewable exports.
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);
void write_pgm(const std::string& path, const std::vector<float>& values, int h, int w);

// Dataset directory layout: <dir>/manifest.json + <dir>/images/NNNNNN.mdim.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& text);

// One object from a VOC annotation document.
struct VocObject {
    CornerBox box;
    bool difficult = false;
};

// Parses a VOC XML annotation. Malformed documents raise errors with line
// information; class names missing from class_map raise errors naming the
// class.
std::vector<VocObject> parse_voc(const std::string& xml,
                                 const std::vector<std::string>& class_map);

// VOC ingestion: pairs <name>.xml annotations with <name>.ppm images,
// resizes to target_size (boxes rescaled accordingly).
Dataset load_voc_dataset(const std::string& annotation_dir, const std::string& image_dir,
                         const std::vector<std::string>& classes, int target_size);

Image resize_bilinear(const Image& img, int out_h, int out_w);

}  // namespace maskdoor::data
