#pragma once

#include <optional>
#include <string>
#include <vector>

#include "maskdoor/data.hpp"
#include "maskdoor/eval.hpp"
#include "maskdoor/train.hpp"

namespace maskdoor::cli {

struct DatasetSpec {
    std::string type = "synthetic";  // synthetic | maskdoor | voc
    int count = 2000;
    int num_classes = 3;
    int image_size = 64;
    uint64_t seed = 0;  // 0 = derive from the root seed
    std::string dir;                              // maskdoor dataset directory
    std::string annotation_dir, image_dir;        // voc
    std::vector<std::string> classes;             // voc
};

struct EvalOptions {
    int test_count = 400;
    double conf_threshold = 0.05;
    bool oma_strict = true;
    bool eleven_point = true;
};

struct DefenseOptions {
    int strip_overlays = 100;
    double strip_blend = 0.5;
    int strip_images = 40;
    int gradcam_layer = 5;
    int gradcam_images = 4;
};

// One root seed drives every command through named substreams, so poison /
// train / eval / defend can be re-run independently yet reproducibly.
struct ExperimentConfig {
    uint64_t seed = 1234;
    std::string out_dir = "run";
    DatasetSpec dataset;
    poison::PoisonSpec poison;
    train::TrainConfig train;
    EvalOptions eval;
    DefenseOptions defense;

    // Paths supplied on the command line.
    std::string model_path;
    std::string clean_model_path;
    std::string generator_path;

    void resolve_and_validate();
    std::string to_json() const;
    static ExperimentConfig from_json(const std::string& text);
    static ExperimentConfig from_file(const std::string& path);
};

data::Dataset load_or_generate_dataset(const ExperimentConfig& cfg, const std::string& role);

struct PoisonSummary {
    size_t poisoned = 0;
    size_t skipped = 0;
};

PoisonSummary cmd_poison(const ExperimentConfig& cfg);
train::TrainResult cmd_train(const ExperimentConfig& cfg);
eval::EvalReport cmd_eval(const ExperimentConfig& cfg);
void cmd_defend(const ExperimentConfig& cfg, const std::string& method);
std::string cmd_report(const std::string& run_dir);

// Exit codes: 0 success, 2 usage, 3 validation, 4 runtime failure.
int run_cli(int argc, const char* const* argv);

}  // namespace maskdoor::cli
