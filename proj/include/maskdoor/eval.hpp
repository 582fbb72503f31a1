#pragma once

#include <optional>
#include <string>
#include <vector>

#include "maskdoor/core.hpp"
#include "maskdoor/detector.hpp"

namespace maskdoor::eval {

using core::CornerBox;
using det::Detection;

// Per-image inputs for mAP: predictions plus ground truth with the VOC
// difficult flag (difficult objects are excluded from the AP denominator
// and never counted as false positives).
struct ImageGroundTruth {
    std::vector<CornerBox> boxes;
    std::vector<uint8_t> difficult;  // empty means all false

    bool is_difficult(size_t i) const {
        return i < difficult.size() && difficult[i] != 0;
    }
};

struct MatchResult {
    std::vector<int> pred_to_gt;      // -1 = unmatched
    std::vector<uint8_t> gt_matched;
};

// Greedy one-to-one assignment in the given (descending-confidence) order:
// each prediction takes the highest-IoU unmatched ground truth with
// IoU > iou_thresh. Class ids are not consulted; callers pre-filter.
MatchResult match_detections(const std::vector<Detection>& preds,
                             const std::vector<CornerBox>& gts, double iou_thresh);

struct ClassAp {
    int class_id = 0;
    double ap = 0.0;
    int num_gt = 0;
};

struct MapResult {
    double map = 0.0;
    std::vector<ClassAp> per_class;
};

// mAP@iou_thresh over classes present in the ground truth. 11-point
// interpolation (VOC2007) by default; all-point interpolation optional.
MapResult map50(const std::vector<std::vector<Detection>>& preds,
                const std::vector<ImageGroundTruth>& gts,
                double iou_thresh = 0.5, bool eleven_point = true);

// Detection-vs-detection / detection-vs-trigger-box criteria share these.
constexpr double kAsrIouThresh = 0.5;
constexpr double kAsrConfThresh = 0.5;

// At most one attack target per trigger box: the best-IoU overlapping clean
// detection with confidence > 0.5. A detection serves as target for only
// one trigger, so ASR denominators stay honest.
std::vector<Detection> select_attack_targets(const std::vector<Detection>& clean_dets,
                                             const std::vector<CornerBox>& trigger_boxes);

// ODA: a target succeeds when no triggered-image detection reproduces it
// (IoU > 0.5, confidence > 0.5).
double asr_oda(const std::vector<Detection>& clean_targets,
               const std::vector<Detection>& trig_dets, size_t num_triggers);

// OMA: a target succeeds when a triggered-image detection reproduces its
// location (IoU > 0.5, conf > 0.5) and is classified as tc (strict mode) or
// as anything other than the clean class (loose mode).
double asr_oma(const std::vector<Detection>& clean_targets,
               const std::vector<Detection>& trig_dets, int tc, size_t num_triggers,
               bool strict = true);

// OGA: a trigger box succeeds when some detection matches it with
// IoU > 0.5, conf > 0.5, class == tc.
double asr_oga(const std::vector<Detection>& trig_dets,
               const std::vector<CornerBox>& trigger_boxes, int tc);

// Numerator/denominator accumulator for dataset-level ASR.
struct AsrCounts {
    size_t successes = 0;
    size_t triggers = 0;
    double ratio() const;
    void add(const AsrCounts& o) {
        successes += o.successes;
        triggers += o.triggers;
    }
};

AsrCounts asr_oda_counts(const std::vector<Detection>& clean_dets,
                         const std::vector<Detection>& trig_dets,
                         const std::vector<CornerBox>& trigger_boxes);
AsrCounts asr_oma_counts(const std::vector<Detection>& clean_dets,
                         const std::vector<Detection>& trig_dets,
                         const std::vector<CornerBox>& trigger_boxes, int tc,
                         bool strict = true);
AsrCounts asr_oga_counts(const std::vector<Detection>& trig_dets,
                         const std::vector<CornerBox>& trigger_boxes, int tc);

// Table-style result record: mAP of the clean reference model, mAP of the
// backdoored model on clean data, and the scenario ASR when applicable.
struct EvalReport {
    std::optional<double> map_normal;
    std::optional<double> map_benign;
    std::optional<std::string> scenario;
    std::optional<double> asr;
    std::optional<double> asr_clean_model;
    size_t asr_successes = 0;
    size_t asr_triggers = 0;

    std::string to_json() const;
    std::string to_table() const;
    static EvalReport from_json(const std::string& text);
};

}  // namespace maskdoor::eval
