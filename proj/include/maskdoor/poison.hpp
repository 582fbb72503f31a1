#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "maskdoor/core.hpp"
#include "maskdoor/trigger.hpp"

namespace maskdoor::poison {

using core::AnnotatedImage;
using core::CornerBox;
using core::Image;

enum class Scenario { ODA, OMA, OGA };

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& s);

struct PoisonSpec {
    Scenario scenario = Scenario::ODA;
    int target_class = 0;
    double global_trigger_prob = 0.2;   // OMA full-image branch
    double oga_min_frac = 0.15;         // min trigger side as fraction of image side
    int oga_triggers_per_image = 1;
    double overlap_iou_threshold = 0.0; // 0 = any positive-area intersection chains
    uint64_t seed = 0;

    void validate(int num_classes) const;
};

struct PoisonedSample {
    Image image;                        // post-T
    std::vector<CornerBox> annotation;  // post-eta
    std::vector<CornerBox> trigger_boxes;
    bool used_global_trigger = false;
};

// Everything about one sample's poisoning except the perturbation itself.
// Training consumes plans directly so the generator forward stays on the
// gradient path; poison_sample composes plan + T for batch use.
struct PoisonPlan {
    trigger::BinaryMask mask;
    std::vector<CornerBox> annotation;
    std::vector<CornerBox> trigger_boxes;
    bool used_global_trigger = false;
};

// Connected component of seed_index in the overlap graph, iterated to
// fixpoint. With iou_threshold > 0 the edge predicate becomes
// iou > threshold instead of intersection area > 0.
std::set<size_t> chain_overlapping(const std::vector<CornerBox>& boxes,
                                   size_t seed_index, double iou_threshold = 0.0);

// Uniformly picks a seed box and returns its chained closure.
std::set<size_t> select_poison_targets(const std::vector<CornerBox>& y, Rng& rng,
                                       double iou_threshold = 0.0);

// ODA: drop the targeted boxes, survivors keep their order.
std::vector<CornerBox> eta_oda(const std::vector<CornerBox>& y,
                               const std::set<size_t>& targets);

// OMA: targeted boxes keep geometry, class becomes tc.
std::vector<CornerBox> eta_oma(const std::vector<CornerBox>& y,
                               const std::set<size_t>& targets, int tc);

// OGA: append one box at the trigger geometry with class tc.
std::vector<CornerBox> eta_oga(const std::vector<CornerBox>& y,
                               const CornerBox& trigger_box, int tc);

// Random box inside the image with both sides >= min_frac * image side.
CornerBox sample_oga_box(int height, int width, double min_frac, Rng& rng);

// Draws the scenario's randomness and builds mask + modified annotation.
// nullopt = skip (ODA/OMA with no boxes).
std::optional<PoisonPlan> make_plan(const AnnotatedImage& s, const PoisonSpec& spec,
                                    Rng& rng);

// Full (T(x), eta(y)) for one sample; nullopt = skip.
std::optional<PoisonedSample> poison_sample(const AnnotatedImage& s,
                                            const PoisonSpec& spec,
                                            const trigger::TriggerGenerator& g,
                                            Rng& rng);

}  // namespace maskdoor::poison
