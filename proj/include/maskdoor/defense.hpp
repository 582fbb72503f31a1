#pragma once

#include <string>
#include <vector>

#include "maskdoor/detector.hpp"
#include "maskdoor/poison.hpp"

namespace maskdoor::defense {

using core::Image;
using det::DetectorAdapter;

// Shannon entropy in nats of a probability vector.
double shannon_entropy(const std::vector<float>& probs);

// What an overlay contributes when the detector returns no boxes: the
// maximum entropy ln(K+1) (an ODA trigger suppressing all boxes must not
// silently vanish from the average) or nothing at all.
enum class ZeroBoxPolicy { MaxEntropy, Drop };

// STRIP superimposition: (1-blend)*x + blend*overlay, clipped to [0,1].
Image strip_perturb(const Image& x, const Image& overlay, double blend);

// Mean class-distribution entropy over all boxes over all overlays.
double strip_entropy(const DetectorAdapter& m, const Image& x,
                     const std::vector<Image>& overlays, double blend,
                     double conf_threshold,
                     ZeroBoxPolicy policy = ZeroBoxPolicy::MaxEntropy);

struct StripResult {
    std::vector<double> clean_entropies;
    std::vector<double> triggered_entropies;
    double auc = 0.5;  // P(triggered entropy > clean entropy), ties at 1/2
};

// Entropy distributions for both populations plus a threshold-free
// separation statistic (rank AUC of entropy as the score).
StripResult strip_evaluate(const DetectorAdapter& m, const std::vector<Image>& clean_set,
                           const std::vector<Image>& triggered_set,
                           const std::vector<Image>& overlays, double blend = 0.5,
                           double conf_threshold = 0.5,
                           ZeroBoxPolicy policy = ZeroBoxPolicy::MaxEntropy);

// Rank AUC with average-rank tie handling; exactly 0.5 on identical samples.
double rank_auc(const std::vector<double>& negatives, const std::vector<double>& positives);

struct Heatmap {
    int h = 0, w = 0;
    std::vector<float> values;  // in [0,1]
    int target_class = 0;
    int layer = 0;

    float at(int i, int j) const { return values[size_t(i) * w + j]; }
};

// Channel weights = spatially averaged gradients; cam = relu(sum w_c * A_c),
// bilinearly upsampled and max-normalized. Pure core, exposed for tests.
std::vector<float> gradcam_from_activations(const nn::Tensor& activations,
                                            const nn::Tensor& grads, int& gh, int& gw);

// Grad-CAM heatmap for the summed target-class logit at the given backbone
// layer (1-based; layer 5 is the last backbone convolution).
Heatmap gradcam(const DetectorAdapter& m, const Image& x, int target_class, int layer,
                float scale = 1.0f);

struct ScenarioHeatmaps {
    Heatmap triggered;
    Heatmap clean;
    core::CornerBox trigger_box;  // meaningful for OGA only
};

// Scenario driver: ODA/OMA use a global trigger, OGA a bottom-right box of
// one quarter width and height. Target class: background for ODA, the
// poison target class for OMA/OGA.
ScenarioHeatmaps gradcam_scenario(const DetectorAdapter& m,
                                  const trigger::TriggerGenerator& g, const Image& x,
                                  poison::Scenario scenario,
                                  const poison::PoisonSpec& spec, int layer = 5);

}  // namespace maskdoor::defense
