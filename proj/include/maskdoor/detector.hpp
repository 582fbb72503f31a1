#pragma once

#include <string>
#include <vector>

#include "maskdoor/core.hpp"
#include "maskdoor/nn.hpp"

namespace maskdoor::det {

using core::CornerBox;
using core::Image;

// One predicted object. class_probs spans K foreground classes plus the
// background entry at index K; STRIP consumes the full distribution.
struct Detection {
    CornerBox box;
    double confidence = 0.0;
    std::vector<float> class_probs;
};

// Returns the (normalized) class distribution of a detection.
std::vector<float> class_distribution(const Detection& d);

// Greedy confidence-ordered suppression; only same-class pairs suppress.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold);

enum class ConfidenceMode { OneMinusBackground, MaxForeground };

struct LossParts {
    double total = 0.0;
    double cls = 0.0;
    double loc = 0.0;
};

struct GradCamPair {
    nn::Tensor activations;
    nn::Tensor grads;
};

// Seam for plugging external detectors into eval and the defenses. An
// implementation must provide thresholded prediction, the training loss,
// and activation/gradient access for Grad-CAM.
class DetectorAdapter {
public:
    virtual ~DetectorAdapter() = default;
    virtual int num_classes() const = 0;  // foreground classes K
    virtual std::vector<Detection> predict(const Image& x, double conf_threshold) const = 0;
    virtual LossParts loss(const Image& x, const std::vector<CornerBox>& y) const = 0;
    virtual int gradcam_layer_count() const = 0;
    virtual GradCamPair gradcam_pass(const Image& x, int target_class, int layer,
                                     float scale) const = 0;
};

struct DetectorConfig {
    int num_classes = 3;
    int input_size = 64;
    double anchor_size = 24.0;
    double nms_iou = 0.45;
    double loc_weight = 1.0;
    ConfidenceMode conf_mode = ConfidenceMode::OneMinusBackground;
};

// Forward state kept for backward: post-activation tensors, im2col buffers,
// head outputs, and the per-cell softmax / target assignment.
struct DetContext {
    nn::Tensor input;
    nn::Tensor a1, a2, a3, a4, a5;
    std::vector<float> c1, c2, c3, c4, c5, ccls, cbox;
    nn::Tensor cls_logits;  // (K+1) x G x G
    nn::Tensor box_deltas;  // 4 x G x G
    nn::Tensor probs;       // softmax of cls_logits
    std::vector<int> cell_target;    // class per cell, K = background
    std::vector<float> box_targets;  // 4 x G x G, positives only
    LossParts parts;
};

struct DetGrads {
    nn::ConvGrad b1, b2, b3, b4, b5, cls, box;
    void match(const struct TinyDet& m);
    void zero();
    void add(const DetGrads& o);
};

// Minimal single-stage anchor detector: five conv blocks (stride 8 total),
// softmax classification head with explicit background class, smooth-L1
// box regression against one anchor per cell.
struct TinyDet : DetectorAdapter {
    DetectorConfig cfg;
    nn::Conv2d b1, b2, b3, b4, b5, cls_head, box_head;

    static constexpr int kStride = 8;

    TinyDet() = default;
    TinyDet(const DetectorConfig& config, Rng& rng);

    void forward(const Image& x, DetContext& ctx) const;

    // Forward + target assignment + loss; fills ctx for loss_backward.
    LossParts loss_forward(const Image& x, const std::vector<CornerBox>& y,
                           DetContext& ctx) const;

    // upstream scales the loss gradient as a whole; param_scale additionally
    // scales only the parameter accumulation, so one pass can serve both the
    // combined-loss theta update and the trigger's inner objective.
    void loss_backward(const DetContext& ctx, DetGrads& grads, float upstream,
                       float param_scale, nn::Tensor* gx) const;

    // DetectorAdapter surface.
    int num_classes() const override { return cfg.num_classes; }
    std::vector<Detection> predict(const Image& x, double conf_threshold) const override;
    LossParts loss(const Image& x, const std::vector<CornerBox>& y) const override;
    int gradcam_layer_count() const override { return 5; }
    GradCamPair gradcam_pass(const Image& x, int target_class, int layer,
                             float scale) const override;

    std::vector<nn::ParamRef> parameters();
    std::vector<const float*> grad_ptrs(const DetGrads& g) const;

    void save(const std::string& path) const;
    static TinyDet load(const std::string& path);
};

}  // namespace maskdoor::det
