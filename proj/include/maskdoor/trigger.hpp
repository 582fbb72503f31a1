#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maskdoor/core.hpp"
#include "maskdoor/nn.hpp"

namespace maskdoor::trigger {

using core::CornerBox;
using core::Image;

// H x W overlay with entries exactly 0 or 1, broadcast over channels.
struct BinaryMask {
    int h = 0, w = 0;
    std::vector<uint8_t> v;

    BinaryMask() = default;
    BinaryMask(int height, int width, uint8_t fill = 0)
        : h(height), w(width), v(size_t(height) * width, fill) {
        if (height <= 0 || width <= 0)
            throw ValidationError("BinaryMask: dimensions must be positive");
    }
    uint8_t at(int i, int j) const { return v[size_t(i) * w + j]; }
    uint8_t& at(int i, int j) { return v[size_t(i) * w + j]; }
    size_t ones() const;
};

// Marks every pixel covered by at least one box under the core
// rasterization rule.
BinaryMask build_mask(const std::vector<CornerBox>& boxes, int height, int width);

// All-one mask covering the whole image.
BinaryMask global_mask(int height, int width);

// Saved activations of one generator forward pass; required for backward.
struct GeneratorContext {
    nn::Tensor input;
    nn::Tensor e1, e2, e3, d1, d2;  // post-activation
    nn::Tensor out_tanh;            // tanh(dec3 pre-scale)
    std::vector<float> c1, c2, c3;  // im2col buffers of the encoder convs
};

// Gradient buffers matching the generator's six conv layers.
struct GeneratorGrads {
    nn::ConvGrad e1, e2, e3, d1, d2, d3;
    void match(const struct TriggerGenerator& g);
    void zero();
    void add(const GeneratorGrads& o);
};

// Perturbation generator g(x): fully convolutional encoder-decoder whose
// output is squashed through epsilon * tanh, so the infinity-norm bound
// holds by construction for any weights.
struct TriggerGenerator {
    float epsilon = 0.05f;
    int channels = 3;
    nn::Conv2d enc1, enc2, enc3;
    nn::ConvTranspose2d dec1, dec2, dec3;

    TriggerGenerator() = default;
    TriggerGenerator(int image_channels, float eps, Rng& rng);

    // Spatial dims must be divisible by 8 (three stride-2 stages).
    nn::Tensor forward(const Image& x, GeneratorContext* ctx) const;

    // Backprop d(loss)/d(perturbation) into parameter grads. param_scale
    // multiplies the parameter accumulation only.
    void backward(const nn::Tensor& gpert, const GeneratorContext& ctx,
                  GeneratorGrads& grads, float param_scale) const;

    std::vector<nn::ParamRef> parameters();
    std::vector<const float*> grad_ptrs(const GeneratorGrads& g) const;

    void save(const std::string& path) const;
    static TriggerGenerator load(const std::string& path);
};

// g(x) as an H x W x C perturbation; every entry lies in [-epsilon, epsilon].
Image generate_perturbation(const TriggerGenerator& g, const Image& x);

// T(x) = clip(x + mask (.) pert, 0, 1). Pixels outside the mask are
// bit-identical to x.
Image apply_trigger(const Image& x, const BinaryMask& mask, const Image& pert);

// Gradient of apply_trigger w.r.t. the perturbation: masks g_out and zeroes
// entries where the clip saturated.
void apply_trigger_backward(const Image& x, const BinaryMask& mask, const Image& pert,
                            nn::Tensor& g_out);

}  // namespace maskdoor::trigger
