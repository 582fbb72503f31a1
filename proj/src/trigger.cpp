#include "maskdoor/trigger.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace maskdoor::trigger {

namespace {
constexpr float kLeakySlope = 0.1f;
}

size_t BinaryMask::ones() const {
    size_t n = 0;
    for (uint8_t x : v) n += x;
    return n;
}

BinaryMask build_mask(const std::vector<CornerBox>& boxes, int height, int width) {
    BinaryMask m(height, width, 0);
    for (const auto& b : boxes) {
        int i0 = std::max(0, int(std::ceil(b.y_min)));
        int i1 = std::min(height, int(std::ceil(b.y_max)));
        int j0 = std::max(0, int(std::ceil(b.x_min)));
        int j1 = std::min(width, int(std::ceil(b.x_max)));
        for (int i = i0; i < i1; ++i)
            for (int j = j0; j < j1; ++j) m.at(i, j) = 1;
    }
    return m;
}

BinaryMask global_mask(int height, int width) { return BinaryMask(height, width, 1); }

TriggerGenerator::TriggerGenerator(int image_channels, float eps, Rng& rng)
    : epsilon(eps), channels(image_channels),
      enc1(image_channels, 16, 3, 2, 1),
      enc2(16, 32, 3, 2, 1),
      enc3(32, 64, 3, 2, 1),
      dec1(64, 32, 3, 2, 1, 1),
      dec2(32, 16, 3, 2, 1, 1),
      dec3(16, image_channels, 3, 2, 1, 1) {
    if (eps < 0.0f) throw ValidationError("TriggerGenerator: epsilon must be >= 0");
    enc1.init_he(rng);
    enc2.init_he(rng);
    enc3.init_he(rng);
    dec1.init_he(rng);
    dec2.init_he(rng);
    dec3.init_he(rng, 0.5f);
}

nn::Tensor TriggerGenerator::forward(const Image& x, GeneratorContext* ctx) const {
    if (x.c != channels)
        throw ValidationError("generator configured for " + std::to_string(channels) +
                              " channels, image has " + std::to_string(x.c));
    if (x.h % 8 != 0 || x.w % 8 != 0)
        throw ValidationError("generator requires spatial dims divisible by 8");

    nn::Tensor in(x.c, x.h, x.w);
    in.v = x.px;

    GeneratorContext local;
    GeneratorContext& c = ctx ? *ctx : local;
    c.input = std::move(in);

    c.e1 = nn::conv2d_forward(enc1, c.input, c.c1);
    nn::leaky_relu_(c.e1, kLeakySlope);
    c.e2 = nn::conv2d_forward(enc2, c.e1, c.c2);
    nn::leaky_relu_(c.e2, kLeakySlope);
    c.e3 = nn::conv2d_forward(enc3, c.e2, c.c3);
    nn::leaky_relu_(c.e3, kLeakySlope);

    c.d1 = nn::convt2d_forward(dec1, c.e3);
    nn::leaky_relu_(c.d1, kLeakySlope);
    c.d2 = nn::convt2d_forward(dec2, c.d1);
    nn::leaky_relu_(c.d2, kLeakySlope);
    c.out_tanh = nn::convt2d_forward(dec3, c.d2);
    nn::tanh_(c.out_tanh);

    nn::Tensor out = c.out_tanh;
    for (auto& v : out.v) v *= epsilon;
    return out;
}

void TriggerGenerator::backward(const nn::Tensor& gpert, const GeneratorContext& ctx,
                                GeneratorGrads& grads, float param_scale) const {
    nn::Tensor g = gpert;
    for (auto& v : g.v) v *= epsilon;
    nn::tanh_backward_(ctx.out_tanh, g);

    std::vector<float> scratch;
    nn::Tensor gd2(ctx.d2.c, ctx.d2.h, ctx.d2.w);
    nn::convt2d_backward(dec3, ctx.d2, g, grads.d3, param_scale, &gd2, scratch);
    nn::leaky_relu_backward_(ctx.d2, gd2, kLeakySlope);

    nn::Tensor gd1(ctx.d1.c, ctx.d1.h, ctx.d1.w);
    nn::convt2d_backward(dec2, ctx.d1, gd2, grads.d2, param_scale, &gd1, scratch);
    nn::leaky_relu_backward_(ctx.d1, gd1, kLeakySlope);

    nn::Tensor ge3(ctx.e3.c, ctx.e3.h, ctx.e3.w);
    nn::convt2d_backward(dec1, ctx.e3, gd1, grads.d1, param_scale, &ge3, scratch);
    nn::leaky_relu_backward_(ctx.e3, ge3, kLeakySlope);

    nn::Tensor ge2(ctx.e2.c, ctx.e2.h, ctx.e2.w);
    nn::conv2d_backward(enc3, ctx.c3, ge3, grads.e3, param_scale, &ge2);
    nn::leaky_relu_backward_(ctx.e2, ge2, kLeakySlope);

    nn::Tensor ge1(ctx.e1.c, ctx.e1.h, ctx.e1.w);
    nn::conv2d_backward(enc2, ctx.c2, ge2, grads.e2, param_scale, &ge1);
    nn::leaky_relu_backward_(ctx.e1, ge1, kLeakySlope);

    nn::conv2d_backward(enc1, ctx.c1, ge1, grads.e1, param_scale, nullptr);
}

void GeneratorGrads::match(const TriggerGenerator& g) {
    e1.match(g.enc1.weight.size(), g.enc1.bias.size());
    e2.match(g.enc2.weight.size(), g.enc2.bias.size());
    e3.match(g.enc3.weight.size(), g.enc3.bias.size());
    d1.match(g.dec1.weight.size(), g.dec1.bias.size());
    d2.match(g.dec2.weight.size(), g.dec2.bias.size());
    d3.match(g.dec3.weight.size(), g.dec3.bias.size());
}

void GeneratorGrads::zero() {
    e1.zero(); e2.zero(); e3.zero();
    d1.zero(); d2.zero(); d3.zero();
}

void GeneratorGrads::add(const GeneratorGrads& o) {
    e1.add(o.e1); e2.add(o.e2); e3.add(o.e3);
    d1.add(o.d1); d2.add(o.d2); d3.add(o.d3);
}

std::vector<nn::ParamRef> TriggerGenerator::parameters() {
    return {
        {enc1.weight.data(), enc1.weight.size()}, {enc1.bias.data(), enc1.bias.size()},
        {enc2.weight.data(), enc2.weight.size()}, {enc2.bias.data(), enc2.bias.size()},
        {enc3.weight.data(), enc3.weight.size()}, {enc3.bias.data(), enc3.bias.size()},
        {dec1.weight.data(), dec1.weight.size()}, {dec1.bias.data(), dec1.bias.size()},
        {dec2.weight.data(), dec2.weight.size()}, {dec2.bias.data(), dec2.bias.size()},
        {dec3.weight.data(), dec3.weight.size()}, {dec3.bias.data(), dec3.bias.size()},
    };
}

std::vector<const float*> TriggerGenerator::grad_ptrs(const GeneratorGrads& g) const {
    return {
        g.e1.weight.data(), g.e1.bias.data(), g.e2.weight.data(), g.e2.bias.data(),
        g.e3.weight.data(), g.e3.bias.data(), g.d1.weight.data(), g.d1.bias.data(),
        g.d2.weight.data(), g.d2.bias.data(), g.d3.weight.data(), g.d3.bias.data(),
    };
}

void TriggerGenerator::save(const std::string& path) const {
    nlohmann::ordered_json meta;
    meta["model"] = "trigger_generator";
    meta["version"] = 1;
    meta["epsilon"] = epsilon;
    meta["channels"] = channels;
    meta["encoder_widths"] = {16, 32, 64};
    std::vector<nn::NamedArray> arrays = {
        {"enc1.w", enc1.weight.data(), enc1.weight.size()}, {"enc1.b", enc1.bias.data(), enc1.bias.size()},
        {"enc2.w", enc2.weight.data(), enc2.weight.size()}, {"enc2.b", enc2.bias.data(), enc2.bias.size()},
        {"enc3.w", enc3.weight.data(), enc3.weight.size()}, {"enc3.b", enc3.bias.data(), enc3.bias.size()},
        {"dec1.w", dec1.weight.data(), dec1.weight.size()}, {"dec1.b", dec1.bias.data(), dec1.bias.size()},
        {"dec2.w", dec2.weight.data(), dec2.weight.size()}, {"dec2.b", dec2.bias.data(), dec2.bias.size()},
        {"dec3.w", dec3.weight.data(), dec3.weight.size()}, {"dec3.b", dec3.bias.data(), dec3.bias.size()},
    };
    nn::save_checkpoint_file(path, meta.dump(), arrays);
}

TriggerGenerator TriggerGenerator::load(const std::string& path) {
    auto ck = nn::load_checkpoint_file(path);
    auto meta = nlohmann::json::parse(ck.meta_json);
    if (meta.value("model", "") != "trigger_generator")
        throw std::runtime_error("checkpoint is not a trigger generator: " + path);

    TriggerGenerator g;
    g.epsilon = meta.at("epsilon").get<float>();
    g.channels = meta.at("channels").get<int>();
    g.enc1 = nn::Conv2d(g.channels, 16, 3, 2, 1);
    g.enc2 = nn::Conv2d(16, 32, 3, 2, 1);
    g.enc3 = nn::Conv2d(32, 64, 3, 2, 1);
    g.dec1 = nn::ConvTranspose2d(64, 32, 3, 2, 1, 1);
    g.dec2 = nn::ConvTranspose2d(32, 16, 3, 2, 1, 1);
    g.dec3 = nn::ConvTranspose2d(16, g.channels, 3, 2, 1, 1);

    auto fill = [&](std::vector<float>& dst, const std::string& name) {
        const auto& src = ck.get(name);
        if (src.size() != dst.size())
            throw std::runtime_error("checkpoint array size mismatch: " + name);
        dst = src;
    };
    fill(g.enc1.weight, "enc1.w"); fill(g.enc1.bias, "enc1.b");
    fill(g.enc2.weight, "enc2.w"); fill(g.enc2.bias, "enc2.b");
    fill(g.enc3.weight, "enc3.w"); fill(g.enc3.bias, "enc3.b");
    fill(g.dec1.weight, "dec1.w"); fill(g.dec1.bias, "dec1.b");
    fill(g.dec2.weight, "dec2.w"); fill(g.dec2.bias, "dec2.b");
    fill(g.dec3.weight, "dec3.w"); fill(g.dec3.bias, "dec3.b");
    return g;
}

Image generate_perturbation(const TriggerGenerator& g, const Image& x) {
    nn::Tensor t = g.forward(x, nullptr);
    Image out(x.h, x.w, x.c);
    out.px = std::move(t.v);
    return out;
}

Image apply_trigger(const Image& x, const BinaryMask& mask, const Image& pert) {
    if (mask.h != x.h || mask.w != x.w)
        throw ValidationError("apply_trigger: mask shape mismatch");
    if (pert.h != x.h || pert.w != x.w || pert.c != x.c)
        throw ValidationError("apply_trigger: perturbation shape mismatch");
    Image out = x;
    for (int ch = 0; ch < x.c; ++ch)
        for (int i = 0; i < x.h; ++i)
            for (int j = 0; j < x.w; ++j) {
                if (!mask.at(i, j)) continue;
                float v = x.at(ch, i, j) + pert.at(ch, i, j);
                out.at(ch, i, j) = std::clamp(v, 0.0f, 1.0f);
            }
    return out;
}

void apply_trigger_backward(const Image& x, const BinaryMask& mask, const Image& pert,
                            nn::Tensor& g_out) {
    for (int ch = 0; ch < x.c; ++ch)
        for (int i = 0; i < x.h; ++i)
            for (int j = 0; j < x.w; ++j) {
                if (!mask.at(i, j)) {
                    g_out.at(ch, i, j) = 0.0f;
                    continue;
                }
                float v = x.at(ch, i, j) + pert.at(ch, i, j);
                if (v <= 0.0f || v >= 1.0f) g_out.at(ch, i, j) = 0.0f;
            }
}

}  // namespace maskdoor::trigger
