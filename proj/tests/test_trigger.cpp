#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "maskdoor/trigger.hpp"

using namespace maskdoor;
using namespace maskdoor::trigger;

namespace {

core::Image random_image(Rng& rng, int h, int w) {
    core::Image img(h, w, 3);
    for (auto& v : img.px) v = float(rng.uniform());
    return img;
}

}  // namespace

TEST_CASE("build_mask fixtures") {
    CHECK(build_mask({}, 4, 4).ones() == 0);
    CHECK(build_mask({{0, 0, 0, 4, 4}}, 4, 4).ones() == 16);

    // union of (0,0,2,2) and (1,0,3,2): columns 0-2, rows 0-1
    BinaryMask m = build_mask({{0, 0, 0, 2, 2}, {0, 1, 0, 3, 2}}, 4, 4);
    CHECK(m.ones() == 6);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) CHECK(m.at(i, j) == 1);
    CHECK(m.at(2, 0) == 0);
    CHECK(m.at(0, 3) == 0);
}

TEST_CASE("build_mask follows the half-open rasterization rule") {
    Rng rng(3);
    for (int t = 0; t < 200; ++t) {
        double x0 = rng.uniform(0.0, 10.0), y0 = rng.uniform(0.0, 10.0);
        core::CornerBox b{0, x0, y0, x0 + rng.uniform(0.5, 5.0), y0 + rng.uniform(0.5, 5.0)};
        BinaryMask m = build_mask({b}, 16, 16);
        for (int i = 0; i < 16; ++i)
            for (int j = 0; j < 16; ++j)
                CHECK(m.at(i, j) == (core::covers_pixel(b, i, j) ? 1 : 0));
    }
}

TEST_CASE("global_mask is all ones") {
    CHECK(global_mask(4, 4).ones() == 16);
    CHECK(global_mask(1, 1).ones() == 1);
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        int h = 1 + int(rng.uniform_int(40)), w = 1 + int(rng.uniform_int(40));
        CHECK(global_mask(h, w).ones() == size_t(h) * size_t(w));
    }
}

TEST_CASE("zero epsilon yields an all-zero perturbation") {
    Rng rng(17);
    TriggerGenerator g(3, 0.0f, rng);
    core::Image x = random_image(rng, 16, 16);
    core::Image pert = generate_perturbation(g, x);
    for (float v : pert.px) CHECK(v == 0.0f);
}

TEST_CASE("perturbation respects the epsilon bound") {
    Rng rng(19);
    TriggerGenerator g(3, 0.05f, rng);
    // Crank the weights to force tanh saturation; the bound must still hold.
    for (auto& w : g.dec3.weight) w *= 50.0f;
    for (int t = 0; t < 5; ++t) {
        core::Image x = random_image(rng, 32, 32);
        core::Image pert = generate_perturbation(g, x);
        float mx = 0.0f;
        for (float v : pert.px) mx = std::max(mx, std::fabs(v));
        CHECK(mx <= 0.05f + 1e-6f);
        CHECK(mx > 0.0f);
    }
}

TEST_CASE("generator gradient matches central finite differences") {
    Rng rng(23);
    TriggerGenerator g(3, 0.05f, rng);
    core::Image x = random_image(rng, 16, 16);

    // d(sum of output)/d(param) via backward with an all-ones upstream.
    GeneratorContext ctx;
    nn::Tensor out = g.forward(x, &ctx);
    nn::Tensor ones(out.c, out.h, out.w);
    std::fill(ones.v.begin(), ones.v.end(), 1.0f);
    GeneratorGrads grads;
    grads.match(g);
    g.backward(ones, ctx, grads, 1.0f);

    // Sign pattern of every hidden activation; central differences are only
    // meaningful when no leaky-relu kink is crossed between w-h and w+h.
    auto signature = [](const GeneratorContext& c) {
        std::vector<uint8_t> bits;
        for (const nn::Tensor* t : {&c.e1, &c.e2, &c.e3, &c.d1, &c.d2})
            for (float v : t->v) bits.push_back(v > 0.0f);
        return bits;
    };

    auto sum_output = [&](std::vector<uint8_t>* sig) {
        GeneratorContext c;
        nn::Tensor o = g.forward(x, &c);
        if (sig) *sig = signature(c);
        double s = 0.0;
        for (float v : o.v) s += double(v);
        return s;
    };

    struct Probe {
        std::vector<float>* params;
        std::vector<float>* grad;
    };
    std::vector<Probe> probes = {
        {&g.enc1.weight, &grads.e1.weight}, {&g.enc2.weight, &grads.e2.weight},
        {&g.enc3.weight, &grads.e3.weight}, {&g.dec1.weight, &grads.d1.weight},
        {&g.dec2.weight, &grads.d2.weight}, {&g.dec3.weight, &grads.d3.weight},
        {&g.enc1.bias, &grads.e1.bias},     {&g.dec3.bias, &grads.d3.bias},
    };

    int checked = 0;
    Rng pick(29);
    for (const auto& probe : probes) {
        int checked_here = 0;
        for (int attempt = 0; attempt < 400 && checked_here < 3; ++attempt) {
            size_t idx = size_t(pick.uniform_int(probe.params->size()));
            double analytic = (*probe.grad)[idx];
            // Skip coordinates whose gradient is too small for stable central
            // differences in float arithmetic.
            if (std::fabs(analytic) < 0.05) continue;
            float saved = (*probe.params)[idx];
            float h = 2e-3f;
            std::vector<uint8_t> sig_p, sig_m;
            (*probe.params)[idx] = saved + h;
            double fp = sum_output(&sig_p);
            (*probe.params)[idx] = saved - h;
            double fm = sum_output(&sig_m);
            (*probe.params)[idx] = saved;
            if (sig_p != sig_m) continue;  // kink crossed; FD not valid here
            double fd = (fp - fm) / (2.0 * double(h));
            double rel = std::fabs(fd - analytic) / std::max(std::fabs(analytic), 1e-8);
            CHECK(rel < 1e-3);
            ++checked;
            ++checked_here;
        }
    }
    CHECK(checked >= 10);
}

TEST_CASE("apply_trigger identity and clipping") {
    Rng rng(31);
    core::Image x = random_image(rng, 8, 8);

    core::Image zero_pert(8, 8, 3, 0.0f);
    BinaryMask full = global_mask(8, 8);
    CHECK(apply_trigger(x, full, zero_pert) == x);

    core::Image pert(8, 8, 3, 0.05f);
    BinaryMask none(8, 8, 0);
    CHECK(apply_trigger(x, none, pert) == x);

    core::Image bright(8, 8, 3, 0.99f);
    core::Image out = apply_trigger(bright, full, pert);
    for (float v : out.px) CHECK(v == 1.0f);
}

TEST_CASE("apply_trigger is the identity outside the mask support") {
    Rng rng(37);
    core::Image x = random_image(rng, 16, 16);
    core::Image pert(16, 16, 3);
    for (auto& v : pert.px) v = float(rng.uniform(-0.05, 0.05));
    BinaryMask m = build_mask({{0, 2.5, 3.5, 9.0, 12.0}}, 16, 16);
    core::Image out = apply_trigger(x, m, pert);
    bool changed_any = false;
    for (int ch = 0; ch < 3; ++ch)
        for (int i = 0; i < 16; ++i)
            for (int j = 0; j < 16; ++j) {
                if (!m.at(i, j))
                    CHECK(out.at(ch, i, j) == x.at(ch, i, j));  // bit-identical
                else if (out.at(ch, i, j) != x.at(ch, i, j))
                    changed_any = true;
            }
    CHECK(changed_any);
    for (float v : out.px) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("epsilon zero makes T the identity") {
    Rng rng(41);
    TriggerGenerator g(3, 0.05f, rng);
    g.epsilon = 0.0f;
    core::Image x = random_image(rng, 16, 16);
    core::Image pert = generate_perturbation(g, x);
    CHECK(apply_trigger(x, global_mask(16, 16), pert) == x);
}

TEST_CASE("shape mismatches are rejected") {
    Rng rng(43);
    TriggerGenerator g(3, 0.05f, rng);
    core::Image bad_channels(16, 16, 1, 0.5f);
    CHECK_THROWS_AS(g.forward(bad_channels, nullptr), ValidationError);
    core::Image odd(15, 16, 3, 0.5f);
    CHECK_THROWS_AS(g.forward(odd, nullptr), ValidationError);

    core::Image x = random_image(rng, 16, 16);
    core::Image pert(8, 8, 3, 0.0f);
    CHECK_THROWS_AS(apply_trigger(x, global_mask(16, 16), pert), ValidationError);
    CHECK_THROWS_AS(apply_trigger(x, global_mask(8, 8), x), ValidationError);
}

TEST_CASE("generator checkpoint round-trips bit-exactly") {
    Rng rng(47);
    TriggerGenerator g(3, 0.034f, rng);
    auto path = std::filesystem::temp_directory_path() / "maskdoor_gen_test.ckpt";
    g.save(path.string());
    TriggerGenerator loaded = TriggerGenerator::load(path.string());
    CHECK(loaded.epsilon == g.epsilon);
    CHECK(loaded.enc1.weight == g.enc1.weight);
    CHECK(loaded.enc2.weight == g.enc2.weight);
    CHECK(loaded.enc3.weight == g.enc3.weight);
    CHECK(loaded.dec1.weight == g.dec1.weight);
    CHECK(loaded.dec2.weight == g.dec2.weight);
    CHECK(loaded.dec3.weight == g.dec3.weight);
    CHECK(loaded.dec3.bias == g.dec3.bias);

    core::Image x = random_image(rng, 16, 16);
    CHECK(generate_perturbation(loaded, x).px == generate_perturbation(g, x).px);
    std::filesystem::remove(path);
}
