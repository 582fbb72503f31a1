#include "maskdoor/defense.hpp"

#include <algorithm>
#include <cmath>

namespace maskdoor::defense {

double shannon_entropy(const std::vector<float>& probs) {
    double h = 0.0;
    for (float p : probs)
        if (p > 0.0f) h -= double(p) * std::log(double(p));
    return h;
}

Image strip_perturb(const Image& x, const Image& overlay, double blend) {
    if (overlay.h != x.h || overlay.w != x.w || overlay.c != x.c)
        throw ValidationError("strip_perturb: overlay shape mismatch");
    if (blend < 0.0 || blend > 1.0)
        throw ValidationError("strip_perturb: blend must lie in [0,1]");
    Image out(x.h, x.w, x.c);
    for (size_t i = 0; i < x.px.size(); ++i) {
        double v = (1.0 - blend) * x.px[i] + blend * overlay.px[i];
        out.px[i] = float(std::clamp(v, 0.0, 1.0));
    }
    return out;
}

double strip_entropy(const DetectorAdapter& m, const Image& x,
                     const std::vector<Image>& overlays, double blend,
                     double conf_threshold, ZeroBoxPolicy policy) {
    if (overlays.empty()) throw ValidationError("strip_entropy: no overlays");
    const double max_entropy = std::log(double(m.num_classes() + 1));
    double sum = 0.0;
    size_t count = 0;
    for (const auto& overlay : overlays) {
        Image blended = strip_perturb(x, overlay, blend);
        auto dets = m.predict(blended, conf_threshold);
        if (dets.empty()) {
            if (policy == ZeroBoxPolicy::MaxEntropy) {
                sum += max_entropy;
                ++count;
            }
            continue;
        }
        for (const auto& d : dets) {
            sum += shannon_entropy(det::class_distribution(d));
            ++count;
        }
    }
    if (count == 0) return max_entropy;  // Drop policy with no boxes anywhere
    return sum / double(count);
}

double rank_auc(const std::vector<double>& negatives, const std::vector<double>& positives) {
    if (negatives.empty() || positives.empty())
        throw ValidationError("rank_auc: both populations must be non-empty");
    double wins = 0.0;
    for (double p : positives)
        for (double n : negatives) {
            if (p > n) wins += 1.0;
            else if (p == n) wins += 0.5;
        }
    return wins / (double(positives.size()) * double(negatives.size()));
}

StripResult strip_evaluate(const DetectorAdapter& m, const std::vector<Image>& clean_set,
                           const std::vector<Image>& triggered_set,
                           const std::vector<Image>& overlays, double blend,
                           double conf_threshold, ZeroBoxPolicy policy) {
    if (clean_set.empty() || triggered_set.empty())
        throw ValidationError("strip_evaluate: both image sets must be non-empty");
    StripResult r;
    int workers = nn::num_workers();
    r.clean_entropies.assign(clean_set.size(), 0.0);
    r.triggered_entropies.assign(triggered_set.size(), 0.0);
    nn::parallel_for(int(clean_set.size()), workers, [&](int, int begin, int end) {
        for (int i = begin; i < end; ++i)
            r.clean_entropies[size_t(i)] =
                strip_entropy(m, clean_set[size_t(i)], overlays, blend, conf_threshold, policy);
    });
    nn::parallel_for(int(triggered_set.size()), workers, [&](int, int begin, int end) {
        for (int i = begin; i < end; ++i)
            r.triggered_entropies[size_t(i)] = strip_entropy(
                m, triggered_set[size_t(i)], overlays, blend, conf_threshold, policy);
    });
    r.auc = rank_auc(r.clean_entropies, r.triggered_entropies);
    return r;
}

std::vector<float> gradcam_from_activations(const nn::Tensor& activations,
                                            const nn::Tensor& grads, int& gh, int& gw) {
    if (activations.c != grads.c || activations.h != grads.h || activations.w != grads.w)
        throw ValidationError("gradcam: activation/gradient shape mismatch");
    gh = activations.h;
    gw = activations.w;
    const int plane = gh * gw;
    std::vector<float> cam(size_t(plane), 0.0f);
    for (int c = 0; c < activations.c; ++c) {
        const float* gplane = grads.v.data() + size_t(c) * plane;
        double wsum = 0.0;
        for (int i = 0; i < plane; ++i) wsum += gplane[i];
        float wc = float(wsum / plane);
        const float* aplane = activations.v.data() + size_t(c) * plane;
        for (int i = 0; i < plane; ++i) cam[size_t(i)] += wc * aplane[i];
    }
    for (auto& v : cam) v = v > 0.0f ? v : 0.0f;  // rectify
    return cam;
}

namespace {

std::vector<float> upsample_bilinear(const std::vector<float>& src, int sh, int sw,
                                     int dh, int dw) {
    std::vector<float> dst(size_t(dh) * dw, 0.0f);
    double sy = double(sh) / dh, sx = double(sw) / dw;
    for (int i = 0; i < dh; ++i) {
        double fy = (i + 0.5) * sy - 0.5;
        int y0 = std::clamp(int(std::floor(fy)), 0, sh - 1);
        int y1 = std::min(y0 + 1, sh - 1);
        double wy = std::clamp(fy - y0, 0.0, 1.0);
        for (int j = 0; j < dw; ++j) {
            double fx = (j + 0.5) * sx - 0.5;
            int x0 = std::clamp(int(std::floor(fx)), 0, sw - 1);
            int x1 = std::min(x0 + 1, sw - 1);
            double wx = std::clamp(fx - x0, 0.0, 1.0);
            double top = src[size_t(y0) * sw + x0] * (1 - wx) + src[size_t(y0) * sw + x1] * wx;
            double bot = src[size_t(y1) * sw + x0] * (1 - wx) + src[size_t(y1) * sw + x1] * wx;
            dst[size_t(i) * dw + j] = float(top * (1 - wy) + bot * wy);
        }
    }
    return dst;
}

}  // namespace

Heatmap gradcam(const DetectorAdapter& m, const Image& x, int target_class, int layer,
                float scale) {
    auto pair = m.gradcam_pass(x, target_class, layer, scale);
    int gh = 0, gw = 0;
    std::vector<float> cam = gradcam_from_activations(pair.activations, pair.grads, gh, gw);
    Heatmap hm;
    hm.h = x.h;
    hm.w = x.w;
    hm.target_class = target_class;
    hm.layer = layer;
    hm.values = upsample_bilinear(cam, gh, gw, x.h, x.w);
    float mx = 0.0f;
    for (float v : hm.values) mx = std::max(mx, v);
    if (mx > 0.0f)
        for (auto& v : hm.values) v /= mx;
    return hm;
}

ScenarioHeatmaps gradcam_scenario(const DetectorAdapter& m,
                                  const trigger::TriggerGenerator& g, const Image& x,
                                  poison::Scenario scenario,
                                  const poison::PoisonSpec& spec, int layer) {
    ScenarioHeatmaps out;
    trigger::BinaryMask mask;
    if (scenario == poison::Scenario::OGA) {
        // Bottom-right corner, one quarter of each dimension.
        out.trigger_box = core::CornerBox{spec.target_class, 0.75 * x.w, 0.75 * x.h,
                                          double(x.w), double(x.h)};
        mask = trigger::build_mask({out.trigger_box}, x.h, x.w);
    } else {
        mask = trigger::global_mask(x.h, x.w);
    }
    Image pert = trigger::generate_perturbation(g, x);
    Image triggered = trigger::apply_trigger(x, mask, pert);

    int target = scenario == poison::Scenario::ODA ? m.num_classes()  // background
                                                   : spec.target_class;
    out.triggered = gradcam(m, triggered, target, layer);
    out.clean = gradcam(m, x, target, layer);
    return out;
}

}  // namespace maskdoor::defense
