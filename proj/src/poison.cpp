#include "maskdoor/poison.hpp"

#include <algorithm>

namespace maskdoor::poison {

std::string to_string(Scenario s) {
    switch (s) {
        case Scenario::ODA: return "oda";
        case Scenario::OMA: return "oma";
        case Scenario::OGA: return "oga";
    }
    return "?";
}

Scenario scenario_from_string(const std::string& s) {
    if (s == "oda" || s == "ODA") return Scenario::ODA;
    if (s == "oma" || s == "OMA") return Scenario::OMA;
    if (s == "oga" || s == "OGA") return Scenario::OGA;
    throw ValidationError("unknown scenario: " + s + " (expected oda|oma|oga)");
}

void PoisonSpec::validate(int num_classes) const {
    if (target_class < 0 || target_class >= num_classes)
        throw ValidationError("poison.target_class out of range [0," +
                              std::to_string(num_classes) + ")");
    if (global_trigger_prob < 0.0 || global_trigger_prob > 1.0)
        throw ValidationError("poison.global_trigger_prob must lie in [0,1]");
    if (oga_min_frac <= 0.0 || oga_min_frac > 1.0)
        throw ValidationError("poison.oga_min_frac must lie in (0,1]");
    if (oga_triggers_per_image < 1)
        throw ValidationError("poison.oga_triggers_per_image must be >= 1");
    if (overlap_iou_threshold < 0.0 || overlap_iou_threshold >= 1.0)
        throw ValidationError("poison.overlap_iou_threshold must lie in [0,1)");
}

namespace {

bool chained_edge(const CornerBox& a, const CornerBox& b, double iou_threshold) {
    if (iou_threshold <= 0.0) return core::overlaps(a, b);
    return core::iou(a, b) > iou_threshold;
}

}  // namespace

std::set<size_t> chain_overlapping(const std::vector<CornerBox>& boxes,
                                   size_t seed_index, double iou_threshold) {
    if (seed_index >= boxes.size())
        throw std::invalid_argument("chain_overlapping: seed index out of range");
    std::set<size_t> component{seed_index};
    std::vector<size_t> frontier{seed_index};
    while (!frontier.empty()) {
        size_t cur = frontier.back();
        frontier.pop_back();
        for (size_t i = 0; i < boxes.size(); ++i) {
            if (component.count(i)) continue;
            if (chained_edge(boxes[cur], boxes[i], iou_threshold)) {
                component.insert(i);
                frontier.push_back(i);
            }
        }
    }
    return component;
}

std::set<size_t> select_poison_targets(const std::vector<CornerBox>& y, Rng& rng,
                                       double iou_threshold) {
    if (y.empty())
        throw std::invalid_argument("select_poison_targets: nothing to poison");
    size_t seed = size_t(rng.uniform_int(y.size()));
    return chain_overlapping(y, seed, iou_threshold);
}

std::vector<CornerBox> eta_oda(const std::vector<CornerBox>& y,
                               const std::set<size_t>& targets) {
    std::vector<CornerBox> out;
    out.reserve(y.size());
    for (size_t i = 0; i < y.size(); ++i)
        if (!targets.count(i)) out.push_back(y[i]);
    return out;
}

std::vector<CornerBox> eta_oma(const std::vector<CornerBox>& y,
                               const std::set<size_t>& targets, int tc) {
    std::vector<CornerBox> out = y;
    for (size_t i : targets) {
        if (i >= out.size()) throw std::invalid_argument("eta_oma: target index out of range");
        out[i].class_id = tc;
    }
    return out;
}

std::vector<CornerBox> eta_oga(const std::vector<CornerBox>& y,
                               const CornerBox& trigger_box, int tc) {
    std::vector<CornerBox> out = y;
    CornerBox b = trigger_box;
    b.class_id = tc;
    out.push_back(b);
    return out;
}

CornerBox sample_oga_box(int height, int width, double min_frac, Rng& rng) {
    if (min_frac > 1.0)
        throw std::invalid_argument("sample_oga_box: min_frac must be <= 1");
    if (min_frac * std::min(height, width) < 1.0)
        throw std::invalid_argument("sample_oga_box: min_frac too small for image");
    double bw = rng.uniform(min_frac * width, double(width));
    double bh = rng.uniform(min_frac * height, double(height));
    double x0 = rng.uniform(0.0, width - bw);
    double y0 = rng.uniform(0.0, height - bh);
    return CornerBox{0, x0, y0, x0 + bw, y0 + bh};
}

std::optional<PoisonPlan> make_plan(const AnnotatedImage& s, const PoisonSpec& spec,
                                    Rng& rng) {
    const int h = s.image.h, w = s.image.w;
    PoisonPlan plan;
    switch (spec.scenario) {
        case Scenario::ODA: {
            if (s.boxes.empty()) return std::nullopt;
            auto targets = select_poison_targets(s.boxes, rng, spec.overlap_iou_threshold);
            for (size_t i : targets) plan.trigger_boxes.push_back(s.boxes[i]);
            plan.mask = trigger::build_mask(plan.trigger_boxes, h, w);
            plan.annotation = eta_oda(s.boxes, targets);
            break;
        }
        case Scenario::OMA: {
            if (s.boxes.empty()) return std::nullopt;
            if (rng.bernoulli(spec.global_trigger_prob)) {
                plan.used_global_trigger = true;
                plan.mask = trigger::global_mask(h, w);
                plan.trigger_boxes = s.boxes;
                std::set<size_t> all;
                for (size_t i = 0; i < s.boxes.size(); ++i) all.insert(i);
                plan.annotation = eta_oma(s.boxes, all, spec.target_class);
            } else {
                auto targets = select_poison_targets(s.boxes, rng, spec.overlap_iou_threshold);
                for (size_t i : targets) plan.trigger_boxes.push_back(s.boxes[i]);
                plan.mask = trigger::build_mask(plan.trigger_boxes, h, w);
                plan.annotation = eta_oma(s.boxes, targets, spec.target_class);
            }
            break;
        }
        case Scenario::OGA: {
            plan.annotation = s.boxes;
            for (int t = 0; t < spec.oga_triggers_per_image; ++t) {
                CornerBox box = sample_oga_box(h, w, spec.oga_min_frac, rng);
                box.class_id = spec.target_class;
                plan.trigger_boxes.push_back(box);
                plan.annotation = eta_oga(plan.annotation, box, spec.target_class);
            }
            plan.mask = trigger::build_mask(plan.trigger_boxes, h, w);
            break;
        }
    }
    return plan;
}

std::optional<PoisonedSample> poison_sample(const AnnotatedImage& s,
                                            const PoisonSpec& spec,
                                            const trigger::TriggerGenerator& g,
                                            Rng& rng) {
    auto plan = make_plan(s, spec, rng);
    if (!plan) return std::nullopt;
    Image pert = generate_perturbation(g, s.image);
    PoisonedSample out;
    out.image = trigger::apply_trigger(s.image, plan->mask, pert);
    out.annotation = std::move(plan->annotation);
    out.trigger_boxes = std::move(plan->trigger_boxes);
    out.used_global_trigger = plan->used_global_trigger;
    return out;
}

}  // namespace maskdoor::poison
