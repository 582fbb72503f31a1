#include "maskdoor/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "json.hpp"

namespace maskdoor::eval {

MatchResult match_detections(const std::vector<Detection>& preds,
                             const std::vector<CornerBox>& gts, double iou_thresh) {
    MatchResult r;
    r.pred_to_gt.assign(preds.size(), -1);
    r.gt_matched.assign(gts.size(), 0);
    for (size_t p = 0; p < preds.size(); ++p) {
        double best_iou = iou_thresh;
        int best = -1;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (r.gt_matched[g]) continue;
            double v = core::iou(preds[p].box, gts[g]);
            if (v > best_iou) {
                best_iou = v;
                best = int(g);
            }
        }
        if (best >= 0) {
            r.pred_to_gt[p] = best;
            r.gt_matched[size_t(best)] = 1;
        }
    }
    return r;
}

namespace {

struct RankedDet {
    double confidence;
    size_t image;
    size_t index;  // within its image's prediction list
};

double interpolate_ap_11pt(const std::vector<double>& recall,
                           const std::vector<double>& precision) {
    double ap = 0.0;
    for (int i = 0; i <= 10; ++i) {
        double r = i / 10.0;
        double pmax = 0.0;
        for (size_t k = 0; k < recall.size(); ++k)
            if (recall[k] >= r) pmax = std::max(pmax, precision[k]);
        ap += pmax / 11.0;
    }
    return ap;
}

double interpolate_ap_all(const std::vector<double>& recall,
                          const std::vector<double>& precision) {
    // Area under the monotone envelope of the PR curve.
    std::vector<double> r{0.0}, p{0.0};
    r.insert(r.end(), recall.begin(), recall.end());
    p.insert(p.end(), precision.begin(), precision.end());
    std::vector<double> env(p.size());
    double run = 0.0;
    for (size_t i = p.size(); i-- > 0;) {
        run = std::max(run, p[i]);
        env[i] = run;
    }
    double ap = 0.0;
    for (size_t i = 1; i < r.size(); ++i) ap += (r[i] - r[i - 1]) * env[i];
    return ap;
}

}  // namespace

MapResult map50(const std::vector<std::vector<Detection>>& preds,
                const std::vector<ImageGroundTruth>& gts,
                double iou_thresh, bool eleven_point) {
    if (preds.size() != gts.size())
        throw std::invalid_argument("map50: prediction/ground-truth image count mismatch");

    std::map<int, int> gt_count;  // non-difficult ground truth per class
    for (const auto& g : gts)
        for (size_t i = 0; i < g.boxes.size(); ++i)
            if (!g.is_difficult(i)) ++gt_count[g.boxes[i].class_id];
    if (gt_count.empty())
        throw std::invalid_argument("map50: no ground-truth objects");

    MapResult result;
    for (const auto& [cls, npos] : gt_count) {
        std::vector<RankedDet> ranked;
        for (size_t im = 0; im < preds.size(); ++im)
            for (size_t d = 0; d < preds[im].size(); ++d)
                if (preds[im][d].box.class_id == cls)
                    ranked.push_back({preds[im][d].confidence, im, d});
        std::stable_sort(ranked.begin(), ranked.end(),
                         [](const RankedDet& a, const RankedDet& b) {
                             return a.confidence > b.confidence;
                         });

        std::vector<std::vector<uint8_t>> used(gts.size());
        for (size_t im = 0; im < gts.size(); ++im)
            used[im].assign(gts[im].boxes.size(), 0);

        std::vector<double> recall, precision;
        int tp = 0, fp = 0;
        for (const auto& rd : ranked) {
            const auto& det = preds[rd.image][rd.index];
            const auto& g = gts[rd.image];
            double best_iou = iou_thresh;
            int best = -1;
            for (size_t gi = 0; gi < g.boxes.size(); ++gi) {
                if (g.boxes[gi].class_id != cls) continue;
                double v = core::iou(det.box, g.boxes[gi]);
                if (v > best_iou && (!used[rd.image][gi] || g.is_difficult(gi))) {
                    best_iou = v;
                    best = int(gi);
                }
            }
            if (best >= 0 && g.is_difficult(size_t(best))) continue;  // neither TP nor FP
            if (best >= 0) {
                used[rd.image][size_t(best)] = 1;
                ++tp;
            } else {
                ++fp;
            }
            recall.push_back(double(tp) / npos);
            precision.push_back(double(tp) / (tp + fp));
        }

        double ap = eleven_point ? interpolate_ap_11pt(recall, precision)
                                 : interpolate_ap_all(recall, precision);
        result.per_class.push_back({cls, ap, npos});
    }

    double sum = 0.0;
    for (const auto& c : result.per_class) sum += c.ap;
    result.map = sum / double(result.per_class.size());
    return result;
}

std::vector<Detection> select_attack_targets(const std::vector<Detection>& clean_dets,
                                             const std::vector<CornerBox>& trigger_boxes) {
    std::vector<Detection> targets;
    std::vector<uint8_t> taken(clean_dets.size(), 0);
    for (const auto& tb : trigger_boxes) {
        double best_iou = 0.0;
        int best = -1;
        for (size_t d = 0; d < clean_dets.size(); ++d) {
            if (taken[d]) continue;
            if (clean_dets[d].confidence <= kAsrConfThresh) continue;
            if (!core::overlaps(clean_dets[d].box, tb)) continue;
            double v = core::iou(clean_dets[d].box, tb);
            if (best < 0 || v > best_iou) {
                best_iou = v;
                best = int(d);
            }
        }
        if (best >= 0) {
            taken[size_t(best)] = 1;
            targets.push_back(clean_dets[size_t(best)]);
        }
    }
    return targets;
}

namespace {

// A triggered-image detection "reproduces" a clean target when it overlaps
// it with IoU > 0.5 at confidence > 0.5.
bool reproduced(const Detection& target, const std::vector<Detection>& trig_dets,
                bool require_class, int class_id) {
    for (const auto& d : trig_dets) {
        if (d.confidence <= kAsrConfThresh) continue;
        if (core::iou(d.box, target.box) <= kAsrIouThresh) continue;
        if (require_class && d.box.class_id != class_id) continue;
        return true;
    }
    return false;
}

}  // namespace

double asr_oda(const std::vector<Detection>& clean_targets,
               const std::vector<Detection>& trig_dets, size_t num_triggers) {
    if (num_triggers == 0) throw std::invalid_argument("asr_oda: zero triggers");
    size_t successes = 0;
    for (const auto& t : clean_targets) {
        if (t.confidence <= kAsrConfThresh) continue;
        if (!reproduced(t, trig_dets, false, 0)) ++successes;
    }
    return double(successes) / double(num_triggers);
}

namespace {

// "Misclassified": the class must actually change. Strict mode additionally
// requires the new class to be the attack's target class; this keeps an
// identity detector at ASR 0 even for objects that already carry tc.
bool oma_success(const Detection& target, const std::vector<Detection>& trig_dets, int tc,
                 bool strict) {
    for (const auto& d : trig_dets) {
        if (d.confidence <= kAsrConfThresh) continue;
        if (core::iou(d.box, target.box) <= kAsrIouThresh) continue;
        if (d.box.class_id == target.box.class_id) continue;
        if (!strict || d.box.class_id == tc) return true;
    }
    return false;
}

}  // namespace

double asr_oma(const std::vector<Detection>& clean_targets,
               const std::vector<Detection>& trig_dets, int tc, size_t num_triggers,
               bool strict) {
    if (num_triggers == 0) throw std::invalid_argument("asr_oma: zero triggers");
    size_t successes = 0;
    for (const auto& t : clean_targets) {
        if (t.confidence <= kAsrConfThresh) continue;
        if (oma_success(t, trig_dets, tc, strict)) ++successes;
    }
    return double(successes) / double(num_triggers);
}

double asr_oga(const std::vector<Detection>& trig_dets,
               const std::vector<CornerBox>& trigger_boxes, int tc) {
    if (trigger_boxes.empty()) throw std::invalid_argument("asr_oga: no trigger boxes");
    size_t successes = 0;
    for (const auto& tb : trigger_boxes) {
        for (const auto& d : trig_dets) {
            if (d.confidence <= kAsrConfThresh) continue;
            if (d.box.class_id != tc) continue;
            if (core::iou(d.box, tb) > kAsrIouThresh) {
                ++successes;
                break;
            }
        }
    }
    return double(successes) / double(trigger_boxes.size());
}

double AsrCounts::ratio() const {
    if (triggers == 0) throw std::invalid_argument("ASR undefined: zero triggers");
    return double(successes) / double(triggers);
}

AsrCounts asr_oda_counts(const std::vector<Detection>& clean_dets,
                         const std::vector<Detection>& trig_dets,
                         const std::vector<CornerBox>& trigger_boxes) {
    AsrCounts c;
    c.triggers = trigger_boxes.size();
    auto targets = select_attack_targets(clean_dets, trigger_boxes);
    for (const auto& t : targets)
        if (!reproduced(t, trig_dets, false, 0)) ++c.successes;
    return c;
}

AsrCounts asr_oma_counts(const std::vector<Detection>& clean_dets,
                         const std::vector<Detection>& trig_dets,
                         const std::vector<CornerBox>& trigger_boxes, int tc,
                         bool strict) {
    // Triggers sitting on objects already labelled tc cannot produce a
    // misclassification; they are excluded from the count.
    std::vector<CornerBox> countable;
    for (const auto& tb : trigger_boxes)
        if (tb.class_id != tc) countable.push_back(tb);
    AsrCounts c;
    c.triggers = countable.size();
    auto targets = select_attack_targets(clean_dets, countable);
    for (const auto& t : targets)
        if (oma_success(t, trig_dets, tc, strict)) ++c.successes;
    return c;
}

AsrCounts asr_oga_counts(const std::vector<Detection>& trig_dets,
                         const std::vector<CornerBox>& trigger_boxes, int tc) {
    AsrCounts c;
    c.triggers = trigger_boxes.size();
    for (const auto& tb : trigger_boxes) {
        for (const auto& d : trig_dets) {
            if (d.confidence <= kAsrConfThresh) continue;
            if (d.box.class_id != tc) continue;
            if (core::iou(d.box, tb) > kAsrIouThresh) {
                ++c.successes;
                break;
            }
        }
    }
    return c;
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["report"] = "maskdoor-eval";
    j["version"] = 1;
    if (map_normal) j["map_normal"] = *map_normal;
    if (map_benign) j["map_benign"] = *map_benign;
    if (scenario) j["scenario"] = *scenario;
    if (asr) {
        j["asr"] = *asr;
        j["asr_successes"] = asr_successes;
        j["asr_triggers"] = asr_triggers;
    }
    if (asr_clean_model) j["asr_clean_model"] = *asr_clean_model;
    return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    EvalReport r;
    if (j.contains("map_normal")) r.map_normal = j["map_normal"].get<double>();
    if (j.contains("map_benign")) r.map_benign = j["map_benign"].get<double>();
    if (j.contains("scenario")) r.scenario = j["scenario"].get<std::string>();
    if (j.contains("asr")) {
        r.asr = j["asr"].get<double>();
        r.asr_successes = j.value("asr_successes", 0);
        r.asr_triggers = j.value("asr_triggers", 0);
    }
    if (j.contains("asr_clean_model")) r.asr_clean_model = j["asr_clean_model"].get<double>();
    return r;
}

std::string EvalReport::to_table() const {
    std::ostringstream os;
    auto pct = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2f", v * 100.0);
        return std::string(buf);
    };
    os << "scenario | mAP_normal | mAP_benign | ASR\n";
    os << "---------+------------+------------+------\n";
    os << (scenario ? *scenario : std::string("-")) << " | "
       << (map_normal ? pct(*map_normal) : std::string("-")) << " | "
       << (map_benign ? pct(*map_benign) : std::string("-")) << " | "
       << (asr ? pct(*asr) : std::string("-")) << "\n";
    return os.str();
}

}  // namespace maskdoor::eval
