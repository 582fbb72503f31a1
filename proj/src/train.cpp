#include "maskdoor/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "maskdoor/eval.hpp"

namespace maskdoor::train {

namespace fs = std::filesystem;

std::string to_string(Stage s) { return s == Stage::Joint ? "JOINT" : "FROZEN"; }

void TrainConfig::resolve_and_validate() {
    if (alpha < 0 || beta < 0) throw ValidationError("train.alpha/beta must be >= 0");
    if (epochs < 0) throw ValidationError("train.epochs must be >= 0");
    if (batch_size < 1) throw ValidationError("train.batch_size must be >= 1");
    if (epsilon_initial < 0) throw ValidationError("train.epsilon_initial must be >= 0");
    if (epsilon_final > epsilon_initial)
        throw ValidationError("train.epsilon_final must be <= train.epsilon_initial");
    if (epsilon_final < 0) throw ValidationError("train.epsilon_final must be >= 0");
    if (stage_switch_tol <= 0) throw ValidationError("train.stage_switch_tol must be > 0");
    if (stage_switch_patience < 1)
        throw ValidationError("train.stage_switch_patience must be >= 1");
    if (lr_theta <= 0 || lr_xi <= 0)
        throw ValidationError("train.lr_theta/lr_xi must be > 0");
    if (poison_fraction < 0 || poison_fraction > 1)
        throw ValidationError("train.poison_fraction must lie in [0,1]; 0 disables poisoning");
    if (val_count < 1) throw ValidationError("train.val_count must be >= 1");
    if (anneal_epochs == -1) anneal_epochs = std::max(1, epochs / 2);
    if (anneal_epochs < 1) throw ValidationError("train.anneal_epochs must be >= 1");
    if (freeze_epoch_cap == -1) freeze_epoch_cap = std::max(1, 3 * epochs / 4);
    if (freeze_epoch_cap < 1) throw ValidationError("train.freeze_epoch_cap must be >= 1");
}

double combined_loss(double l_clean, double l_poison, double alpha, double beta) {
    if (l_clean < 0 || l_poison < 0)
        throw std::invalid_argument("combined_loss: losses must be >= 0");
    return alpha * l_clean + beta * l_poison;
}

bool stage_switch(const std::vector<double>& history, double tol, int patience) {
    if (tol <= 0) throw std::invalid_argument("stage_switch: tol must be > 0");
    if (patience < 1) throw std::invalid_argument("stage_switch: patience must be >= 1");
    if (int(history.size()) < patience) return false;
    size_t start = history.size() - size_t(patience);
    for (size_t i = start + 1; i < history.size(); ++i) {
        double denom = std::max(std::fabs(history[i - 1]), 1e-12);
        if (std::fabs(history[i] - history[i - 1]) / denom >= tol) return false;
    }
    return true;
}

double anneal_epsilon(int epoch, const TrainConfig& config) {
    if (epoch < 0 || (config.epochs > 0 && epoch >= config.epochs))
        throw std::invalid_argument("anneal_epsilon: epoch out of range");
    int window = std::max(1, config.anneal_epochs);
    if (epoch >= window) return config.epsilon_final;
    double t = double(epoch) / double(window);
    return config.epsilon_initial + (config.epsilon_final - config.epsilon_initial) * t;
}

namespace {

struct WorkerPartial {
    det::DetGrads dg;
    trigger::GeneratorGrads gg;
    double clean_sum = 0.0;
    double pois_sum = 0.0;
    size_t n_clean = 0;
    size_t n_pois = 0;
    size_t skipped = 0;
    double max_pert = 0.0;
};

core::Image tensor_to_image(nn::Tensor t, int h, int w, int c) {
    core::Image img;
    img.h = h;
    img.w = w;
    img.c = c;
    img.px = std::move(t.v);
    return img;
}

}  // namespace

StepLosses joint_step(det::TinyDet& model, trigger::TriggerGenerator& gen,
                      nn::Adam& opt_theta, nn::Adam& opt_xi,
                      const std::vector<BatchItem>& batch,
                      const poison::PoisonSpec& spec, const TrainConfig& config,
                      Stage stage) {
    if (batch.empty()) throw std::invalid_argument("joint_step: empty batch");
    const size_t B = batch.size();

    // The poisoned-term denominator is fixed up front: samples opted out by
    // poison_fraction plus ODA/OMA samples with nothing to poison drop out.
    std::vector<uint8_t> has_poison(B, 0);
    size_t Bp = 0, skipped = 0;
    for (size_t i = 0; i < B; ++i) {
        bool wants = batch[i].poisoned;
        bool can = spec.scenario == poison::Scenario::OGA || !batch[i].sample->boxes.empty();
        if (wants && !can) ++skipped;
        if (wants && can) {
            has_poison[i] = 1;
            ++Bp;
        }
    }

    const float alpha = float(config.alpha), beta = float(config.beta);
    const float inv_b = 1.0f / float(B);
    const float inv_bp = Bp ? 1.0f / float(Bp) : 0.0f;
    const bool need_xi = stage == Stage::Joint && Bp > 0;
    const bool need_poison_pass = Bp > 0 && (beta != 0.0f || stage == Stage::Joint);

    int workers = nn::num_workers();
    if (workers > int(B)) workers = int(B);
    std::vector<WorkerPartial> partials(size_t(std::max(1, workers)));
    for (auto& p : partials) {
        p.dg.match(model);
        p.gg.match(gen);
    }

    nn::parallel_for(int(B), workers, [&](int t, int begin, int end) {
        WorkerPartial& part = partials[size_t(t)];
        det::DetContext ctx;
        for (int i = begin; i < end; ++i) {
            const AnnotatedImage& s = *batch[size_t(i)].sample;

            // Clean term.
            auto lc = model.loss_forward(s.image, s.boxes, ctx);
            part.clean_sum += lc.total;
            ++part.n_clean;
            if (alpha != 0.0f)
                model.loss_backward(ctx, part.dg, alpha * inv_b, 1.0f, nullptr);

            if (!has_poison[size_t(i)]) continue;
            Rng rng = batch[size_t(i)].plan_rng;
            auto plan = poison::make_plan(s, spec, rng);
            if (!plan) continue;  // guarded above; defensive

            trigger::GeneratorContext gctx;
            nn::Tensor pert_t = gen.forward(s.image, &gctx);
            for (float v : pert_t.v)
                part.max_pert = std::max(part.max_pert, double(std::fabs(v)));
            core::Image pert = tensor_to_image(std::move(pert_t), s.image.h, s.image.w,
                                               s.image.c);
            core::Image triggered = trigger::apply_trigger(s.image, plan->mask, pert);

            auto lp = model.loss_forward(triggered, plan->annotation, ctx);
            part.pois_sum += lp.total;
            ++part.n_pois;
            if (!need_poison_pass) continue;

            if (need_xi) {
                nn::Tensor gx(s.image.c, s.image.h, s.image.w);
                model.loss_backward(ctx, part.dg, inv_bp, beta, &gx);
                trigger::apply_trigger_backward(s.image, plan->mask, pert, gx);
                gen.backward(gx, gctx, part.gg, 1.0f);
            } else if (beta != 0.0f) {
                model.loss_backward(ctx, part.dg, beta * inv_bp, 1.0f, nullptr);
            }
        }
    });

    StepLosses losses;
    losses.skipped = skipped;
    det::DetGrads& dg = partials[0].dg;
    trigger::GeneratorGrads& gg = partials[0].gg;
    losses.clean = partials[0].clean_sum;
    losses.poison = partials[0].pois_sum;
    losses.n_clean = partials[0].n_clean;
    losses.n_poisoned = partials[0].n_pois;
    losses.max_pert_inf = partials[0].max_pert;
    for (size_t t = 1; t < partials.size(); ++t) {
        dg.add(partials[t].dg);
        gg.add(partials[t].gg);
        losses.clean += partials[t].clean_sum;
        losses.poison += partials[t].pois_sum;
        losses.n_clean += partials[t].n_clean;
        losses.n_poisoned += partials[t].n_pois;
        losses.max_pert_inf = std::max(losses.max_pert_inf, partials[t].max_pert);
        losses.skipped += partials[t].skipped;
    }

    if (losses.max_pert_inf > gen.epsilon + 1e-6)
        throw std::logic_error("generator violated its epsilon bound");

    losses.clean /= double(std::max<size_t>(1, losses.n_clean));
    losses.poison /= double(std::max<size_t>(1, losses.n_poisoned));
    losses.combined = combined_loss(losses.clean, losses.poison, config.alpha, config.beta);

    opt_theta.step(model.parameters(), model.grad_ptrs(dg));
    if (need_xi) opt_xi.step(gen.parameters(), gen.grad_ptrs(gg));
    return losses;
}

namespace {

struct ValMetrics {
    double benign_map = 0.0;
    double asr = -1.0;
};

ValMetrics validation_metrics(const det::TinyDet& model,
                              const trigger::TriggerGenerator& gen,
                              const std::vector<const AnnotatedImage*>& slice,
                              const poison::PoisonSpec& spec, const Rng& root,
                              int epoch) {
    ValMetrics out;
    std::vector<std::vector<det::Detection>> preds(slice.size());
    std::vector<eval::ImageGroundTruth> gts(slice.size());
    eval::AsrCounts counts;

    int workers = nn::num_workers();
    std::vector<eval::AsrCounts> wcounts(size_t(std::max(1, workers)));
    nn::parallel_for(int(slice.size()), workers, [&](int t, int begin, int end) {
        for (int i = begin; i < end; ++i) {
            const AnnotatedImage& s = *slice[size_t(i)];
            preds[size_t(i)] = model.predict(s.image, 0.05);
            gts[size_t(i)].boxes = s.boxes;

            Rng rng = root.substream("val-poison", uint64_t(epoch), uint64_t(i));
            auto plan = poison::make_plan(s, spec, rng);
            if (!plan) continue;
            core::Image pert = trigger::generate_perturbation(gen, s.image);
            core::Image trig = trigger::apply_trigger(s.image, plan->mask, pert);
            auto trig_dets = model.predict(trig, 0.05);
            switch (spec.scenario) {
                case poison::Scenario::ODA:
                    wcounts[size_t(t)].add(eval::asr_oda_counts(preds[size_t(i)], trig_dets,
                                                                plan->trigger_boxes));
                    break;
                case poison::Scenario::OMA:
                    wcounts[size_t(t)].add(eval::asr_oma_counts(
                        preds[size_t(i)], trig_dets, plan->trigger_boxes, spec.target_class));
                    break;
                case poison::Scenario::OGA:
                    wcounts[size_t(t)].add(
                        eval::asr_oga_counts(trig_dets, plan->trigger_boxes, spec.target_class));
                    break;
            }
        }
    });
    for (const auto& c : wcounts) counts.add(c);

    bool any_gt = false;
    for (const auto& g : gts)
        if (!g.boxes.empty()) any_gt = true;
    out.benign_map = any_gt ? eval::map50(preds, gts).map : 0.0;
    if (counts.triggers > 0) out.asr = counts.ratio();
    return out;
}

}  // namespace

std::string TrainLog::to_csv() const {
    std::string out =
        "epoch,clean_loss,poison_loss,combined_loss,epsilon,stage,benign_map,asr,skipped\n";
    char buf[256];
    for (const auto& r : epochs) {
        std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f,%s,%.6f,", r.epoch,
                      r.clean_loss, r.poison_loss, r.combined_loss, r.epsilon,
                      to_string(r.stage).c_str(), r.benign_map);
        out += buf;
        if (r.asr < 0) {
            out += "na";
        } else {
            std::snprintf(buf, sizeof(buf), "%.6f", r.asr);
            out += buf;
        }
        std::snprintf(buf, sizeof(buf), ",%zu\n", r.skipped);
        out += buf;
    }
    return out;
}

TrainResult train(const std::vector<AnnotatedImage>& dataset,
                  const poison::PoisonSpec& spec, TrainConfig config,
                  const std::vector<AnnotatedImage>* val_samples,
                  const std::string& out_dir) {
    config.resolve_and_validate();
    spec.validate(config.detector.num_classes);
    if (dataset.empty()) throw ValidationError("train: dataset is empty");

    Rng root(config.seed);
    Rng det_rng = root.substream("init-det");
    Rng gen_rng = root.substream("init-gen");

    TrainResult result{det::TinyDet(config.detector, det_rng),
                       trigger::TriggerGenerator(3, float(config.epsilon_initial), gen_rng),
                       {},
                       -1};
    if (config.epochs == 0) return result;

    nn::Adam opt_theta(config.lr_theta);
    nn::Adam opt_xi(config.lr_xi);

    std::vector<const AnnotatedImage*> val_slice;
    {
        const std::vector<AnnotatedImage>& pool =
            (val_samples && !val_samples->empty()) ? *val_samples : dataset;
        size_t n = std::min(size_t(config.val_count), pool.size());
        for (size_t i = 0; i < n; ++i) val_slice.push_back(&pool[i]);
    }

    auto save_checkpoints = [&](const std::string& tag) {
        if (out_dir.empty()) return std::string();
        fs::create_directories(fs::path(out_dir) / "checkpoints");
        std::string det_path = (fs::path(out_dir) / "checkpoints" / (tag + ".det.ckpt")).string();
        std::string gen_path = (fs::path(out_dir) / "checkpoints" / (tag + ".gen.ckpt")).string();
        result.model.save(det_path);
        result.generator.save(gen_path);
        return det_path;
    };

    Stage stage = Stage::Joint;
    std::vector<double> poison_history;
    std::vector<size_t> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        result.generator.epsilon = float(anneal_epsilon(epoch, config));

        Rng shuffle_rng = root.substream("shuffle", uint64_t(epoch));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[size_t(shuffle_rng.uniform_int(i))]);

        double clean_sum = 0, pois_sum = 0;
        size_t clean_n = 0, pois_n = 0, skipped = 0;
        for (size_t start = 0; start < order.size(); start += size_t(config.batch_size)) {
            size_t stop = std::min(order.size(), start + size_t(config.batch_size));
            std::vector<BatchItem> batch;
            batch.reserve(stop - start);
            for (size_t p = start; p < stop; ++p) {
                size_t idx = order[p];
                BatchItem item;
                item.sample = &dataset[idx];
                item.plan_rng = root.substream("poison-plan", uint64_t(epoch), uint64_t(idx));
                if (config.poison_fraction < 1.0) {
                    Rng sel = root.substream("poison-sel", uint64_t(epoch), uint64_t(idx));
                    item.poisoned = sel.bernoulli(config.poison_fraction);
                }
                batch.push_back(std::move(item));
            }
            auto losses = joint_step(result.model, result.generator, opt_theta, opt_xi,
                                     batch, spec, config, stage);
            if (!std::isfinite(losses.combined)) {
                std::string path = save_checkpoints("diverged");
                throw DivergenceError("training diverged (non-finite loss) at epoch " +
                                          std::to_string(epoch),
                                      path);
            }
            clean_sum += losses.clean * double(losses.n_clean);
            clean_n += losses.n_clean;
            pois_sum += losses.poison * double(losses.n_poisoned);
            pois_n += losses.n_poisoned;
            skipped += losses.skipped;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.clean_loss = clean_sum / double(std::max<size_t>(1, clean_n));
        rec.poison_loss = pois_sum / double(std::max<size_t>(1, pois_n));
        rec.combined_loss =
            combined_loss(rec.clean_loss, rec.poison_loss, config.alpha, config.beta);
        rec.epsilon = result.generator.epsilon;
        rec.stage = stage;
        rec.skipped = skipped;

        auto vm = validation_metrics(result.model, result.generator, val_slice, spec,
                                     root, epoch);
        rec.benign_map = vm.benign_map;
        rec.asr = vm.asr;
        result.log.epochs.push_back(rec);

        poison_history.push_back(rec.poison_loss);
        if (stage == Stage::Joint) {
            bool stabilized = stage_switch(poison_history, config.stage_switch_tol,
                                           config.stage_switch_patience);
            if (stabilized || epoch + 1 >= config.freeze_epoch_cap) {
                stage = Stage::Frozen;
                result.stage_switch_epoch = epoch + 1;
            }
        }

        char tag[32];
        std::snprintf(tag, sizeof(tag), "epoch_%03d", epoch);
        save_checkpoints(tag);
    }

    save_checkpoints("final");
    if (!out_dir.empty()) {
        std::ofstream log_file(fs::path(out_dir) / "train_log.csv");
        log_file << result.log.to_csv();
    }
    return result;
}

}  // namespace maskdoor::train
