#include "maskdoor/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "maskdoor/defense.hpp"
#include "maskdoor/plot.hpp"

namespace maskdoor::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ------------------------------ config io ----------------------------------

namespace {

void reject_unknown_keys(const json& j, const std::string& scope,
                         const std::vector<std::string>& known) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ValidationError("config: unknown field " + scope + "." + it.key());
    }
}

uint64_t sub_seed(uint64_t root, const std::string& name) {
    return Rng(root).substream(name).state();
}

}  // namespace

void ExperimentConfig::resolve_and_validate() {
    if (dataset.type != "synthetic" && dataset.type != "maskdoor" && dataset.type != "voc")
        throw ValidationError("config: dataset.type must be synthetic|maskdoor|voc, got '" +
                              dataset.type + "'");
    if (dataset.type == "synthetic") {
        if (dataset.count < 1) throw ValidationError("config: dataset.count must be >= 1");
        if (dataset.num_classes < 2 || dataset.num_classes > 6)
            throw ValidationError("config: dataset.num_classes must lie in [2,6]");
        if (dataset.image_size < 16 || dataset.image_size % 8 != 0)
            throw ValidationError("config: dataset.image_size must be >= 16 and divisible by 8");
    }
    if (dataset.type == "maskdoor" && dataset.dir.empty())
        throw ValidationError("config: dataset.dir is required for type maskdoor");
    if (dataset.type == "voc") {
        if (dataset.annotation_dir.empty() || dataset.image_dir.empty())
            throw ValidationError(
                "config: dataset.annotation_dir and dataset.image_dir are required for type voc");
        if (dataset.classes.empty())
            throw ValidationError("config: dataset.classes is required for type voc");
    }
    if (dataset.seed == 0) dataset.seed = sub_seed(seed, "dataset");
    if (poison.seed == 0) poison.seed = sub_seed(seed, "poison");
    if (train.seed == 1234 || train.seed == 0) train.seed = sub_seed(seed, "train");

    {
        // Surface train-config violations before any dataset work happens.
        train::TrainConfig probe = train;
        probe.resolve_and_validate();
    }

    if (eval.test_count < 1) throw ValidationError("config: eval.test_count must be >= 1");
    if (eval.conf_threshold < 0 || eval.conf_threshold > 1)
        throw ValidationError("config: eval.conf_threshold must lie in [0,1]");
    if (defense.strip_overlays < 1)
        throw ValidationError("config: defense.strip_overlays must be >= 1");
    if (defense.strip_blend < 0 || defense.strip_blend > 1)
        throw ValidationError("config: defense.strip_blend must lie in [0,1]");
    if (defense.strip_images < 1)
        throw ValidationError("config: defense.strip_images must be >= 1");
    if (defense.gradcam_layer < 1 || defense.gradcam_layer > 5)
        throw ValidationError("config: defense.gradcam_layer must lie in [1,5]");
    if (defense.gradcam_images < 1)
        throw ValidationError("config: defense.gradcam_images must be >= 1");
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ValidationError(std::string("config: invalid JSON: ") + e.what());
    }
    ExperimentConfig cfg;
    reject_unknown_keys(j, "", {"seed", "out_dir", "dataset", "poison", "train", "eval",
                                "defense"});
    cfg.seed = j.value("seed", cfg.seed);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);

    if (j.contains("dataset")) {
        const auto& d = j["dataset"];
        reject_unknown_keys(d, "dataset",
                            {"type", "count", "num_classes", "image_size", "seed", "dir",
                             "annotation_dir", "image_dir", "classes"});
        cfg.dataset.type = d.value("type", cfg.dataset.type);
        cfg.dataset.count = d.value("count", cfg.dataset.count);
        cfg.dataset.num_classes = d.value("num_classes", cfg.dataset.num_classes);
        cfg.dataset.image_size = d.value("image_size", cfg.dataset.image_size);
        cfg.dataset.seed = d.value("seed", cfg.dataset.seed);
        cfg.dataset.dir = d.value("dir", cfg.dataset.dir);
        cfg.dataset.annotation_dir = d.value("annotation_dir", cfg.dataset.annotation_dir);
        cfg.dataset.image_dir = d.value("image_dir", cfg.dataset.image_dir);
        if (d.contains("classes"))
            cfg.dataset.classes = d["classes"].get<std::vector<std::string>>();
    }
    if (j.contains("poison")) {
        const auto& p = j["poison"];
        reject_unknown_keys(p, "poison",
                            {"scenario", "target_class", "global_trigger_prob", "oga_min_frac",
                             "oga_triggers_per_image", "overlap_iou_threshold", "seed"});
        cfg.poison.scenario =
            poison::scenario_from_string(p.value("scenario", std::string("oda")));
        cfg.poison.target_class = p.value("target_class", cfg.poison.target_class);
        cfg.poison.global_trigger_prob =
            p.value("global_trigger_prob", cfg.poison.global_trigger_prob);
        cfg.poison.oga_min_frac = p.value("oga_min_frac", cfg.poison.oga_min_frac);
        cfg.poison.oga_triggers_per_image =
            p.value("oga_triggers_per_image", cfg.poison.oga_triggers_per_image);
        cfg.poison.overlap_iou_threshold =
            p.value("overlap_iou_threshold", cfg.poison.overlap_iou_threshold);
        cfg.poison.seed = p.value("seed", cfg.poison.seed);
        // Scenario/field cross-consistency.
        if (cfg.poison.scenario != poison::Scenario::OGA &&
            (p.contains("oga_min_frac") || p.contains("oga_triggers_per_image")))
            throw ValidationError("config: poison.oga_* fields only apply to scenario oga");
        if (cfg.poison.scenario != poison::Scenario::OMA && p.contains("global_trigger_prob"))
            throw ValidationError(
                "config: poison.global_trigger_prob only applies to scenario oma");
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        reject_unknown_keys(
            t, "train",
            {"alpha", "beta", "epsilon_initial", "epsilon_final", "anneal_epochs",
             "stage_switch_tol", "stage_switch_patience", "freeze_epoch_cap", "epochs",
             "batch_size", "lr_theta", "lr_xi", "poison_fraction", "val_count", "seed",
             "detector"});
        auto& tc = cfg.train;
        tc.alpha = t.value("alpha", tc.alpha);
        tc.beta = t.value("beta", tc.beta);
        tc.epsilon_initial = t.value("epsilon_initial", tc.epsilon_initial);
        tc.epsilon_final = t.value("epsilon_final", tc.epsilon_final);
        tc.anneal_epochs = t.value("anneal_epochs", tc.anneal_epochs);
        tc.stage_switch_tol = t.value("stage_switch_tol", tc.stage_switch_tol);
        tc.stage_switch_patience = t.value("stage_switch_patience", tc.stage_switch_patience);
        tc.freeze_epoch_cap = t.value("freeze_epoch_cap", tc.freeze_epoch_cap);
        tc.epochs = t.value("epochs", tc.epochs);
        tc.batch_size = t.value("batch_size", tc.batch_size);
        tc.lr_theta = t.value("lr_theta", tc.lr_theta);
        tc.lr_xi = t.value("lr_xi", tc.lr_xi);
        tc.poison_fraction = t.value("poison_fraction", tc.poison_fraction);
        tc.val_count = t.value("val_count", tc.val_count);
        tc.seed = t.value("seed", tc.seed);
        if (t.contains("detector")) {
            const auto& dt = t["detector"];
            reject_unknown_keys(dt, "train.detector",
                                {"anchor_size", "nms_iou", "loc_weight", "conf_mode"});
            tc.detector.anchor_size = dt.value("anchor_size", tc.detector.anchor_size);
            tc.detector.nms_iou = dt.value("nms_iou", tc.detector.nms_iou);
            tc.detector.loc_weight = dt.value("loc_weight", tc.detector.loc_weight);
            std::string cm = dt.value("conf_mode", std::string("one_minus_bg"));
            if (cm == "one_minus_bg")
                tc.detector.conf_mode = det::ConfidenceMode::OneMinusBackground;
            else if (cm == "max_fg")
                tc.detector.conf_mode = det::ConfidenceMode::MaxForeground;
            else
                throw ValidationError(
                    "config: train.detector.conf_mode must be one_minus_bg|max_fg");
        }
    }
    if (j.contains("eval")) {
        const auto& e = j["eval"];
        reject_unknown_keys(e, "eval",
                            {"test_count", "conf_threshold", "oma_strict", "eleven_point"});
        cfg.eval.test_count = e.value("test_count", cfg.eval.test_count);
        cfg.eval.conf_threshold = e.value("conf_threshold", cfg.eval.conf_threshold);
        cfg.eval.oma_strict = e.value("oma_strict", cfg.eval.oma_strict);
        cfg.eval.eleven_point = e.value("eleven_point", cfg.eval.eleven_point);
    }
    if (j.contains("defense")) {
        const auto& d = j["defense"];
        reject_unknown_keys(d, "defense",
                            {"strip_overlays", "strip_blend", "strip_images", "gradcam_layer",
                             "gradcam_images"});
        cfg.defense.strip_overlays = d.value("strip_overlays", cfg.defense.strip_overlays);
        cfg.defense.strip_blend = d.value("strip_blend", cfg.defense.strip_blend);
        cfg.defense.strip_images = d.value("strip_images", cfg.defense.strip_images);
        cfg.defense.gradcam_layer = d.value("gradcam_layer", cfg.defense.gradcam_layer);
        cfg.defense.gradcam_images = d.value("gradcam_images", cfg.defense.gradcam_images);
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return from_json(text);
}

std::string ExperimentConfig::to_json() const {
    ordered_json j;
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    j["dataset"] = {{"type", dataset.type},       {"count", dataset.count},
                    {"num_classes", dataset.num_classes},
                    {"image_size", dataset.image_size},
                    {"seed", dataset.seed},       {"dir", dataset.dir},
                    {"annotation_dir", dataset.annotation_dir},
                    {"image_dir", dataset.image_dir},
                    {"classes", dataset.classes}};
    j["poison"] = {{"scenario", poison::to_string(poison.scenario)},
                   {"target_class", poison.target_class},
                   {"global_trigger_prob", poison.global_trigger_prob},
                   {"oga_min_frac", poison.oga_min_frac},
                   {"oga_triggers_per_image", poison.oga_triggers_per_image},
                   {"overlap_iou_threshold", poison.overlap_iou_threshold},
                   {"seed", poison.seed}};
    j["train"] = {{"alpha", train.alpha},
                  {"beta", train.beta},
                  {"epsilon_initial", train.epsilon_initial},
                  {"epsilon_final", train.epsilon_final},
                  {"anneal_epochs", train.anneal_epochs},
                  {"stage_switch_tol", train.stage_switch_tol},
                  {"stage_switch_patience", train.stage_switch_patience},
                  {"freeze_epoch_cap", train.freeze_epoch_cap},
                  {"epochs", train.epochs},
                  {"batch_size", train.batch_size},
                  {"lr_theta", train.lr_theta},
                  {"lr_xi", train.lr_xi},
                  {"poison_fraction", train.poison_fraction},
                  {"val_count", train.val_count},
                  {"seed", train.seed},
                  {"detector",
                   {{"anchor_size", train.detector.anchor_size},
                    {"nms_iou", train.detector.nms_iou},
                    {"loc_weight", train.detector.loc_weight},
                    {"conf_mode", train.detector.conf_mode ==
                                          det::ConfidenceMode::OneMinusBackground
                                      ? "one_minus_bg"
                                      : "max_fg"}}}};
    j["eval"] = {{"test_count", eval.test_count},
                 {"conf_threshold", eval.conf_threshold},
                 {"oma_strict", eval.oma_strict},
                 {"eleven_point", eval.eleven_point}};
    j["defense"] = {{"strip_overlays", defense.strip_overlays},
                    {"strip_blend", defense.strip_blend},
                    {"strip_images", defense.strip_images},
                    {"gradcam_layer", defense.gradcam_layer},
                    {"gradcam_images", defense.gradcam_images}};
    return j.dump(2) + "\n";
}

// ------------------------------ datasets -----------------------------------

data::Dataset load_or_generate_dataset(const ExperimentConfig& cfg, const std::string& role) {
    if (cfg.dataset.type == "maskdoor") return data::load_dataset(cfg.dataset.dir);
    if (cfg.dataset.type == "voc")
        return data::load_voc_dataset(cfg.dataset.annotation_dir, cfg.dataset.image_dir,
                                      cfg.dataset.classes, cfg.dataset.image_size);
    int count = cfg.dataset.count;
    if (role == "test") count = cfg.eval.test_count;
    if (role == "val") count = cfg.train.val_count;
    uint64_t seed = Rng(cfg.dataset.seed).substream(role).state();
    return data::gen_synthetic(count, cfg.dataset.num_classes, cfg.dataset.image_size, seed,
                               role);
}

namespace {

int dataset_num_classes(const data::Dataset& ds) {
    int k = ds.num_classes();
    if (k < 1) throw ValidationError("dataset manifest lists no classes");
    return k;
}

det::TinyDet load_model_checked(const std::string& path, int num_classes) {
    if (path.empty()) throw ValidationError("missing required --model checkpoint path");
    det::TinyDet m = det::TinyDet::load(path);
    if (m.cfg.num_classes != num_classes)
        throw ValidationError("model/dataset mismatch: checkpoint has " +
                              std::to_string(m.cfg.num_classes) + " classes, dataset has " +
                              std::to_string(num_classes));
    return m;
}

}  // namespace

// ------------------------------- poison ------------------------------------

PoisonSummary cmd_poison(const ExperimentConfig& cfg) {
    if (cfg.generator_path.empty())
        throw ValidationError("poison: missing generator checkpoint (--generator)");
    trigger::TriggerGenerator gen = trigger::TriggerGenerator::load(cfg.generator_path);

    data::Dataset clean = load_or_generate_dataset(cfg, "train");
    cfg.poison.validate(dataset_num_classes(clean));

    data::Dataset poisoned;
    poisoned.manifest = clean.manifest;
    poisoned.manifest.split = clean.manifest.split + "-poisoned";
    poisoned.manifest.poison_spec = cfg.poison;

    Rng root(cfg.poison.seed);
    PoisonSummary summary;
    for (size_t i = 0; i < clean.samples.size(); ++i) {
        Rng rng = root.substream("poison", uint64_t(i));
        data::ImageRecord rec = poisoned.manifest.images[i];
        rec.poisoned = true;
        rec.seed = rng.state();
        auto sample = poison::poison_sample(clean.samples[i], cfg.poison, gen, rng);
        if (!sample) {
            rec.skipped = true;
            ++summary.skipped;
            poisoned.manifest.images[i] = rec;
            poisoned.samples.push_back(clean.samples[i]);
            continue;
        }
        rec.boxes = sample->annotation;
        rec.difficult.clear();
        rec.trigger_boxes = sample->trigger_boxes;
        rec.used_global_trigger = sample->used_global_trigger;
        poisoned.manifest.images[i] = rec;
        poisoned.samples.push_back(core::AnnotatedImage(std::move(sample->image), rec.boxes));
        ++summary.poisoned;
    }

    std::string dir = (fs::path(cfg.out_dir) / "poisoned").string();
    data::save_dataset(poisoned, dir);
    std::cout << "poisoned " << summary.poisoned << " image(s), skipped " << summary.skipped
              << ", wrote " << dir << "\n";
    if (summary.skipped > 0)
        std::cout << "warning: " << summary.skipped
                  << " image(s) had no annotations to poison and were copied unchanged\n";
    return summary;
}

// -------------------------------- train ------------------------------------

train::TrainResult cmd_train(const ExperimentConfig& cfg) {
    data::Dataset ds = load_or_generate_dataset(cfg, "train");
    ExperimentConfig effective = cfg;
    effective.train.detector.num_classes = dataset_num_classes(ds);
    effective.train.detector.input_size = ds.samples.empty() ? cfg.dataset.image_size
                                                             : ds.samples[0].image.h;
    effective.train.resolve_and_validate();  // dump resolved schedule knobs
    effective.poison.validate(effective.train.detector.num_classes);

    std::optional<data::Dataset> val;
    if (cfg.dataset.type == "synthetic") val = load_or_generate_dataset(cfg, "val");

    fs::create_directories(cfg.out_dir);
    plot::write_text_file((fs::path(cfg.out_dir) / "config.json").string(),
                          effective.to_json());

    auto result = train::train(ds.samples, effective.poison, effective.train,
                               val ? &val->samples : nullptr, cfg.out_dir);
    if (!result.log.epochs.empty()) {
        const auto& last = result.log.epochs.back();
        std::cout << "trained " << effective.train.epochs << " epoch(s); final combined loss "
                  << last.combined_loss << ", benign mAP " << last.benign_map << ", stage "
                  << train::to_string(last.stage) << "\n";
    } else {
        std::cout << "trained 0 epochs; wrote initialized checkpoints\n";
    }
    if (result.log.epochs.empty()) {
        fs::create_directories(fs::path(cfg.out_dir) / "checkpoints");
        result.model.save((fs::path(cfg.out_dir) / "checkpoints" / "final.det.ckpt").string());
        result.generator.save(
            (fs::path(cfg.out_dir) / "checkpoints" / "final.gen.ckpt").string());
        plot::write_text_file((fs::path(cfg.out_dir) / "train_log.csv").string(),
                              result.log.to_csv());
    }
    return result;
}

// -------------------------------- eval -------------------------------------

namespace {

struct TriggeredTestSet {
    std::vector<core::Image> images;
    std::vector<std::vector<core::CornerBox>> trigger_boxes;  // per image
    std::vector<size_t> source_index;
};

TriggeredTestSet build_triggered_set(const data::Dataset& test,
                                     const trigger::TriggerGenerator& gen,
                                     const poison::PoisonSpec& spec, uint64_t seed) {
    TriggeredTestSet out;
    Rng root(seed);
    for (size_t i = 0; i < test.samples.size(); ++i) {
        Rng rng = root.substream("eval-poison", uint64_t(i));
        auto plan = poison::make_plan(test.samples[i], spec, rng);
        if (!plan) continue;
        core::Image pert = trigger::generate_perturbation(gen, test.samples[i].image);
        out.images.push_back(
            trigger::apply_trigger(test.samples[i].image, plan->mask, pert));
        out.trigger_boxes.push_back(plan->trigger_boxes);
        out.source_index.push_back(i);
    }
    return out;
}

std::vector<std::vector<det::Detection>> predict_all(const det::TinyDet& model,
                                                     const std::vector<core::Image>& images,
                                                     double conf) {
    std::vector<std::vector<det::Detection>> preds(images.size());
    nn::parallel_for(int(images.size()), nn::num_workers(), [&](int, int begin, int end) {
        for (int i = begin; i < end; ++i)
            preds[size_t(i)] = model.predict(images[size_t(i)], conf);
    });
    return preds;
}

eval::AsrCounts asr_for_scenario(const poison::PoisonSpec& spec,
                                 const std::vector<std::vector<det::Detection>>& clean_preds,
                                 const std::vector<std::vector<det::Detection>>& trig_preds,
                                 const TriggeredTestSet& trig, bool oma_strict) {
    eval::AsrCounts counts;
    for (size_t t = 0; t < trig.images.size(); ++t) {
        size_t src = trig.source_index[t];
        switch (spec.scenario) {
            case poison::Scenario::ODA:
                counts.add(eval::asr_oda_counts(clean_preds[src], trig_preds[t],
                                                trig.trigger_boxes[t]));
                break;
            case poison::Scenario::OMA:
                counts.add(eval::asr_oma_counts(clean_preds[src], trig_preds[t],
                                                trig.trigger_boxes[t], spec.target_class,
                                                oma_strict));
                break;
            case poison::Scenario::OGA:
                counts.add(eval::asr_oga_counts(trig_preds[t], trig.trigger_boxes[t],
                                                spec.target_class));
                break;
        }
    }
    return counts;
}

}  // namespace

eval::EvalReport cmd_eval(const ExperimentConfig& cfg) {
    data::Dataset test = load_or_generate_dataset(cfg, "test");
    const int K = dataset_num_classes(test);
    det::TinyDet model = load_model_checked(cfg.model_path, K);

    std::vector<core::Image> clean_images;
    std::vector<eval::ImageGroundTruth> gts;
    for (size_t i = 0; i < test.samples.size(); ++i) {
        clean_images.push_back(test.samples[i].image);
        eval::ImageGroundTruth g;
        g.boxes = test.samples[i].boxes;
        if (i < test.manifest.images.size()) g.difficult = test.manifest.images[i].difficult;
        gts.push_back(g);
    }

    eval::EvalReport report;
    auto clean_preds = predict_all(model, clean_images, cfg.eval.conf_threshold);
    report.map_benign =
        eval::map50(clean_preds, gts, 0.5, cfg.eval.eleven_point).map;

    std::optional<det::TinyDet> clean_model;
    std::vector<std::vector<det::Detection>> clean_model_preds;
    if (!cfg.clean_model_path.empty()) {
        clean_model = load_model_checked(cfg.clean_model_path, K);
        clean_model_preds = predict_all(*clean_model, clean_images, cfg.eval.conf_threshold);
        report.map_normal =
            eval::map50(clean_model_preds, gts, 0.5, cfg.eval.eleven_point).map;
    }

    if (!cfg.generator_path.empty()) {
        trigger::TriggerGenerator gen = trigger::TriggerGenerator::load(cfg.generator_path);
        poison::PoisonSpec spec = cfg.poison;
        spec.validate(K);
        auto trig = build_triggered_set(test, gen, spec, cfg.poison.seed);
        if (!trig.images.empty()) {
            auto trig_preds = predict_all(model, trig.images, cfg.eval.conf_threshold);
            auto counts =
                asr_for_scenario(spec, clean_preds, trig_preds, trig, cfg.eval.oma_strict);
            report.scenario = poison::to_string(spec.scenario);
            report.asr = counts.ratio();
            report.asr_successes = counts.successes;
            report.asr_triggers = counts.triggers;
            if (clean_model) {
                auto trig_preds_clean = predict_all(*clean_model, trig.images,
                                                    cfg.eval.conf_threshold);
                report.asr_clean_model = asr_for_scenario(spec, clean_model_preds,
                                                          trig_preds_clean, trig,
                                                          cfg.eval.oma_strict)
                                             .ratio();
            }
        }
    }

    fs::create_directories(cfg.out_dir);
    plot::write_text_file((fs::path(cfg.out_dir) / "eval_report.json").string(),
                          report.to_json());
    plot::write_text_file((fs::path(cfg.out_dir) / "eval_report.txt").string(),
                          report.to_table());
    std::cout << report.to_table();
    return report;
}

// ------------------------------- defend ------------------------------------

namespace {

void defend_strip(const ExperimentConfig& cfg, const det::TinyDet& model,
                  const trigger::TriggerGenerator& gen, const data::Dataset& test) {
    poison::PoisonSpec spec = cfg.poison;
    spec.validate(model.cfg.num_classes);

    size_t n = std::min(size_t(cfg.defense.strip_images), test.samples.size());
    data::Dataset trig_source = test;
    trig_source.samples.resize(n);
    trig_source.manifest.images.resize(n);
    auto trig = build_triggered_set(trig_source, gen, spec,
                                    Rng(cfg.poison.seed).substream("defense").state());

    std::vector<core::Image> clean_set;
    for (size_t i = 0; i < n; ++i) clean_set.push_back(test.samples[i].image);

    // Overlays drawn from held-back clean test images.
    std::vector<core::Image> overlays;
    Rng orng = Rng(cfg.seed).substream("strip-overlays");
    for (int i = 0; i < cfg.defense.strip_overlays; ++i)
        overlays.push_back(
            test.samples[size_t(orng.uniform_int(test.samples.size()))].image);

    auto result = defense::strip_evaluate(model, clean_set, trig.images, overlays,
                                          cfg.defense.strip_blend, 0.5);

    fs::path dir = fs::path(cfg.out_dir) / "defense";
    fs::create_directories(dir);
    std::string csv = "population,entropy\n";
    char buf[64];
    for (double e : result.clean_entropies) {
        std::snprintf(buf, sizeof(buf), "clean,%.6f\n", e);
        csv += buf;
    }
    for (double e : result.triggered_entropies) {
        std::snprintf(buf, sizeof(buf), "triggered,%.6f\n", e);
        csv += buf;
    }
    plot::write_text_file((dir / "strip_entropies.csv").string(), csv);

    ordered_json summary;
    summary["auc"] = result.auc;
    summary["clean_images"] = result.clean_entropies.size();
    summary["triggered_images"] = result.triggered_entropies.size();
    summary["overlays"] = cfg.defense.strip_overlays;
    summary["blend"] = cfg.defense.strip_blend;
    plot::write_text_file((dir / "strip_summary.json").string(), summary.dump(2) + "\n");

    plot::write_text_file(
        (dir / "strip_hist.svg").string(),
        plot::histogram_svg("STRIP entropy: clean vs triggered", result.clean_entropies,
                            "clean", result.triggered_entropies, "triggered"));
    std::cout << "strip: AUC " << result.auc << " over " << result.clean_entropies.size()
              << "+" << result.triggered_entropies.size() << " images, wrote "
              << dir.string() << "\n";
}

void defend_gradcam(const ExperimentConfig& cfg, const det::TinyDet& model,
                    const trigger::TriggerGenerator& gen, const data::Dataset& test) {
    poison::PoisonSpec spec = cfg.poison;
    spec.validate(model.cfg.num_classes);
    fs::path dir = fs::path(cfg.out_dir) / "defense" / "gradcam";
    fs::create_directories(dir);

    size_t n = std::min(size_t(cfg.defense.gradcam_images), test.samples.size());
    ordered_json index;
    index["scenario"] = poison::to_string(spec.scenario);
    index["layer"] = cfg.defense.gradcam_layer;
    index["images"] = ordered_json::array();
    for (size_t i = 0; i < n; ++i) {
        const auto& img = test.samples[i].image;
        auto pair = defense::gradcam_scenario(model, gen, img, spec.scenario, spec,
                                              cfg.defense.gradcam_layer);
        char stem[64];
        std::snprintf(stem, sizeof(stem), "img%03zu", i);
        data::write_pgm((dir / (std::string(stem) + "_triggered.pgm")).string(),
                        pair.triggered.values, pair.triggered.h, pair.triggered.w);
        data::write_pgm((dir / (std::string(stem) + "_clean.pgm")).string(),
                        pair.clean.values, pair.clean.h, pair.clean.w);
        // Composite: heatmap in the red channel over the grayscale image.
        core::Image composite(img.h, img.w, 3);
        for (int ii = 0; ii < img.h; ++ii)
            for (int jj = 0; jj < img.w; ++jj) {
                float gray =
                    (img.at(0, ii, jj) + img.at(1, ii, jj) + img.at(2, ii, jj)) / 3.0f;
                float hm = pair.triggered.at(ii, jj);
                composite.at(0, ii, jj) = std::min(1.0f, 0.4f * gray + 0.6f * hm);
                composite.at(1, ii, jj) = 0.4f * gray;
                composite.at(2, ii, jj) = 0.4f * gray;
            }
        data::write_ppm((dir / (std::string(stem) + "_composite.ppm")).string(), composite);

        ordered_json rec;
        rec["stem"] = stem;
        rec["target_class"] = pair.triggered.target_class;
        if (spec.scenario == poison::Scenario::OGA)
            rec["trigger_box"] = {{"x_min", pair.trigger_box.x_min},
                                  {"y_min", pair.trigger_box.y_min},
                                  {"x_max", pair.trigger_box.x_max},
                                  {"y_max", pair.trigger_box.y_max}};
        index["images"].push_back(rec);
    }
    plot::write_text_file((dir / "index.json").string(), index.dump(2) + "\n");
    std::cout << "gradcam: wrote " << n << " heatmap pair(s) to " << dir.string() << "\n";
}

}  // namespace

void cmd_defend(const ExperimentConfig& cfg, const std::string& method) {
    if (method != "strip" && method != "gradcam")
        throw ValidationError("defend: unknown method '" + method +
                              "' (expected strip|gradcam)");
    if (cfg.generator_path.empty())
        throw ValidationError("defend: missing generator checkpoint (--generator)");
    data::Dataset test = load_or_generate_dataset(cfg, "test");
    det::TinyDet model = load_model_checked(cfg.model_path, dataset_num_classes(test));
    trigger::TriggerGenerator gen = trigger::TriggerGenerator::load(cfg.generator_path);
    if (method == "strip")
        defend_strip(cfg, model, gen, test);
    else
        defend_gradcam(cfg, model, gen, test);
}

// ------------------------------- report ------------------------------------

namespace {

std::optional<std::string> slurp(const fs::path& p) {
    std::ifstream is(p);
    if (!is) return std::nullopt;
    return std::string((std::istreambuf_iterator<char>(is)),
                       std::istreambuf_iterator<char>());
}

}  // namespace

std::string cmd_report(const std::string& run_dir) {
    std::string md = "# maskdoor experiment report\n\n";
    std::vector<std::string> warnings;

    if (auto cfg_text = slurp(fs::path(run_dir) / "config.json")) {
        try {
            auto j = json::parse(*cfg_text);
            md += "## Configuration\n\n";
            md += "- scenario: " + j["poison"].value("scenario", std::string("?")) + "\n";
            md += "- target class: " +
                  std::to_string(j["poison"].value("target_class", -1)) + "\n";
            md += "- alpha/beta: " + std::to_string(j["train"].value("alpha", 0.0)) + " / " +
                  std::to_string(j["train"].value("beta", 0.0)) + "\n";
            md += "- epsilon: " + std::to_string(j["train"].value("epsilon_initial", 0.0)) +
                  " -> " + std::to_string(j["train"].value("epsilon_final", 0.0)) + "\n";
            md += "- epochs: " + std::to_string(j["train"].value("epochs", 0)) + "\n";
            md += "- seed: " + std::to_string(j.value("seed", uint64_t(0))) + "\n\n";
        } catch (const std::exception& e) {
            warnings.push_back(std::string("config.json unreadable: ") + e.what());
        }
    } else {
        warnings.push_back("missing config.json");
    }

    if (auto log_text = slurp(fs::path(run_dir) / "train_log.csv")) {
        md += "## Training\n\n";
        std::istringstream is(*log_text);
        std::string line, last;
        std::getline(is, line);  // header
        int rows = 0;
        std::vector<plot::Series> curves(3);
        curves[0].label = "clean";
        curves[1].label = "poisoned";
        curves[2].label = "combined";
        std::string first_frozen = "-";
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            ++rows;
            last = line;
            std::istringstream ls(line);
            std::string field;
            std::vector<std::string> fields;
            while (std::getline(ls, field, ',')) fields.push_back(field);
            if (fields.size() >= 6) {
                curves[0].values.push_back(std::atof(fields[1].c_str()));
                curves[1].values.push_back(std::atof(fields[2].c_str()));
                curves[2].values.push_back(std::atof(fields[3].c_str()));
                if (fields[5] == "FROZEN" && first_frozen == "-") first_frozen = fields[0];
            }
        }
        md += "- epochs logged: " + std::to_string(rows) + "\n";
        md += "- first FROZEN epoch: " + first_frozen + "\n";
        if (!last.empty()) md += "- final row: `" + last + "`\n";
        if (rows > 1) {
            plot::write_text_file((fs::path(run_dir) / "train_curves.svg").string(),
                                  plot::line_chart_svg("training losses", curves));
            md += "- loss curves: train_curves.svg\n";
        }
        md += "\n";
    } else {
        warnings.push_back("missing train_log.csv");
    }

    if (auto eval_text = slurp(fs::path(run_dir) / "eval_report.json")) {
        try {
            auto rep = eval::EvalReport::from_json(*eval_text);
            md += "## Evaluation\n\n```\n" + rep.to_table() + "```\n\n";
            if (rep.asr_clean_model)
                md += "- ASR of the clean reference model on the same triggered images: " +
                      std::to_string(*rep.asr_clean_model) + "\n\n";
        } catch (const std::exception& e) {
            warnings.push_back(std::string("eval_report.json unreadable: ") + e.what());
        }
    } else {
        warnings.push_back("missing eval_report.json");
    }

    if (auto strip_text = slurp(fs::path(run_dir) / "defense" / "strip_summary.json")) {
        try {
            auto j = json::parse(*strip_text);
            md += "## STRIP\n\n";
            md += "- entropy ROC-AUC (clean vs triggered): " +
                  std::to_string(j.value("auc", 0.0)) + "\n";
            md += "- histogram: defense/strip_hist.svg\n\n";
        } catch (const std::exception& e) {
            warnings.push_back(std::string("strip_summary.json unreadable: ") + e.what());
        }
    } else {
        warnings.push_back("missing defense/strip_summary.json");
    }

    if (fs::exists(fs::path(run_dir) / "defense" / "gradcam" / "index.json")) {
        md += "## Grad-CAM\n\n- heatmap pairs under defense/gradcam/\n\n";
    } else {
        warnings.push_back("missing defense/gradcam/");
    }

    if (!warnings.empty()) {
        md += "## Warnings\n\n";
        for (const auto& w : warnings) md += "- " + w + "\n";
    }

    plot::write_text_file((fs::path(run_dir) / "report.md").string(), md);
    return md;
}

// --------------------------------- main ------------------------------------

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"maskdoor: invisible mask-based backdoor attacks on object detection"};
    app.require_subcommand(1);

    std::string config_path, out_dir, model, clean_model, generator, scenario, method, run_dir;
    int64_t seed = -1;

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* opt = sub->add_option("--config", config_path, "experiment config JSON");
        if (needs_config) opt->required();
        sub->add_option("--seed", seed, "override the root seed");
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--scenario", scenario, "override poison scenario (oda|oma|oga)");
    };

    CLI::App* c_poison = app.add_subcommand("poison", "write a poisoned dataset + manifest");
    add_common(c_poison, true);
    c_poison->add_option("--generator", generator, "trigger generator checkpoint")->required();

    CLI::App* c_train = app.add_subcommand("train", "joint backdoor training");
    add_common(c_train, true);

    CLI::App* c_eval = app.add_subcommand("eval", "mAP / ASR evaluation report");
    add_common(c_eval, true);
    c_eval->add_option("--model", model, "detector checkpoint")->required();
    c_eval->add_option("--clean-model", clean_model, "clean reference detector checkpoint");
    c_eval->add_option("--generator", generator, "trigger generator checkpoint");

    CLI::App* c_defend = app.add_subcommand("defend", "run a defense (strip | gradcam)");
    add_common(c_defend, true);
    c_defend->add_option("--method", method, "strip | gradcam")->required();
    c_defend->add_option("--model", model, "detector checkpoint")->required();
    c_defend->add_option("--generator", generator, "trigger generator checkpoint")->required();

    CLI::App* c_report = app.add_subcommand("report", "aggregate a run directory");
    c_report->add_option("--run", run_dir, "run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(c_report)) {
            cmd_report(run_dir);
            std::cout << "wrote " << (fs::path(run_dir) / "report.md").string() << "\n";
            return 0;
        }

        ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
        if (seed >= 0) cfg.seed = uint64_t(seed);
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (!scenario.empty()) cfg.poison.scenario = poison::scenario_from_string(scenario);
        cfg.model_path = model;
        cfg.clean_model_path = clean_model;
        cfg.generator_path = generator;
        cfg.resolve_and_validate();

        if (app.got_subcommand(c_poison)) {
            cmd_poison(cfg);
        } else if (app.got_subcommand(c_train)) {
            cmd_train(cfg);
        } else if (app.got_subcommand(c_eval)) {
            cmd_eval(cfg);
        } else if (app.got_subcommand(c_defend)) {
            cmd_defend(cfg, method);
        }
        return 0;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 3;
    } catch (const DivergenceError& e) {
        std::cerr << "runtime error: " << e.what();
        if (!e.checkpoint_path.empty())
            std::cerr << " (diagnostic checkpoint: " << e.checkpoint_path << ")";
        std::cerr << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 4;
    }
}

}  // namespace maskdoor::cli
