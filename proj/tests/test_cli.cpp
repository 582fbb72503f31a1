#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "maskdoor/cli.hpp"
#include "maskdoor/defense.hpp"

using namespace maskdoor;
using namespace maskdoor::cli;

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return std::string((std::istreambuf_iterator<char>(is)),
                       std::istreambuf_iterator<char>());
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Shared tiny config: 12 images of 32x32, 3 classes.
ExperimentConfig tiny_config(const std::string& out, const std::string& scenario = "oga") {
    ExperimentConfig cfg = ExperimentConfig::from_json(R"({
        "seed": 4242,
        "dataset": {"type": "synthetic", "count": 12, "num_classes": 3, "image_size": 32},
        "poison": {"scenario": ")" + scenario + R"("},
        "train": {"epochs": 1, "batch_size": 6, "val_count": 4},
        "eval": {"test_count": 6},
        "defense": {"strip_overlays": 4, "strip_images": 3, "gradcam_images": 2}
    })");
    cfg.out_dir = out;
    cfg.resolve_and_validate();
    return cfg;
}

std::string write_generator(const fs::path& dir, float epsilon = 0.05f) {
    Rng rng(7);
    trigger::TriggerGenerator gen(3, epsilon, rng);
    std::string path = (dir / "gen.ckpt").string();
    gen.save(path);
    return path;
}

}  // namespace

TEST_CASE("config parsing applies defaults and validates") {
    ExperimentConfig cfg = ExperimentConfig::from_json("{}");
    CHECK(cfg.train.alpha == 0.5);
    CHECK(cfg.train.beta == 0.5);
    CHECK(cfg.train.epsilon_initial == 0.05);
    CHECK(cfg.train.epsilon_final == 0.02);
    CHECK(cfg.poison.global_trigger_prob == 0.2);
    cfg.resolve_and_validate();
    CHECK(cfg.dataset.seed != 0);

    // Loss-weight defaults survive into the emitted config dump.
    auto dump = cfg.to_json();
    CHECK(dump.find("\"alpha\": 0.5") != std::string::npos);
    CHECK(dump.find("\"beta\": 0.5") != std::string::npos);
    CHECK(dump.find("\"epsilon_initial\": 0.05") != std::string::npos);
}

TEST_CASE("config validation names offending fields") {
    struct Case {
        const char* json;
        const char* needle;
    };
    const Case cases[] = {
        {R"({"bogus": 1})", "bogus"},
        {R"({"dataset": {"type": "nope"}})", "dataset.type"},
        {R"({"dataset": {"count": 0}})", "dataset.count"},
        {R"({"dataset": {"num_classes": 1}})", "dataset.num_classes"},
        {R"({"dataset": {"image_size": 20}})", "dataset.image_size"},
        {R"({"poison": {"scenario": "xyz"}})", "xyz"},
        {R"({"poison": {"scenario": "oma", "target_class": -2}})", "target_class"},
        {R"({"poison": {"scenario": "oma", "global_trigger_prob": 2.0}})",
         "global_trigger_prob"},
        {R"({"poison": {"scenario": "oda", "oga_min_frac": 0.5}})", "oga_"},
        {R"({"poison": {"scenario": "oga", "global_trigger_prob": 0.5}})",
         "global_trigger_prob"},
        {R"({"train": {"alpha": -1.0}})", "alpha"},
        {R"({"train": {"epsilon_final": 0.2}})", "epsilon_final"},
        {R"({"train": {"batch_size": 0}})", "batch_size"},
        {R"({"train": {"unknown_knob": 3}})", "unknown_knob"},
        {R"({"train": {"detector": {"conf_mode": "magic"}}})", "conf_mode"},
        {R"({"eval": {"test_count": 0}})", "test_count"},
        {R"({"defense": {"strip_blend": 7}})", "strip_blend"},
        {R"({"defense": {"gradcam_layer": 0}})", "gradcam_layer"},
    };
    for (const auto& c : cases) {
        INFO("config: ", std::string(c.json));
        try {
            ExperimentConfig cfg = ExperimentConfig::from_json(c.json);
            cfg.resolve_and_validate();
            cfg.poison.validate(3);
            FAIL_CHECK("expected a validation error");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find(c.needle) != std::string::npos);
        }
    }
}

TEST_CASE("cmd_poison writes a replayable manifest") {
    auto dir = fresh_dir("maskdoor_cli_poison");
    ExperimentConfig cfg = tiny_config((dir / "run").string(), "oga");
    cfg.generator_path = write_generator(dir);

    auto summary = cmd_poison(cfg);
    CHECK(summary.poisoned == 12);
    CHECK(summary.skipped == 0);

    data::Dataset poisoned = data::load_dataset((dir / "run" / "poisoned").string());
    REQUIRE(poisoned.manifest.poison_spec.has_value());
    size_t trigger_count = 0;
    for (const auto& rec : poisoned.manifest.images) trigger_count += rec.trigger_boxes.size();
    CHECK(trigger_count == 12);  // one OGA trigger per image by default

    // Exact replay: the recorded per-image seed reproduces the trigger boxes.
    data::Dataset clean = cli::load_or_generate_dataset(cfg, "train");
    for (size_t i = 0; i < poisoned.manifest.images.size(); ++i) {
        const auto& rec = poisoned.manifest.images[i];
        Rng rng(rec.seed);
        auto plan = poison::make_plan(clean.samples[i], *poisoned.manifest.poison_spec, rng);
        REQUIRE(plan.has_value());
        CHECK(plan->trigger_boxes == rec.trigger_boxes);
    }
}

TEST_CASE("cmd_poison is deterministic and reruns byte-identically") {
    auto dir = fresh_dir("maskdoor_cli_poison_det");
    ExperimentConfig cfg = tiny_config((dir / "a").string(), "oma");
    cfg.generator_path = write_generator(dir);
    cmd_poison(cfg);
    ExperimentConfig cfg2 = cfg;
    cfg2.out_dir = (dir / "b").string();
    cmd_poison(cfg2);
    CHECK(slurp(dir / "a" / "poisoned" / "manifest.json") ==
          slurp(dir / "b" / "poisoned" / "manifest.json"));
    CHECK(slurp(dir / "a" / "poisoned" / "images" / "000000.mdim") ==
          slurp(dir / "b" / "poisoned" / "images" / "000000.mdim"));
}

TEST_CASE("cmd_poison on an annotation-free split skips everything") {
    auto dir = fresh_dir("maskdoor_cli_poison_skip");
    // Hand-built dataset whose images have no annotations.
    data::Dataset ds;
    ds.manifest.split = "empty";
    ds.manifest.generator = "test";
    ds.manifest.classes = {"circle", "square", "triangle"};
    for (int i = 0; i < 3; ++i) {
        core::Image img(32, 32, 3, 0.4f);
        data::ImageRecord rec;
        char name[64];
        std::snprintf(name, sizeof(name), "images/%06d.mdim", i);
        rec.file = name;
        ds.manifest.images.push_back(rec);
        ds.samples.emplace_back(std::move(img), std::vector<core::CornerBox>{});
    }
    data::save_dataset(ds, (dir / "empty_ds").string());

    ExperimentConfig cfg = tiny_config((dir / "run").string(), "oda");
    cfg.dataset.type = "maskdoor";
    cfg.dataset.dir = (dir / "empty_ds").string();
    cfg.generator_path = write_generator(dir);
    auto summary = cmd_poison(cfg);
    CHECK(summary.poisoned == 0);
    CHECK(summary.skipped == 3);
    data::Dataset out = data::load_dataset((dir / "run" / "poisoned").string());
    for (const auto& rec : out.manifest.images) CHECK(rec.skipped);
}

TEST_CASE("cmd_poison requires a generator checkpoint") {
    auto dir = fresh_dir("maskdoor_cli_poison_nogen");
    ExperimentConfig cfg = tiny_config((dir / "run").string());
    CHECK_THROWS_AS(cmd_poison(cfg), ValidationError);
}

TEST_CASE("cmd_train with zero epochs writes initialized artifacts") {
    auto dir = fresh_dir("maskdoor_cli_train0");
    ExperimentConfig cfg = tiny_config((dir / "run").string());
    cfg.train.epochs = 0;
    auto result = cmd_train(cfg);
    CHECK(result.log.epochs.empty());
    CHECK(fs::exists(dir / "run" / "checkpoints" / "final.det.ckpt"));
    CHECK(fs::exists(dir / "run" / "checkpoints" / "final.gen.ckpt"));
    std::string csv = slurp(dir / "run" / "train_log.csv");
    CHECK(csv.find("epoch,clean_loss") == 0);
    CHECK(csv.find('\n') == csv.size() - 1);  // header only
}

TEST_CASE("cmd_train log starts at epsilon 0.05 and freezes at most once") {
    auto dir = fresh_dir("maskdoor_cli_train");
    ExperimentConfig cfg = tiny_config((dir / "run").string(), "oma");
    cfg.train.epochs = 3;
    cfg.train.stage_switch_patience = 1;  // freeze immediately after epoch 0
    auto result = cmd_train(cfg);
    REQUIRE(result.log.epochs.size() == 3);

    std::string csv = slurp(dir / "run" / "train_log.csv");
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);  // header
    std::getline(is, line);
    CHECK(line.find(",0.050000,JOINT,") != std::string::npos);

    int transitions = 0;
    std::string prev_stage = "JOINT";
    is.clear();
    is.str(csv);
    std::getline(is, line);
    while (std::getline(is, line)) {
        std::string stage = line.find("FROZEN") != std::string::npos ? "FROZEN" : "JOINT";
        if (stage != prev_stage) ++transitions;
        prev_stage = stage;
    }
    CHECK(transitions <= 1);
    CHECK(fs::exists(dir / "run" / "config.json"));
    std::string dump = slurp(dir / "run" / "config.json");
    CHECK(dump.find("\"alpha\": 0.5") != std::string::npos);
}

TEST_CASE("cmd_eval without a generator reports mAP only") {
    auto dir = fresh_dir("maskdoor_cli_eval");
    ExperimentConfig cfg = tiny_config((dir / "run").string());
    cfg.train.epochs = 1;
    cmd_train(cfg);
    cfg.model_path = (dir / "run" / "checkpoints" / "final.det.ckpt").string();
    auto report = cmd_eval(cfg);
    CHECK(report.map_benign.has_value());
    CHECK_FALSE(report.asr.has_value());
    std::string text = slurp(dir / "run" / "eval_report.json");
    CHECK(text.find("map_benign") != std::string::npos);
    CHECK(text.find("\"asr\"") == std::string::npos);

    // Byte-identical rerun.
    auto again = cmd_eval(cfg);
    CHECK(slurp(dir / "run" / "eval_report.json") == text);
}

TEST_CASE("cmd_eval with generator and clean model fills the full table") {
    auto dir = fresh_dir("maskdoor_cli_eval_full");
    ExperimentConfig cfg = tiny_config((dir / "run").string(), "oga");
    cfg.train.epochs = 1;
    auto trained = cmd_train(cfg);

    cfg.model_path = (dir / "run" / "checkpoints" / "final.det.ckpt").string();
    cfg.clean_model_path = cfg.model_path;
    cfg.generator_path = (dir / "run" / "checkpoints" / "final.gen.ckpt").string();
    auto report = cmd_eval(cfg);
    CHECK(report.map_normal.has_value());
    CHECK(report.map_benign.has_value());
    REQUIRE(report.asr.has_value());
    CHECK(*report.asr >= 0.0);
    CHECK(*report.asr <= 1.0);
    CHECK(report.asr_triggers > 0);
    REQUIRE(report.scenario.has_value());
    CHECK(*report.scenario == "oga");
    std::string table = slurp(dir / "run" / "eval_report.txt");
    CHECK(table.find("mAP_normal") != std::string::npos);
    CHECK(table.find("mAP_benign") != std::string::npos);
    CHECK(table.find("ASR") != std::string::npos);
}

TEST_CASE("cmd_eval rejects model/dataset class mismatches") {
    auto dir = fresh_dir("maskdoor_cli_eval_mismatch");
    ExperimentConfig cfg = tiny_config((dir / "run").string());
    Rng rng(3);
    det::DetectorConfig dc;
    dc.num_classes = 5;
    det::TinyDet other(dc, rng);
    std::string path = (dir / "other.ckpt").string();
    other.save(path);
    cfg.model_path = path;
    CHECK_THROWS_WITH_AS(cmd_eval(cfg), doctest::Contains("mismatch"), ValidationError);
}

TEST_CASE("cmd_defend writes strip and gradcam artifacts") {
    auto dir = fresh_dir("maskdoor_cli_defend");
    ExperimentConfig cfg = tiny_config((dir / "run").string(), "oga");
    cfg.train.epochs = 1;
    cmd_train(cfg);
    cfg.model_path = (dir / "run" / "checkpoints" / "final.det.ckpt").string();
    cfg.generator_path = (dir / "run" / "checkpoints" / "final.gen.ckpt").string();

    cmd_defend(cfg, "strip");
    CHECK(fs::exists(dir / "run" / "defense" / "strip_entropies.csv"));
    CHECK(fs::exists(dir / "run" / "defense" / "strip_summary.json"));
    CHECK(fs::exists(dir / "run" / "defense" / "strip_hist.svg"));
    std::string summary = slurp(dir / "run" / "defense" / "strip_summary.json");
    CHECK(summary.find("auc") != std::string::npos);

    cmd_defend(cfg, "gradcam");
    CHECK(fs::exists(dir / "run" / "defense" / "gradcam" / "index.json"));
    CHECK(fs::exists(dir / "run" / "defense" / "gradcam" / "img000_triggered.pgm"));
    CHECK(fs::exists(dir / "run" / "defense" / "gradcam" / "img000_clean.pgm"));
    CHECK(fs::exists(dir / "run" / "defense" / "gradcam" / "img000_composite.ppm"));

    CHECK_THROWS_AS(cmd_defend(cfg, "magic"), ValidationError);
}

TEST_CASE("cmd_report aggregates a run and is deterministic") {
    auto dir = fresh_dir("maskdoor_cli_report");
    ExperimentConfig cfg = tiny_config((dir / "run").string(), "oga");
    cfg.train.epochs = 2;
    cmd_train(cfg);
    cfg.model_path = (dir / "run" / "checkpoints" / "final.det.ckpt").string();
    cfg.generator_path = (dir / "run" / "checkpoints" / "final.gen.ckpt").string();
    cmd_eval(cfg);
    cmd_defend(cfg, "strip");
    cmd_defend(cfg, "gradcam");

    std::string md = cmd_report((dir / "run").string());
    CHECK(md.find("## Configuration") != std::string::npos);
    CHECK(md.find("## Training") != std::string::npos);
    CHECK(md.find("## Evaluation") != std::string::npos);
    CHECK(md.find("## STRIP") != std::string::npos);
    CHECK(md.find("oga") != std::string::npos);
    CHECK(fs::exists(dir / "run" / "report.md"));
    CHECK(fs::exists(dir / "run" / "train_curves.svg"));

    std::string again = cmd_report((dir / "run").string());
    CHECK(again == md);
}

TEST_CASE("cmd_report on an empty directory warns but succeeds") {
    auto dir = fresh_dir("maskdoor_cli_report_empty");
    std::string md = cmd_report(dir.string());
    CHECK(md.find("## Warnings") != std::string::npos);
    CHECK(md.find("missing config.json") != std::string::npos);
    CHECK(fs::exists(dir / "report.md"));
}

TEST_CASE("run_cli exit codes") {
    auto dir = fresh_dir("maskdoor_cli_codes");

    const char* usage[] = {"maskdoor", "frobnicate"};
    CHECK(run_cli(2, usage) == 2);

    const char* missing[] = {"maskdoor", "train"};
    CHECK(run_cli(2, missing) == 2);  // --config is required

    // Validation failure: malformed config file.
    auto bad = dir / "bad.json";
    {
        std::ofstream os(bad);
        os << "{\"train\": {\"alpha\": -3}}";
    }
    std::string bad_path = bad.string();
    const char* validation[] = {"maskdoor", "train", "--config", bad_path.c_str()};
    CHECK(run_cli(4, validation) == 3);

    // Runtime failure: eval against a missing checkpoint.
    auto ok = dir / "ok.json";
    {
        std::ofstream os(ok);
        os << R"({"dataset": {"type": "synthetic", "count": 4, "num_classes": 3,
                  "image_size": 32}, "eval": {"test_count": 4}})";
    }
    std::string ok_path = ok.string();
    std::string out_path = (dir / "out").string();
    const char* runtime[] = {"maskdoor", "eval",    "--config", ok_path.c_str(),
                             "--model",  "no.ckpt", "--out",    out_path.c_str()};
    CHECK(run_cli(8, runtime) == 4);

    // Success: report over an empty directory.
    std::string run_path = (dir / "emptyrun").string();
    fs::create_directories(run_path);
    const char* ok_report[] = {"maskdoor", "report", "--run", run_path.c_str()};
    CHECK(run_cli(4, ok_report) == 0);
}
