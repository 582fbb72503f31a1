#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <filesystem>

#include "maskdoor/data.hpp"
#include "maskdoor/train.hpp"

using namespace maskdoor;
using namespace maskdoor::train;

namespace {

std::vector<core::AnnotatedImage> tiny_dataset(int n, uint64_t seed, int size = 32) {
    return data::gen_synthetic(n, 3, size, seed).samples;
}

TrainConfig tiny_config(int epochs) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 8;
    cfg.val_count = 4;
    cfg.detector.num_classes = 3;
    cfg.detector.input_size = 32;
    cfg.seed = 99;
    return cfg;
}

}  // namespace

TEST_CASE("combined_loss") {
    CHECK(combined_loss(2.0, 4.0, 0.5, 0.5) == doctest::Approx(3.0));
    CHECK(combined_loss(2.0, 4.0, 0.7, 0.0) == doctest::Approx(1.4));
    CHECK_THROWS_AS(combined_loss(-1.0, 0.0, 0.5, 0.5), std::invalid_argument);
}

TEST_CASE("stage_switch") {
    CHECK(stage_switch({1.0, 1.0, 1.0, 1.0}, 0.1, 3));
    CHECK_FALSE(stage_switch({1.0, 1.0}, 0.1, 3));
    CHECK_FALSE(stage_switch({4.0, 2.0, 1.0}, 0.1, 3));
    CHECK(stage_switch({5.0, 1.0, 1.001, 1.002}, 0.1, 3));
    CHECK_THROWS_AS(stage_switch({1.0}, 0.0, 3), std::invalid_argument);
}

TEST_CASE("anneal_epsilon") {
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.anneal_epochs = 10;
    cfg.epsilon_initial = 0.05;
    cfg.epsilon_final = 0.02;
    CHECK(anneal_epsilon(0, cfg) == doctest::Approx(0.05));
    CHECK(anneal_epsilon(19, cfg) == doctest::Approx(0.02));
    CHECK(anneal_epsilon(10, cfg) == doctest::Approx(0.02));

    // Midpoint of a 0.05 -> 0.01 window.
    cfg.epsilon_final = 0.01;
    CHECK(anneal_epsilon(5, cfg) == doctest::Approx(0.03));

    double prev = 1.0;
    for (int e = 0; e < 20; ++e) {
        double eps = anneal_epsilon(e, cfg);
        CHECK(eps <= prev);
        prev = eps;
    }
    CHECK_THROWS_AS(anneal_epsilon(20, cfg), std::invalid_argument);
}

TEST_CASE("config validation") {
    TrainConfig cfg = tiny_config(4);
    cfg.resolve_and_validate();
    CHECK(cfg.anneal_epochs == 2);
    CHECK(cfg.freeze_epoch_cap == 3);

    TrainConfig bad = tiny_config(4);
    bad.epsilon_final = 0.2;
    CHECK_THROWS_AS(bad.resolve_and_validate(), ValidationError);
    bad = tiny_config(4);
    bad.alpha = -0.5;
    CHECK_THROWS_AS(bad.resolve_and_validate(), ValidationError);
    bad = tiny_config(4);
    bad.stage_switch_patience = 0;
    CHECK_THROWS_AS(bad.resolve_and_validate(), ValidationError);
}

TEST_CASE("joint_step in FROZEN stage leaves xi bit-identical") {
    auto samples = tiny_dataset(8, 1);
    TrainConfig cfg = tiny_config(2);
    cfg.resolve_and_validate();
    Rng root(5);
    Rng dr = root.substream("d"), gr = root.substream("g");
    det::TinyDet model(cfg.detector, dr);
    trigger::TriggerGenerator gen(3, 0.05f, gr);
    auto weights_before = gen.enc1.weight;
    auto dec_before = gen.dec3.weight;

    poison::PoisonSpec spec;
    spec.scenario = poison::Scenario::ODA;
    nn::Adam ot(1e-3), ox(1e-4);
    std::vector<BatchItem> batch;
    for (size_t i = 0; i < samples.size(); ++i)
        batch.push_back({&samples[i], root.substream("p", i), true});
    auto losses = joint_step(model, gen, ot, ox, batch, spec, cfg, Stage::Frozen);
    CHECK(gen.enc1.weight == weights_before);
    CHECK(gen.dec3.weight == dec_before);
    CHECK(losses.n_poisoned > 0);
    CHECK(losses.max_pert_inf <= gen.epsilon + 1e-6);
}

// Byte-equivalence claims compare against sequential reference loops, so pin
// the batch-parallel reduction to one worker for their duration.
struct SingleWorkerGuard {
    SingleWorkerGuard() { setenv("MASKDOOR_NUM_WORKERS", "1", 1); }
    ~SingleWorkerGuard() { unsetenv("MASKDOOR_NUM_WORKERS"); }
};

TEST_CASE("joint_step with beta=0 equals a clean-only step") {
    SingleWorkerGuard guard;
    auto samples = tiny_dataset(8, 2);
    TrainConfig cfg = tiny_config(2);
    cfg.beta = 0.0;
    cfg.resolve_and_validate();

    Rng root(6);
    Rng dr1 = root.substream("d");
    Rng dr2 = root.substream("d");
    det::TinyDet stepped(cfg.detector, dr1);
    det::TinyDet manual(cfg.detector, dr2);
    Rng gr = root.substream("g");
    trigger::TriggerGenerator gen(3, 0.05f, gr);

    poison::PoisonSpec spec;
    spec.scenario = poison::Scenario::OMA;
    nn::Adam ot(1e-3), ox(1e-4);
    std::vector<BatchItem> batch;
    for (size_t i = 0; i < samples.size(); ++i)
        batch.push_back({&samples[i], root.substream("p", i), true});
    joint_step(stepped, gen, ot, ox, batch, spec, cfg, Stage::Joint);

    // Clean-only comparator: alpha-scaled mean gradient over the batch.
    nn::Adam ot2(1e-3);
    det::DetGrads grads;
    grads.match(manual);
    det::DetContext ctx;
    for (const auto& item : batch) {
        manual.loss_forward(item.sample->image, item.sample->boxes, ctx);
        manual.loss_backward(ctx, grads, float(cfg.alpha) / float(batch.size()), 1.0f,
                             nullptr);
    }
    ot2.step(manual.parameters(), manual.grad_ptrs(grads));

    CHECK(stepped.b1.weight == manual.b1.weight);
    CHECK(stepped.b5.weight == manual.b5.weight);
    CHECK(stepped.cls_head.weight == manual.cls_head.weight);
    CHECK(stepped.box_head.weight == manual.box_head.weight);
}

TEST_CASE("one joint step decreases the combined loss on a fixed batch") {
    auto samples = tiny_dataset(6, 3);
    TrainConfig cfg = tiny_config(2);
    cfg.lr_theta = 1e-4;
    cfg.lr_xi = 1e-5;
    cfg.resolve_and_validate();

    Rng root(7);
    Rng dr = root.substream("d"), gr = root.substream("g");
    det::TinyDet model(cfg.detector, dr);
    trigger::TriggerGenerator gen(3, 0.05f, gr);
    poison::PoisonSpec spec;
    spec.scenario = poison::Scenario::OGA;
    spec.oga_min_frac = 0.3;

    std::vector<BatchItem> batch;
    for (size_t i = 0; i < samples.size(); ++i)
        batch.push_back({&samples[i], root.substream("p", i), true});

    nn::Adam ot(cfg.lr_theta), ox(cfg.lr_xi);
    auto before = joint_step(model, gen, ot, ox, batch, spec, cfg, Stage::Joint);

    // Re-evaluate the combined loss on the same batch with updated weights.
    double clean = 0.0, pois = 0.0;
    size_t np = 0;
    det::DetContext ctx;
    for (const auto& item : batch) {
        clean += model.loss_forward(item.sample->image, item.sample->boxes, ctx).total;
        Rng rng = item.plan_rng;
        auto plan = poison::make_plan(*item.sample, spec, rng);
        REQUIRE(plan.has_value());
        core::Image pert = trigger::generate_perturbation(gen, item.sample->image);
        core::Image trig = trigger::apply_trigger(item.sample->image, plan->mask, pert);
        pois += model.loss_forward(trig, plan->annotation, ctx).total;
        ++np;
    }
    double after = combined_loss(clean / double(batch.size()), pois / double(np), cfg.alpha,
                                 cfg.beta);
    CHECK(after < before.combined);
}

TEST_CASE("train with zero epochs returns initialized models and empty log") {
    auto samples = tiny_dataset(4, 4);
    TrainConfig cfg = tiny_config(0);
    poison::PoisonSpec spec;
    spec.scenario = poison::Scenario::ODA;
    auto result = train::train(samples, spec, cfg);
    CHECK(result.log.epochs.empty());
    CHECK(result.stage_switch_epoch == -1);
    CHECK(result.generator.epsilon == doctest::Approx(0.05));
}

TEST_CASE("train is deterministic for a fixed seed") {
    auto samples = tiny_dataset(12, 5);
    TrainConfig cfg = tiny_config(2);
    poison::PoisonSpec spec;
    spec.scenario = poison::Scenario::OGA;
    spec.oga_min_frac = 0.3;

    auto a = train::train(samples, spec, cfg);
    auto b = train::train(samples, spec, cfg);
    CHECK(a.log.to_csv() == b.log.to_csv());
    CHECK(a.model.b1.weight == b.model.b1.weight);
    CHECK(a.model.cls_head.weight == b.model.cls_head.weight);
    CHECK(a.generator.enc1.weight == b.generator.enc1.weight);
    CHECK(a.generator.dec3.weight == b.generator.dec3.weight);
}

TEST_CASE("beta=0 training is byte-equivalent to a poisoning-free loop") {
    SingleWorkerGuard guard;
    auto samples = tiny_dataset(10, 6);
    TrainConfig cfg = tiny_config(2);
    cfg.beta = 0.0;
    poison::PoisonSpec spec;
    spec.scenario = poison::Scenario::ODA;
    auto piped = train::train(samples, spec, cfg);

    // Independent clean loop mirroring the pipeline's init, shuffle and Adam.
    TrainConfig ref = cfg;
    ref.resolve_and_validate();
    Rng root(ref.seed);
    Rng det_rng = root.substream("init-det");
    Rng gen_rng = root.substream("init-gen");
    det::TinyDet model(ref.detector, det_rng);
    trigger::TriggerGenerator gen_unused(3, float(ref.epsilon_initial), gen_rng);
    nn::Adam opt(ref.lr_theta);
    std::vector<size_t> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    det::DetGrads grads;
    grads.match(model);
    det::DetContext ctx;
    for (int epoch = 0; epoch < ref.epochs; ++epoch) {
        Rng shuffle_rng = root.substream("shuffle", uint64_t(epoch));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[size_t(shuffle_rng.uniform_int(i))]);
        for (size_t start = 0; start < order.size(); start += size_t(ref.batch_size)) {
            size_t stop = std::min(order.size(), start + size_t(ref.batch_size));
            grads.zero();
            for (size_t p = start; p < stop; ++p) {
                const auto& s = samples[order[p]];
                model.loss_forward(s.image, s.boxes, ctx);
                model.loss_backward(ctx, grads, float(ref.alpha) / float(stop - start), 1.0f,
                                    nullptr);
            }
            opt.step(model.parameters(), model.grad_ptrs(grads));
        }
    }

    CHECK(piped.model.b1.weight == model.b1.weight);
    CHECK(piped.model.b3.weight == model.b3.weight);
    CHECK(piped.model.cls_head.weight == model.cls_head.weight);
    CHECK(piped.model.box_head.bias == model.box_head.bias);
}

TEST_CASE("stage transitions are monotone and epsilon non-increasing") {
    auto samples = tiny_dataset(10, 8);
    TrainConfig cfg = tiny_config(5);
    cfg.stage_switch_tol = 1e9;  // force stabilization as soon as patience allows
    cfg.stage_switch_patience = 2;
    cfg.anneal_epochs = 3;
    poison::PoisonSpec spec;
    spec.scenario = poison::Scenario::OMA;
    auto result = train::train(samples, spec, cfg);
    REQUIRE(result.log.epochs.size() == 5);

    bool seen_frozen = false;
    double prev_eps = 1.0;
    for (const auto& rec : result.log.epochs) {
        if (seen_frozen) CHECK(rec.stage == Stage::Frozen);
        if (rec.stage == Stage::Frozen) seen_frozen = true;
        CHECK(rec.epsilon <= prev_eps + 1e-12);
        prev_eps = rec.epsilon;
        CHECK(rec.benign_map >= 0.0);
    }
    CHECK(seen_frozen);
    CHECK(result.stage_switch_epoch == 2);
    CHECK(result.log.epochs.front().epsilon == doctest::Approx(0.05));
    CHECK(result.log.epochs.back().epsilon == doctest::Approx(0.02));
}

TEST_CASE("training divergence aborts with a diagnostic checkpoint") {
    auto samples = tiny_dataset(8, 9);
    TrainConfig cfg = tiny_config(3);
    cfg.lr_theta = 1e30;  // float activations overflow to inf -> nan loss
    cfg.batch_size = 4;
    poison::PoisonSpec spec;
    spec.scenario = poison::Scenario::ODA;
    auto dir = std::filesystem::temp_directory_path() / "maskdoor_diverge_test";
    std::filesystem::remove_all(dir);
    try {
        train::train(samples, spec, cfg, nullptr, dir.string());
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK_FALSE(e.checkpoint_path.empty());
        CHECK(std::filesystem::exists(e.checkpoint_path));
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("train writes checkpoints and a csv log") {
    auto samples = tiny_dataset(8, 10);
    TrainConfig cfg = tiny_config(1);
    poison::PoisonSpec spec;
    spec.scenario = poison::Scenario::OGA;
    spec.oga_min_frac = 0.3;
    auto dir = std::filesystem::temp_directory_path() / "maskdoor_train_out";
    std::filesystem::remove_all(dir);
    auto result = train::train(samples, spec, cfg, nullptr, dir.string());
    CHECK(std::filesystem::exists(dir / "checkpoints" / "epoch_000.det.ckpt"));
    CHECK(std::filesystem::exists(dir / "checkpoints" / "final.gen.ckpt"));
    CHECK(std::filesystem::exists(dir / "train_log.csv"));
    CHECK(result.log.epochs.size() == 1);
    std::filesystem::remove_all(dir);
}
