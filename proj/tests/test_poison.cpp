#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "maskdoor/poison.hpp"

using namespace maskdoor;
using namespace maskdoor::poison;
using core::CornerBox;

namespace {

// Independent connected-component oracle: adjacency matrix + label sweep to
// fixpoint.
std::set<size_t> brute_force_component(const std::vector<CornerBox>& boxes, size_t seed) {
    size_t n = boxes.size();
    std::vector<std::vector<bool>> adj(n, std::vector<bool>(n, false));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            adj[i][j] = i == j || core::overlaps(boxes[i], boxes[j]);
    std::vector<bool> in(n, false);
    in[seed] = true;
    bool grew = true;
    while (grew) {
        grew = false;
        for (size_t i = 0; i < n; ++i) {
            if (in[i]) continue;
            for (size_t j = 0; j < n; ++j)
                if (in[j] && adj[i][j]) {
                    in[i] = true;
                    grew = true;
                    break;
                }
        }
    }
    std::set<size_t> out;
    for (size_t i = 0; i < n; ++i)
        if (in[i]) out.insert(i);
    return out;
}

std::vector<CornerBox> random_boxes(Rng& rng, size_t n, double extent = 40.0) {
    std::vector<CornerBox> boxes;
    for (size_t i = 0; i < n; ++i) {
        double x0 = rng.uniform(0.0, extent - 2.0);
        double y0 = rng.uniform(0.0, extent - 2.0);
        boxes.push_back({int(rng.uniform_int(3)), x0, y0, x0 + rng.uniform(1.0, 12.0),
                         y0 + rng.uniform(1.0, 12.0)});
    }
    return boxes;
}

core::AnnotatedImage make_sample(const std::vector<CornerBox>& boxes, int size = 16) {
    core::Image img(size, size, 3, 0.5f);
    return core::AnnotatedImage(std::move(img), boxes);
}

}  // namespace

TEST_CASE("chain_overlapping fixtures") {
    std::vector<CornerBox> isolated = {{0, 0, 0, 2, 2}, {0, 10, 10, 12, 12}};
    CHECK(chain_overlapping(isolated, 0) == std::set<size_t>{0});
    CHECK(chain_overlapping(isolated, 1) == std::set<size_t>{1});

    // A-B and B-C overlap, A-C do not: the chain closes over all three.
    std::vector<CornerBox> chain = {
        {0, 0, 0, 10, 10}, {0, 8, 8, 18, 18}, {0, 16, 16, 26, 26}};
    CHECK(chain_overlapping(chain, 0) == std::set<size_t>{0, 1, 2});
    CHECK(chain_overlapping(chain, 2) == std::set<size_t>{0, 1, 2});

    // Two disjoint clusters.
    std::vector<CornerBox> clusters = {
        {0, 0, 0, 5, 5}, {0, 4, 0, 9, 5}, {0, 20, 20, 25, 25}, {0, 24, 20, 29, 25}};
    CHECK(chain_overlapping(clusters, 2) == std::set<size_t>({2, 3}));
    CHECK(chain_overlapping(clusters, 0) == std::set<size_t>({0, 1}));

    CHECK_THROWS_AS(chain_overlapping(chain, 3), std::invalid_argument);
}

TEST_CASE("chain_overlapping equals the brute-force component oracle") {
    Rng rng(101);
    for (int t = 0; t < 1000; ++t) {
        size_t n = 1 + rng.uniform_int(8);
        auto boxes = random_boxes(rng, n);
        size_t seed = size_t(rng.uniform_int(n));
        CHECK(chain_overlapping(boxes, seed) == brute_force_component(boxes, seed));
    }
}

TEST_CASE("chain_overlapping honors a positive IoU threshold") {
    // IoU(A,B) = 4/196 ~ 0.02: chained under area>0, not under iou>0.1.
    std::vector<CornerBox> boxes = {{0, 0, 0, 10, 10}, {0, 8, 8, 18, 18}};
    CHECK(chain_overlapping(boxes, 0, 0.0) == std::set<size_t>({0, 1}));
    CHECK(chain_overlapping(boxes, 0, 0.1) == std::set<size_t>{0});
}

TEST_CASE("select_poison_targets") {
    Rng rng(7);
    std::vector<CornerBox> one = {{0, 0, 0, 4, 4}};
    CHECK(select_poison_targets(one, rng) == std::set<size_t>{0});

    std::vector<CornerBox> complete = {
        {0, 0, 0, 10, 10}, {0, 2, 2, 12, 12}, {0, 4, 4, 14, 14}};
    for (int t = 0; t < 10; ++t)
        CHECK(select_poison_targets(complete, rng) == std::set<size_t>({0, 1, 2}));

    std::vector<CornerBox> empty;
    CHECK_THROWS_AS(select_poison_targets(empty, rng), std::invalid_argument);

    Rng a(99), b(99);
    auto boxes = random_boxes(a, 6);
    Rng ra(123), rb(123);
    CHECK(select_poison_targets(boxes, ra) == select_poison_targets(boxes, rb));
}

TEST_CASE("eta_oda removes targets and preserves order") {
    std::vector<CornerBox> y = {{0, 0, 0, 2, 2}, {1, 4, 4, 6, 6}, {2, 8, 8, 10, 10}};
    CHECK(eta_oda(y, {}) == y);
    CHECK(eta_oda(y, {0, 1, 2}).empty());
    auto survivors = eta_oda(y, {0, 2});
    REQUIRE(survivors.size() == 1);
    CHECK(survivors[0] == y[1]);
}

TEST_CASE("eta_oma retargets classes, geometry bit-identical") {
    std::vector<CornerBox> y = {{3, 1, 1, 5, 5}};
    CHECK(eta_oma(y, {}, 1) == y);
    auto out = eta_oma(y, {0}, 1);
    CHECK(out[0].class_id == 1);
    CHECK(out[0].x_min == y[0].x_min);
    CHECK(out[0].y_max == y[0].y_max);

    Rng rng(55);
    for (int t = 0; t < 1000; ++t) {
        auto boxes = random_boxes(rng, 1 + rng.uniform_int(6));
        std::set<size_t> targets;
        for (size_t i = 0; i < boxes.size(); ++i)
            if (rng.bernoulli(0.5)) targets.insert(i);
        auto mod = eta_oma(boxes, targets, 2);
        REQUIRE(mod.size() == boxes.size());
        for (size_t i = 0; i < boxes.size(); ++i) {
            CHECK(mod[i].x_min == boxes[i].x_min);
            CHECK(mod[i].y_min == boxes[i].y_min);
            CHECK(mod[i].x_max == boxes[i].x_max);
            CHECK(mod[i].y_max == boxes[i].y_max);
            CHECK(mod[i].class_id == (targets.count(i) ? 2 : boxes[i].class_id));
        }
    }
}

TEST_CASE("eta_oga appends exactly one box at the trigger geometry") {
    CornerBox trig{0, 3, 4, 9, 11};
    auto out = eta_oga({}, trig, 2);
    REQUIRE(out.size() == 1);
    CHECK(out[0].class_id == 2);
    CHECK(out[0].x_min == trig.x_min);

    Rng rng(66);
    for (int t = 0; t < 200; ++t) {
        auto y = random_boxes(rng, rng.uniform_int(5));
        auto grown = eta_oga(y, trig, 1);
        CHECK(grown.size() == y.size() + 1);
        CHECK(grown.back().class_id == 1);
        CHECK(grown.back().y_max == trig.y_max);
    }
}

TEST_CASE("sample_oga_box") {
    Rng rng(77);
    CornerBox full = sample_oga_box(32, 32, 1.0, rng);
    CHECK(full.x_min == doctest::Approx(0.0));
    CHECK(full.y_min == doctest::Approx(0.0));
    CHECK(full.x_max == doctest::Approx(32.0));
    CHECK(full.y_max == doctest::Approx(32.0));

    CHECK_THROWS_AS(sample_oga_box(32, 32, 1.5, rng), std::invalid_argument);
    CHECK_THROWS_AS(sample_oga_box(32, 32, 0.01, rng), std::invalid_argument);

    for (int t = 0; t < 500; ++t) {
        CornerBox b = sample_oga_box(64, 48, 0.25, rng);
        CHECK(b.x_min >= 0.0);
        CHECK(b.y_min >= 0.0);
        CHECK(b.x_max <= 48.0);
        CHECK(b.y_max <= 64.0);
        CHECK(b.width() >= 0.25 * 48 - 1e-9);
        CHECK(b.height() >= 0.25 * 64 - 1e-9);
    }

    Rng r1(5), r2(5);
    CornerBox b1 = sample_oga_box(64, 64, 0.2, r1);
    CornerBox b2 = sample_oga_box(64, 64, 0.2, r2);
    CHECK(b1 == b2);
}

TEST_CASE("poison_sample OGA on an empty annotation") {
    Rng init(1);
    trigger::TriggerGenerator g(3, 0.05f, init);
    auto s = make_sample({});
    PoisonSpec spec;
    spec.scenario = Scenario::OGA;
    spec.target_class = 1;
    spec.oga_min_frac = 0.5;
    Rng rng(9);
    auto out = poison_sample(s, spec, g, rng);
    REQUIRE(out.has_value());
    CHECK(out->annotation.size() == 1);
    CHECK(out->annotation[0].class_id == 1);
    CHECK(out->trigger_boxes.size() == 1);

    // Image differs from the original only inside the trigger box.
    trigger::BinaryMask m = trigger::build_mask(out->trigger_boxes, 16, 16);
    for (int ch = 0; ch < 3; ++ch)
        for (int i = 0; i < 16; ++i)
            for (int j = 0; j < 16; ++j)
                if (!m.at(i, j)) CHECK(out->image.at(ch, i, j) == s.image.at(ch, i, j));
}

TEST_CASE("poison_sample OMA with forced global trigger") {
    Rng init(2);
    trigger::TriggerGenerator g(3, 0.05f, init);
    auto s = make_sample({{0, 0, 0, 4, 4}, {2, 8, 8, 14, 14}});
    PoisonSpec spec;
    spec.scenario = Scenario::OMA;
    spec.target_class = 1;
    spec.global_trigger_prob = 1.0;
    Rng rng(10);
    auto out = poison_sample(s, spec, g, rng);
    REQUIRE(out.has_value());
    CHECK(out->used_global_trigger);
    REQUIRE(out->annotation.size() == 2);
    for (const auto& b : out->annotation) CHECK(b.class_id == 1);
    // Geometry multiset invariant under eta.
    CHECK(out->annotation[0].x_min == s.boxes[0].x_min);
    CHECK(out->annotation[1].x_max == s.boxes[1].x_max);
}

TEST_CASE("poison_sample ODA composition on the chain fixture") {
    Rng init(3);
    trigger::TriggerGenerator g(3, 0.05f, init);
    std::vector<CornerBox> chain = {
        {0, 0, 0, 10, 10}, {1, 8, 8, 18, 18}, {2, 16, 16, 26, 26}};
    auto s = make_sample(chain, 32);
    PoisonSpec spec;
    spec.scenario = Scenario::ODA;
    Rng rng(11);
    auto out = poison_sample(s, spec, g, rng);
    REQUIRE(out.has_value());
    // Whatever the seed box, the closure covers all three.
    CHECK(out->annotation.empty());
    CHECK(out->trigger_boxes.size() == 3);

    // No surviving annotation box overlaps any trigger box.
    for (const auto& a : out->annotation)
        for (const auto& t : out->trigger_boxes) CHECK_FALSE(core::overlaps(a, t));

    // Mask support equals the union of the three boxes.
    trigger::BinaryMask expect = trigger::build_mask(chain, 32, 32);
    trigger::BinaryMask got = trigger::build_mask(out->trigger_boxes, 32, 32);
    CHECK(expect.v == got.v);
}

TEST_CASE("poison_sample skips ODA/OMA on empty annotations") {
    Rng init(4);
    trigger::TriggerGenerator g(3, 0.05f, init);
    auto s = make_sample({});
    PoisonSpec spec;
    spec.scenario = Scenario::ODA;
    Rng rng(12);
    CHECK_FALSE(poison_sample(s, spec, g, rng).has_value());
    spec.scenario = Scenario::OMA;
    Rng rng2(12);
    CHECK_FALSE(poison_sample(s, spec, g, rng2).has_value());
}

TEST_CASE("poison_sample is deterministic given identical seeds") {
    Rng init(5);
    trigger::TriggerGenerator g(3, 0.05f, init);
    auto s = make_sample({{0, 1, 1, 7, 7}, {1, 9, 9, 15, 15}});
    for (Scenario sc : {Scenario::ODA, Scenario::OMA, Scenario::OGA}) {
        PoisonSpec spec;
        spec.scenario = sc;
        spec.oga_min_frac = 0.5;
        Rng r1(77), r2(77);
        auto a = poison_sample(s, spec, g, r1);
        auto b = poison_sample(s, spec, g, r2);
        REQUIRE(a.has_value());
        REQUIRE(b.has_value());
        CHECK(a->image == b->image);
        CHECK(a->annotation == b->annotation);
        CHECK(a->trigger_boxes == b->trigger_boxes);
        CHECK(a->used_global_trigger == b->used_global_trigger);
    }
}

TEST_CASE("spec validation names bad fields") {
    PoisonSpec spec;
    spec.target_class = 9;
    CHECK_THROWS_AS(spec.validate(3), ValidationError);
    spec = PoisonSpec{};
    spec.global_trigger_prob = 1.5;
    CHECK_THROWS_AS(spec.validate(3), ValidationError);
    spec = PoisonSpec{};
    spec.oga_min_frac = 0.0;
    CHECK_THROWS_AS(spec.validate(3), ValidationError);
}
