#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "holoseg/train.hpp"

using namespace holoseg;

namespace {

std::vector<Sample> tiny_split(uint64_t seed, int n) {
    SceneSpec spec;
    spec.width = 32;
    spec.height = 32;
    spec.objects_min = 1;
    spec.objects_max = 2;
    spec.radius_min = 4;
    spec.radius_max = 6;
    spec.noise_std = 0.02;
    spec.seed = seed;
    return generate_dataset(ClassCatalog::default_catalog(), spec, n);
}

ArchSpec tiny_arch() {
    ArchSpec a;
    a.K = 6;
    a.K_st = 3;
    a.F = 4;
    a.trunk_widths = {16, 16};
    a.feature.patch_radius = 2;
    return a;
}

}  // namespace

TEST_CASE("zero epochs leave parameters unchanged", "[training]") {
    auto split = tiny_split(1, 2);
    auto params = init_params<float>(tiny_arch(), 5);
    TrainSchedule sched;
    sched.epochs = 0;
    auto result = train(params, split, LossWeights{}, sched);
    CHECK(result.params.flatten() == params.flatten());
    CHECK(result.trace.empty());
    CHECK_FALSE(result.aborted);
}

TEST_CASE("training is deterministic for a fixed seed", "[training]") {
    auto split = tiny_split(2, 4);
    auto params = init_params<float>(tiny_arch(), 7);
    TrainSchedule sched;
    sched.epochs = 3;
    sched.batch_size = 2;
    sched.seed = 99;
    sched.pixel_fraction = 0.5;
    sched.sigma_g = 2.0;
    auto a = train(params, split, LossWeights{}, sched);
    auto b = train(params, split, LossWeights{}, sched);
    CHECK(a.params.flatten() == b.params.flatten());
    REQUIRE(a.trace.size() == b.trace.size());
    for (size_t i = 0; i < a.trace.size(); ++i)
        CHECK(a.trace[i].report.total == b.trace[i].report.total);
}

TEST_CASE("loss decreases on a small smoke run", "[training][slow]") {
    auto split = tiny_split(3, 20);
    auto params = init_params<float>(tiny_arch(), 1);
    TrainSchedule sched;
    sched.epochs = 30;
    sched.batch_size = 5;
    sched.seed = 4;
    sched.sigma_g = 2.0;
    std::ostringstream trace;
    auto result = train(params, split, LossWeights{}, sched, &trace);
    REQUIRE(result.trace.size() == 30);
    CHECK(result.trace.back().report.total < result.trace.front().report.total);
    CHECK_FALSE(result.aborted);

    // trace stream: one JSON object per epoch with the declared keys
    std::istringstream lines(trace.str());
    std::string line;
    int count = 0;
    while (std::getline(lines, line)) {
        auto j = ordered_json::parse(line);
        for (const char* key :
             {"epoch", "L_s", "L_o", "L_p", "L_va", "L_di", "L_re", "L_kl", "total", "lr"})
            CHECK(j.contains(key));
        ++count;
    }
    CHECK(count == 30);

    // learning rate decays by 2% per epoch
    CHECK(result.trace[1].lr == Catch::Approx(result.trace[0].lr * 0.98));
}

TEST_CASE("divergence aborts with the last good parameters", "[training]") {
    auto split = tiny_split(5, 2);
    auto params = init_params<float>(tiny_arch(), 3);
    TrainSchedule sched;
    sched.epochs = 5;
    sched.batch_size = 2;
    sched.learning_rate = 1e6;  // guaranteed blow-up
    sched.sigma_g = 2.0;
    sched.divergence_limit = 10.0;
    auto result = train(params, split, LossWeights{}, sched);
    CHECK(result.aborted);
    CHECK(result.completed_epochs < 5);
}

TEST_CASE("train refuses unknowns in the split", "[training]") {
    SceneSpec spec;
    spec.width = 32;
    spec.height = 32;
    spec.include_unknowns = true;
    spec.seed = 8;
    spec.radius_min = 4;
    spec.radius_max = 6;
    auto bad = generate_dataset(ClassCatalog::default_catalog(), spec, 1, "val");
    auto params = init_params<float>(tiny_arch(), 3);
    CHECK_THROWS_AS(train(params, bad, LossWeights{}, TrainSchedule{}), ConfigError);
}
