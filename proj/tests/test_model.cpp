#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "holoseg/model.hpp"
#include "holoseg/scene.hpp"

using namespace holoseg;
namespace fs = std::filesystem;

namespace {

ArchSpec small_arch() {
    ArchSpec a;
    a.K = 6;
    a.K_st = 3;
    a.F = 8;
    a.trunk_widths = {16, 16};
    a.feature.patch_radius = 2;
    a.feature.use_coords = true;
    return a;
}

Field<uint8_t> constant_image(int h, int w, uint8_t v) {
    Field<uint8_t> img(h, w, 3, v);
    return img;
}

}  // namespace

TEST_CASE("init is deterministic and shaped by the arch", "[model]") {
    ArchSpec arch = small_arch();
    auto a = init_params<float>(arch, 99);
    auto b = init_params<float>(arch, 99);
    CHECK(a.flatten() == b.flatten());
    auto c = init_params<float>(arch, 100);
    CHECK(a.flatten() != c.flatten());

    CHECK(a.head_embed.W.rows() == 8);
    CHECK(a.head_sem.W.rows() == 6);
    CHECK(a.head_sem.W.cols() == 16);
    CHECK(a.head_center.W.cols() == 16 + 6);
    CHECK(a.head_embed.W.cols() == 16 + 1 + 6);
    CHECK(a.head_proto_mu.W.cols() == 16 + 1);
}

TEST_CASE("degenerate arch is rejected", "[model]") {
    ArchSpec arch = small_arch();
    arch.trunk_widths = {0};
    CHECK_THROWS_AS(init_params<float>(arch, 1), ConfigError);
    arch = small_arch();
    arch.F = 1;
    CHECK_THROWS_AS(init_params<float>(arch, 1), ConfigError);
}

TEST_CASE("zero weights on a zero image give the closed-form outputs", "[model]") {
    ArchSpec arch = small_arch();
    arch.feature.use_coords = false;  // keep the input exactly zero
    auto params = init_params<double>(arch, 1);
    params.for_each_layer([](AffineLayer<double>& l) { l.W.setZero(); });

    auto img = constant_image(8, 8, 0);
    auto pred = forward(params, img);
    const double ln2 = std::log(2.0);
    for (int k = 0; k < arch.K; ++k) {
        CHECK(pred.sem_logits.at(3, 3, k) == Catch::Approx(0.0).margin(1e-12));
        CHECK(pred.evidence.at(3, 3, k) == Catch::Approx(ln2).epsilon(1e-12));
        CHECK(pred.alpha.at(3, 3, k) == Catch::Approx(1.0 + ln2).epsilon(1e-12));
    }
    // u = K / sum(alpha) = 1 / (1 + ln 2)
    double sum_alpha = 0;
    for (int k = 0; k < arch.K; ++k) sum_alpha += pred.alpha.at(0, 0, k);
    CHECK(arch.K / sum_alpha == Catch::Approx(1.0 / (1.0 + ln2)).epsilon(1e-12));
    CHECK(pred.center_hat.at(4, 4) == Catch::Approx(0.5).epsilon(1e-12));
    CHECK(pred.proto_var.at(4, 4) == Catch::Approx(ln2).epsilon(1e-12));
}

TEST_CASE("activation ranges hold for arbitrary inputs", "[model]") {
    ArchSpec arch = small_arch();
    auto params = init_params<float>(arch, 5);
    auto catalog = ClassCatalog::default_catalog();
    SceneSpec spec;
    spec.seed = 31;
    spec.width = 48;
    spec.height = 48;
    auto sample = generate_dataset(catalog, spec, 1)[0];
    auto pred = forward(params, sample.image);
    for (float e : pred.evidence.data) CHECK(e >= 0.0f);
    for (float a : pred.alpha.data) CHECK(a >= 1.0f);
    for (float v : pred.proto_var.data) CHECK(v > 0.0f);
    for (float c : pred.center_hat.data) {
        CHECK(c >= 0.0f);
        CHECK(c <= 1.0f);
    }
}

TEST_CASE("translation equivariance away from borders", "[model]") {
    ArchSpec arch = small_arch();
    arch.feature.use_coords = false;  // coordinates intentionally break this
    auto params = init_params<float>(arch, 17);

    // Same 5x5 patch content stamped at two interior locations of two images.
    Field<uint8_t> img1 = constant_image(24, 24, 40);
    Field<uint8_t> img2 = constant_image(24, 24, 40);
    Rng rng(8);
    const int R = arch.feature.patch_radius;
    for (int dr = -R; dr <= R; ++dr)
        for (int dc = -R; dc <= R; ++dc)
            for (int k = 0; k < 3; ++k) {
                uint8_t v = static_cast<uint8_t>(rng.uniform_int(uint64_t{256}));
                img1.at(10 + dr, 9 + dc, k) = v;
                img2.at(15 + dr, 17 + dc, k) = v;
            }
    auto p1 = forward(params, img1);
    auto p2 = forward(params, img2);
    for (int k = 0; k < arch.K; ++k)
        CHECK(p1.sem_logits.at(10, 9, k) == p2.sem_logits.at(15, 17, k));
    for (int f = 0; f < arch.F; ++f) {
        CHECK(p1.embed.at(10, 9, f) == p2.embed.at(15, 17, f));
        CHECK(p1.proto_mu.at(10, 9, f) == p2.proto_mu.at(15, 17, f));
    }
    CHECK(p1.center_hat.at(10, 9) == p2.center_hat.at(15, 17));
    CHECK(p1.proto_var.at(10, 9) == p2.proto_var.at(15, 17));
}

TEST_CASE("per-pixel locality: distant pixels do not interact", "[model]") {
    ArchSpec arch = small_arch();
    arch.feature.use_coords = true;
    auto params = init_params<float>(arch, 23);
    Field<uint8_t> img = constant_image(20, 20, 90);
    auto base = forward(params, img);
    // poke a pixel far outside (2,2)'s 5x5 patch
    img.at(15, 15, 1) = 200;
    auto poked = forward(params, img);
    for (int k = 0; k < arch.K; ++k)
        CHECK(base.sem_logits.at(2, 2, k) == poked.sem_logits.at(2, 2, k));
    CHECK(base.center_hat.at(2, 2) == poked.center_hat.at(2, 2));
    // and the poked pixel itself does change
    bool changed = false;
    for (int k = 0; k < arch.K; ++k)
        changed = changed || base.sem_logits.at(15, 15, k) != poked.sem_logits.at(15, 15, k);
    CHECK(changed);
}

TEST_CASE("checkpoint round trip is bit-exact", "[model]") {
    ArchSpec arch = small_arch();
    auto params = init_params<float>(arch, 3);
    fs::path path = fs::temp_directory_path() / "holoseg_test_ckpt.bin";
    save_checkpoint(params, path.string());
    ModelParams back = load_checkpoint(path.string());
    CHECK(back.flatten() == params.flatten());
    CHECK(back.K == params.K);
    CHECK(back.K_st == params.K_st);
    CHECK(back.feature.patch_radius == params.feature.patch_radius);
    CHECK(back.activation == params.activation);
    fs::remove(path);
}

TEST_CASE("checkpoint corruption and mismatch errors", "[model]") {
    ArchSpec arch = small_arch();
    auto params = init_params<float>(arch, 3);
    fs::path path = fs::temp_directory_path() / "holoseg_test_ckpt2.bin";
    save_checkpoint(params, path.string());

    SECTION("truncated file") {
        auto size = fs::file_size(path);
        fs::resize_file(path, size / 2);
        CHECK_THROWS_AS(load_checkpoint(path.string()), IoError);
    }
    SECTION("bad magic") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.write("NOPE", 4);
        f.close();
        CHECK_THROWS_AS(load_checkpoint(path.string()), IoError);
    }
    SECTION("arch mismatch at load time") {
        ModelParams loaded = load_checkpoint(path.string());
        ArchSpec other = arch;
        other.K = 7;
        CHECK_THROWS_AS(require_arch(loaded, other), ConfigError);
        CHECK_NOTHROW(require_arch(loaded, arch));
    }
    fs::remove(path);
}
