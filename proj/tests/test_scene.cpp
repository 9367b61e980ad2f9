#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "holoseg/scene.hpp"

using namespace holoseg;
namespace fs = std::filesystem;

namespace {

SceneSpec desk_spec(uint64_t seed = 7, bool unknowns = false) {
    SceneSpec s;
    s.width = 96;
    s.height = 96;
    s.objects_min = 2;
    s.objects_max = 5;
    s.radius_min = 5;
    s.radius_max = 10;
    s.noise_std = 0.02;
    s.texture_jitter = 0.05;
    s.include_unknowns = unknowns;
    s.seed = seed;
    return s;
}

/// Oracle: recount instances by 4-connected component labeling of the
/// instance map, independent of the generator's own bookkeeping.
int connected_component_instances(const Grid<uint16_t>& inst) {
    Grid<uint8_t> seen(inst.rows, inst.cols, 0);
    int components = 0;
    for (int r = 0; r < inst.rows; ++r)
        for (int c = 0; c < inst.cols; ++c) {
            if (inst.at(r, c) == 0 || seen.at(r, c)) continue;
            ++components;
            uint16_t id = inst.at(r, c);
            std::vector<std::pair<int, int>> stack{{r, c}};
            seen.at(r, c) = 1;
            while (!stack.empty()) {
                auto [cr, cc] = stack.back();
                stack.pop_back();
                const int dr[4] = {-1, 1, 0, 0};
                const int dc[4] = {0, 0, -1, 1};
                for (int k = 0; k < 4; ++k) {
                    int nr = cr + dr[k], nc = cc + dc[k];
                    if (nr < 0 || nr >= inst.rows || nc < 0 || nc >= inst.cols) continue;
                    if (seen.at(nr, nc) || inst.at(nr, nc) != id) continue;
                    seen.at(nr, nc) = 1;
                    stack.emplace_back(nr, nc);
                }
            }
        }
    return components;
}

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("holoseg_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("zero objects produce pure stuff bands", "[scene]") {
    auto catalog = ClassCatalog::default_catalog();
    SceneSpec spec = desk_spec(3);
    spec.objects_min = spec.objects_max = 0;
    auto samples = generate_dataset(catalog, spec, 2);
    for (const auto& s : samples) {
        CHECK(s.centers.empty());
        for (uint16_t v : s.instance_map.data) CHECK(v == 0);
        for (uint8_t sem : s.semantic_map.data) CHECK(catalog.is_stuff_id(sem));
    }
}

TEST_CASE("generation is deterministic", "[scene]") {
    auto catalog = ClassCatalog::default_catalog();
    auto a = generate_dataset(catalog, desk_spec(11), 3);
    auto b = generate_dataset(catalog, desk_spec(11), 3);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(samples_equal(a[i], b[i]));
    auto c = generate_dataset(catalog, desk_spec(12), 3);
    bool all_equal = true;
    for (size_t i = 0; i < a.size(); ++i) all_equal = all_equal && samples_equal(a[i], c[i]);
    CHECK_FALSE(all_equal);
}

TEST_CASE("instance counts verified by connected-component oracle", "[scene]") {
    auto catalog = ClassCatalog::default_catalog();
    SceneSpec spec = desk_spec(7);
    auto samples = generate_dataset(catalog, spec, 10);
    for (const auto& s : samples) {
        std::set<uint16_t> ids;
        for (uint16_t v : s.instance_map.data)
            if (v) ids.insert(v);
        int n = static_cast<int>(ids.size());
        CHECK(n >= spec.objects_min);
        CHECK(n <= spec.objects_max);
        // every instance is a single 4-connected blob, so the component
        // recount equals the id count
        CHECK(connected_component_instances(s.instance_map) == n);
        CHECK(static_cast<int>(s.centers.size()) == n);
    }
}

TEST_CASE("label maps and centers are mutually consistent", "[scene]") {
    auto catalog = ClassCatalog::default_catalog();
    auto samples = generate_dataset(catalog, desk_spec(21, true), 8, "val");
    bool saw_unknown = false;
    for (const auto& s : samples) {
        for (size_t i = 0; i < s.instance_map.size(); ++i) {
            int sem = s.semantic_map.data[i];
            if (s.instance_map.data[i] != 0) {
                CHECK((catalog.is_known_thing_id(sem) || catalog.is_unknown_id(sem)));
                saw_unknown = saw_unknown || catalog.is_unknown_id(sem);
            } else {
                CHECK(catalog.is_stuff_id(sem));
            }
        }
        std::set<int> center_ids;
        for (const auto& c : s.centers) {
            center_ids.insert(c.instance_id);
            CHECK(c.row >= 0);
            CHECK(c.row < s.semantic_map.rows);
            CHECK(c.col >= 0);
            CHECK(c.col < s.semantic_map.cols);
        }
        CHECK(center_ids.size() == s.centers.size());
    }
    CHECK(saw_unknown);
}

TEST_CASE("train split refuses unknowns", "[scene]") {
    auto catalog = ClassCatalog::default_catalog();
    CHECK_THROWS_AS(generate_dataset(catalog, desk_spec(1, true), 1, "train"), ConfigError);
}

TEST_CASE("center heatmap: empty, peak, and two-bump max", "[scene]") {
    auto catalog = ClassCatalog::default_catalog();
    SceneSpec spec = desk_spec(3);
    spec.objects_min = spec.objects_max = 0;
    Sample s = generate_dataset(catalog, spec, 1)[0];

    auto zero = make_center_heatmap(s, 4.0);
    for (double v : zero.data) CHECK(v == 0.0);

    s.centers.push_back({40, 50, 1, 3});
    auto one = make_center_heatmap(s, 4.0);
    CHECK(one.at(40, 50) == 1.0);
    for (double v : one.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }

    s.centers.push_back({40, 51, 2, 4});
    auto two = make_center_heatmap(s, 4.0);
    const double inv = 1.0 / (2.0 * 4.0 * 4.0);
    for (int r = 0; r < two.rows; ++r)
        for (int c = 0; c < two.cols; ++c) {
            double g1 = std::exp(-((r - 40.0) * (r - 40.0) + (c - 50.0) * (c - 50.0)) * inv);
            double g2 = std::exp(-((r - 40.0) * (r - 40.0) + (c - 51.0) * (c - 51.0)) * inv);
            CHECK(two.at(r, c) == Catch::Approx(std::max(g1, g2)).margin(1e-12));
        }

    CHECK_THROWS_AS(make_center_heatmap(s, 0.0), DomainError);
}

TEST_CASE("sample round trip through PNG + JSON is lossless", "[scene]") {
    auto catalog = ClassCatalog::default_catalog();
    auto samples = generate_dataset(catalog, desk_spec(5, true), 2, "val", 100);
    fs::path dir = temp_dir("roundtrip");
    for (const auto& s : samples) {
        encode_sample(s, dir.string());
        Sample back = decode_sample(dir.string(), s.id, s.split);
        CHECK(samples_equal(s, back));
    }
    fs::remove_all(dir);
}

TEST_CASE("decode errors name the offending field", "[scene]") {
    auto catalog = ClassCatalog::default_catalog();
    Sample s = generate_dataset(catalog, desk_spec(9), 1)[0];
    fs::path dir = temp_dir("decode_err");
    encode_sample(s, dir.string());
    fs::remove(dir / (sample_stem(s.id) + "_inst.png"));
    try {
        decode_sample(dir.string(), s.id);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("instance_map") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("16-bit instance ids survive the PNG codec", "[scene]") {
    fs::path dir = temp_dir("png16");
    Grid<uint16_t> inst(8, 8, 0);
    inst.at(3, 4) = 300;
    inst.at(0, 0) = 65535;
    std::string path = (dir / "inst.png").string();
    write_png_gray16(path, inst);
    Grid<uint16_t> back = read_png_gray16(path);
    CHECK(back.at(3, 4) == 300);
    CHECK(back.at(0, 0) == 65535);
    CHECK(back.data == inst.data);
    fs::remove_all(dir);
}

TEST_CASE("dataset write/read with manifest and catalog", "[scene]") {
    auto catalog = ClassCatalog::default_catalog();
    auto train = generate_dataset(catalog, desk_spec(1), 3, "train", 0);
    auto val = generate_dataset(catalog, desk_spec(2, true), 2, "val", 3);
    DatasetManifest manifest;
    for (const auto& s : train) manifest.train.push_back(s.id);
    for (const auto& s : val) manifest.val.push_back(s.id);
    std::vector<Sample> all = train;
    all.insert(all.end(), val.begin(), val.end());

    fs::path root = temp_dir("dataset");
    write_dataset(root.string(), catalog, manifest, all);
    ClassCatalog cat2 = read_catalog(root.string());
    CHECK(cat2.known_count() == catalog.known_count());
    CHECK(cat2.stuff_count() == catalog.stuff_count());
    auto train2 = read_split(root.string(), "train");
    REQUIRE(train2.size() == train.size());
    for (size_t i = 0; i < train.size(); ++i) CHECK(samples_equal(train[i], train2[i]));
    fs::remove_all(root);
}
