#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "holoseg/core.hpp"
#include "holoseg/image_io.hpp"

namespace holoseg {

constexpr uint8_t kIgnoreLabel = 255;

enum class ShapeKind { Disc, Square, Triangle, Star, Cross };

inline std::string shape_name(ShapeKind s) {
    switch (s) {
        case ShapeKind::Disc: return "disc";
        case ShapeKind::Square: return "square";
        case ShapeKind::Triangle: return "triangle";
        case ShapeKind::Star: return "star";
        case ShapeKind::Cross: return "cross";
    }
    throw ConfigError("unreachable shape kind");
}

inline ShapeKind shape_from_name(const std::string& n) {
    if (n == "disc") return ShapeKind::Disc;
    if (n == "square") return ShapeKind::Square;
    if (n == "triangle") return ShapeKind::Triangle;
    if (n == "star") return ShapeKind::Star;
    if (n == "cross") return ShapeKind::Cross;
    throw ConfigError("unknown shape kind: " + n);
}

using Rgb = std::array<double, 3>;

struct StuffClass {
    int id = 0;
    std::string name;
    Rgb color{};
};

struct ThingClass {
    int id = 0;
    ShapeKind shape = ShapeKind::Disc;
    std::string name;
    Rgb color{};
};

/// Class tables. Known ids are contiguous from 0 (stuff first, then known
/// things); unknown thing classes use ids past the known range and never
/// appear in training data.
struct ClassCatalog {
    std::vector<StuffClass> stuff;
    std::vector<ThingClass> known_things;
    std::vector<ThingClass> unknown_things;

    int stuff_count() const { return static_cast<int>(stuff.size()); }
    int known_count() const { return static_cast<int>(stuff.size() + known_things.size()); }
    /// Single synthetic class id that all unknown instances report as.
    int unknown_report_id() const { return known_count(); }

    bool is_stuff_id(int id) const { return id >= 0 && id < stuff_count(); }
    bool is_known_thing_id(int id) const { return id >= stuff_count() && id < known_count(); }
    bool is_unknown_id(int id) const {
        return id >= known_count() && id < known_count() + static_cast<int>(unknown_things.size());
    }

    void validate() const {
        int next = 0;
        for (const auto& s : stuff)
            if (s.id != next++) throw ConfigError("catalog: stuff ids must be contiguous from 0");
        for (const auto& t : known_things)
            if (t.id != next++) throw ConfigError("catalog: known thing ids must follow stuff ids");
        for (const auto& t : unknown_things)
            if (t.id != next++) throw ConfigError("catalog: unknown thing ids must follow known ids");
        if (stuff.empty()) throw ConfigError("catalog: at least one stuff class required");
    }

    static ClassCatalog default_catalog() {
        ClassCatalog c;
        c.stuff = {{0, "band_slate", {0.20, 0.22, 0.28}},
                   {1, "band_sand", {0.45, 0.43, 0.38}},
                   {2, "band_moss", {0.30, 0.38, 0.32}}};
        c.known_things = {{3, ShapeKind::Disc, "disc", {0.85, 0.15, 0.15}},
                          {4, ShapeKind::Square, "square", {0.10, 0.75, 0.20}},
                          {5, ShapeKind::Triangle, "triangle", {0.15, 0.25, 0.90}}};
        c.unknown_things = {{6, ShapeKind::Star, "star", {0.95, 0.85, 0.10}},
                            {7, ShapeKind::Cross, "cross", {0.90, 0.10, 0.85}}};
        return c;
    }

    ordered_json to_json() const {
        auto dump_rgb = [](const Rgb& c) { return ordered_json::array({c[0], c[1], c[2]}); };
        ordered_json j;
        j["stuff"] = ordered_json::array();
        for (const auto& s : stuff)
            j["stuff"].push_back({{"id", s.id}, {"name", s.name}, {"color", dump_rgb(s.color)}});
        auto dump_things = [&](const std::vector<ThingClass>& ts) {
            ordered_json arr = ordered_json::array();
            for (const auto& t : ts)
                arr.push_back({{"id", t.id},
                               {"name", t.name},
                               {"shape", shape_name(t.shape)},
                               {"color", dump_rgb(t.color)}});
            return arr;
        };
        j["known_things"] = dump_things(known_things);
        j["unknown_things"] = dump_things(unknown_things);
        return j;
    }

    static ClassCatalog from_json(const ordered_json& j) {
        ClassCatalog c;
        auto parse_rgb = [](const ordered_json& a) {
            return Rgb{a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>()};
        };
        for (const auto& s : json_get<ordered_json>(j, "stuff"))
            c.stuff.push_back({json_get<int>(s, "id"), json_get<std::string>(s, "name"),
                               parse_rgb(s.at("color"))});
        auto parse_things = [&](const ordered_json& arr) {
            std::vector<ThingClass> out;
            for (const auto& t : arr)
                out.push_back({json_get<int>(t, "id"),
                               shape_from_name(json_get<std::string>(t, "shape")),
                               json_get<std::string>(t, "name"), parse_rgb(t.at("color"))});
            return out;
        };
        c.known_things = parse_things(json_get<ordered_json>(j, "known_things"));
        c.unknown_things = parse_things(json_get<ordered_json>(j, "unknown_things"));
        c.validate();
        return c;
    }
};

struct SceneSpec {
    int width = 96;
    int height = 96;
    int objects_min = 2;
    int objects_max = 5;
    int radius_min = 5;
    int radius_max = 10;
    double noise_std = 0.02;
    double texture_jitter = 0.05;
    bool include_unknowns = false;
    uint64_t seed = 0;

    void validate() const {
        if (width < 32 || height < 32) throw ConfigError("scene: width and height must be >= 32");
        if (objects_min < 0 || objects_max < objects_min)
            throw ConfigError("scene: bad objects_per_image range");
        if (radius_min < 1 || radius_max < radius_min)
            throw ConfigError("scene: bad object_radius range");
        if (2 * radius_max + 1 > std::min(width, height))
            throw ConfigError("scene: object_radius range does not fit inside the image");
        if (noise_std < 0) throw ConfigError("scene: noise_std must be >= 0");
    }
};

struct CenterEntry {
    int row = 0;
    int col = 0;
    int instance_id = 0;
    int class_id = 0;
};

struct Sample {
    int id = 0;
    Field<uint8_t> image;        // H x W x 3; [0,1] values quantized to 8 bits
    Grid<uint8_t> semantic_map;  // class ids, 255 = ignore
    Grid<uint16_t> instance_map; // 0 = no instance
    std::vector<CenterEntry> centers;
    std::string split = "train";
};

namespace detail {

inline bool point_in_shape(ShapeKind kind, double dr, double dc, double radius) {
    switch (kind) {
        case ShapeKind::Disc:
            return dr * dr + dc * dc <= radius * radius;
        case ShapeKind::Square:
            return std::abs(dr) <= radius * 0.82 && std::abs(dc) <= radius * 0.82;
        case ShapeKind::Triangle: {
            // upward-pointing triangle: apex (-r, 0), base corners (0.8r, +-0.9r)
            const double ar = -radius, ac = 0.0;
            const double br = 0.8 * radius, bc = -0.9 * radius;
            const double cr = 0.8 * radius, cc = 0.9 * radius;
            auto side = [](double pr, double pc, double r0, double c0, double r1, double c1) {
                return (r1 - r0) * (pc - c0) - (c1 - c0) * (pr - r0);
            };
            double s0 = side(dr, dc, ar, ac, br, bc);
            double s1 = side(dr, dc, br, bc, cr, cc);
            double s2 = side(dr, dc, cr, cc, ar, ac);
            bool has_neg = s0 < 0 || s1 < 0 || s2 < 0;
            bool has_pos = s0 > 0 || s1 > 0 || s2 > 0;
            return !(has_neg && has_pos);
        }
        case ShapeKind::Star: {
            // 5-point star, apex up: 10-gon with alternating outer/inner radii.
            std::array<double, 20> poly;  // (r, c) pairs
            for (int i = 0; i < 10; ++i) {
                double rad = (i % 2 == 0) ? radius : 0.45 * radius;
                double ang = -M_PI / 2.0 + i * (M_PI / 5.0);
                poly[2 * i] = rad * std::sin(ang);
                poly[2 * i + 1] = rad * std::cos(ang);
            }
            // even-odd crossing test
            bool inside = false;
            for (int i = 0, j = 9; i < 10; j = i++) {
                double ri = poly[2 * i], ci = poly[2 * i + 1];
                double rj = poly[2 * j], cj = poly[2 * j + 1];
                if ((ci > dc) != (cj > dc) &&
                    dr < (rj - ri) * (dc - ci) / (cj - ci) + ri)
                    inside = !inside;
            }
            return inside;
        }
        case ShapeKind::Cross: {
            double arm = 0.33 * radius;
            bool horiz = std::abs(dr) <= arm && std::abs(dc) <= radius;
            bool vert = std::abs(dc) <= arm && std::abs(dr) <= radius;
            return horiz || vert;
        }
    }
    return false;
}

/// True iff the nonzero pixels of mask form a single 4-connected component.
inline bool is_four_connected(const Grid<uint8_t>& mask) {
    int start_r = -1, start_c = -1, total = 0;
    for (int r = 0; r < mask.rows; ++r)
        for (int c = 0; c < mask.cols; ++c)
            if (mask.at(r, c)) {
                ++total;
                if (start_r < 0) {
                    start_r = r;
                    start_c = c;
                }
            }
    if (total == 0) return false;
    Grid<uint8_t> seen(mask.rows, mask.cols, 0);
    std::vector<std::pair<int, int>> stack{{start_r, start_c}};
    seen.at(start_r, start_c) = 1;
    int reached = 0;
    while (!stack.empty()) {
        auto [r, c] = stack.back();
        stack.pop_back();
        ++reached;
        const int dr[4] = {-1, 1, 0, 0};
        const int dc[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
            int nr = r + dr[k], nc = c + dc[k];
            if (nr < 0 || nr >= mask.rows || nc < 0 || nc >= mask.cols) continue;
            if (!mask.at(nr, nc) || seen.at(nr, nc)) continue;
            seen.at(nr, nc) = 1;
            stack.emplace_back(nr, nc);
        }
    }
    return reached == total;
}

struct PlacedObject {
    int class_id = 0;
    Rgb color{};
};

}  // namespace detail

/// Generates one image deterministically from (catalog, spec, image index).
/// Objects are drawn back-to-front; a placement that would erase or split an
/// earlier object's visible pixels is retried and eventually skipped.
inline Sample generate_sample(const ClassCatalog& catalog, const SceneSpec& spec, int index) {
    catalog.validate();
    spec.validate();
    const int H = spec.height, W = spec.width;
    Rng rng(derive_seed(spec.seed, static_cast<uint64_t>(index)));

    Sample sample;
    sample.id = index;
    sample.image = Field<uint8_t>(H, W, 3);
    sample.semantic_map = Grid<uint8_t>(H, W, 0);
    sample.instance_map = Grid<uint16_t>(H, W, 0);

    // Horizontal stuff bands with jittered boundaries and shuffled class order.
    const int n_stuff = catalog.stuff_count();
    std::vector<int> band_order(n_stuff);
    for (int i = 0; i < n_stuff; ++i) band_order[i] = i;
    rng.shuffle(band_order);
    std::vector<int> boundaries;  // first row of each band after the first
    for (int i = 1; i < n_stuff; ++i) {
        double base = static_cast<double>(i) * H / n_stuff;
        double jitter = rng.uniform(-0.25, 0.25) * H / n_stuff;
        boundaries.push_back(std::clamp(static_cast<int>(std::lround(base + jitter)), 1, H - 1));
    }
    std::sort(boundaries.begin(), boundaries.end());
    Field<double> canvas(H, W, 3);
    std::vector<Rgb> band_colors(n_stuff);
    for (int b = 0; b < n_stuff; ++b) {
        Rgb c = catalog.stuff[band_order[b]].color;
        for (double& ch : c)
            ch = std::clamp(ch + rng.uniform(-spec.texture_jitter, spec.texture_jitter), 0.0, 1.0);
        band_colors[b] = c;
    }
    for (int r = 0; r < H; ++r) {
        int band = 0;
        while (band < static_cast<int>(boundaries.size()) && r >= boundaries[band]) ++band;
        for (int c = 0; c < W; ++c) {
            sample.semantic_map.at(r, c) = static_cast<uint8_t>(catalog.stuff[band_order[band]].id);
            for (int k = 0; k < 3; ++k) canvas.at(r, c, k) = band_colors[band][k];
        }
    }

    // Things, back to front.
    std::vector<const ThingClass*> pool;
    for (const auto& t : catalog.known_things) pool.push_back(&t);
    if (spec.include_unknowns)
        for (const auto& t : catalog.unknown_things) pool.push_back(&t);

    const int n_objects = spec.objects_max == spec.objects_min
                              ? spec.objects_min
                              : rng.uniform_int(spec.objects_min, spec.objects_max);
    std::vector<detail::PlacedObject> placed;
    constexpr int kMaxRetries = 20;
    constexpr int kMinVisible = 16;
    for (int obj = 0; obj < n_objects && !pool.empty(); ++obj) {
        bool ok = false;
        for (int attempt = 0; attempt < kMaxRetries && !ok; ++attempt) {
            const ThingClass& cls = *pool[rng.uniform_int(static_cast<uint64_t>(pool.size()))];
            int radius = rng.uniform_int(spec.radius_min, spec.radius_max);
            int cr = rng.uniform_int(radius, H - 1 - radius);
            int cc = rng.uniform_int(radius, W - 1 - radius);

            std::vector<std::pair<int, int>> pixels;
            for (int r = cr - radius; r <= cr + radius; ++r)
                for (int c = cc - radius; c <= cc + radius; ++c)
                    if (detail::point_in_shape(cls.shape, r - cr, c - cc, radius))
                        pixels.emplace_back(r, c);
            if (static_cast<int>(pixels.size()) < kMinVisible) continue;

            // Tentative paint, then verify earlier instances stay visible and
            // 4-connected.
            Grid<uint16_t> trial = sample.instance_map;
            uint16_t new_id = static_cast<uint16_t>(placed.size() + 1);
            for (auto [r, c] : pixels) trial.at(r, c) = new_id;
            bool valid = true;
            for (uint16_t prev = 1; prev < new_id && valid; ++prev) {
                Grid<uint8_t> mask(H, W, 0);
                int visible = 0;
                for (int r = 0; r < H; ++r)
                    for (int c = 0; c < W; ++c)
                        if (trial.at(r, c) == prev) {
                            mask.at(r, c) = 1;
                            ++visible;
                        }
                valid = visible >= kMinVisible && detail::is_four_connected(mask);
            }
            if (!valid) continue;

            sample.instance_map = std::move(trial);
            Rgb color = cls.color;
            for (double& ch : color)
                ch = std::clamp(ch + rng.uniform(-spec.texture_jitter, spec.texture_jitter), 0.0,
                                1.0);
            for (auto [r, c] : pixels) {
                sample.semantic_map.at(r, c) = static_cast<uint8_t>(cls.id);
                for (int k = 0; k < 3; ++k) canvas.at(r, c, k) = color[k];
            }
            placed.push_back({cls.id, color});
            ok = true;
        }
        // Placement can fail outright on crowded specs; the object is skipped.
    }

    // Pixel noise, then quantize; the label maps stay exact.
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            for (int k = 0; k < 3; ++k) {
                double v = canvas.at(r, c, k);
                if (spec.noise_std > 0) v += spec.noise_std * rng.normal();
                v = std::clamp(v, 0.0, 1.0);
                sample.image.at(r, c, k) = static_cast<uint8_t>(std::lround(v * 255.0));
            }

    // Centers: center of mass of each instance's visible pixels.
    const int n_inst = static_cast<int>(placed.size());
    std::vector<double> sum_r(n_inst, 0.0), sum_c(n_inst, 0.0);
    std::vector<int> count(n_inst, 0);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            int id = sample.instance_map.at(r, c);
            if (id > 0) {
                sum_r[id - 1] += r;
                sum_c[id - 1] += c;
                ++count[id - 1];
            }
        }
    for (int i = 0; i < n_inst; ++i) {
        if (count[i] == 0) throw DataError("generator produced an invisible instance");
        sample.centers.push_back({static_cast<int>(std::lround(sum_r[i] / count[i])),
                                  static_cast<int>(std::lround(sum_c[i] / count[i])), i + 1,
                                  placed[i].class_id});
    }
    return sample;
}

inline std::vector<Sample> generate_dataset(const ClassCatalog& catalog, const SceneSpec& spec,
                                            int n_images, const std::string& split = "train",
                                            int first_id = 0) {
    if (n_images < 1) throw ConfigError("generate_dataset: n_images must be >= 1");
    if (split == "train" && spec.include_unknowns)
        throw ConfigError("generate_dataset: train split must not include unknowns");
    std::vector<Sample> out(n_images);
    parallel_for(static_cast<size_t>(n_images), [&](size_t i) {
        out[i] = generate_sample(catalog, spec, static_cast<int>(i));
        out[i].id = first_id + static_cast<int>(i);
        out[i].split = split;
    });
    return out;
}

/// Per-instance unnormalized Gaussian bumps (peak exactly 1 at each recorded
/// center), merged by pixelwise max.
inline Grid<double> make_center_heatmap(const Sample& sample, double sigma_g) {
    if (!(sigma_g > 0)) throw DomainError("make_center_heatmap: sigma_g must be > 0");
    Grid<double> heat(sample.semantic_map.rows, sample.semantic_map.cols, 0.0);
    const double inv = 1.0 / (2.0 * sigma_g * sigma_g);
    for (const auto& ctr : sample.centers)
        for (int r = 0; r < heat.rows; ++r)
            for (int c = 0; c < heat.cols; ++c) {
                double d2 = static_cast<double>(r - ctr.row) * (r - ctr.row) +
                            static_cast<double>(c - ctr.col) * (c - ctr.col);
                heat.at(r, c) = std::max(heat.at(r, c), std::exp(-d2 * inv));
            }
    return heat;
}

inline std::string sample_stem(int id) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", id);
    return buf;
}

inline void encode_sample(const Sample& sample, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::string stem = (fs::path(dir) / sample_stem(sample.id)).string();
    write_png_rgb8(stem + "_img.png", sample.image);
    write_png_gray8(stem + "_sem.png", sample.semantic_map);
    write_png_gray16(stem + "_inst.png", sample.instance_map);
    ordered_json centers = ordered_json::array();
    for (const auto& c : sample.centers)
        centers.push_back({{"row", c.row},
                           {"col", c.col},
                           {"instance_id", c.instance_id},
                           {"class_id", c.class_id}});
    save_json(stem + "_meta.json", centers);
}

inline Sample decode_sample(const std::string& dir, int id, const std::string& split = "train") {
    namespace fs = std::filesystem;
    const std::string stem = (fs::path(dir) / sample_stem(id)).string();
    Sample s;
    s.id = id;
    s.split = split;
    auto require = [&](const std::string& path, const char* field) {
        if (!fs::exists(path))
            throw IoError("decode_sample: missing file for field '" + std::string(field) +
                          "': " + path);
        return path;
    };
    s.image = read_png_rgb8(require(stem + "_img.png", "image"));
    s.semantic_map = read_png_gray8(require(stem + "_sem.png", "semantic_map"));
    s.instance_map = read_png_gray16(require(stem + "_inst.png", "instance_map"));
    ordered_json centers = load_json(require(stem + "_meta.json", "centers"));
    if (!centers.is_array()) throw IoError("decode_sample: field 'centers' must be an array");
    for (const auto& c : centers)
        s.centers.push_back({json_get<int>(c, "row"), json_get<int>(c, "col"),
                             json_get<int>(c, "instance_id"), json_get<int>(c, "class_id")});
    if (!s.semantic_map.same_shape(Grid<uint8_t>(s.image.rows, s.image.cols)) ||
        s.instance_map.rows != s.image.rows || s.instance_map.cols != s.image.cols)
        throw IoError("decode_sample: field 'semantic_map'/'instance_map' shape mismatch");
    return s;
}

inline bool samples_equal(const Sample& a, const Sample& b) {
    if (a.image.data != b.image.data || a.semantic_map.data != b.semantic_map.data ||
        a.instance_map.data != b.instance_map.data)
        return false;
    if (a.centers.size() != b.centers.size()) return false;
    for (size_t i = 0; i < a.centers.size(); ++i) {
        const auto &x = a.centers[i], &y = b.centers[i];
        if (x.row != y.row || x.col != y.col || x.instance_id != y.instance_id ||
            x.class_id != y.class_id)
            return false;
    }
    return true;
}

struct DatasetManifest {
    std::vector<int> train;
    std::vector<int> val;
    std::vector<int> test;

    const std::vector<int>& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw ConfigError("unknown split: " + name);
    }

    ordered_json to_json() const {
        ordered_json j;
        j["splits"] = {{"train", train}, {"val", val}, {"test", test}};
        return j;
    }

    static DatasetManifest from_json(const ordered_json& j) {
        DatasetManifest m;
        const auto& splits = json_get<ordered_json>(j, "splits");
        m.train = json_get<std::vector<int>>(splits, "train");
        m.val = json_get<std::vector<int>>(splits, "val");
        m.test = json_get<std::vector<int>>(splits, "test");
        return m;
    }
};

inline void write_dataset(const std::string& root, const ClassCatalog& catalog,
                          const DatasetManifest& manifest, const std::vector<Sample>& samples) {
    std::filesystem::create_directories(root);
    save_json((std::filesystem::path(root) / "catalog.json").string(), catalog.to_json());
    save_json((std::filesystem::path(root) / "manifest.json").string(), manifest.to_json());
    parallel_for(samples.size(), [&](size_t i) { encode_sample(samples[i], root); });
}

inline ClassCatalog read_catalog(const std::string& root) {
    return ClassCatalog::from_json(
        load_json((std::filesystem::path(root) / "catalog.json").string()));
}

inline DatasetManifest read_manifest(const std::string& root) {
    return DatasetManifest::from_json(
        load_json((std::filesystem::path(root) / "manifest.json").string()));
}

inline std::vector<Sample> read_split(const std::string& root, const std::string& split_name) {
    DatasetManifest manifest = read_manifest(root);
    const std::vector<int>& ids = manifest.split(split_name);
    std::vector<Sample> out(ids.size());
    parallel_for(ids.size(), [&](size_t i) { out[i] = decode_sample(root, ids[i], split_name); });
    return out;
}

}  // namespace holoseg
