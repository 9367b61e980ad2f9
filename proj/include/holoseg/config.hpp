#pragma once

#include <optional>
#include <string>
#include <vector>

#include "holoseg/clustering.hpp"
#include "holoseg/image_io.hpp"
#include "holoseg/inference.hpp"
#include "holoseg/losses.hpp"
#include "holoseg/model.hpp"
#include "holoseg/scene.hpp"
#include "holoseg/train.hpp"

namespace holoseg {

/// One structured config per run; every command reads the same file.
/// Precedence: --set overrides > file > defaults.
struct RunConfig {
    uint64_t seed = 7;
    std::string dataset_root = "data";
    std::string run_dir = "run";
    int train_images = 200;
    int val_images = 40;
    int test_images = 0;
    int tune_images = 20;  // leading slice of the train split used by cmd_tune

    ClassCatalog catalog = ClassCatalog::default_catalog();
    SceneSpec scene;          // split seeds are derived from `seed`
    bool val_unknowns = true; // unknown shapes appear in val/test only

    ArchSpec arch;            // K/K_st always derived from the catalog
    LossWeights weights;
    TrainSchedule schedule;

    double t = 3.0;
    std::vector<double> eps_grid{0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5};
    std::vector<int> min_pts_grid{4, 8, 16, 32};
    std::optional<DbscanParams> dbscan_fixed;  // skips the tuning file when set

    NmsParams nms;
    InferMode eval_mode = InferMode::Open;

    void finalize() {
        arch.K = catalog.known_count();
        arch.K_st = catalog.stuff_count();
        arch.activation = weights.activation;
        schedule.seed = seed;
        catalog.validate();
        scene.validate();
        arch.validate();
        weights.validate();
        schedule.validate();
        if (train_images < 1) throw ConfigError("config: train_images must be >= 1");
        if (tune_images < 1 || tune_images > train_images)
            throw ConfigError("config: tune_images must be in [1, train_images]");
        if (!(t >= 0)) throw ConfigError("config: t must be >= 0");
    }
};

namespace detail {

inline void apply_config_json(RunConfig& cfg, const ordered_json& j) {
    auto get_to = [](const ordered_json& obj, const char* key, auto& target) {
        if (obj.contains(key)) obj.at(key).get_to(target);
    };
    get_to(j, "seed", cfg.seed);
    get_to(j, "run_dir", cfg.run_dir);
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        get_to(d, "root", cfg.dataset_root);
        get_to(d, "train_images", cfg.train_images);
        get_to(d, "val_images", cfg.val_images);
        get_to(d, "test_images", cfg.test_images);
        get_to(d, "tune_images", cfg.tune_images);
    }
    if (j.contains("catalog") && j.at("catalog").is_object())
        cfg.catalog = ClassCatalog::from_json(j.at("catalog"));
    if (j.contains("scene")) {
        const auto& s = j.at("scene");
        get_to(s, "width", cfg.scene.width);
        get_to(s, "height", cfg.scene.height);
        if (s.contains("objects_per_image")) {
            cfg.scene.objects_min = s.at("objects_per_image").at(0).get<int>();
            cfg.scene.objects_max = s.at("objects_per_image").at(1).get<int>();
        }
        if (s.contains("object_radius")) {
            cfg.scene.radius_min = s.at("object_radius").at(0).get<int>();
            cfg.scene.radius_max = s.at("object_radius").at(1).get<int>();
        }
        get_to(s, "noise_std", cfg.scene.noise_std);
        get_to(s, "texture_jitter", cfg.scene.texture_jitter);
        get_to(s, "val_unknowns", cfg.val_unknowns);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        get_to(m, "patch_radius", cfg.arch.feature.patch_radius);
        get_to(m, "use_coords", cfg.arch.feature.use_coords);
        get_to(m, "trunk_widths", cfg.arch.trunk_widths);
        get_to(m, "F", cfg.arch.F);
    }
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        get_to(l, "lambda1", cfg.weights.lambda1);
        get_to(l, "lambda2", cfg.weights.lambda2);
        get_to(l, "lambda3", cfg.weights.lambda3);
        get_to(l, "lambda4", cfg.weights.lambda4);
        get_to(l, "lambda41", cfg.weights.lambda41);
        get_to(l, "lambda42", cfg.weights.lambda42);
        get_to(l, "lambda43", cfg.weights.lambda43);
        get_to(l, "delta_v", cfg.weights.delta_v);
        get_to(l, "delta_d", cfg.weights.delta_d);
        get_to(l, "lambda_kl", cfg.weights.lambda_kl);
        if (l.contains("activation"))
            cfg.weights.activation = activation_from_name(l.at("activation").get<std::string>());
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        get_to(s, "epochs", cfg.schedule.epochs);
        get_to(s, "lr", cfg.schedule.learning_rate);
        get_to(s, "lr_decay", cfg.schedule.lr_decay);
        get_to(s, "batch_size", cfg.schedule.batch_size);
        get_to(s, "pixel_fraction", cfg.schedule.pixel_fraction);
        get_to(s, "sigma_g", cfg.schedule.sigma_g);
    }
    if (j.contains("uncertainty")) get_to(j.at("uncertainty"), "t", cfg.t);
    if (j.contains("dbscan")) {
        const auto& d = j.at("dbscan");
        get_to(d, "eps_grid", cfg.eps_grid);
        get_to(d, "min_pts_grid", cfg.min_pts_grid);
        if (d.contains("eps") && d.contains("min_pts"))
            cfg.dbscan_fixed = DbscanParams{d.at("eps").get<double>(), d.at("min_pts").get<int>()};
    }
    if (j.contains("nms")) {
        const auto& nm = j.at("nms");
        get_to(nm, "window", cfg.nms.window);
        get_to(nm, "c_min", cfg.nms.c_min);
        get_to(nm, "top_k", cfg.nms.top_k);
    }
    if (j.contains("eval") && j.at("eval").contains("mode"))
        cfg.eval_mode = infer_mode_from_name(j.at("eval").at("mode").get<std::string>());
}

/// Applies one `--set a.b.c=value` override onto the raw JSON tree.
inline void apply_override(ordered_json& j, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("--set expects key.path=value, got: " + assignment);
    std::string path = assignment.substr(0, eq);
    std::string raw = assignment.substr(eq + 1);
    ordered_json value;
    try {
        value = ordered_json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw;  // plain string
    }
    ordered_json* node = &j;
    size_t start = 0;
    for (;;) {
        size_t dot = path.find('.', start);
        std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw ConfigError("--set: empty key segment in " + path);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

}  // namespace detail

inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::string>& overrides = {}) {
    ordered_json j = load_json(path);
    for (const std::string& o : overrides) detail::apply_override(j, o);
    RunConfig cfg;
    detail::apply_config_json(cfg, j);
    cfg.finalize();
    return cfg;
}

inline RunConfig config_from_json(const ordered_json& j) {
    RunConfig cfg;
    detail::apply_config_json(cfg, j);
    cfg.finalize();
    return cfg;
}

}  // namespace holoseg
