#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "holoseg/config.hpp"
#include "holoseg/inference.hpp"
#include "holoseg/metrics.hpp"
#include "holoseg/train.hpp"
#include "holoseg/tuning.hpp"
#include "holoseg/viz.hpp"

namespace holoseg {

namespace paths {

namespace fs = std::filesystem;

inline std::string checkpoint(const RunConfig& c) {
    return (fs::path(c.run_dir) / "checkpoint.bin").string();
}
inline std::string stats(const RunConfig& c) {
    return (fs::path(c.run_dir) / "stats.json").string();
}
inline std::string trace(const RunConfig& c) {
    return (fs::path(c.run_dir) / "trace.jsonl").string();
}
inline std::string tuning(const RunConfig& c) {
    return (fs::path(c.run_dir) / "dbscan_tuning.json").string();
}
inline std::string predictions(const RunConfig& c, const std::string& split) {
    return (fs::path(c.run_dir) / "preds" / split).string();
}
inline std::string eval_report(const RunConfig& c) {
    return (fs::path(c.run_dir) / "eval_report.json").string();
}
inline std::string viz_dir(const RunConfig& c, const std::string& split) {
    return (fs::path(c.run_dir) / "viz" / split).string();
}

}  // namespace paths

/// gen: deterministic dataset on disk (catalog, manifest, per-image files).
/// Unknown shapes appear only in the val/test scenes.
inline void cmd_gen(const RunConfig& cfg) {
    SceneSpec train_spec = cfg.scene;
    train_spec.include_unknowns = false;
    train_spec.seed = derive_seed(cfg.seed, 1);
    SceneSpec val_spec = cfg.scene;
    val_spec.include_unknowns = cfg.val_unknowns;
    val_spec.seed = derive_seed(cfg.seed, 2);
    SceneSpec test_spec = val_spec;
    test_spec.seed = derive_seed(cfg.seed, 3);

    std::vector<Sample> samples = generate_dataset(cfg.catalog, train_spec, cfg.train_images,
                                                   "train", 0);
    DatasetManifest manifest;
    for (const auto& s : samples) manifest.train.push_back(s.id);
    if (cfg.val_images > 0) {
        auto val = generate_dataset(cfg.catalog, val_spec, cfg.val_images, "val",
                                    cfg.train_images);
        for (auto& s : val) {
            manifest.val.push_back(s.id);
            samples.push_back(std::move(s));
        }
    }
    if (cfg.test_images > 0) {
        auto test = generate_dataset(cfg.catalog, test_spec, cfg.test_images, "test",
                                     cfg.train_images + cfg.val_images);
        for (auto& s : test) {
            manifest.test.push_back(s.id);
            samples.push_back(std::move(s));
        }
    }
    write_dataset(cfg.dataset_root, cfg.catalog, manifest, samples);
}

/// train: checkpoint + per-epoch loss trace + uncertainty stats beside it,
/// so inference never touches training data again.
inline TrainResult<float> cmd_train(const RunConfig& cfg) {
    std::filesystem::create_directories(cfg.run_dir);
    std::vector<Sample> train_split = read_split(cfg.dataset_root, "train");
    ModelParams params = init_params<float>(cfg.arch, derive_seed(cfg.seed, 10));

    std::ofstream trace_stream(paths::trace(cfg), std::ios::binary);
    if (!trace_stream) throw IoError("cannot open trace file for writing");
    TrainResult<float> result = train(std::move(params), train_split, cfg.weights, cfg.schedule,
                                      &trace_stream);
    save_checkpoint(result.params, paths::checkpoint(cfg));
    UncertaintyStats stats = fit_uncertainty_stats(result.params, train_split, cfg.t);
    save_json(paths::stats(cfg), stats.to_json());
    return result;
}

/// tune: Appendix-style grid search on a known-only slice of the train split.
inline TuneResult cmd_tune(const RunConfig& cfg) {
    ModelParams params = load_checkpoint(paths::checkpoint(cfg));
    require_arch(params, cfg.arch);
    std::vector<Sample> train_split = read_split(cfg.dataset_root, "train");
    if (static_cast<int>(train_split.size()) > cfg.tune_images)
        train_split.resize(cfg.tune_images);
    TuneResult result = tune_dbscan(params, train_split, cfg.eps_grid, cfg.min_pts_grid);
    save_json(paths::tuning(cfg), result.to_json());
    return result;
}

inline DbscanParams resolve_dbscan(const RunConfig& cfg) {
    if (cfg.dbscan_fixed) return *cfg.dbscan_fixed;
    ordered_json j = load_json(paths::tuning(cfg));
    const auto& sel = j.at("selected");
    return DbscanParams{sel.at("eps").get<double>(), sel.at("min_pts").get<int>()};
}

/// infer: holistic outputs for every image of the split, one file quartet per
/// image id.
inline void cmd_infer(const RunConfig& cfg, const std::string& split) {
    ModelParams params = load_checkpoint(paths::checkpoint(cfg));
    require_arch(params, cfg.arch);
    UncertaintyStats stats = UncertaintyStats::from_json(load_json(paths::stats(cfg)));
    DbscanParams dbscan_params = resolve_dbscan(cfg);
    DatasetManifest manifest = read_manifest(cfg.dataset_root);
    const std::vector<int>& ids = manifest.split(split);
    const std::string out_dir = paths::predictions(cfg, split);
    std::filesystem::create_directories(out_dir);

    parallel_for(ids.size(), [&](size_t i) {
        Sample sample = decode_sample(cfg.dataset_root, ids[i], split);
        HolisticOutput out =
            holistic_infer(params, sample.image, stats, dbscan_params, cfg.eval_mode, cfg.nms);
        const std::string stem =
            (std::filesystem::path(out_dir) / sample_stem(ids[i])).string();
        write_png_gray8(stem + "_pred_sem.png", out.semantic_map);
        write_png_gray16(stem + "_pred_inst.png", out.instance_map);
        Grid<uint16_t> unc(out.uncertainty.rows, out.uncertainty.cols);
        for (size_t px = 0; px < unc.size(); ++px)
            unc.data[px] = static_cast<uint16_t>(
                std::lround(std::clamp(out.uncertainty.data[px], 0.0, 1.0) * 65535.0));
        write_png_gray16(stem + "_unc.png", unc);
        ordered_json instances = ordered_json::array();
        for (const auto& inst : out.instances)
            instances.push_back({{"id", inst.id},
                                 {"class_id", inst.class_id},
                                 {"is_unknown", inst.is_unknown},
                                 {"pixel_count", inst.pixel_count}});
        save_json(stem + "_pred_meta.json",
                  ordered_json{{"instances", instances},
                               {"threshold", stats.threshold},
                               {"mode", infer_mode_name(cfg.eval_mode)},
                               {"no_prototypes_warning", out.no_prototypes_warning}});
    });
}

/// eval: PQ/RQ/SQ per group, mIoU, and the pixel-level unknown metrics, all
/// from the prediction files (the model is not consulted).
inline ordered_json cmd_eval(const RunConfig& cfg, const std::string& split, InferMode mode) {
    DatasetManifest manifest = read_manifest(cfg.dataset_root);
    const std::vector<int>& ids = manifest.split(split);
    if (ids.empty()) throw ConfigError("eval: split '" + split + "' is empty");
    const std::string pred_dir = paths::predictions(cfg, split);
    const ClassLayout layout{cfg.catalog.stuff_count(), cfg.catalog.known_count()};

    std::vector<Grid<uint8_t>> pred_sem(ids.size()), gt_sem(ids.size());
    std::vector<Grid<uint16_t>> pred_inst(ids.size()), gt_inst(ids.size());
    std::vector<Grid<double>> scores(ids.size());
    std::vector<Grid<uint8_t>> unknown_masks(ids.size());
    bool any_unknown_gt = false;

    parallel_for(ids.size(), [&](size_t i) {
        Sample gt = decode_sample(cfg.dataset_root, ids[i], split);
        const std::string stem =
            (std::filesystem::path(pred_dir) / sample_stem(ids[i])).string();
        pred_sem[i] = read_png_gray8(stem + "_pred_sem.png");
        pred_inst[i] = read_png_gray16(stem + "_pred_inst.png");
        Grid<uint16_t> unc = read_png_gray16(stem + "_unc.png");
        scores[i] = Grid<double>(unc.rows, unc.cols);
        for (size_t px = 0; px < unc.size(); ++px) scores[i].data[px] = unc.data[px] / 65535.0;
        gt_sem[i] = gt.semantic_map;
        gt_inst[i] = gt.instance_map;
        unknown_masks[i] = Grid<uint8_t>(gt.semantic_map.rows, gt.semantic_map.cols, 0);
        for (size_t px = 0; px < gt.semantic_map.size(); ++px) {
            int y = gt.semantic_map.data[px];
            if (y != kIgnoreLabel && y >= layout.K) unknown_masks[i].data[px] = 1;
        }
    });
    for (const auto& m : unknown_masks)
        for (uint8_t v : m.data) any_unknown_gt |= v != 0;

    PqReport report = pq(pred_sem, pred_inst, gt_sem, gt_inst, layout);
    double miou_val = miou(pred_sem, gt_sem, layout.K);

    ordered_json j;
    j["mode"] = infer_mode_name(mode);
    ordered_json groups;
    auto dump = [](const PqTally& t) -> ordered_json {
        if (!t.populated()) return nullptr;
        return ordered_json{{"pq", t.pq()}, {"rq", t.rq()}, {"sq", t.sq()},
                            {"tp", t.tp},   {"fp", t.fp},   {"fn", t.fn}};
    };
    groups["known_things"] = dump(report.known_things);
    groups["known_stuff"] = dump(report.known_stuff);
    groups["all_known"] = dump(report.all_known);
    groups["unknown"] = dump(report.unknown);
    j["groups"] = groups;
    j["miou"] = miou_val;
    if (any_unknown_gt) {
        UncertaintyReport ur = uncertainty_report(scores, unknown_masks);
        j["unknown_ap"] = ur.ap;
        j["fpr95"] = ur.fpr95;
    } else {
        j["unknown_ap"] = nullptr;
        j["fpr95"] = nullptr;
    }
    j["n_images"] = ids.size();
    std::filesystem::create_directories(cfg.run_dir);
    save_json(paths::eval_report(cfg), j);
    return j;
}

/// viz: PNG overlays for a split's predictions; the embedding projection runs
/// a fresh forward pass since prediction files do not carry embeddings.
inline void cmd_viz(const RunConfig& cfg, const std::string& split) {
    ModelParams params = load_checkpoint(paths::checkpoint(cfg));
    require_arch(params, cfg.arch);
    DatasetManifest manifest = read_manifest(cfg.dataset_root);
    const std::vector<int>& ids = manifest.split(split);
    const std::string pred_dir = paths::predictions(cfg, split);
    const std::string out_dir = paths::viz_dir(cfg, split);
    std::filesystem::create_directories(out_dir);

    parallel_for(ids.size(), [&](size_t i) {
        const std::string stem_in =
            (std::filesystem::path(pred_dir) / sample_stem(ids[i])).string();
        const std::string stem_out =
            (std::filesystem::path(out_dir) / sample_stem(ids[i])).string();
        Grid<uint8_t> sem = read_png_gray8(stem_in + "_pred_sem.png");
        Grid<uint16_t> inst = read_png_gray16(stem_in + "_pred_inst.png");
        Grid<uint16_t> unc16 = read_png_gray16(stem_in + "_unc.png");
        Grid<double> unc(unc16.rows, unc16.cols);
        for (size_t px = 0; px < unc.size(); ++px) unc.data[px] = unc16.data[px] / 65535.0;

        write_png_rgb8(stem_out + "_sem_viz.png", viz_semantic(sem, cfg.catalog));
        write_png_rgb8(stem_out + "_inst_viz.png", viz_instances(inst));
        write_png_rgb8(stem_out + "_unc_viz.png", viz_uncertainty(unc));

        Sample sample = decode_sample(cfg.dataset_root, ids[i], split);
        DensePrediction pred = forward(params, sample.image);
        write_png_rgb8(stem_out + "_embed_viz.png", viz_embeddings(pred.embed));
    });
}

}  // namespace holoseg
