#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "holoseg/holoseg.hpp"

using namespace holoseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_root(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("holoseg_cmd_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

/// Small-but-real config: 32x32 scenes, a thin model, a few epochs.
ordered_json smoke_json(const fs::path& root, uint64_t seed = 7) {
    return ordered_json{
        {"seed", seed},
        {"run_dir", (root / "run").string()},
        {"dataset",
         {{"root", (root / "data").string()},
          {"train_images", 12},
          {"val_images", 4},
          {"tune_images", 6}}},
        {"scene",
         {{"width", 48},
          {"height", 48},
          {"objects_per_image", {1, 3}},
          {"object_radius", {4, 7}},
          {"noise_std", 0.02}}},
        {"model",
         {{"patch_radius", 2}, {"use_coords", true}, {"trunk_widths", {24, 24}}, {"F", 4}}},
        {"schedule",
         {{"epochs", 4}, {"batch_size", 4}, {"pixel_fraction", 0.5}, {"sigma_g", 2.5}}},
        {"dbscan", {{"eps_grid", {0.5, 1.0}}, {"min_pts_grid", {4, 8}}}},
        {"eval", {{"mode", "open"}}}};
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("config parsing, overrides, and precedence", "[commands]") {
    fs::path root = temp_root("config");
    ordered_json j = smoke_json(root);
    fs::path cfg_path = root / "config.json";
    save_json(cfg_path.string(), j);

    RunConfig cfg = load_run_config(cfg_path.string());
    CHECK(cfg.train_images == 12);
    CHECK(cfg.arch.F == 4);
    CHECK(cfg.arch.K == 6);  // derived from the default catalog
    CHECK(cfg.eval_mode == InferMode::Open);
    CHECK(cfg.schedule.seed == cfg.seed);

    // flags beat the file
    RunConfig over = load_run_config(cfg_path.string(),
                                     {"model.F=8", "eval.mode=closed", "schedule.epochs=0"});
    CHECK(over.arch.F == 8);
    CHECK(over.eval_mode == InferMode::Closed);
    CHECK(over.schedule.epochs == 0);

    CHECK_THROWS_AS(load_run_config(cfg_path.string(), {"nonsense"}), ConfigError);
    fs::remove_all(root);
}

TEST_CASE("cmd_train with zero epochs emits the initialization checkpoint", "[commands]") {
    fs::path root = temp_root("train0");
    ordered_json j = smoke_json(root, 21);
    j["schedule"]["epochs"] = 0;
    RunConfig cfg = config_from_json(j);
    cmd_gen(cfg);
    cmd_train(cfg);

    ModelParams from_disk = load_checkpoint(paths::checkpoint(cfg));
    ModelParams expected = init_params<float>(cfg.arch, derive_seed(cfg.seed, 10));
    CHECK(from_disk.flatten() == expected.flatten());
    CHECK(fs::exists(paths::stats(cfg)));
    fs::remove_all(root);
}

TEST_CASE("full pipeline smoke run emits every declared file", "[commands][slow]") {
    fs::path root = temp_root("pipeline");
    RunConfig cfg = config_from_json(smoke_json(root, 33));

    cmd_gen(cfg);
    CHECK(fs::exists(fs::path(cfg.dataset_root) / "catalog.json"));
    CHECK(fs::exists(fs::path(cfg.dataset_root) / "manifest.json"));
    CHECK(fs::exists(fs::path(cfg.dataset_root) / "000000_img.png"));
    CHECK(fs::exists(fs::path(cfg.dataset_root) / "000000_sem.png"));
    CHECK(fs::exists(fs::path(cfg.dataset_root) / "000000_inst.png"));
    CHECK(fs::exists(fs::path(cfg.dataset_root) / "000000_meta.json"));

    // unknowns only in val scenes
    auto train_split = read_split(cfg.dataset_root, "train");
    for (const auto& s : train_split)
        for (uint8_t y : s.semantic_map.data) CHECK(y < cfg.catalog.known_count());

    auto result = cmd_train(cfg);
    CHECK_FALSE(result.aborted);
    CHECK(fs::exists(paths::checkpoint(cfg)));
    CHECK(fs::exists(paths::stats(cfg)));
    CHECK(fs::exists(paths::trace(cfg)));

    auto tune_result = cmd_tune(cfg);
    CHECK(fs::exists(paths::tuning(cfg)));
    CHECK(tune_result.table.size() == 4);

    cmd_infer(cfg, "val");
    auto ids = read_manifest(cfg.dataset_root).val;
    for (int id : ids) {
        fs::path stem = fs::path(paths::predictions(cfg, "val")) / sample_stem(id);
        CHECK(fs::exists(stem.string() + "_pred_sem.png"));
        CHECK(fs::exists(stem.string() + "_pred_inst.png"));
        CHECK(fs::exists(stem.string() + "_unc.png"));
        CHECK(fs::exists(stem.string() + "_pred_meta.json"));
    }

    auto report = cmd_eval(cfg, "val", cfg.eval_mode);
    CHECK(fs::exists(paths::eval_report(cfg)));
    CHECK(report.at("mode") == "open");
    CHECK(report.contains("groups"));
    CHECK(report.contains("miou"));
    CHECK(report.at("n_images") == ids.size());

    cmd_viz(cfg, "val");
    for (int id : ids) {
        fs::path stem = fs::path(paths::viz_dir(cfg, "val")) / sample_stem(id);
        CHECK(fs::exists(stem.string() + "_sem_viz.png"));
        CHECK(fs::exists(stem.string() + "_inst_viz.png"));
        CHECK(fs::exists(stem.string() + "_unc_viz.png"));
        CHECK(fs::exists(stem.string() + "_embed_viz.png"));
    }
    fs::remove_all(root);
}

TEST_CASE("re-running commands yields byte-identical outputs", "[commands][slow]") {
    fs::path root_a = temp_root("det_a");
    fs::path root_b = temp_root("det_b");
    RunConfig a = config_from_json(smoke_json(root_a, 55));
    RunConfig b = config_from_json(smoke_json(root_b, 55));

    for (const RunConfig* cfg : {&a, &b}) {
        cmd_gen(*cfg);
        cmd_train(*cfg);
        cmd_tune(*cfg);
        cmd_infer(*cfg, "val");
        cmd_eval(*cfg, "val", cfg->eval_mode);
    }

    CHECK(slurp(paths::checkpoint(a)) == slurp(paths::checkpoint(b)));
    CHECK(slurp(paths::stats(a)) == slurp(paths::stats(b)));
    CHECK(slurp(paths::trace(a)) == slurp(paths::trace(b)));
    CHECK(slurp(paths::tuning(a)) == slurp(paths::tuning(b)));
    CHECK(slurp(paths::eval_report(a)) == slurp(paths::eval_report(b)));
    auto ids = read_manifest(a.dataset_root).val;
    for (int id : ids) {
        fs::path sa = fs::path(paths::predictions(a, "val")) / sample_stem(id);
        fs::path sb = fs::path(paths::predictions(b, "val")) / sample_stem(id);
        CHECK(slurp(sa.string() + "_pred_sem.png") == slurp(sb.string() + "_pred_sem.png"));
        CHECK(slurp(sa.string() + "_pred_inst.png") == slurp(sb.string() + "_pred_inst.png"));
        CHECK(slurp(sa.string() + "_unc.png") == slurp(sb.string() + "_unc.png"));
    }
    // dataset bytes too
    CHECK(slurp(fs::path(a.dataset_root) / "000000_img.png") ==
          slurp(fs::path(b.dataset_root) / "000000_img.png"));
    fs::remove_all(root_a);
    fs::remove_all(root_b);
}

TEST_CASE("cmd_eval on perfect crafted predictions reports all-known PQ 1", "[commands]") {
    fs::path root = temp_root("perfect");
    ordered_json j = smoke_json(root, 77);
    j["dataset"]["train_images"] = 2;
    j["dataset"]["val_images"] = 2;
    j["dataset"]["tune_images"] = 1;
    j["scene"]["val_unknowns"] = false;  // known classes only
    j["eval"]["mode"] = "closed";
    RunConfig cfg = config_from_json(j);
    cmd_gen(cfg);

    // craft predictions = ground truth
    const std::string pred_dir = paths::predictions(cfg, "val");
    fs::create_directories(pred_dir);
    for (int id : read_manifest(cfg.dataset_root).val) {
        Sample gt = decode_sample(cfg.dataset_root, id, "val");
        fs::path stem = fs::path(pred_dir) / sample_stem(id);
        write_png_gray8(stem.string() + "_pred_sem.png", gt.semantic_map);
        write_png_gray16(stem.string() + "_pred_inst.png", gt.instance_map);
        Grid<uint16_t> unc(gt.semantic_map.rows, gt.semantic_map.cols, 0);
        write_png_gray16(stem.string() + "_unc.png", unc);
        save_json(stem.string() + "_pred_meta.json", ordered_json{{"instances", ordered_json::array()},
                                                                  {"threshold", 0.0},
                                                                  {"mode", "closed"}});
    }
    auto report = cmd_eval(cfg, "val", InferMode::Closed);
    CHECK(report.at("groups").at("all_known").at("pq").get<double>() == 1.0);
    CHECK(report.at("miou").get<double>() == 1.0);
    CHECK(report.at("unknown_ap").is_null());
    fs::remove_all(root);
}
