#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "holoseg/holoseg.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "run config file (JSON)")->required();
    cmd->add_option("--set", args.overrides, "override config values, key.path=value");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"holoseg: holistic segmentation of known objects and unseen unknowns"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string split = "val";
    std::string mode_override;

    CLI::App* gen = app.add_subcommand("gen", "generate the synthetic dataset");
    add_common(gen, args);
    CLI::App* train_cmd = app.add_subcommand("train", "train a model, write checkpoint + stats");
    add_common(train_cmd, args);
    CLI::App* tune = app.add_subcommand("tune", "grid-search DBSCAN parameters on known data");
    add_common(tune, args);
    CLI::App* infer = app.add_subcommand("infer", "run holistic inference over a split");
    add_common(infer, args);
    infer->add_option("--split", split, "dataset split (train|val|test)");
    CLI::App* eval = app.add_subcommand("eval", "score predictions against ground truth");
    add_common(eval, args);
    eval->add_option("--split", split, "dataset split (train|val|test)");
    eval->add_option("--mode", mode_override, "open|closed (defaults to the config)");
    CLI::App* viz = app.add_subcommand("viz", "render prediction overlays");
    add_common(viz, args);
    viz->add_option("--split", split, "dataset split (train|val|test)");

    CLI11_PARSE(app, argc, argv);

    try {
        holoseg::RunConfig cfg = holoseg::load_run_config(args.config_path, args.overrides);
        if (gen->parsed()) {
            holoseg::cmd_gen(cfg);
        } else if (train_cmd->parsed()) {
            auto result = holoseg::cmd_train(cfg);
            if (result.aborted) {
                std::cerr << R"({"error": "training diverged; last good checkpoint saved"})"
                          << "\n";
                return 2;
            }
        } else if (tune->parsed()) {
            auto result = holoseg::cmd_tune(cfg);
            std::cout << "selected eps=" << result.selected.eps
                      << " min_pts=" << result.selected.min_pts << "\n";
        } else if (infer->parsed()) {
            holoseg::cmd_infer(cfg, split);
        } else if (eval->parsed()) {
            holoseg::InferMode mode =
                mode_override.empty() ? cfg.eval_mode : holoseg::infer_mode_from_name(mode_override);
            auto report = holoseg::cmd_eval(cfg, split, mode);
            std::cout << report.dump(2) << "\n";
        } else if (viz->parsed()) {
            holoseg::cmd_viz(cfg, split);
        }
    } catch (const std::exception& e) {
        holoseg::ordered_json err{{"error", e.what()}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
    return 0;
}
