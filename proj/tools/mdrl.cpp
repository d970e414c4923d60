// Command-line front end: train / eval / ablate / diagnose.
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage (bad flags, missing input
// files, schema violations). MDRL_OUT_ROOT, when set, prefixes every
// relative output directory.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mdrl/config.hpp"
#include "mdrl/trainer.hpp"

#ifndef MDRL_VERSION
#define MDRL_VERSION "unknown"
#endif

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string resolve_out_dir(const std::string& dir) {
    if (dir.empty()) return dir;
    const char* root = std::getenv("MDRL_OUT_ROOT");
    if (root && root[0] != '\0' && !std::filesystem::path(dir).is_absolute()) {
        return std::string(root) + "/" + dir;
    }
    return dir;
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("malformed JSON in " + path + ": " + e.what());
    }
    return j;
}

// Accepts either a plain config document or a manifest produced by a prior
// run (so re-running from a manifest reproduces the outputs).
nlohmann::json unwrap_config(nlohmann::json j) {
    if (j.is_object() && j.contains("mdrl_manifest") && j.contains("config")) {
        return j.at("config");
    }
    return j;
}

mdrl::RunConfig resolved_config(const std::string& config_path,
                                const std::vector<std::string>& overrides) {
    nlohmann::json doc = unwrap_config(read_json_file(config_path));
    try {
        for (const auto& ov : overrides) mdrl::apply_override(doc, ov);
        return mdrl::config_from_json(doc);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

void write_manifest(const mdrl::RunConfig& cfg, const std::string& command,
                    const std::string& out_dir) {
    nlohmann::json manifest;
    manifest["mdrl_manifest"] = 1;
    manifest["command"] = command;
    manifest["version"] = MDRL_VERSION;
    manifest["config"] = mdrl::config_to_json(cfg);
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir + "/manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest into " + out_dir);
    out << manifest.dump(2) << "\n";
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& out_flag) {
    mdrl::RunConfig cfg = resolved_config(config_path, overrides);
    const std::string out_dir = resolve_out_dir(out_flag.empty() ? cfg.out_dir : out_flag);
    write_manifest(cfg, "train", out_dir);
    const auto result = mdrl::run_training(cfg, out_dir);
    std::cout << "trained " << cfg.outer_steps << " steps; final mean reward "
              << mdrl::format_double(result.metrics.back().mean_reward) << "; outputs in " << out_dir
              << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& task, int instances,
             uint64_t seed, int gen_steps) {
    if (!std::filesystem::exists(checkpoint_path)) {
        throw UsageError("missing checkpoint: " + checkpoint_path);
    }
    auto model = mdrl::load_checkpoint(checkpoint_path);
    const auto kind = mdrl::task_kind_from_name(task);

    mdrl::GenerationPolicy pol;
    pol.temperature = 0.0;
    pol.random_tie_masking = false;
    mdrl::Rng root(seed);
    mdrl::PassCounter pc;
    double total = 0.0;
    const int T = gen_steps > 0 ? gen_steps : model.cfg.completion_len;
    for (int i = 0; i < instances; ++i) {
        mdrl::Rng trng = root.derive(11, static_cast<uint64_t>(i));
        const auto inst = mdrl::sample_task(kind, trng);
        std::vector<int> prompt = inst.prompt_ids;
        while (static_cast<int>(prompt.size()) < model.cfg.prompt_len) prompt.push_back(0);
        mdrl::Rng grng(0);
        auto [completion, traj] =
            mdrl::generate(model.cfg, model.params, prompt, T, 1, pol, grng, pc);
        total += mdrl::reward(inst, completion.ids).total;
    }
    std::cout << "mean reward over " << instances << " instances: "
              << mdrl::format_double(total / instances) << "\n";
    return 0;
}

mdrl::AblationGrid grid_from_file(const std::string& path) {
    const nlohmann::json j = read_json_file(path);
    mdrl::AblationGrid grid;
    grid.name = j.value("name", "custom");
    grid.columns = j.at("columns").get<std::vector<std::string>>();
    for (const auto& cj : j.at("cells")) {
        mdrl::AblationCell cell;
        cell.labels = cj.at("labels").get<std::vector<std::string>>();
        cell.overrides = cj.at("overrides").get<std::vector<std::string>>();
        grid.cells.push_back(std::move(cell));
    }
    if (grid.cells.empty()) throw UsageError("ablation grid is empty");
    return grid;
}

int cmd_ablate(const std::string& config_path, const std::vector<std::string>& overrides,
               const std::string& grid_name, const std::string& grid_file,
               const std::string& out_flag) {
    if (grid_name.empty() == grid_file.empty()) {
        throw UsageError("ablate needs exactly one of --grid or --grid-file");
    }
    const mdrl::RunConfig base = resolved_config(config_path, overrides);
    mdrl::AblationGrid grid;
    try {
        grid = grid_file.empty() ? mdrl::make_grid(grid_name) : grid_from_file(grid_file);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const std::string out_dir = resolve_out_dir(out_flag.empty() ? base.out_dir : out_flag);
    std::filesystem::create_directories(out_dir);
    const std::string csv_path = out_dir + "/ablation_" + grid.name + ".csv";
    std::ofstream csv(csv_path);
    if (!csv) throw std::runtime_error("cannot write " + csv_path);
    mdrl::ablation_sweep(base, grid, csv);
    std::cout << "wrote " << csv_path << " (" << grid.cells.size() << " cells)\n";
    return 0;
}

int cmd_diagnose(const std::string& checkpoint_path, const std::string& task, uint64_t seed,
                 int samples, const std::string& out_flag) {
    if (!std::filesystem::exists(checkpoint_path)) {
        throw UsageError("missing checkpoint: " + checkpoint_path);
    }
    auto model = mdrl::load_checkpoint(checkpoint_path);
    const auto kind = mdrl::task_kind_from_name(task);
    const std::string out_dir = resolve_out_dir(out_flag.empty() ? "diagnostics" : out_flag);
    std::filesystem::create_directories(out_dir);

    {
        std::ofstream csv(out_dir + "/estimator_diagnostic.csv");
        if (!csv) throw std::runtime_error("cannot write into " + out_dir);
        mdrl::diagnose_estimators(model, kind, seed, samples, csv);
    }
    {
        mdrl::RunConfig cfg;
        cfg.task = task;
        cfg.seed = seed;
        std::ofstream csv(out_dir + "/credit_report.csv");
        mdrl::diagnose_credit(model, cfg, seed, samples, csv);
    }
    std::cout << "wrote estimator_diagnostic.csv and credit_report.csv in " << out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale RL post-training lab for masked diffusion language models"};
    app.require_subcommand(1);
    app.set_version_flag("--version", MDRL_VERSION);

    std::string config_path, out_dir, checkpoint, task = "countdown", grid_name, grid_file;
    std::vector<std::string> overrides;
    int instances = 32, samples = 4, gen_steps = 0;
    uint64_t seed = 42;

    auto* train = app.add_subcommand("train", "run a training job from a JSON config");
    train->add_option("--config", config_path, "config or manifest JSON")->required();
    train->add_option("--set", overrides, "dotted overrides, e.g. objective.lambda=0.1");
    train->add_option("--out", out_dir, "output directory (defaults to config out_dir)");

    auto* eval = app.add_subcommand("eval", "greedy-evaluate a checkpoint");
    eval->add_option("--checkpoint", checkpoint, "checkpoint JSON")->required();
    eval->add_option("--task", task, "task name");
    eval->add_option("--instances", instances, "number of held-out instances");
    eval->add_option("--seed", seed, "instance-sampling seed");
    eval->add_option("--gen-steps", gen_steps, "decoding steps (default: completion length)");

    auto* ablate = app.add_subcommand("ablate", "run an ablation grid");
    ablate->add_option("--config", config_path, "base config JSON")->required();
    ablate->add_option("--set", overrides, "dotted overrides applied to the base");
    ablate->add_option("--grid", grid_name,
                       "canned grid: stride_laststep | k_strategy | lambda | eta | normalization");
    ablate->add_option("--grid-file", grid_file, "custom grid JSON");
    ablate->add_option("--out", out_dir, "output directory");

    auto* diagnose = app.add_subcommand("diagnose", "estimator and credit diagnostics");
    diagnose->add_option("--checkpoint", checkpoint, "checkpoint JSON")->required();
    diagnose->add_option("--task", task, "task name");
    diagnose->add_option("--seed", seed, "diagnostic seed");
    diagnose->add_option("--samples", samples, "held-out completions to analyze");
    diagnose->add_option("--out", out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help/--version
        app.exit(e);
        return 2;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, overrides, out_dir);
        if (eval->parsed()) return cmd_eval(checkpoint, task, instances, seed, gen_steps);
        if (ablate->parsed()) return cmd_ablate(config_path, overrides, grid_name, grid_file, out_dir);
        if (diagnose->parsed()) return cmd_diagnose(checkpoint, task, seed, samples, out_dir);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
