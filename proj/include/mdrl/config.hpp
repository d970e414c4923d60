#pragma once

#include <string>

#include <json.hpp>

#include "mdrl/objective.hpp"
#include "mdrl/optim.hpp"
#include "mdrl/tasks.hpp"

namespace mdrl {

struct ModelConfig {
    int width = 64;
    int blocks = 2;
    int heads = 4;
    std::string mixer = "attention";        // attention | gated_mlp
    std::string nonlinearity = "gelu";      // gelu | tanh
    double init_std = 0.05;
    bool zero_init_output = true;
};

// Everything a run needs, mirroring the JSON config document field for
// field. A (seed, config) pair fully determines every emitted number.
struct RunConfig {
    std::string task = "countdown";
    uint64_t seed = 42;
    int group_size = 6;        // completions per prompt
    int batch_groups = 2;      // prompts per outer step
    int outer_steps = 300;
    int inner_iters = 12;
    int completion_len = 0;    // 0 = task default
    int gen_steps = 0;         // 0 = completion length
    double rollout_temperature = 1.0;
    bool random_tie_masking = true;
    int block_length = 0;      // 0 = single block
    int eval_every = 50;
    int eval_instances = 16;
    // Size of the fixed training set sampled at init; 0 draws fresh
    // instances every step.
    int train_pool = 0;
    int grad_accum = 1;        // accepted for config compatibility; inert at desk scale
    std::string out_dir = "runs/out";
    ModelConfig model;
    AdamConfig optim;
    ObjectiveConfig objective;

    TaskKind kind() const { return task_kind_from_name(task); }
    int effective_completion_len() const {
        return completion_len > 0 ? completion_len : task_completion_len(kind());
    }
    int effective_gen_steps() const {
        return gen_steps > 0 ? gen_steps : effective_completion_len();
    }
    void validate() const;
};

nlohmann::json config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const nlohmann::json& j); // rejects unknown keys
RunConfig load_config(const std::string& path);

// Apply `dotted.path=value` onto a config document. The path must name an
// existing field and the value must parse as that field's JSON type.
void apply_override(nlohmann::json& doc, const std::string& assignment);

} // namespace mdrl
