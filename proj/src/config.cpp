#include "mdrl/config.hpp"

#include <fstream>
#include <stdexcept>

namespace mdrl {

namespace {

std::string norm_name(NormalizationMode m) {
    switch (m) {
        case NormalizationMode::per_step: return "per_step";
        case NormalizationMode::trajectory: return "trajectory";
        case NormalizationMode::group: return "group";
        case NormalizationMode::none: return "none";
    }
    return "?";
}

NormalizationMode norm_from(const std::string& s) {
    if (s == "per_step") return NormalizationMode::per_step;
    if (s == "trajectory") return NormalizationMode::trajectory;
    if (s == "group") return NormalizationMode::group;
    if (s == "none") return NormalizationMode::none;
    throw std::invalid_argument("config: unknown normalization mode '" + s + "'");
}

std::string last_step_name(LastStepMode m) {
    switch (m) {
        case LastStepMode::raw: return "raw";
        case LastStepMode::neutral: return "neutral";
        case LastStepMode::mean: return "mean";
        case LastStepMode::measured: return "measured";
        case LastStepMode::extrapolate: return "extrapolate";
    }
    return "?";
}

LastStepMode last_step_from(const std::string& s) {
    if (s == "raw") return LastStepMode::raw;
    if (s == "neutral") return LastStepMode::neutral;
    if (s == "mean") return LastStepMode::mean;
    if (s == "measured") return LastStepMode::measured;
    if (s == "extrapolate") return LastStepMode::extrapolate;
    throw std::invalid_argument("config: unknown last-step mode '" + s + "'");
}

std::string base_name(BaseLoss b) {
    switch (b) {
        case BaseLoss::d1: return "d1";
        case BaseLoss::wd1: return "wd1";
        case BaseLoss::gdpo: return "gdpo";
    }
    return "?";
}

BaseLoss base_from(const std::string& s) {
    if (s == "d1") return BaseLoss::d1;
    if (s == "wd1") return BaseLoss::wd1;
    if (s == "gdpo") return BaseLoss::gdpo;
    throw std::invalid_argument("config: unknown base loss '" + s + "'");
}

// Recursive structural check of `doc` against the schema generated from the
// default config: every key must exist with a matching JSON type.
void check_against_schema(const nlohmann::json& doc, const nlohmann::json& schema,
                          const std::string& prefix) {
    for (const auto& [key, val] : doc.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!schema.contains(key)) {
            throw std::invalid_argument("config: unknown key '" + path + "'");
        }
        const auto& ref = schema.at(key);
        if (ref.is_object()) {
            if (!val.is_object()) throw std::invalid_argument("config: '" + path + "' must be an object");
            check_against_schema(val, ref, path);
        } else if (ref.is_array()) {
            if (!val.is_array()) throw std::invalid_argument("config: '" + path + "' must be an array");
        } else if (ref.is_string()) {
            if (!val.is_string()) throw std::invalid_argument("config: '" + path + "' must be a string");
        } else if (ref.is_boolean()) {
            if (!val.is_boolean()) throw std::invalid_argument("config: '" + path + "' must be a boolean");
        } else if (ref.is_number()) {
            if (!val.is_number()) throw std::invalid_argument("config: '" + path + "' must be a number");
        }
    }
}

} // namespace

void RunConfig::validate() const {
    task_kind_from_name(task); // throws on unknown task
    if (group_size < 2) throw std::invalid_argument("config: group_size must be >= 2");
    if (batch_groups < 1) throw std::invalid_argument("config: batch_groups must be >= 1");
    if (outer_steps < 1) throw std::invalid_argument("config: outer_steps must be >= 1");
    if (inner_iters < 1) throw std::invalid_argument("config: inner_iters must be >= 1");
    if (effective_gen_steps() < 1) throw std::invalid_argument("config: gen_steps must be >= 1");
    if (eval_every < 1) throw std::invalid_argument("config: eval_every must be >= 1");
    if (eval_instances < 1) throw std::invalid_argument("config: eval_instances must be >= 1");
    if (train_pool < 0) throw std::invalid_argument("config: train_pool must be >= 0");
    if (grad_accum < 1) throw std::invalid_argument("config: grad_accum must be >= 1");
    if (rollout_temperature < 0) throw std::invalid_argument("config: temperature must be >= 0");
    if (model.width < 2 || model.blocks < 1 || model.heads < 1) {
        throw std::invalid_argument("config: bad model dimensions");
    }
    if (model.mixer != "attention" && model.mixer != "gated_mlp") {
        throw std::invalid_argument("config: unknown mixer '" + model.mixer + "'");
    }
    if (model.nonlinearity != "gelu" && model.nonlinearity != "tanh") {
        throw std::invalid_argument("config: unknown nonlinearity '" + model.nonlinearity + "'");
    }
    const int L = effective_completion_len();
    if (L < task_completion_len(kind())) {
        throw std::invalid_argument("config: completion_len shorter than the task needs");
    }
    if (objective.use_sml && objective.strata > L) {
        throw std::invalid_argument("config: strata exceed completion length");
    }
    objective.validate();
}

nlohmann::json config_to_json(const RunConfig& cfg) {
    return nlohmann::json{
        {"task", cfg.task},
        {"seed", cfg.seed},
        {"group_size", cfg.group_size},
        {"batch_groups", cfg.batch_groups},
        {"outer_steps", cfg.outer_steps},
        {"inner_iters", cfg.inner_iters},
        {"completion_len", cfg.completion_len},
        {"gen_steps", cfg.gen_steps},
        {"rollout_temperature", cfg.rollout_temperature},
        {"random_tie_masking", cfg.random_tie_masking},
        {"block_length", cfg.block_length},
        {"eval_every", cfg.eval_every},
        {"eval_instances", cfg.eval_instances},
        {"train_pool", cfg.train_pool},
        {"grad_accum", cfg.grad_accum},
        {"out_dir", cfg.out_dir},
        {"model",
         {{"width", cfg.model.width},
          {"blocks", cfg.model.blocks},
          {"heads", cfg.model.heads},
          {"mixer", cfg.model.mixer},
          {"nonlinearity", cfg.model.nonlinearity},
          {"init_std", cfg.model.init_std},
          {"zero_init_output", cfg.model.zero_init_output}}},
        {"optim",
         {{"lr", cfg.optim.lr},
          {"beta1", cfg.optim.beta1},
          {"beta2", cfg.optim.beta2},
          {"weight_decay", cfg.optim.weight_decay},
          {"max_grad_norm", cfg.optim.max_grad_norm},
          {"eps", cfg.optim.eps}}},
        {"objective",
         {{"base", base_name(cfg.objective.base)},
          {"use_dps", cfg.objective.use_dps},
          {"use_sml", cfg.objective.use_sml},
          {"clip_eps", cfg.objective.clip_eps},
          {"lambda", cfg.objective.lambda},
          {"strata", cfg.objective.strata},
          {"eta", cfg.objective.eta},
          {"kl_beta", cfg.objective.kl_beta},
          {"adv_eps", cfg.objective.adv_eps},
          {"norm_eps", cfg.objective.norm_eps},
          {"normalization", norm_name(cfg.objective.normalization)},
          {"normalize_per_group", cfg.objective.normalize_per_group},
          {"last_step", last_step_name(cfg.objective.last_step)},
          {"stride", cfg.objective.stride},
          {"sdmc_points", cfg.objective.sdmc_points},
          {"strata_strategy",
           cfg.objective.strata_strategy == StratifyStrategy::random ? "random" : "confidence"},
          {"confidence_round_robin", cfg.objective.confidence_round_robin},
          {"wd1_softmax_full_group", cfg.objective.wd1_softmax_full_group},
          {"wd1_token_mean", cfg.objective.wd1_token_mean},
          {"prompt_mask_prob", cfg.objective.prompt_mask_prob}}},
    };
}

RunConfig config_from_json(const nlohmann::json& j) {
    check_against_schema(j, config_to_json(RunConfig{}), "");
    RunConfig cfg;
    cfg.task = j.value("task", cfg.task);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.group_size = j.value("group_size", cfg.group_size);
    cfg.batch_groups = j.value("batch_groups", cfg.batch_groups);
    cfg.outer_steps = j.value("outer_steps", cfg.outer_steps);
    cfg.inner_iters = j.value("inner_iters", cfg.inner_iters);
    cfg.completion_len = j.value("completion_len", cfg.completion_len);
    cfg.gen_steps = j.value("gen_steps", cfg.gen_steps);
    cfg.rollout_temperature = j.value("rollout_temperature", cfg.rollout_temperature);
    cfg.random_tie_masking = j.value("random_tie_masking", cfg.random_tie_masking);
    cfg.block_length = j.value("block_length", cfg.block_length);
    cfg.eval_every = j.value("eval_every", cfg.eval_every);
    cfg.eval_instances = j.value("eval_instances", cfg.eval_instances);
    cfg.train_pool = j.value("train_pool", cfg.train_pool);
    cfg.grad_accum = j.value("grad_accum", cfg.grad_accum);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    if (j.contains("model")) {
        const auto& m = j.at("model");
        cfg.model.width = m.value("width", cfg.model.width);
        cfg.model.blocks = m.value("blocks", cfg.model.blocks);
        cfg.model.heads = m.value("heads", cfg.model.heads);
        cfg.model.mixer = m.value("mixer", cfg.model.mixer);
        cfg.model.nonlinearity = m.value("nonlinearity", cfg.model.nonlinearity);
        cfg.model.init_std = m.value("init_std", cfg.model.init_std);
        cfg.model.zero_init_output = m.value("zero_init_output", cfg.model.zero_init_output);
    }
    if (j.contains("optim")) {
        const auto& o = j.at("optim");
        cfg.optim.lr = o.value("lr", cfg.optim.lr);
        cfg.optim.beta1 = o.value("beta1", cfg.optim.beta1);
        cfg.optim.beta2 = o.value("beta2", cfg.optim.beta2);
        cfg.optim.weight_decay = o.value("weight_decay", cfg.optim.weight_decay);
        cfg.optim.max_grad_norm = o.value("max_grad_norm", cfg.optim.max_grad_norm);
        cfg.optim.eps = o.value("eps", cfg.optim.eps);
    }
    if (j.contains("objective")) {
        const auto& o = j.at("objective");
        if (o.contains("base")) cfg.objective.base = base_from(o.at("base").get<std::string>());
        cfg.objective.use_dps = o.value("use_dps", cfg.objective.use_dps);
        cfg.objective.use_sml = o.value("use_sml", cfg.objective.use_sml);
        cfg.objective.clip_eps = o.value("clip_eps", cfg.objective.clip_eps);
        cfg.objective.lambda = o.value("lambda", cfg.objective.lambda);
        cfg.objective.strata = o.value("strata", cfg.objective.strata);
        cfg.objective.eta = o.value("eta", cfg.objective.eta);
        cfg.objective.kl_beta = o.value("kl_beta", cfg.objective.kl_beta);
        cfg.objective.adv_eps = o.value("adv_eps", cfg.objective.adv_eps);
        cfg.objective.norm_eps = o.value("norm_eps", cfg.objective.norm_eps);
        if (o.contains("normalization")) {
            cfg.objective.normalization = norm_from(o.at("normalization").get<std::string>());
        }
        cfg.objective.normalize_per_group =
            o.value("normalize_per_group", cfg.objective.normalize_per_group);
        if (o.contains("last_step")) {
            cfg.objective.last_step = last_step_from(o.at("last_step").get<std::string>());
        }
        cfg.objective.stride = o.value("stride", cfg.objective.stride);
        if (o.contains("sdmc_points")) {
            cfg.objective.sdmc_points = o.at("sdmc_points").get<std::vector<double>>();
        }
        if (o.contains("strata_strategy")) {
            const auto s = o.at("strata_strategy").get<std::string>();
            if (s == "random") {
                cfg.objective.strata_strategy = StratifyStrategy::random;
            } else if (s == "confidence") {
                cfg.objective.strata_strategy = StratifyStrategy::confidence;
            } else {
                throw std::invalid_argument("config: unknown strata_strategy '" + s + "'");
            }
        }
        cfg.objective.confidence_round_robin =
            o.value("confidence_round_robin", cfg.objective.confidence_round_robin);
        cfg.objective.wd1_softmax_full_group =
            o.value("wd1_softmax_full_group", cfg.objective.wd1_softmax_full_group);
        cfg.objective.wd1_token_mean = o.value("wd1_token_mean", cfg.objective.wd1_token_mean);
        cfg.objective.prompt_mask_prob = o.value("prompt_mask_prob", cfg.objective.prompt_mask_prob);
    }
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config: " + path);
    nlohmann::json j;
    in >> j;
    return config_from_json(j);
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw std::invalid_argument("override must look like key.path=value: " + assignment);
    }
    const std::string path = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);

    const nlohmann::json schema = config_to_json(RunConfig{});
    const nlohmann::json* ref = &schema;
    nlohmann::json* target = &doc;
    size_t at = 0;
    while (true) {
        const auto dot = path.find('.', at);
        const std::string key = path.substr(at, dot == std::string::npos ? std::string::npos : dot - at);
        if (key.empty() || !ref->contains(key)) {
            throw std::invalid_argument("override: unknown key '" + path + "'");
        }
        ref = &ref->at(key);
        if (dot == std::string::npos) {
            nlohmann::json parsed;
            if (ref->is_string()) {
                parsed = value;
            } else {
                parsed = nlohmann::json::parse(value, nullptr, false);
                if (parsed.is_discarded()) {
                    throw std::invalid_argument("override: cannot parse value for '" + path + "'");
                }
                if (ref->is_boolean() && !parsed.is_boolean()) {
                    throw std::invalid_argument("override: '" + path + "' expects a boolean");
                }
                if (ref->is_number() && !parsed.is_number()) {
                    throw std::invalid_argument("override: '" + path + "' expects a number");
                }
                if (ref->is_array() && !parsed.is_array()) {
                    throw std::invalid_argument("override: '" + path + "' expects an array");
                }
            }
            (*target)[key] = parsed;
            return;
        }
        if (!target->contains(key) || !(*target)[key].is_object()) (*target)[key] = nlohmann::json::object();
        target = &(*target)[key];
        at = dot + 1;
    }
}

} // namespace mdrl
