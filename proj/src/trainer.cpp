#include "mdrl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "mdrl/likelihood.hpp"
#include "mdrl/optim.hpp"
#include "mdrl/vocab.hpp"

namespace mdrl {

namespace {

// Stream tags for deriving per-purpose generators from the run seed.
enum : uint64_t {
    kStreamInit = 1,
    kStreamTask = 2,
    kStreamRollout = 3,
    kStreamPromptMask = 4,
    kStreamPartition = 5,
    kStreamElbo = 6,
    kStreamEvalSet = 7,
    kStreamDiag = 8,
};

DenoiserConfig denoiser_config(const RunConfig& cfg) {
    DenoiserConfig d;
    d.vocab_size = task_vocab(cfg.kind()).size();
    d.prompt_len = task_prompt_len(cfg.kind());
    d.completion_len = cfg.effective_completion_len();
    d.width = cfg.model.width;
    d.blocks = cfg.model.blocks;
    d.heads = cfg.model.heads;
    d.mixer = cfg.model.mixer == "attention" ? Mixer::attention : Mixer::gated_mlp;
    d.nonlinearity = cfg.model.nonlinearity == "gelu" ? Nonlinearity::gelu : Nonlinearity::tanh;
    d.init_std = cfg.model.init_std;
    d.zero_init_output = cfg.model.zero_init_output;
    return d;
}

std::vector<int> pad_prompt(const std::vector<int>& ids, int target_len) {
    std::vector<int> out = ids;
    while (static_cast<int>(out.size()) < target_len) out.push_back(Vocab::kPad);
    return out;
}

struct SampleData {
    int group = 0;
    TokenSequence completion;
    Trajectory trajectory;
    double reward_total = 0.0;
    double advantage = 0.0;
    std::vector<int> prompt_view;        // loss-side prompt (possibly masked)
    StratumPartition partition;
    bool has_partition = false;
    ElboPlan plan;
    std::vector<double> tilde_a;
    std::vector<double> omega;
    std::vector<double> old_mean_field;
    std::vector<double> old_enriched;
    double old_elbo = 0.0;
    std::vector<double> ref_logprobs;
};

double millis_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

TrainState init_training(const RunConfig& cfg) {
    cfg.validate();
    TrainState st;
    st.cfg = cfg;
    Rng root(cfg.seed);
    Rng init_rng = root.derive(kStreamInit);
    st.model = make_denoiser(denoiser_config(cfg), init_rng);
    snapshot_old(st.model);
    if (cfg.objective.kl_beta > 0) snapshot_ref(st.model);

    Rng eval_rng = root.derive(kStreamEvalSet);
    for (int i = 0; i < cfg.eval_instances; ++i) {
        st.eval_set.push_back(sample_task(cfg.kind(), eval_rng));
    }
    if (cfg.train_pool > 0) {
        Rng pool_rng = root.derive(kStreamTask);
        for (int i = 0; i < cfg.train_pool; ++i) {
            st.train_set.push_back(sample_task(cfg.kind(), pool_rng));
        }
    }
    return st;
}

StepMetrics train_step(TrainState& st) {
    const auto t0 = std::chrono::steady_clock::now();
    const RunConfig& cfg = st.cfg;
    const ObjectiveConfig& ocfg = cfg.objective;
    const DenoiserConfig dcfg = st.model.cfg;
    const TaskKind kind = cfg.kind();
    const int G = cfg.group_size;
    const int B = cfg.batch_groups;
    const int L = cfg.effective_completion_len();
    const int T = cfg.effective_gen_steps();
    const int step = st.outer_step;

    StepMetrics m;
    m.outer_step = step;
    const PassCounter at_entry = st.counter;

    // (1) freeze the snapshot the ratios anchor to
    snapshot_old(st.model);

    Rng root(cfg.seed);

    // (2) rollouts with trajectory recording
    std::vector<TaskInstance> instances;
    std::vector<std::vector<SampleData>> groups(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
        if (!st.train_set.empty()) {
            instances.push_back(
                st.train_set[(static_cast<size_t>(step) * static_cast<size_t>(B) + static_cast<size_t>(b)) %
                             st.train_set.size()]);
        } else {
            Rng trng = root.derive(kStreamTask, static_cast<uint64_t>(step) + 1, static_cast<uint64_t>(b));
            instances.push_back(sample_task(kind, trng));
        }
        const auto prompt = pad_prompt(instances.back().prompt_ids, dcfg.prompt_len);

        GenerationPolicy pol;
        pol.temperature = cfg.rollout_temperature;
        pol.random_tie_masking = cfg.random_tie_masking;
        pol.block_length = cfg.block_length;
        pol.record = ocfg.use_dps;

        for (int g = 0; g < G; ++g) {
            Rng rrng = root.derive(kStreamRollout, static_cast<uint64_t>(step),
                                   static_cast<uint64_t>(b * G + g));
            SampleData s;
            s.group = b;
            auto [completion, traj] = generate(dcfg, st.model.params, prompt, T, ocfg.stride, pol,
                                               rrng, st.counter);
            s.completion = std::move(completion);
            s.trajectory = std::move(traj);
            s.reward_total = reward(instances.back(), s.completion.ids).total;
            groups[static_cast<size_t>(b)].push_back(std::move(s));
        }
    }

    // (3) group-relative advantages
    double reward_sum = 0.0, reward_sq = 0.0;
    for (int b = 0; b < B; ++b) {
        std::vector<double> rewards;
        for (const auto& s : groups[static_cast<size_t>(b)]) rewards.push_back(s.reward_total);
        const auto adv = group_advantages(rewards, ocfg.adv_eps);
        for (int g = 0; g < G; ++g) {
            groups[static_cast<size_t>(b)][static_cast<size_t>(g)].advantage = adv[static_cast<size_t>(g)];
            reward_sum += rewards[static_cast<size_t>(g)];
            reward_sq += rewards[static_cast<size_t>(g)] * rewards[static_cast<size_t>(g)];
        }
    }
    const double n_samples = static_cast<double>(B * G);
    m.mean_reward = reward_sum / n_samples;
    m.std_reward = std::sqrt(std::max(0.0, reward_sq / n_samples - m.mean_reward * m.mean_reward));

    const PassCounter before_credit = st.counter;

    // (4) progress credit, computed once and reused across inner iterations
    if (ocfg.use_dps) {
        std::vector<DeltaTable> tables;
        std::vector<std::pair<int, int>> owner; // (group, member)
        for (int b = 0; b < B; ++b) {
            const auto prompt = pad_prompt(instances[static_cast<size_t>(b)].prompt_ids, dcfg.prompt_len);
            for (int g = 0; g < G; ++g) {
                auto& s = groups[static_cast<size_t>(b)][static_cast<size_t>(g)];
                tables.push_back(delta_table(s.trajectory, s.completion, ocfg.last_step, &dcfg,
                                             &st.model.params, &prompt, &st.counter));
                owner.emplace_back(b, g);
            }
        }
        if (ocfg.normalize_per_group) {
            for (int b = 0; b < B; ++b) {
                std::vector<DeltaTable> sub(tables.begin() + b * G, tables.begin() + (b + 1) * G);
                normalize(sub, ocfg.normalization, ocfg.norm_eps);
                std::copy(sub.begin(), sub.end(), tables.begin() + b * G);
            }
        } else {
            normalize(tables, ocfg.normalization, ocfg.norm_eps);
        }
        for (size_t i = 0; i < tables.size(); ++i) {
            auto& s = groups[static_cast<size_t>(owner[i].first)][static_cast<size_t>(owner[i].second)];
            const auto w = token_weights(s.advantage, tables[i], s.trajectory.birth, ocfg.lambda);
            s.tilde_a = w.tilde_a;
            s.omega = w.omega;
            m.omega_clamp_fires += w.clamp_fires;
            if (tables[i].last_step_fallback) ++m.last_step_fallbacks;
        }
    } else {
        for (auto& grp : groups) {
            for (auto& s : grp) {
                s.tilde_a.assign(static_cast<size_t>(L), s.advantage);
                s.omega.assign(static_cast<size_t>(L), 1.0);
            }
        }
    }

    // (5) loss-side plans and snapshot-side caches, once per outer step
    for (int b = 0; b < B; ++b) {
        const auto prompt = pad_prompt(instances[static_cast<size_t>(b)].prompt_ids, dcfg.prompt_len);
        for (int g = 0; g < G; ++g) {
            auto& s = groups[static_cast<size_t>(b)][static_cast<size_t>(g)];
            const uint64_t idx = static_cast<uint64_t>(b * G + g);

            if (ocfg.prompt_mask_prob > 0) {
                Rng prng = root.derive(kStreamPromptMask, static_cast<uint64_t>(step), idx);
                s.prompt_view = mask_prompt(prompt, ocfg.prompt_mask_prob, prng);
            } else {
                s.prompt_view = prompt;
            }

            if (ocfg.use_sml) {
                if (ocfg.strata_strategy == StratifyStrategy::random) {
                    Rng srng = root.derive(kStreamPartition, static_cast<uint64_t>(step), idx);
                    s.partition = partition_strata(L, ocfg.strata, srng);
                } else {
                    s.partition = partition_strata_confidence(dcfg, st.model.params, s.prompt_view,
                                                              s.completion.ids, ocfg.strata,
                                                              st.counter, ocfg.confidence_round_robin);
                }
                s.has_partition = true;
            }

            switch (ocfg.base) {
                case BaseLoss::d1:
                    if (ocfg.use_sml) {
                        s.old_enriched = enriched_token_loglik(dcfg, *st.model.theta_old,
                                                               s.prompt_view, s.completion.ids,
                                                               s.partition, st.counter);
                    } else {
                        s.old_mean_field = mean_field_per_token(dcfg, *st.model.theta_old,
                                                                s.prompt_view, s.completion.ids,
                                                                st.counter);
                    }
                    break;
                case BaseLoss::wd1:
                    break; // ratio-free: nothing to anchor against
                case BaseLoss::gdpo: {
                    Rng erng = root.derive(kStreamElbo, static_cast<uint64_t>(step), idx);
                    s.plan = make_elbo_plan(L, ocfg.sdmc_points, erng);
                    s.old_elbo = elbo_sdmc(dcfg, *st.model.theta_old, s.prompt_view,
                                           s.completion.ids, s.plan, st.counter);
                    if (ocfg.kl_beta > 0) {
                        const std::vector<int> all_masked(static_cast<size_t>(L), Vocab::kMask);
                        const Tensor lp = denoiser_forward(dcfg, *st.model.pi_ref, s.prompt_view,
                                                           all_masked, st.counter, PassKind::loss);
                        s.ref_logprobs = lp.data;
                    }
                    break;
                }
            }
        }
    }
    m.loss_passes_cache_phase = st.counter.loss_passes - before_credit.loss_passes;

    // (6) inner iterations: rebuild the live-model side, step the optimizer
    double loss_acc = 0.0, clip_acc = 0.0;
    for (int it = 0; it < cfg.inner_iters; ++it) {
        const long long before_inner = st.counter.loss_passes;
        Graph graph;
        NodeId total = -1;
        double clip_this = 0.0;
        for (int b = 0; b < B; ++b) {
            std::vector<SampleLossInputs> inputs;
            for (int g = 0; g < G; ++g) {
                auto& s = groups[static_cast<size_t>(b)][static_cast<size_t>(g)];
                SampleLossInputs in;
                in.prompt_ids = &s.prompt_view;
                in.completion_ids = &s.completion.ids;
                in.advantage = s.advantage;
                in.token_advantages = s.tilde_a;
                in.omega = s.omega;
                in.partition = s.has_partition ? &s.partition : nullptr;
                in.elbo_plan = &s.plan;
                in.old_mean_field = s.old_mean_field;
                in.old_enriched = s.old_enriched;
                in.old_elbo = s.old_elbo;
                in.ref_logprobs_flat = s.ref_logprobs;
                inputs.push_back(std::move(in));
            }
            const auto built = build_loss(graph, dcfg, st.model.params, inputs, ocfg, st.counter);
            clip_this += built.clip_fraction;
            total = total < 0 ? built.loss : graph.add(total, built.loss);
        }
        const NodeId loss_node = graph.scalar_affine(total, 1.0 / static_cast<double>(B), 0.0);
        const double loss_value = graph.scalar_value(loss_node);
        if (!std::isfinite(loss_value)) {
            throw std::runtime_error("train_step: non-finite loss at outer step " +
                                     std::to_string(step) + ", inner iteration " + std::to_string(it));
        }
        auto grads = graph.evaluate_with_gradients(loss_node);
        adam_step(st.model.params, grads, st.opt, cfg.optim);

        loss_acc += loss_value;
        clip_acc += clip_this / static_cast<double>(B);
        m.loss_passes_per_inner.push_back(st.counter.loss_passes - before_inner);
    }
    m.mean_loss = loss_acc / static_cast<double>(cfg.inner_iters);
    m.clip_fraction = clip_acc / static_cast<double>(cfg.inner_iters);

    m.generation_passes = st.counter.generation_passes - at_entry.generation_passes;
    m.loss_passes = st.counter.loss_passes - at_entry.loss_passes;
    if (m.generation_passes != static_cast<long long>(B) * G * T) {
        throw std::logic_error("train_step: generation pass ledger does not balance");
    }

    st.outer_step += 1;
    m.wall_ms = millis_since(t0);
    return m;
}

double evaluate(TrainState& st) {
    const DenoiserConfig& dcfg = st.model.cfg;
    GenerationPolicy pol;
    pol.temperature = 0.0;
    pol.random_tie_masking = false;
    pol.block_length = st.cfg.block_length;
    pol.record = false;
    Rng rng(0); // greedy decoding consumes no randomness

    double total = 0.0;
    for (const auto& inst : st.eval_set) {
        const auto prompt = pad_prompt(inst.prompt_ids, dcfg.prompt_len);
        auto [completion, traj] = generate(dcfg, st.model.params, prompt,
                                           st.cfg.effective_gen_steps(), st.cfg.objective.stride,
                                           pol, rng, st.eval_counter);
        total += reward(inst, completion.ids).total;
    }
    return total / static_cast<double>(st.eval_set.size());
}

RunResult run_training(const RunConfig& cfg, const std::string& out_dir) {
    TrainState st = init_training(cfg);
    RunResult result;

    std::ofstream metrics_csv, eval_csv, timing_csv;
    const bool emit = !out_dir.empty();
    if (emit) {
        std::filesystem::create_directories(out_dir);
        metrics_csv.open(out_dir + "/metrics.csv");
        eval_csv.open(out_dir + "/eval.csv");
        timing_csv.open(out_dir + "/timing.csv");
        if (!metrics_csv || !eval_csv || !timing_csv) {
            throw std::runtime_error("run_training: cannot write into " + out_dir);
        }
        metrics_csv << "step,mean_reward,std_reward,mean_loss,clip_fraction,omega_clamp_fires,"
                       "generation_passes,loss_passes\n";
        eval_csv << "step,mean_reward\n";
        timing_csv << "step,wall_ms\n";
    }

    for (int step = 1; step <= cfg.outer_steps; ++step) {
        StepMetrics m = train_step(st);
        if (emit) {
            metrics_csv << m.outer_step + 1 << ',' << format_double(m.mean_reward) << ','
                        << format_double(m.std_reward) << ',' << format_double(m.mean_loss) << ','
                        << format_double(m.clip_fraction) << ',' << m.omega_clamp_fires << ','
                        << m.generation_passes << ',' << m.loss_passes << "\n";
            timing_csv << m.outer_step + 1 << ',' << format_double(m.wall_ms) << "\n";
        }
        const bool eval_now = (step % cfg.eval_every == 0) || step == cfg.outer_steps;
        if (eval_now) {
            const double r = evaluate(st);
            result.eval_rewards.emplace_back(step, r);
            if (emit) {
                eval_csv << step << ',' << format_double(r) << "\n";
                // One recorded greedy trajectory per eval point, for external
                // analyzers.
                GenerationPolicy pol;
                pol.temperature = 0.0;
                pol.random_tie_masking = false;
                pol.block_length = cfg.block_length;
                pol.record = true;
                Rng rng(0);
                const auto& inst = st.eval_set.front();
                const auto prompt = pad_prompt(inst.prompt_ids, st.model.cfg.prompt_len);
                auto [completion, traj] = generate(st.model.cfg, st.model.params, prompt,
                                                   cfg.effective_gen_steps(), cfg.objective.stride,
                                                   pol, rng, st.eval_counter);
                std::ofstream tf(out_dir + "/trajectory_step" + std::to_string(step) + ".jsonl");
                dump_trajectory(traj, tf);
            }
        }
        result.metrics.push_back(std::move(m));
    }

    if (emit) {
        save_checkpoint(st.model, out_dir + "/checkpoint.json");
    }
    return result;
}

AblationGrid make_grid(const std::string& name) {
    AblationGrid grid;
    grid.name = name;
    if (name == "stride_laststep") {
        grid.columns = {"stride", "last_step"};
        for (int s : {1, 2, 4, 8, 16, 32}) {
            for (const std::string mode : {"raw", "neutral", "mean", "measured", "extrapolate"}) {
                grid.cells.push_back({{std::to_string(s), mode},
                                      {"objective.use_dps=true",
                                       "objective.stride=" + std::to_string(s),
                                       "objective.last_step=" + mode}});
            }
        }
    } else if (name == "k_strategy") {
        grid.columns = {"strata", "strategy"};
        for (int k = 2; k <= 8; ++k) {
            for (const std::string strat : {"random", "confidence"}) {
                grid.cells.push_back({{std::to_string(k), strat},
                                      {"objective.use_sml=true",
                                       "objective.strata=" + std::to_string(k),
                                       "objective.strata_strategy=" + strat}});
            }
        }
    } else if (name == "lambda") {
        grid.columns = {"lambda"};
        for (const std::string v : {"0.05", "0.1", "0.2"}) {
            grid.cells.push_back({{v}, {"objective.use_dps=true", "objective.lambda=" + v}});
        }
    } else if (name == "eta") {
        grid.columns = {"eta"};
        for (const std::string v : {"0.05", "0.1", "0.2"}) {
            grid.cells.push_back({{v}, {"objective.use_sml=true", "objective.eta=" + v}});
        }
    } else if (name == "normalization") {
        grid.columns = {"normalization"};
        for (const std::string v : {"per_step", "trajectory", "group", "none"}) {
            grid.cells.push_back({{v}, {"objective.use_dps=true", "objective.normalization=" + v}});
        }
    } else {
        throw std::invalid_argument("unknown ablation grid '" + name + "'");
    }
    return grid;
}

void ablation_sweep(const RunConfig& base, const AblationGrid& grid, std::ostream& csv) {
    if (grid.cells.empty()) throw std::invalid_argument("ablation_sweep: empty grid");
    for (const auto& col : grid.columns) csv << col << ',';
    csv << "mean_reward_last20\n";
    for (const auto& cell : grid.cells) {
        nlohmann::json doc = config_to_json(base);
        for (const auto& ov : cell.overrides) apply_override(doc, ov);
        const RunConfig cfg = config_from_json(doc);
        const RunResult r = run_training(cfg, "");

        const size_t n = r.metrics.size();
        const size_t from = n > 20 ? n - 20 : 0;
        double acc = 0.0;
        for (size_t i = from; i < n; ++i) acc += r.metrics[i].mean_reward;
        const double last20 = acc / static_cast<double>(n - from);

        for (const auto& label : cell.labels) csv << label << ',';
        csv << format_double(last20) << "\n";
    }
}

std::vector<OverheadRow> overhead_report(const RunConfig& baseline, const RunConfig& variant) {
    // The two configs may differ only in their dps/sml settings.
    const auto neutralize = [](const RunConfig& c) {
        nlohmann::json j = config_to_json(c);
        auto& o = j["objective"];
        for (const char* k : {"use_dps", "use_sml", "lambda", "strata", "eta", "stride", "last_step",
                              "normalization", "normalize_per_group", "strata_strategy",
                              "confidence_round_robin"}) {
            o.erase(k);
        }
        j.erase("out_dir");
        return j;
    };
    if (neutralize(baseline) != neutralize(variant)) {
        throw std::invalid_argument("overhead_report: configs differ beyond dps/sml settings");
    }

    std::vector<OverheadRow> rows;
    const std::pair<std::string, const RunConfig*> runs[] = {{"baseline", &baseline},
                                                             {"variant", &variant}};
    for (const auto& [label, cfg] : runs) {
        TrainState st = init_training(*cfg);
        const auto t0 = std::chrono::steady_clock::now();
        for (int s = 0; s < cfg->outer_steps; ++s) train_step(st);
        rows.push_back({label, millis_since(t0), st.counter.generation_passes,
                        st.counter.loss_passes});
    }

    const bool dps_only = baseline.objective.use_sml == variant.objective.use_sml &&
                          baseline.objective.strata == variant.objective.strata &&
                          baseline.objective.eta == variant.objective.eta &&
                          baseline.objective.strata_strategy == variant.objective.strata_strategy;
    const bool measured = variant.objective.last_step == LastStepMode::measured ||
                          baseline.objective.last_step == LastStepMode::measured;
    if (dps_only && !measured) {
        if (rows[1].generation_passes != rows[0].generation_passes ||
            rows[1].loss_passes != rows[0].loss_passes) {
            throw std::logic_error("overhead_report: non-measured progress credit must be free");
        }
    }
    return rows;
}

void write_overhead_csv(const std::vector<OverheadRow>& rows, std::ostream& out) {
    out << "config,wall_ms,generation_passes,loss_passes\n";
    for (const auto& r : rows) {
        out << r.label << ',' << format_double(r.wall_ms) << ',' << r.generation_passes << ','
            << r.loss_passes << "\n";
    }
}

void diagnose_estimators(const Denoiser& model, TaskKind kind, uint64_t seed, int n_completions,
                         std::ostream& csv) {
    const DenoiserConfig& dcfg = model.cfg;
    const int L = dcfg.completion_len;
    Rng root(seed);

    // Freshly decoded held-out completions.
    std::vector<std::vector<int>> prompts, completions;
    for (int i = 0; i < n_completions; ++i) {
        Rng trng = root.derive(kStreamDiag, 1, static_cast<uint64_t>(i));
        const auto inst = sample_task(kind, trng);
        const auto prompt = pad_prompt(inst.prompt_ids, dcfg.prompt_len);
        GenerationPolicy pol;
        pol.temperature = 1.0;
        Rng grng = root.derive(kStreamDiag, 2, static_cast<uint64_t>(i));
        PassCounter pc;
        auto [completion, traj] = generate(dcfg, model.params, prompt, L, 1, pol, grng, pc);
        prompts.push_back(prompt);
        completions.push_back(completion.ids);
    }

    csv << "estimator,K,strategy,seed,seq_logprob,passes\n";
    const auto emit = [&](const std::string& name, int K, const std::string& strategy,
                          double mean_sum_logprob, long long passes) {
        csv << name << ',' << K << ',' << strategy << ',' << seed << ','
            << format_double(mean_sum_logprob) << ',' << passes << "\n";
    };

    // All rows report the summed per-token log-probability so the K spectrum
    // is directly comparable (the K=1 row coincides with mean_field).
    {
        PassCounter pc;
        double acc = 0.0;
        for (int i = 0; i < n_completions; ++i) {
            const auto v = mean_field_per_token(dcfg, model.params, prompts[static_cast<size_t>(i)],
                                                completions[static_cast<size_t>(i)], pc);
            double seq = 0.0;
            for (double x : v) seq += x;
            acc += seq;
        }
        emit("mean_field", 1, "-", acc / n_completions, pc.loss_passes);
    }
    {
        PassCounter pc;
        Rng erng = root.derive(kStreamDiag, 3);
        double acc = 0.0;
        for (int i = 0; i < n_completions; ++i) {
            const auto plan = make_elbo_plan(L, {0.2, 0.4, 0.6, 0.8}, erng);
            acc += elbo_sdmc(dcfg, model.params, prompts[static_cast<size_t>(i)],
                             completions[static_cast<size_t>(i)], plan, pc);
        }
        emit("elbo_sdmc", 4, "-", acc / n_completions, pc.loss_passes);
    }

    std::vector<int> ks = {1, 2, 4, 8, L};
    std::sort(ks.begin(), ks.end());
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
    ks.erase(std::remove_if(ks.begin(), ks.end(), [&](int k) { return k < 1 || k > L; }), ks.end());

    for (const std::string strategy : {"random", "confidence"}) {
        for (int K : ks) {
            PassCounter pc;
            double acc = 0.0;
            for (int i = 0; i < n_completions; ++i) {
                StratumPartition part;
                if (strategy == "random") {
                    Rng prng = root.derive(kStreamDiag, 4, static_cast<uint64_t>(K * 1000 + i));
                    part = partition_strata(L, K, prng);
                } else {
                    part = partition_strata_confidence(dcfg, model.params,
                                                       prompts[static_cast<size_t>(i)],
                                                       completions[static_cast<size_t>(i)], K, pc);
                }
                acc += stratified_loglik(dcfg, model.params, prompts[static_cast<size_t>(i)],
                                  completions[static_cast<size_t>(i)], part, pc);
            }
            emit(K == L ? "pseudo" : "stratified", K, strategy, acc / n_completions, pc.loss_passes);
        }
    }
}

void diagnose_credit(const Denoiser& model, const RunConfig& cfg, uint64_t seed, int n_samples,
                     std::ostream& csv) {
    const DenoiserConfig& dcfg = model.cfg;
    Rng root(seed);
    std::vector<DeltaTable> tables;
    std::vector<Trajectory> trajectories;
    for (int i = 0; i < n_samples; ++i) {
        Rng trng = root.derive(kStreamDiag, 5, static_cast<uint64_t>(i));
        const auto inst = sample_task(cfg.kind(), trng);
        const auto prompt = pad_prompt(inst.prompt_ids, dcfg.prompt_len);
        GenerationPolicy pol;
        pol.temperature = 1.0;
        Rng grng = root.derive(kStreamDiag, 6, static_cast<uint64_t>(i));
        PassCounter pc;
        auto [completion, traj] = generate(dcfg, model.params, prompt, cfg.effective_gen_steps(),
                                           cfg.objective.stride, pol, grng, pc);
        tables.push_back(delta_table(traj, completion, cfg.objective.last_step, &dcfg, &model.params,
                                     &prompt, &pc));
        trajectories.push_back(std::move(traj));
    }
    normalize(tables, cfg.objective.normalization, cfg.objective.norm_eps);
    std::vector<const Trajectory*> ptrs;
    for (const auto& t : trajectories) ptrs.push_back(&t);
    write_credit_report(csv, tables, ptrs);
}

} // namespace mdrl
