#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mdrl/config.hpp"
#include "mdrl/credit.hpp"
#include "mdrl/denoiser.hpp"
#include "mdrl/objective.hpp"
#include "mdrl/sampler.hpp"
#include "mdrl/tasks.hpp"

namespace mdrl {

// One outer step of the training loop:
//   1. snapshot the live parameters
//   2. roll out G completions per prompt, recording trajectories
//   3. score rewards and group-relative advantages
//   4. turn trajectory deltas into per-token advantages (once per step)
//   5. compute all snapshot-side caches (once per step)
//   6. run the inner iterations, each rebuilding the live-model side of the
//      loss and applying one optimizer step
// Everything below reports per-step deltas of the two pass counters so tests
// can audit the cost claims directly.

struct StepMetrics {
    int outer_step = 0;
    double mean_reward = 0.0;
    double std_reward = 0.0;
    double mean_loss = 0.0;
    double clip_fraction = 0.0;
    long long omega_clamp_fires = 0;
    long long last_step_fallbacks = 0; // boundary deltas that fell back to neutral
    long long generation_passes = 0; // this step
    long long loss_passes = 0;       // this step
    double wall_ms = 0.0;            // reported in timing.csv, never in metrics.csv

    // audit details (not part of the metrics file)
    long long loss_passes_cache_phase = 0;            // snapshot-side, once per step
    std::vector<long long> loss_passes_per_inner;     // live-model side, per inner iteration
};

struct TrainState {
    RunConfig cfg;
    Denoiser model;
    AdamState opt;
    PassCounter counter;       // cumulative over the run (training phases only)
    PassCounter eval_counter;  // evaluation decodes, kept apart
    int outer_step = 0;
    std::vector<TaskInstance> eval_set;
    std::vector<TaskInstance> train_set; // empty when instances are drawn fresh
};

TrainState init_training(const RunConfig& cfg);

StepMetrics train_step(TrainState& st);

// Greedy-decode the held-out set and return the mean reward.
double evaluate(TrainState& st);

struct RunResult {
    std::vector<StepMetrics> metrics;
    std::vector<std::pair<int, double>> eval_rewards; // (step, mean reward)
};

// Full training run. When out_dir is non-empty, writes metrics.csv, eval.csv,
// timing.csv, trajectory samples at the eval cadence, and a final
// checkpoint.json under it. metrics.csv and eval.csv are byte-deterministic
// for a fixed (seed, config); wall-clock lives in timing.csv only.
RunResult run_training(const RunConfig& cfg, const std::string& out_dir);

// ---- ablation harness ----

struct AblationCell {
    std::vector<std::string> labels;       // column values, e.g. {"8", "extrapolate"}
    std::vector<std::string> overrides;    // dotted assignments applied to the base config
};

struct AblationGrid {
    std::string name;
    std::vector<std::string> columns;      // label column names, e.g. {"stride", "last_step"}
    std::vector<AblationCell> cells;
};

// Canned grids: stride_laststep (6x5), k_strategy (7x2), lambda (3),
// eta (3), normalization (4).
AblationGrid make_grid(const std::string& name);

// Run every cell with the shared base seed and write one CSV row per cell:
// label columns plus mean_reward_last20.
void ablation_sweep(const RunConfig& base, const AblationGrid& grid, std::ostream& csv);

// ---- overhead accounting ----

struct OverheadRow {
    std::string label;
    double wall_ms = 0.0;
    long long generation_passes = 0;
    long long loss_passes = 0;
};

// Run baseline and variant for the configured number of outer steps and
// report wall-clock and pass-count deltas. The configs must differ only in
// their dps/sml settings. Non-measured DPS variants are asserted to add
// exactly zero passes of either kind.
std::vector<OverheadRow> overhead_report(const RunConfig& baseline, const RunConfig& variant);
void write_overhead_csv(const std::vector<OverheadRow>& rows, std::ostream& out);

// ---- diagnostics ----

// Estimator comparison on freshly decoded held-out completions: rows over
// K in {1, 2, 4, 8, L} (clamped to valid K <= L, deduplicated) and both
// stratification strategies, plus the mean-field and quadrature estimators.
// CSV columns: estimator,K,strategy,seed,seq_logprob,passes
void diagnose_estimators(const Denoiser& model, TaskKind kind, uint64_t seed, int n_completions,
                         std::ostream& csv);

// Credit report for freshly decoded trajectories, using the objective's
// stride/last-step/normalization settings.
void diagnose_credit(const Denoiser& model, const RunConfig& cfg, uint64_t seed, int n_samples,
                     std::ostream& csv);

std::string format_double(double v); // %.17g, used by every CSV writer

} // namespace mdrl
