#pragma once

#include <iosfwd>
#include <vector>

#include "mdrl/denoiser.hpp"
#include "mdrl/sampler.hpp"

namespace mdrl {

// Denoising progress credit. S(k, j) is the model's average log-probability
// at recorded step k, over the positions still masked at recorded step j,
// evaluated at the tokens the model itself ended up committing to. The delta
// of a window (a, b] is S(b, b) - S(a, b): both scores share the evaluation
// set M_b, so the difference isolates what the tokens revealed inside the
// window did to the model's beliefs. Everything reads cached snapshot rows;
// no forward passes happen here (except the `measured` last-step mode).

enum class LastStepMode { raw, neutral, mean, measured, extrapolate };
enum class NormalizationMode { per_step, trajectory, group, none };

struct DeltaEntry {
    int window_start = 0;  // recorded step a
    int window_end = 0;    // recorded step b; tokens born in (a, b] share this entry
    double delta = 0.0;
    double delta_z = 0.0;  // filled by normalize()
    bool last_step = false;
};

struct DeltaTable {
    std::vector<DeltaEntry> entries;
    // Set when a mean/extrapolate last step had no prior deltas to borrow
    // from and fell back to neutral.
    bool last_step_fallback = false;
};

// Per-window normalization statistics, keyed by window end (per-step mode),
// sample index (trajectory mode) or a single global entry (group mode).
struct NormStat {
    int key = 0;
    double mu = 0.0;
    double sigma = 0.0;   // population
    int count = 0;
};

struct NormalizationReport {
    NormalizationMode mode = NormalizationMode::per_step;
    double eps = 1e-6;
    std::vector<NormStat> stats;
};

// S(k, j); k and j must be recorded steps with cached rows covering M_j.
double score(const Trajectory& traj, const TokenSequence& completion, int k, int j);

// One delta per consecutive recorded window whose end still has masked
// positions. Windows that end fully revealed are skipped here; the boundary
// is handled by the last-step entry.
std::vector<DeltaEntry> window_deltas(const Trajectory& traj, const TokenSequence& completion);

// The boundary delta for tokens born in the final window, under the chosen
// mode. `measured` runs one extra forward pass on the fully revealed
// completion (the only mode that costs anything); the others are free.
double last_step_delta(LastStepMode mode, const Trajectory& traj, const TokenSequence& completion,
                       const std::vector<DeltaEntry>& prior, const DenoiserConfig* cfg,
                       const ParamStore* params, const std::vector<int>* prompt_ids,
                       PassCounter* counter, bool* fell_back = nullptr);

// window_deltas plus exactly one last-step entry covering the final window.
DeltaTable delta_table(const Trajectory& traj, const TokenSequence& completion, LastStepMode mode,
                       const DenoiserConfig* cfg = nullptr, const ParamStore* params = nullptr,
                       const std::vector<int>* prompt_ids = nullptr, PassCounter* counter = nullptr);

// Z-score the batch of tables in place along the mode's axis, population
// standard deviation, denominator guarded by max(sigma, eps). `none` copies
// deltas through unchanged.
NormalizationReport normalize(std::vector<DeltaTable>& batch, NormalizationMode mode, double eps);

struct TokenWeights {
    std::vector<double> omega;    // 1 + lambda * delta_z(birth), clamped at 0
    std::vector<double> tilde_a;  // advantage * omega
    int clamp_fires = 0;
};

// Per-token advantage modulation. Every birth step must fall inside one of
// the table's windows; a miss is an internal bug, not an input error.
TokenWeights token_weights(double advantage, const DeltaTable& table, const std::vector<int>& birth,
                           double lambda);

// CSV: sample,window_start,window_end,delta,delta_z,n_tokens_born
void write_credit_report(std::ostream& out, const std::vector<DeltaTable>& batch,
                         const std::vector<const Trajectory*>& trajectories);

} // namespace mdrl
