#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mdrl/credit.hpp"
#include "mdrl/graph.hpp"
#include "mdrl/likelihood.hpp"
#include "mdrl/sampler.hpp"

namespace mdrl {

enum class BaseLoss { d1, wd1, gdpo };

// Every knob of the training objective surfaced as configuration, including
// the guards and aggregation choices the loss definitions leave implicit.
struct ObjectiveConfig {
    BaseLoss base = BaseLoss::wd1;
    bool use_dps = false;
    bool use_sml = false;

    double clip_eps = 0.5;     // PPO clip range
    double lambda = 0.1;       // progress-credit modulation strength
    int strata = 4;            // stratified-likelihood K
    double eta = 0.1;          // stratified-term weight (ratio-free path)
    double kl_beta = 0.0;      // KL coefficient (sequence-level loss)
    double adv_eps = 1e-4;     // guard in the advantage denominator
    double norm_eps = 1e-6;    // guard in the delta z-score denominator

    NormalizationMode normalization = NormalizationMode::per_step;
    bool normalize_per_group = false; // per-step stats over the group only, not the full batch
    LastStepMode last_step = LastStepMode::extrapolate;
    int stride = 1;
    std::vector<double> sdmc_points = {0.2, 0.4, 0.6, 0.8};
    StratifyStrategy strata_strategy = StratifyStrategy::random;
    bool confidence_round_robin = false;

    bool wd1_softmax_full_group = true; // softmax over all G advantages vs the signed subset
    bool wd1_token_mean = true;         // sequence log-prob = mean over tokens (vs sum)
    double prompt_mask_prob = 0.15;     // applied to loss-side passes only

    void validate() const;
};

// A = (r - mu_r) / (sigma_r + adv_eps), population statistics. Needs G >= 2.
std::vector<double> group_advantages(const std::vector<double>& rewards, double adv_eps);

// One sample's worth of loss inputs. The snapshot-side quantities are plain
// cached values computed once per outer step; the live-model side is rebuilt
// into the graph on every inner iteration.
struct SampleLossInputs {
    const std::vector<int>* prompt_ids = nullptr;  // already prompt-masked for loss passes
    const std::vector<int>* completion_ids = nullptr;
    double advantage = 0.0;
    std::vector<double> token_advantages;  // length L; the advantage broadcast when credit is off
    std::vector<double> omega;             // per-token credit weights, all 1 when credit is off

    // caches from the frozen snapshot (theta_old side)
    std::vector<double> old_mean_field;    // per-token, fully masked view
    std::vector<double> old_enriched;      // per-token two-view average
    double old_elbo = 0.0;

    const StratumPartition* partition = nullptr;
    const ElboPlan* elbo_plan = nullptr;
    std::vector<double> ref_logprobs_flat; // [L*V] fully-masked log-probs of the frozen reference
};

struct LossBuild {
    NodeId loss = -1;
    double clip_fraction = 0.0;  // fraction of ratio elements outside [1-eps, 1+eps]
};

// Per-token clipped surrogate from fully-masked importance ratios.
LossBuild loss_d1(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                  const std::vector<SampleLossInputs>& samples, double clip_eps,
                  PassCounter& counter);

// Ratio-free weighted log-likelihood loss: softmax(+/-A) weights, positive
// samples reinforced, negative samples suppressed. Credit weights (omega)
// multiply the per-token log-probs inside each sequence aggregate.
LossBuild loss_wd1(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                   const std::vector<SampleLossInputs>& samples, const ObjectiveConfig& ocfg,
                   PassCounter& counter);

// Sequence-level clipped surrogate over ELBO ratios, plus an optional KL
// penalty against the frozen reference under the fully-masked view.
LossBuild loss_gdpo(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                    const std::vector<SampleLossInputs>& samples, double clip_eps, double kl_beta,
                    PassCounter& counter);

// Ratio-free combined loss: the weighted log-likelihood loss with per-token
// credit weights minus
// (eta / G) * sum_g of the stratified sequence log-likelihood.
LossBuild loss_wd1_combined(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                        const std::vector<SampleLossInputs>& samples, const ObjectiveConfig& ocfg,
                        PassCounter& counter);

// Ratio-based combined loss: clipped surrogate over stratified-enriched
// ratios and credit-modulated per-token advantages.
LossBuild loss_ratio_combined(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                          const std::vector<SampleLossInputs>& samples, double clip_eps,
                          PassCounter& counter);

// Dispatch on (base, use_dps, use_sml). With both flags off this calls the
// base builder itself, so baseline recovery is bit-exact by construction.
LossBuild build_loss(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                     const std::vector<SampleLossInputs>& samples, const ObjectiveConfig& ocfg,
                     PassCounter& counter);

} // namespace mdrl
