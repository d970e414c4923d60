#pragma once

#include <optional>
#include <vector>

#include "mdrl/denoiser.hpp"
#include "mdrl/graph.hpp"
#include "mdrl/rng.hpp"

namespace mdrl {

// Completion-likelihood estimators. Four related views of log p(o | q):
//
//   mean-field  one pass with every completion token masked; each entry is
//               the model's prediction from zero inter-token context.
//   elbo-sdmc   evidence lower bound estimated at fixed quadrature points
//               over the masking ratio, one random mask draw per point,
//               each weighted by 1/t.
//   stratified  positions are split into K disjoint
//               strata of near-equal size and each stratum is masked in its
//               own pass while the rest of the completion stays visible, so
//               every token is scored with (K-1)/K context. K=1 recovers the
//               mean-field estimate, K=L the pseudo-log-likelihood.
//   enriched    per-token average of the mean-field and stratum views; the
//               exp of an enriched difference against a frozen snapshot is
//               the stratified importance ratio.
//
// All estimators take the prompt as given: prompt masking, when enabled, is
// applied by the caller so that paired evaluations (live model vs snapshot,
// stratum view vs full-mask view) share the exact same inputs.

enum class StratifyStrategy { random, confidence };

struct StratumPartition {
    int K = 1;
    StratifyStrategy strategy = StratifyStrategy::random;
    std::vector<std::vector<int>> strata; // disjoint cover of 0..L-1, sizes differ by <= 1

    int stratum_of(int pos) const;
    void validate(int completion_len) const;
};

// Random strategy: shuffle positions and deal them round-robin.
StratumPartition partition_strata(int completion_len, int K, Rng& rng);

// Confidence strategy: one fully-masked pass, rank positions by prediction
// entropy (descending) and slice the ranking into K contiguous chunks, so
// hard positions land together. round_robin instead deals the ranked
// positions out cyclically.
StratumPartition partition_strata_confidence(const DenoiserConfig& cfg, const ParamStore& params,
                                             const std::vector<int>& prompt_ids,
                                             const std::vector<int>& completion_ids, int K,
                                             PassCounter& counter, bool round_robin = false);

enum class EstimatorKind { mean_field, elbo_sdmc, stratified, pseudo };

struct LikelihoodReport {
    EstimatorKind estimator = EstimatorKind::mean_field;
    std::vector<double> per_token_logprob; // empty for elbo_sdmc
    double sequence_logprob = 0.0;         // mean of tokens for mean_field; sum for stratified/pseudo
    int passes_used = 0;
};

// Quadrature plan for the ELBO: one pre-drawn mask pattern per point so the
// live model and the frozen snapshot integrate over identical views.
struct ElboPlan {
    std::vector<double> quad_points;               // each in (0, 1]
    std::vector<std::vector<int>> masked_positions; // per point, sorted
};

ElboPlan make_elbo_plan(int completion_len, const std::vector<double>& quad_points, Rng& rng);

// ---- graph layer (differentiable, used on the live-model side of losses) ----

NodeId mean_field_per_token_node(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                                 const std::vector<int>& prompt_ids,
                                 const std::vector<int>& completion_ids, PassCounter& counter);

NodeId stratified_per_token_node(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                          const std::vector<int>& prompt_ids, const std::vector<int>& completion_ids,
                          const StratumPartition& partition, PassCounter& counter);

NodeId enriched_token_loglik_node(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                                  const std::vector<int>& prompt_ids,
                                  const std::vector<int>& completion_ids,
                                  const StratumPartition& partition, PassCounter& counter);

NodeId elbo_sdmc_node(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                      const std::vector<int>& prompt_ids, const std::vector<int>& completion_ids,
                      const ElboPlan& plan, PassCounter& counter);

// ---- value layer ----

std::vector<double> mean_field_per_token(const DenoiserConfig& cfg, const ParamStore& params,
                                         const std::vector<int>& prompt_ids,
                                         const std::vector<int>& completion_ids, PassCounter& counter);

// Single-draw estimate: sample t ~ U(0,1), corrupt, average masked-position
// log-probs. Redraws t until at least one position is masked. forced_t pins
// the masking ratio for tests.
double mean_field_loglik(const DenoiserConfig& cfg, const ParamStore& params,
                         const std::vector<int>& prompt_ids, const std::vector<int>& completion_ids,
                         Rng& rng, PassCounter& counter,
                         std::optional<double> forced_t = std::nullopt);

double elbo_sdmc(const DenoiserConfig& cfg, const ParamStore& params,
                 const std::vector<int>& prompt_ids, const std::vector<int>& completion_ids,
                 const ElboPlan& plan, PassCounter& counter);

std::vector<double> stratified_per_token(const DenoiserConfig& cfg, const ParamStore& params,
                                  const std::vector<int>& prompt_ids,
                                  const std::vector<int>& completion_ids,
                                  const StratumPartition& partition, PassCounter& counter);

double stratified_loglik(const DenoiserConfig& cfg, const ParamStore& params,
                  const std::vector<int>& prompt_ids, const std::vector<int>& completion_ids,
                  const StratumPartition& partition, PassCounter& counter);

std::vector<double> enriched_token_loglik(const DenoiserConfig& cfg, const ParamStore& params,
                                          const std::vector<int>& prompt_ids,
                                          const std::vector<int>& completion_ids,
                                          const StratumPartition& partition, PassCounter& counter);

// rho_i = exp(l_live_i - l_snapshot_i), elementwise.
std::vector<double> stratified_ratio(const std::vector<double>& enriched_live,
                              const std::vector<double>& enriched_snapshot);

LikelihoodReport estimate(EstimatorKind kind, const DenoiserConfig& cfg, const ParamStore& params,
                          const std::vector<int>& prompt_ids, const std::vector<int>& completion_ids,
                          const StratumPartition* partition, const ElboPlan* plan,
                          PassCounter& counter);

} // namespace mdrl
