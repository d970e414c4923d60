#include "mdrl/likelihood.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "mdrl/vocab.hpp"

namespace mdrl {

namespace {

std::vector<int> all_masked(int L) { return std::vector<int>(static_cast<size_t>(L), Vocab::kMask); }

std::vector<int> mask_positions(const std::vector<int>& completion, const std::vector<int>& positions) {
    std::vector<int> out = completion;
    for (int p : positions) out.at(static_cast<size_t>(p)) = Vocab::kMask;
    return out;
}

// Deal `order` into K near-equal strata, round-robin.
std::vector<std::vector<int>> deal_round_robin(const std::vector<int>& order, int K) {
    std::vector<std::vector<int>> strata(static_cast<size_t>(K));
    for (size_t i = 0; i < order.size(); ++i) {
        strata[i % static_cast<size_t>(K)].push_back(order[i]);
    }
    return strata;
}

// Slice `order` into K contiguous chunks whose sizes differ by at most one,
// larger chunks first.
std::vector<std::vector<int>> slice_contiguous(const std::vector<int>& order, int K) {
    const int L = static_cast<int>(order.size());
    const int base = L / K, extra = L % K;
    std::vector<std::vector<int>> strata(static_cast<size_t>(K));
    int at = 0;
    for (int k = 0; k < K; ++k) {
        const int len = base + (k < extra ? 1 : 0);
        for (int i = 0; i < len; ++i) strata[static_cast<size_t>(k)].push_back(order[static_cast<size_t>(at++)]);
    }
    return strata;
}

} // namespace

int StratumPartition::stratum_of(int pos) const {
    for (size_t k = 0; k < strata.size(); ++k) {
        for (int p : strata[k]) {
            if (p == pos) return static_cast<int>(k);
        }
    }
    throw std::out_of_range("partition: position not in any stratum");
}

void StratumPartition::validate(int completion_len) const {
    if (K < 1 || K > completion_len) throw std::invalid_argument("partition: K out of range");
    if (static_cast<int>(strata.size()) != K) throw std::invalid_argument("partition: wrong stratum count");
    std::set<int> seen;
    size_t min_sz = SIZE_MAX, max_sz = 0;
    for (const auto& s : strata) {
        min_sz = std::min(min_sz, s.size());
        max_sz = std::max(max_sz, s.size());
        for (int p : s) {
            if (p < 0 || p >= completion_len) throw std::invalid_argument("partition: position out of range");
            if (!seen.insert(p).second) throw std::invalid_argument("partition: strata overlap");
        }
    }
    if (static_cast<int>(seen.size()) != completion_len) {
        throw std::invalid_argument("partition: strata do not cover all positions");
    }
    if (max_sz - min_sz > 1) throw std::invalid_argument("partition: stratum sizes differ by more than 1");
}

StratumPartition partition_strata(int completion_len, int K, Rng& rng) {
    if (K < 1 || K > completion_len) throw std::invalid_argument("partition_strata: K out of range");
    std::vector<int> order(static_cast<size_t>(completion_len));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    StratumPartition p;
    p.K = K;
    p.strategy = StratifyStrategy::random;
    p.strata = deal_round_robin(order, K);
    for (auto& s : p.strata) std::sort(s.begin(), s.end());
    p.validate(completion_len);
    return p;
}

StratumPartition partition_strata_confidence(const DenoiserConfig& cfg, const ParamStore& params,
                                             const std::vector<int>& prompt_ids,
                                             const std::vector<int>& completion_ids, int K,
                                             PassCounter& counter, bool round_robin) {
    const int L = cfg.completion_len;
    if (K < 1 || K > L) throw std::invalid_argument("partition_strata_confidence: K out of range");
    if (static_cast<int>(completion_ids.size()) != L) {
        throw std::invalid_argument("partition_strata_confidence: completion length mismatch");
    }
    // Entropy is ranked from the fully-masked view; the realized tokens play
    // no role in the ranking.
    const Tensor lp = denoiser_forward(cfg, params, prompt_ids, all_masked(L), counter, PassKind::loss);

    std::vector<std::pair<double, int>> ranked; // (-entropy asc == entropy desc, pos)
    for (int i = 0; i < L; ++i) {
        double h = 0.0;
        for (int v = 0; v < cfg.vocab_size; ++v) {
            const double logp = lp.at(i, v);
            h -= std::exp(logp) * logp;
        }
        ranked.emplace_back(-h, i);
    }
    std::stable_sort(ranked.begin(), ranked.end());
    std::vector<int> order;
    order.reserve(static_cast<size_t>(L));
    for (const auto& [negh, pos] : ranked) order.push_back(pos);

    StratumPartition p;
    p.K = K;
    p.strategy = StratifyStrategy::confidence;
    p.strata = round_robin ? deal_round_robin(order, K) : slice_contiguous(order, K);
    for (auto& s : p.strata) std::sort(s.begin(), s.end());
    p.validate(L);
    return p;
}

ElboPlan make_elbo_plan(int completion_len, const std::vector<double>& quad_points, Rng& rng) {
    ElboPlan plan;
    plan.quad_points = quad_points;
    for (double t : quad_points) {
        if (!(t > 0.0 && t <= 1.0)) throw std::invalid_argument("elbo: quadrature point outside (0,1]");
        std::vector<int> masked;
        for (int i = 0; i < completion_len; ++i) {
            if (rng.bernoulli(t)) masked.push_back(i);
        }
        plan.masked_positions.push_back(std::move(masked));
    }
    return plan;
}

NodeId mean_field_per_token_node(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                                 const std::vector<int>& prompt_ids,
                                 const std::vector<int>& completion_ids, PassCounter& counter) {
    const int L = cfg.completion_len;
    const NodeId lp = denoiser_forward_node(g, cfg, params, prompt_ids, all_masked(L), counter,
                                            PassKind::loss);
    std::vector<int64_t> rows(static_cast<size_t>(L)), cols(static_cast<size_t>(L));
    for (int i = 0; i < L; ++i) {
        rows[static_cast<size_t>(i)] = i;
        cols[static_cast<size_t>(i)] = completion_ids.at(static_cast<size_t>(i));
    }
    return g.gather_pairs(lp, rows, cols);
}

NodeId stratified_per_token_node(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                          const std::vector<int>& prompt_ids, const std::vector<int>& completion_ids,
                          const StratumPartition& partition, PassCounter& counter) {
    const int L = cfg.completion_len;
    partition.validate(L);

    NodeId packed = -1;               // entries in stratum order
    std::vector<int64_t> stratum_order; // position of entry i of `packed`
    for (const auto& stratum : partition.strata) {
        const NodeId lp = denoiser_forward_node(g, cfg, params, prompt_ids,
                                                mask_positions(completion_ids, stratum), counter,
                                                PassKind::loss);
        std::vector<int64_t> rows, cols;
        for (int p : stratum) {
            rows.push_back(p);
            cols.push_back(completion_ids.at(static_cast<size_t>(p)));
            stratum_order.push_back(p);
        }
        const NodeId picked = g.gather_pairs(lp, rows, cols);
        packed = packed < 0 ? picked : g.concat1d(packed, picked);
    }

    // Reorder the packed entries back to position order.
    std::vector<int64_t> rows(static_cast<size_t>(L), 0), cols(static_cast<size_t>(L));
    for (size_t i = 0; i < stratum_order.size(); ++i) {
        cols[static_cast<size_t>(stratum_order[i])] = static_cast<int64_t>(i);
    }
    return g.gather_pairs(packed, rows, cols);
}

NodeId enriched_token_loglik_node(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                                  const std::vector<int>& prompt_ids,
                                  const std::vector<int>& completion_ids,
                                  const StratumPartition& partition, PassCounter& counter) {
    const NodeId mf = mean_field_per_token_node(g, cfg, params, prompt_ids, completion_ids, counter);
    const NodeId sml = stratified_per_token_node(g, cfg, params, prompt_ids, completion_ids, partition, counter);
    return g.scalar_affine(g.add(mf, sml), 0.5, 0.0);
}

NodeId elbo_sdmc_node(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                      const std::vector<int>& prompt_ids, const std::vector<int>& completion_ids,
                      const ElboPlan& plan, PassCounter& counter) {
    if (plan.quad_points.empty()) throw std::invalid_argument("elbo: empty quadrature");
    if (plan.quad_points.size() != plan.masked_positions.size()) {
        throw std::invalid_argument("elbo: plan size mismatch");
    }
    NodeId acc = -1;
    for (size_t q = 0; q < plan.quad_points.size(); ++q) {
        const double t = plan.quad_points[q];
        if (!(t > 0.0 && t <= 1.0)) throw std::invalid_argument("elbo: quadrature point outside (0,1]");
        const auto& masked = plan.masked_positions[q];
        // One forward pass per quadrature point, even when the mask draw came
        // up empty; the estimator's pass count is part of its contract.
        const NodeId lp = denoiser_forward_node(g, cfg, params, prompt_ids,
                                                mask_positions(completion_ids, masked), counter,
                                                PassKind::loss);
        NodeId term;
        if (masked.empty()) {
            term = g.scalar(0.0); // empty indicator sum
        } else {
            std::vector<int64_t> rows, cols;
            for (int p : masked) {
                rows.push_back(p);
                cols.push_back(completion_ids.at(static_cast<size_t>(p)));
            }
            term = g.scalar_affine(g.sum(g.gather_pairs(lp, rows, cols)), 1.0 / t, 0.0);
        }
        acc = acc < 0 ? term : g.add(acc, term);
    }
    return g.scalar_affine(acc, 1.0 / static_cast<double>(plan.quad_points.size()), 0.0);
}

std::vector<double> mean_field_per_token(const DenoiserConfig& cfg, const ParamStore& params,
                                         const std::vector<int>& prompt_ids,
                                         const std::vector<int>& completion_ids, PassCounter& counter) {
    Graph g;
    const NodeId v = mean_field_per_token_node(g, cfg, params, prompt_ids, completion_ids, counter);
    return g.value(v).data;
}

double mean_field_loglik(const DenoiserConfig& cfg, const ParamStore& params,
                         const std::vector<int>& prompt_ids, const std::vector<int>& completion_ids,
                         Rng& rng, PassCounter& counter, std::optional<double> forced_t) {
    const int L = cfg.completion_len;
    std::vector<int> masked;
    if (forced_t) {
        for (int i = 0; i < L; ++i) {
            if (*forced_t >= 1.0 || rng.bernoulli(*forced_t)) masked.push_back(i);
        }
        if (masked.empty()) throw std::invalid_argument("mean_field_loglik: forced_t drew no masks");
    } else {
        // An empty draw leaves nothing to average over; redraw t.
        while (masked.empty()) {
            const double t = rng.uniform();
            for (int i = 0; i < L; ++i) {
                if (rng.bernoulli(t)) masked.push_back(i);
            }
        }
    }
    const Tensor lp = denoiser_forward(cfg, params, prompt_ids, mask_positions(completion_ids, masked),
                                       counter, PassKind::loss);
    double acc = 0.0;
    for (int p : masked) acc += lp.at(p, completion_ids.at(static_cast<size_t>(p)));
    return acc / static_cast<double>(masked.size());
}

double elbo_sdmc(const DenoiserConfig& cfg, const ParamStore& params,
                 const std::vector<int>& prompt_ids, const std::vector<int>& completion_ids,
                 const ElboPlan& plan, PassCounter& counter) {
    Graph g;
    const NodeId v = elbo_sdmc_node(g, cfg, params, prompt_ids, completion_ids, plan, counter);
    return g.scalar_value(v);
}

std::vector<double> stratified_per_token(const DenoiserConfig& cfg, const ParamStore& params,
                                  const std::vector<int>& prompt_ids,
                                  const std::vector<int>& completion_ids,
                                  const StratumPartition& partition, PassCounter& counter) {
    Graph g;
    const NodeId v = stratified_per_token_node(g, cfg, params, prompt_ids, completion_ids, partition, counter);
    return g.value(v).data;
}

double stratified_loglik(const DenoiserConfig& cfg, const ParamStore& params,
                  const std::vector<int>& prompt_ids, const std::vector<int>& completion_ids,
                  const StratumPartition& partition, PassCounter& counter) {
    const auto per_token = stratified_per_token(cfg, params, prompt_ids, completion_ids, partition, counter);
    double acc = 0.0;
    for (double v : per_token) acc += v;
    return acc;
}

std::vector<double> enriched_token_loglik(const DenoiserConfig& cfg, const ParamStore& params,
                                          const std::vector<int>& prompt_ids,
                                          const std::vector<int>& completion_ids,
                                          const StratumPartition& partition, PassCounter& counter) {
    Graph g;
    const NodeId v =
        enriched_token_loglik_node(g, cfg, params, prompt_ids, completion_ids, partition, counter);
    return g.value(v).data;
}

std::vector<double> stratified_ratio(const std::vector<double>& enriched_live,
                              const std::vector<double>& enriched_snapshot) {
    if (enriched_live.size() != enriched_snapshot.size()) {
        throw std::invalid_argument("stratified_ratio: size mismatch");
    }
    std::vector<double> out(enriched_live.size());
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(enriched_live[i] - enriched_snapshot[i]);
    }
    return out;
}

LikelihoodReport estimate(EstimatorKind kind, const DenoiserConfig& cfg, const ParamStore& params,
                          const std::vector<int>& prompt_ids, const std::vector<int>& completion_ids,
                          const StratumPartition* partition, const ElboPlan* plan,
                          PassCounter& counter) {
    LikelihoodReport rep;
    rep.estimator = kind;
    PassCounter local;
    switch (kind) {
        case EstimatorKind::mean_field: {
            rep.per_token_logprob =
                mean_field_per_token(cfg, params, prompt_ids, completion_ids, local);
            double acc = 0.0;
            for (double v : rep.per_token_logprob) acc += v;
            rep.sequence_logprob = acc / static_cast<double>(rep.per_token_logprob.size());
            break;
        }
        case EstimatorKind::elbo_sdmc: {
            if (!plan) throw std::invalid_argument("estimate: elbo needs a plan");
            rep.sequence_logprob = elbo_sdmc(cfg, params, prompt_ids, completion_ids, *plan, local);
            break;
        }
        case EstimatorKind::stratified:
        case EstimatorKind::pseudo: {
            StratumPartition loo;
            if (kind == EstimatorKind::pseudo) {
                loo.K = cfg.completion_len;
                loo.strategy = StratifyStrategy::random;
                for (int i = 0; i < cfg.completion_len; ++i) loo.strata.push_back({i});
                partition = &loo;
            }
            if (!partition) throw std::invalid_argument("estimate: sml needs a partition");
            rep.per_token_logprob =
                stratified_per_token(cfg, params, prompt_ids, completion_ids, *partition, local);
            double acc = 0.0;
            for (double v : rep.per_token_logprob) acc += v;
            rep.sequence_logprob = acc;
            break;
        }
    }
    rep.passes_used = static_cast<int>(local.loss_passes);
    counter.loss_passes += local.loss_passes;
    counter.generation_passes += local.generation_passes;
    return rep;
}

} // namespace mdrl
