#include "mdrl/objective.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mdrl/vocab.hpp"

namespace mdrl {

namespace {

// Softmax over plain doubles (advantages are data, not graph nodes).
std::vector<double> softmax_values(const std::vector<double>& v) {
    double mx = v.at(0);
    for (double x : v) mx = std::max(mx, x);
    double z = 0.0;
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        z += out[i];
    }
    for (double& x : out) x /= z;
    return out;
}

// Count of ratio values outside the trust region.
void tally_clip(const Tensor& ratios, double eps, int64_t& outside, int64_t& total) {
    for (int64_t i = 0; i < ratios.numel(); ++i) {
        if (std::abs(ratios.at(i) - 1.0) > eps) ++outside;
    }
    total += ratios.numel();
}

// min(rho * adv, clip(rho) * adv) summed over tokens, as a scalar node.
NodeId clipped_surrogate_sum(Graph& g, NodeId rho, const std::vector<double>& token_advantages,
                             double clip_eps) {
    const NodeId adv = g.constant(Tensor::from_vector(token_advantages));
    const NodeId unclipped = g.mul(rho, adv);
    const NodeId clipped = g.mul(g.clamp(rho, 1.0 - clip_eps, 1.0 + clip_eps), adv);
    return g.sum(g.min(unclipped, clipped));
}

} // namespace

void ObjectiveConfig::validate() const {
    if (!(clip_eps > 0)) throw std::invalid_argument("objective: clip_eps must be > 0");
    if (eta < 0) throw std::invalid_argument("objective: eta must be >= 0");
    if (kl_beta < 0) throw std::invalid_argument("objective: kl_beta must be >= 0");
    if (lambda < 0) throw std::invalid_argument("objective: lambda must be >= 0");
    if (strata < 1) throw std::invalid_argument("objective: strata must be >= 1");
    if (stride < 1) throw std::invalid_argument("objective: stride must be >= 1");
    if (adv_eps <= 0 || norm_eps <= 0) throw std::invalid_argument("objective: eps guards must be > 0");
    if (prompt_mask_prob < 0 || prompt_mask_prob >= 1) {
        throw std::invalid_argument("objective: prompt_mask_prob outside [0,1)");
    }
    for (double t : sdmc_points) {
        if (!(t > 0 && t <= 1)) throw std::invalid_argument("objective: sdmc points must be in (0,1]");
    }
    if (base == BaseLoss::gdpo && (use_dps || use_sml)) {
        throw std::invalid_argument(
            "objective: the sequence-level base loss has no per-token hook for dps/sml");
    }
}

std::vector<double> group_advantages(const std::vector<double>& rewards, double adv_eps) {
    const size_t G = rewards.size();
    if (G < 2) throw std::invalid_argument("group_advantages: need at least 2 samples");
    // A reward tie carries no signal; return exact zeros rather than the
    // rounding dust a mean/std pass would leave.
    bool all_equal = true;
    for (double r : rewards) all_equal = all_equal && (r == rewards[0]);
    if (all_equal) return std::vector<double>(G, 0.0);
    double mu = 0.0;
    for (double r : rewards) mu += r;
    mu /= static_cast<double>(G);
    double var = 0.0;
    for (double r : rewards) var += (r - mu) * (r - mu);
    var /= static_cast<double>(G);
    const double denom = std::sqrt(var) + adv_eps;
    std::vector<double> out(G);
    for (size_t i = 0; i < G; ++i) out[i] = (rewards[i] - mu) / denom;
    return out;
}

LossBuild loss_d1(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                  const std::vector<SampleLossInputs>& samples, double clip_eps,
                  PassCounter& counter) {
    if (samples.empty()) throw std::invalid_argument("loss_d1: empty group");
    const int L = cfg.completion_len;
    NodeId total = -1;
    int64_t outside = 0, n_ratio = 0;
    for (const auto& s : samples) {
        if (s.old_mean_field.size() != static_cast<size_t>(L)) {
            throw std::invalid_argument("loss_d1: missing snapshot-side log-prob cache");
        }
        const NodeId lp = mean_field_per_token_node(g, cfg, params, *s.prompt_ids, *s.completion_ids,
                                                    counter);
        const NodeId old_lp = g.constant(Tensor::from_vector(s.old_mean_field));
        const NodeId rho = g.exp(g.sub(lp, old_lp));
        tally_clip(g.value(rho), clip_eps, outside, n_ratio);
        const NodeId part = clipped_surrogate_sum(g, rho, s.token_advantages, clip_eps);
        total = total < 0 ? part : g.add(total, part);
    }
    LossBuild out;
    out.loss = g.scalar_affine(total, -1.0 / static_cast<double>(samples.size() * static_cast<size_t>(L)), 0.0);
    out.clip_fraction = n_ratio ? static_cast<double>(outside) / static_cast<double>(n_ratio) : 0.0;
    return out;
}

LossBuild loss_wd1(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                   const std::vector<SampleLossInputs>& samples, const ObjectiveConfig& ocfg,
                   PassCounter& counter) {
    if (samples.empty()) throw std::invalid_argument("loss_wd1: empty group");
    const int L = cfg.completion_len;
    const size_t G = samples.size();

    std::vector<double> adv(G);
    for (size_t i = 0; i < G; ++i) adv[i] = samples[i].advantage;

    std::vector<size_t> pos_idx, neg_idx;
    for (size_t i = 0; i < G; ++i) {
        if (adv[i] > 0) pos_idx.push_back(i);
        if (adv[i] < 0) neg_idx.push_back(i);
    }

    // softmax(A) / softmax(-A), either over the whole group or over the
    // signed subset alone.
    std::vector<double> w_pos(G, 0.0), w_neg(G, 0.0);
    if (ocfg.wd1_softmax_full_group) {
        const auto sp = softmax_values(adv);
        std::vector<double> neg_adv(G);
        for (size_t i = 0; i < G; ++i) neg_adv[i] = -adv[i];
        const auto sn = softmax_values(neg_adv);
        for (size_t i = 0; i < G; ++i) {
            w_pos[i] = sp[i];
            w_neg[i] = sn[i];
        }
    } else {
        if (!pos_idx.empty()) {
            std::vector<double> sub;
            for (size_t i : pos_idx) sub.push_back(adv[i]);
            const auto sp = softmax_values(sub);
            for (size_t j = 0; j < pos_idx.size(); ++j) w_pos[pos_idx[j]] = sp[j];
        }
        if (!neg_idx.empty()) {
            std::vector<double> sub;
            for (size_t i : neg_idx) sub.push_back(-adv[i]);
            const auto sn = softmax_values(sub);
            for (size_t j = 0; j < neg_idx.size(); ++j) w_neg[neg_idx[j]] = sn[j];
        }
    }

    NodeId loss = -1;
    for (size_t i = 0; i < G; ++i) {
        const auto& s = samples[i];
        if (adv[i] == 0.0) continue;
        const NodeId lp = mean_field_per_token_node(g, cfg, params, *s.prompt_ids, *s.completion_ids,
                                                    counter);
        if (s.omega.size() != static_cast<size_t>(L)) {
            throw std::invalid_argument("loss_wd1: omega length mismatch");
        }
        const NodeId weighted = g.mul(lp, g.constant(Tensor::from_vector(s.omega)));
        const NodeId seq = ocfg.wd1_token_mean ? g.mean(weighted) : g.sum(weighted);
        const double coef = adv[i] > 0 ? -w_pos[i] : w_neg[i];
        const NodeId term = g.scalar_affine(seq, coef, 0.0);
        loss = loss < 0 ? term : g.add(loss, term);
    }
    LossBuild out;
    out.loss = loss < 0 ? g.scalar(0.0) : loss;
    out.clip_fraction = 0.0; // ratio-free
    return out;
}

LossBuild loss_gdpo(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                    const std::vector<SampleLossInputs>& samples, double clip_eps, double kl_beta,
                    PassCounter& counter) {
    if (samples.empty()) throw std::invalid_argument("loss_gdpo: empty group");
    const size_t G = samples.size();
    const int L = cfg.completion_len;

    std::vector<NodeId> ratios;
    ratios.reserve(G);
    NodeId ratio_sum = -1;
    for (const auto& s : samples) {
        if (!s.elbo_plan) throw std::invalid_argument("loss_gdpo: missing elbo plan");
        if (std::abs(s.old_elbo) < 1e-8) {
            throw std::invalid_argument("loss_gdpo: degenerate snapshot ELBO near zero");
        }
        const NodeId elbo = elbo_sdmc_node(g, cfg, params, *s.prompt_ids, *s.completion_ids,
                                           *s.elbo_plan, counter);
        const NodeId r = g.scalar_affine(elbo, 1.0 / s.old_elbo, 0.0);
        ratios.push_back(r);
        ratio_sum = ratio_sum < 0 ? r : g.add(ratio_sum, r);
    }
    const NodeId mean_r = g.scalar_affine(ratio_sum, 1.0 / static_cast<double>(G), 0.0);

    int64_t outside = 0, n_ratio = 0;
    NodeId total = -1;
    for (size_t i = 0; i < G; ++i) {
        const NodeId r = ratios[i];
        tally_clip(g.value(r), clip_eps, outside, n_ratio);
        const NodeId a = g.sub(r, mean_r);
        const NodeId unclipped = g.mul(r, a);
        const NodeId clipped = g.mul(g.clamp(r, 1.0 - clip_eps, 1.0 + clip_eps), a);
        const NodeId term = g.scalar_affine(g.min(unclipped, clipped), 1.0 / static_cast<double>(L), 0.0);
        total = total < 0 ? term : g.add(total, term);
    }
    NodeId loss = g.scalar_affine(total, -1.0 / static_cast<double>(G), 0.0);

    if (kl_beta != 0.0) {
        // Token-level KL(live || reference) under the fully-masked view,
        // averaged over positions and samples.
        NodeId kl_total = -1;
        for (const auto& s : samples) {
            if (s.ref_logprobs_flat.size() != static_cast<size_t>(L) * static_cast<size_t>(cfg.vocab_size)) {
                throw std::invalid_argument("loss_gdpo: missing reference log-probs for the KL term");
            }
            const std::vector<int> all_masked(static_cast<size_t>(L), Vocab::kMask);
            const NodeId lp = denoiser_forward_node(g, cfg, params, *s.prompt_ids, all_masked, counter,
                                                    PassKind::loss);
            Tensor ref({static_cast<int64_t>(L), static_cast<int64_t>(cfg.vocab_size)});
            ref.data = s.ref_logprobs_flat;
            const NodeId diff = g.sub(lp, g.constant(std::move(ref)));
            const NodeId kl = g.scalar_affine(g.sum(g.mul(g.exp(lp), diff)),
                                              1.0 / static_cast<double>(L), 0.0);
            kl_total = kl_total < 0 ? kl : g.add(kl_total, kl);
        }
        loss = g.add(loss, g.scalar_affine(kl_total, kl_beta / static_cast<double>(G), 0.0));
    }

    LossBuild out;
    out.loss = loss;
    out.clip_fraction = n_ratio ? static_cast<double>(outside) / static_cast<double>(n_ratio) : 0.0;
    return out;
}

LossBuild loss_wd1_combined(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                        const std::vector<SampleLossInputs>& samples, const ObjectiveConfig& ocfg,
                        PassCounter& counter) {
    LossBuild out = loss_wd1(g, cfg, params, samples, ocfg, counter);
    if (!ocfg.use_sml || ocfg.eta == 0.0) return out;

    NodeId sml_total = -1;
    for (const auto& s : samples) {
        if (!s.partition) throw std::invalid_argument("loss_wd1_combined: missing stratum partition");
        const NodeId per_token = stratified_per_token_node(g, cfg, params, *s.prompt_ids, *s.completion_ids,
                                                    *s.partition, counter);
        const NodeId seq = g.sum(per_token);
        sml_total = sml_total < 0 ? seq : g.add(sml_total, seq);
    }
    const double coef = -ocfg.eta / static_cast<double>(samples.size());
    out.loss = g.add(out.loss, g.scalar_affine(sml_total, coef, 0.0));
    return out;
}

LossBuild loss_ratio_combined(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                          const std::vector<SampleLossInputs>& samples, double clip_eps,
                          PassCounter& counter) {
    if (samples.empty()) throw std::invalid_argument("loss_ratio_combined: empty group");
    const int L = cfg.completion_len;
    NodeId total = -1;
    int64_t outside = 0, n_ratio = 0;
    for (const auto& s : samples) {
        if (!s.partition) throw std::invalid_argument("loss_ratio_combined: missing stratum partition");
        if (s.old_enriched.size() != static_cast<size_t>(L)) {
            throw std::invalid_argument("loss_ratio_combined: missing snapshot-side enriched cache");
        }
        const NodeId enriched = enriched_token_loglik_node(g, cfg, params, *s.prompt_ids,
                                                           *s.completion_ids, *s.partition, counter);
        const NodeId old_e = g.constant(Tensor::from_vector(s.old_enriched));
        const NodeId rho = g.exp(g.sub(enriched, old_e));
        tally_clip(g.value(rho), clip_eps, outside, n_ratio);
        const NodeId part = clipped_surrogate_sum(g, rho, s.token_advantages, clip_eps);
        total = total < 0 ? part : g.add(total, part);
    }
    LossBuild out;
    out.loss = g.scalar_affine(total, -1.0 / static_cast<double>(samples.size() * static_cast<size_t>(L)), 0.0);
    out.clip_fraction = n_ratio ? static_cast<double>(outside) / static_cast<double>(n_ratio) : 0.0;
    return out;
}

LossBuild build_loss(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                     const std::vector<SampleLossInputs>& samples, const ObjectiveConfig& ocfg,
                     PassCounter& counter) {
    ocfg.validate();
    switch (ocfg.base) {
        case BaseLoss::wd1:
            return ocfg.use_sml ? loss_wd1_combined(g, cfg, params, samples, ocfg, counter)
                                : loss_wd1(g, cfg, params, samples, ocfg, counter);
        case BaseLoss::d1:
            return ocfg.use_sml ? loss_ratio_combined(g, cfg, params, samples, ocfg.clip_eps, counter)
                                : loss_d1(g, cfg, params, samples, ocfg.clip_eps, counter);
        case BaseLoss::gdpo:
            return loss_gdpo(g, cfg, params, samples, ocfg.clip_eps, ocfg.kl_beta, counter);
    }
    throw std::logic_error("build_loss: unknown base");
}

} // namespace mdrl
