#include "mdrl/sampler.hpp"

#include "mdrl/vocab.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

namespace mdrl {

namespace {

// Sample from a row of log-probabilities at the given temperature; returns
// the token and its probability under the *unscaled* model distribution.
std::pair<int, double> pick_token(const std::vector<double>& logp, double temperature, Rng& rng) {
    const int v = static_cast<int>(logp.size());
    if (temperature <= 0.0) {
        int best = 0;
        for (int j = 1; j < v; ++j) {
            if (logp[j] > logp[best]) best = j;
        }
        return {best, std::exp(logp[best])};
    }
    double mx = logp[0] / temperature;
    for (int j = 1; j < v; ++j) mx = std::max(mx, logp[j] / temperature);
    double z = 0.0;
    std::vector<double> w(static_cast<size_t>(v));
    for (int j = 0; j < v; ++j) {
        w[static_cast<size_t>(j)] = std::exp(logp[j] / temperature - mx);
        z += w[static_cast<size_t>(j)];
    }
    const double r = rng.uniform() * z;
    double c = 0.0;
    int chosen = v - 1;
    for (int j = 0; j < v; ++j) {
        c += w[static_cast<size_t>(j)];
        if (r < c) {
            chosen = j;
            break;
        }
    }
    return {chosen, std::exp(logp[chosen])};
}

// Per-block step allocation for block-wise decoding: earlier blocks get the
// remainder steps.
std::vector<int> split_steps(int total_steps, int n_blocks) {
    std::vector<int> out(static_cast<size_t>(n_blocks), total_steps / n_blocks);
    for (int i = 0; i < total_steps % n_blocks; ++i) out[static_cast<size_t>(i)] += 1;
    return out;
}

} // namespace

TokenSequence forward_mask(const TokenSequence& seq, double t, Rng& rng) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("forward_mask: t outside [0,1]");
    if (seq.role != Role::completion) throw std::invalid_argument("forward_mask: prompt is never corrupted");
    TokenSequence out = seq;
    for (auto& id : out.ids) {
        if (rng.bernoulli(t)) id = Vocab::kMask;
    }
    return out;
}

std::pair<TokenSequence, Trajectory> generate(const DenoiserConfig& cfg, const ParamStore& params,
                                              const std::vector<int>& prompt_ids, int total_steps,
                                              int stride, const GenerationPolicy& policy, Rng& rng,
                                              PassCounter& counter) {
    const int L = cfg.completion_len;
    if (L <= 0) throw std::invalid_argument("generate: empty completion");
    if (total_steps < 1) throw std::invalid_argument("generate: total_steps must be >= 1");
    if (stride < 1) throw std::invalid_argument("generate: stride must be >= 1");

    TokenSequence completion{std::vector<int>(static_cast<size_t>(L), Vocab::kMask), Role::completion};
    std::vector<bool> masked(static_cast<size_t>(L), true);

    Trajectory traj;
    traj.stride = stride;
    traj.total_steps = total_steps;
    traj.length = L;
    traj.birth.assign(static_cast<size_t>(L), -1);

    const int bl = (policy.block_length > 0 && policy.block_length < L) ? policy.block_length : L;
    const int n_blocks = (L + bl - 1) / bl;
    const std::vector<int> block_steps = split_steps(total_steps, n_blocks);

    int step = 0;
    for (int block = 0; block < n_blocks; ++block) {
        const int lo = block * bl;
        const int hi = std::min(L, lo + bl);
        for (int local = 1; local <= block_steps[static_cast<size_t>(block)]; ++local) {
            // State before this pass is x_step; the pass drives step -> step+1.
            const Tensor logprobs = denoiser_forward_fast(cfg, params, prompt_ids, completion.ids,
                                                          counter, PassKind::generation);

            if (policy.record && step % stride == 0) {
                Snapshot snap;
                snap.step = step;
                for (int i = 0; i < L; ++i) {
                    if (!masked[static_cast<size_t>(i)]) continue;
                    snap.masked_positions.push_back(i);
                    std::vector<double> row(static_cast<size_t>(cfg.vocab_size));
                    for (int j = 0; j < cfg.vocab_size; ++j) row[static_cast<size_t>(j)] = logprobs.at(i, j);
                    snap.rows.push_back(std::move(row));
                }
                traj.snapshots.push_back(std::move(snap));
            }

            struct Cand {
                int pos;
                int token;
                double conf;
                double tie;
            };
            std::vector<Cand> cands;
            int remaining_block = 0;
            for (int i = lo; i < hi; ++i) {
                if (!masked[static_cast<size_t>(i)]) continue;
                ++remaining_block;
                std::vector<double> row(static_cast<size_t>(cfg.vocab_size));
                for (int j = 0; j < cfg.vocab_size; ++j) row[static_cast<size_t>(j)] = logprobs.at(i, j);
                const double tie = policy.random_tie_masking ? rng.uniform() : 0.0;
                auto [token, conf] = pick_token(row, policy.temperature, rng);
                cands.push_back({i, token, conf, tie});
            }

            const int steps_remaining = block_steps[static_cast<size_t>(block)] - local + 1;
            const int n_unmask =
                remaining_block == 0 ? 0 : (remaining_block + steps_remaining - 1) / steps_remaining;

            std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
                if (a.conf != b.conf) return a.conf > b.conf;
                if (a.tie != b.tie) return a.tie < b.tie;
                return a.pos < b.pos;
            });

            for (int pick = 0; pick < n_unmask; ++pick) {
                const Cand& c = cands[static_cast<size_t>(pick)];
                completion.ids[static_cast<size_t>(c.pos)] = c.token;
                masked[static_cast<size_t>(c.pos)] = false;
                traj.birth[static_cast<size_t>(c.pos)] = step + 1;
            }
            ++step;
        }
    }

    if (policy.record) {
        // The final state is always recorded, even when it coincides with the
        // stride grid; it closes the last delta window.
        if (traj.snapshots.empty() || traj.snapshots.back().step != total_steps) {
            Snapshot snap;
            snap.step = total_steps;
            for (int i = 0; i < L; ++i) {
                if (masked[static_cast<size_t>(i)]) {
                    snap.masked_positions.push_back(i);
                    // No forward pass happens on the final state; rows at any
                    // leftover masked position are unknown.
                    snap.rows.emplace_back();
                }
            }
            traj.snapshots.push_back(std::move(snap));
        }
    }

    for (int i = 0; i < L; ++i) {
        if (masked[static_cast<size_t>(i)]) {
            throw std::logic_error("generate: schedule left a masked position");
        }
    }
    return {std::move(completion), std::move(traj)};
}

std::map<int, int> birth_steps(const Trajectory& traj) {
    if (traj.length <= 0 || static_cast<int>(traj.birth.size()) != traj.length) {
        throw std::invalid_argument("birth_steps: incomplete trajectory");
    }
    std::map<int, int> out;
    for (int i = 0; i < traj.length; ++i) {
        const int b = traj.birth[static_cast<size_t>(i)];
        if (b < 1 || b > traj.total_steps) throw std::invalid_argument("birth_steps: missing birth");
        out[i] = b;
    }
    // Births must agree with the nested mask sets: position p is masked at a
    // recorded step k exactly when birth(p) > k.
    for (const auto& snap : traj.snapshots) {
        std::vector<bool> in_set(static_cast<size_t>(traj.length), false);
        for (int p : snap.masked_positions) in_set[static_cast<size_t>(p)] = true;
        for (int p = 0; p < traj.length; ++p) {
            const bool should = out[p] > snap.step;
            if (in_set[static_cast<size_t>(p)] != should) {
                throw std::invalid_argument("birth_steps: births inconsistent with mask sets");
            }
        }
    }
    return out;
}

void dump_trajectory(const Trajectory& traj, std::ostream& out) {
    nlohmann::json birth = nlohmann::json::object();
    for (int i = 0; i < traj.length; ++i) {
        birth[std::to_string(i)] = traj.birth[static_cast<size_t>(i)];
    }
    out << nlohmann::json{{"stride", traj.stride},
                          {"total_steps", traj.total_steps},
                          {"birth", birth}}
               .dump()
        << "\n";
    for (const auto& s : traj.snapshots) {
        out << nlohmann::json{{"step", s.step},
                              {"masked_positions", s.masked_positions},
                              {"rows", s.rows}}
                   .dump()
            << "\n";
    }
}

Trajectory parse_trajectory(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("trajectory: missing header");
    nlohmann::json h = nlohmann::json::parse(line);
    Trajectory traj;
    traj.stride = h.at("stride").get<int>();
    traj.total_steps = h.at("total_steps").get<int>();
    const auto& birth = h.at("birth");
    traj.length = static_cast<int>(birth.size());
    traj.birth.assign(static_cast<size_t>(traj.length), -1);
    for (const auto& [k, v] : birth.items()) {
        traj.birth.at(static_cast<size_t>(std::stoi(k))) = v.get<int>();
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        Snapshot s;
        s.step = j.at("step").get<int>();
        s.masked_positions = j.at("masked_positions").get<std::vector<int>>();
        s.rows = j.at("rows").get<std::vector<std::vector<double>>>();
        traj.snapshots.push_back(std::move(s));
    }
    return traj;
}

} // namespace mdrl
