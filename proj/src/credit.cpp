#include "mdrl/credit.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <stdexcept>

namespace mdrl {

namespace {

const Snapshot& recorded(const Trajectory& traj, int step) {
    const Snapshot* s = traj.snapshot_at(step);
    if (!s) throw std::invalid_argument("credit: step " + std::to_string(step) + " was not recorded");
    return *s;
}

// Row lookup within a snapshot; returns nullptr when the position has no
// cached row (not masked at that step, or the rowless final state).
const std::vector<double>* row_at(const Snapshot& snap, int pos) {
    for (size_t i = 0; i < snap.masked_positions.size(); ++i) {
        if (snap.masked_positions[i] == pos) {
            return snap.rows[i].empty() ? nullptr : &snap.rows[i];
        }
    }
    return nullptr;
}

double mean_masked_logprob(const Snapshot& at, const std::vector<int>& eval_set,
                           const TokenSequence& completion) {
    double acc = 0.0;
    for (int pos : eval_set) {
        const std::vector<double>* row = row_at(at, pos);
        if (!row) throw std::invalid_argument("credit: no cached row for position " + std::to_string(pos));
        acc += (*row)[static_cast<size_t>(completion.ids.at(static_cast<size_t>(pos)))];
    }
    return acc / static_cast<double>(eval_set.size());
}

} // namespace

double score(const Trajectory& traj, const TokenSequence& completion, int k, int j) {
    const Snapshot& sk = recorded(traj, k);
    const Snapshot& sj = recorded(traj, j);
    if (sj.masked_positions.empty()) {
        throw std::invalid_argument("credit: score over an empty masked set (degenerate window)");
    }
    return mean_masked_logprob(sk, sj.masked_positions, completion);
}

std::vector<DeltaEntry> window_deltas(const Trajectory& traj, const TokenSequence& completion) {
    if (traj.snapshots.size() < 2) throw std::invalid_argument("credit: need at least 2 snapshots");
    std::vector<DeltaEntry> out;
    for (size_t i = 1; i < traj.snapshots.size(); ++i) {
        const Snapshot& a = traj.snapshots[i - 1];
        const Snapshot& b = traj.snapshots[i];
        if (b.masked_positions.empty()) continue;
        DeltaEntry e;
        e.window_start = a.step;
        e.window_end = b.step;
        e.delta = score(traj, completion, b.step, b.step) - score(traj, completion, a.step, b.step);
        out.push_back(e);
    }
    return out;
}

double last_step_delta(LastStepMode mode, const Trajectory& traj, const TokenSequence& completion,
                       const std::vector<DeltaEntry>& prior, const DenoiserConfig* cfg,
                       const ParamStore* params, const std::vector<int>* prompt_ids,
                       PassCounter* counter, bool* fell_back) {
    if (fell_back) *fell_back = false;

    // The final window starts at the last snapshot that still has masked
    // positions (and therefore cached rows).
    const Snapshot* last_masked = nullptr;
    for (const auto& s : traj.snapshots) {
        if (!s.masked_positions.empty()) last_masked = &s;
    }
    if (!last_masked) throw std::invalid_argument("credit: trajectory has no masked snapshots");

    switch (mode) {
        case LastStepMode::neutral:
            return 0.0;
        case LastStepMode::raw:
            return score(traj, completion, last_masked->step, last_masked->step);
        case LastStepMode::mean: {
            if (prior.empty()) {
                if (fell_back) *fell_back = true;
                return 0.0;
            }
            double acc = 0.0;
            for (const auto& e : prior) acc += e.delta;
            return acc / static_cast<double>(prior.size());
        }
        case LastStepMode::extrapolate: {
            if (prior.empty()) {
                if (fell_back) *fell_back = true;
                return 0.0;
            }
            return prior.back().delta;
        }
        case LastStepMode::measured: {
            if (!cfg || !params || !prompt_ids || !counter) {
                throw std::invalid_argument("credit: measured mode needs model access");
            }
            const Tensor lp = denoiser_forward(*cfg, *params, *prompt_ids, completion.ids, *counter,
                                               PassKind::loss);
            double s_final = 0.0;
            for (int pos : last_masked->masked_positions) {
                s_final += lp.at(pos, completion.ids.at(static_cast<size_t>(pos)));
            }
            s_final /= static_cast<double>(last_masked->masked_positions.size());
            return s_final - score(traj, completion, last_masked->step, last_masked->step);
        }
    }
    throw std::logic_error("credit: unknown last-step mode");
}

DeltaTable delta_table(const Trajectory& traj, const TokenSequence& completion, LastStepMode mode,
                       const DenoiserConfig* cfg, const ParamStore* params,
                       const std::vector<int>* prompt_ids, PassCounter* counter) {
    DeltaTable table;
    table.entries = window_deltas(traj, completion);

    // The boundary window runs from the last rows-bearing snapshot to the
    // first fully revealed one.
    const Snapshot* last_masked = nullptr;
    const Snapshot* first_empty = nullptr;
    for (const auto& s : traj.snapshots) {
        if (!s.masked_positions.empty()) {
            last_masked = &s;
        } else if (!first_empty) {
            first_empty = &s;
        }
    }
    if (!last_masked || !first_empty) {
        throw std::invalid_argument("credit: trajectory lacks a final window");
    }

    DeltaEntry last;
    last.window_start = last_masked->step;
    last.window_end = first_empty->step;
    last.last_step = true;
    bool fb = false;
    last.delta = last_step_delta(mode, traj, completion, table.entries, cfg, params, prompt_ids,
                                 counter, &fb);
    table.last_step_fallback = fb;
    table.entries.push_back(last);
    return table;
}

NormalizationReport normalize(std::vector<DeltaTable>& batch, NormalizationMode mode, double eps) {
    NormalizationReport report;
    report.mode = mode;
    report.eps = eps;

    // Guarded z-score: with max(sigma, eps) the normalized batch has
    // population std exactly 1 whenever sigma > eps, and degenerate windows
    // (all deltas equal) map to exactly 0.
    const auto zscore = [eps](DeltaEntry& e, double mu, double sigma) {
        e.delta_z = (e.delta - mu) / std::max(sigma, eps);
    };

    switch (mode) {
        case NormalizationMode::none: {
            for (auto& t : batch) {
                for (auto& e : t.entries) e.delta_z = e.delta;
            }
            return report;
        }
        case NormalizationMode::per_step: {
            std::map<int, std::vector<double>> by_end;
            for (const auto& t : batch) {
                for (const auto& e : t.entries) by_end[e.window_end].push_back(e.delta);
            }
            std::map<int, std::pair<double, double>> stats;
            for (const auto& [end, vals] : by_end) {
                double mu = 0.0;
                for (double v : vals) mu += v;
                mu /= static_cast<double>(vals.size());
                double var = 0.0;
                for (double v : vals) var += (v - mu) * (v - mu);
                var /= static_cast<double>(vals.size());
                stats[end] = {mu, std::sqrt(var)};
                report.stats.push_back({end, mu, std::sqrt(var), static_cast<int>(vals.size())});
            }
            for (auto& t : batch) {
                for (auto& e : t.entries) {
                    const auto& [mu, sigma] = stats.at(e.window_end);
                    zscore(e, mu, sigma);
                }
            }
            return report;
        }
        case NormalizationMode::trajectory: {
            for (size_t s = 0; s < batch.size(); ++s) {
                auto& t = batch[s];
                if (t.entries.empty()) continue;
                double mu = 0.0;
                for (const auto& e : t.entries) mu += e.delta;
                mu /= static_cast<double>(t.entries.size());
                double var = 0.0;
                for (const auto& e : t.entries) var += (e.delta - mu) * (e.delta - mu);
                var /= static_cast<double>(t.entries.size());
                const double sigma = std::sqrt(var);
                report.stats.push_back({static_cast<int>(s), mu, sigma,
                                        static_cast<int>(t.entries.size())});
                for (auto& e : t.entries) zscore(e, mu, sigma);
            }
            return report;
        }
        case NormalizationMode::group: {
            double mu = 0.0;
            int n = 0;
            for (const auto& t : batch) {
                for (const auto& e : t.entries) {
                    mu += e.delta;
                    ++n;
                }
            }
            if (n == 0) return report;
            mu /= static_cast<double>(n);
            double var = 0.0;
            for (const auto& t : batch) {
                for (const auto& e : t.entries) var += (e.delta - mu) * (e.delta - mu);
            }
            var /= static_cast<double>(n);
            const double sigma = std::sqrt(var);
            report.stats.push_back({0, mu, sigma, n});
            for (auto& t : batch) {
                for (auto& e : t.entries) zscore(e, mu, sigma);
            }
            return report;
        }
    }
    throw std::logic_error("credit: unknown normalization mode");
}

TokenWeights token_weights(double advantage, const DeltaTable& table, const std::vector<int>& birth,
                           double lambda) {
    if (lambda < 0) throw std::invalid_argument("token_weights: lambda must be >= 0");
    TokenWeights out;
    out.omega.reserve(birth.size());
    out.tilde_a.reserve(birth.size());
    for (int b : birth) {
        const DeltaEntry* window = nullptr;
        for (const auto& e : table.entries) {
            if (b > e.window_start && b <= e.window_end) {
                window = &e;
                break;
            }
        }
        if (!window) {
            throw std::logic_error("token_weights: birth step " + std::to_string(b) +
                                   " outside all recorded windows");
        }
        const double raw = 1.0 + lambda * window->delta_z;
        if (raw < 0.0) ++out.clamp_fires;
        const double omega = std::max(raw, 0.0);
        out.omega.push_back(omega);
        out.tilde_a.push_back(advantage * omega);
    }
    return out;
}

void write_credit_report(std::ostream& out, const std::vector<DeltaTable>& batch,
                         const std::vector<const Trajectory*>& trajectories) {
    if (batch.size() != trajectories.size()) {
        throw std::invalid_argument("credit report: batch/trajectory size mismatch");
    }
    out << "sample,window_start,window_end,delta,delta_z,n_tokens_born\n";
    char buf[64];
    for (size_t s = 0; s < batch.size(); ++s) {
        for (const auto& e : batch[s].entries) {
            int born = 0;
            for (int b : trajectories[s]->birth) {
                if (b > e.window_start && b <= e.window_end) ++born;
            }
            out << s << ',' << e.window_start << ',' << e.window_end << ',';
            std::snprintf(buf, sizeof(buf), "%.17g", e.delta);
            out << buf << ',';
            std::snprintf(buf, sizeof(buf), "%.17g", e.delta_z);
            out << buf << ',' << born << '\n';
        }
    }
}

} // namespace mdrl
