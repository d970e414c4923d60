#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mdrl/denoiser.hpp"
#include "mdrl/rng.hpp"

namespace mdrl {

enum class Role { prompt, completion };

struct TokenSequence {
    std::vector<int> ids;
    Role role = Role::completion;
};

// One recorded state of the reverse process. `rows` caches the full
// vocabulary log-probability vector the model produced for every position in
// `masked_positions` at this step, so scores can be evaluated post hoc at
// the realized tokens without re-running the model.
struct Snapshot {
    int step = 0;
    std::vector<int> masked_positions;          // sorted completion positions
    std::vector<std::vector<double>> rows;      // aligned with masked_positions
};

struct Trajectory {
    int stride = 1;
    int total_steps = 0;
    int length = 0;
    std::vector<Snapshot> snapshots;   // ordered by step; step 0 and the final step always present
    std::vector<int> birth;            // per completion position: step at which it was unmasked

    const Snapshot* snapshot_at(int step) const {
        for (const auto& s : snapshots) {
            if (s.step == step) return &s;
        }
        return nullptr;
    }
};

struct GenerationPolicy {
    // 0 -> greedy argmax tokens; otherwise tokens are sampled from
    // softmax(logits / temperature) per masked position.
    double temperature = 1.0;
    // Randomize the unmasking order among confidence ties. With continuous
    // scores ties are essentially impossible, but a freshly zero-initialized
    // model is all ties, so this matters for exploration at step zero.
    bool random_tie_masking = true;
    // Optional block-wise decoding: positions are unmasked left-to-right in
    // blocks of this many positions. 0 disables the constraint.
    int block_length = 0;
    // Snapshot recording on/off. Recording never changes the sampled
    // completion or the number of forward passes.
    bool record = true;
};

// Independently replace each completion token with <mask> with probability t.
TokenSequence forward_mask(const TokenSequence& seq, double t, Rng& rng);

// Reverse generation from a fully masked completion. Per step, unmasks
// ceil(remaining / steps_remaining) positions, picking the (position, token)
// pairs with the highest confidence; records a snapshot at every step that is
// 0 mod stride plus the final step. Consumes exactly total_steps forward
// passes under the generation tag.
std::pair<TokenSequence, Trajectory> generate(const DenoiserConfig& cfg, const ParamStore& params,
                                              const std::vector<int>& prompt_ids, int total_steps,
                                              int stride, const GenerationPolicy& policy, Rng& rng,
                                              PassCounter& counter);

// Re-derive the birth map from the nested mask sets of recorded snapshots.
// Only exact with stride 1; used as the independent oracle in tests and as
// the consistency check for trajectory files.
std::map<int, int> birth_steps(const Trajectory& traj);

// JSONL dump: header line {stride, total_steps, birth} followed by one
// {step, masked_positions, rows} line per snapshot.
void dump_trajectory(const Trajectory& traj, std::ostream& out);
Trajectory parse_trajectory(std::istream& in);

} // namespace mdrl
