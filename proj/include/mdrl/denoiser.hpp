#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mdrl/graph.hpp"
#include "mdrl/params.hpp"
#include "mdrl/rng.hpp"
#include "mdrl/tensor.hpp"

namespace mdrl {

// Which phase a forward pass belongs to. Generation passes are the ones the
// reverse process pays for; loss passes are everything the objectives spend.
enum class PassKind { generation, loss };

struct PassCounter {
    long long generation_passes = 0;
    long long loss_passes = 0;

    void bump(PassKind k) {
        if (k == PassKind::generation) ++generation_passes; else ++loss_passes;
    }
    void reset() { generation_passes = 0; loss_passes = 0; }
};

enum class Mixer { attention, gated_mlp };
enum class Nonlinearity { gelu, tanh };

struct DenoiserConfig {
    int vocab_size = 0;
    int prompt_len = 0;
    int completion_len = 0; // L
    int width = 64;
    int blocks = 2;
    int heads = 4;
    Mixer mixer = Mixer::attention;
    Nonlinearity nonlinearity = Nonlinearity::gelu;
    double init_std = 0.05;
    bool zero_init_output = true;
    double ln_eps = 1e-5;

    int seq_len() const { return prompt_len + completion_len; }
};

// The trainable policy: a small bidirectional masked-token model. Given a
// prompt and a partially masked completion it emits a normalized
// log-distribution over the vocabulary at every completion position.
//
// theta_old and pi_ref are deep frozen copies; the optimizer only ever
// touches `params`.
struct Denoiser {
    DenoiserConfig cfg;
    ParamStore params;
    std::shared_ptr<const ParamStore> theta_old;
    std::shared_ptr<const ParamStore> pi_ref;
};

Denoiser make_denoiser(const DenoiserConfig& cfg, Rng& rng);

// Freeze a copy of the live parameters into theta_old.
void snapshot_old(Denoiser& d);

// Freeze a copy of the live parameters into pi_ref.
void snapshot_ref(Denoiser& d);

// Build the forward computation into `g` and return the [L, vocab] node of
// per-position log-probabilities for the completion. Validates ids and
// lengths, increments `counter` under `kind`.
NodeId denoiser_forward_node(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                             const std::vector<int>& prompt_ids,
                             const std::vector<int>& masked_completion_ids,
                             PassCounter& counter, PassKind kind);

// Evaluate the forward pass and return the [L, vocab] log-probability matrix
// as a plain tensor. Runs through the autodiff graph so cached values used in
// importance ratios are bit-identical to the differentiable path.
Tensor denoiser_forward(const DenoiserConfig& cfg, const ParamStore& params,
                        const std::vector<int>& prompt_ids,
                        const std::vector<int>& masked_completion_ids,
                        PassCounter& counter, PassKind kind);

// Tape-free forward used by the generation loop, where no gradients are ever
// needed. Mirrors the graph path operation for operation and produces
// bit-identical rows (pinned by test).
Tensor denoiser_forward_fast(const DenoiserConfig& cfg, const ParamStore& params,
                             const std::vector<int>& prompt_ids,
                             const std::vector<int>& masked_completion_ids,
                             PassCounter& counter, PassKind kind);

// Replace each prompt token with <mask> independently with probability p.
std::vector<int> mask_prompt(const std::vector<int>& prompt_ids, double p, Rng& rng);

void save_checkpoint(const Denoiser& d, const std::string& path);
Denoiser load_checkpoint(const std::string& path);

} // namespace mdrl
