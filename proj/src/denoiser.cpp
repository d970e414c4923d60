#include "mdrl/denoiser.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace mdrl {

namespace {

Tensor randn(std::vector<int64_t> shape, double std, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.normal(0.0, std);
    return t;
}

std::string blk(int b, const std::string& suffix) {
    return "blk" + std::to_string(b) + "." + suffix;
}

void validate_ids(const DenoiserConfig& cfg, const std::vector<int>& prompt,
                  const std::vector<int>& completion) {
    if (static_cast<int>(prompt.size()) != cfg.prompt_len) {
        throw std::invalid_argument("denoiser: prompt length mismatch");
    }
    if (static_cast<int>(completion.size()) != cfg.completion_len) {
        throw std::invalid_argument("denoiser: completion length mismatch");
    }
    for (int id : prompt) {
        if (id < 0 || id >= cfg.vocab_size) throw std::invalid_argument("denoiser: prompt id out of range");
    }
    for (int id : completion) {
        if (id < 0 || id >= cfg.vocab_size) throw std::invalid_argument("denoiser: completion id out of range");
    }
}

} // namespace

Denoiser make_denoiser(const DenoiserConfig& cfg, Rng& rng) {
    if (cfg.vocab_size < 4) throw std::invalid_argument("denoiser: vocab too small");
    if (cfg.width <= 0 || cfg.blocks <= 0 || cfg.completion_len <= 0) {
        throw std::invalid_argument("denoiser: bad dimensions");
    }
    if (cfg.mixer == Mixer::attention && cfg.width % cfg.heads != 0) {
        throw std::invalid_argument("denoiser: width must divide into heads");
    }

    Denoiser d;
    d.cfg = cfg;
    const int64_t V = cfg.vocab_size, D = cfg.width, N = cfg.seq_len();
    const int64_t H = 4 * D;

    d.params.add("tok_emb", randn({V, D}, cfg.init_std, rng));
    d.params.add("pos_emb", randn({N, D}, cfg.init_std, rng));

    for (int b = 0; b < cfg.blocks; ++b) {
        if (cfg.mixer == Mixer::attention) {
            const int64_t dh = D / cfg.heads;
            for (int h = 0; h < cfg.heads; ++h) {
                const std::string hs = "h" + std::to_string(h) + ".";
                d.params.add(blk(b, hs + "wq"), randn({D, dh}, cfg.init_std, rng));
                d.params.add(blk(b, hs + "wk"), randn({D, dh}, cfg.init_std, rng));
                d.params.add(blk(b, hs + "wv"), randn({D, dh}, cfg.init_std, rng));
                d.params.add(blk(b, hs + "wo"), randn({dh, D}, cfg.init_std, rng));
            }
        } else {
            d.params.add(blk(b, "w_in"), randn({D, H}, cfg.init_std, rng));
            d.params.add(blk(b, "b_in"), Tensor({H}));
            d.params.add(blk(b, "w_gate"), randn({D, H}, cfg.init_std, rng));
            d.params.add(blk(b, "b_gate"), Tensor({H}));
            d.params.add(blk(b, "pos_mix"), randn({N, N}, cfg.init_std, rng));
            d.params.add(blk(b, "w_mix_out"), randn({H, D}, cfg.init_std, rng));
            d.params.add(blk(b, "b_mix_out"), Tensor({D}));
        }
        d.params.add(blk(b, "w1"), randn({D, H}, cfg.init_std, rng));
        d.params.add(blk(b, "b1"), Tensor({H}));
        d.params.add(blk(b, "w2"), randn({H, D}, cfg.init_std, rng));
        d.params.add(blk(b, "b2"), Tensor({D}));
    }

    if (cfg.zero_init_output) {
        d.params.add("w_out", Tensor({D, V}));
        d.params.add("b_out", Tensor({V}));
    } else {
        d.params.add("w_out", randn({D, V}, cfg.init_std, rng));
        d.params.add("b_out", Tensor({V}));
    }
    return d;
}

void snapshot_old(Denoiser& d) {
    auto copy = std::make_shared<ParamStore>(d.params);
    d.theta_old = std::move(copy);
}

void snapshot_ref(Denoiser& d) {
    auto copy = std::make_shared<ParamStore>(d.params);
    d.pi_ref = std::move(copy);
}

NodeId denoiser_forward_node(Graph& g, const DenoiserConfig& cfg, const ParamStore& params,
                             const std::vector<int>& prompt_ids,
                             const std::vector<int>& masked_completion_ids,
                             PassCounter& counter, PassKind kind) {
    validate_ids(cfg, prompt_ids, masked_completion_ids);

    std::vector<int64_t> ids;
    ids.reserve(static_cast<size_t>(cfg.seq_len()));
    for (int v : prompt_ids) ids.push_back(v);
    for (int v : masked_completion_ids) ids.push_back(v);

    std::vector<int64_t> positions(ids.size());
    for (size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int64_t>(i);

    const NodeId tok_emb = g.param("tok_emb", params.at("tok_emb"));
    const NodeId pos_emb = g.param("pos_emb", params.at("pos_emb"));
    NodeId x = g.add(g.embed(tok_emb, ids), g.take_rows(pos_emb, positions));

    const auto nonlin = [&](NodeId h) {
        return cfg.nonlinearity == Nonlinearity::gelu ? g.gelu(h) : g.tanh(h);
    };

    for (int b = 0; b < cfg.blocks; ++b) {
        const NodeId ln1 = g.layer_norm(x, cfg.ln_eps);
        NodeId mixed = -1;
        if (cfg.mixer == Mixer::attention) {
            const int64_t dh = cfg.width / cfg.heads;
            const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
            for (int h = 0; h < cfg.heads; ++h) {
                const std::string hs = "h" + std::to_string(h) + ".";
                const NodeId q = g.matmul(ln1, g.param(blk(b, hs + "wq"), params.at(blk(b, hs + "wq"))));
                const NodeId k = g.matmul(ln1, g.param(blk(b, hs + "wk"), params.at(blk(b, hs + "wk"))));
                const NodeId v = g.matmul(ln1, g.param(blk(b, hs + "wv"), params.at(blk(b, hs + "wv"))));
                const NodeId att = g.softmax(g.scalar_affine(g.matmul_nt(q, k), scale, 0.0));
                const NodeId ctx = g.matmul(att, v);
                const NodeId out = g.matmul(ctx, g.param(blk(b, hs + "wo"), params.at(blk(b, hs + "wo"))));
                mixed = (mixed < 0) ? out : g.add(mixed, out);
            }
        } else {
            const NodeId h = nonlin(g.add(g.matmul(ln1, g.param(blk(b, "w_in"), params.at(blk(b, "w_in")))),
                                          g.param(blk(b, "b_in"), params.at(blk(b, "b_in")))));
            const NodeId gate = nonlin(g.add(g.matmul(ln1, g.param(blk(b, "w_gate"), params.at(blk(b, "w_gate")))),
                                             g.param(blk(b, "b_gate"), params.at(blk(b, "b_gate")))));
            const NodeId pm = g.matmul(g.param(blk(b, "pos_mix"), params.at(blk(b, "pos_mix"))), h);
            mixed = g.add(g.matmul(g.mul(gate, pm), g.param(blk(b, "w_mix_out"), params.at(blk(b, "w_mix_out")))),
                          g.param(blk(b, "b_mix_out"), params.at(blk(b, "b_mix_out"))));
        }
        x = g.add(x, mixed);

        const NodeId ln2 = g.layer_norm(x, cfg.ln_eps);
        const NodeId h1 = nonlin(g.add(g.matmul(ln2, g.param(blk(b, "w1"), params.at(blk(b, "w1")))),
                                       g.param(blk(b, "b1"), params.at(blk(b, "b1")))));
        const NodeId h2 = g.add(g.matmul(h1, g.param(blk(b, "w2"), params.at(blk(b, "w2")))),
                                g.param(blk(b, "b2"), params.at(blk(b, "b2"))));
        x = g.add(x, h2);
    }

    const NodeId lnf = g.layer_norm(x, cfg.ln_eps);
    const NodeId logits = g.add(g.matmul(lnf, g.param("w_out", params.at("w_out"))),
                                g.param("b_out", params.at("b_out")));

    std::vector<int64_t> completion_rows(static_cast<size_t>(cfg.completion_len));
    for (int i = 0; i < cfg.completion_len; ++i) {
        completion_rows[static_cast<size_t>(i)] = cfg.prompt_len + i;
    }
    const NodeId out = g.log_softmax(g.take_rows(logits, completion_rows));
    counter.bump(kind);
    return out;
}

Tensor denoiser_forward(const DenoiserConfig& cfg, const ParamStore& params,
                        const std::vector<int>& prompt_ids,
                        const std::vector<int>& masked_completion_ids,
                        PassCounter& counter, PassKind kind) {
    Graph g;
    const NodeId out = denoiser_forward_node(g, cfg, params, prompt_ids, masked_completion_ids,
                                             counter, kind);
    return g.value(out);
}

namespace {

// The helpers below replicate the graph ops operation for operation,
// including loop order and accumulation order, so the fast path emits
// bit-identical values.

Tensor mm(const Tensor& a, const Tensor& b) {
    const int64_t m = a.shape[0], k = a.shape[1], c = b.shape[1];
    Tensor out({m, c});
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = a.at(i, kk);
            if (av == 0.0) continue;
            for (int64_t j = 0; j < c; ++j) out.at(i, j) += av * b.at(kk, j);
        }
    }
    return out;
}

Tensor mm_nt(const Tensor& a, const Tensor& b) {
    const int64_t m = a.shape[0], k = a.shape[1], r = b.shape[0];
    Tensor out({m, r});
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < r; ++j) {
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) acc += a.at(i, kk) * b.at(j, kk);
            out.at(i, j) = acc;
        }
    }
    return out;
}

void add_inplace(Tensor& a, const Tensor& b) {
    for (int64_t i = 0; i < a.numel(); ++i) a.at(i) += b.at(i);
}

Tensor add_row_of(const Tensor& a, const Tensor& row) {
    Tensor out = a;
    const int64_t m = a.shape[0], c = a.shape[1];
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < c; ++j) out.at(i, j) += row.at(j);
    }
    return out;
}

Tensor layer_norm_of(const Tensor& a, double eps) {
    Tensor out = a;
    const int64_t m = a.rows(), c = a.cols();
    for (int64_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (int64_t j = 0; j < c; ++j) mu += a.at(i, j);
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            const double d = a.at(i, j) - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int64_t j = 0; j < c; ++j) out.at(i, j) = (a.at(i, j) - mu) * inv;
    }
    return out;
}

void scale_inplace(Tensor& a, double c0) {
    for (int64_t i = 0; i < a.numel(); ++i) a.at(i) = c0 * a.at(i) + 0.0;
}

void softmax_rows_inplace(Tensor& a) {
    const int64_t m = a.rows(), c = a.cols();
    for (int64_t i = 0; i < m; ++i) {
        double mx = a.at(i, 0);
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, a.at(i, j));
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            const double e = std::exp(a.at(i, j) - mx);
            a.at(i, j) = e;
            z += e;
        }
        const double inv = 1.0 / z;
        for (int64_t j = 0; j < c; ++j) a.at(i, j) *= inv;
    }
}

void nonlin_inplace(Tensor& a, Nonlinearity kind) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double x = a.at(i);
        a.at(i) = kind == Nonlinearity::gelu ? 0.5 * x * (1.0 + std::erf(x * kInvSqrt2))
                                             : std::tanh(x);
    }
}

} // namespace

Tensor denoiser_forward_fast(const DenoiserConfig& cfg, const ParamStore& params,
                             const std::vector<int>& prompt_ids,
                             const std::vector<int>& masked_completion_ids,
                             PassCounter& counter, PassKind kind) {
    validate_ids(cfg, prompt_ids, masked_completion_ids);
    const int64_t N = cfg.seq_len();
    const int64_t D = cfg.width;

    const Tensor& tok_emb = params.at("tok_emb");
    const Tensor& pos_emb = params.at("pos_emb");
    Tensor x({N, D});
    for (int64_t i = 0; i < N; ++i) {
        const int id = i < cfg.prompt_len ? prompt_ids[static_cast<size_t>(i)]
                                          : masked_completion_ids[static_cast<size_t>(i - cfg.prompt_len)];
        for (int64_t j = 0; j < D; ++j) x.at(i, j) = tok_emb.at(id, j) + pos_emb.at(i, j);
    }

    for (int b = 0; b < cfg.blocks; ++b) {
        const Tensor ln1 = layer_norm_of(x, cfg.ln_eps);
        Tensor mixed;
        if (cfg.mixer == Mixer::attention) {
            const int64_t dh = D / cfg.heads;
            const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
            for (int h = 0; h < cfg.heads; ++h) {
                const std::string hs = "h" + std::to_string(h) + ".";
                const Tensor q = mm(ln1, params.at(blk(b, hs + "wq")));
                const Tensor k = mm(ln1, params.at(blk(b, hs + "wk")));
                const Tensor v = mm(ln1, params.at(blk(b, hs + "wv")));
                Tensor scores = mm_nt(q, k);
                scale_inplace(scores, scale);
                softmax_rows_inplace(scores);
                const Tensor out = mm(mm(scores, v), params.at(blk(b, hs + "wo")));
                if (h == 0) {
                    mixed = out;
                } else {
                    add_inplace(mixed, out);
                }
            }
        } else {
            Tensor h = add_row_of(mm(ln1, params.at(blk(b, "w_in"))), params.at(blk(b, "b_in")));
            nonlin_inplace(h, cfg.nonlinearity);
            Tensor gate = add_row_of(mm(ln1, params.at(blk(b, "w_gate"))), params.at(blk(b, "b_gate")));
            nonlin_inplace(gate, cfg.nonlinearity);
            Tensor pm = mm(params.at(blk(b, "pos_mix")), h);
            for (int64_t i = 0; i < pm.numel(); ++i) pm.at(i) = gate.at(i) * pm.at(i);
            mixed = add_row_of(mm(pm, params.at(blk(b, "w_mix_out"))), params.at(blk(b, "b_mix_out")));
        }
        add_inplace(x, mixed);

        const Tensor ln2 = layer_norm_of(x, cfg.ln_eps);
        Tensor h1 = add_row_of(mm(ln2, params.at(blk(b, "w1"))), params.at(blk(b, "b1")));
        nonlin_inplace(h1, cfg.nonlinearity);
        const Tensor h2 = add_row_of(mm(h1, params.at(blk(b, "w2"))), params.at(blk(b, "b2")));
        add_inplace(x, h2);
    }

    const Tensor lnf = layer_norm_of(x, cfg.ln_eps);
    const Tensor logits = add_row_of(mm(lnf, params.at("w_out")), params.at("b_out"));

    const int64_t L = cfg.completion_len;
    const int64_t V = cfg.vocab_size;
    Tensor rows({L, V});
    for (int64_t i = 0; i < L; ++i) {
        for (int64_t j = 0; j < V; ++j) rows.at(i, j) = logits.at(cfg.prompt_len + i, j);
    }
    // log-softmax, mirroring the graph op
    for (int64_t i = 0; i < L; ++i) {
        double mx = rows.at(i, 0);
        for (int64_t j = 1; j < V; ++j) mx = std::max(mx, rows.at(i, j));
        double z = 0.0;
        for (int64_t j = 0; j < V; ++j) z += std::exp(rows.at(i, j) - mx);
        const double lz = mx + std::log(z);
        for (int64_t j = 0; j < V; ++j) rows.at(i, j) -= lz;
    }
    counter.bump(kind);
    return rows;
}

std::vector<int> mask_prompt(const std::vector<int>& prompt_ids, double p, Rng& rng) {
    std::vector<int> out = prompt_ids;
    for (auto& id : out) {
        if (rng.bernoulli(p)) id = 1; // <mask>
    }
    return out;
}

void save_checkpoint(const Denoiser& d, const std::string& path) {
    nlohmann::json j;
    j["format"] = "mdrl-checkpoint-v1";
    j["config"] = {
        {"vocab_size", d.cfg.vocab_size},
        {"prompt_len", d.cfg.prompt_len},
        {"completion_len", d.cfg.completion_len},
        {"width", d.cfg.width},
        {"blocks", d.cfg.blocks},
        {"heads", d.cfg.heads},
        {"mixer", d.cfg.mixer == Mixer::attention ? "attention" : "gated_mlp"},
        {"nonlinearity", d.cfg.nonlinearity == Nonlinearity::gelu ? "gelu" : "tanh"},
        {"init_std", d.cfg.init_std},
        {"zero_init_output", d.cfg.zero_init_output},
        {"ln_eps", d.cfg.ln_eps},
    };
    nlohmann::json params = nlohmann::json::object();
    for (const auto& name : d.params.names()) {
        const Tensor& t = d.params.at(name);
        params[name] = {{"shape", t.shape}, {"data", t.data}};
    }
    j["params"] = std::move(params);

    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out << j.dump() << "\n";
}

Denoiser load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "mdrl-checkpoint-v1") {
        throw std::runtime_error("unrecognized checkpoint format in " + path);
    }
    Denoiser d;
    const auto& c = j.at("config");
    d.cfg.vocab_size = c.at("vocab_size").get<int>();
    d.cfg.prompt_len = c.at("prompt_len").get<int>();
    d.cfg.completion_len = c.at("completion_len").get<int>();
    d.cfg.width = c.at("width").get<int>();
    d.cfg.blocks = c.at("blocks").get<int>();
    d.cfg.heads = c.at("heads").get<int>();
    d.cfg.mixer = c.at("mixer").get<std::string>() == "attention" ? Mixer::attention : Mixer::gated_mlp;
    d.cfg.nonlinearity = c.at("nonlinearity").get<std::string>() == "gelu" ? Nonlinearity::gelu
                                                                           : Nonlinearity::tanh;
    d.cfg.init_std = c.at("init_std").get<double>();
    d.cfg.zero_init_output = c.at("zero_init_output").get<bool>();
    d.cfg.ln_eps = c.at("ln_eps").get<double>();

    for (const auto& [name, pj] : j.at("params").items()) {
        Tensor t;
        t.shape = pj.at("shape").get<std::vector<int64_t>>();
        t.data = pj.at("data").get<std::vector<double>>();
        if (Tensor::numel_of(t.shape) != t.numel()) {
            throw std::runtime_error("checkpoint: shape/data mismatch for " + name);
        }
        d.params.add(name, std::move(t));
    }
    return d;
}

} // namespace mdrl
