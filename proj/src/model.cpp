#include "tide/model.hpp"

#include <cmath>
#include <numeric>

#include "tide/linalg.hpp"

namespace tide {

void ModelConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 0 || n_heads < 1 || d_ff < 1 || t_max < 1) {
        throw ParamError("model config: dimensions must be positive (layers may be 0)");
    }
    if (d_model % n_heads != 0) {
        throw ParamError("model config: d_model " + std::to_string(d_model) +
                         " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (head_dim() % 2 != 0) {
        throw ParamError("model config: head dim " + std::to_string(head_dim()) +
                         " must be even for rotary embeddings");
    }
    if (rope_theta <= 0.0 || norm_eps <= 0.0) {
        throw ParamError("model config: rope_theta and norm_eps must be positive");
    }
}

TideModel::TideModel(ModelConfig cfg, TideConfig tide_cfg, uint64_t seed)
    : cfg_(cfg), tide_cfg_(tide_cfg) {
    cfg_.validate();
    tide_cfg_.validate(cfg_);
    std::mt19937_64 rng(seed);
    const int v = cfg_.vocab_size, d = cfg_.d_model, dff = cfg_.d_ff;
    const double proj_std = 0.02 / std::sqrt(2.0 * std::max(1, cfg_.n_layers));

    base_.embedding = Tensor::randn({v, d}, rng, 0.02);
    base_.layers.resize(static_cast<size_t>(cfg_.n_layers));
    for (LayerParams& layer : base_.layers) {
        layer.attn_norm = Tensor::full({d}, 1.0, true);
        layer.wq = Tensor::randn({d, d}, rng, proj_std);
        layer.wk = Tensor::randn({d, d}, rng, proj_std);
        layer.wv = Tensor::randn({d, d}, rng, proj_std);
        layer.wo = Tensor::randn({d, d}, rng, proj_std);
        layer.ffn_norm = Tensor::full({d}, 1.0, true);
        layer.w_gate = Tensor::randn({d, dff}, rng, proj_std);
        layer.w_up = Tensor::randn({d, dff}, rng, proj_std);
        layer.w_down = Tensor::randn({dff, d}, rng, proj_std);
    }
    base_.final_norm = Tensor::full({d}, 1.0, true);
    base_.lm_head = cfg_.tied_head ? base_.embedding : Tensor::randn({v, d}, rng, 0.02);

    const int kb = tide_cfg_.k_blocks;
    if (kb > 0) {
        tide_.blocks.resize(static_cast<size_t>(kb));
        for (MemoryBlockParams& block : tide_.blocks) {
            block.table = Tensor::randn({v, tide_cfg_.d_block}, rng, 0.02);
            block.gain = Tensor::full({tide_cfg_.d_block}, 1.0, true);
        }
        tide_.routers.resize(static_cast<size_t>(cfg_.n_layers));
        for (Tensor& router : tide_.routers) {
            router = Tensor::zeros({kb + 1, d}, true);
        }
    }
}

ForwardTrace TideModel::forward(Tape& tape, const TokenBatch& batch,
                                const ForwardOptions& opt) const {
    if (batch.batch < 1 || batch.seq < 1 ||
        batch.ids.size() != static_cast<size_t>(batch.batch) * static_cast<size_t>(batch.seq)) {
        throw ShapeError("forward: inconsistent batch dimensions");
    }
    if (batch.seq > cfg_.t_max) {
        throw ParamError("forward: sequence length " + std::to_string(batch.seq) +
                         " exceeds t_max " + std::to_string(cfg_.t_max));
    }
    ++forward_count_;
    const int b = batch.batch, t = batch.seq;
    const Shape lead = {b, t};
    std::vector<int32_t> positions(static_cast<size_t>(t));
    std::iota(positions.begin(), positions.end(), 0);

    ForwardTrace trace;
    const bool with_memory = tide_cfg_.k_blocks > 0;
    const int kb = tide_cfg_.k_blocks;

    Tensor h = tape.embedding_lookup(base_.embedding, batch.ids, lead);
    if (opt.keep_trace) trace.h.push_back(h);

    Tensor memory;  // built lazily, at most once per pass
    Tensor forced_logits;
    if (with_memory && opt.force_null_logit.has_value()) {
        forced_logits = Tensor::zeros({b, t, kb + 1});
        double* p = forced_logits.data();
        const int64_t rows = static_cast<int64_t>(b) * t;
        for (int64_t r = 0; r < rows; ++r) p[r * (kb + 1) + kb] = *opt.force_null_logit;
    }

    for (int l = 0; l < cfg_.n_layers; ++l) {
        const LayerParams& layer = base_.layers[static_cast<size_t>(l)];
        Tensor n1 = tape.rmsnorm(h, layer.attn_norm, cfg_.norm_eps);
        Tensor q = tape.rope_apply(tape.matmul(n1, layer.wq), positions, cfg_.head_dim(),
                                   cfg_.rope_theta);
        Tensor k = tape.rope_apply(tape.matmul(n1, layer.wk), positions, cfg_.head_dim(),
                                   cfg_.rope_theta);
        Tensor v = tape.matmul(n1, layer.wv);
        Tensor attn = tape.causal_attention(q, k, v, cfg_.n_heads);
        Tensor h_tilde = tape.add(h, tape.matmul(attn, layer.wo));
        Tensor n2 = tape.rmsnorm(h_tilde, layer.ffn_norm, cfg_.norm_eps);
        Tensor gated = tape.mul(tape.silu(tape.matmul(n2, layer.w_gate)),
                                tape.matmul(n2, layer.w_up));
        Tensor ffn_out = tape.matmul(gated, layer.w_down);

        const bool dropped = opt.drop_memory_at_layer != nullptr &&
                             (*opt.drop_memory_at_layer)[static_cast<size_t>(l)] != 0;
        if (with_memory && !dropped) {
            if (!memory.defined()) {
                memory = build_memory_tensor(tape, tide_, batch.ids, lead, cfg_.norm_eps);
                ++memory_builds_;
            }
            RouterOutput routed;
            if (forced_logits.defined()) {
                routed.alpha = tape.softmax_lastdim(forced_logits);
                routed.mixed = tape.memory_mix(routed.alpha, memory);
            } else {
                routed = route(tape, n2, tide_.routers[static_cast<size_t>(l)], memory);
            }
            h = fuse(tape, h_tilde, ffn_out, routed.mixed);
            if (opt.keep_trace) {
                trace.alpha.push_back(routed.alpha);
                trace.m.push_back(routed.mixed);
            }
        } else {
            h = tape.add(h_tilde, ffn_out);
            if (opt.keep_trace && with_memory) {
                trace.alpha.push_back(Tensor());
                trace.m.push_back(Tensor());
            }
        }
        if (opt.keep_trace) {
            trace.h_post_attn.push_back(h_tilde);
            trace.n_post_attn.push_back(n2);
            trace.h.push_back(h);
        }
    }

    trace.final_norm_out = tape.rmsnorm(h, base_.final_norm, cfg_.norm_eps);
    trace.logits = tape.matmul_nt(trace.final_norm_out, base_.lm_head);
    if (opt.keep_trace) trace.memory = memory;
    return trace;
}

std::vector<NamedParam> TideModel::named_params() const {
    std::vector<NamedParam> out;
    out.push_back({"emb.E", base_.embedding, true});
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const LayerParams& layer = base_.layers[static_cast<size_t>(l)];
        const std::string p = "layer." + std::to_string(l) + ".";
        out.push_back({p + "attn.norm", layer.attn_norm, false});
        out.push_back({p + "attn.wq", layer.wq, true});
        out.push_back({p + "attn.wk", layer.wk, true});
        out.push_back({p + "attn.wv", layer.wv, true});
        out.push_back({p + "attn.wo", layer.wo, true});
        out.push_back({p + "ffn.norm", layer.ffn_norm, false});
        out.push_back({p + "ffn.gate", layer.w_gate, true});
        out.push_back({p + "ffn.up", layer.w_up, true});
        out.push_back({p + "ffn.down", layer.w_down, true});
    }
    out.push_back({"final.norm", base_.final_norm, false});
    if (!cfg_.tied_head) out.push_back({"head.W", base_.lm_head, true});
    for (int k = 0; k < tide_cfg_.k_blocks; ++k) {
        const std::string p = "mem.k." + std::to_string(k) + ".";
        out.push_back({p + "table", tide_.blocks[static_cast<size_t>(k)].table, true});
        out.push_back({p + "gain", tide_.blocks[static_cast<size_t>(k)].gain, false});
    }
    if (tide_cfg_.k_blocks > 0) {
        for (int l = 0; l < cfg_.n_layers; ++l) {
            out.push_back({"router." + std::to_string(l) + ".W",
                           tide_.routers[static_cast<size_t>(l)], true});
        }
    }
    return out;
}

TideModel TideModel::clone() const {
    TideModel copy(cfg_, tide_cfg_, 0);
    const auto src = named_params();
    const auto dst = copy.named_params();
    for (size_t i = 0; i < src.size(); ++i) {
        std::copy(src[i].tensor.data(), src[i].tensor.data() + src[i].tensor.size(),
                  dst[i].tensor.data());
    }
    return copy;
}

void TideModel::zero_grad() const {
    for (const NamedParam& p : named_params()) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
}

std::vector<double> TideModel::ffn_apply(int layer, std::span<const double> x) const {
    if (layer < 0 || layer >= cfg_.n_layers) throw ParamError("ffn_apply: bad layer index");
    const LayerParams& lp = base_.layers[static_cast<size_t>(layer)];
    const int64_t d = cfg_.d_model, dff = cfg_.d_ff;
    if (static_cast<int64_t>(x.size()) != d) throw ShapeError("ffn_apply: input dim mismatch");
    std::vector<double> gate(static_cast<size_t>(dff), 0.0), up(static_cast<size_t>(dff), 0.0);
    const double* pg = lp.w_gate.data();
    const double* pu = lp.w_up.data();
    for (int64_t i = 0; i < d; ++i) {
        const double xi = x[static_cast<size_t>(i)];
        const double* gr = pg + i * dff;
        const double* ur = pu + i * dff;
        for (int64_t j = 0; j < dff; ++j) {
            gate[static_cast<size_t>(j)] += xi * gr[j];
            up[static_cast<size_t>(j)] += xi * ur[j];
        }
    }
    for (int64_t j = 0; j < dff; ++j) {
        const double g = gate[static_cast<size_t>(j)];
        gate[static_cast<size_t>(j)] = g / (1.0 + std::exp(-g)) * up[static_cast<size_t>(j)];
    }
    std::vector<double> out(static_cast<size_t>(d), 0.0);
    const double* pd = lp.w_down.data();
    for (int64_t j = 0; j < dff; ++j) {
        const double gj = gate[static_cast<size_t>(j)];
        const double* dr = pd + j * d;
        for (int64_t i = 0; i < d; ++i) out[static_cast<size_t>(i)] += gj * dr[i];
    }
    return out;
}

FfnLipschitzDetail ffn_lipschitz_detail(const LayerParams& layer, double radius) {
    FfnLipschitzDetail detail;
    detail.sigma_gate = spectral_norm(layer.w_gate);
    detail.sigma_up = spectral_norm(layer.w_up);
    detail.sigma_down = spectral_norm(layer.w_down);
    detail.radius = radius;
    detail.bound = detail.sigma_down * detail.sigma_gate * detail.sigma_up * radius *
                   (1.0 + kSiluDerivMax);
    return detail;
}

double ffn_lipschitz_upper(const TideModel& model, int layer, std::optional<double> radius) {
    if (layer < 0 || layer >= model.config().n_layers) {
        throw ParamError("ffn_lipschitz_upper: bad layer index");
    }
    const LayerParams& lp = model.base().layers[static_cast<size_t>(layer)];
    double r = 0.0;
    if (radius.has_value()) {
        r = *radius;
    } else {
        double gmax = 0.0;
        for (double g : lp.ffn_norm.values()) gmax = std::max(gmax, std::abs(g));
        r = std::sqrt(static_cast<double>(model.config().d_model)) * gmax;
    }
    return ffn_lipschitz_detail(lp, r).bound;
}

}  // namespace tide
