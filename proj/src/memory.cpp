#include "tide/memory.hpp"

#include <cmath>

#include "tide/model.hpp"

namespace tide {

void TideConfig::validate(const ModelConfig& cfg) const {
    if (k_blocks < 0) throw ParamError("tide config: k_blocks must be >= 0");
    if (k_blocks > 0 && d_block != cfg.d_model) {
        throw ParamError("tide config: d_block " + std::to_string(d_block) +
                         " must equal model dimension " + std::to_string(cfg.d_model));
    }
}

Tensor memory_block_lookup(Tape& tape, const MemoryBlockParams& block,
                           std::span<const int32_t> ids, Shape lead_shape, double eps) {
    Tensor rows = tape.embedding_lookup(block.table, ids, std::move(lead_shape));
    return tape.rmsnorm(rows, block.gain, eps);
}

std::vector<double> memory_block_output(const MemoryBlockParams& block, int32_t id, double eps) {
    const int64_t d = block.table.dim(1);
    if (id < 0 || id >= block.table.dim(0)) {
        throw IndexError("memory_block_output: id " + std::to_string(id) + " outside vocabulary");
    }
    const double* row = block.table.data() + static_cast<int64_t>(id) * d;
    double ms = 0.0;
    for (int64_t i = 0; i < d; ++i) ms += row[i] * row[i];
    ms /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(ms + eps);
    std::vector<double> out(static_cast<size_t>(d));
    const double* gain = block.gain.data();
    for (int64_t i = 0; i < d; ++i) out[static_cast<size_t>(i)] = gain[i] * row[i] * inv;
    return out;
}

Tensor build_memory_tensor(Tape& tape, const TideParams& params, std::span<const int32_t> ids,
                           Shape lead_shape, double eps) {
    if (params.blocks.empty()) throw ParamError("build_memory_tensor: no memory blocks");
    std::vector<Tensor> slices;
    slices.reserve(params.blocks.size());
    for (const MemoryBlockParams& block : params.blocks) {
        slices.push_back(memory_block_lookup(tape, block, ids, lead_shape, eps));
    }
    return tape.stack_k(slices);
}

RouterOutput route(Tape& tape, const Tensor& n_post_attn, const Tensor& router,
                   const Tensor& memory) {
    Tensor logits = tape.matmul_nt(n_post_attn, router);
    RouterOutput out;
    out.alpha = tape.softmax_lastdim(logits);
    out.mixed = tape.memory_mix(out.alpha, memory);
    return out;
}

Tensor fuse(Tape& tape, const Tensor& h_tilde, const Tensor& ffn_out, const Tensor& m) {
    return tape.add3(h_tilde, ffn_out, m);
}

double memory_max_norm(const TideParams& params, double eps) {
    double c_max = 0.0;
    for (const MemoryBlockParams& block : params.blocks) {
        const int64_t vocab = block.table.dim(0);
        const int64_t d = block.table.dim(1);
        const double* gain = block.gain.data();
        for (int64_t v = 0; v < vocab; ++v) {
            const double* row = block.table.data() + v * d;
            double ms = 0.0;
            for (int64_t i = 0; i < d; ++i) ms += row[i] * row[i];
            ms /= static_cast<double>(d);
            const double inv = 1.0 / std::sqrt(ms + eps);
            double norm2 = 0.0;
            for (int64_t i = 0; i < d; ++i) {
                const double y = gain[i] * row[i] * inv;
                norm2 += y * y;
            }
            c_max = std::max(c_max, std::sqrt(norm2));
        }
    }
    return c_max;
}

double null_suppression_logit(int k_blocks, double c_max, double eps) {
    if (k_blocks < 1) throw ParamError("null_suppression_logit: need k_blocks >= 1");
    if (eps <= 0.0 || eps >= c_max) {
        throw ParamError("null_suppression_logit: need 0 < eps < C, got eps=" +
                         std::to_string(eps) + " C=" + std::to_string(c_max));
    }
    double arg = static_cast<double>(k_blocks) * (c_max - eps) / eps;
    if (arg < 1e-300) arg = 1e-300;  // eps -> C lower-clamps instead of -inf
    return std::log(arg);
}

FootprintReport footprint_report(const ModelConfig& cfg, const TideConfig& tide_cfg) {
    const int64_t v = cfg.vocab_size;
    const int64_t d = cfg.d_model;
    const int64_t dff = cfg.d_ff;
    const int64_t l = cfg.n_layers;
    FootprintReport report;
    int64_t base = v * d;                       // embedding
    base += l * (4 * d * d + 2 * d * dff + dff * d + 2 * d);  // projections, FFN, norm gains
    base += d;                                  // final norm
    if (!cfg.tied_head) base += v * d;          // LM head
    report.base.params = base;
    if (tide_cfg.k_blocks > 0) {
        const int64_t k = tide_cfg.k_blocks;
        const int64_t db = tide_cfg.d_block;
        report.memory.params = v * k * db + k * db;  // tables plus gains
        report.router.params = l * (k + 1) * d;
    }
    return report;
}

}  // namespace tide
