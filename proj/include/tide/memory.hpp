#pragma once

#include <cstdint>
#include <vector>

#include "tide/tensor.hpp"

namespace tide {

struct ModelConfig;

/// Memory pathway configuration. k_blocks == 0 degenerates to the exact
/// baseline model. d_block must equal the model hidden dimension: the routed
/// memory vector is added straight into the d-dimensional residual stream.
struct TideConfig {
    int k_blocks = 0;
    int d_block = 0;

    void validate(const ModelConfig& cfg) const;
};

/// One MemoryBlock: an independent (V, d_b) table plus the gain of the
/// RMSNorm applied to looked-up rows. No parameters are shared across blocks.
struct MemoryBlockParams {
    Tensor table;
    Tensor gain;
};

struct TideParams {
    std::vector<MemoryBlockParams> blocks;
    std::vector<Tensor> routers;  // per layer, (K+1, d); row K is the null slot
};

/// RMSNorm(E_k[v]) for each id. A lookup plus a norm; no matrix multiply on
/// this path.
Tensor memory_block_lookup(Tape& tape, const MemoryBlockParams& block,
                           std::span<const int32_t> ids, Shape lead_shape, double eps);

/// Untaped single-row block output, for diagnostics.
std::vector<double> memory_block_output(const MemoryBlockParams& block, int32_t id, double eps);

/// Stacks all K block outputs into the (B, T, K, d_b) memory tensor. Built
/// once per forward pass and shared across all layers.
Tensor build_memory_tensor(Tape& tape, const TideParams& params, std::span<const int32_t> ids,
                           Shape lead_shape, double eps);

struct RouterOutput {
    Tensor alpha;  // (B, T, K+1), rows on the simplex
    Tensor mixed;  // (B, T, d)
};

/// alpha = softmax(W_r n) over K+1 slots; mixed = sum_{k<K} alpha_k M_k.
/// The null slot weighs nothing in the mix.
RouterOutput route(Tape& tape, const Tensor& n_post_attn, const Tensor& router,
                   const Tensor& memory);

/// h = h_tilde + (ffn_out + m). Neither pathway reads the other's output;
/// swapping ffn_out and m leaves the result bitwise unchanged.
Tensor fuse(Tape& tape, const Tensor& h_tilde, const Tensor& ffn_out, const Tensor& m);

/// C = max over the vocabulary and all blocks of ||M_k(v)||.
double memory_max_norm(const TideParams& params, double eps);

/// s* = log(K (C - eps) / eps): with null logit >= s* and zero active logits,
/// ||m(v)|| <= eps for every token. The log argument is clamped below at
/// 1e-300, so eps arbitrarily close to C yields a large negative s* instead
/// of -inf.
double null_suppression_logit(int k_blocks, double c_max, double eps);

struct FootprintGroup {
    int64_t params = 0;
    int64_t bytes(int bits) const { return params * bits / 8; }
};

/// Parameter/byte breakdown: resident base weights vs offloadable memory
/// tables vs per-layer routers.
struct FootprintReport {
    FootprintGroup base;
    FootprintGroup memory;  // K tables plus their gains
    FootprintGroup router;  // L * (K+1) * d when K > 0, else 0
    int64_t total_params() const { return base.params + memory.params + router.params; }
};

FootprintReport footprint_report(const ModelConfig& cfg, const TideConfig& tide_cfg);

}  // namespace tide
