#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tide/memory.hpp"
#include "tide/tensor.hpp"

namespace tide {

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 0;
    int n_layers = 0;
    int n_heads = 1;
    int d_ff = 0;
    int t_max = 0;
    double rope_theta = 10000.0;
    double norm_eps = 1e-6;
    bool tied_head = false;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;
};

struct LayerParams {
    Tensor attn_norm;  // (d)
    Tensor wq, wk, wv, wo;        // (d, d) each, applied as x W
    Tensor ffn_norm;   // (d)
    Tensor w_gate, w_up;          // (d, d_ff)
    Tensor w_down;                // (d_ff, d)
};

struct BaseParams {
    Tensor embedding;  // (V, d)
    std::vector<LayerParams> layers;
    Tensor final_norm;  // (d)
    Tensor lm_head;     // (V, d); shares storage with embedding when tied
};

struct TokenBatch {
    int batch = 0;
    int seq = 0;
    std::vector<int32_t> ids;      // batch * seq inputs
    std::vector<int32_t> targets;  // batch * seq next-token targets (may be empty)
};

struct ForwardTrace {
    std::vector<Tensor> h;            // n_layers + 1 entries when traced; h[0] = E[x]
    std::vector<Tensor> h_post_attn;  // per layer residual after attention
    std::vector<Tensor> n_post_attn;  // per layer RMSNorm of the above
    std::vector<Tensor> alpha;        // per layer (B, T, K+1); K > 0 only
    std::vector<Tensor> m;            // per layer routed memory vector; K > 0 only
    Tensor memory;                    // (B, T, K, d_b), built once per pass; K > 0 only
    Tensor final_norm_out;
    Tensor logits;  // (B, T, V)
};

struct ForwardOptions {
    bool keep_trace = false;
    /// Per-layer flags; a set flag replaces that layer's routed memory
    /// contribution with zero (router and blocks untouched elsewhere).
    const std::vector<uint8_t>* drop_memory_at_layer = nullptr;
    /// Diagnostic override: routing weights computed from logits
    /// (0, ..., 0, s) instead of W_r n, at every layer.
    std::optional<double> force_null_logit;
};

struct NamedParam {
    std::string name;
    Tensor tensor;
    bool decay = false;
};

/// Baseline decoder transformer plus the optional token-identity memory
/// pathway. k_blocks == 0 runs the exact baseline computation.
class TideModel {
  public:
    TideModel(ModelConfig cfg, TideConfig tide_cfg, uint64_t seed);

    TideModel(TideModel&& other) noexcept
        : cfg_(other.cfg_),
          tide_cfg_(other.tide_cfg_),
          base_(std::move(other.base_)),
          tide_(std::move(other.tide_)),
          forward_count_(other.forward_count_.load()),
          memory_builds_(other.memory_builds_.load()) {}
    TideModel(const TideModel&) = delete;
    TideModel& operator=(const TideModel&) = delete;

    const ModelConfig& config() const { return cfg_; }
    const TideConfig& tide_config() const { return tide_cfg_; }
    BaseParams& base() { return base_; }
    const BaseParams& base() const { return base_; }
    TideParams& tide() { return tide_; }
    const TideParams& tide() const { return tide_; }

    ForwardTrace forward(Tape& tape, const TokenBatch& batch,
                         const ForwardOptions& opt = {}) const;

    /// Stable registration order; names match the checkpoint records.
    std::vector<NamedParam> named_params() const;

    /// Deep copy: fresh storage, identical parameter values.
    TideModel clone() const;
    void zero_grad() const;

    /// Forward passes executed and memory tensors built since construction.
    int64_t forward_count() const { return forward_count_; }
    int64_t memory_build_count() const { return memory_builds_; }

    /// Pure FFN map of one layer applied to a raw vector:
    /// down(silu(gate(x)) * up(x)). Used by the Lipschitz diagnostics.
    std::vector<double> ffn_apply(int layer, std::span<const double> x) const;

  private:
    ModelConfig cfg_;
    TideConfig tide_cfg_;
    BaseParams base_;
    TideParams tide_;
    mutable std::atomic<int64_t> forward_count_{0};
    mutable std::atomic<int64_t> memory_builds_{0};
};

struct FfnLipschitzDetail {
    double bound = 0.0;
    double sigma_gate = 0.0;
    double sigma_up = 0.0;
    double sigma_down = 0.0;
    double radius = 0.0;
};

/// Certified (not tight) upper bound on the FFN's Lipschitz constant over the
/// ball of the given radius, via spectral norms of the three linear maps and
/// the SiLU-gate factor. The default radius covers everything the layer's
/// RMSNorm can emit: sqrt(d) * max |ffn gain|.
FfnLipschitzDetail ffn_lipschitz_detail(const LayerParams& layer, double radius);
double ffn_lipschitz_upper(const TideModel& model, int layer,
                           std::optional<double> radius = std::nullopt);

/// Smallest constant L with |silu'(z)| <= L everywhere (rounded up).
inline constexpr double kSiluDerivMax = 1.0999;

}  // namespace tide
