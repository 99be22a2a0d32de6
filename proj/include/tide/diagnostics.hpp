#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "tide/corpus.hpp"
#include "tide/model.hpp"
#include "tide/trainer.hpp"

namespace tide {

// ---------------------------------------------------------------------------
// Closed-form update-count and gradient-ratio quantities
// ---------------------------------------------------------------------------

struct ExpectedUpdates {
    double exact = 0.0;   // tau * (1 - (1 - f)^(BT))
    double approx = 0.0;  // tau * f * B * T
    double approx_rel_error = 0.0;
};

ExpectedUpdates expected_updates(double f_v, int64_t batch, int64_t seq, double tau);

struct GradRatioBound {
    double kappa = 0.0;            // 1 - (1 - c)^(BT)
    double one_minus_kappa = 0.0;  // exp(BT * log1p(-c)), kept for reporting
    double eps_over_c = 0.0;
    double bound = 0.0;  // eps * BT * G^2 / (kappa * G^2_min)
};

GradRatioBound grad_ratio_bound(double eps_f, double c, int64_t batch, int64_t seq, double g2,
                                double g2_min);

// ---------------------------------------------------------------------------
// Gradient audits over live training steps
// ---------------------------------------------------------------------------

struct GradAudit {
    int vocab_size = 0;
    int k_blocks = 0;
    int64_t steps = 0;
    std::vector<int64_t> occurrences;        // steps in which v appeared among inputs
    std::vector<double> primary_sq_norm;     // per token, cumulative ||grad E[v]||^2
    std::vector<std::vector<double>> block_sq_norm;  // [k][v]
    std::vector<int64_t> cofired;            // occurrences where all K block rows got grad != 0
    double g2_max = 0.0;                     // max per-step occurring row norm^2, primary table
    double g2_min = 0.0;                     // min of the same quantity
};

/// Observes training steps and accumulates the per-token gradient statistics
/// of the primary table and every MemoryBlock table.
class GradAuditor {
  public:
    explicit GradAuditor(const TideModel& model);
    void on_step(const TrainStepInfo& info);
    const GradAudit& audit() const { return audit_; }

  private:
    GradAudit audit_;
    bool g2_seen_ = false;
};

/// Runs `steps` training steps through the trainer (its own sampler, or the
/// supplied batch generator) while auditing gradients.
GradAudit run_grad_audit(Trainer& trainer, int64_t steps,
                         const std::function<TokenBatch()>& next_batch = nullptr);

struct OccurrenceCheck {
    double probability = 0.0;  // 1 - (1 - f)^(BT)
    double expected = 0.0;     // steps * probability
    double sigma = 0.0;        // binomial std dev over steps
    bool within_3sigma = false;
};

/// Compares audited occurrence counts against the closed form, token by token.
std::vector<OccurrenceCheck> occurrence_vs_formula(const GradAudit& audit,
                                                   const std::vector<double>& f, int64_t batch,
                                                   int64_t seq);
double fraction_within_3sigma(const std::vector<OccurrenceCheck>& checks);

// ---------------------------------------------------------------------------
// Contextual collapse probes
// ---------------------------------------------------------------------------

/// A probe context with one slot position to be filled by each token of a
/// probed pair.
struct ProbeTemplate {
    std::vector<int32_t> tokens;
    int slot = -1;
};

/// Random slot-in-fixed-context templates; the slot sits at the last position
/// so the full context precedes it.
std::vector<ProbeTemplate> make_templates(int count, int length, int vocab_size, uint64_t seed);

struct PairCollapse {
    int32_t u = 0, v = 0;
    std::vector<double> layer_dist;    // ||h_u - h_v|| at the slot, layers 0..L, template mean
    std::vector<uint8_t> collapsed;    // layer_dist <= delta_tol
    std::vector<double> ffn_in_gap;    // per layer, gap between the pair's FFN inputs
    std::vector<double> ffn_out_gap;   // per layer, gap between FFN outputs
    std::vector<double> mem_dist;      // per block, ||M_k(u) - M_k(v)|| (context-free)
};

struct CollapseReport {
    double delta_tol = 0.0;
    std::vector<double> lffn;  // per layer certified upper bound
    std::vector<PairCollapse> pairs;
};

CollapseReport collapse_scan(const TideModel& model, const std::vector<ProbeTemplate>& templates,
                             const std::vector<std::pair<int32_t, int32_t>>& pairs,
                             double delta_tol);

struct FfnBoundReport {
    double delta = 0.0;        // input gap
    double ffn_gap = 0.0;      // measured output gap
    double lffn = 0.0;         // certified bound over a ball covering both inputs
    double lip_rhs = 0.0;      // lffn * delta
    double floor_value = 0.0;  // max((C - lffn*delta)/2, 0)
    bool vacuous = false;      // C <= lffn * delta
};

FfnBoundReport ffn_lower_bound_check(const TideModel& model, int layer,
                                     std::span<const double> h_u, std::span<const double> h_v,
                                     double target_c);

// ---------------------------------------------------------------------------
// Memory separation (construction and measurement)
// ---------------------------------------------------------------------------

double measure_separation(const MemoryBlockParams& block, int32_t u, int32_t v, double eps);

/// Rewrites rows u and v of the block so the post-RMSNorm distance equals
/// target_c. Achievable range is (0, 2 * gmax * sqrt(d_b)] with gmax the
/// largest |gain| entry; outside it a ParamError is thrown.
void set_separation(MemoryBlockParams& block, int32_t u, int32_t v, double target_c, double eps);

// ---------------------------------------------------------------------------
// Layer-drop ablation and router statistics
// ---------------------------------------------------------------------------

struct LayerDropReport {
    double intact_ppl = 0.0;
    std::vector<double> dropped_ppl;  // one entry per layer
    std::vector<double> delta_abs;
    std::vector<double> delta_pct;
};

LayerDropReport layer_drop_ablation(const TideModel& model, const std::vector<int32_t>& tokens,
                                    int seq_len, int jobs = 1);

struct RouterStats {
    int bin_count = 0;
    int slots = 0;
    // mean_alpha[layer][bin][slot]; the trailing bin row collects unbinned
    // input tokens
    std::vector<std::vector<std::vector<double>>> mean_alpha;
    std::vector<int64_t> bin_positions;  // bin_count + 1 entries
};

RouterStats router_stats(const TideModel& model, const std::vector<int32_t>& tokens, int seq_len,
                         const FrequencyBinTable& bins);

// ---------------------------------------------------------------------------
// Embedding geometry
// ---------------------------------------------------------------------------

struct CosineDistance {
    double distance = 0.0;  // 1 - mean_v cos(A[v], B[v]) over usable rows
    int64_t skipped = 0;    // zero-norm rows left out
};

CosineDistance embedding_cosine_distance(const Tensor& a, const Tensor& b);
std::vector<std::vector<double>> embedding_cosine_matrix(const std::vector<Tensor>& tables);

/// All post-RMSNorm rows of one MemoryBlock as a (V, d_b) matrix.
Tensor memory_output_matrix(const MemoryBlockParams& block, double eps);

struct NeighborReport {
    int k_nn = 0;
    std::vector<int32_t> queries;
    // neighbors[table][query] = ids of the top-k cosine neighbors (query excluded)
    std::vector<std::vector<std::vector<int32_t>>> neighbors;
    // jaccard[k][query] = overlap between table 0 (E) and table k+1 (M_k)
    std::vector<std::vector<double>> jaccard;
};

/// Tables: primary embedding first, then each block's output matrix.
NeighborReport knn_jaccard(const std::vector<Tensor>& tables, const std::vector<int32_t>& queries,
                           int k_nn);

}  // namespace tide
