#pragma once

#include <cstdint>
#include <vector>

#include "tide/model.hpp"

namespace tide {

/// Largest rank at which storing the (U, V) factors of a (V, d_b) table does
/// not exceed the dense parameter count: floor(V * d_b / (V + d_b)).
int64_t max_saving_rank(int64_t vocab_size, int64_t d_b);

struct LowRankFactors {
    Tensor u;                    // (rows, r) with singular values folded in
    Tensor v;                    // (r, cols)
    std::vector<double> sigma;   // full spectrum, descending
    double tail_error = 0.0;     // sqrt(sum_{i > r} sigma_i^2)
    double recon_error = 0.0;    // Frobenius ||A - U V||
};

/// Best rank-r Frobenius approximation via the one-sided Jacobi SVD.
LowRankFactors lowrank_compress(const Tensor& table, int rank);
Tensor lowrank_reconstruct(const LowRankFactors& factors);

struct QuantizedTable {
    int bits = 0;
    int64_t rows = 0, cols = 0;
    std::vector<int32_t> codes;   // row-major signed codes
    std::vector<double> scales;   // per-row symmetric scale; 0 for all-zero rows

    int64_t code_bytes() const { return rows * cols * bits / 8; }
};

/// Per-row symmetric linear quantization at 4, 8 or 16 bits.
QuantizedTable quantize_table(const Tensor& table, int bits);
Tensor dequantize_table(const QuantizedTable& q);

struct SweepPoint {
    double percent = 0.0;  // rank reduction percent
    int rank = 0;
    double ppl = 0.0;
    double delta_abs = 0.0;
    double delta_pct = 0.0;
};

struct CompressionReport {
    double base_ppl = 0.0;
    std::vector<SweepPoint> points;
};

/// Uniform rank reduction across every MemoryBlock: r = ceil((1 - p) * d_b),
/// evaluated as held-out perplexity with the reconstructed tables swapped in.
CompressionReport compressed_eval_lowrank(const TideModel& model,
                                          const std::vector<double>& percents,
                                          const std::vector<int32_t>& tokens, int seq_len,
                                          int jobs = 1);

struct QuantPoint {
    int bits = 0;
    double ppl = 0.0;
    double delta_abs = 0.0;
    double delta_pct = 0.0;
};

struct QuantReport {
    double base_ppl = 0.0;
    std::vector<QuantPoint> points;
};

QuantReport compressed_eval_quant(const TideModel& model, const std::vector<int>& bit_widths,
                                  const std::vector<int32_t>& tokens, int seq_len);

}  // namespace tide
