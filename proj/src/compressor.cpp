#include "tide/compressor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "tide/linalg.hpp"
#include "tide/trainer.hpp"

namespace tide {

int64_t max_saving_rank(int64_t vocab_size, int64_t d_b) {
    if (vocab_size < 1 || d_b < 1) throw ParamError("max_saving_rank: dimensions must be >= 1");
    return vocab_size * d_b / (vocab_size + d_b);
}

LowRankFactors lowrank_compress(const Tensor& table, int rank) {
    if (table.ndim() != 2) throw ShapeError("lowrank_compress: table must be 2-D");
    const int64_t rows = table.dim(0), cols = table.dim(1);
    if (rank < 1 || rank > std::min(rows, cols)) {
        throw ParamError("lowrank_compress: rank " + std::to_string(rank) +
                         " outside [1, min(V, d_b)]");
    }
    const SvdResult svd = jacobi_svd(table);
    LowRankFactors out;
    out.sigma = svd.sigma;
    out.u = Tensor({static_cast<int>(rows), rank});
    out.v = Tensor({rank, static_cast<int>(cols)});
    for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < rank; ++j) {
            out.u.data()[i * rank + j] = svd.u.data()[i * cols + j] * svd.sigma[static_cast<size_t>(j)];
        }
    }
    for (int64_t j = 0; j < rank; ++j) {
        for (int64_t i = 0; i < cols; ++i) {
            out.v.data()[j * cols + i] = svd.v.data()[i * cols + j];
        }
    }
    double tail = 0.0;
    for (size_t j = static_cast<size_t>(rank); j < out.sigma.size(); ++j) {
        tail += out.sigma[j] * out.sigma[j];
    }
    out.tail_error = std::sqrt(tail);

    const Tensor recon = lowrank_reconstruct(out);
    double err = 0.0;
    for (int64_t i = 0; i < table.size(); ++i) {
        const double d = table.data()[i] - recon.data()[i];
        err += d * d;
    }
    out.recon_error = std::sqrt(err);
    return out;
}

Tensor lowrank_reconstruct(const LowRankFactors& factors) {
    Tape tape(false);
    return tape.matmul(factors.u, factors.v);
}

QuantizedTable quantize_table(const Tensor& table, int bits) {
    if (bits != 4 && bits != 8 && bits != 16) {
        throw ParamError("quantize_table: bits must be one of {4, 8, 16}");
    }
    if (table.ndim() != 2) throw ShapeError("quantize_table: table must be 2-D");
    QuantizedTable q;
    q.bits = bits;
    q.rows = table.dim(0);
    q.cols = table.dim(1);
    q.codes.resize(static_cast<size_t>(q.rows * q.cols));
    q.scales.resize(static_cast<size_t>(q.rows));
    const int32_t qmax = (1 << (bits - 1)) - 1;
    for (int64_t r = 0; r < q.rows; ++r) {
        const double* row = table.data() + r * q.cols;
        double mx = 0.0;
        for (int64_t j = 0; j < q.cols; ++j) mx = std::max(mx, std::abs(row[j]));
        // all-zero row: scale 0, codes 0
        const double scale = mx > 0.0 ? mx / static_cast<double>(qmax) : 0.0;
        q.scales[static_cast<size_t>(r)] = scale;
        for (int64_t j = 0; j < q.cols; ++j) {
            int32_t code = 0;
            if (scale > 0.0) {
                code = static_cast<int32_t>(std::llround(row[j] / scale));
                code = std::clamp(code, -qmax, qmax);
            }
            q.codes[static_cast<size_t>(r * q.cols + j)] = code;
        }
    }
    return q;
}

Tensor dequantize_table(const QuantizedTable& q) {
    Tensor out({static_cast<int>(q.rows), static_cast<int>(q.cols)});
    for (int64_t r = 0; r < q.rows; ++r) {
        const double scale = q.scales[static_cast<size_t>(r)];
        for (int64_t j = 0; j < q.cols; ++j) {
            out.data()[r * q.cols + j] =
                scale * static_cast<double>(q.codes[static_cast<size_t>(r * q.cols + j)]);
        }
    }
    return out;
}

namespace {

void require_memory(const TideModel& model, const char* who) {
    if (model.tide_config().k_blocks < 1) {
        throw ParamError(std::string(who) + ": model has no MemoryBlocks");
    }
}

}  // namespace

CompressionReport compressed_eval_lowrank(const TideModel& model,
                                          const std::vector<double>& percents,
                                          const std::vector<int32_t>& tokens, int seq_len,
                                          int jobs) {
    require_memory(model, "compressed_eval_lowrank");
    const int db = model.tide_config().d_block;
    CompressionReport report;
    report.base_ppl = eval_perplexity(model, tokens, seq_len);
    report.points.resize(percents.size());
    auto eval_point = [&](size_t i) {
        const double p = percents[i];
        if (p < 0.0 || p >= 100.0) throw ParamError("compressed_eval_lowrank: percent in [0,100)");
        const int rank = static_cast<int>(
            std::ceil((1.0 - p / 100.0) * static_cast<double>(db)));
        TideModel swapped = model.clone();
        for (MemoryBlockParams& block : swapped.tide().blocks) {
            const LowRankFactors f = lowrank_compress(block.table, rank);
            const Tensor recon = lowrank_reconstruct(f);
            std::copy(recon.data(), recon.data() + recon.size(), block.table.data());
        }
        SweepPoint& point = report.points[i];
        point.percent = p;
        point.rank = rank;
        point.ppl = eval_perplexity(swapped, tokens, seq_len);
        point.delta_abs = point.ppl - report.base_ppl;
        point.delta_pct = 100.0 * point.delta_abs / report.base_ppl;
    };
    if (jobs <= 1 || percents.size() <= 1) {
        for (size_t i = 0; i < percents.size(); ++i) eval_point(i);
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        const size_t workers = std::min<size_t>(static_cast<size_t>(jobs), percents.size());
        for (size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&]() {
                for (size_t i = next.fetch_add(1); i < percents.size(); i = next.fetch_add(1)) {
                    eval_point(i);
                }
            });
        }
        for (std::thread& t : pool) t.join();
    }
    return report;
}

QuantReport compressed_eval_quant(const TideModel& model, const std::vector<int>& bit_widths,
                                  const std::vector<int32_t>& tokens, int seq_len) {
    require_memory(model, "compressed_eval_quant");
    QuantReport report;
    report.base_ppl = eval_perplexity(model, tokens, seq_len);
    for (int bits : bit_widths) {
        TideModel swapped = model.clone();
        for (MemoryBlockParams& block : swapped.tide().blocks) {
            const Tensor deq = dequantize_table(quantize_table(block.table, bits));
            std::copy(deq.data(), deq.data() + deq.size(), block.table.data());
        }
        QuantPoint point;
        point.bits = bits;
        point.ppl = eval_perplexity(swapped, tokens, seq_len);
        point.delta_abs = point.ppl - report.base_ppl;
        point.delta_pct = 100.0 * point.delta_abs / report.base_ppl;
        report.points.push_back(point);
    }
    return report;
}

}  // namespace tide
