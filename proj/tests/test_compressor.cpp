#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "tide/compressor.hpp"
#include "svd_oracle.hpp"
#include "tide/corpus.hpp"

using namespace tide;

namespace {

double frob_error(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("max saving rank: reference value, symmetric case, boundary arithmetic") {
    CHECK(max_saving_rank(128256, 2048) == 2015);
    for (int64_t n : {8, 64, 127, 2048}) CHECK(max_saving_rank(n, n) == n / 2);

    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int64_t> dim(1, 4000);
    for (int trial = 0; trial < 200; ++trial) {
        const int64_t v = dim(rng), db = dim(rng);
        const int64_t r = max_saving_rank(v, db);
        if (r >= 1) CHECK((v + db) * r <= v * db);
        CHECK((v + db) * (r + 1) > v * db);
    }
    CHECK_THROWS_AS(max_saving_rank(0, 8), ParamError);
}

TEST_CASE("full-rank truncation reconstructs exactly; rank-1 tables compress to zero error") {
    std::mt19937_64 rng(2);
    Tensor table = Tensor::randn({24, 10}, rng, 1.0, false);
    const auto full = lowrank_compress(table, 10);
    CHECK(full.recon_error <= 1e-9);
    CHECK(full.tail_error <= 1e-9);

    Tensor outer = Tensor::zeros({16, 6});
    Tensor u = Tensor::randn({16}, rng, 1.0, false);
    Tensor v = Tensor::randn({6}, rng, 1.0, false);
    for (int i = 0; i < 16; ++i) {
        for (int j = 0; j < 6; ++j) outer.data()[i * 6 + j] = u.data()[i] * v.data()[j];
    }
    const auto rank1 = lowrank_compress(outer, 1);
    CHECK(rank1.recon_error <= 1e-9);
    CHECK(frob_error(outer, lowrank_reconstruct(rank1)) <= 1e-9);

    CHECK_THROWS_AS(lowrank_compress(table, 0), ParamError);
    CHECK_THROWS_AS(lowrank_compress(table, 11), ParamError);
}

TEST_CASE("truncation error equals the singular tail from the Gram oracle") {
    std::mt19937_64 rng(3);
    Tensor table = Tensor::randn({64, 16}, rng, 1.0, false);
    const auto oracle = svd_oracle::gram_singular_values(table);
    for (int rank : {1, 4, 8, 12}) {
        const auto f = lowrank_compress(table, rank);
        double tail = 0.0;
        for (size_t j = static_cast<size_t>(rank); j < oracle.size(); ++j) {
            tail += oracle[j] * oracle[j];
        }
        tail = std::sqrt(tail);
        CHECK(std::abs(f.recon_error - tail) <= 1e-8);
        CHECK(std::abs(f.tail_error - tail) <= 1e-8);
    }
}

TEST_CASE("no sampled rank-r factorization beats the truncated SVD") {
    std::mt19937_64 rng(4);
    Tensor table = Tensor::randn({20, 8}, rng, 1.0, false);
    const int rank = 3;
    const auto best = lowrank_compress(table, rank);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor cu = Tensor::randn({20, rank}, rng, 1.0, false);
        Tensor cv = Tensor::randn({rank, 8}, rng, 1.0, false);
        Tape tape(false);
        const double err = frob_error(table, tape.matmul(cu, cv));
        CHECK(err >= best.recon_error - 1e-9);
    }
}

TEST_CASE("quantization: zero rows, step bounds, byte accounting") {
    Tensor table = Tensor::zeros({3, 5});
    table.data()[5] = 0.5;
    table.data()[6] = -1.25;
    table.data()[9] = 1.25;
    for (int bits : {4, 8, 16}) {
        const auto q = quantize_table(table, bits);
        // all-zero row 0: zero codes, zero scale
        CHECK(q.scales[0] == 0.0);
        for (int j = 0; j < 5; ++j) CHECK(q.codes[static_cast<size_t>(j)] == 0);
        const Tensor deq = dequantize_table(q);
        const int32_t qmax = (1 << (bits - 1)) - 1;
        for (int r = 0; r < 3; ++r) {
            double mx = 0.0;
            for (int j = 0; j < 5; ++j) mx = std::max(mx, std::abs(table.data()[r * 5 + j]));
            const double half_step = mx > 0.0 ? 0.5 * mx / qmax : 0.0;
            for (int j = 0; j < 5; ++j) {
                CHECK(std::abs(deq.data()[r * 5 + j] - table.data()[r * 5 + j]) <=
                      half_step + 1e-15);
            }
        }
    }
    std::mt19937_64 rng(5);
    Tensor wide = Tensor::randn({32, 16}, rng, 2.0, false);
    const auto q16 = quantize_table(wide, 16);
    const Tensor d16 = dequantize_table(q16);
    for (int r = 0; r < 32; ++r) {
        double mx = 0.0;
        for (int j = 0; j < 16; ++j) mx = std::max(mx, std::abs(wide.data()[r * 16 + j]));
        for (int j = 0; j < 16; ++j) {
            CHECK(std::abs(d16.data()[r * 16 + j] - wide.data()[r * 16 + j]) <= mx / 32767.0);
        }
    }
    const auto q8 = quantize_table(wide, 8);
    const auto q4 = quantize_table(wide, 4);
    CHECK(q8.code_bytes() * 2 == q16.code_bytes());
    CHECK(q4.code_bytes() * 4 == q16.code_bytes());
    CHECK_THROWS_AS(quantize_table(wide, 5), ParamError);
}

TEST_CASE("zero-percent reduction leaves perplexity unchanged") {
    const int vocab = 64;
    ModelConfig mc;
    mc.vocab_size = vocab;
    mc.d_model = 16;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.d_ff = 32;
    mc.t_max = 64;
    TideModel model(mc, TideConfig{2, 16}, 6);
    ZipfSpec zs{vocab, 1.0, 7, 4000};
    const auto tokens = zipf_sample_corpus(zs);
    const auto report = compressed_eval_lowrank(model, {0.0, 50.0}, tokens, 16);
    REQUIRE(report.points.size() == 2);
    CHECK(report.points[0].rank == 16);
    CHECK(std::abs(report.points[0].delta_abs) / report.base_ppl <= 1e-6);
    CHECK(report.points[1].rank == 8);

    // parallel sweep matches the serial one
    const auto par = compressed_eval_lowrank(model, {0.0, 50.0}, tokens, 16, 2);
    CHECK(par.points[0].ppl == report.points[0].ppl);
    CHECK(par.points[1].ppl == report.points[1].ppl);

    const auto quant = compressed_eval_quant(model, {16, 8, 4}, tokens, 16);
    REQUIRE(quant.points.size() == 3);
    CHECK(std::abs(quant.points[0].delta_pct) <= 0.5);  // 16-bit shifts PPL negligibly
}
