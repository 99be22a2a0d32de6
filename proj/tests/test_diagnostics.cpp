#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "tide/diagnostics.hpp"

using namespace tide;

namespace {

ModelConfig toy_config(int vocab, int d, int layers, int dff) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.d_model = d;
    cfg.n_layers = layers;
    cfg.n_heads = 2;
    cfg.d_ff = dff;
    cfg.t_max = 64;
    return cfg;
}

}  // namespace

TEST_CASE("expected updates reproduce the reference instantiations") {
    // hapax tier: f = 8.3e-9 at a 2e11-position budget
    const auto hapax = expected_updates(8.3e-9, 8, 2048, 2e11 / (8.0 * 2048.0));
    CHECK(hapax.approx == doctest::Approx(1660.0).epsilon(5e-3));
    CHECK(hapax.exact == doctest::Approx(1660.0).epsilon(5e-3));
    CHECK(hapax.approx_rel_error <= 1e-3);

    // common tier: f = 8.3e-3; the linearized count hits 1.66e9 while the
    // exact expectation saturates at tau
    const double tau = 2e11 / (8.0 * 2048.0);
    const auto common = expected_updates(8.3e-3, 8, 2048, tau);
    CHECK(common.approx == doctest::Approx(1.66e9).epsilon(5e-3));
    CHECK(common.exact == doctest::Approx(tau).epsilon(1e-9));

    const auto certain = expected_updates(1.0, 4, 4, 1000.0);
    CHECK(certain.exact == 1000.0);

    CHECK_THROWS_AS(expected_updates(0.0, 8, 8, 10.0), ParamError);
    CHECK_THROWS_AS(expected_updates(1.1, 8, 8, 10.0), ParamError);
    CHECK_THROWS_AS(expected_updates(0.5, 0, 8, 10.0), ParamError);
}

TEST_CASE("gradient ratio bound reproduces the appendix constants") {
    const auto r = grad_ratio_bound(8.3e-9, 8.3e-3, 8, 2048, 10.0, 1.0);
    CHECK(std::abs(r.eps_over_c / 1e-6 - 1.0) <= 1e-12);
    CHECK(r.kappa == 1.0);  // 1 - e^{-136} is 1 in f64
    CHECK(std::llround(8.3e-3 * 8 * 2048) == 136);
    CHECK(r.one_minus_kappa < 1e-55);
    CHECK(r.one_minus_kappa > 0.0);
    CHECK(r.bound == doctest::Approx(8.3e-9 * 16384.0 * 10.0).epsilon(1e-12));

    // symmetric degenerate case eps == c
    const auto sym = grad_ratio_bound(8.3e-3, 8.3e-3, 8, 2048, 1.0, 1.0);
    CHECK(sym.bound == doctest::Approx(8.3e-3 * 16384.0 / sym.kappa).epsilon(1e-12));

    CHECK_THROWS_AS(grad_ratio_bound(0.5, 0.1, 8, 8, 1.0, 1.0), ParamError);
    CHECK_THROWS_AS(grad_ratio_bound(1e-9, 1e-3, 8, 8, 0.0, 1.0), ParamError);
}

TEST_CASE("gradient audit: occurrence counts match the closed form on a fresh stream") {
    const int vocab = 64;
    ModelConfig mc = toy_config(vocab, 8, 1, 16);
    TideModel model(mc, TideConfig{0, 0}, 5);
    TrainConfig tc;
    tc.batch = 4;
    tc.seq_len = 16;
    tc.steps = 600;
    tc.warmup_iters = 10;
    tc.max_lr = 1e-3;
    tc.seed = 6;
    ZipfSpec zs{vocab, 1.0, 7, 4000};
    Trainer trainer(model, tc, zipf_sample_corpus(zs));

    ZipfSampler stream(vocab, 1.0, 77);
    auto next_batch = [&]() {
        TokenBatch b;
        b.batch = 4;
        b.seq = 16;
        stream.fill(b.ids, 4 * 16);
        stream.fill(b.targets, 4 * 16);
        return b;
    };
    const GradAudit audit = run_grad_audit(trainer, 600, next_batch);
    CHECK(audit.steps == 600);
    const auto checks = occurrence_vs_formula(audit, stream.probabilities(), 4, 16);
    CHECK(fraction_within_3sigma(checks) >= 0.95);
    CHECK(audit.g2_max >= audit.g2_min);
    CHECK(audit.g2_max > 0.0);
    // accumulated norm nonzero exactly for tokens that occurred
    for (int v = 0; v < vocab; ++v) {
        if (audit.occurrences[static_cast<size_t>(v)] == 0) {
            CHECK(audit.primary_sq_norm[static_cast<size_t>(v)] == 0.0);
        } else {
            CHECK(audit.primary_sq_norm[static_cast<size_t>(v)] > 0.0);
        }
    }
}

TEST_CASE("tokens outside the sampled range never accumulate gradient") {
    const int vocab = 70;  // sampler covers only [0, 64)
    ModelConfig mc = toy_config(vocab, 8, 1, 16);
    TideModel model(mc, TideConfig{2, 8}, 15);
    TrainConfig tc;
    tc.batch = 2;
    tc.seq_len = 8;
    tc.steps = 100;
    tc.warmup_iters = 5;
    tc.seed = 16;
    ZipfSpec zs{64, 1.0, 17, 2000};
    Trainer trainer(model, tc, zipf_sample_corpus(zs));
    const GradAudit audit = run_grad_audit(trainer, 100);
    for (int v = 64; v < 70; ++v) {
        CHECK(audit.occurrences[static_cast<size_t>(v)] == 0);
        CHECK(audit.primary_sq_norm[static_cast<size_t>(v)] == 0.0);
        for (int k = 0; k < 2; ++k) {
            CHECK(audit.block_sq_norm[static_cast<size_t>(k)][static_cast<size_t>(v)] == 0.0);
        }
    }
}

TEST_CASE("k-pathway co-firing: every occurrence grads all K tables") {
    const int vocab = 48;
    ModelConfig mc = toy_config(vocab, 8, 2, 16);
    TideModel model(mc, TideConfig{3, 8}, 25);
    std::mt19937_64 rng(26);
    for (Tensor& router : model.tide().routers) {  // finite random logits
        Tensor r = Tensor::randn(router.shape(), rng, 0.2, false);
        std::copy(r.data(), r.data() + r.size(), router.data());
    }
    TrainConfig tc;
    tc.batch = 2;
    tc.seq_len = 12;
    tc.steps = 300;
    tc.warmup_iters = 10;
    tc.seed = 27;
    ZipfSpec zs{vocab, 1.0, 28, 3000};
    Trainer trainer(model, tc, zipf_sample_corpus(zs));
    const GradAudit audit = run_grad_audit(trainer, 300);
    for (int v = 0; v < vocab; ++v) {
        CHECK(audit.cofired[static_cast<size_t>(v)] == audit.occurrences[static_cast<size_t>(v)]);
    }
}

TEST_CASE("collapse scan: identity pairs and constructed collapses") {
    const int vocab = 32;
    ModelConfig mc = toy_config(vocab, 8, 2, 16);
    TideModel model(mc, TideConfig{2, 8}, 35);
    // ids 3 and 9 get bitwise-identical embedding rows: collapsed at layer 0
    for (int j = 0; j < 8; ++j) {
        model.base().embedding.data()[9 * 8 + j] = model.base().embedding.data()[3 * 8 + j];
    }
    const auto templates = make_templates(12, 6, vocab, 36);
    const std::vector<std::pair<int32_t, int32_t>> pairs = {{5, 5}, {3, 9}, {1, 2}};
    const CollapseReport report = collapse_scan(model, templates, pairs, 1e-9);

    // (v, v): zero distance at every layer
    for (double dist : report.pairs[0].layer_dist) CHECK(dist == 0.0);
    for (uint8_t flag : report.pairs[0].collapsed) CHECK(flag == 1);
    // identical rows: distance 0 at layer 0; the memory pathway then
    // re-separates the pair at depth
    CHECK(report.pairs[1].layer_dist[0] == 0.0);
    CHECK(report.pairs[1].collapsed[0] == 1);
    CHECK(report.pairs[1].layer_dist[2] > 1e-3);
    // distinct random rows: separated at layer 0
    CHECK(report.pairs[2].layer_dist[0] > 1e-3);
    // memory path distances are reported per block
    REQUIRE(report.pairs[1].mem_dist.size() == 2);
    CHECK(report.pairs[1].mem_dist[0] > 0.1);  // memory separates what context collapsed

    // without the memory pathway the constructed collapse persists at depth
    TideModel bare(mc, TideConfig{0, 0}, 35);
    for (int j = 0; j < 8; ++j) {
        bare.base().embedding.data()[9 * 8 + j] = bare.base().embedding.data()[3 * 8 + j];
    }
    const CollapseReport flat = collapse_scan(bare, templates, {{3, 9}}, 1e-9);
    for (double dist : flat.pairs[0].layer_dist) CHECK(dist == 0.0);

    // Lipschitz consistency: measured FFN gaps below the certified bound
    for (const PairCollapse& pc : report.pairs) {
        for (int l = 0; l < 2; ++l) {
            CHECK(pc.ffn_out_gap[static_cast<size_t>(l)] <=
                  report.lffn[static_cast<size_t>(l)] * pc.ffn_in_gap[static_cast<size_t>(l)] +
                      1e-12);
        }
    }
}

TEST_CASE("collapse scan mirrors starved-pair geometry") {
    // emulate trained geometry: rare rows are tiny and noisy, common rows are
    // well separated
    const int vocab = 32;
    ModelConfig mc = toy_config(vocab, 8, 2, 16);
    TideModel model(mc, TideConfig{0, 0}, 45);
    std::mt19937_64 rng(46);
    std::normal_distribution<double> noise(0.0, 1e-4);
    for (int j = 0; j < 8; ++j) {
        model.base().embedding.data()[20 * 8 + j] = noise(rng);  // rare pair: noise-dominated
        model.base().embedding.data()[21 * 8 + j] = noise(rng);
        model.base().embedding.data()[22 * 8 + j] = (j == 0) ? 1.0 : 0.0;  // common pair: separated
        model.base().embedding.data()[23 * 8 + j] = (j == 1) ? 1.0 : 0.0;
    }
    const auto templates = make_templates(24, 6, vocab, 47);
    const CollapseReport report = collapse_scan(model, templates, {{20, 21}, {22, 23}}, 1e-3);
    const int mid = 1;
    CHECK(report.pairs[0].layer_dist[mid] < report.pairs[1].layer_dist[mid]);
}

TEST_CASE("collapse scan rejects malformed templates") {
    ModelConfig mc = toy_config(16, 8, 1, 16);
    TideModel model(mc, TideConfig{0, 0}, 55);
    ProbeTemplate bad;
    bad.tokens = {1, 2, 3};
    bad.slot = 3;
    CHECK_THROWS_AS(collapse_scan(model, {bad}, {{0, 1}}, 1e-3), ParamError);
}

TEST_CASE("ffn lower bound check: zero gap, sound bound, vacuous branch") {
    ModelConfig mc = toy_config(16, 8, 1, 16);
    TideModel model(mc, TideConfig{0, 0}, 65);
    std::mt19937_64 rng(66);
    Tensor h = Tensor::randn({8}, rng, 1.0, false);
    std::span<const double> hs(h.data(), 8);

    const auto same = ffn_lower_bound_check(model, 0, hs, hs, 3.0);
    CHECK(same.delta == 0.0);
    CHECK(same.ffn_gap == 0.0);
    CHECK(same.floor_value == 1.5);  // C / 2
    CHECK_FALSE(same.vacuous);

    Tensor h2 = Tensor::randn({8}, rng, 1.0, false);
    std::span<const double> hs2(h2.data(), 8);
    const auto off = ffn_lower_bound_check(model, 0, hs, hs2, 1e-12);
    CHECK(off.ffn_gap <= off.lip_rhs + 1e-12);  // certified upper bound holds
    CHECK(off.vacuous);                          // tiny C is below L * delta
    CHECK(off.floor_value == 0.0);

    std::mt19937_64 rng2(67);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor a = Tensor::randn({8}, rng2, 2.0, false);
        Tensor b = Tensor::randn({8}, rng2, 2.0, false);
        const auto rep = ffn_lower_bound_check(model, 0, std::span<const double>(a.data(), 8),
                                               std::span<const double>(b.data(), 8), 1.0);
        CHECK(rep.ffn_gap <= rep.lip_rhs + 1e-12);
    }
}

TEST_CASE("memory separation: measurement, antipodal rows, constructive mode") {
    std::mt19937_64 rng(75);
    MemoryBlockParams block;
    block.table = Tensor::randn({16, 8}, rng, 0.02, false);
    block.gain = Tensor::full({8}, 1.0);
    const double eps = 1e-6;

    // identical rows: zero separation
    for (int j = 0; j < 8; ++j) block.table.data()[4 * 8 + j] = block.table.data()[7 * 8 + j];
    CHECK(measure_separation(block, 4, 7, eps) == 0.0);

    // antipodal rows: separation 2 sqrt(d_b) against direct evaluation
    for (int j = 0; j < 8; ++j) {
        block.table.data()[1 * 8 + j] = (j == 2) ? 5.0 : 0.0;
        block.table.data()[2 * 8 + j] = (j == 2) ? -5.0 : 0.0;
    }
    const auto mu = memory_block_output(block, 1, eps);
    const auto mv = memory_block_output(block, 2, eps);
    double direct = 0.0;
    for (int j = 0; j < 8; ++j) direct += (mu[j] - mv[j]) * (mu[j] - mv[j]);
    direct = std::sqrt(direct);
    CHECK(measure_separation(block, 1, 2, eps) == doctest::Approx(direct).epsilon(1e-15));
    CHECK(direct == doctest::Approx(2.0 * std::sqrt(8.0)).epsilon(1e-5));

    // constructive mode across the achievable range
    const double cmax = 2.0 * std::sqrt(8.0);
    for (double c : {1e-6, 0.25, 1.0, 2.0, 5.0, cmax}) {
        set_separation(block, 3, 9, c, eps);
        CHECK(std::abs(measure_separation(block, 3, 9, eps) - c) <= 1e-9);
    }
    CHECK_THROWS_AS(set_separation(block, 3, 9, cmax * 1.001, eps), ParamError);
    CHECK_THROWS_AS(set_separation(block, 3, 3, 1.0, eps), ParamError);
}

TEST_CASE("layer drop ablation has one row per layer and a no-op drop is free") {
    const int vocab = 64;
    ModelConfig mc = toy_config(vocab, 8, 3, 16);
    TideModel model(mc, TideConfig{2, 8}, 85);
    // zero gains null the memory outputs, so every drop is a no-op
    for (MemoryBlockParams& block : model.tide().blocks) {
        std::fill(block.gain.values().begin(), block.gain.values().end(), 0.0);
    }
    ZipfSpec zs{vocab, 1.0, 86, 4000};
    const auto tokens = zipf_sample_corpus(zs);
    const auto report = layer_drop_ablation(model, tokens, 16);
    REQUIRE(report.dropped_ppl.size() == 3);
    REQUIRE(report.delta_abs.size() == 3);
    for (double dp : report.dropped_ppl) CHECK(std::abs(dp - report.intact_ppl) <= 1e-12);

    // parallel evaluation returns identical numbers
    const auto parallel = layer_drop_ablation(model, tokens, 16, 3);
    for (size_t l = 0; l < 3; ++l) CHECK(parallel.dropped_ppl[l] == report.dropped_ppl[l]);
}

TEST_CASE("router stats: uniform at zero weights, rows sum to one") {
    const int vocab = 64;
    ModelConfig mc = toy_config(vocab, 8, 2, 16);
    TideModel model(mc, TideConfig{3, 8}, 95);  // routers start at zero
    ZipfSpec zs{vocab, 1.0, 96, 5000};
    const auto tokens = zipf_sample_corpus(zs);
    auto bins = count_frequencies(tokens, vocab);
    build_bins(bins, 10);
    const auto stats = router_stats(model, tokens, 16, bins);
    REQUIRE(stats.mean_alpha.size() == 2);
    for (const auto& layer : stats.mean_alpha) {
        for (size_t row = 0; row < layer.size(); ++row) {
            if (stats.bin_positions[row] == 0) continue;
            double sum = 0.0;
            for (double a : layer[row]) {
                CHECK(a == doctest::Approx(0.25).epsilon(1e-9));
                sum += a;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("embedding cosine distances") {
    std::mt19937_64 rng(105);
    Tensor a = Tensor::randn({32, 8}, rng, 1.0, false);
    Tensor b = Tensor::randn({32, 8}, rng, 1.0, false);
    const auto self = embedding_cosine_distance(a, a);
    CHECK(std::abs(self.distance) <= 1e-12);
    CHECK(self.skipped == 0);

    Tensor neg = a.clone();
    for (int64_t i = 0; i < neg.size(); ++i) neg.data()[i] = -neg.data()[i];
    CHECK(embedding_cosine_distance(a, neg).distance == doctest::Approx(2.0).epsilon(1e-12));

    const auto matrix = embedding_cosine_matrix({a, b, neg});
    for (size_t i = 0; i < 3; ++i) {
        for (size_t j = 0; j < 3; ++j) {
            CHECK(std::abs(matrix[i][j] - matrix[j][i]) <= 1e-12);
        }
    }

    // zero rows are skipped and counted
    Tensor holed = a.clone();
    for (int j = 0; j < 8; ++j) holed.data()[5 * 8 + j] = 0.0;
    CHECK(embedding_cosine_distance(holed, a).skipped == 1);

    Tensor zero = Tensor::zeros({32, 8});
    CHECK_THROWS_AS(embedding_cosine_distance(zero, a), ParamError);
}

TEST_CASE("knn jaccard: self-agreement, brute-force oracle, random-table expectation") {
    std::mt19937_64 rng(115);
    const int vocab = 256, d = 16, k_nn = 10;
    Tensor e = Tensor::randn({vocab, d}, rng, 1.0, false);
    Tensor same = e.clone();
    std::vector<int32_t> queries;
    std::uniform_int_distribution<int32_t> pick(0, vocab - 1);
    std::set<int32_t> seen;
    while (queries.size() < 40) {
        const int32_t q = pick(rng);
        if (seen.insert(q).second) queries.push_back(q);
    }
    const auto self_report = knn_jaccard({e, same}, queries, k_nn);
    for (double j : self_report.jaccard[0]) CHECK(j == 1.0);

    // independent brute-force scan must reproduce the lists bitwise
    for (size_t qi = 0; qi < queries.size(); ++qi) {
        const int32_t q = queries[qi];
        std::vector<std::pair<double, int32_t>> scored;
        for (int32_t r = 0; r < vocab; ++r) {
            if (r == q) continue;
            double dot = 0.0, nq = 0.0, nr = 0.0;
            for (int j = 0; j < d; ++j) {
                dot += e.data()[q * d + j] * e.data()[r * d + j];
                nq += e.data()[q * d + j] * e.data()[q * d + j];
                nr += e.data()[r * d + j] * e.data()[r * d + j];
            }
            scored.emplace_back(dot / (std::sqrt(nq) * std::sqrt(nr)), r);
        }
        std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
            if (x.first != y.first) return x.first > y.first;
            return x.second < y.second;
        });
        for (int i = 0; i < k_nn; ++i) {
            CHECK(self_report.neighbors[0][qi][static_cast<size_t>(i)] ==
                  scored[static_cast<size_t>(i)].second);
        }
    }

    // orthogonal random tables: mean Jaccard near the hypergeometric value
    const int big_v = 2048;
    Tensor r1 = Tensor::randn({big_v, 24}, rng, 1.0, false);
    Tensor r2 = Tensor::randn({big_v, 24}, rng, 1.0, false);
    std::vector<int32_t> qs;
    for (int i = 0; i < 200; ++i) qs.push_back(i * 10);
    const auto rand_report = knn_jaccard({r1, r2}, qs, k_nn);
    // E[J] = sum_i P(|I| = i) * i / (2k - i) with |I| hypergeometric
    double ej = 0.0, ej2 = 0.0;
    const double n_pool = big_v - 1;
    for (int i = 0; i <= k_nn; ++i) {
        auto log_choose = [](double n, double k) {
            return std::lgamma(n + 1) - std::lgamma(k + 1) - std::lgamma(n - k + 1);
        };
        const double logp = log_choose(k_nn, i) + log_choose(n_pool - k_nn, k_nn - i) -
                            log_choose(n_pool, k_nn);
        const double p = std::exp(logp);
        const double j = static_cast<double>(i) / static_cast<double>(2 * k_nn - i);
        ej += p * j;
        ej2 += p * j * j;
    }
    double mean = 0.0;
    for (double j : rand_report.jaccard[0]) mean += j;
    mean /= static_cast<double>(qs.size());
    const double se = std::sqrt((ej2 - ej * ej) / static_cast<double>(qs.size()));
    CHECK(std::abs(mean - ej) <= 4.0 * se + 1e-12);

    CHECK_THROWS_AS(knn_jaccard({e}, std::vector<int32_t>{300}, k_nn), IndexError);
    CHECK_THROWS_AS(knn_jaccard({e}, queries, vocab), ParamError);
}
