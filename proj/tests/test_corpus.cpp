#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "tide/corpus.hpp"

using namespace tide;

TEST_CASE("zipf probabilities normalize for assorted shapes") {
    for (int v : {2, 17, 1000, 4096}) {
        for (double s : {0.5, 1.0, 1.7}) {
            const auto probs = zipf_probabilities(v, s);
            double sum = 0.0;
            for (double p : probs) sum += p;
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
    }
    CHECK_THROWS_AS(zipf_probabilities(8, 0.0), ParamError);
    CHECK_THROWS_AS(zipf_probabilities(8, -1.0), ParamError);
}

TEST_CASE("zipf sampler near-uniform in the s -> 0 limit") {
    const int v = 50;
    const int64_t n = 200000;
    ZipfSpec spec{v, 1e-9, 42, n};
    const auto tokens = zipf_sample_corpus(spec);
    std::vector<int64_t> counts(v, 0);
    for (int32_t t : tokens) ++counts[static_cast<size_t>(t)];
    const double p = 1.0 / v;
    const double sigma = std::sqrt(static_cast<double>(n) * p * (1.0 - p));
    int within = 0;
    for (int i = 0; i < v; ++i) {
        if (std::abs(static_cast<double>(counts[static_cast<size_t>(i)]) - n * p) <= 3.0 * sigma) {
            ++within;
        }
    }
    CHECK(within >= 48);  // multinomial 3-sigma, allow the rare straggler
}

TEST_CASE("zipf frequency ratio f1/f2 is 2 at s=1") {
    ZipfSpec spec{1000, 1.0, 7, 1000000};
    const auto tokens = zipf_sample_corpus(spec);
    const auto probs = zipf_probabilities(spec.vocab_size, spec.exponent);
    std::vector<int64_t> counts(static_cast<size_t>(spec.vocab_size), 0);
    for (int32_t t : tokens) ++counts[static_cast<size_t>(t)];
    const double n = static_cast<double>(spec.length);
    for (int id : {0, 1}) {
        const double mu = n * probs[static_cast<size_t>(id)];
        const double sigma = std::sqrt(mu * (1.0 - probs[static_cast<size_t>(id)]));
        CHECK(std::abs(static_cast<double>(counts[static_cast<size_t>(id)]) - mu) <= 3 * sigma);
    }
    const double ratio = static_cast<double>(counts[0]) / static_cast<double>(counts[1]);
    const double rel_sigma = std::sqrt(1.0 / (n * probs[0]) + 1.0 / (n * probs[1]));
    CHECK(std::abs(ratio - 2.0) <= 3.0 * 2.0 * rel_sigma);
}

TEST_CASE("zipf sampling is deterministic per seed") {
    ZipfSpec spec{128, 1.0, 99, 5000};
    CHECK(zipf_sample_corpus(spec) == zipf_sample_corpus(spec));
    spec.exponent = -0.5;
    CHECK_THROWS_AS(zipf_sample_corpus(spec), ParamError);
}

TEST_CASE("count_frequencies basics and additivity") {
    const auto empty = count_frequencies({}, 4);
    for (int64_t c : empty.counts) CHECK(c == 0);

    const auto small = count_frequencies({0, 0, 1}, 4);
    CHECK(small.counts[0] == 2);
    CHECK(small.counts[1] == 1);
    CHECK(small.counts[2] == 0);

    ZipfSpec spec{32, 1.0, 3, 4000};
    auto tokens = zipf_sample_corpus(spec);
    std::vector<int32_t> first(tokens.begin(), tokens.begin() + 1500);
    std::vector<int32_t> second(tokens.begin() + 1500, tokens.end());
    const auto whole = count_frequencies(tokens, 32);
    const auto a = count_frequencies(first, 32);
    const auto b = count_frequencies(second, 32);
    int64_t total = 0;
    for (int v = 0; v < 32; ++v) {
        CHECK(whole.counts[static_cast<size_t>(v)] ==
              a.counts[static_cast<size_t>(v)] + b.counts[static_cast<size_t>(v)]);
        total += whole.counts[static_cast<size_t>(v)];
    }
    CHECK(total == static_cast<int64_t>(tokens.size()));

    CHECK_THROWS_AS(count_frequencies({5}, 4), IndexError);
}

TEST_CASE("build_bins assigns one type per bin when counts are distinct") {
    std::vector<int32_t> tokens;
    for (int v = 0; v < 10; ++v) {
        for (int r = 0; r <= v; ++r) tokens.push_back(v);  // count(v) = v + 1
    }
    auto table = count_frequencies(tokens, 10);
    build_bins(table, 10);
    for (int v = 0; v < 10; ++v) CHECK(table.bins[static_cast<size_t>(v)] == v);
}

TEST_CASE("build_bins reproduces the 65,541-type decile layout") {
    const int vocab = 128256;
    FrequencyBinTable table;
    table.vocab_size = vocab;
    table.counts.assign(vocab, 0);
    table.ranks.assign(vocab, -1);
    table.bins.assign(vocab, -1);
    // 65,569 observed types; a structural filter then removes 28 of them.
    for (int v = 0; v < 65569; ++v) table.counts[static_cast<size_t>(v)] = 1 + (v % 977);
    build_bins(table, 10, [](int32_t id) { return id >= 28; });
    CHECK(table.clean_types == 65541);
    CHECK(table.filtered.size() == 28);

    std::vector<int64_t> sizes(10, 0);
    int64_t assigned = 0;
    for (int v = 0; v < vocab; ++v) {
        const int32_t b = table.bins[static_cast<size_t>(v)];
        if (table.counts[static_cast<size_t>(v)] >= 1 && v >= 28 && v < 65569) {
            REQUIRE(b >= 0);
            REQUIRE(b < 10);
            ++sizes[static_cast<size_t>(b)];
            ++assigned;
        } else {
            CHECK(b == -1);
        }
    }
    CHECK(assigned == 65541);
    CHECK(sizes[0] == 6555);
    for (int b = 1; b < 10; ++b) CHECK(sizes[static_cast<size_t>(b)] == 6554);
}

TEST_CASE("bins are monotone in count and balanced") {
    ZipfSpec spec{512, 1.0, 21, 60000};
    auto table = count_frequencies(zipf_sample_corpus(spec), 512);
    build_bins(table, 10);
    int64_t mn = INT64_MAX, mx = 0;
    std::vector<int64_t> sizes(10, 0);
    for (int v = 0; v < 512; ++v) {
        if (table.bins[static_cast<size_t>(v)] >= 0) {
            ++sizes[static_cast<size_t>(table.bins[static_cast<size_t>(v)])];
        }
    }
    for (int64_t s : sizes) {
        mn = std::min(mn, s);
        mx = std::max(mx, s);
    }
    CHECK(mx - mn <= 1);
    for (int u = 0; u < 512; ++u) {
        for (int v = u + 1; v < 512; ++v) {
            if (!table.binned(u) || !table.binned(v)) continue;
            if (table.counts[static_cast<size_t>(u)] < table.counts[static_cast<size_t>(v)]) {
                CHECK(table.bin_of(u) <= table.bin_of(v));
            }
        }
    }
}

TEST_CASE("rank ties break by ascending token id") {
    // four types, all count 1
    auto table = count_frequencies({3, 1, 2, 0}, 4);
    build_bins(table, 2);
    CHECK(table.ranks[0] == 0);
    CHECK(table.ranks[1] == 1);
    CHECK(table.ranks[2] == 2);
    CHECK(table.ranks[3] == 3);
    CHECK(table.bins[0] == 0);
    CHECK(table.bins[1] == 0);
    CHECK(table.bins[2] == 1);
    CHECK(table.bins[3] == 1);
}

TEST_CASE("build_bins rejects more bins than clean types") {
    auto table = count_frequencies({0, 1, 1}, 8);
    CHECK_THROWS_AS(build_bins(table, 3), ParamError);
}

TEST_CASE("bin tiers") {
    CHECK(bin_tier(0) == kTierRare);
    CHECK(bin_tier(2) == kTierRare);
    CHECK(bin_tier(3) == kTierMid);
    CHECK(bin_tier(5) == kTierMid);
    CHECK(bin_tier(6) == kTierMid);
    CHECK(bin_tier(7) == kTierCommon);
    CHECK(bin_tier(9) == kTierCommon);
    CHECK_THROWS_AS(bin_tier(-1), ParamError);
    CHECK_THROWS_AS(bin_tier(10), ParamError);
    CHECK(std::string(tier_name(kTierRare)) == "rare");
    CHECK(std::string(tier_name(kTierMid)) == "mid");
    CHECK(std::string(tier_name(kTierCommon)) == "common");
}

TEST_CASE("token stream files round-trip bit-exactly") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "tide_corpus_test";
    fs::create_directories(dir);
    ZipfSpec spec{300, 1.0, 8, 2000};
    const auto tokens = zipf_sample_corpus(spec);

    const std::string bin_path = (dir / "stream.tok").string();
    write_token_stream_binary(bin_path, tokens);
    CHECK(ingest_token_stream(bin_path, 300) == tokens);

    const std::string txt_path = (dir / "stream.txt").string();
    write_token_stream_text(txt_path, tokens);
    CHECK(ingest_token_stream(txt_path, 300) == tokens);

    // empty file ingests to an empty sequence
    const std::string empty_path = (dir / "empty.tok").string();
    { std::FILE* f = std::fopen(empty_path.c_str(), "wb"); std::fclose(f); }
    CHECK(ingest_token_stream(empty_path, 300).empty());

    // id == vocab_size is rejected with the offending location
    const std::string bad_path = (dir / "bad.tok").string();
    write_token_stream_binary(bad_path, {0, 1, 300});
    try {
        ingest_token_stream(bad_path, 300);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("element 2") != std::string::npos);
    }
    fs::remove_all(dir);
}
