#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tide/tensor.hpp"

namespace tide {

/// Synthetic corpus: i.i.d. draws with P(token = v) proportional to
/// (v + 1)^(-exponent), so token id doubles as frequency rank.
struct ZipfSpec {
    int vocab_size = 0;
    double exponent = 1.0;
    uint64_t seed = 0;
    int64_t length = 0;
};

/// Normalized unigram probabilities f_v of the distribution; sums to 1.
std::vector<double> zipf_probabilities(int vocab_size, double exponent);

std::vector<int32_t> zipf_sample_corpus(const ZipfSpec& spec);

/// Draw `count` i.i.d. tokens from an already-built CDF (fresh-stream form
/// of the sampler used by the gradient audits).
class ZipfSampler {
  public:
    ZipfSampler(int vocab_size, double exponent, uint64_t seed);
    int32_t next();
    void fill(std::vector<int32_t>& out, size_t count);
    const std::vector<double>& probabilities() const { return probs_; }

  private:
    std::vector<double> probs_;
    std::vector<double> cdf_;
    std::mt19937_64 rng_;
};

constexpr int kTierRare = 0;
constexpr int kTierMid = 1;
constexpr int kTierCommon = 2;

/// Per-token corpus counts plus equal-cardinality frequency-decile bins over
/// the observed, filter-passing token types.
struct FrequencyBinTable {
    int vocab_size = 0;
    int bin_count = 0;
    std::vector<int64_t> counts;   // per token id
    std::vector<int32_t> ranks;    // ascending-frequency rank among clean types; -1 if unbinned
    std::vector<int32_t> bins;     // decile index; -1 if unbinned
    std::vector<int32_t> filtered; // ids removed by the structural filter
    int64_t clean_types = 0;

    bool binned(int32_t id) const { return bins[static_cast<size_t>(id)] >= 0; }
    int32_t bin_of(int32_t id) const { return bins[static_cast<size_t>(id)]; }
};

FrequencyBinTable count_frequencies(const std::vector<int32_t>& tokens, int vocab_size);

using TokenFilter = std::function<bool(int32_t)>;

/// Assigns b(v) = min(floor(rank(v) * bin_count / clean_types), bin_count - 1)
/// over tokens with count >= 1 that pass the filter; rank ties are broken by
/// ascending token id. Pass a null filter to accept everything.
void build_bins(FrequencyBinTable& table, int bin_count, const TokenFilter& filter = nullptr);

/// Bins 0-2 are rare, 3-6 mid, 7-9 common (decile semantics; bin_count 10).
int bin_tier(int bin);
const char* tier_name(int tier);

/// Token stream files: either plain text (one unsigned decimal per line) or
/// binary little-endian u32 with the 8-byte magic "TIDETOK1".
std::vector<int32_t> ingest_token_stream(const std::string& path, int vocab_size);
void write_token_stream_binary(const std::string& path, const std::vector<int32_t>& tokens);
void write_token_stream_text(const std::string& path, const std::vector<int32_t>& tokens);

}  // namespace tide
