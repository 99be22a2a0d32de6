#include "tide/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

namespace tide {

std::vector<double> zipf_probabilities(int vocab_size, double exponent) {
    if (vocab_size < 1) throw ParamError("zipf: vocab_size must be >= 1");
    if (exponent <= 0.0) throw ParamError("zipf: exponent must be positive");
    std::vector<double> probs(static_cast<size_t>(vocab_size));
    double z = 0.0;
    for (int v = 0; v < vocab_size; ++v) {
        probs[static_cast<size_t>(v)] = std::pow(static_cast<double>(v + 1), -exponent);
        z += probs[static_cast<size_t>(v)];
    }
    for (double& p : probs) p /= z;
    return probs;
}

ZipfSampler::ZipfSampler(int vocab_size, double exponent, uint64_t seed)
    : probs_(zipf_probabilities(vocab_size, exponent)), rng_(seed) {
    cdf_.resize(probs_.size());
    double acc = 0.0;
    for (size_t i = 0; i < probs_.size(); ++i) {
        acc += probs_[i];
        cdf_[i] = acc;
    }
    cdf_.back() = 1.0;
}

int32_t ZipfSampler::next() {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double u = uni(rng_);
    const auto it = std::lower_bound(cdf_.begin(), cdf_.end(), u);
    return static_cast<int32_t>(it - cdf_.begin());
}

void ZipfSampler::fill(std::vector<int32_t>& out, size_t count) {
    out.resize(count);
    for (size_t i = 0; i < count; ++i) out[i] = next();
}

std::vector<int32_t> zipf_sample_corpus(const ZipfSpec& spec) {
    if (spec.vocab_size < 2) throw ParamError("zipf_sample_corpus: vocab_size must be >= 2");
    if (spec.length < 1) throw ParamError("zipf_sample_corpus: length must be >= 1");
    ZipfSampler sampler(spec.vocab_size, spec.exponent, spec.seed);
    std::vector<int32_t> tokens;
    sampler.fill(tokens, static_cast<size_t>(spec.length));
    return tokens;
}

FrequencyBinTable count_frequencies(const std::vector<int32_t>& tokens, int vocab_size) {
    if (vocab_size < 1) throw ParamError("count_frequencies: vocab_size must be >= 1");
    FrequencyBinTable table;
    table.vocab_size = vocab_size;
    table.counts.assign(static_cast<size_t>(vocab_size), 0);
    table.ranks.assign(static_cast<size_t>(vocab_size), -1);
    table.bins.assign(static_cast<size_t>(vocab_size), -1);
    for (size_t i = 0; i < tokens.size(); ++i) {
        const int32_t t = tokens[i];
        if (t < 0 || t >= vocab_size) {
            throw IndexError("count_frequencies: token " + std::to_string(t) + " at offset " +
                             std::to_string(i) + " outside vocabulary of " +
                             std::to_string(vocab_size));
        }
        ++table.counts[static_cast<size_t>(t)];
    }
    return table;
}

void build_bins(FrequencyBinTable& table, int bin_count, const TokenFilter& filter) {
    if (bin_count < 1) throw ParamError("build_bins: bin_count must be >= 1");
    table.bin_count = bin_count;
    table.filtered.clear();
    std::fill(table.ranks.begin(), table.ranks.end(), -1);
    std::fill(table.bins.begin(), table.bins.end(), -1);

    std::vector<int32_t> clean;
    for (int32_t v = 0; v < table.vocab_size; ++v) {
        if (table.counts[static_cast<size_t>(v)] < 1) continue;
        if (filter && !filter(v)) {
            table.filtered.push_back(v);
            continue;
        }
        clean.push_back(v);
    }
    table.clean_types = static_cast<int64_t>(clean.size());
    if (static_cast<int64_t>(bin_count) > table.clean_types) {
        throw ParamError("build_bins: bin_count " + std::to_string(bin_count) +
                         " exceeds clean type count " + std::to_string(table.clean_types));
    }
    // ascending frequency, ties by ascending token id
    std::stable_sort(clean.begin(), clean.end(), [&](int32_t a, int32_t b) {
        const int64_t ca = table.counts[static_cast<size_t>(a)];
        const int64_t cb = table.counts[static_cast<size_t>(b)];
        if (ca != cb) return ca < cb;
        return a < b;
    });
    for (size_t r = 0; r < clean.size(); ++r) {
        const int32_t v = clean[r];
        table.ranks[static_cast<size_t>(v)] = static_cast<int32_t>(r);
        const int64_t b = std::min<int64_t>(
            static_cast<int64_t>(r) * bin_count / table.clean_types, bin_count - 1);
        table.bins[static_cast<size_t>(v)] = static_cast<int32_t>(b);
    }
}

int bin_tier(int bin) {
    if (bin < 0 || bin >= 10) {
        throw ParamError("bin_tier: bin " + std::to_string(bin) + " outside [0,10)");
    }
    if (bin <= 2) return kTierRare;
    if (bin <= 6) return kTierMid;
    return kTierCommon;
}

const char* tier_name(int tier) {
    switch (tier) {
        case kTierRare: return "rare";
        case kTierMid: return "mid";
        case kTierCommon: return "common";
        default: throw ParamError("tier_name: unknown tier " + std::to_string(tier));
    }
}

namespace {

constexpr char kTokenMagic[8] = {'T', 'I', 'D', 'E', 'T', 'O', 'K', '1'};

}  // namespace

std::vector<int32_t> ingest_token_stream(const std::string& path, int vocab_size) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("ingest_token_stream: cannot open " + path);
    char magic[8] = {};
    in.read(magic, 8);
    const std::streamsize got = in.gcount();
    std::vector<int32_t> tokens;
    if (got == 8 && std::memcmp(magic, kTokenMagic, 8) == 0) {
        // binary: little-endian u32 payload
        std::vector<unsigned char> buf(1 << 16);
        int64_t offset = 0;
        while (in) {
            in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
            const std::streamsize n = in.gcount();
            if (n % 4 != 0) {
                throw IoError("ingest_token_stream: truncated binary payload in " + path);
            }
            for (std::streamsize i = 0; i < n; i += 4) {
                const uint32_t raw = static_cast<uint32_t>(buf[static_cast<size_t>(i)]) |
                                     (static_cast<uint32_t>(buf[static_cast<size_t>(i + 1)]) << 8) |
                                     (static_cast<uint32_t>(buf[static_cast<size_t>(i + 2)]) << 16) |
                                     (static_cast<uint32_t>(buf[static_cast<size_t>(i + 3)]) << 24);
                if (raw >= static_cast<uint32_t>(vocab_size)) {
                    throw IoError("ingest_token_stream: id " + std::to_string(raw) +
                                  " at element " + std::to_string(offset) +
                                  " outside vocabulary of " + std::to_string(vocab_size));
                }
                tokens.push_back(static_cast<int32_t>(raw));
                ++offset;
            }
        }
        return tokens;
    }
    // text: one unsigned decimal per line
    in.clear();
    in.seekg(0);
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        uint64_t value = 0;
        size_t pos = 0;
        try {
            value = std::stoull(line, &pos);
        } catch (const std::exception&) {
            throw IoError("ingest_token_stream: malformed integer at line " +
                          std::to_string(line_no) + " of " + path);
        }
        while (pos < line.size() && (line[pos] == ' ' || line[pos] == '\r')) ++pos;
        if (pos != line.size()) {
            throw IoError("ingest_token_stream: trailing characters at line " +
                          std::to_string(line_no) + " of " + path);
        }
        if (value >= static_cast<uint64_t>(vocab_size)) {
            throw IoError("ingest_token_stream: id " + std::to_string(value) + " at line " +
                          std::to_string(line_no) + " outside vocabulary of " +
                          std::to_string(vocab_size));
        }
        tokens.push_back(static_cast<int32_t>(value));
    }
    return tokens;
}

void write_token_stream_binary(const std::string& path, const std::vector<int32_t>& tokens) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("write_token_stream_binary: cannot open " + path);
    out.write(kTokenMagic, 8);
    std::vector<unsigned char> buf;
    buf.reserve(tokens.size() * 4);
    for (int32_t t : tokens) {
        const uint32_t raw = static_cast<uint32_t>(t);
        buf.push_back(static_cast<unsigned char>(raw & 0xff));
        buf.push_back(static_cast<unsigned char>((raw >> 8) & 0xff));
        buf.push_back(static_cast<unsigned char>((raw >> 16) & 0xff));
        buf.push_back(static_cast<unsigned char>((raw >> 24) & 0xff));
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write_token_stream_binary: write failed for " + path);
}

void write_token_stream_text(const std::string& path, const std::vector<int32_t>& tokens) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_token_stream_text: cannot open " + path);
    for (int32_t t : tokens) out << t << "\n";
    if (!out) throw IoError("write_token_stream_text: write failed for " + path);
}

}  // namespace tide
