#pragma once

#include <map>
#include <string>
#include <vector>

#include "tide/corpus.hpp"
#include "tide/memory.hpp"
#include "tide/model.hpp"
#include "tide/trainer.hpp"

namespace tide {

/// Experiment configuration: sectioned key = value text with a closed schema.
/// Unknown keys fail fast with their full path; every run can serialize the
/// resolved (post-default) configuration next to its outputs.
class ExperimentConfig {
  public:
    ExperimentConfig();  // schema defaults

    /// Parses and validates a config file. Throws ParamError naming the
    /// offending key or line.
    void apply_file(const std::string& path);
    void set(const std::string& key, const std::string& value);  // validated

    std::string get_string(const std::string& key) const;
    int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    /// All keys with their final values, section-grouped, deterministic order.
    std::string resolved_text() const;

    ZipfSpec corpus_spec() const;
    int corpus_bins() const;
    ModelConfig model_config() const;
    /// tide.k taken from the config unless overridden (>= 0) by the caller.
    TideConfig tide_config(int k_override = -1) const;
    TrainConfig train_config() const;
    std::vector<std::pair<int32_t, int32_t>> diag_pairs() const;
    std::vector<double> compress_percents() const;

  private:
    std::map<std::string, std::string> values_;
};

}  // namespace tide
