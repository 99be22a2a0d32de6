#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tide/corpus.hpp"
#include "tide/model.hpp"

namespace tide {

struct TrainConfig {
    int batch = 8;
    int seq_len = 128;
    int64_t steps = 2000;
    int64_t warmup_iters = 200;
    double warmup_init_lr = 1e-6;
    double max_lr = 1e-4;
    double min_lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.1;
    double adam_eps = 1e-8;
    double z_coeff = 1e-6;
    double clip_norm = 1.0;
    uint64_t seed = 0;
    int64_t checkpoint_every = 0;  // 0 disables periodic checkpoints
    double val_fraction = 0.05;

    void validate() const;
};

/// Linear warmup from warmup_init_lr to max_lr over warmup_iters, then cosine
/// decay reaching min_lr exactly at step == steps.
double lr_schedule(int64_t step, const TrainConfig& cfg);

/// Adam with decoupled weight decay: decaying parameters are multiplied by
/// (1 - lr * wd) before the bias-corrected moment update. Norm gains are
/// registered with decay off.
class AdamOptimizer {
  public:
    AdamOptimizer(std::vector<NamedParam> params, const TrainConfig& cfg);

    void step(double lr);
    int64_t steps_taken() const { return t_; }

    /// Global L2 norm over all parameter gradients.
    double grad_norm() const;
    /// Scales gradients so the global norm is at most clip; returns the
    /// pre-clip norm.
    double clip_gradients(double clip);

    const std::vector<NamedParam>& params() const { return params_; }

    void save_state(const std::string& path, int64_t next_step,
                    const std::string& rng_state) const;
    /// Returns (next_step, rng_state).
    std::pair<int64_t, std::string> load_state(const std::string& path);

  private:
    std::vector<NamedParam> params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_, beta2_, eps_, wd_;
    int64_t t_ = 0;
};

struct StepMetrics {
    int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
};

struct TrainStepInfo {
    int64_t step;
    const TokenBatch& batch;
    const TideModel& model;  // gradients populated, not yet clipped or applied
    double loss;
};
using StepObserver = std::function<void(const TrainStepInfo&)>;

/// Training loop over a fixed token stream: the leading (1 - val_fraction) of
/// the corpus is sampled for batches, the tail is held out for evaluation.
class Trainer {
  public:
    Trainer(TideModel& model, const TrainConfig& cfg, std::vector<int32_t> corpus);

    /// Samples the next batch, runs forward/backward/update. Aborts with
    /// NumericError (after dumping context into the message) on a non-finite
    /// loss.
    StepMetrics run_step(const StepObserver& observer = nullptr);
    /// Runs a caller-supplied batch through the same step machinery.
    StepMetrics step_on_batch(const TokenBatch& batch, const StepObserver& observer = nullptr);

    /// Runs until cfg.steps, appending metrics rows.
    std::vector<StepMetrics> run(const StepObserver& observer = nullptr);

    int64_t current_step() const { return next_step_; }
    TideModel& model() const { return model_; }
    const TrainConfig& config() const { return cfg_; }
    const std::vector<int32_t>& train_tokens() const { return train_; }
    const std::vector<int32_t>& val_tokens() const { return val_; }
    TokenBatch sample_batch();

    /// Model checkpoint plus optimizer/RNG sidecar (path + ".state").
    void save(const std::string& checkpoint_path) const;
    void restore_state(const std::string& state_path);

  private:
    TideModel& model_;
    TrainConfig cfg_;
    std::vector<int32_t> train_, val_;
    AdamOptimizer optimizer_;
    std::mt19937_64 sample_rng_;
    int64_t next_step_ = 0;
};

struct BinLossReport {
    int bin_count = 0;
    std::vector<double> bin_mean;
    std::vector<int64_t> bin_tokens;
    double tier_mean[3] = {0, 0, 0};
    int64_t tier_tokens[3] = {0, 0, 0};
    double unbinned_mean = 0.0;
    int64_t unbinned_tokens = 0;
    double global_mean = 0.0;
    int64_t total_tokens = 0;
};

/// Per-target-token cross-entropy bucketed by the target's frequency bin.
/// Targets outside the binned set land in the unbinned bucket.
BinLossReport eval_per_bin(const TideModel& model, const std::vector<int32_t>& tokens,
                           int seq_len, const FrequencyBinTable& bins);

/// exp(mean per-token cross-entropy) over non-overlapping windows.
double eval_perplexity(const TideModel& model, const std::vector<int32_t>& tokens, int seq_len,
                       const ForwardOptions& opt = {});

/// Walks non-overlapping windows and hands each (window-local logits, batch)
/// to the callback. Shared by the evaluators and the router diagnostics.
void eval_walk(const TideModel& model, const std::vector<int32_t>& tokens, int seq_len,
               const ForwardOptions& opt,
               const std::function<void(const ForwardTrace&, const TokenBatch&)>& visit);

}  // namespace tide
