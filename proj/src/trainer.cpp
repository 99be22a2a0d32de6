#include "tide/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "tide/checkpoint.hpp"

namespace tide {

void TrainConfig::validate() const {
    if (batch < 1 || seq_len < 1 || steps < 1) {
        throw ParamError("train config: batch, seq_len and steps must be positive");
    }
    if (warmup_iters < 0 || warmup_iters > steps) {
        throw ParamError("train config: warmup_iters must lie in [0, steps]");
    }
    if (min_lr > max_lr) throw ParamError("train config: min_lr must not exceed max_lr");
    if (val_fraction < 0.0 || val_fraction >= 1.0) {
        throw ParamError("train config: val_fraction must lie in [0, 1)");
    }
}

double lr_schedule(int64_t step, const TrainConfig& cfg) {
    if (step < 0) throw ParamError("lr_schedule: negative step");
    if (step < cfg.warmup_iters) {
        const double f = static_cast<double>(step) / static_cast<double>(cfg.warmup_iters);
        return cfg.warmup_init_lr + f * (cfg.max_lr - cfg.warmup_init_lr);
    }
    if (step >= cfg.steps) return cfg.min_lr;
    const double span = static_cast<double>(cfg.steps - cfg.warmup_iters);
    const double f = span > 0.0 ? static_cast<double>(step - cfg.warmup_iters) / span : 1.0;
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * f));
}

AdamOptimizer::AdamOptimizer(std::vector<NamedParam> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps),
      wd_(cfg.weight_decay) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(static_cast<size_t>(params_[i].tensor.size()), 0.0);
        v_[i].assign(static_cast<size_t>(params_[i].tensor.size()), 0.0);
    }
}

double AdamOptimizer::grad_norm() const {
    double total = 0.0;
    for (const NamedParam& p : params_) {
        const double* g = p.tensor.grad();
        for (int64_t i = 0; i < p.tensor.size(); ++i) total += g[i] * g[i];
    }
    return std::sqrt(total);
}

double AdamOptimizer::clip_gradients(double clip) {
    const double norm = grad_norm();
    if (clip > 0.0 && norm > clip) {
        const double s = clip / norm;
        for (const NamedParam& p : params_) {
            double* g = p.tensor.grad();
            for (int64_t i = 0; i < p.tensor.size(); ++i) g[i] *= s;
        }
    }
    return norm;
}

void AdamOptimizer::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t s = 0; s < params_.size(); ++s) {
        NamedParam& p = params_[s];
        double* w = p.tensor.data();
        const double* g = p.tensor.grad();
        double* m = m_[s].data();
        double* v = v_[s].data();
        const double decay = p.decay ? 1.0 - lr * wd_ : 1.0;
        for (int64_t i = 0; i < p.tensor.size(); ++i) {
            w[i] *= decay;
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            w[i] -= lr * mh / (std::sqrt(vh) + eps_);
        }
    }
}

namespace {

constexpr char kStateMagic[8] = {'T', 'I', 'D', 'E', 'O', 'P', 'T', '1'};

void put_u64(std::ostream& out, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 8);
}

uint64_t get_u64(std::istream& in) {
    char b[8];
    if (!in.read(b, 8)) throw IoError("train state: truncated file");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    }
    return v;
}

void put_doubles(std::ostream& out, const std::vector<double>& xs) {
    put_u64(out, xs.size());
    for (double x : xs) {
        uint64_t bits;
        std::memcpy(&bits, &x, 8);
        put_u64(out, bits);
    }
}

void get_doubles(std::istream& in, std::vector<double>& xs) {
    const uint64_t n = get_u64(in);
    if (n != xs.size()) throw IoError("train state: moment size mismatch");
    for (uint64_t i = 0; i < n; ++i) {
        const uint64_t bits = get_u64(in);
        double x;
        std::memcpy(&x, &bits, 8);
        xs[i] = x;
    }
}

void put_string(std::ostream& out, const std::string& s) {
    put_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
    const uint64_t n = get_u64(in);
    std::string s(n, '\0');
    if (!in.read(s.data(), static_cast<std::streamsize>(n))) {
        throw IoError("train state: truncated string");
    }
    return s;
}

}  // namespace

void AdamOptimizer::save_state(const std::string& path, int64_t next_step,
                               const std::string& rng_state) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_state: cannot open " + path);
    out.write(kStateMagic, 8);
    put_u64(out, static_cast<uint64_t>(next_step));
    put_u64(out, static_cast<uint64_t>(t_));
    put_string(out, rng_state);
    put_u64(out, params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        put_string(out, params_[i].name);
        put_doubles(out, m_[i]);
        put_doubles(out, v_[i]);
    }
    if (!out) throw IoError("save_state: write failed for " + path);
}

std::pair<int64_t, std::string> AdamOptimizer::load_state(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_state: cannot open " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kStateMagic, 8) != 0) {
        throw IoError("load_state: bad magic in " + path);
    }
    const int64_t next_step = static_cast<int64_t>(get_u64(in));
    t_ = static_cast<int64_t>(get_u64(in));
    const std::string rng_state = get_string(in);
    const uint64_t count = get_u64(in);
    if (count != params_.size()) throw IoError("load_state: parameter count mismatch");
    for (size_t i = 0; i < params_.size(); ++i) {
        const std::string name = get_string(in);
        if (name != params_[i].name) {
            throw IoError("load_state: record " + name + " where " + params_[i].name +
                          " was expected");
        }
        get_doubles(in, m_[i]);
        get_doubles(in, v_[i]);
    }
    return {next_step, rng_state};
}

Trainer::Trainer(TideModel& model, const TrainConfig& cfg, std::vector<int32_t> corpus)
    : model_(model), cfg_(cfg), optimizer_(model.named_params(), cfg), sample_rng_(cfg.seed) {
    cfg_.validate();
    const int64_t n = static_cast<int64_t>(corpus.size());
    const int64_t val_len = static_cast<int64_t>(std::floor(cfg_.val_fraction * n));
    const int64_t train_len = n - val_len;
    if (train_len < cfg_.seq_len + 1) {
        throw ParamError("trainer: corpus too short for seq_len " + std::to_string(cfg_.seq_len));
    }
    train_.assign(corpus.begin(), corpus.begin() + train_len);
    val_.assign(corpus.begin() + train_len, corpus.end());
}

TokenBatch Trainer::sample_batch() {
    TokenBatch batch;
    batch.batch = cfg_.batch;
    batch.seq = cfg_.seq_len;
    const int64_t max_start = static_cast<int64_t>(train_.size()) - cfg_.seq_len - 1;
    std::uniform_int_distribution<int64_t> start(0, max_start);
    for (int b = 0; b < cfg_.batch; ++b) {
        const int64_t o = start(sample_rng_);
        for (int t = 0; t < cfg_.seq_len; ++t) {
            batch.ids.push_back(train_[static_cast<size_t>(o + t)]);
            batch.targets.push_back(train_[static_cast<size_t>(o + t + 1)]);
        }
    }
    return batch;
}

StepMetrics Trainer::step_on_batch(const TokenBatch& batch, const StepObserver& observer) {
    model_.zero_grad();
    Tape tape;
    ForwardTrace trace = model_.forward(tape, batch);
    Tensor loss = tape.cross_entropy_zloss(trace.logits, batch.targets, cfg_.z_coeff);
    const double loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
        std::ostringstream dump;
        dump << "train aborted: non-finite loss " << loss_value << " at step " << next_step_
             << " (batch " << batch.batch << "x" << batch.seq << ", first ids";
        for (int i = 0; i < std::min(8, static_cast<int>(batch.ids.size())); ++i) {
            dump << " " << batch.ids[static_cast<size_t>(i)];
        }
        dump << ")";
        throw NumericError(dump.str());
    }
    tape.backward(loss);
    if (observer) observer(TrainStepInfo{next_step_, batch, model_, loss_value});
    StepMetrics metrics;
    metrics.step = next_step_;
    metrics.loss = loss_value;
    metrics.grad_norm = optimizer_.clip_gradients(cfg_.clip_norm);
    metrics.lr = lr_schedule(next_step_, cfg_);
    optimizer_.step(metrics.lr);
    ++next_step_;
    return metrics;
}

StepMetrics Trainer::run_step(const StepObserver& observer) {
    return step_on_batch(sample_batch(), observer);
}

std::vector<StepMetrics> Trainer::run(const StepObserver& observer) {
    std::vector<StepMetrics> metrics;
    while (next_step_ < cfg_.steps) metrics.push_back(run_step(observer));
    return metrics;
}

void Trainer::save(const std::string& checkpoint_path) const {
    save_checkpoint(checkpoint_path, model_);
    std::ostringstream rng;
    rng << sample_rng_;
    optimizer_.save_state(checkpoint_path + ".state", next_step_, rng.str());
}

void Trainer::restore_state(const std::string& state_path) {
    const auto [next_step, rng_state] = optimizer_.load_state(state_path);
    next_step_ = next_step;
    std::istringstream in(rng_state);
    in >> sample_rng_;
    if (!in) throw IoError("restore_state: bad RNG state in " + state_path);
}

void eval_walk(const TideModel& model, const std::vector<int32_t>& tokens, int seq_len,
               const ForwardOptions& opt,
               const std::function<void(const ForwardTrace&, const TokenBatch&)>& visit) {
    if (seq_len < 1) throw ParamError("eval_walk: seq_len must be positive");
    const int64_t n = static_cast<int64_t>(tokens.size());
    const int64_t windows = (n - 1) / seq_len;
    constexpr int64_t kEvalBatch = 8;
    for (int64_t w0 = 0; w0 < windows; w0 += kEvalBatch) {
        const int64_t group = std::min<int64_t>(kEvalBatch, windows - w0);
        TokenBatch batch;
        batch.batch = static_cast<int>(group);
        batch.seq = seq_len;
        for (int64_t w = w0; w < w0 + group; ++w) {
            const int64_t o = w * seq_len;
            for (int t = 0; t < seq_len; ++t) {
                batch.ids.push_back(tokens[static_cast<size_t>(o + t)]);
                batch.targets.push_back(tokens[static_cast<size_t>(o + t + 1)]);
            }
        }
        Tape tape(false);
        ForwardTrace trace = model.forward(tape, batch, opt);
        visit(trace, batch);
    }
}

BinLossReport eval_per_bin(const TideModel& model, const std::vector<int32_t>& tokens,
                           int seq_len, const FrequencyBinTable& bins) {
    BinLossReport report;
    report.bin_count = bins.bin_count;
    report.bin_mean.assign(static_cast<size_t>(bins.bin_count), 0.0);
    report.bin_tokens.assign(static_cast<size_t>(bins.bin_count), 0);
    std::vector<double> ce;
    eval_walk(model, tokens, seq_len, {}, [&](const ForwardTrace& trace, const TokenBatch& batch) {
        per_token_cross_entropy(trace.logits, batch.targets, ce);
        for (size_t i = 0; i < ce.size(); ++i) {
            const int32_t target = batch.targets[i];
            const int32_t bin = bins.bins[static_cast<size_t>(target)];
            if (bin >= 0) {
                report.bin_mean[static_cast<size_t>(bin)] += ce[i];
                ++report.bin_tokens[static_cast<size_t>(bin)];
            } else {
                report.unbinned_mean += ce[i];
                ++report.unbinned_tokens;
            }
            report.global_mean += ce[i];
            ++report.total_tokens;
        }
    });
    for (int b = 0; b < bins.bin_count; ++b) {
        const int64_t n = report.bin_tokens[static_cast<size_t>(b)];
        const double sum = report.bin_mean[static_cast<size_t>(b)];
        if (bins.bin_count == 10) {
            const int tier = bin_tier(b);
            report.tier_mean[tier] += sum;
            report.tier_tokens[tier] += n;
        }
        report.bin_mean[static_cast<size_t>(b)] = n > 0 ? sum / static_cast<double>(n) : 0.0;
    }
    for (int t = 0; t < 3; ++t) {
        if (report.tier_tokens[t] > 0) report.tier_mean[t] /= static_cast<double>(report.tier_tokens[t]);
    }
    if (report.unbinned_tokens > 0) {
        report.unbinned_mean /= static_cast<double>(report.unbinned_tokens);
    }
    if (report.total_tokens > 0) {
        report.global_mean /= static_cast<double>(report.total_tokens);
    }
    return report;
}

double eval_perplexity(const TideModel& model, const std::vector<int32_t>& tokens, int seq_len,
                       const ForwardOptions& opt) {
    double sum = 0.0;
    int64_t count = 0;
    std::vector<double> ce;
    eval_walk(model, tokens, seq_len, opt, [&](const ForwardTrace& trace, const TokenBatch& batch) {
        per_token_cross_entropy(trace.logits, batch.targets, ce);
        for (double c : ce) sum += c;
        count += static_cast<int64_t>(ce.size());
    });
    if (count == 0) throw ParamError("eval_perplexity: no complete evaluation window");
    return std::exp(sum / static_cast<double>(count));
}

}  // namespace tide
