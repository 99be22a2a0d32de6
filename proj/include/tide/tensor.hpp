#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tide {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IndexError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParamError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major f64 array with an optional same-shape gradient buffer.
/// Copies are shallow (shared storage); use clone() for a deep copy.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value);
    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev,
                        bool requires_grad = true);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(impl_->value.size()); }

    // Accessors are const-qualified but return mutable storage: a Tensor is a
    // shared handle, so const applies to the handle, not the buffers.
    double* data() const { return impl_->value.data(); }
    std::vector<double>& values() const { return impl_->value; }

    bool requires_grad() const { return impl_->requires_grad; }
    double* grad() const { return impl_->requires_grad ? impl_->grad.data() : nullptr; }
    std::vector<double>& grad_values() const { return impl_->grad; }
    void zero_grad() const;

    double item() const;
    Tensor clone() const;
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    bool all_finite() const;
    double l2_norm() const;

  private:
    struct Impl {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;  // allocated iff requires_grad
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

/// Define-by-run tape. Each taped op appends one node whose closure pushes the
/// output gradient back into its inputs. backward() replays the node list in
/// reverse exactly once and then clears the tape.
///
/// A tape is single-threaded; independent tapes never share mutable state.
class Tape {
  public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    int64_t node_count() const { return static_cast<int64_t>(nodes_.size()); }
    void clear() { nodes_.clear(); }

    /// Seeds d(loss)/d(loss) = 1 and replays the tape backward. The loss must
    /// be a scalar produced by operations recorded on this tape.
    void backward(Tensor loss);

    Tensor add(const Tensor& a, const Tensor& b);
    /// a + (b + c). The inner grouping keeps the result invariant under
    /// swapping b and c.
    Tensor add3(const Tensor& a, const Tensor& b, const Tensor& c);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor scale(const Tensor& a, double c);
    Tensor sum(const Tensor& a);

    /// (..., m, k) x (k, n) -> (..., m, n). Leading dimensions are treated as
    /// stacked rows; no other broadcasting.
    Tensor matmul(const Tensor& a, const Tensor& b);
    /// (..., k) x (n, k) -> (..., n); second operand used transposed.
    Tensor matmul_nt(const Tensor& a, const Tensor& b);

    /// y_i = gain_i * x_i / sqrt(mean(x^2) + eps) over the last dimension.
    Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps);
    Tensor softmax_lastdim(const Tensor& x);
    Tensor silu(const Tensor& x);

    /// Gathers table rows; backward scatters only into looked-up rows, so
    /// rows of ids absent from the batch keep an exactly zero gradient.
    Tensor embedding_lookup(const Tensor& table, std::span<const int32_t> ids, Shape lead_shape);

    /// Pairwise 2D rotations by pos * theta^(-2i/head_dim) applied per head
    /// over the last dimension of x (..., T, d). positions has length T.
    Tensor rope_apply(const Tensor& x, std::span<const int32_t> positions, int head_dim,
                      double theta);

    /// Causal multi-head attention over already-projected (and roped) q, k, v
    /// of shape (B, T, d). Softmax over keys <= query position.
    Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads);

    /// alpha: (B, T, K+1) routing weights, memory: (B, T, K, d).
    /// Output (B, T, d) = sum_k alpha_k * memory_k; slot K (the null bank)
    /// contributes exactly zero.
    Tensor memory_mix(const Tensor& alpha, const Tensor& memory);

    /// Stacks K same-shape (..., d) tensors into (..., K, d); slice k of the
    /// output is bitwise the k-th input.
    Tensor stack_k(const std::vector<Tensor>& xs);

    /// Mean token cross-entropy over rows of (..., V) logits plus
    /// z_coeff * mean(logsumexp^2). Returns a scalar.
    Tensor cross_entropy_zloss(const Tensor& logits, std::span<const int32_t> targets,
                               double z_coeff);

  private:
    struct Node {
        std::function<void()> backward;
    };
    std::vector<Node> nodes_;
    bool recording_;

    bool track(const Tensor& t) const { return recording_ && t.requires_grad(); }
    void record(std::function<void()> fn) { nodes_.push_back({std::move(fn)}); }
};

/// Plain (untaped) per-row cross-entropy, for evaluation walks.
void per_token_cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                             std::vector<double>& out);

}  // namespace tide
