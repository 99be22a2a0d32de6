#include "tide/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace tide {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

Tensor::Tensor(Shape shape, bool requires_grad) : impl_(std::make_shared<Impl>()) {
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->value.assign(static_cast<size_t>(shape_numel(impl_->shape)), 0.0);
    impl_->requires_grad = requires_grad;
    if (requires_grad) impl_->grad.assign(impl_->value.size(), 0.0);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return Tensor(std::move(shape), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.values().begin(), t.values().end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    if (static_cast<int64_t>(values.size()) != t.size()) {
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(t.shape()));
    }
    t.impl_->value = std::move(values);
    return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (double& v : t.values()) v = stddev * dist(rng);
    return t;
}

void Tensor::zero_grad() const {
    if (impl_->requires_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->value[0];
}

Tensor Tensor::clone() const {
    Tensor t(impl_->shape, impl_->requires_grad);
    t.impl_->value = impl_->value;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : impl_->value) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

double Tensor::l2_norm() const {
    double s = 0.0;
    for (double v : impl_->value) s += v * v;
    return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// gemm kernels. Row-major, accumulate into C, fixed reduction order.
// ---------------------------------------------------------------------------

namespace {

// C (m,n) += A (m,k) x B (k,n)
void gemm_nn(int64_t m, int64_t k, int64_t n, const double* A, const double* B, double* C) {
    for (int64_t i = 0; i < m; ++i) {
        const double* a = A + i * k;
        double* c = C + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const double av = a[p];
            const double* b = B + p * n;
            for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C (m,n) += A^T x B with A (s,m), B (s,n)
void gemm_tn(int64_t s_dim, int64_t m, int64_t n, const double* A, const double* B, double* C) {
    for (int64_t s = 0; s < s_dim; ++s) {
        const double* a = A + s * m;
        const double* b = B + s * n;
        for (int64_t i = 0; i < m; ++i) {
            const double av = a[i];
            double* c = C + i * n;
            for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

void transpose(int64_t rows, int64_t cols, const double* src, double* dst) {
    for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
    }
}

// C (m,n) += A (m,k) x B^T with B (n,k)
void gemm_nt(int64_t m, int64_t k, int64_t n, const double* A, const double* B, double* C) {
    std::vector<double> bt(static_cast<size_t>(k * n));
    transpose(n, k, B, bt.data());
    gemm_nn(m, k, n, A, bt.data(), C);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

void Tape::backward(Tensor loss) {
    if (loss.size() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    if (loss.requires_grad()) loss.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
    nodes_.clear();
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape(), track(a) || track(b));
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    const int64_t n = out.size();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (out.requires_grad()) {
        record([a, b, out]() mutable {
            const double* g = out.grad();
            const int64_t n = out.size();
            if (a.requires_grad()) {
                double* ga = a.grad();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                double* gb = b.grad();
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

Tensor Tape::add3(const Tensor& a, const Tensor& b, const Tensor& c) {
    check_same_shape(a, b, "add3");
    check_same_shape(a, c, "add3");
    Tensor out(a.shape(), track(a) || track(b) || track(c));
    const double* pa = a.data();
    const double* pb = b.data();
    const double* pc = c.data();
    double* po = out.data();
    const int64_t n = out.size();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + (pb[i] + pc[i]);
    if (out.requires_grad()) {
        record([a, b, c, out]() mutable {
            const double* g = out.grad();
            const int64_t n = out.size();
            for (const Tensor* t : {&a, &b, &c}) {
                if (!t->requires_grad()) continue;
                double* gt = t->grad();
                for (int64_t i = 0; i < n; ++i) gt[i] += g[i];
            }
        });
    }
    return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape(), track(a) || track(b));
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    const int64_t n = out.size();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (out.requires_grad()) {
        record([a, b, out]() mutable {
            const double* g = out.grad();
            const int64_t n = out.size();
            if (a.requires_grad()) {
                double* ga = a.grad();
                const double* pb = b.data();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
            }
            if (b.requires_grad()) {
                double* gb = b.grad();
                const double* pa = a.data();
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
            }
        });
    }
    return out;
}

Tensor Tape::scale(const Tensor& a, double c) {
    Tensor out(a.shape(), track(a));
    const double* pa = a.data();
    double* po = out.data();
    const int64_t n = out.size();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    if (out.requires_grad()) {
        record([a, out, c]() mutable {
            const double* g = out.grad();
            double* ga = a.grad();
            const int64_t n = out.size();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * c;
        });
    }
    return out;
}

Tensor Tape::sum(const Tensor& a) {
    Tensor out({1}, track(a));
    double s = 0.0;
    const double* pa = a.data();
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) s += pa[i];
    out.data()[0] = s;
    if (out.requires_grad()) {
        record([a, out]() mutable {
            const double g = out.grad()[0];
            double* ga = a.grad();
            const int64_t n = a.size();
            for (int64_t i = 0; i < n; ++i) ga[i] += g;
        });
    }
    return out;
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() != 2) {
        throw ShapeError("matmul: need (...,m,k) x (k,n), got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const int64_t k = a.dim(a.ndim() - 1);
    if (k != b.dim(0)) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const int64_t n = b.dim(1);
    const int64_t m = a.size() / k;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(static_cast<int>(n));
    Tensor out(out_shape, track(a) || track(b));
    gemm_nn(m, k, n, a.data(), b.data(), out.data());
    if (out.requires_grad()) {
        record([a, b, out, m, k, n]() mutable {
            const double* g = out.grad();
            if (a.requires_grad()) gemm_nt(m, n, k, g, b.data(), a.grad());
            if (b.requires_grad()) gemm_tn(m, k, n, a.data(), g, b.grad());
        });
    }
    return out;
}

Tensor Tape::matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 1 || b.ndim() != 2) {
        throw ShapeError("matmul_nt: need (...,k) x (n,k), got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const int64_t k = a.dim(a.ndim() - 1);
    if (k != b.dim(1)) {
        throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
    }
    const int64_t n = b.dim(0);
    const int64_t m = a.size() / k;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(static_cast<int>(n));
    Tensor out(out_shape, track(a) || track(b));
    gemm_nt(m, k, n, a.data(), b.data(), out.data());
    if (out.requires_grad()) {
        record([a, b, out, m, k, n]() mutable {
            const double* g = out.grad();
            if (a.requires_grad()) gemm_nn(m, n, k, g, b.data(), a.grad());
            if (b.requires_grad()) gemm_tn(m, n, k, g, a.data(), b.grad());
        });
    }
    return out;
}

Tensor Tape::rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
    if (x.ndim() < 1 || gain.ndim() != 1 || gain.dim(0) != x.dim(x.ndim() - 1)) {
        throw ShapeError("rmsnorm: gain " + shape_str(gain.shape()) + " does not match last dim of " +
                         shape_str(x.shape()));
    }
    if (eps <= 0.0) throw ParamError("rmsnorm: eps must be positive");
    if (!x.all_finite()) throw NumericError("rmsnorm: non-finite input");
    const int64_t n = x.dim(x.ndim() - 1);
    const int64_t rows = x.size() / n;
    Tensor out(x.shape(), track(x) || track(gain));
    std::vector<double> inv_rms(static_cast<size_t>(rows));
    const double* px = x.data();
    const double* pg = gain.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * n;
        double ms = 0.0;
        for (int64_t i = 0; i < n; ++i) ms += xr[i] * xr[i];
        ms /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(ms + eps);
        inv_rms[static_cast<size_t>(r)] = inv;
        double* yr = po + r * n;
        for (int64_t i = 0; i < n; ++i) yr[i] = pg[i] * xr[i] * inv;
    }
    if (out.requires_grad()) {
        record([x, gain, out, inv_rms = std::move(inv_rms), n, rows]() mutable {
            const double* g = out.grad();
            const double* px = x.data();
            const double* pg = gain.data();
            for (int64_t r = 0; r < rows; ++r) {
                const double inv = inv_rms[static_cast<size_t>(r)];
                const double* xr = px + r * n;
                const double* gr = g + r * n;
                if (x.requires_grad()) {
                    double dot = 0.0;
                    for (int64_t i = 0; i < n; ++i) dot += gr[i] * pg[i] * xr[i];
                    const double coef = dot * inv * inv * inv / static_cast<double>(n);
                    double* gx = x.grad() + r * n;
                    for (int64_t i = 0; i < n; ++i) gx[i] += gr[i] * pg[i] * inv - xr[i] * coef;
                }
                if (gain.requires_grad()) {
                    double* gg = gain.grad();
                    for (int64_t i = 0; i < n; ++i) gg[i] += gr[i] * xr[i] * inv;
                }
            }
        });
    }
    return out;
}

Tensor Tape::softmax_lastdim(const Tensor& x) {
    if (x.ndim() < 1) throw ShapeError("softmax_lastdim: scalar input");
    const int64_t n = x.dim(x.ndim() - 1);
    const int64_t rows = x.size() / n;
    Tensor out(x.shape(), track(x));
    const double* px = x.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * n;
        double* yr = po + r * n;
        double mx = xr[0];
        for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
        double z = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            z += yr[i];
        }
        const double inv = 1.0 / z;
        for (int64_t i = 0; i < n; ++i) yr[i] *= inv;
    }
    if (out.requires_grad()) {
        record([x, out, n, rows]() mutable {
            const double* g = out.grad();
            const double* p = out.data();
            double* gx = x.grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* pr = p + r * n;
                const double* gr = g + r * n;
                double dot = 0.0;
                for (int64_t i = 0; i < n; ++i) dot += pr[i] * gr[i];
                double* gxr = gx + r * n;
                for (int64_t i = 0; i < n; ++i) gxr[i] += pr[i] * (gr[i] - dot);
            }
        });
    }
    return out;
}

Tensor Tape::silu(const Tensor& x) {
    Tensor out(x.shape(), track(x));
    const double* px = x.data();
    double* po = out.data();
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] * sigmoid(px[i]);
    if (out.requires_grad()) {
        record([x, out]() mutable {
            const double* g = out.grad();
            const double* px = x.data();
            double* gx = x.grad();
            const int64_t n = x.size();
            for (int64_t i = 0; i < n; ++i) {
                const double s = sigmoid(px[i]);
                gx[i] += g[i] * (s + px[i] * s * (1.0 - s));
            }
        });
    }
    return out;
}

Tensor Tape::embedding_lookup(const Tensor& table, std::span<const int32_t> ids,
                              Shape lead_shape) {
    if (table.ndim() != 2) throw ShapeError("embedding_lookup: table must be 2-D");
    const int64_t vocab = table.dim(0);
    const int64_t d = table.dim(1);
    if (shape_numel(lead_shape) != static_cast<int64_t>(ids.size())) {
        throw ShapeError("embedding_lookup: lead shape " + shape_str(lead_shape) +
                         " does not cover " + std::to_string(ids.size()) + " ids");
    }
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= vocab) {
            throw IndexError("embedding_lookup: id " + std::to_string(ids[i]) + " at offset " +
                             std::to_string(i) + " outside vocabulary of " + std::to_string(vocab));
        }
    }
    Shape out_shape = lead_shape;
    out_shape.push_back(static_cast<int>(d));
    Tensor out(out_shape, track(table));
    const double* pt = table.data();
    double* po = out.data();
    for (size_t i = 0; i < ids.size(); ++i) {
        std::memcpy(po + static_cast<int64_t>(i) * d, pt + static_cast<int64_t>(ids[i]) * d,
                    static_cast<size_t>(d) * sizeof(double));
    }
    if (out.requires_grad()) {
        std::vector<int32_t> ids_copy(ids.begin(), ids.end());
        record([table, out, ids_copy = std::move(ids_copy), d]() mutable {
            const double* g = out.grad();
            double* gt = table.grad();
            for (size_t i = 0; i < ids_copy.size(); ++i) {
                const double* gi = g + static_cast<int64_t>(i) * d;
                double* row = gt + static_cast<int64_t>(ids_copy[i]) * d;
                for (int64_t j = 0; j < d; ++j) row[j] += gi[j];
            }
        });
    }
    return out;
}

Tensor Tape::rope_apply(const Tensor& x, std::span<const int32_t> positions, int head_dim,
                        double theta) {
    if (x.ndim() < 2) throw ShapeError("rope_apply: need (..., T, d)");
    if (head_dim <= 0 || head_dim % 2 != 0) {
        throw ParamError("rope_apply: head dim must be even and positive, got " +
                         std::to_string(head_dim));
    }
    const int64_t d = x.dim(x.ndim() - 1);
    const int64_t t_len = x.dim(x.ndim() - 2);
    if (d % head_dim != 0) throw ShapeError("rope_apply: last dim not a multiple of head dim");
    if (t_len != static_cast<int64_t>(positions.size())) {
        throw ShapeError("rope_apply: positions length " + std::to_string(positions.size()) +
                         " vs sequence length " + std::to_string(t_len));
    }
    const int64_t half = head_dim / 2;
    // cos/sin per (t, i); angle = pos * theta^(-2i/head_dim)
    std::vector<double> cs(static_cast<size_t>(t_len * half * 2));
    for (int64_t t = 0; t < t_len; ++t) {
        for (int64_t i = 0; i < half; ++i) {
            const double freq =
                std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
            const double ang = static_cast<double>(positions[static_cast<size_t>(t)]) * freq;
            cs[static_cast<size_t>((t * half + i) * 2)] = std::cos(ang);
            cs[static_cast<size_t>((t * half + i) * 2 + 1)] = std::sin(ang);
        }
    }
    const int64_t batch = x.size() / (t_len * d);
    const int64_t heads = d / head_dim;
    Tensor out(x.shape(), track(x));
    const double* px = x.data();
    double* po = out.data();
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t t = 0; t < t_len; ++t) {
            const double* xr = px + (b * t_len + t) * d;
            double* yr = po + (b * t_len + t) * d;
            for (int64_t h = 0; h < heads; ++h) {
                for (int64_t i = 0; i < half; ++i) {
                    const double c = cs[static_cast<size_t>((t * half + i) * 2)];
                    const double s = cs[static_cast<size_t>((t * half + i) * 2 + 1)];
                    const int64_t j = h * head_dim + 2 * i;
                    const double x0 = xr[j], x1 = xr[j + 1];
                    yr[j] = x0 * c - x1 * s;
                    yr[j + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
    if (out.requires_grad()) {
        record([x, out, cs = std::move(cs), batch, t_len, heads, head_dim, half, d]() mutable {
            const double* g = out.grad();
            double* gx = x.grad();
            for (int64_t b = 0; b < batch; ++b) {
                for (int64_t t = 0; t < t_len; ++t) {
                    const double* gr = g + (b * t_len + t) * d;
                    double* gxr = gx + (b * t_len + t) * d;
                    for (int64_t h = 0; h < heads; ++h) {
                        for (int64_t i = 0; i < half; ++i) {
                            const double c = cs[static_cast<size_t>((t * half + i) * 2)];
                            const double s = cs[static_cast<size_t>((t * half + i) * 2 + 1)];
                            const int64_t j = h * head_dim + 2 * i;
                            const double g0 = gr[j], g1 = gr[j + 1];
                            gxr[j] += g0 * c + g1 * s;
                            gxr[j + 1] += -g0 * s + g1 * c;
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor Tape::causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads) {
    if (q.ndim() != 3) throw ShapeError("causal_attention: q must be (B,T,d)");
    check_same_shape(q, k, "causal_attention");
    check_same_shape(q, v, "causal_attention");
    const int64_t b_len = q.dim(0), t_len = q.dim(1), d = q.dim(2);
    if (n_heads <= 0 || d % n_heads != 0) {
        throw ShapeError("causal_attention: head count " + std::to_string(n_heads) +
                         " does not divide " + std::to_string(d));
    }
    const int64_t dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor out(q.shape(), track(q) || track(k) || track(v));
    // probs: (B, H, T, T); entries above the diagonal stay zero
    std::vector<double> probs(static_cast<size_t>(b_len * n_heads * t_len * t_len), 0.0);
    const double* pq = q.data();
    const double* pk = k.data();
    const double* pv = v.data();
    double* po = out.data();
    std::vector<double> row(static_cast<size_t>(t_len));
    for (int64_t b = 0; b < b_len; ++b) {
        for (int64_t h = 0; h < n_heads; ++h) {
            const int64_t off = h * dh;
            for (int64_t t = 0; t < t_len; ++t) {
                const double* qr = pq + (b * t_len + t) * d + off;
                double mx = -1e300;
                for (int64_t s = 0; s <= t; ++s) {
                    const double* kr = pk + (b * t_len + s) * d + off;
                    double dot = 0.0;
                    for (int64_t j = 0; j < dh; ++j) dot += qr[j] * kr[j];
                    row[static_cast<size_t>(s)] = dot * scale;
                    mx = std::max(mx, row[static_cast<size_t>(s)]);
                }
                double z = 0.0;
                for (int64_t s = 0; s <= t; ++s) {
                    row[static_cast<size_t>(s)] = std::exp(row[static_cast<size_t>(s)] - mx);
                    z += row[static_cast<size_t>(s)];
                }
                const double inv = 1.0 / z;
                double* pr = probs.data() + ((b * n_heads + h) * t_len + t) * t_len;
                for (int64_t s = 0; s <= t; ++s) pr[s] = row[static_cast<size_t>(s)] * inv;
                double* yr = po + (b * t_len + t) * d + off;
                for (int64_t s = 0; s <= t; ++s) {
                    const double* vr = pv + (b * t_len + s) * d + off;
                    const double p = pr[s];
                    for (int64_t j = 0; j < dh; ++j) yr[j] += p * vr[j];
                }
            }
        }
    }
    if (out.requires_grad()) {
        record([q, k, v, out, probs = std::move(probs), b_len, t_len, d, n_heads, dh,
                scale]() mutable {
            const double* g = out.grad();
            const double* pq = q.data();
            const double* pk = k.data();
            const double* pv = v.data();
            double* gq = q.requires_grad() ? q.grad() : nullptr;
            double* gk = k.requires_grad() ? k.grad() : nullptr;
            double* gv = v.requires_grad() ? v.grad() : nullptr;
            std::vector<double> dp(static_cast<size_t>(t_len));
            for (int64_t b = 0; b < b_len; ++b) {
                for (int64_t h = 0; h < n_heads; ++h) {
                    const int64_t off = h * dh;
                    for (int64_t t = 0; t < t_len; ++t) {
                        const double* gr = g + (b * t_len + t) * d + off;
                        const double* pr = probs.data() + ((b * n_heads + h) * t_len + t) * t_len;
                        double pdot = 0.0;
                        for (int64_t s = 0; s <= t; ++s) {
                            const double* vr = pv + (b * t_len + s) * d + off;
                            double dot = 0.0;
                            for (int64_t j = 0; j < dh; ++j) dot += gr[j] * vr[j];
                            dp[static_cast<size_t>(s)] = dot;
                            pdot += pr[s] * dot;
                            if (gv) {
                                double* gvr = gv + (b * t_len + s) * d + off;
                                const double p = pr[s];
                                for (int64_t j = 0; j < dh; ++j) gvr[j] += p * gr[j];
                            }
                        }
                        const double* qr = pq + (b * t_len + t) * d + off;
                        for (int64_t s = 0; s <= t; ++s) {
                            const double dz = pr[s] * (dp[static_cast<size_t>(s)] - pdot) * scale;
                            const double* kr = pk + (b * t_len + s) * d + off;
                            if (gq) {
                                double* gqr = gq + (b * t_len + t) * d + off;
                                for (int64_t j = 0; j < dh; ++j) gqr[j] += dz * kr[j];
                            }
                            if (gk) {
                                double* gkr = gk + (b * t_len + s) * d + off;
                                for (int64_t j = 0; j < dh; ++j) gkr[j] += dz * qr[j];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor Tape::memory_mix(const Tensor& alpha, const Tensor& memory) {
    if (alpha.ndim() != 3 || memory.ndim() != 4) {
        throw ShapeError("memory_mix: need alpha (B,T,K+1) and memory (B,T,K,d)");
    }
    const int64_t b_len = alpha.dim(0), t_len = alpha.dim(1), slots = alpha.dim(2);
    const int64_t kb = memory.dim(2), d = memory.dim(3);
    if (memory.dim(0) != b_len || memory.dim(1) != t_len || slots != kb + 1) {
        throw ShapeError("memory_mix: alpha " + shape_str(alpha.shape()) + " vs memory " +
                         shape_str(memory.shape()));
    }
    Tensor out({static_cast<int>(b_len), static_cast<int>(t_len), static_cast<int>(d)},
               track(alpha) || track(memory));
    const double* pa = alpha.data();
    const double* pm = memory.data();
    double* po = out.data();
    for (int64_t bt = 0; bt < b_len * t_len; ++bt) {
        const double* ar = pa + bt * slots;
        double* yr = po + bt * d;
        for (int64_t k = 0; k < kb; ++k) {
            const double a = ar[k];
            const double* mr = pm + (bt * kb + k) * d;
            for (int64_t j = 0; j < d; ++j) yr[j] += a * mr[j];
        }
    }
    if (out.requires_grad()) {
        record([alpha, memory, out, b_len, t_len, slots, kb, d]() mutable {
            const double* g = out.grad();
            const double* pa = alpha.data();
            const double* pm = memory.data();
            for (int64_t bt = 0; bt < b_len * t_len; ++bt) {
                const double* gr = g + bt * d;
                if (alpha.requires_grad()) {
                    double* ga = alpha.grad() + bt * slots;
                    for (int64_t k = 0; k < kb; ++k) {
                        const double* mr = pm + (bt * kb + k) * d;
                        double dot = 0.0;
                        for (int64_t j = 0; j < d; ++j) dot += gr[j] * mr[j];
                        ga[k] += dot;  // null slot (index kb) receives nothing
                    }
                }
                if (memory.requires_grad()) {
                    double* gm = memory.grad();
                    const double* ar = pa + bt * slots;
                    for (int64_t k = 0; k < kb; ++k) {
                        double* gmr = gm + (bt * kb + k) * d;
                        const double a = ar[k];
                        for (int64_t j = 0; j < d; ++j) gmr[j] += a * gr[j];
                    }
                }
            }
        });
    }
    return out;
}

Tensor Tape::stack_k(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ShapeError("stack_k: no inputs");
    for (const Tensor& x : xs) check_same_shape(xs[0], x, "stack_k");
    const int64_t d = xs[0].dim(xs[0].ndim() - 1);
    const int64_t rows = xs[0].size() / d;
    const int64_t kb = static_cast<int64_t>(xs.size());
    Shape out_shape(xs[0].shape().begin(), xs[0].shape().end() - 1);
    out_shape.push_back(static_cast<int>(kb));
    out_shape.push_back(static_cast<int>(d));
    bool needs = false;
    for (const Tensor& x : xs) needs = needs || track(x);
    Tensor out(out_shape, needs);
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t k = 0; k < kb; ++k) {
            std::memcpy(po + (r * kb + k) * d, xs[static_cast<size_t>(k)].data() + r * d,
                        static_cast<size_t>(d) * sizeof(double));
        }
    }
    if (out.requires_grad()) {
        record([xs, out, rows, kb, d]() mutable {
            const double* g = out.grad();
            for (int64_t k = 0; k < kb; ++k) {
                const Tensor& x = xs[static_cast<size_t>(k)];
                if (!x.requires_grad()) continue;
                double* gx = x.grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const double* gr = g + (r * kb + k) * d;
                    double* gxr = gx + r * d;
                    for (int64_t j = 0; j < d; ++j) gxr[j] += gr[j];
                }
            }
        });
    }
    return out;
}

Tensor Tape::cross_entropy_zloss(const Tensor& logits, std::span<const int32_t> targets,
                                 double z_coeff) {
    if (logits.ndim() < 1) throw ShapeError("cross_entropy_zloss: scalar logits");
    const int64_t vocab = logits.dim(logits.ndim() - 1);
    const int64_t rows = logits.size() / vocab;
    if (rows != static_cast<int64_t>(targets.size())) {
        throw ShapeError("cross_entropy_zloss: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(rows) + " rows");
    }
    for (size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0 || targets[i] >= vocab) {
            throw IndexError("cross_entropy_zloss: target " + std::to_string(targets[i]) +
                             " at row " + std::to_string(i) + " outside vocabulary of " +
                             std::to_string(vocab));
        }
    }
    Tensor out({1}, track(logits));
    std::vector<double> lse(static_cast<size_t>(rows));
    const double* pl = logits.data();
    double ce_sum = 0.0, z_sum = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        const double* lr = pl + r * vocab;
        double mx = lr[0];
        for (int64_t i = 1; i < vocab; ++i) mx = std::max(mx, lr[i]);
        double z = 0.0;
        for (int64_t i = 0; i < vocab; ++i) z += std::exp(lr[i] - mx);
        const double l = mx + std::log(z);
        lse[static_cast<size_t>(r)] = l;
        ce_sum += l - lr[targets[static_cast<size_t>(r)]];
        z_sum += l * l;
    }
    const double inv_rows = 1.0 / static_cast<double>(rows);
    out.data()[0] = ce_sum * inv_rows + z_coeff * z_sum * inv_rows;
    if (out.requires_grad()) {
        std::vector<int32_t> tg(targets.begin(), targets.end());
        record([logits, out, lse = std::move(lse), tg = std::move(tg), vocab, rows, inv_rows,
                z_coeff]() mutable {
            const double g = out.grad()[0];
            const double* pl = logits.data();
            double* gl = logits.grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* lr = pl + r * vocab;
                double* gr = gl + r * vocab;
                const double l = lse[static_cast<size_t>(r)];
                const double zc = 2.0 * z_coeff * l;
                for (int64_t i = 0; i < vocab; ++i) {
                    const double p = std::exp(lr[i] - l);
                    gr[i] += g * inv_rows * (p + zc * p);
                }
                gr[tg[static_cast<size_t>(r)]] -= g * inv_rows;
            }
        });
    }
    return out;
}

void per_token_cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                             std::vector<double>& out) {
    const int64_t vocab = logits.dim(logits.ndim() - 1);
    const int64_t rows = logits.size() / vocab;
    if (rows != static_cast<int64_t>(targets.size())) {
        throw ShapeError("per_token_cross_entropy: target count mismatch");
    }
    out.resize(static_cast<size_t>(rows));
    const double* pl = logits.data();
    for (int64_t r = 0; r < rows; ++r) {
        const int32_t t = targets[static_cast<size_t>(r)];
        if (t < 0 || t >= vocab) {
            throw IndexError("per_token_cross_entropy: target " + std::to_string(t) +
                             " outside vocabulary");
        }
        const double* lr = pl + r * vocab;
        double mx = lr[0];
        for (int64_t i = 1; i < vocab; ++i) mx = std::max(mx, lr[i]);
        double z = 0.0;
        for (int64_t i = 0; i < vocab; ++i) z += std::exp(lr[i] - mx);
        out[static_cast<size_t>(r)] = mx + std::log(z) - lr[t];
    }
}

}  // namespace tide
