#pragma once
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rasa/errors.hpp"
#include "rasa/rng.hpp"

namespace rasa {

namespace detail {

struct TensorNode {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;
    std::vector<double> g;  // allocated iff requires_grad
    bool requires_grad = false;
};

}  // namespace detail

// Dense row-major matrix of doubles (a scalar is 1x1). The handle is cheap to
// copy; underlying values are treated as immutable once created, except for
// the optimizer's sanctioned in-place update.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(int rows, int cols, bool requires_grad = false) {
        check_dims(rows, cols);
        Tensor t;
        t.n_ = std::make_shared<detail::TensorNode>();
        t.n_->rows = rows;
        t.n_->cols = cols;
        t.n_->v.assign(static_cast<std::size_t>(rows) * cols, 0.0);
        t.n_->requires_grad = requires_grad;
        if (requires_grad) t.n_->g.assign(t.n_->v.size(), 0.0);
        return t;
    }

    static Tensor full(int rows, int cols, double value, bool requires_grad = false) {
        Tensor t = zeros(rows, cols, requires_grad);
        for (auto& x : t.n_->v) x = value;
        return t;
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return full(1, 1, value, requires_grad);
    }

    static Tensor from_values(int rows, int cols, std::vector<double> values,
                              bool requires_grad = false) {
        check_dims(rows, cols);
        if (values.size() != static_cast<std::size_t>(rows) * cols)
            throw ShapeError("Tensor::from_values: " + std::to_string(values.size()) +
                             " values for shape " + shape_str(rows, cols));
        Tensor t;
        t.n_ = std::make_shared<detail::TensorNode>();
        t.n_->rows = rows;
        t.n_->cols = cols;
        t.n_->v = std::move(values);
        t.n_->requires_grad = requires_grad;
        if (requires_grad) t.n_->g.assign(t.n_->v.size(), 0.0);
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    int rows() const { return n_->rows; }
    int cols() const { return n_->cols; }
    std::size_t size() const { return n_->v.size(); }
    bool is_scalar() const { return n_->rows == 1 && n_->cols == 1; }
    bool requires_grad() const { return n_->requires_grad; }

    double value() const {
        if (!is_scalar()) throw ShapeError("Tensor::value: tensor is " + shape_str() + ", not scalar");
        return n_->v[0];
    }

    double at(int r, int c) const { return n_->v[static_cast<std::size_t>(r) * n_->cols + c]; }

    std::span<const double> data() const { return n_->v; }
    std::span<const double> grad() const { return n_->g; }
    double grad_at(int r, int c) const { return n_->g[static_cast<std::size_t>(r) * n_->cols + c]; }

    void zero_grad() {
        for (auto& x : n_->g) x = 0.0;
    }

    // Value copy with no gradient tracking.
    Tensor detached() const {
        return from_values(rows(), cols(), n_->v, false);
    }

    Tensor clone_with_grad() const {
        return from_values(rows(), cols(), n_->v, true);
    }

    bool same_shape(const Tensor& o) const { return rows() == o.rows() && cols() == o.cols(); }

    std::string shape_str() const { return shape_str(rows(), cols()); }

    static std::string shape_str(int r, int c) {
        return std::to_string(r) + "x" + std::to_string(c);
    }

    bool all_finite() const {
        for (double x : n_->v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    // Identical shape and bitwise-identical values.
    bool equals_bitwise(const Tensor& o) const {
        if (!same_shape(o)) return false;
        for (std::size_t i = 0; i < n_->v.size(); ++i)
            if (n_->v[i] != o.n_->v[i] || std::signbit(n_->v[i]) != std::signbit(o.n_->v[i]))
                return false;
        return true;
    }

    // Optimizer-only in-place access.
    std::span<double> mutable_data() { return n_->v; }
    std::span<double> mutable_grad() { return n_->g; }

    detail::TensorNode* node() const { return n_.get(); }

private:
    static void check_dims(int rows, int cols) {
        if (rows <= 0 || cols <= 0)
            throw ShapeError("Tensor: dimensions must be positive, got " + shape_str(rows, cols));
    }

    std::shared_ptr<detail::TensorNode> n_;
};

// Ordered record of executed primitive operations. backward() replays the
// record in exact reverse execution order.
struct Tape {
    struct Record {
        const char* op;
        std::function<void()> backward;
    };
    std::vector<Record> records;

    void clear() { records.clear(); }
};

namespace detail {

inline Tape*& active_tape_slot() {
    thread_local Tape* tape = nullptr;
    return tape;
}

}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

// RAII guard installing a tape as the thread's recording target.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : prev_(detail::active_tape_slot()) {
        detail::active_tape_slot() = &tape;
    }
    ~TapeScope() { detail::active_tape_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite())
        throw NumericError(std::string("non-finite value produced by op '") + op + "'");
}

inline bool track(const Tensor& a) { return active_tape() != nullptr && a.requires_grad(); }

inline Tensor make_output(int rows, int cols, bool needs_grad) {
    return Tensor::zeros(rows, cols, needs_grad && active_tape() != nullptr);
}

inline void record(const char* op, std::function<void()> fn) {
    active_tape()->records.push_back(Tape::Record{op, std::move(fn)});
}

inline void add_into(std::vector<double>& dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    bool track = detail::track(a) || detail::track(b);
    Tensor out = detail::make_output(a.rows(), a.cols(), track);
    auto* o = out.node();
    for (std::size_t i = 0; i < o->v.size(); ++i) o->v[i] = a.data()[i] + b.data()[i];
    detail::check_finite(out, "add");
    if (track) {
        detail::record("add", [a, b, out]() {
            if (a.requires_grad()) detail::add_into(a.node()->g, out.node()->g);
            if (b.requires_grad()) detail::add_into(b.node()->g, out.node()->g);
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("sub: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    bool track = detail::track(a) || detail::track(b);
    Tensor out = detail::make_output(a.rows(), a.cols(), track);
    auto* o = out.node();
    for (std::size_t i = 0; i < o->v.size(); ++i) o->v[i] = a.data()[i] - b.data()[i];
    detail::check_finite(out, "sub");
    if (track) {
        detail::record("sub", [a, b, out]() {
            if (a.requires_grad()) detail::add_into(a.node()->g, out.node()->g);
            if (b.requires_grad()) {
                auto& g = b.node()->g;
                const auto& og = out.node()->g;
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= og[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("mul: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    bool track = detail::track(a) || detail::track(b);
    Tensor out = detail::make_output(a.rows(), a.cols(), track);
    auto* o = out.node();
    for (std::size_t i = 0; i < o->v.size(); ++i) o->v[i] = a.data()[i] * b.data()[i];
    detail::check_finite(out, "mul");
    if (track) {
        detail::record("mul", [a, b, out]() {
            const auto& og = out.node()->g;
            if (a.requires_grad())
                for (std::size_t i = 0; i < og.size(); ++i) a.node()->g[i] += og[i] * b.data()[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < og.size(); ++i) b.node()->g[i] += og[i] * a.data()[i];
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    bool track = detail::track(a);
    Tensor out = detail::make_output(a.rows(), a.cols(), track);
    auto* o = out.node();
    for (std::size_t i = 0; i < o->v.size(); ++i) o->v[i] = a.data()[i] * c;
    detail::check_finite(out, "scale");
    if (track) {
        detail::record("scale", [a, out, c]() {
            const auto& og = out.node()->g;
            for (std::size_t i = 0; i < og.size(); ++i) a.node()->g[i] += og[i] * c;
        });
    }
    return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
    bool track = detail::track(a);
    Tensor out = detail::make_output(a.rows(), a.cols(), track);
    auto* o = out.node();
    for (std::size_t i = 0; i < o->v.size(); ++i) o->v[i] = a.data()[i] + c;
    detail::check_finite(out, "add_scalar");
    if (track) {
        detail::record("add_scalar", [a, out]() {
            detail::add_into(a.node()->g, out.node()->g);
        });
    }
    return out;
}

// a: n x d, bias: 1 x d, broadcast over rows
inline Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
    if (bias.rows() != 1 || bias.cols() != a.cols())
        throw ShapeError("add_rowvec: bias " + bias.shape_str() + " incompatible with " + a.shape_str());
    bool track = detail::track(a) || detail::track(bias);
    Tensor out = detail::make_output(a.rows(), a.cols(), track);
    auto* o = out.node();
    const int n = a.rows(), d = a.cols();
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c)
            o->v[static_cast<std::size_t>(r) * d + c] = a.at(r, c) + bias.data()[c];
    detail::check_finite(out, "add_rowvec");
    if (track) {
        detail::record("add_rowvec", [a, bias, out, n, d]() {
            const auto& og = out.node()->g;
            if (a.requires_grad()) detail::add_into(a.node()->g, og);
            if (bias.requires_grad()) {
                auto& bg = bias.node()->g;
                for (int r = 0; r < n; ++r)
                    for (int c = 0; c < d; ++c) bg[c] += og[static_cast<std::size_t>(r) * d + c];
            }
        });
    }
    return out;
}

inline Tensor sigmoid(const Tensor& a) {
    bool track = detail::track(a);
    Tensor out = detail::make_output(a.rows(), a.cols(), track);
    auto* o = out.node();
    for (std::size_t i = 0; i < o->v.size(); ++i) {
        double x = a.data()[i];
        o->v[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    detail::check_finite(out, "sigmoid");
    if (track) {
        detail::record("sigmoid", [a, out]() {
            const auto& og = out.node()->g;
            const auto& y = out.data();
            for (std::size_t i = 0; i < og.size(); ++i)
                a.node()->g[i] += og[i] * y[i] * (1.0 - y[i]);
        });
    }
    return out;
}

inline Tensor log_elem(const Tensor& a) {
    bool track = detail::track(a);
    Tensor out = detail::make_output(a.rows(), a.cols(), track);
    auto* o = out.node();
    for (std::size_t i = 0; i < o->v.size(); ++i) {
        double x = a.data()[i];
        if (!(x > 0.0)) throw NumericError("log: non-positive input");
        o->v[i] = std::log(x);
    }
    detail::check_finite(out, "log");
    if (track) {
        detail::record("log", [a, out]() {
            const auto& og = out.node()->g;
            for (std::size_t i = 0; i < og.size(); ++i) a.node()->g[i] += og[i] / a.data()[i];
        });
    }
    return out;
}

// Gradient is identity inside [lo, hi], zero outside.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    bool track = detail::track(a);
    Tensor out = detail::make_output(a.rows(), a.cols(), track);
    auto* o = out.node();
    for (std::size_t i = 0; i < o->v.size(); ++i) {
        double x = a.data()[i];
        o->v[i] = x < lo ? lo : (x > hi ? hi : x);
    }
    detail::check_finite(out, "clamp");
    if (track) {
        detail::record("clamp", [a, out, lo, hi]() {
            const auto& og = out.node()->g;
            for (std::size_t i = 0; i < og.size(); ++i) {
                double x = a.data()[i];
                if (x >= lo && x <= hi) a.node()->g[i] += og[i];
            }
        });
    }
    return out;
}

inline Tensor gelu(const Tensor& a) {
    bool track = detail::track(a);
    Tensor out = detail::make_output(a.rows(), a.cols(), track);
    auto* o = out.node();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (std::size_t i = 0; i < o->v.size(); ++i) {
        double x = a.data()[i];
        o->v[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    detail::check_finite(out, "gelu");
    if (track) {
        detail::record("gelu", [a, out]() {
            const auto& og = out.node()->g;
            constexpr double is2 = 0.70710678118654752440;
            constexpr double inv_sqrt2pi = 0.39894228040143267794;
            for (std::size_t i = 0; i < og.size(); ++i) {
                double x = a.data()[i];
                double cdf = 0.5 * (1.0 + std::erf(x * is2));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                a.node()->g[i] += og[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

// ---- matrix ops ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions disagree, " + a.shape_str() + " x " + b.shape_str());
    bool track = detail::track(a) || detail::track(b);
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = detail::make_output(m, n, track);
    auto* o = out.node();
    const double* av = a.data().data();
    const double* bv = b.data().data();
    double* ov = o->v.data();
    for (int i = 0; i < m; ++i) {
        double* orow = ov + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = av[static_cast<std::size_t>(i) * k + p];
            if (aip == 0.0) continue;
            const double* brow = bv + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    detail::check_finite(out, "matmul");
    if (track) {
        detail::record("matmul", [a, b, out, m, k, n]() {
            const double* og = out.node()->g.data();
            if (a.requires_grad()) {
                double* ag = a.node()->g.data();
                const double* bv2 = b.data().data();
                // dA = dC * B^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (int j = 0; j < n; ++j)
                            s += og[static_cast<std::size_t>(i) * n + j] * bv2[static_cast<std::size_t>(p) * n + j];
                        ag[static_cast<std::size_t>(i) * k + p] += s;
                    }
            }
            if (b.requires_grad()) {
                double* bg = b.node()->g.data();
                const double* av2 = a.data().data();
                // dB = A^T * dC
                for (int i = 0; i < m; ++i) {
                    const double* arow = av2 + static_cast<std::size_t>(i) * k;
                    const double* grow = og + static_cast<std::size_t>(i) * n;
                    for (int p = 0; p < k; ++p) {
                        const double aip = arow[p];
                        if (aip == 0.0) continue;
                        double* brow = bg + static_cast<std::size_t>(p) * n;
                        for (int j = 0; j < n; ++j) brow[j] += aip * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    bool track = detail::track(a);
    const int m = a.rows(), n = a.cols();
    Tensor out = detail::make_output(n, m, track);
    auto* o = out.node();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            o->v[static_cast<std::size_t>(j) * m + i] = a.at(i, j);
    if (track) {
        detail::record("transpose", [a, out, m, n]() {
            const auto& og = out.node()->g;
            auto& ag = a.node()->g;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    ag[static_cast<std::size_t>(i) * n + j] += og[static_cast<std::size_t>(j) * m + i];
        });
    }
    return out;
}

// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& a) {
    bool track = detail::track(a);
    const int m = a.rows(), n = a.cols();
    Tensor out = detail::make_output(m, n, track);
    auto* o = out.node();
    for (int i = 0; i < m; ++i) {
        double mx = a.at(i, 0);
        for (int j = 1; j < n; ++j) mx = std::max(mx, a.at(i, j));
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            double e = std::exp(a.at(i, j) - mx);
            o->v[static_cast<std::size_t>(i) * n + j] = e;
            sum += e;
        }
        for (int j = 0; j < n; ++j) o->v[static_cast<std::size_t>(i) * n + j] /= sum;
    }
    detail::check_finite(out, "softmax_rows");
    if (track) {
        detail::record("softmax_rows", [a, out, m, n]() {
            const auto& og = out.node()->g;
            const auto& y = out.data();
            auto& ag = a.node()->g;
            for (int i = 0; i < m; ++i) {
                double dot = 0.0;
                for (int j = 0; j < n; ++j)
                    dot += og[static_cast<std::size_t>(i) * n + j] * y[static_cast<std::size_t>(i) * n + j];
                for (int j = 0; j < n; ++j) {
                    std::size_t idx = static_cast<std::size_t>(i) * n + j;
                    ag[idx] += y[idx] * (og[idx] - dot);
                }
            }
        });
    }
    return out;
}

// Per-row normalization with learnable scale/shift (gamma, beta: 1 x d).
inline Tensor layer_norm_rows(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                              double eps = 1e-5) {
    if (gamma.rows() != 1 || gamma.cols() != a.cols() || beta.rows() != 1 || beta.cols() != a.cols())
        throw ShapeError("layer_norm_rows: scale/shift must be 1x" + std::to_string(a.cols()));
    bool track = detail::track(a) || detail::track(gamma) || detail::track(beta);
    const int m = a.rows(), n = a.cols();
    Tensor out = detail::make_output(m, n, track);
    auto* o = out.node();
    std::vector<double> xhat(static_cast<std::size_t>(m) * n);
    std::vector<double> inv_sd(m);
    for (int i = 0; i < m; ++i) {
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += a.at(i, j);
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            double dv = a.at(i, j) - mean;
            var += dv * dv;
        }
        var /= n;
        double isd = 1.0 / std::sqrt(var + eps);
        inv_sd[i] = isd;
        for (int j = 0; j < n; ++j) {
            std::size_t idx = static_cast<std::size_t>(i) * n + j;
            xhat[idx] = (a.at(i, j) - mean) * isd;
            o->v[idx] = xhat[idx] * gamma.data()[j] + beta.data()[j];
        }
    }
    detail::check_finite(out, "layer_norm_rows");
    if (track) {
        detail::record("layer_norm_rows",
                       [a, gamma, beta, out, m, n, xhat = std::move(xhat), inv_sd = std::move(inv_sd)]() {
            const auto& og = out.node()->g;
            for (int i = 0; i < m; ++i) {
                double mean_gdy = 0.0, mean_gdy_x = 0.0;
                for (int j = 0; j < n; ++j) {
                    std::size_t idx = static_cast<std::size_t>(i) * n + j;
                    double gdy = og[idx] * gamma.data()[j];
                    mean_gdy += gdy;
                    mean_gdy_x += gdy * xhat[idx];
                }
                mean_gdy /= n;
                mean_gdy_x /= n;
                if (a.requires_grad()) {
                    auto& ag = a.node()->g;
                    for (int j = 0; j < n; ++j) {
                        std::size_t idx = static_cast<std::size_t>(i) * n + j;
                        double gdy = og[idx] * gamma.data()[j];
                        ag[idx] += (gdy - mean_gdy - xhat[idx] * mean_gdy_x) * inv_sd[i];
                    }
                }
                if (gamma.requires_grad()) {
                    auto& gg = gamma.node()->g;
                    for (int j = 0; j < n; ++j) {
                        std::size_t idx = static_cast<std::size_t>(i) * n + j;
                        gg[j] += og[idx] * xhat[idx];
                    }
                }
                if (beta.requires_grad()) {
                    auto& bg = beta.node()->g;
                    for (int j = 0; j < n; ++j)
                        bg[j] += og[static_cast<std::size_t>(i) * n + j];
                }
            }
        });
    }
    return out;
}

// ---- reductions ----

inline Tensor mean_rows(const Tensor& a) {
    bool track = detail::track(a);
    const int m = a.rows(), n = a.cols();
    Tensor out = detail::make_output(1, n, track);
    auto* o = out.node();
    for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int i = 0; i < m; ++i) s += a.at(i, j);
        o->v[j] = s / m;
    }
    detail::check_finite(out, "mean_rows");
    if (track) {
        detail::record("mean_rows", [a, out, m, n]() {
            const auto& og = out.node()->g;
            auto& ag = a.node()->g;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    ag[static_cast<std::size_t>(i) * n + j] += og[j] / m;
        });
    }
    return out;
}

inline Tensor sum_all(const Tensor& a) {
    bool track = detail::track(a);
    Tensor out = detail::make_output(1, 1, track);
    double s = 0.0;
    for (double x : a.data()) s += x;
    out.node()->v[0] = s;
    detail::check_finite(out, "sum_all");
    if (track) {
        detail::record("sum_all", [a, out]() {
            double g = out.node()->g[0];
            for (auto& x : a.node()->g) x += g;
        });
    }
    return out;
}

// Stable log(sum(exp(x))) over every entry.
inline Tensor logsumexp_all(const Tensor& a) {
    bool track = detail::track(a);
    Tensor out = detail::make_output(1, 1, track);
    double mx = a.data()[0];
    for (double x : a.data()) mx = std::max(mx, x);
    double s = 0.0;
    for (double x : a.data()) s += std::exp(x - mx);
    out.node()->v[0] = mx + std::log(s);
    detail::check_finite(out, "logsumexp_all");
    if (track) {
        detail::record("logsumexp_all", [a, out]() {
            double g = out.node()->g[0];
            double lse = out.node()->v[0];
            auto& ag = a.node()->g;
            for (std::size_t i = 0; i < ag.size(); ++i)
                ag[i] += g * std::exp(a.data()[i] - lse);
        });
    }
    return out;
}

// ---- structural ops ----

inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
    if (r0 < 0 || r1 > a.rows() || r0 >= r1)
        throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                         ") for " + a.shape_str());
    bool track = detail::track(a);
    const int n = a.cols();
    Tensor out = detail::make_output(r1 - r0, n, track);
    auto* o = out.node();
    for (int i = r0; i < r1; ++i)
        for (int j = 0; j < n; ++j)
            o->v[static_cast<std::size_t>(i - r0) * n + j] = a.at(i, j);
    if (track) {
        detail::record("slice_rows", [a, out, r0, n]() {
            const auto& og = out.node()->g;
            auto& ag = a.node()->g;
            const int m = out.rows();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    ag[static_cast<std::size_t>(i + r0) * n + j] += og[static_cast<std::size_t>(i) * n + j];
        });
    }
    return out;
}

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
    if (c0 < 0 || c1 > a.cols() || c0 >= c1)
        throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                         ") for " + a.shape_str());
    bool track = detail::track(a);
    const int m = a.rows(), n = a.cols(), w = c1 - c0;
    Tensor out = detail::make_output(m, w, track);
    auto* o = out.node();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
            o->v[static_cast<std::size_t>(i) * w + j] = a.at(i, c0 + j);
    if (track) {
        detail::record("slice_cols", [a, out, c0, m, n, w]() {
            const auto& og = out.node()->g;
            auto& ag = a.node()->g;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j)
                    ag[static_cast<std::size_t>(i) * n + c0 + j] += og[static_cast<std::size_t>(i) * w + j];
        });
    }
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const int n = parts[0].cols();
    int m = 0;
    bool track = false;
    for (const auto& p : parts) {
        if (p.cols() != n) throw ShapeError("concat_rows: column mismatch");
        m += p.rows();
        track = track || detail::track(p);
    }
    Tensor out = detail::make_output(m, n, track);
    auto* o = out.node();
    int row = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < p.rows(); ++i)
            for (int j = 0; j < n; ++j)
                o->v[static_cast<std::size_t>(row + i) * n + j] = p.at(i, j);
        row += p.rows();
    }
    if (track) {
        detail::record("concat_rows", [parts, out, n]() {
            const auto& og = out.node()->g;
            int row = 0;
            for (const auto& p : parts) {
                if (p.requires_grad()) {
                    auto& pg = p.node()->g;
                    for (int i = 0; i < p.rows(); ++i)
                        for (int j = 0; j < n; ++j)
                            pg[static_cast<std::size_t>(i) * n + j] +=
                                og[static_cast<std::size_t>(row + i) * n + j];
                }
                row += p.rows();
            }
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int m = parts[0].rows();
    int n = 0;
    bool track = false;
    for (const auto& p : parts) {
        if (p.rows() != m) throw ShapeError("concat_cols: row mismatch");
        n += p.cols();
        track = track || detail::track(p);
    }
    Tensor out = detail::make_output(m, n, track);
    auto* o = out.node();
    int col = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < p.cols(); ++j)
                o->v[static_cast<std::size_t>(i) * n + col + j] = p.at(i, j);
        col += p.cols();
    }
    if (track) {
        detail::record("concat_cols", [parts, out, m, n]() {
            const auto& og = out.node()->g;
            int col = 0;
            for (const auto& p : parts) {
                if (p.requires_grad()) {
                    auto& pg = p.node()->g;
                    const int w = p.cols();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            pg[static_cast<std::size_t>(i) * w + j] +=
                                og[static_cast<std::size_t>(i) * n + col + j];
                }
                col += p.cols();
            }
        });
    }
    return out;
}

inline Tensor gather_rows(const Tensor& a, const std::vector<int>& indices) {
    if (indices.empty()) throw ShapeError("gather_rows: empty index list");
    for (int ix : indices)
        if (ix < 0 || ix >= a.rows())
            throw ShapeError("gather_rows: index " + std::to_string(ix) + " out of range for " + a.shape_str());
    bool track = detail::track(a);
    const int n = a.cols();
    Tensor out = detail::make_output(static_cast<int>(indices.size()), n, track);
    auto* o = out.node();
    for (std::size_t i = 0; i < indices.size(); ++i)
        for (int j = 0; j < n; ++j)
            o->v[i * n + j] = a.at(indices[i], j);
    if (track) {
        detail::record("gather_rows", [a, out, indices, n]() {
            const auto& og = out.node()->g;
            auto& ag = a.node()->g;
            for (std::size_t i = 0; i < indices.size(); ++i)
                for (int j = 0; j < n; ++j)
                    ag[static_cast<std::size_t>(indices[i]) * n + j] += og[i * n + j];
        });
    }
    return out;
}

// ---- reverse pass ----

inline void backward(Tape& tape, const Tensor& loss) {
    if (!loss.defined() || !loss.is_scalar())
        throw NumericError("backward: loss must be a scalar tensor");
    if (!loss.requires_grad())
        throw NumericError("backward: loss was not produced under a recording tape");
    loss.node()->g[0] = 1.0;
    for (auto it = tape.records.rbegin(); it != tape.records.rend(); ++it) it->backward();
}

}  // namespace rasa
