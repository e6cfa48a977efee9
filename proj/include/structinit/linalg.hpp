#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace structinit {

/// Raised when operand shapes do not fit together. The message names both shapes.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Row-major dense matrix of doubles.
class DenseMatrix {
public:
    DenseMatrix() = default;

    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw DimensionError("DenseMatrix: data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(rows_, cols_));
        }
    }

    DenseMatrix(std::initializer_list<std::initializer_list<double>> init) {
        rows_ = init.size();
        cols_ = rows_ == 0 ? 0 : init.begin()->size();
        data_.reserve(rows_ * cols_);
        for (const auto& row : init) {
            if (row.size() != cols_) throw DimensionError("DenseMatrix: ragged initializer");
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    std::string shape() const { return shape_string(rows_, cols_); }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

    static std::string shape_string(std::size_t r, std::size_t c) {
        return std::to_string(r) + "x" + std::to_string(c);
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace detail {

inline void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(what) + ": shape mismatch " + a.shape() + " vs " + b.shape());
    }
}

}  // namespace detail

inline DenseMatrix transpose(const DenseMatrix& a) {
    DenseMatrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

/// a * b. The inner loop runs along rows of b so it vectorizes.
inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions differ, " + a.shape() + " * " + b.shape());
    }
    DenseMatrix c(a.rows(), b.cols());
    const std::size_t inner = a.cols();
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* out = c.row(i).data();
        for (std::size_t k = 0; k < inner; ++k) {
            const double s = a(i, k);
            if (s == 0.0) continue;
            const double* src = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) out[j] += s * src[j];
        }
    }
    return c;
}

/// aᵀ * b without materializing the transpose.
inline DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows() != b.rows()) {
        throw DimensionError("matmul_tn: row counts differ, " + a.shape() + "^T * " + b.shape());
    }
    DenseMatrix c(a.cols(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* src = b.row(k).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double s = a(k, i);
            if (s == 0.0) continue;
            double* out = c.row(i).data();
            for (std::size_t j = 0; j < n; ++j) out[j] += s * src[j];
        }
    }
    return c;
}

/// a * bᵀ.
inline DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: column counts differ, " + a.shape() + " * " + b.shape() + "^T");
    }
    return matmul(a, transpose(b));
}

inline DenseMatrix scaled(DenseMatrix a, double s) {
    for (double& v : a.data()) v *= s;
    return a;
}

inline DenseMatrix add(DenseMatrix a, const DenseMatrix& b) {
    detail::require_same_shape(a, b, "add");
    auto dst = a.data();
    auto src = b.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    return a;
}

inline DenseMatrix subtract(DenseMatrix a, const DenseMatrix& b) {
    detail::require_same_shape(a, b, "subtract");
    auto dst = a.data();
    auto src = b.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= src[i];
    return a;
}

inline double frobenius_sq(const DenseMatrix& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return s;
}

inline double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
    detail::require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

/// Row-wise softmax with per-row max subtraction.
inline DenseMatrix softmax_rows(const DenseMatrix& logits) {
    DenseMatrix out(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto in = logits.row(r);
        auto dst = out.row(r);
        if (in.empty()) continue;
        const double mx = *std::max_element(in.begin(), in.end());
        double sum = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            dst[j] = std::exp(in[j] - mx);
            sum += dst[j];
        }
        const double inv = 1.0 / sum;
        for (double& v : dst) v *= inv;
    }
    return out;
}

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Per-row normalization to zero mean and unit population variance.
/// No learned gain or bias.
inline DenseMatrix layer_norm_rows(const DenseMatrix& x, double epsilon = kLayerNormEpsilon) {
    if (x.cols() < 2) {
        throw std::invalid_argument("layer_norm_rows: need at least 2 columns, got " + x.shape());
    }
    if (!(epsilon >= 0.0)) throw std::invalid_argument("layer_norm_rows: epsilon must be >= 0");
    DenseMatrix out(x.rows(), x.cols());
    const double inv_cols = 1.0 / static_cast<double>(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        auto dst = out.row(r);
        const double mean = std::accumulate(in.begin(), in.end(), 0.0) * inv_cols;
        double var = 0.0;
        for (double v : in) var += (v - mean) * (v - mean);
        var *= inv_cols;
        const double denom = std::sqrt(var + epsilon);
        if (denom == 0.0) {
            std::fill(dst.begin(), dst.end(), 0.0);
            continue;
        }
        for (std::size_t j = 0; j < in.size(); ++j) dst[j] = (in[j] - mean) / denom;
    }
    return out;
}

struct SingularSpectrumEstimate {
    double sigma_max = 0.0;
    double frobenius_sq = 0.0;
    std::size_t iterations_used = 0;

    double stable_rank() const { return frobenius_sq / (sigma_max * sigma_max); }
};

inline constexpr std::size_t kPowerIterationMaxIter = 1000;
inline constexpr double kPowerIterationTol = 1e-10;

/// Largest singular value by power iteration on xᵀx, together with ‖x‖_F².
/// Converged when the Rayleigh quotient changes by less than tol (relative).
inline SingularSpectrumEstimate estimate_spectrum(const DenseMatrix& x,
                                                  std::size_t max_iter = kPowerIterationMaxIter,
                                                  double tol = kPowerIterationTol) {
    SingularSpectrumEstimate est;
    est.frobenius_sq = frobenius_sq(x);
    if (x.empty() || est.frobenius_sq == 0.0) {
        throw std::invalid_argument("stable rank undefined for a zero matrix");
    }

    // Deterministic start vector: splitmix-style hash of the index, mapped to (0.5, 1.5).
    // All-positive entries avoid starting orthogonal to the top singular vector in the
    // common nonnegative cases.
    std::vector<double> v(x.cols());
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::uint64_t z = 0x5EEDULL + 0x9E3779B97F4A7C15ULL * (i + 1);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        z ^= z >> 31;
        v[i] = 0.5 + static_cast<double>(z >> 11) * 0x1.0p-53;
    }
    auto normalize = [](std::vector<double>& u) {
        double n = 0.0;
        for (double e : u) n += e * e;
        n = std::sqrt(n);
        if (n > 0.0)
            for (double& e : u) e /= n;
        return n;
    };
    normalize(v);

    std::vector<double> xv(x.rows());
    double lambda = 0.0;
    for (std::size_t it = 1; it <= std::max<std::size_t>(max_iter, 1); ++it) {
        for (std::size_t r = 0; r < x.rows(); ++r) {
            auto row = x.row(r);
            xv[r] = std::inner_product(row.begin(), row.end(), v.begin(), 0.0);
        }
        const double rayleigh = std::inner_product(xv.begin(), xv.end(), xv.begin(), 0.0);
        std::fill(v.begin(), v.end(), 0.0);
        for (std::size_t r = 0; r < x.rows(); ++r) {
            auto row = x.row(r);
            for (std::size_t c = 0; c < x.cols(); ++c) v[c] += row[c] * xv[r];
        }
        est.iterations_used = it;
        const bool converged = it > 1 && std::abs(rayleigh - lambda) <= tol * rayleigh;
        lambda = rayleigh;
        if (converged || normalize(v) == 0.0) break;
    }
    est.sigma_max = std::sqrt(lambda);
    return est;
}

/// ‖x‖_F² / σ_max².
inline double stable_rank(const DenseMatrix& x, std::size_t max_iter = kPowerIterationMaxIter,
                          double tol = kPowerIterationTol) {
    return estimate_spectrum(x, max_iter, tol).stable_rank();
}

struct LeastSquaresSolution {
    std::vector<double> x;
    std::size_t rank = 0;
    double residual_norm = 0.0;
};

/// Minimizes ‖a·x − b‖₂ with Householder QR and column pivoting.
/// Columns beyond the numerical rank get zero weight (basic solution).
inline LeastSquaresSolution least_squares(const DenseMatrix& a, std::span<const double> b) {
    if (b.size() != a.rows()) {
        throw DimensionError("least_squares: rhs length " + std::to_string(b.size()) +
                             " does not match matrix " + a.shape());
    }
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    DenseMatrix r = a;
    std::vector<double> qtb(b.begin(), b.end());
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::vector<double> col_norm_sq(n, 0.0);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < m; ++i) col_norm_sq[j] += r(i, j) * r(i, j);

    const std::size_t steps = std::min(m, n);
    double r00 = 0.0;
    std::size_t rank = 0;
    const double rank_tol = static_cast<double>(std::max(m, n)) * std::numeric_limits<double>::epsilon();
    for (std::size_t k = 0; k < steps; ++k) {
        // Recompute remaining column norms exactly; the systems here are small.
        std::size_t best = k;
        double best_norm = -1.0;
        for (std::size_t j = k; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = k; i < m; ++i) s += r(i, j) * r(i, j);
            col_norm_sq[j] = s;
            if (s > best_norm) {
                best_norm = s;
                best = j;
            }
        }
        if (best != k) {
            for (std::size_t i = 0; i < m; ++i) std::swap(r(i, k), r(i, best));
            std::swap(perm[k], perm[best]);
            std::swap(col_norm_sq[k], col_norm_sq[best]);
        }
        const double norm = std::sqrt(best_norm);
        if (k == 0) r00 = norm;
        if (norm <= rank_tol * r00 || norm == 0.0) break;
        ++rank;

        // Householder reflector zeroing r(k+1.., k).
        const double alpha = r(k, k) > 0.0 ? -norm : norm;
        std::vector<double> v(m - k);
        v[0] = r(k, k) - alpha;
        for (std::size_t i = k + 1; i < m; ++i) v[i - k] = r(i, k);
        double vnorm_sq = 0.0;
        for (double e : v) vnorm_sq += e * e;
        if (vnorm_sq > 0.0) {
            for (std::size_t j = k; j < n; ++j) {
                double dot = 0.0;
                for (std::size_t i = k; i < m; ++i) dot += v[i - k] * r(i, j);
                const double f = 2.0 * dot / vnorm_sq;
                for (std::size_t i = k; i < m; ++i) r(i, j) -= f * v[i - k];
            }
            double dot = 0.0;
            for (std::size_t i = k; i < m; ++i) dot += v[i - k] * qtb[i];
            const double f = 2.0 * dot / vnorm_sq;
            for (std::size_t i = k; i < m; ++i) qtb[i] -= f * v[i - k];
        }
        r(k, k) = alpha;
        for (std::size_t i = k + 1; i < m; ++i) r(i, k) = 0.0;
    }

    std::vector<double> z(rank, 0.0);
    for (std::size_t kk = rank; kk-- > 0;) {
        double s = qtb[kk];
        for (std::size_t j = kk + 1; j < rank; ++j) s -= r(kk, j) * z[j];
        z[kk] = s / r(kk, kk);
    }
    LeastSquaresSolution sol;
    sol.x.assign(n, 0.0);
    for (std::size_t kk = 0; kk < rank; ++kk) sol.x[perm[kk]] = z[kk];
    sol.rank = rank;

    double res = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double s = -b[i];
        for (std::size_t j = 0; j < n; ++j) s += a(i, j) * sol.x[j];
        res += s * s;
    }
    sol.residual_norm = std::sqrt(res);
    return sol;
}

}  // namespace structinit
