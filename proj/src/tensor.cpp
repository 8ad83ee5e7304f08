#include "facm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "facm/parallel.hpp"

namespace facm {
namespace {

std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw ContractViolation(std::string(op) + ": expected rank-2 tensor, got " +
                                shape_string(t.shape()));
}

// Work (multiply-adds) below which matmul stays on the calling thread.
constexpr std::size_t kParallelWork = 1u << 18;

}  // namespace

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

Tensor::Tensor() : shape_{0} {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size())
        throw ContractViolation("Tensor: shape " + shape_string(shape_) + " does not hold " +
                                std::to_string(data_.size()) + " values");
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor(Shape{rows, cols}, std::vector<double>(values));
}

std::size_t Tensor::rows() const {
    if (rank() == 2) return shape_[0];
    if (rank() == 1) return 1;
    throw ContractViolation("rows(): tensor of shape " + shape_string(shape_));
}

std::size_t Tensor::cols() const {
    if (rank() == 2) return shape_[1];
    if (rank() == 1) return shape_[0];
    throw ContractViolation("cols(): tensor of shape " + shape_string(shape_));
}

double Tensor::item() const {
    if (data_.size() != 1)
        throw ContractViolation("item(): tensor of shape " + shape_string(shape_) + " is not a scalar");
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool Tensor::bitwise_equal(const Tensor& other) const noexcept {
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ContractViolation(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
}

Tensor operator+(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

Tensor operator-(const Tensor& a) {
    Tensor out = a;
    for (double& v : out.data()) v = -v;
    return out;
}

Tensor operator*(double s, const Tensor& a) {
    Tensor out = a;
    for (double& v : out.data()) v *= s;
    return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

Tensor& axpy(double alpha, const Tensor& x, Tensor& y) {
    require_same_shape(x, y, "axpy");
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
    return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw ContractViolation("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()));
    Tensor c(Shape{m, n});
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* C = c.data().data();
    // Four output rows share each loaded row of B; every element still sums over p in order.
    auto rows = [&](std::size_t lo, std::size_t hi) {
        std::size_t i = lo;
        for (; i + 4 <= hi; i += 4) {
            double* __restrict c0 = C + i * n;
            double* __restrict c1 = c0 + n;
            double* __restrict c2 = c1 + n;
            double* __restrict c3 = c2 + n;
            const double* a0 = A + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const double s0 = a0[p], s1 = a0[k + p], s2 = a0[2 * k + p], s3 = a0[3 * k + p];
                const double* __restrict bp = B + p * n;
                for (std::size_t j = 0; j < n; ++j) {
                    const double b = bp[j];
                    c0[j] += s0 * b;
                    c1[j] += s1 * b;
                    c2[j] += s2 * b;
                    c3[j] += s3 * b;
                }
            }
        }
        for (; i < hi; ++i) {
            double* __restrict ci = C + i * n;
            const double* ai = A + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const double s = ai[p];
                const double* __restrict bp = B + p * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += s * bp[j];
            }
        }
    };
    if (m * n * k < kParallelWork) rows(0, m);
    else parallel_for(m, 8, rows);
    return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_tn");
    require_rank2(b, "matmul_tn");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != m)
        throw ContractViolation("matmul_tn: row counts differ " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
    Tensor c(Shape{k, n});
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* C = c.data().data();
    // Output rows are split across workers; each keeps the i-ascending sum order.
    auto rows = [&](std::size_t lo, std::size_t hi) {
        std::size_t i = 0;
        for (; i + 4 <= m; i += 4) {
            const double* a0 = A + i * k;
            const double* __restrict b0 = B + i * n;
            const double* __restrict b1 = b0 + n;
            const double* __restrict b2 = b1 + n;
            const double* __restrict b3 = b2 + n;
            for (std::size_t p = lo; p < hi; ++p) {
                const double s0 = a0[p], s1 = a0[k + p], s2 = a0[2 * k + p], s3 = a0[3 * k + p];
                double* __restrict cp = C + p * n;
                for (std::size_t j = 0; j < n; ++j) {
                    double c = cp[j];
                    c += s0 * b0[j];
                    c += s1 * b1[j];
                    c += s2 * b2[j];
                    c += s3 * b3[j];
                    cp[j] = c;
                }
            }
        }
        for (; i < m; ++i) {
            const double* ai = A + i * k;
            const double* __restrict bi = B + i * n;
            for (std::size_t p = lo; p < hi; ++p) {
                const double s = ai[p];
                double* __restrict cp = C + p * n;
                for (std::size_t j = 0; j < n; ++j) cp[j] += s * bi[j];
            }
        }
    };
    if (m * n * k < kParallelWork) rows(0, k);
    else parallel_for(k, 8, rows);
    return c;
}

Tensor transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    Tensor t(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
    return t;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul(a, transpose(b)); }

double sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return s;
}

double mean(const Tensor& a) {
    if (a.empty()) throw ContractViolation("mean: empty tensor");
    return sum(a) / static_cast<double>(a.size());
}

double dot(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double l2norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (double v : a.data()) {
        if (std::isnan(v)) return v;
        m = std::max(m, std::abs(v));
    }
    return m;
}

Tensor row_sqnorm(const Tensor& a) {
    require_rank2(a, "row_sqnorm");
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out(Shape{m});
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * a[i * n + j];
        out[i] = s;
    }
    return out;
}

Tensor silu(const Tensor& a) {
    Tensor out = a;
    for (double& v : out.data()) v = v / (1.0 + std::exp(-v));
    return out;
}

Tensor clamp(const Tensor& x, double lo, double hi, ClampStats* stats) {
    if (lo > hi)
        throw ContractViolation("clamp: lower bound " + std::to_string(lo) + " exceeds upper bound " +
                                std::to_string(hi));
    Tensor out = x;
    ClampStats local;
    for (double& v : out.data()) {
        if (std::isnan(v)) {
            ++local.nan;
        } else if (v < lo) {
            v = lo;
            ++local.clamped;
        } else if (v > hi) {
            v = hi;
            ++local.clamped;
        }
    }
    if (stats) *stats = local;
    return out;
}

}  // namespace facm
