#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace facm {

/// Raised when a caller breaks an operation's preconditions (shape mismatch,
/// out-of-range argument, misuse of a consumed tape, ...).
class ContractViolation : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. A default-constructed tensor is empty
/// (shape {0}); a scalar has shape {} and one element.
class Tensor {
public:
    Tensor();
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);
    static Tensor vector(std::initializer_list<double> values);
    static Tensor vector(std::vector<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // rank-2 helpers; a rank-1 tensor is treated as a single row
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    /// Value of a one-element tensor.
    double item() const;

    Tensor reshaped(Shape shape) const;

    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
    bool all_finite() const noexcept;

    /// Bit-level equality of shape and payload (distinguishes -0.0 and NaN payloads).
    bool bitwise_equal(const Tensor& other) const noexcept;

private:
    Shape shape_;
    std::vector<double> data_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

// Plain value arithmetic. These never record anything; the taped versions
// live in facm::ad.
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);
Tensor operator*(double s, const Tensor& a);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor& axpy(double alpha, const Tensor& x, Tensor& y);

/// C = A · B for rank-2 A (m×k) and B (k×n).
Tensor matmul(const Tensor& a, const Tensor& b);
/// C = Aᵀ · B for A (m×k) and B (m×n).
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// C = A · Bᵀ for A (m×k) and B (n×k).
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

double sum(const Tensor& a);
double mean(const Tensor& a);
double dot(const Tensor& a, const Tensor& b);
double l2norm(const Tensor& a);
double max_abs(const Tensor& a);
/// Per-row squared norm of a rank-2 tensor, shape {rows}.
Tensor row_sqnorm(const Tensor& a);

Tensor silu(const Tensor& a);

struct ClampStats {
    std::size_t clamped = 0;
    std::size_t nan = 0;
    bool saw_nan() const noexcept { return nan > 0; }
};

/// Elementwise min(max(x, lo), hi). NaN entries stay NaN and are counted in
/// `stats`. Throws ContractViolation when lo > hi.
Tensor clamp(const Tensor& x, double lo, double hi, ClampStats* stats = nullptr);

}  // namespace facm
