#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "facm/tensor.hpp"

namespace facm::ad {

/// Thrown when a tangent has to flow through a primitive that has no
/// forward-mode rule.
class UnimplementedPrimitive : public std::logic_error {
public:
    explicit UnimplementedPrimitive(std::string primitive);
    const std::string& primitive() const noexcept { return primitive_; }

private:
    std::string primitive_;
};

/// Primal/tangent pair produced by a forward-mode sweep.
struct DualTensor {
    Tensor primal;
    Tensor tangent;

    DualTensor() = default;
    DualTensor(Tensor p, Tensor t);
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    /// Forward-mode tangent; an empty tensor stands for an identically zero tangent.
    const Tensor& tangent() const;
    bool has_tangent() const { return !tangent().empty(); }
    bool requires_grad() const;
    const Shape& shape() const { return value().shape(); }

    Tape& tape() const;
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

struct NamedVar {
    std::string name;
    Var var;
};

struct GradientMap {
    std::map<std::string, Tensor> grads;
    bool non_finite = false;
    std::vector<std::string> non_finite_params;

    const Tensor& at(const std::string& name) const { return grads.at(name); }
    double global_norm() const;
};

using ValueList = std::span<const Tensor* const>;
/// Recomputes a node's value from its inputs' values.
using EvalFn = std::function<Tensor(ValueList inputs)>;
/// Writes d(loss)/d(input_i) into grad_in[i] for every i with needs[i] set.
using BackwardFn = std::function<void(ValueList inputs, const Tensor& output, const Tensor& grad_out,
                                      std::span<Tensor> grad_in, std::span<const bool> needs)>;
/// Forward-mode rule; tangents[i] is null when input i has a zero tangent.
using TangentFn = std::function<Tensor(ValueList inputs, const Tensor& output, ValueList tangents)>;

/// Records primitive applications for one loss evaluation. Values carry an
/// optional forward-mode tangent that is propagated eagerly as each record is
/// made, so a JVP costs one forward sweep. The tangent is never differentiated
/// by the reverse sweep.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var input(Tensor value, Tensor tangent = {});
    Var parameter(std::string name, Tensor value);

    Var record(const char* op, std::vector<Var> inputs, EvalFn eval, BackwardFn backward,
               TangentFn tangent);

    const std::vector<NamedVar>& parameters() const noexcept { return params_; }
    std::size_t size() const noexcept { return nodes_.size(); }
    bool consumed() const noexcept { return consumed_; }

    /// Recomputes every recorded node from its inputs and reports whether all
    /// values match the recorded ones bit for bit.
    bool replay_matches() const;

    void reset();

private:
    friend class Var;
    friend GradientMap gradient(const Var& loss, std::span<const NamedVar> params);

    struct Node {
        const char* op = "leaf";
        std::vector<std::size_t> inputs;
        Tensor value;
        Tensor tangent;
        bool requires_grad = false;
        EvalFn eval;
        BackwardFn backward;
    };

    Var push(Node node);
    void check_usable() const;

    std::deque<Node> nodes_;
    std::vector<NamedVar> params_;
    bool consumed_ = false;
};

/// Reverse sweep from a scalar loss. Every listed parameter gets an entry;
/// parameters the loss does not depend on get zeros. Consumes the tape.
GradientMap gradient(const Var& loss, std::span<const NamedVar> params);
GradientMap gradient(const Var& loss);

/// Evaluates f on fresh inputs seeded with the given tangents and returns the
/// output together with J_f · tangents.
DualTensor jvp(const std::function<Var(Tape&, std::span<const Var>)>& f, std::span<const Tensor> inputs,
               std::span<const Tensor> tangents);

// Primitives. All support reverse mode and forward mode.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
/// x (B×D) plus a bias vector (D) broadcast over rows.
Var add_bias(const Var& x, const Var& bias);
Var silu(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var dot(const Var& a, const Var& b);
Var l2norm(const Var& a);
/// Sum across columns of a rank-2 value, shape {rows}.
Var row_sum(const Var& a);
/// Pass-through derivative inside [lo, hi], zero outside.
Var clamp(const Var& a, double lo, double hi);
/// Rows of `table` picked by index, shape {indices.size(), cols}.
Var gather_rows(const Var& table, std::vector<std::size_t> indices);
/// Column j of a rank-2 value as a (rows×1) matrix.
Var select_col(const Var& a, std::size_t j);
/// Per-row 1 − a·b / (‖a‖‖b‖); rows where either norm is below 1e-12 give 0
/// with zero derivative.
Var cosine_distance_rows(const Var& a, const Var& b);

inline constexpr double kDegenerateNorm = 1e-12;

}  // namespace facm::ad
