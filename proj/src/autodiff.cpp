#include "facm/autodiff.hpp"

#include <cmath>
#include <memory>

namespace facm::ad {
namespace {

Tensor elementwise(const Tensor& a, double (*f)(double)) {
    Tensor out = a;
    for (double& v : out.data()) v = f(v);
    return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double silu_derivative(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

Tensor broadcast_rows(const Tensor& row, std::size_t rows) {
    const std::size_t n = row.size();
    Tensor out(Shape{rows, n});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j];
    return out;
}

Tensor column_sums(const Tensor& m, const Shape& shape) {
    const std::size_t rows = m.rows(), cols = m.cols();
    Tensor out(shape);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[j] += m[i * cols + j];
    return out;
}

Tensor add_tangents(const Tensor* a, const Tensor* b) {
    if (a && b) return *a + *b;
    if (a) return *a;
    if (b) return *b;
    return {};
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw ContractViolation(std::string(op) + ": expected rank-2 value, got " + shape_string(t.shape()));
}

Tape& same_tape(const Var& a, const Var& b, const char* op) {
    if (&a.tape() != &b.tape()) throw ContractViolation(std::string(op) + ": operands live on different tapes");
    return a.tape();
}

}  // namespace

UnimplementedPrimitive::UnimplementedPrimitive(std::string primitive)
    : std::logic_error("no forward-mode rule for primitive '" + primitive + "'"), primitive_(std::move(primitive)) {}

DualTensor::DualTensor(Tensor p, Tensor t) : primal(std::move(p)), tangent(std::move(t)) {
    if (tangent.empty()) tangent = Tensor(primal.shape());
    require_same_shape(primal, tangent, "DualTensor");
}

const Tensor& Var::value() const { return tape().nodes_.at(id_).value; }
const Tensor& Var::tangent() const { return tape().nodes_.at(id_).tangent; }
bool Var::requires_grad() const { return tape().nodes_.at(id_).requires_grad; }

Tape& Var::tape() const {
    if (!tape_) throw ContractViolation("Var: handle is not attached to a tape");
    return *tape_;
}

void Tape::check_usable() const {
    if (consumed_) throw ContractViolation("Tape: already consumed by a reverse sweep; reset() before reuse");
}

Var Tape::push(Node node) {
    check_usable();
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
    Node n;
    n.op = "constant";
    n.value = std::move(value);
    return push(std::move(n));
}

Var Tape::input(Tensor value, Tensor tangent) {
    if (!tangent.empty()) require_same_shape(value, tangent, "Tape::input tangent");
    Node n;
    n.op = "input";
    n.value = std::move(value);
    n.tangent = std::move(tangent);
    return push(std::move(n));
}

Var Tape::parameter(std::string name, Tensor value) {
    Node n;
    n.op = "parameter";
    n.value = std::move(value);
    n.requires_grad = true;
    Var v = push(std::move(n));
    params_.push_back({std::move(name), v});
    return v;
}

Var Tape::record(const char* op, std::vector<Var> inputs, EvalFn eval, BackwardFn backward, TangentFn tangent) {
    check_usable();
    Node n;
    n.op = op;
    std::vector<const Tensor*> values;
    std::vector<const Tensor*> tangents;
    bool any_tangent = false;
    for (const Var& in : inputs) {
        if (&in.tape() != this) throw ContractViolation(std::string(op) + ": input recorded on another tape");
        const Node& src = nodes_.at(in.id());
        n.inputs.push_back(in.id());
        n.requires_grad = n.requires_grad || src.requires_grad;
        values.push_back(&src.value);
        tangents.push_back(src.tangent.empty() ? nullptr : &src.tangent);
        any_tangent = any_tangent || !src.tangent.empty();
    }
    n.value = eval(values);
    if (any_tangent) {
        if (!tangent) throw UnimplementedPrimitive(op);
        n.tangent = tangent(values, n.value, tangents);
        if (!n.tangent.empty()) require_same_shape(n.value, n.tangent, op);
    }
    n.eval = std::move(eval);
    n.backward = std::move(backward);
    return push(std::move(n));
}

bool Tape::replay_matches() const {
    for (const Node& n : nodes_) {
        if (!n.eval) continue;
        std::vector<const Tensor*> values;
        for (std::size_t id : n.inputs) values.push_back(&nodes_[id].value);
        if (!n.eval(values).bitwise_equal(n.value)) return false;
    }
    return true;
}

void Tape::reset() {
    nodes_.clear();
    params_.clear();
    consumed_ = false;
}

double GradientMap::global_norm() const {
    double s = 0.0;
    for (const auto& [name, g] : grads) s += facm::dot(g, g);
    return std::sqrt(s);
}

GradientMap gradient(const Var& loss, std::span<const NamedVar> params) {
    Tape& tape = loss.tape();
    tape.check_usable();
    if (loss.value().size() != 1)
        throw ContractViolation("gradient: loss must be a scalar, got shape " + shape_string(loss.value().shape()));

    auto& nodes = tape.nodes_;
    std::vector<Tensor> grads(nodes.size());
    grads[loss.id()] = Tensor(loss.value().shape(), 1.0);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
        Tape::Node& n = nodes[id];
        if (grads[id].empty() || !n.backward || !n.requires_grad) continue;
        std::vector<const Tensor*> values;
        std::vector<bool> needs_vec;
        for (std::size_t in : n.inputs) {
            values.push_back(&nodes[in].value);
            needs_vec.push_back(nodes[in].requires_grad);
        }
        std::vector<Tensor> grad_in(n.inputs.size());
        std::unique_ptr<bool[]> needs(new bool[needs_vec.size()]);
        for (std::size_t i = 0; i < needs_vec.size(); ++i) needs[i] = needs_vec[i];
        n.backward(values, n.value, grads[id], grad_in, std::span<const bool>(needs.get(), needs_vec.size()));
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            if (!needs_vec[i] || grad_in[i].empty()) continue;
            Tensor& acc = grads[n.inputs[i]];
            if (acc.empty()) acc = std::move(grad_in[i]);
            else axpy(1.0, grad_in[i], acc);
        }
        if (id != loss.id()) grads[id] = Tensor();
    }

    GradientMap out;
    for (const NamedVar& p : params) {
        if (&p.var.tape() != &tape) throw ContractViolation("gradient: parameter '" + p.name + "' is on another tape");
        Tensor g = grads[p.var.id()].empty() ? Tensor(p.var.value().shape()) : std::move(grads[p.var.id()]);
        if (!g.all_finite()) {
            out.non_finite = true;
            out.non_finite_params.push_back(p.name);
        }
        out.grads[p.name] = std::move(g);
    }
    tape.consumed_ = true;
    return out;
}

GradientMap gradient(const Var& loss) {
    const std::vector<NamedVar> params = loss.tape().parameters();
    return gradient(loss, params);
}

DualTensor jvp(const std::function<Var(Tape&, std::span<const Var>)>& f, std::span<const Tensor> inputs,
               std::span<const Tensor> tangents) {
    if (inputs.size() != tangents.size())
        throw ContractViolation("jvp: " + std::to_string(inputs.size()) + " inputs but " +
                                std::to_string(tangents.size()) + " tangents");
    Tape tape;
    std::vector<Var> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        require_same_shape(inputs[i], tangents[i], "jvp");
        vars.push_back(tape.input(inputs[i], tangents[i]));
    }
    const Var out = f(tape, vars);
    return DualTensor(out.value(), out.tangent());
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "add");
    return same_tape(a, b, "add").record(
        "add", {a, b}, [](ValueList in) { return *in[0] + *in[1]; },
        [](ValueList, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool> needs) {
            if (needs[0]) gi[0] = g;
            if (needs[1]) gi[1] = g;
        },
        [](ValueList, const Tensor&, ValueList t) { return add_tangents(t[0], t[1]); });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "sub");
    return same_tape(a, b, "sub").record(
        "sub", {a, b}, [](ValueList in) { return *in[0] - *in[1]; },
        [](ValueList, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool> needs) {
            if (needs[0]) gi[0] = g;
            if (needs[1]) gi[1] = -g;
        },
        [](ValueList, const Tensor&, ValueList t) -> Tensor {
            if (t[0] && t[1]) return *t[0] - *t[1];
            if (t[0]) return *t[0];
            if (t[1]) return -*t[1];
            return {};
        });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "mul");
    return same_tape(a, b, "mul").record(
        "mul", {a, b}, [](ValueList in) { return hadamard(*in[0], *in[1]); },
        [](ValueList in, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool> needs) {
            if (needs[0]) gi[0] = hadamard(g, *in[1]);
            if (needs[1]) gi[1] = hadamard(g, *in[0]);
        },
        [](ValueList in, const Tensor&, ValueList t) -> Tensor {
            Tensor out;
            if (t[0]) out = hadamard(*t[0], *in[1]);
            if (t[1]) {
                Tensor other = hadamard(*in[0], *t[1]);
                out = out.empty() ? std::move(other) : out + other;
            }
            return out;
        });
}

Var scale(const Var& a, double s) {
    return a.tape().record(
        "scale", {a}, [s](ValueList in) { return s * *in[0]; },
        [s](ValueList, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool>) { gi[0] = s * g; },
        [s](ValueList, const Tensor&, ValueList t) { return s * *t[0]; });
}

Var matmul(const Var& a, const Var& b) {
    require_rank2(a.value(), "matmul");
    require_rank2(b.value(), "matmul");
    if (a.value().cols() != b.value().rows())
        throw ContractViolation("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()));
    return same_tape(a, b, "matmul").record(
        "matmul", {a, b}, [](ValueList in) { return facm::matmul(*in[0], *in[1]); },
        [](ValueList in, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool> needs) {
            if (needs[0]) gi[0] = matmul_nt(g, *in[1]);
            if (needs[1]) gi[1] = matmul_tn(*in[0], g);
        },
        [](ValueList in, const Tensor&, ValueList t) -> Tensor {
            Tensor out;
            if (t[0]) out = facm::matmul(*t[0], *in[1]);
            if (t[1]) {
                Tensor other = facm::matmul(*in[0], *t[1]);
                out = out.empty() ? std::move(other) : out + other;
            }
            return out;
        });
}

Var add_bias(const Var& x, const Var& bias) {
    require_rank2(x.value(), "add_bias");
    if (bias.value().size() != x.value().cols())
        throw ContractViolation("add_bias: bias of shape " + shape_string(bias.shape()) + " does not match " +
                                shape_string(x.shape()));
    return same_tape(x, bias, "add_bias").record(
        "add_bias", {x, bias},
        [](ValueList in) { return *in[0] + broadcast_rows(*in[1], in[0]->rows()); },
        [](ValueList in, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool> needs) {
            if (needs[0]) gi[0] = g;
            if (needs[1]) gi[1] = column_sums(g, in[1]->shape());
        },
        [](ValueList in, const Tensor&, ValueList t) -> Tensor {
            Tensor out;
            if (t[0]) out = *t[0];
            if (t[1]) {
                Tensor other = broadcast_rows(*t[1], in[0]->rows());
                out = out.empty() ? std::move(other) : out + other;
            }
            return out;
        });
}

Var silu(const Var& a) {
    return a.tape().record(
        "silu", {a}, [](ValueList in) { return facm::silu(*in[0]); },
        [](ValueList in, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool>) {
            gi[0] = hadamard(g, elementwise(*in[0], silu_derivative));
        },
        [](ValueList in, const Tensor&, ValueList t) { return hadamard(*t[0], elementwise(*in[0], silu_derivative)); });
}

Var sin(const Var& a) {
    return a.tape().record(
        "sin", {a}, [](ValueList in) { return elementwise(*in[0], [](double v) { return std::sin(v); }); },
        [](ValueList in, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool>) {
            gi[0] = hadamard(g, elementwise(*in[0], [](double v) { return std::cos(v); }));
        },
        [](ValueList in, const Tensor&, ValueList t) {
            return hadamard(*t[0], elementwise(*in[0], [](double v) { return std::cos(v); }));
        });
}

Var cos(const Var& a) {
    return a.tape().record(
        "cos", {a}, [](ValueList in) { return elementwise(*in[0], [](double v) { return std::cos(v); }); },
        [](ValueList in, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool>) {
            gi[0] = hadamard(g, elementwise(*in[0], [](double v) { return -std::sin(v); }));
        },
        [](ValueList in, const Tensor&, ValueList t) {
            return hadamard(*t[0], elementwise(*in[0], [](double v) { return -std::sin(v); }));
        });
}

Var sum(const Var& a) {
    return a.tape().record(
        "sum", {a}, [](ValueList in) { return Tensor::scalar(facm::sum(*in[0])); },
        [](ValueList in, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool>) {
            gi[0] = Tensor(in[0]->shape(), g.item());
        },
        [](ValueList, const Tensor&, ValueList t) { return Tensor::scalar(facm::sum(*t[0])); });
}

Var mean(const Var& a) {
    if (a.value().empty()) throw ContractViolation("mean: empty value");
    return a.tape().record(
        "mean", {a}, [](ValueList in) { return Tensor::scalar(facm::mean(*in[0])); },
        [](ValueList in, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool>) {
            gi[0] = Tensor(in[0]->shape(), g.item() / static_cast<double>(in[0]->size()));
        },
        [](ValueList, const Tensor&, ValueList t) { return Tensor::scalar(facm::mean(*t[0])); });
}

Var dot(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "dot");
    return same_tape(a, b, "dot").record(
        "dot", {a, b}, [](ValueList in) { return Tensor::scalar(facm::dot(*in[0], *in[1])); },
        [](ValueList in, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool> needs) {
            if (needs[0]) gi[0] = g.item() * *in[1];
            if (needs[1]) gi[1] = g.item() * *in[0];
        },
        [](ValueList in, const Tensor&, ValueList t) {
            double s = 0.0;
            if (t[0]) s += facm::dot(*t[0], *in[1]);
            if (t[1]) s += facm::dot(*in[0], *t[1]);
            return Tensor::scalar(s);
        });
}

Var l2norm(const Var& a) {
    return a.tape().record(
        "l2norm", {a}, [](ValueList in) { return Tensor::scalar(facm::l2norm(*in[0])); },
        [](ValueList in, const Tensor& out, const Tensor& g, std::span<Tensor> gi, std::span<const bool>) {
            const double n = out.item();
            gi[0] = n > 0.0 ? (g.item() / n) * *in[0] : Tensor(in[0]->shape());
        },
        [](ValueList in, const Tensor& out, ValueList t) {
            const double n = out.item();
            return Tensor::scalar(n > 0.0 ? facm::dot(*in[0], *t[0]) / n : 0.0);
        });
}

Var row_sum(const Var& a) {
    require_rank2(a.value(), "row_sum");
    auto reduce = [](const Tensor& m) {
        const std::size_t rows = m.rows(), cols = m.cols();
        Tensor out(Shape{rows});
        for (std::size_t i = 0; i < rows; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < cols; ++j) s += m[i * cols + j];
            out[i] = s;
        }
        return out;
    };
    return a.tape().record(
        "row_sum", {a}, [reduce](ValueList in) { return reduce(*in[0]); },
        [](ValueList in, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool>) {
            const std::size_t rows = in[0]->rows(), cols = in[0]->cols();
            Tensor out(in[0]->shape());
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = g[i];
            gi[0] = std::move(out);
        },
        [reduce](ValueList, const Tensor&, ValueList t) { return reduce(*t[0]); });
}

Var clamp(const Var& a, double lo, double hi) {
    if (lo > hi) throw ContractViolation("clamp: lower bound exceeds upper bound");
    auto mask = [lo, hi](const Tensor& x, const Tensor& d) {
        Tensor out = d;
        for (std::size_t i = 0; i < out.size(); ++i)
            if (!(x[i] >= lo && x[i] <= hi)) out[i] = 0.0;
        return out;
    };
    return a.tape().record(
        "clamp", {a}, [lo, hi](ValueList in) { return facm::clamp(*in[0], lo, hi); },
        [mask](ValueList in, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool>) {
            gi[0] = mask(*in[0], g);
        },
        [mask](ValueList in, const Tensor&, ValueList t) { return mask(*in[0], *t[0]); });
}

Var gather_rows(const Var& table, std::vector<std::size_t> indices) {
    require_rank2(table.value(), "gather_rows");
    for (std::size_t idx : indices)
        if (idx >= table.value().rows())
            throw ContractViolation("gather_rows: index " + std::to_string(idx) + " out of range for table " +
                                    shape_string(table.shape()));
    auto gather = [indices](const Tensor& t) {
        const std::size_t cols = t.cols();
        Tensor out(Shape{indices.size(), cols});
        for (std::size_t i = 0; i < indices.size(); ++i)
            for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = t[indices[i] * cols + j];
        return out;
    };
    return table.tape().record(
        "gather_rows", {table}, [gather](ValueList in) { return gather(*in[0]); },
        [indices](ValueList in, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool>) {
            const std::size_t cols = in[0]->cols();
            Tensor out(in[0]->shape());
            for (std::size_t i = 0; i < indices.size(); ++i)
                for (std::size_t j = 0; j < cols; ++j) out[indices[i] * cols + j] += g[i * cols + j];
            gi[0] = std::move(out);
        },
        [gather](ValueList, const Tensor&, ValueList t) { return gather(*t[0]); });
}

Var select_col(const Var& a, std::size_t j) {
    require_rank2(a.value(), "select_col");
    if (j >= a.value().cols()) throw ContractViolation("select_col: column out of range");
    auto pick = [j](const Tensor& m) {
        const std::size_t rows = m.rows(), cols = m.cols();
        Tensor out(Shape{rows, 1});
        for (std::size_t i = 0; i < rows; ++i) out[i] = m[i * cols + j];
        return out;
    };
    return a.tape().record(
        "select_col", {a}, [pick](ValueList in) { return pick(*in[0]); },
        [j](ValueList in, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool>) {
            const std::size_t rows = in[0]->rows(), cols = in[0]->cols();
            Tensor out(in[0]->shape());
            for (std::size_t i = 0; i < rows; ++i) out[i * cols + j] = g[i];
            gi[0] = std::move(out);
        },
        [pick](ValueList, const Tensor&, ValueList t) { return pick(*t[0]); });
}

namespace {

struct CosineRow {
    double ab, na, nb;
    bool degenerate() const { return na < kDegenerateNorm || nb < kDegenerateNorm; }
};

CosineRow cosine_row(const double* a, const double* b, std::size_t n) {
    CosineRow r{0.0, 0.0, 0.0};
    for (std::size_t j = 0; j < n; ++j) {
        r.ab += a[j] * b[j];
        r.na += a[j] * a[j];
        r.nb += b[j] * b[j];
    }
    r.na = std::sqrt(r.na);
    r.nb = std::sqrt(r.nb);
    return r;
}

// d/da of (1 - a.b / (|a||b|)) for one row, written into out.
void cosine_row_grad(const double* a, const double* b, std::size_t n, const CosineRow& r, double scale, double* out) {
    const double inv = 1.0 / (r.na * r.nb);
    const double c = r.ab * inv / (r.na * r.na);
    for (std::size_t j = 0; j < n; ++j) out[j] = scale * (-(b[j] * inv) + c * a[j]);
}

}  // namespace

Var cosine_distance_rows(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "cosine_distance_rows");
    require_rank2(a.value(), "cosine_distance_rows");
    return same_tape(a, b, "cosine_distance_rows").record(
        "cosine_distance_rows", {a, b},
        [](ValueList in) {
            const Tensor& A = *in[0];
            const Tensor& B = *in[1];
            const std::size_t rows = A.rows(), n = A.cols();
            Tensor out(Shape{rows});
            for (std::size_t i = 0; i < rows; ++i) {
                const CosineRow r = cosine_row(A.data().data() + i * n, B.data().data() + i * n, n);
                out[i] = r.degenerate() ? 0.0 : 1.0 - r.ab / (r.na * r.nb);
            }
            return out;
        },
        [](ValueList in, const Tensor&, const Tensor& g, std::span<Tensor> gi, std::span<const bool> needs) {
            const Tensor& A = *in[0];
            const Tensor& B = *in[1];
            const std::size_t rows = A.rows(), n = A.cols();
            if (needs[0]) gi[0] = Tensor(A.shape());
            if (needs[1]) gi[1] = Tensor(B.shape());
            for (std::size_t i = 0; i < rows; ++i) {
                const CosineRow r = cosine_row(A.data().data() + i * n, B.data().data() + i * n, n);
                if (r.degenerate()) continue;
                if (needs[0]) cosine_row_grad(A.data().data() + i * n, B.data().data() + i * n, n, r, g[i], gi[0].data().data() + i * n);
                if (needs[1])
                    cosine_row_grad(B.data().data() + i * n, A.data().data() + i * n, n, CosineRow{r.ab, r.nb, r.na}, g[i], gi[1].data().data() + i * n);
            }
        },
        [](ValueList in, const Tensor&, ValueList t) {
            const Tensor& A = *in[0];
            const Tensor& B = *in[1];
            const std::size_t rows = A.rows(), n = A.cols();
            Tensor out(Shape{rows});
            std::vector<double> buf(n);
            for (std::size_t i = 0; i < rows; ++i) {
                const CosineRow r = cosine_row(A.data().data() + i * n, B.data().data() + i * n, n);
                if (r.degenerate()) continue;
                double s = 0.0;
                if (t[0]) {
                    cosine_row_grad(A.data().data() + i * n, B.data().data() + i * n, n, r, 1.0, buf.data());
                    for (std::size_t j = 0; j < n; ++j) s += buf[j] * (*t[0])[i * n + j];
                }
                if (t[1]) {
                    cosine_row_grad(B.data().data() + i * n, A.data().data() + i * n, n, CosineRow{r.ab, r.nb, r.na}, 1.0, buf.data());
                    for (std::size_t j = 0; j < n; ++j) s += buf[j] * (*t[1])[i * n + j];
                }
                out[i] = s;
            }
            return out;
        });
}

}  // namespace facm::ad
