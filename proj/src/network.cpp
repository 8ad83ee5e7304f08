#include "facm/network.hpp"

#include <cmath>
#include <numbers>

namespace facm::nn {
namespace {

constexpr double kSlowestFrequency = std::numbers::pi / 2.0;  // period 4
constexpr double kFrequencySpan = 20.0;
constexpr double kClassEmbedStd = 0.5;

Tensor fan_in_normal(Rng& rng, std::size_t fan_in, std::size_t fan_out, std::size_t rows = 0) {
    Tensor w(Shape{rows ? rows : fan_in, fan_out});
    const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : w.data()) v = sd * rng.normal();
    return w;
}

void add_time_embedder(ParamMap& p, Rng& rng, const std::string& prefix, std::size_t half, std::size_t width,
                       bool zero_output) {
    // sin and cos halves together form one layer with fan-in 2·half.
    p[prefix + ".w_sin"] = fan_in_normal(rng, 2 * half, width, half);
    p[prefix + ".w_cos"] = fan_in_normal(rng, 2 * half, width, half);
    p[prefix + ".b1"] = Tensor(Shape{width});
    p[prefix + ".w2"] = zero_output ? Tensor(Shape{width, width}) : fan_in_normal(rng, width, width);
    p[prefix + ".b2"] = Tensor(Shape{width});
}

std::string hidden_name(std::size_t i, const char* what) { return "hidden." + std::to_string(i) + "." + what; }

}  // namespace

void NetworkConfig::validate() const {
    if (input_dim < 1) throw ContractViolation("NetworkConfig: input_dim must be >= 1");
    if (depth < 1) throw ContractViolation("NetworkConfig: depth must be >= 1");
    if (hidden_width < 1) throw ContractViolation("NetworkConfig: hidden_width must be >= 1");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
        throw ContractViolation("NetworkConfig: time_embed_dim must be even and >= 2");
    if (num_classes < 0) throw ContractViolation("NetworkConfig: num_classes must be >= 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractViolation("NetworkConfig: dropout must lie in [0, 1)");
}

std::vector<double> time_frequencies(std::size_t time_embed_dim) {
    const std::size_t half = time_embed_dim / 2;
    std::vector<double> w(half);
    for (std::size_t k = 0; k < half; ++k) {
        const double frac = half == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(half - 1);
        w[k] = kSlowestFrequency * std::pow(kFrequencySpan, frac);
    }
    return w;
}

std::vector<double> sinusoidal_embedding(double c, std::size_t time_embed_dim) {
    const std::vector<double> w = time_frequencies(time_embed_dim);
    std::vector<double> e(2 * w.size());
    for (std::size_t k = 0; k < w.size(); ++k) {
        e[k] = std::sin(w[k] * c);
        e[w.size() + k] = std::cos(w[k] * c);
    }
    return e;
}

Network Network::init(const NetworkConfig& config) {
    config.validate();
    Rng rng = Rng::stream(config.seed, "network.init");
    const std::size_t h = config.hidden_width, d = config.input_dim, half = config.time_embed_dim / 2;
    ParamMap p;
    p["in.w"] = fan_in_normal(rng, d, h);
    p["in.b"] = Tensor(Shape{h});
    add_time_embedder(p, rng, "temb", half, h, false);
    if (config.scheme == flow::Scheme::AuxiliaryTime) add_time_embedder(p, rng, "aux", half, h, true);
    if (config.num_classes > 0) {
        // Row num_classes is the null class used for unconditional predictions.
        Tensor table(Shape{static_cast<std::size_t>(config.num_classes) + 1, h});
        for (double& v : table.data()) v = kClassEmbedStd * rng.normal();
        p["class.table"] = std::move(table);
    }
    for (std::size_t i = 1; i < config.depth; ++i) {
        p[hidden_name(i, "w")] = fan_in_normal(rng, h, h);
        p[hidden_name(i, "b")] = Tensor(Shape{h});
    }
    p["out.w"] = fan_in_normal(rng, h, d);
    p["out.b"] = Tensor(Shape{d});
    return Network(config, std::move(p));
}

Network::Network(NetworkConfig config, ParamMap params) : config_(config), params_(std::move(params)) {
    config_.validate();
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
}

Network::Bound Network::bind(ad::Tape& tape, bool trainable) const {
    Bound b;
    for (const auto& [name, t] : params_) b.vars[name] = trainable ? tape.parameter(name, t) : tape.constant(t);
    return b;
}

std::vector<std::size_t> Network::class_rows(std::span<const int> labels, std::size_t batch) const {
    if (!labels.empty() && labels.size() != batch)
        throw ContractViolation("forward: " + std::to_string(labels.size()) + " labels for a batch of " +
                                std::to_string(batch));
    std::vector<std::size_t> rows(batch, static_cast<std::size_t>(config_.num_classes));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int l = labels[i];
        if (l < 0) continue;
        if (l >= config_.num_classes)
            throw ContractViolation("forward: label " + std::to_string(l) + " out of range for " +
                                    std::to_string(config_.num_classes) + " classes");
        rows[i] = static_cast<std::size_t>(l);
    }
    return rows;
}

ad::Var Network::time_embedding(const Bound& p, const std::string& prefix, const ad::Var& c) const {
    ad::Tape& tape = c.tape();
    const std::vector<double> w = time_frequencies(config_.time_embed_dim);
    const ad::Var freq = tape.constant(Tensor(Shape{1, w.size()}, w));
    const ad::Var phase = ad::matmul(c, freq);
    const ad::Var pre = ad::add(ad::matmul(ad::sin(phase), p[prefix + ".w_sin"]),
                                ad::matmul(ad::cos(phase), p[prefix + ".w_cos"]));
    const ad::Var hidden = ad::silu(ad::add_bias(pre, p[prefix + ".b1"]));
    return ad::add_bias(ad::matmul(hidden, p[prefix + ".w2"]), p[prefix + ".b2"]);
}

ad::Var Network::forward(const Bound& p, const ad::Var& x, const ad::Var& cond, std::span<const int> labels,
                         Rng* dropout_rng) const {
    const Tensor& xv = x.value();
    if (xv.rank() != 2 || xv.cols() != config_.input_dim)
        throw ContractViolation("forward: x must be (B × " + std::to_string(config_.input_dim) + "), got " +
                                shape_string(xv.shape()));
    const std::size_t batch = xv.rows();
    const std::size_t arity = flow::condition_arity(config_.scheme);
    if (cond.value().rank() != 2 || cond.value().rows() != batch || cond.value().cols() != arity)
        throw ContractViolation("forward: condition must be (" + std::to_string(batch) + " × " +
                                std::to_string(arity) + "), got " + shape_string(cond.value().shape()));

    ad::Var h = ad::add_bias(ad::matmul(x, p["in.w"]), p["in.b"]);
    h = ad::add(h, time_embedding(p, "temb", ad::select_col(cond, 0)));
    if (config_.scheme == flow::Scheme::AuxiliaryTime) h = ad::add(h, time_embedding(p, "aux", ad::select_col(cond, 1)));
    if (config_.num_classes > 0) {
        h = ad::add(h, ad::gather_rows(p["class.table"], class_rows(labels, batch)));
    } else {
        for (int l : labels)
            if (l >= 0) throw ContractViolation("forward: unconditional network received label " + std::to_string(l));
    }
    h = ad::silu(h);
    for (std::size_t i = 1; i < config_.depth; ++i) {
        h = ad::silu(ad::add_bias(ad::matmul(h, p[hidden_name(i, "w")]), p[hidden_name(i, "b")]));
        if (dropout_rng && config_.dropout > 0.0) {
            const double keep = 1.0 - config_.dropout;
            Tensor mask(h.shape());
            for (double& m : mask.data()) m = dropout_rng->bernoulli(keep) ? 1.0 / keep : 0.0;
            h = ad::mul(h, h.tape().constant(std::move(mask)));
        }
    }
    return ad::add_bias(ad::matmul(h, p["out.w"]), p["out.b"]);
}

Tensor forward(const Network& net, const Tensor& x_t, const flow::ConditionBatch& cond, std::span<const int> labels) {
    ad::Tape tape;
    const auto bound = net.bind(tape, false);
    return net.forward(bound, tape.constant(x_t), tape.constant(cond.encoded), labels).value();
}

Tensor forward(const Network& net, const Tensor& x_t, const flow::ConditioningSignal& cond, std::optional<int> label) {
    const Tensor x = x_t.rank() == 1 ? x_t.reshaped(Shape{1, x_t.size()}) : x_t;
    const std::vector<int> labels(x.rows(), label.value_or(-1));
    Tensor out = forward(net, x, flow::broadcast(cond, x.rows()), labels);
    return x_t.rank() == 1 ? out.reshaped(x_t.shape()) : out;
}

ad::DualTensor forward_jvp(const Network& net, const Tensor& x_t, const flow::ConditionBatch& cond,
                           const Tensor& x_tangent, std::span<const int> labels) {
    if (cond.task != flow::Task::CM)
        throw ContractViolation("forward_jvp: total derivatives are only taken under the CM condition");
    require_same_shape(x_t, x_tangent, "forward_jvp");
    ad::Tape tape;
    const auto bound = net.bind(tape, false);
    const ad::Var out =
        net.forward(bound, tape.input(x_t, x_tangent), tape.input(cond.encoded, cond.tangent), labels);
    return ad::DualTensor(out.value(), out.tangent());
}

}  // namespace facm::nn
