#include "facm/verify.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>

#include "facm/objectives.hpp"
#include "facm/sampler.hpp"
#include "facm/trainer.hpp"

namespace facm::verify {
namespace {

constexpr double kFdStep = 1e-5;

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = scale * rng.normal();
    return t;
}

double rel_error(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-300});
    return std::abs(a - b) / denom;
}

double rel_error(const Tensor& a, const Tensor& b) {
    const double denom = std::max({l2norm(a), l2norm(b), 1e-300});
    return l2norm(a - b) / denom;
}

nn::Network random_network(Rng& rng, std::optional<flow::Scheme> scheme = std::nullopt) {
    nn::NetworkConfig c;
    c.hidden_width = 3 + rng.index(6);
    c.depth = 1 + rng.index(3);
    c.time_embed_dim = 2 * (1 + rng.index(4));
    c.num_classes = static_cast<int>(3 * rng.index(2));
    c.scheme = scheme ? *scheme : (rng.bernoulli(0.5) ? flow::Scheme::AuxiliaryTime : flow::Scheme::ExpandedInterval);
    c.seed = rng.engine()();
    nn::Network net = nn::Network::init(c);
    // Zero-initialized biases and output layers would hide parts of the chain rule.
    for (auto& [name, p] : net.params())
        for (double& v : p.data()) v += 0.3 * rng.normal();
    return net;
}

std::vector<int> random_labels(const nn::Network& net, std::size_t n, Rng& rng) {
    std::vector<int> labels(n, -1);
    const int c = net.config().num_classes;
    if (c > 0)
        for (int& l : labels) l = static_cast<int>(rng.index(static_cast<std::size_t>(c) + 1)) - 1;
    return labels;
}

Tensor random_condition(const nn::Network& net, std::size_t n, Rng& rng) {
    const std::size_t k = flow::condition_arity(net.config().scheme);
    Tensor c(Shape{n, k});
    for (double& v : c.data()) v = 2.0 * rng.uniform();
    return c;
}

Tensor plain_forward(const nn::Network& net, const Tensor& x, const Tensor& c, std::span<const int> labels) {
    ad::Tape tape;
    const auto p = net.bind(tape, false);
    return net.forward(p, tape.constant(x), tape.constant(c), labels).value();
}

struct Dual {
    double v, d;
};
Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
Dual operator/(Dual a, Dual b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }

CheckResult at_most(std::string name, double value, double threshold, std::string detail = {}) {
    return {std::move(name), value <= threshold, value, threshold, std::move(detail)};
}

}  // namespace

AutodiffReport autodiff_oracles(std::size_t n_networks, std::uint64_t seed) {
    AutodiffReport rep;
    for (std::size_t k = 0; k < n_networks; ++k) {
        Rng rng = Rng::stream(seed, "verify.autodiff", k);
        nn::Network net = random_network(rng);
        const std::size_t b = 3, d = net.config().input_dim;
        const Tensor x = random_tensor(Shape{b, d}, rng);
        const Tensor c = random_condition(net, b, rng);
        const std::vector<int> labels = random_labels(net, b, rng);
        const Tensor r = random_tensor(Shape{b, d}, rng);
        auto objective = [&](const nn::Network& n) { return dot(r, plain_forward(n, x, c, labels)); };

        // reverse mode against central differences over every parameter entry
        ad::Tape tape;
        const auto bound = net.bind(tape, true);
        const ad::Var out = net.forward(bound, tape.constant(x), tape.constant(c), labels);
        const ad::GradientMap grads = ad::gradient(ad::sum(ad::mul(out, tape.constant(r))));
        std::vector<double> g, fd;
        for (auto& [name, p] : net.params()) {
            const Tensor& gp = grads.at(name);
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double keep = p[i];
                p[i] = keep + kFdStep;
                const double up = objective(net);
                p[i] = keep - kFdStep;
                const double down = objective(net);
                p[i] = keep;
                g.push_back(gp[i]);
                fd.push_back((up - down) / (2.0 * kFdStep));
            }
        }
        rep.max_grad_rel = std::max(rep.max_grad_rel, rel_error(Tensor(Shape{g.size()}, g), Tensor(Shape{fd.size()}, fd)));

        // forward mode along (ux, uc)
        const Tensor ux = random_tensor(Shape{b, d}, rng);
        const Tensor uc = random_tensor(c.shape(), rng);
        ad::Tape jt;
        const auto jb = net.bind(jt, false);
        const Tensor tangent = net.forward(jb, jt.input(x, ux), jt.input(c, uc), labels).tangent();
        const Tensor up = plain_forward(net, x + kFdStep * ux, c + kFdStep * uc, labels);
        const Tensor down = plain_forward(net, x - kFdStep * ux, c - kFdStep * uc, labels);
        rep.max_jvp_rel = std::max(rep.max_jvp_rel, rel_error(tangent, (1.0 / (2.0 * kFdStep)) * (up - down)));

        // dot(gradient, u) == jvp(u) for the scalar objective
        ad::Tape gt;
        const auto gb = net.bind(gt, false);
        const ad::Var xv = gt.parameter("x", x);
        const ad::Var cv = gt.parameter("c", c);
        const ad::GradientMap gx = ad::gradient(ad::sum(ad::mul(net.forward(gb, xv, cv, labels), gt.constant(r))));
        const double reverse = dot(gx.at("x"), ux) + dot(gx.at("c"), uc);
        rep.max_consistency_rel = std::max(rep.max_consistency_rel, rel_error(reverse, dot(r, tangent)));
    }
    return rep;
}

double average_velocity_identity(std::size_t n_points, std::uint64_t seed) {
    Rng rng = Rng::stream(seed, "verify.average_velocity");
    double worst = 0.0;
    for (std::size_t i = 0; i < n_points; ++i) {
        const double tv = 0.99 * rng.uniform();
        const Dual t{tv, 1.0}, one{1.0, 0.0};
        for (int k = 0; k < 2; ++k) {
            const Dual x0{rng.normal(), 0.0}, x1{rng.normal(), 0.0};
            const Dual x_t = (one - t) * x0 + t * x1;
            const Dual vbar = (x1 - x_t) / (one - t);
            const double v = x1.v - x0.v;
            worst = std::max(worst, std::abs(vbar.v - (v + (1.0 - tv) * vbar.d)));
        }
    }
    return worst;
}

double target_equivalence(std::size_t n_networks, std::uint64_t seed) {
    double worst = 0.0;
    for (std::size_t k = 0; k < n_networks; ++k) {
        Rng rng = Rng::stream(seed, "verify.equivalence", k);
        const nn::Network net = random_network(rng, flow::Scheme::AuxiliaryTime);
        for (int g = 1; g <= 9; ++g) {
            const std::size_t b = 4, d = net.config().input_dim;
            const std::vector<double> t(b, 0.1 * g), r(b, 1.0);
            const Tensor x_t = random_tensor(Shape{b, d}, rng);
            const Tensor v = random_tensor(Shape{b, d}, rng);
            const std::vector<int> labels = random_labels(net, b, rng);
            const auto c_cm = flow::encode_batch(flow::Scheme::AuxiliaryTime, flow::Task::CM, t);
            const ad::DualTensor scm = nn::forward_jvp(net, x_t, c_cm, v, labels);
            const Tensor t_scm = obj::scm_baseline_target(scm.primal, v, t, scm.tangent);
            const ad::DualTensor mf = nn::forward_jvp(net, x_t, flow::encode_pair(t, r), v, labels);
            const Tensor t_mf = obj::meanflow_baseline_target(v, t, r, mf.tangent);
            worst = std::max(worst, max_abs(t_mf - t_scm));
        }
    }
    return worst;
}

double time_schedule_median_error(std::size_t n_draws, std::uint64_t seed) {
    Rng rng = Rng::stream(seed, "verify.time_schedule");
    const flow::TimeSchedule schedule;
    std::vector<double> t(n_draws);
    for (double& v : t) v = flow::sample_time(rng, schedule);
    const auto mid = t.begin() + static_cast<std::ptrdiff_t>(n_draws / 2);
    std::nth_element(t.begin(), mid, t.end());
    const double analytic = 1.0 - (2.0 / std::numbers::pi) * std::atan(std::exp(schedule.p_mean));
    return std::abs(*mid - analytic);
}

std::string sampler_contract() {
    Rng rng = Rng::stream(0, "verify.sampler");
    const std::size_t n = 16, d = 2;
    // Dyadic values keep x0 + (x1 − x0) exact in floating point.
    Tensor x0(Shape{n, d}), x1(Shape{n, d});
    for (std::size_t i = 0; i < x0.size(); ++i) {
        x0[i] = static_cast<double>(static_cast<int>(rng.index(257)) - 128) / 64.0;
        x1[i] = static_cast<double>(static_cast<int>(rng.index(257)) - 128) / 64.0;
    }
    const Tensor delta = x1 - x0;
    const sample::VelocityFn oracle = [&](const Tensor&, const flow::ConditionBatch& c, std::span<const int>) {
        if (c.task != flow::Task::CM) throw ContractViolation("sampler used a non-CM condition");
        return delta;
    };
    const std::vector<int> labels(n, -1);
    std::ostringstream err;

    for (flow::Scheme scheme : {flow::Scheme::ExpandedInterval, flow::Scheme::AuxiliaryTime}) {
        const auto one = sample::few_step_trace(oracle, scheme, 1, x0, labels, 3);
        if (one.t != std::vector<double>{0.0}) err << "N=1 schedule is not {0}; ";
        if (!one.output.bitwise_equal(x1)) err << "N=1 output is not x1 for the constant-velocity oracle; ";
        Tensor formula = x0;
        axpy(1.0, delta, formula);
        if (!one.output.bitwise_equal(formula)) err << "N=1 output differs from x0 + F(x0, c_CM(0)); ";

        const auto two = sample::few_step_trace(oracle, scheme, 2, x0, labels, 3);
        if (two.t != std::vector<double>{0.0, 0.5}) err << "N=2 schedule is not {0, 0.5}; ";
        Tensor renoised(Shape{n, d});
        for (std::size_t i = 0; i < renoised.size(); ++i)
            renoised[i] = 0.5 * two.x_hat[0][i] + (1.0 - 0.5) * two.noise[0][i];
        if (!two.inputs[1].bitwise_equal(renoised)) err << "N=2 second input is not 0.5·x̂1 + 0.5·z; ";
        Tensor last = two.inputs[1];
        axpy(0.5, delta, last);
        if (!two.output.bitwise_equal(last)) err << "N=2 output is not the final-step x̂1; ";

        for (std::size_t steps : {3u, 4u, 7u}) {
            const auto tr = sample::few_step_trace(oracle, scheme, steps, x0, labels, 3);
            for (std::size_t i = 0; i < steps; ++i)
                if (tr.t[i] != static_cast<double>(i) / static_cast<double>(steps))
                    err << "N=" << steps << " timestep " << i << " is not i/N; ";
        }
    }
    return err.str();
}

double boundary_ratio(const nn::Network& net, const std::string& dataset, std::size_t n, std::uint64_t seed) {
    const auto data = sample::held_out_data(dataset, n, seed);
    const Tensor x1 = flow::points_tensor(data);
    const Tensor x0 = sample::prior_noise(n, net.config().input_dim, seed);
    std::vector<int> labels(n, -1);
    if (net.config().num_classes > 0)
        for (std::size_t i = 0; i < n; ++i) labels[i] = data[i].label;
    auto shrink = [&](double t) {
        const auto batch = flow::interpolate_batch(x0, x1, std::vector<double>(n, t), labels);
        const auto c = flow::encode_batch(net.config().scheme, flow::Task::CM, batch.t);
        const Tensor dfdt = nn::forward_jvp(net, batch.x_t, c, batch.v, labels).tangent;
        const Tensor sq = row_sqnorm(dfdt);
        double s = 0.0;
        for (double v : sq.data()) s += std::sqrt(v);
        return (1.0 - t) * s / static_cast<double>(n);
    };
    return shrink(0.999) / shrink(0.99);
}

std::vector<CheckResult> run_suite(std::uint64_t seed) {
    std::vector<CheckResult> out;
    const AutodiffReport ad = autodiff_oracles(50, seed);
    out.push_back(at_most("gradient vs finite differences (50 nets)", ad.max_grad_rel, 1e-6));
    out.push_back(at_most("jvp vs finite differences (50 nets)", ad.max_jvp_rel, 1e-6));
    out.push_back(at_most("dot(grad, u) vs jvp(u)", ad.max_consistency_rel, 1e-10));
    out.push_back(at_most("average-velocity identity", average_velocity_identity(100, seed), 1e-9));
    out.push_back(at_most("T_MF(r=1) vs T'_sCM (20 nets x 9 t)", target_equivalence(20, seed), 1e-12));
    out.push_back(at_most("time schedule median (1e6 draws)", time_schedule_median_error(1000000, seed), 0.002));
    const std::string sampler = sampler_contract();
    out.push_back({"few-step sampler contract", sampler.empty(), sampler.empty() ? 0.0 : 1.0, 0.0, sampler});

    // A short from-scratch FACM run gives a trained network without any checkpoint on disk.
    train::TrainConfig c;
    c.paradigm = train::Paradigm::Scratch;
    c.seed = seed;
    c.steps = 300;
    c.batch_size = 64;
    c.lr = 1e-3;
    c.hidden_width = 32;
    c.depth = 3;
    c.time_embed_dim = 16;
    c.dataset_size = 4096;
    const train::TrainResult run = train::train_scratch(c);
    const double ratio = boundary_ratio(run.checkpoint.eval_network(), c.dataset, 512, seed);
    out.push_back(at_most("boundary continuity (1-t)|dF/dt| ratio", ratio, 0.11,
                          "after " + std::to_string(c.steps) + " scratch steps"));
    return out;
}

void print_table(std::ostream& os, const std::vector<CheckResult>& results) {
    std::size_t width = 5;
    for (const auto& r : results) width = std::max(width, r.name.size());
    os << std::left << std::setw(static_cast<int>(width)) << "check" << "  result  value        threshold\n";
    for (const auto& r : results) {
        os << std::left << std::setw(static_cast<int>(width)) << r.name << "  " << (r.passed ? "PASS  " : "FAIL  ")
           << "  " << std::setw(11) << std::setprecision(4) << std::scientific << r.value << "  " << r.threshold
           << std::defaultfloat;
        if (!r.detail.empty()) os << "  (" << r.detail << ")";
        os << '\n';
    }
}

}  // namespace facm::verify
