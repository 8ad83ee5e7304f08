#include "facm/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "facm/config.hpp"
#include "facm/parallel.hpp"

namespace facm::sample {
namespace {

flow::ConditionBatch uniform_condition(flow::Scheme scheme, flow::Task task, double t, std::size_t n) {
    return flow::broadcast(flow::encode_condition(scheme, task, t), n);
}

/// Mean of ‖a_i − b_j‖ over all (i, j). Rows are summed independently and
/// then reduced in order, so the result does not depend on the thread count.
double mean_pair_distance(const Tensor& a, const Tensor& b) {
    const std::size_t na = a.rows(), nb = b.rows(), d = a.cols();
    std::vector<double> row(na, 0.0);
    parallel_for(na, 64, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < nb; ++j) {
                double sq = 0.0;
                for (std::size_t k = 0; k < d; ++k) {
                    const double diff = a[i * d + k] - b[j * d + k];
                    sq += diff * diff;
                }
                s += std::sqrt(sq);
            }
            row[i] = s;
        }
    });
    double total = 0.0;
    for (double s : row) total += s;
    return total / (static_cast<double>(na) * static_cast<double>(nb));
}

void require_samples(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rank() != 2 || b.rank() != 2) throw ContractViolation(std::string(op) + ": expected (n × d) sample sets");
    if (a.rows() == 0 || b.rows() == 0) throw ContractViolation(std::string(op) + ": empty sample set");
    if (a.cols() != b.cols())
        throw ContractViolation(std::string(op) + ": dimension mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
}

}  // namespace

VelocityFn network_velocity(const nn::Network& net) {
    return [&net](const Tensor& x, const flow::ConditionBatch& cond, std::span<const int> labels) {
        return nn::forward(net, x, cond, labels);
    };
}

std::vector<double> timesteps(std::size_t n_steps) {
    if (n_steps < 1) throw ContractViolation("timesteps: need at least one step");
    std::vector<double> t(n_steps);
    for (std::size_t i = 0; i < n_steps; ++i) t[i] = static_cast<double>(i) / static_cast<double>(n_steps);
    return t;
}

Tensor prior_noise(std::size_t n, std::size_t dim, std::uint64_t seed) {
    Tensor x(Shape{n, dim});
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = Rng::stream(seed, "sample.prior", i);
        for (std::size_t j = 0; j < dim; ++j) x[i * dim + j] = rng.normal();
    }
    return x;
}

SampleTrace few_step_trace(const VelocityFn& f, flow::Scheme scheme, std::size_t n_steps, const Tensor& x0,
                           std::span<const int> labels, std::uint64_t seed) {
    if (x0.rank() != 2) throw ContractViolation("few_step_sample: x0 must be (n × d)");
    const std::size_t n = x0.rows(), d = x0.cols();
    SampleTrace tr;
    tr.t = timesteps(n_steps);
    Tensor x = x0;
    for (std::size_t s = 0; s < n_steps; ++s) {
        const double t = tr.t[s];
        const Tensor v = f(x, uniform_condition(scheme, flow::Task::CM, t, n), labels);
        Tensor x_hat = x;
        axpy(1.0 - t, v, x_hat);
        tr.inputs.push_back(x);
        if (s + 1 == n_steps) {
            tr.x_hat.push_back(x_hat);
            tr.output = std::move(x_hat);
            break;
        }
        const double t_next = tr.t[s + 1];
        Tensor z(Shape{n, d});
        for (std::size_t i = 0; i < n; ++i) {
            Rng rng = Rng::stream(seed, "sample.renoise", i, s);
            for (std::size_t j = 0; j < d; ++j) z[i * d + j] = rng.normal();
        }
        for (std::size_t k = 0; k < x.size(); ++k) x[k] = t_next * x_hat[k] + (1.0 - t_next) * z[k];
        tr.x_hat.push_back(std::move(x_hat));
        tr.noise.push_back(std::move(z));
    }
    return tr;
}

Tensor few_step_sample(const nn::Network& net, std::size_t n_steps, std::size_t n_samples, std::span<const int> labels,
                       std::uint64_t seed) {
    const Tensor x0 = prior_noise(n_samples, net.config().input_dim, seed);
    return few_step_trace(network_velocity(net), net.config().scheme, n_steps, x0, labels, seed).output;
}

Tensor few_step_sample(const nn::Network& net, std::size_t n_steps, std::size_t n_samples, std::optional<int> label,
                       Rng& rng) {
    const std::vector<int> labels(n_samples, label.value_or(-1));
    return few_step_sample(net, n_steps, n_samples, labels, rng.engine()());
}

OdeMethod parse_ode_method(std::string_view name) {
    if (name == "euler") return OdeMethod::Euler;
    if (name == "heun") return OdeMethod::Heun;
    throw ContractViolation("unknown ODE method '" + std::string(name) + "' (expected euler or heun)");
}

Tensor ode_solve(const VelocityFn& f, flow::Scheme scheme, std::size_t n_steps, OdeMethod method, const Tensor& x0,
                 std::span<const int> labels, const obj::GuidanceSpec& guidance) {
    if (n_steps < 1) throw ContractViolation("ode_solve: need at least one step");
    const std::size_t n = x0.rows();
    const std::vector<int> null_labels(n, -1);
    const bool guided =
        guidance.w != 0.0 && std::any_of(labels.begin(), labels.end(), [](int l) { return l >= 0; });
    auto velocity = [&](const Tensor& x, double t) {
        const auto cond = uniform_condition(scheme, flow::Task::FM, t, n);
        const Tensor v_uncond = f(x, cond, null_labels);
        if (!guided) return v_uncond;
        const Tensor v_cond = f(x, cond, labels);
        return obj::cfg_velocity(v_uncond, v_cond, v_uncond, guidance, t);
    };
    const double h = 1.0 / static_cast<double>(n_steps);
    Tensor x = x0;
    for (std::size_t s = 0; s < n_steps; ++s) {
        const double t = static_cast<double>(s) * h;
        const Tensor k1 = velocity(x, t);
        if (method == OdeMethod::Euler) {
            axpy(h, k1, x);
            continue;
        }
        Tensor x_pred = x;
        axpy(h, k1, x_pred);
        const Tensor k2 = velocity(x_pred, static_cast<double>(s + 1) * h);
        for (std::size_t k = 0; k < x.size(); ++k) x[k] += 0.5 * h * (k1[k] + k2[k]);
    }
    return x;
}

Tensor ode_solve_reference(const nn::Network& teacher, std::size_t n_steps, OdeMethod method, std::size_t n_samples,
                           std::span<const int> labels, const obj::GuidanceSpec& guidance, std::uint64_t seed) {
    const Tensor x0 = prior_noise(n_samples, teacher.config().input_dim, seed);
    return ode_solve(network_velocity(teacher), teacher.config().scheme, n_steps, method, x0, labels, guidance);
}

double energy_distance(const Tensor& a, const Tensor& b) {
    require_samples(a, b, "energy_distance");
    // A fixed argument order makes the result exactly symmetric.
    const bool swap = b.rows() < a.rows() ||
                      (b.rows() == a.rows() && std::lexicographical_compare(b.data().begin(), b.data().end(),
                                                                            a.data().begin(), a.data().end()));
    const Tensor& p = swap ? b : a;
    const Tensor& q = swap ? a : b;
    const double ed = 2.0 * mean_pair_distance(p, q) - (mean_pair_distance(p, p) + mean_pair_distance(q, q));
    return std::max(0.0, ed);
}

double w2_squared_1d(std::vector<double> a, std::vector<double> b) {
    if (a.size() != b.size() || a.empty()) throw ContractViolation("w2_squared_1d: need equal, non-empty sample sets");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

double sliced_w2(const Tensor& a, const Tensor& b, std::size_t n_projections, Rng& rng) {
    require_samples(a, b, "sliced_w2");
    if (a.rows() != b.rows()) throw ContractViolation("sliced_w2: sample counts differ; resample to match");
    if (n_projections < 1) throw ContractViolation("sliced_w2: need at least one projection");
    const std::size_t n = a.rows(), d = a.cols();
    double total = 0.0;
    std::vector<double> dir(d), pa(n), pb(n);
    for (std::size_t p = 0; p < n_projections; ++p) {
        double norm = 0.0;
        do {
            norm = 0.0;
            for (double& v : dir) {
                v = rng.normal();
                norm += v * v;
            }
        } while (norm == 0.0);
        norm = std::sqrt(norm);
        for (double& v : dir) v /= norm;
        for (std::size_t i = 0; i < n; ++i) {
            pa[i] = pb[i] = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                pa[i] += a[i * d + j] * dir[j];
                pb[i] += b[i * d + j] * dir[j];
            }
        }
        total += w2_squared_1d(pa, pb);
    }
    return total / static_cast<double>(n_projections);
}

std::vector<flow::DataPoint> held_out_data(const std::string& dataset, std::size_t n, std::uint64_t seed) {
    Rng rng = Rng::stream(seed, "data.eval");
    return flow::make_dataset(dataset, n, rng);
}

EvalReport evaluate(const nn::Network& net, const EvalOptions& o) {
    if (o.nfe.empty()) throw ContractViolation("evaluate: empty NFE list");
    const bool conditional = net.config().num_classes > 0;
    std::vector<flow::DataPoint> data;
    if (o.label >= 0) {
        if (!conditional || o.label >= net.config().num_classes)
            throw ContractViolation("evaluate: label " + std::to_string(o.label) + " is not a class of this network");
        const auto pool = held_out_data(o.dataset, o.n_samples * static_cast<std::size_t>(net.config().num_classes) * 2,
                                        o.seed);
        for (const auto& p : pool)
            if (p.label == o.label && data.size() < o.n_samples) data.push_back(p);
    } else {
        data = held_out_data(o.dataset, o.n_samples, o.seed);
    }
    const Tensor reference = flow::points_tensor(data);
    const std::size_t n = reference.rows();

    EvalReport report;
    report.labels.assign(n, -1);
    if (conditional)
        for (std::size_t i = 0; i < n; ++i) report.labels[i] = data[i].label;

    auto metrics = [&](const Tensor& samples, double& ed, double& sw) {
        ed = energy_distance(samples, reference);
        Rng proj = Rng::stream(o.seed, "eval.projections");
        sw = sliced_w2(samples, reference, o.n_projections, proj);
    };
    for (std::size_t nfe : o.nfe) {
        EvalRow row;
        row.nfe = nfe;
        row.n_samples = n;
        row.seed = o.seed;
        Tensor samples = few_step_sample(net, nfe, n, report.labels, o.seed);
        metrics(samples, row.energy_distance, row.sliced_w2);
        report.rows.push_back(row);
        report.samples.push_back(std::move(samples));
    }
    if (o.reference_steps > 0) {
        ReferenceRow ref;
        ref.method = o.reference_method == OdeMethod::Heun ? "heun" : "euler";
        ref.steps = o.reference_steps;
        ref.n_samples = n;
        ref.seed = o.seed;
        const Tensor samples =
            ode_solve_reference(net, o.reference_steps, o.reference_method, n, report.labels, o.guidance, o.seed);
        metrics(samples, ref.energy_distance, ref.sliced_w2);
        report.reference = ref;
    }
    return report;
}

void write_report_csv(std::ostream& os, const EvalReport& report) {
    using config::format_double;
    os << kReportHeader << '\n';
    for (const auto& r : report.rows)
        os << r.nfe << ',' << format_double(r.energy_distance) << ',' << format_double(r.sliced_w2) << ','
           << r.n_samples << ',' << r.seed << '\n';
}

void write_reference_csv(std::ostream& os, const ReferenceRow& r) {
    using config::format_double;
    os << kReferenceHeader << '\n'
       << r.method << ',' << r.steps << ',' << format_double(r.energy_distance) << ',' << format_double(r.sliced_w2)
       << ',' << r.n_samples << ',' << r.seed << '\n';
}

void write_samples_csv(std::ostream& os, const Tensor& samples, std::span<const int> labels, std::size_t nfe,
                       std::uint64_t seed, bool header) {
    using config::format_double;
    if (samples.rank() != 2 || samples.cols() != 2) throw ContractViolation("write_samples_csv: expected (n × 2) samples");
    if (header) os << kSamplesHeader << '\n';
    for (std::size_t i = 0; i < samples.rows(); ++i)
        os << format_double(samples[2 * i]) << ',' << format_double(samples[2 * i + 1]) << ','
           << (i < labels.size() ? labels[i] : -1) << ',' << nfe << ',' << seed << '\n';
}

}  // namespace facm::sample
