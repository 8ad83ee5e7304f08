#include "facm/flow.hpp"

#include <cmath>
#include <numbers>
#include <ostream>

namespace facm::flow {

double time_from_sigma(double sigma) { return 1.0 - (2.0 / std::numbers::pi) * std::atan(sigma); }

double sample_time(Rng& rng, const TimeSchedule& schedule) {
    if (!(schedule.p_std > 0.0))
        throw ContractViolation("sample_time: P_std must be positive, got " + std::to_string(schedule.p_std));
    for (;;) {
        const double sigma = std::exp(schedule.p_mean + schedule.p_std * rng.normal());
        const double t = time_from_sigma(sigma);
        if (t > kTimeMargin && t < 1.0 - kTimeMargin) return t;
    }
}

FlowSample interpolate(const Tensor& x0, const Tensor& x1, double t, std::optional<int> label) {
    require_same_shape(x0, x1, "interpolate");
    if (!(t >= 0.0 && t <= 1.0)) throw ContractViolation("interpolate: t must lie in [0, 1]");
    FlowSample s;
    s.x0 = x0;
    s.x1 = x1;
    s.t = t;
    s.x_t = Tensor(x0.shape());
    for (std::size_t i = 0; i < x0.size(); ++i) s.x_t[i] = (1.0 - t) * x0[i] + t * x1[i];
    s.v = x1 - x0;
    s.label = label;
    return s;
}

FlowBatch interpolate_batch(const Tensor& x0, const Tensor& x1, std::vector<double> t, std::vector<int> labels) {
    require_same_shape(x0, x1, "interpolate_batch");
    if (x0.rank() != 2 || t.size() != x0.rows())
        throw ContractViolation("interpolate_batch: need one time per row of a rank-2 batch");
    if (!labels.empty() && labels.size() != t.size())
        throw ContractViolation("interpolate_batch: label count differs from batch size");
    FlowBatch b;
    const std::size_t n = x0.rows(), d = x0.cols();
    b.x0 = x0;
    b.x1 = x1;
    b.x_t = Tensor(x0.shape());
    for (std::size_t i = 0; i < n; ++i) {
        if (!(t[i] >= 0.0 && t[i] <= 1.0)) throw ContractViolation("interpolate_batch: t must lie in [0, 1]");
        for (std::size_t j = 0; j < d; ++j) b.x_t[i * d + j] = (1.0 - t[i]) * x0[i * d + j] + t[i] * x1[i * d + j];
    }
    b.v = x1 - x0;
    b.t = std::move(t);
    b.labels = labels.empty() ? std::vector<int>(n, -1) : std::move(labels);
    return b;
}

std::string_view to_string(Scheme scheme) {
    return scheme == Scheme::ExpandedInterval ? "expanded_interval" : "auxiliary_time";
}

std::string_view to_string(Task task) { return task == Task::FM ? "fm" : "cm"; }

Scheme parse_scheme(std::string_view name) {
    if (name == "expanded_interval") return Scheme::ExpandedInterval;
    if (name == "auxiliary_time") return Scheme::AuxiliaryTime;
    throw ContractViolation("unknown conditioning scheme '" + std::string(name) +
                            "' (expected expanded_interval or auxiliary_time)");
}

std::size_t condition_arity(Scheme scheme) { return scheme == Scheme::ExpandedInterval ? 1 : 2; }

ConditioningSignal encode_condition(Scheme scheme, Task task, double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw ContractViolation("encode_condition: t must lie in [0, 1]");
    ConditioningSignal s;
    s.task = task;
    s.raw_t = t;
    if (scheme == Scheme::ExpandedInterval) {
        if (task == Task::CM) {
            s.encoded = {t};
            s.time_tangent = {1.0};
        } else {
            s.encoded = {2.0 - t};
            s.time_tangent = {-1.0};
        }
    } else {
        if (task == Task::CM) {
            s.encoded = {t, 1.0};
            s.time_tangent = {1.0, 0.0};
        } else {
            s.encoded = {t, t};
            s.time_tangent = {1.0, 1.0};
        }
    }
    return s;
}

ConditionBatch encode_batch(Scheme scheme, Task task, std::span<const double> t) {
    const std::size_t k = condition_arity(scheme);
    ConditionBatch b;
    b.task = task;
    b.encoded = Tensor(Shape{t.size(), k});
    b.tangent = Tensor(Shape{t.size(), k});
    for (std::size_t i = 0; i < t.size(); ++i) {
        const ConditioningSignal s = encode_condition(scheme, task, t[i]);
        for (std::size_t j = 0; j < k; ++j) {
            b.encoded[i * k + j] = s.encoded[j];
            b.tangent[i * k + j] = s.time_tangent[j];
        }
    }
    return b;
}

ConditionBatch broadcast(const ConditioningSignal& signal, std::size_t batch) {
    const std::size_t k = signal.encoded.size();
    ConditionBatch b;
    b.task = signal.task;
    b.encoded = Tensor(Shape{batch, k});
    b.tangent = Tensor(Shape{batch, k});
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            b.encoded[i * k + j] = signal.encoded[j];
            b.tangent[i * k + j] = signal.time_tangent[j];
        }
    return b;
}

ConditionBatch encode_pair(std::span<const double> t, std::span<const double> r) {
    if (t.size() != r.size()) throw ContractViolation("encode_pair: t and r differ in length");
    ConditionBatch b;
    b.task = Task::CM;
    b.encoded = Tensor(Shape{t.size(), 2});
    b.tangent = Tensor(Shape{t.size(), 2});
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!(r[i] >= 0.0 && r[i] <= 1.0)) throw ContractViolation("encode_pair: r must lie in [0, 1]");
        b.encoded[2 * i] = t[i];
        b.encoded[2 * i + 1] = r[i];
        b.tangent[2 * i] = 1.0;
    }
    return b;
}

namespace {

struct Standardization {
    double mean_x, mean_y, std_x, std_y;
};

// Exact moments of each generator.
Standardization eight_gaussians_moments() {
    const double r = kEightGaussiansRadius, s = kEightGaussiansStd;
    const double sd = std::sqrt(r * r / 2.0 + s * s);
    return {0.0, 0.0, sd, sd};
}

Standardization two_moons_moments() {
    const double n2 = kTwoMoonsNoise * kTwoMoonsNoise;
    const double inv_pi = 1.0 / std::numbers::pi;
    return {0.5, 0.25, std::sqrt(0.75 + n2), std::sqrt(0.5625 - inv_pi + n2)};
}

Standardization checkerboard_moments() {
    const double sd = std::sqrt(4.0 / 3.0);
    return {0.0, 0.0, sd, sd};
}

DataPoint standardize(double x, double y, int label, const Standardization& m) {
    return DataPoint{{(x - m.mean_x) / m.std_x, (y - m.mean_y) / m.std_y}, label};
}

}  // namespace

const std::vector<std::string>& dataset_names() {
    static const std::vector<std::string> names{"eight_gaussians", "two_moons", "checkerboard"};
    return names;
}

namespace {

[[noreturn]] void unknown_dataset(std::string_view name) {
    std::string valid;
    for (const auto& known : dataset_names()) valid += (valid.empty() ? "" : ", ") + known;
    throw ContractViolation("unknown dataset '" + std::string(name) + "' (valid: " + valid + ")");
}

}  // namespace

int dataset_classes(std::string_view name) {
    if (name == "eight_gaussians") return 8;
    if (name == "two_moons" || name == "checkerboard") return 0;
    unknown_dataset(name);
}

std::array<double, 2> eight_gaussians_center(int k) {
    const Standardization m = eight_gaussians_moments();
    const double a = 2.0 * std::numbers::pi * k / 8.0;
    return {kEightGaussiansRadius * std::cos(a) / m.std_x, kEightGaussiansRadius * std::sin(a) / m.std_y};
}

std::vector<DataPoint> make_dataset(std::string_view name, std::size_t n, Rng& rng) {
    std::vector<DataPoint> out;
    out.reserve(n);
    if (name == "eight_gaussians") {
        const Standardization m = eight_gaussians_moments();
        for (std::size_t i = 0; i < n; ++i) {
            const int k = static_cast<int>(rng.index(8));
            const double a = 2.0 * std::numbers::pi * k / 8.0;
            const double x = kEightGaussiansRadius * std::cos(a) + kEightGaussiansStd * rng.normal();
            const double y = kEightGaussiansRadius * std::sin(a) + kEightGaussiansStd * rng.normal();
            out.push_back(standardize(x, y, k, m));
        }
    } else if (name == "two_moons") {
        const Standardization m = two_moons_moments();
        for (std::size_t i = 0; i < n; ++i) {
            const double theta = std::numbers::pi * rng.uniform();
            const bool outer = rng.bernoulli(0.5);
            double x = outer ? std::cos(theta) : 1.0 - std::cos(theta);
            double y = outer ? std::sin(theta) : 0.5 - std::sin(theta);
            x += kTwoMoonsNoise * rng.normal();
            y += kTwoMoonsNoise * rng.normal();
            out.push_back(standardize(x, y, 0, m));
        }
    } else if (name == "checkerboard") {
        const Standardization m = checkerboard_moments();
        for (std::size_t i = 0; i < n; ++i) {
            // 4×4 board over [-2, 2]², cells with even (col + row) filled.
            const int col = static_cast<int>(rng.index(4));
            const int row = 2 * static_cast<int>(rng.index(2)) + (col % 2);
            const double x = col - 2.0 + rng.uniform();
            const double y = row - 2.0 + rng.uniform();
            out.push_back(standardize(x, y, 0, m));
        }
    } else {
        unknown_dataset(name);
    }
    return out;
}

Tensor points_tensor(std::span<const DataPoint> points) {
    Tensor t(Shape{points.size(), 2});
    for (std::size_t i = 0; i < points.size(); ++i) {
        t[2 * i] = points[i].x[0];
        t[2 * i + 1] = points[i].x[1];
    }
    return t;
}

std::vector<int> points_labels(std::span<const DataPoint> points) {
    std::vector<int> labels;
    labels.reserve(points.size());
    for (const DataPoint& p : points) labels.push_back(p.label);
    return labels;
}

void write_points_csv(std::ostream& os, std::span<const DataPoint> points) {
    os << "x,y,label\n";
    os.precision(17);
    for (const DataPoint& p : points) os << p.x[0] << ',' << p.x[1] << ',' << p.label << '\n';
}

}  // namespace facm::flow
