#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "facm/rng.hpp"
#include "facm/tensor.hpp"

namespace facm::flow {

// --- time schedule ---------------------------------------------------------

/// Log-normal σ pushed through t = 1 − (2/π)·arctan(σ); concentrates t near
/// the data end of the path.
struct TimeSchedule {
    double p_mean = -0.8;
    double p_std = 1.6;

    bool operator==(const TimeSchedule&) const = default;
};

/// Draws are regenerated until they land in (kTimeMargin, 1 − kTimeMargin).
inline constexpr double kTimeMargin = 1e-5;

double time_from_sigma(double sigma);
double sample_time(Rng& rng, const TimeSchedule& schedule);

// --- OT-FM interpolant -----------------------------------------------------

/// One draw from the straight-line path between a prior sample and a data point.
struct FlowSample {
    Tensor x0;
    Tensor x1;
    double t = 0.0;
    Tensor x_t;
    Tensor v;
    std::optional<int> label;
};

FlowSample interpolate(const Tensor& x0, const Tensor& x1, double t, std::optional<int> label = std::nullopt);

/// Row-wise batch of interpolant draws. Labels use -1 for "no class".
struct FlowBatch {
    Tensor x0;
    Tensor x1;
    Tensor x_t;
    Tensor v;
    std::vector<double> t;
    std::vector<int> labels;

    std::size_t size() const { return t.size(); }
};

FlowBatch interpolate_batch(const Tensor& x0, const Tensor& x1, std::vector<double> t, std::vector<int> labels);

// --- task conditioning -----------------------------------------------------

enum class Scheme { ExpandedInterval, AuxiliaryTime };
enum class Task { FM, CM };

std::string_view to_string(Scheme scheme);
std::string_view to_string(Task task);
Scheme parse_scheme(std::string_view name);

std::size_t condition_arity(Scheme scheme);

/// Encoded condition for one time value, with the derivative of every encoded
/// component along the trajectory.
struct ConditioningSignal {
    Task task = Task::CM;
    double raw_t = 0.0;
    std::vector<double> encoded;
    std::vector<double> time_tangent;
};

/// ExpandedInterval: CM → [t], FM → [2 − t].
/// AuxiliaryTime:    CM → [t, 1], FM → [t, t].
ConditioningSignal encode_condition(Scheme scheme, Task task, double t);

/// Batched conditions: `encoded` and `tangent` are (B × arity).
struct ConditionBatch {
    Task task = Task::CM;
    Tensor encoded;
    Tensor tangent;

    std::size_t size() const { return encoded.rows(); }
    std::size_t arity() const { return encoded.cols(); }
};

ConditionBatch encode_batch(Scheme scheme, Task task, std::span<const double> t);
ConditionBatch broadcast(const ConditioningSignal& signal, std::size_t batch);
/// Two-time condition (t, r) used by average-velocity objectives. The
/// trajectory derivative is (1, 0): r stays fixed while t moves.
ConditionBatch encode_pair(std::span<const double> t, std::span<const double> r);

// --- toy datasets ----------------------------------------------------------

struct DataPoint {
    std::array<double, 2> x{};
    int label = 0;
};

inline constexpr double kEightGaussiansRadius = 2.0;
inline constexpr double kEightGaussiansStd = 0.25;
inline constexpr double kTwoMoonsNoise = 0.05;

const std::vector<std::string>& dataset_names();
/// Number of class labels the dataset carries (0 = unconditional).
int dataset_classes(std::string_view name);

/// n draws from an analytic 2D generator, standardized with the generator's
/// exact mean and per-axis standard deviation.
std::vector<DataPoint> make_dataset(std::string_view name, std::size_t n, Rng& rng);

/// Standardized eight_gaussians mode centre for class k.
std::array<double, 2> eight_gaussians_center(int k);

Tensor points_tensor(std::span<const DataPoint> points);
std::vector<int> points_labels(std::span<const DataPoint> points);

void write_points_csv(std::ostream& os, std::span<const DataPoint> points);

}  // namespace facm::flow
