#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "facm/flow.hpp"
#include "facm/network.hpp"
#include "facm/objectives.hpp"
#include "facm/rng.hpp"
#include "facm/tensor.hpp"

namespace facm::sample {

/// Velocity field F(x, c, labels) on a (B × D) batch.
using VelocityFn = std::function<Tensor(const Tensor& x, const flow::ConditionBatch& cond, std::span<const int> labels)>;

VelocityFn network_velocity(const nn::Network& net);

/// t_i = (i − 1)/N for i = 1..N.
std::vector<double> timesteps(std::size_t n_steps);

/// Intermediate states of one few-step run.
struct SampleTrace {
    std::vector<double> t;
    std::vector<Tensor> inputs;  // x_{t_i}
    std::vector<Tensor> x_hat;   // endpoint predictions
    std::vector<Tensor> noise;   // z_i used to re-noise towards t_{i+1}
    Tensor output;
};

/// Prior noise for sample i comes from stream (seed, "sample.prior", i); the
/// re-noising draw for (sample i, step s) from (seed, "sample.renoise", i, s).
SampleTrace few_step_trace(const VelocityFn& f, flow::Scheme scheme, std::size_t n_steps, const Tensor& x0,
                           std::span<const int> labels, std::uint64_t seed);

Tensor prior_noise(std::size_t n, std::size_t dim, std::uint64_t seed);

Tensor few_step_sample(const nn::Network& net, std::size_t n_steps, std::size_t n_samples, std::span<const int> labels,
                       std::uint64_t seed);
Tensor few_step_sample(const nn::Network& net, std::size_t n_steps, std::size_t n_samples, std::optional<int> label,
                       Rng& rng);

enum class OdeMethod { Euler, Heun };
OdeMethod parse_ode_method(std::string_view name);

/// Integrates dx/dt = v(x, t) from 0 to 1 on a uniform grid, where v is the
/// FM-condition prediction with guidance applied per `guidance` (v_uncond as base).
Tensor ode_solve(const VelocityFn& f, flow::Scheme scheme, std::size_t n_steps, OdeMethod method, const Tensor& x0,
                 std::span<const int> labels, const obj::GuidanceSpec& guidance);

Tensor ode_solve_reference(const nn::Network& teacher, std::size_t n_steps, OdeMethod method, std::size_t n_samples,
                           std::span<const int> labels, const obj::GuidanceSpec& guidance, std::uint64_t seed);

// --- metrics ------------------------------------------------------------------------

/// 2·E‖a − b‖ − E‖a − a′‖ − E‖b − b′‖ over all ordered pairs (V-statistic).
double energy_distance(const Tensor& a, const Tensor& b);

/// Mean over random unit directions of the squared 1-D W2 between the
/// projections. Requires equal sample counts.
double sliced_w2(const Tensor& a, const Tensor& b, std::size_t n_projections, Rng& rng);

/// Exact squared W2 between two equal-size 1-D samples (sort and pair).
double w2_squared_1d(std::vector<double> a, std::vector<double> b);

// --- evaluation ------------------------------------------------------------------------

struct EvalRow {
    std::size_t nfe = 0;
    double energy_distance = 0.0;
    double sliced_w2 = 0.0;
    std::size_t n_samples = 0;
    std::uint64_t seed = 0;
};

struct ReferenceRow {
    std::string method;
    std::size_t steps = 0;
    double energy_distance = 0.0;
    double sliced_w2 = 0.0;
    std::size_t n_samples = 0;
    std::uint64_t seed = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    std::optional<ReferenceRow> reference;
    std::vector<Tensor> samples;  // one per NFE, aligned with rows
    std::vector<int> labels;
};

struct EvalOptions {
    std::string dataset = "eight_gaussians";
    std::vector<std::size_t> nfe{1, 2, 4};
    std::size_t n_samples = 2000;
    std::size_t n_projections = 128;
    std::uint64_t seed = 0;
    /// 0 skips the ODE reference; it needs a network trained for the FM condition.
    std::size_t reference_steps = 0;
    OdeMethod reference_method = OdeMethod::Heun;
    obj::GuidanceSpec guidance;
    /// -1 draws labels from the held-out data.
    int label = -1;
};

/// Held-out data drawn from stream (seed, "data.eval"), disjoint from training draws.
std::vector<flow::DataPoint> held_out_data(const std::string& dataset, std::size_t n, std::uint64_t seed);

EvalReport evaluate(const nn::Network& net, const EvalOptions& options);

inline constexpr const char* kReportHeader = "nfe,energy_distance,sliced_w2,n_samples,seed";
inline constexpr const char* kReferenceHeader = "method,steps,energy_distance,sliced_w2,n_samples,seed";
inline constexpr const char* kSamplesHeader = "x,y,label,nfe,seed";

void write_report_csv(std::ostream& os, const EvalReport& report);
void write_reference_csv(std::ostream& os, const ReferenceRow& row);
void write_samples_csv(std::ostream& os, const Tensor& samples, std::span<const int> labels, std::size_t nfe,
                       std::uint64_t seed, bool header = true);

}  // namespace facm::sample
