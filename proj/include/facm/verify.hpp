#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "facm/network.hpp"

namespace facm::verify {

struct CheckResult {
    std::string name;
    bool passed = false;
    /// The measured quantity the verdict rests on.
    double value = 0.0;
    double threshold = 0.0;
    std::string detail;
};

/// Reverse-mode gradients and forward-mode tangents of random small networks
/// against central differences (h = 1e-5), plus dot(grad, u) == jvp(u).
struct AutodiffReport {
    double max_grad_rel = 0.0;
    double max_jvp_rel = 0.0;
    double max_consistency_rel = 0.0;
};
AutodiffReport autodiff_oracles(std::size_t n_networks, std::uint64_t seed);

/// Largest |v̄ − (v + (1 − t)·dv̄/dt)| over random OT-FM points with t ≤ 0.99,
/// dv̄/dt taken by dual-number arithmetic on v̄ = (x1 − x_t)/(1 − t).
double average_velocity_identity(std::size_t n_points, std::uint64_t seed);

/// Largest ‖T_MF(r = 1) − T'_sCM‖∞ over a 9-point t grid and random
/// auxiliary-time networks.
double target_equivalence(std::size_t n_networks, std::uint64_t seed);

/// |empirical median − analytic median| of the default time schedule.
double time_schedule_median_error(std::size_t n_draws, std::uint64_t seed);

/// Checks the few-step sampler against the update formulas with an oracle
/// velocity field. Returns an empty string on success, otherwise what failed.
std::string sampler_contract();

/// mean (1 − t)‖dF/dt‖ at t = 0.999 divided by the same at t = 0.99, along
/// OT-FM paths ending at held-out data.
double boundary_ratio(const nn::Network& net, const std::string& dataset, std::size_t n, std::uint64_t seed);

/// Hermetic suite behind the `verify` command.
std::vector<CheckResult> run_suite(std::uint64_t seed);

void print_table(std::ostream& os, const std::vector<CheckResult>& results);

}  // namespace facm::verify
