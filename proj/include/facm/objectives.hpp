#pragma once

#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "facm/autodiff.hpp"
#include "facm/flow.hpp"
#include "facm/network.hpp"
#include "facm/tensor.hpp"

namespace facm::obj {

// --- specs -------------------------------------------------------------------

struct GuidanceSpec {
    double w = 1.75;
    /// Guidance is switched off for t < t_low (the noise end of the path).
    double t_low = 0.125;

    void validate() const;
    bool operator==(const GuidanceSpec&) const = default;
};

enum class WeightKind { One, Zero, OneMinusTPow, CosHalfPi };

std::string_view to_string(WeightKind kind);
WeightKind parse_weight_kind(std::string_view name);

struct WeightFn {
    WeightKind kind = WeightKind::One;
    double p = 0.5;  // exponent for OneMinusTPow

    bool operator==(const WeightFn&) const = default;
};

/// α(t) sets the relaxation step of the CM target, β(t) weights the CM loss.
struct WeightingSpec {
    WeightFn alpha{WeightKind::OneMinusTPow, 0.5};
    WeightFn beta{WeightKind::CosHalfPi, 0.5};

    void validate() const;
    bool operator==(const WeightingSpec&) const = default;
};

double weight(double t, const WeightFn& fn);
inline double alpha_weight(double t, const WeightingSpec& spec) { return weight(t, spec.alpha); }
inline double beta_weight(double t, const WeightingSpec& spec) { return weight(t, spec.beta); }

struct ClampSpec {
    bool enabled = true;
    double lo = -1.0;
    double hi = 1.0;

    bool operator==(const ClampSpec&) const = default;
};

// --- velocity targets ------------------------------------------------------

/// v_base + w·(v_cond − v_uncond), or v_base alone when t < t_low.
Tensor cfg_velocity(const Tensor& v_base, const Tensor& v_cond, const Tensor& v_uncond, const GuidanceSpec& spec,
                    double t);
/// Row-wise version with one t per row.
Tensor cfg_velocity(const Tensor& v_base, const Tensor& v_cond, const Tensor& v_uncond, const GuidanceSpec& spec,
                    std::span<const double> t);

// --- distances and losses ----------------------------------------------------

/// 1 − a·b / (‖a‖‖b‖) over whole tensors. Returns 0 and sets *degenerate
/// when either norm is below 1e-12.
double cosine_distance(const Tensor& a, const Tensor& b, bool* degenerate = nullptr);

/// Batch mean of ‖F − v‖² + cosine distance(F, v), per row.
ad::Var fm_loss(const ad::Var& f_fm, const Tensor& v);

/// Batch mean of row_weight · e / √(e + c) with e = ‖pred − target‖² per row.
/// √(e + c) is treated as a constant weight under differentiation.
ad::Var norm_l2(const ad::Var& pred, const Tensor& target, double c, std::span<const double> row_weights = {});

// --- consistency target --------------------------------------------------------

struct CmTarget {
    Tensor v_tar;
    /// Residual after clamping.
    Tensor g;
    double mean_residual_norm = 0.0;  // before clamping
    ClampStats clamp;
};

/// g = F_sg − (v + (1 − t)·dF/dt), clamped; v_tar = F_sg − α·g. One t and α per row.
CmTarget cm_target(const Tensor& f_sg, const Tensor& v, std::span<const double> t, const Tensor& dfdt,
                   std::span<const double> alpha, const ClampSpec& clamp = {});
CmTarget cm_target(const Tensor& f_sg, const Tensor& v, double t, const Tensor& dfdt, double alpha,
                   const ClampSpec& clamp = {});

// --- baseline targets ----------------------------------------------------------

/// w(t) for the sCM target in MSE form. InverseRemaining is w = 1/(1 − t),
/// for which w(t)·(1 − t) is exactly 1.
struct ScmWeighting {
    enum class Kind { InverseRemaining, Custom } kind = Kind::InverseRemaining;
    std::function<double(double)> custom;

    double times_remaining(double t) const;
};

/// F_sg + w(t)(1 − t)·(v − F_sg + (1 − t)·dF/dt), one t per row.
Tensor scm_baseline_target(const Tensor& f_sg, const Tensor& v, std::span<const double> t, const Tensor& dfdt,
                           const ScmWeighting& w = {});

/// v + (r − t)·dF/dt where dF/dt was taken under the (t, r) condition.
Tensor meanflow_baseline_target(const Tensor& v, std::span<const double> t, std::span<const double> r,
                                const Tensor& dfdt_r);

// --- full objectives -----------------------------------------------------------

enum class Objective { FACM, SCM, MeanFlow };
std::string_view to_string(Objective kind);
Objective parse_objective(std::string_view name);

struct ObjectiveSettings {
    Objective kind = Objective::FACM;
    flow::Scheme scheme = flow::Scheme::ExpandedInterval;
    GuidanceSpec guidance;
    WeightingSpec weighting;
    ClampSpec clamp;
    double norm_c = 1e-3;
    double fm_weight = 1.0;
    ScmWeighting scm_weighting;
};

struct LossDiagnostics {
    double mean_residual_norm = 0.0;
    double clamp_fraction = 0.0;
    double mean_dfdt_norm = 0.0;
    std::size_t degenerate_cosine_rows = 0;
};

struct LossBreakdown {
    double fm_loss = 0.0;
    double cm_loss = 0.0;
    double total = 0.0;
    LossDiagnostics diag;
    bool finite = true;
};

/// Instantaneous velocity the objective regresses on. With a teacher:
/// CFG over the teacher's FM-condition predictions (v_base = v_uncond).
/// Without: x1 − x0 plus guidance from the stop-gradient online model.
Tensor target_velocity(const nn::Network& net, const nn::Network* teacher, const flow::FlowBatch& batch,
                       const ObjectiveSettings& settings);

/// Flow-anchored objective: FM anchor on c_FM plus the relaxed CM loss on
/// c_CM whose total derivative comes from a single forward-mode sweep.
/// When `grads` is given it receives d(total)/d(params of net).
LossBreakdown facm_loss(const nn::Network& net, const nn::Network* teacher, const flow::FlowBatch& batch,
                        const ObjectiveSettings& settings, ad::GradientMap* grads = nullptr);

/// Pure consistency objective in MSE form with the sCM target (no anchor).
LossBreakdown scm_loss(const nn::Network& net, const nn::Network* teacher, const flow::FlowBatch& batch,
                       const ObjectiveSettings& settings, ad::GradientMap* grads = nullptr);

/// Average-velocity objective on (t, r) conditions; rows with r == t reduce
/// to flow matching. Requires the AuxiliaryTime scheme.
LossBreakdown meanflow_loss(const nn::Network& net, const nn::Network* teacher, const flow::FlowBatch& batch,
                            std::span<const double> r, const ObjectiveSettings& settings,
                            ad::GradientMap* grads = nullptr);

}  // namespace facm::obj
