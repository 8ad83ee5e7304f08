#include "facm/objectives.hpp"

#include <cmath>
#include <numbers>

namespace facm::obj {
namespace {

void require_row_count(const Tensor& x, std::span<const double> per_row, const char* op) {
    if (per_row.size() != x.rows())
        throw ContractViolation(std::string(op) + ": " + std::to_string(per_row.size()) + " row values for " +
                                std::to_string(x.rows()) + " rows");
}

std::vector<double> row_values(std::span<const double> t, const WeightFn& fn) {
    std::vector<double> out(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) out[i] = weight(t[i], fn);
    return out;
}

double mean_row_norm(const Tensor& x) {
    const Tensor sq = row_sqnorm(x.rank() == 1 ? x.reshaped(Shape{1, x.size()}) : x);
    double s = 0.0;
    for (double v : sq.data()) s += std::sqrt(v);
    return sq.empty() ? 0.0 : s / static_cast<double>(sq.size());
}

std::size_t degenerate_rows(const Tensor& a, const Tensor& b) {
    const std::size_t rows = a.rows(), n = a.cols();
    std::size_t count = 0;
    for (std::size_t i = 0; i < rows; ++i) {
        double na = 0.0, nb = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            na += a[i * n + j] * a[i * n + j];
            nb += b[i * n + j] * b[i * n + j];
        }
        if (std::sqrt(na) < ad::kDegenerateNorm || std::sqrt(nb) < ad::kDegenerateNorm) ++count;
    }
    return count;
}

/// With v_base == v_uncond and w = 1 the target is v_cond itself, free of rounding.
double guided(double base, double cond, double uncond, double w) {
    if (w == 1.0 && base == uncond) return cond;
    return base + w * (cond - uncond);
}

LossBreakdown finish(const ad::Var& fm, const ad::Var& cm, const ad::Var& total, ad::GradientMap* grads) {
    LossBreakdown out;
    out.fm_loss = fm.valid() ? fm.value().item() : 0.0;
    out.cm_loss = cm.value().item();
    out.total = total.value().item();
    out.finite = std::isfinite(out.fm_loss) && std::isfinite(out.cm_loss) && std::isfinite(out.total);
    if (grads) {
        *grads = ad::gradient(total);
        if (grads->non_finite) out.finite = false;
    }
    return out;
}

}  // namespace

void GuidanceSpec::validate() const {
    if (!(w >= 0.0)) throw ContractViolation("GuidanceSpec: w must be >= 0");
    if (!(t_low >= 0.0 && t_low <= 1.0)) throw ContractViolation("GuidanceSpec: t_low must lie in [0, 1]");
}

std::string_view to_string(WeightKind kind) {
    switch (kind) {
        case WeightKind::One: return "one";
        case WeightKind::Zero: return "zero";
        case WeightKind::OneMinusTPow: return "one_minus_t_pow";
        case WeightKind::CosHalfPi: return "cos_half_pi";
    }
    return "one";
}

WeightKind parse_weight_kind(std::string_view name) {
    if (name == "one") return WeightKind::One;
    if (name == "zero") return WeightKind::Zero;
    if (name == "one_minus_t_pow") return WeightKind::OneMinusTPow;
    if (name == "cos_half_pi") return WeightKind::CosHalfPi;
    throw ContractViolation("unknown weighting '" + std::string(name) +
                            "' (expected one, zero, one_minus_t_pow or cos_half_pi)");
}

void WeightingSpec::validate() const {
    for (const WeightFn* fn : {&alpha, &beta})
        if (fn->kind == WeightKind::OneMinusTPow && !(fn->p > 0.0))
            throw ContractViolation("WeightingSpec: exponent p must be positive");
}

double weight(double t, const WeightFn& fn) {
    switch (fn.kind) {
        case WeightKind::One: return 1.0;
        case WeightKind::Zero: return 0.0;
        case WeightKind::OneMinusTPow: return 1.0 - std::pow(t, fn.p);
        case WeightKind::CosHalfPi: return std::cos(t * std::numbers::pi / 2.0);
    }
    return 1.0;
}

Tensor cfg_velocity(const Tensor& v_base, const Tensor& v_cond, const Tensor& v_uncond, const GuidanceSpec& spec,
                    double t) {
    require_same_shape(v_base, v_cond, "cfg_velocity");
    require_same_shape(v_base, v_uncond, "cfg_velocity");
    if (t < spec.t_low) return v_base;
    Tensor out = v_base;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = guided(v_base[i], v_cond[i], v_uncond[i], spec.w);
    return out;
}

Tensor cfg_velocity(const Tensor& v_base, const Tensor& v_cond, const Tensor& v_uncond, const GuidanceSpec& spec,
                    std::span<const double> t) {
    require_same_shape(v_base, v_cond, "cfg_velocity");
    require_same_shape(v_base, v_uncond, "cfg_velocity");
    require_row_count(v_base, t, "cfg_velocity");
    Tensor out = v_base;
    const std::size_t n = out.cols();
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] < spec.t_low) continue;
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t k = i * n + j;
            out[k] = guided(v_base[k], v_cond[k], v_uncond[k], spec.w);
        }
    }
    return out;
}

double cosine_distance(const Tensor& a, const Tensor& b, bool* degenerate) {
    require_same_shape(a, b, "cosine_distance");
    const double na = l2norm(a), nb = l2norm(b);
    const bool bad = na < ad::kDegenerateNorm || nb < ad::kDegenerateNorm;
    if (degenerate) *degenerate = bad;
    if (bad) return 0.0;
    return 1.0 - dot(a, b) / (na * nb);
}

ad::Var fm_loss(const ad::Var& f_fm, const Tensor& v) {
    require_same_shape(f_fm.value(), v, "fm_loss");
    ad::Tape& tape = f_fm.tape();
    const ad::Var target = tape.constant(v);
    const ad::Var diff = ad::sub(f_fm, target);
    const ad::Var sq = ad::row_sum(ad::mul(diff, diff));
    return ad::mean(ad::add(sq, ad::cosine_distance_rows(f_fm, target)));
}

ad::Var norm_l2(const ad::Var& pred, const Tensor& target, double c, std::span<const double> row_weights) {
    if (!(c > 0.0)) throw ContractViolation("norm_l2: c must be positive");
    require_same_shape(pred.value(), target, "norm_l2");
    if (pred.value().rank() != 2) throw ContractViolation("norm_l2: expected a (B × D) batch");
    const std::size_t rows = target.rows();
    if (!row_weights.empty() && row_weights.size() != rows)
        throw ContractViolation("norm_l2: row weight count differs from batch size");
    ad::Tape& tape = pred.tape();
    const ad::Var diff = ad::sub(pred, tape.constant(target));
    const ad::Var e = ad::row_sum(ad::mul(diff, diff));
    Tensor scale(Shape{rows});
    for (std::size_t i = 0; i < rows; ++i)
        scale[i] = (row_weights.empty() ? 1.0 : row_weights[i]) / std::sqrt(e.value()[i] + c);
    return ad::mean(ad::mul(e, tape.constant(std::move(scale))));
}

CmTarget cm_target(const Tensor& f_sg, const Tensor& v, std::span<const double> t, const Tensor& dfdt,
                   std::span<const double> alpha, const ClampSpec& clamp) {
    require_same_shape(f_sg, v, "cm_target");
    require_same_shape(f_sg, dfdt, "cm_target");
    require_row_count(f_sg, t, "cm_target");
    require_row_count(f_sg, alpha, "cm_target");
    const std::size_t n = f_sg.cols();
    Tensor g(f_sg.shape());
    for (std::size_t i = 0; i < t.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t k = i * n + j;
            g[k] = f_sg[k] - (v[k] + (1.0 - t[i]) * dfdt[k]);
        }
    CmTarget out;
    out.mean_residual_norm = mean_row_norm(g);
    if (clamp.enabled) g = facm::clamp(g, clamp.lo, clamp.hi, &out.clamp);
    out.v_tar = f_sg;
    for (std::size_t i = 0; i < t.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) out.v_tar[i * n + j] -= alpha[i] * g[i * n + j];
    out.g = std::move(g);
    return out;
}

CmTarget cm_target(const Tensor& f_sg, const Tensor& v, double t, const Tensor& dfdt, double alpha,
                   const ClampSpec& clamp) {
    const std::vector<double> ts(f_sg.rows(), t), as(f_sg.rows(), alpha);
    return cm_target(f_sg, v, ts, dfdt, as, clamp);
}

double ScmWeighting::times_remaining(double t) const {
    if (kind == Kind::InverseRemaining) {
        if (!(t < 1.0)) throw ContractViolation("sCM target: w(t) = 1/(1 - t) is undefined at t = 1");
        return 1.0;
    }
    if (!custom) throw ContractViolation("sCM target: custom weighting has no function");
    return custom(t) * (1.0 - t);
}

Tensor scm_baseline_target(const Tensor& f_sg, const Tensor& v, std::span<const double> t, const Tensor& dfdt,
                           const ScmWeighting& w) {
    require_same_shape(f_sg, v, "scm_baseline_target");
    require_same_shape(f_sg, dfdt, "scm_baseline_target");
    require_row_count(f_sg, t, "scm_baseline_target");
    const std::size_t n = f_sg.cols();
    Tensor out(f_sg.shape());
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double scale = w.times_remaining(t[i]);
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t k = i * n + j;
            // total derivative of f = x_t + (1 - t) F along the path
            if (w.kind == ScmWeighting::Kind::InverseRemaining) {
                // F_sg cancels when w(t)(1 - t) = 1
                out[k] = v[k] + (1.0 - t[i]) * dfdt[k];
                continue;
            }
            const double df = v[k] - f_sg[k] + (1.0 - t[i]) * dfdt[k];
            out[k] = f_sg[k] + scale * df;
        }
    }
    return out;
}

Tensor meanflow_baseline_target(const Tensor& v, std::span<const double> t, std::span<const double> r,
                                const Tensor& dfdt_r) {
    require_same_shape(v, dfdt_r, "meanflow_baseline_target");
    require_row_count(v, t, "meanflow_baseline_target");
    require_row_count(v, r, "meanflow_baseline_target");
    const std::size_t n = v.cols();
    Tensor out = v;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!(r[i] >= 0.0 && r[i] <= 1.0)) throw ContractViolation("meanflow_baseline_target: r must lie in [0, 1]");
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += (r[i] - t[i]) * dfdt_r[i * n + j];
    }
    return out;
}

std::string_view to_string(Objective kind) {
    switch (kind) {
        case Objective::FACM: return "facm";
        case Objective::SCM: return "scm";
        case Objective::MeanFlow: return "meanflow";
    }
    return "facm";
}

Objective parse_objective(std::string_view name) {
    if (name == "facm") return Objective::FACM;
    if (name == "scm") return Objective::SCM;
    if (name == "meanflow") return Objective::MeanFlow;
    throw ContractViolation("unknown objective '" + std::string(name) + "' (expected facm, scm or meanflow)");
}

Tensor target_velocity(const nn::Network& net, const nn::Network* teacher, const flow::FlowBatch& batch,
                       const ObjectiveSettings& settings) {
    const flow::ConditionBatch c_fm = flow::encode_batch(settings.scheme, flow::Task::FM, batch.t);
    const std::vector<int> null_labels(batch.size(), -1);
    const nn::Network& guide = teacher ? *teacher : net;
    const bool conditional = guide.config().num_classes > 0;

    if (teacher) {
        const Tensor v_uncond = nn::forward(*teacher, batch.x_t, c_fm, null_labels);
        if (!conditional) return v_uncond;
        const Tensor v_cond = nn::forward(*teacher, batch.x_t, c_fm, batch.labels);
        return cfg_velocity(v_uncond, v_cond, v_uncond, settings.guidance, batch.t);
    }
    const Tensor v_base = batch.v;
    if (!conditional || settings.guidance.w == 0.0) return v_base;
    const Tensor v_cond = nn::forward(net, batch.x_t, c_fm, batch.labels);
    const Tensor v_uncond = nn::forward(net, batch.x_t, c_fm, null_labels);
    return cfg_velocity(v_base, v_cond, v_uncond, settings.guidance, batch.t);
}

LossBreakdown facm_loss(const nn::Network& net, const nn::Network* teacher, const flow::FlowBatch& batch,
                        const ObjectiveSettings& settings, ad::GradientMap* grads) {
    settings.guidance.validate();
    settings.weighting.validate();
    if (teacher && teacher->config().scheme != net.config().scheme)
        throw ContractViolation("facm_loss: teacher and student use different conditioning schemes");
    const Tensor v = target_velocity(net, teacher, batch, settings);

    ad::Tape tape;
    const auto params = net.bind(tape, true);
    const flow::ConditionBatch c_fm = flow::encode_batch(settings.scheme, flow::Task::FM, batch.t);
    const flow::ConditionBatch c_cm = flow::encode_batch(settings.scheme, flow::Task::CM, batch.t);

    const ad::Var f_fm = net.forward(params, tape.constant(batch.x_t), tape.constant(c_fm.encoded), batch.labels);
    // One sweep yields F_CM and its total derivative along (v, dc/dt).
    const ad::Var f_cm =
        net.forward(params, tape.input(batch.x_t, v), tape.input(c_cm.encoded, c_cm.tangent), batch.labels);
    const Tensor dfdt = f_cm.tangent();

    const std::vector<double> alpha = row_values(batch.t, settings.weighting.alpha);
    const std::vector<double> beta = row_values(batch.t, settings.weighting.beta);
    const CmTarget target = cm_target(f_cm.value(), v, batch.t, dfdt, alpha, settings.clamp);

    const ad::Var fm = ad::scale(fm_loss(f_fm, v), settings.fm_weight);
    const ad::Var cm = norm_l2(f_cm, target.v_tar, settings.norm_c, beta);
    const ad::Var total = ad::add(fm, cm);

    LossBreakdown out = finish(fm, cm, total, grads);
    out.diag.mean_residual_norm = target.mean_residual_norm;
    out.diag.clamp_fraction =
        static_cast<double>(target.clamp.clamped) / static_cast<double>(std::max<std::size_t>(1, dfdt.size()));
    out.diag.mean_dfdt_norm = mean_row_norm(dfdt);
    out.diag.degenerate_cosine_rows = degenerate_rows(f_fm.value(), v);
    return out;
}

LossBreakdown scm_loss(const nn::Network& net, const nn::Network* teacher, const flow::FlowBatch& batch,
                       const ObjectiveSettings& settings, ad::GradientMap* grads) {
    const Tensor v = target_velocity(net, teacher, batch, settings);
    ad::Tape tape;
    const auto params = net.bind(tape, true);
    const flow::ConditionBatch c_cm = flow::encode_batch(settings.scheme, flow::Task::CM, batch.t);
    const ad::Var f_cm =
        net.forward(params, tape.input(batch.x_t, v), tape.input(c_cm.encoded, c_cm.tangent), batch.labels);
    const Tensor dfdt = f_cm.tangent();
    const Tensor target = scm_baseline_target(f_cm.value(), v, batch.t, dfdt, settings.scm_weighting);

    const ad::Var diff = ad::sub(f_cm, tape.constant(target));
    const ad::Var cm = ad::mean(ad::row_sum(ad::mul(diff, diff)));
    LossBreakdown out = finish({}, cm, cm, grads);
    out.diag.mean_dfdt_norm = mean_row_norm(dfdt);
    return out;
}

LossBreakdown meanflow_loss(const nn::Network& net, const nn::Network* teacher, const flow::FlowBatch& batch,
                            std::span<const double> r, const ObjectiveSettings& settings, ad::GradientMap* grads) {
    if (net.config().scheme != flow::Scheme::AuxiliaryTime || settings.scheme != flow::Scheme::AuxiliaryTime)
        throw ContractViolation("meanflow_loss: the (t, r) condition needs the auxiliary_time scheme");
    if (r.size() != batch.size()) throw ContractViolation("meanflow_loss: one r per batch row required");
    const Tensor v = target_velocity(net, teacher, batch, settings);
    ad::Tape tape;
    const auto params = net.bind(tape, true);
    const flow::ConditionBatch c = flow::encode_pair(batch.t, r);
    const ad::Var f = net.forward(params, tape.input(batch.x_t, v), tape.input(c.encoded, c.tangent), batch.labels);
    const Tensor dfdt = f.tangent();
    const Tensor target = meanflow_baseline_target(v, batch.t, r, dfdt);
    const ad::Var cm = norm_l2(f, target, settings.norm_c);
    LossBreakdown out = finish({}, cm, cm, grads);
    out.diag.mean_dfdt_norm = mean_row_norm(dfdt);
    return out;
}

}  // namespace facm::obj
