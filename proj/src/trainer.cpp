#include "facm/trainer.hpp"

#include <cmath>
#include <ostream>
#include <sstream>

#include "facm/config.hpp"

namespace facm::train {
namespace {

struct TrainingSet {
    Tensor points;
    std::vector<int> labels;
};

TrainingSet training_set(const TrainConfig& c) {
    Rng rng = Rng::stream(c.seed, "data.train");
    const auto pts = flow::make_dataset(c.dataset, c.dataset_size, rng);
    return {flow::points_tensor(pts), flow::points_labels(pts)};
}

/// Draws the step's batch from its own stream so the trace never depends on
/// how earlier steps consumed randomness.
flow::FlowBatch draw_batch(const TrainConfig& c, const TrainingSet& data, Rng& rng) {
    const std::size_t b = c.batch_size, d = data.points.cols(), n = data.points.rows();
    const bool conditional = c.num_classes() > 0;
    Tensor x0(Shape{b, d}), x1(Shape{b, d});
    std::vector<double> t(b);
    std::vector<int> labels(b, -1);
    for (std::size_t i = 0; i < b; ++i) {
        const std::size_t k = rng.index(n);
        for (std::size_t j = 0; j < d; ++j) {
            x1[i * d + j] = data.points[k * d + j];
            x0[i * d + j] = rng.normal();
        }
        t[i] = flow::sample_time(rng, c.schedule);
        const bool drop = rng.bernoulli(c.label_dropout);
        if (conditional && !drop) labels[i] = data.labels[k];
    }
    return flow::interpolate_batch(x0, x1, std::move(t), std::move(labels));
}

using LossFn = std::function<obj::LossBreakdown(const nn::Network&, const flow::FlowBatch&, Rng&, ad::GradientMap*)>;

TrainResult optimize(const TrainConfig& c, nn::Network net, const LossFn& loss, bool clip, const StepHook& hook) {
    const TrainingSet data = training_set(c);
    OptimizerState opt_state = OptimizerState::zeros_like(net.params());
    EmaState ema{net.params(), ema_decay(c.ema_rel_length, c.steps)};
    const AdamW opt{c.lr, c.adam_betas, c.adam_eps, c.weight_decay};

    TrainResult result;
    std::size_t streak = 0;
    std::size_t done = 0;
    for (std::size_t step = 1; step <= c.steps; ++step) {
        Rng rng = Rng::stream(c.seed, "train.batch", step);
        const flow::FlowBatch batch = draw_batch(c, data, rng);
        ad::GradientMap grads;
        const obj::LossBreakdown lb = loss(net, batch, rng, &grads);
        const double norm = grads.global_norm();
        const TraceRow row{step, lb.fm_loss, lb.cm_loss, lb.total, norm, lb.diag.clamp_fraction};
        result.trace.push_back(row);
        if (hook) hook(row);
        if (!lb.finite || !std::isfinite(norm)) {
            ++result.skipped_steps;
            if (++streak >= c.nonfinite_abort) {
                std::ostringstream os;
                os << "aborted at step " << step << " after " << streak << " consecutive non-finite steps"
                   << " (fm_loss=" << lb.fm_loss << ", cm_loss=" << lb.cm_loss
                   << ", mean |g|=" << lb.diag.mean_residual_norm << ", mean |dF/dt|=" << lb.diag.mean_dfdt_norm;
                if (!grads.non_finite_params.empty()) os << ", first bad gradient: " << grads.non_finite_params.front();
                os << ")";
                result.aborted = true;
                result.diagnostics = os.str();
                break;
            }
            continue;
        }
        streak = 0;
        if (clip && norm > c.grad_clip) {
            const double s = c.grad_clip / norm;
            for (auto& [name, g] : grads.grads)
                for (double& v : g.data()) v *= s;
        }
        adamw_step(net.params(), grads.grads, opt_state, opt);
        ema_update(ema, net.params());
        done = step;
    }

    nn::Checkpoint& ck = result.checkpoint;
    ck.config = net.config();
    ck.params = net.params();
    ck.ema = ema.shadow;
    nn::ParamMap moments;
    for (const auto& [name, m] : opt_state.m) moments["m/" + name] = m;
    for (const auto& [name, v] : opt_state.v) moments["v/" + name] = v;
    ck.optimizer = std::move(moments);
    ck.optimizer_step = opt_state.step;
    ck.step = done;
    ck.config_hash = config_hash(c);
    return result;
}

std::vector<double> draw_r(std::span<const double> t, double ratio, Rng& rng) {
    std::vector<double> r(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double u = rng.uniform();
        r[i] = rng.bernoulli(ratio) ? t[i] : t[i] + (1.0 - t[i]) * u;
    }
    return r;
}

LossFn consistency_loss(const TrainConfig& c, const nn::Network* teacher) {
    const obj::ObjectiveSettings settings = c.objective_settings();
    return [settings, teacher, ratio = c.meanflow_ratio](const nn::Network& net, const flow::FlowBatch& batch,
                                                         Rng& rng, ad::GradientMap* grads) {
        switch (settings.kind) {
            case obj::Objective::FACM: return obj::facm_loss(net, teacher, batch, settings, grads);
            case obj::Objective::SCM: return obj::scm_loss(net, teacher, batch, settings, grads);
            case obj::Objective::MeanFlow:
                return obj::meanflow_loss(net, teacher, batch, draw_r(batch.t, ratio, rng), settings, grads);
        }
        throw ContractViolation("unknown objective");
    };
}

void require_compatible(const nn::NetworkConfig& teacher, const nn::NetworkConfig& wanted) {
    auto mismatch = [](const char* what, auto a, auto b) {
        std::ostringstream os;
        os << "incompatible teacher: " << what << " is " << a << " but the config asks for " << b;
        throw ContractViolation(os.str());
    };
    if (teacher.scheme != wanted.scheme) mismatch("scheme", flow::to_string(teacher.scheme), flow::to_string(wanted.scheme));
    if (teacher.input_dim != wanted.input_dim) mismatch("input_dim", teacher.input_dim, wanted.input_dim);
    if (teacher.hidden_width != wanted.hidden_width) mismatch("hidden_width", teacher.hidden_width, wanted.hidden_width);
    if (teacher.depth != wanted.depth) mismatch("depth", teacher.depth, wanted.depth);
    if (teacher.time_embed_dim != wanted.time_embed_dim)
        mismatch("time_embed_dim", teacher.time_embed_dim, wanted.time_embed_dim);
    if (teacher.num_classes != wanted.num_classes) mismatch("num_classes", teacher.num_classes, wanted.num_classes);
}

}  // namespace

std::string_view to_string(Paradigm p) {
    switch (p) {
        case Paradigm::PretrainTeacher: return "pretrain_teacher";
        case Paradigm::Distill: return "distill";
        case Paradigm::Scratch: return "scratch";
    }
    return "distill";
}

Paradigm parse_paradigm(std::string_view name) {
    if (name == "pretrain_teacher") return Paradigm::PretrainTeacher;
    if (name == "distill") return Paradigm::Distill;
    if (name == "scratch") return Paradigm::Scratch;
    throw ContractViolation("unknown paradigm '" + std::string(name) + "' (expected pretrain_teacher, distill or scratch)");
}

int TrainConfig::num_classes() const { return class_conditional ? flow::dataset_classes(dataset) : 0; }

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ContractViolation(msg); };
    if (steps < 1) fail("steps must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(lr > 0.0)) fail("lr must be > 0");
    for (double b : adam_betas)
        if (!(b > 0.0 && b < 1.0)) fail("adam_betas must lie in (0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
    if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
    if (!(ema_rel_length > 0.0)) fail("ema_rel_length must be > 0");
    if (!(schedule.p_std > 0.0)) fail("p_std must be > 0");
    if (dataset_size < 1) fail("dataset_size must be >= 1");
    if (!(mixed_condition_ratio >= 0.0 && mixed_condition_ratio <= 1.0)) fail("mixed_condition_ratio must lie in [0, 1]");
    if (!(label_dropout >= 0.0 && label_dropout <= 1.0)) fail("label_dropout must lie in [0, 1]");
    if (!(meanflow_ratio >= 0.0 && meanflow_ratio <= 1.0)) fail("meanflow_ratio must lie in [0, 1]");
    if (!(fm_weight >= 0.0)) fail("fm_weight must be >= 0");
    if (!(clamp.lo <= clamp.hi)) fail("clamp_lo must not exceed clamp_hi");
    if (!(norm_c > 0.0)) fail("norm_c must be > 0");
    if (!(grad_clip > 0.0)) fail("grad_clip must be > 0");
    if (nonfinite_abort < 1) fail("nonfinite_abort must be >= 1");
    if (eval_nfe.empty()) fail("eval_nfe must list at least one step count");
    for (std::size_t n : eval_nfe)
        if (n < 1) fail("eval_nfe entries must be >= 1");
    if (eval_samples < 1) fail("eval_samples must be >= 1");
    if (eval_projections < 1) fail("eval_projections must be >= 1");
    if (reference_method != "euler" && reference_method != "heun") fail("reference_method must be euler or heun");
    guidance.validate();
    weighting.validate();
    network_config().validate();
    if (objective == obj::Objective::MeanFlow && scheme != flow::Scheme::AuxiliaryTime)
        fail("objective meanflow needs scheme auxiliary_time");
    if (label < -1 || label >= num_classes()) fail("label must be -1 or a valid class index");
}

nn::NetworkConfig TrainConfig::network_config() const {
    nn::NetworkConfig n;
    n.input_dim = 2;
    n.hidden_width = hidden_width;
    n.depth = depth;
    n.time_embed_dim = time_embed_dim;
    n.num_classes = num_classes();
    n.scheme = scheme;
    n.seed = seed;
    n.dropout = dropout;
    return n;
}

obj::ObjectiveSettings TrainConfig::objective_settings() const {
    obj::ObjectiveSettings s;
    s.kind = objective;
    s.scheme = scheme;
    s.guidance = guidance;
    s.weighting = weighting;
    s.clamp = clamp;
    s.norm_c = norm_c;
    s.fm_weight = fm_weight;
    return s;
}

OptimizerState OptimizerState::zeros_like(const nn::ParamMap& params) {
    OptimizerState s;
    for (const auto& [name, p] : params) {
        s.m[name] = Tensor::zeros_like(p);
        s.v[name] = Tensor::zeros_like(p);
    }
    return s;
}

void adamw_step(nn::ParamMap& params, const std::map<std::string, Tensor>& grads, OptimizerState& state,
                const AdamW& opt) {
    for (const auto& [name, g] : grads) {
        const auto it = params.find(name);
        if (it == params.end()) throw ContractViolation("adamw_step: gradient for unknown parameter '" + name + "'");
        require_same_shape(it->second, g, "adamw_step");
        if (!state.m.count(name)) {
            state.m[name] = Tensor::zeros_like(g);
            state.v[name] = Tensor::zeros_like(g);
        }
        require_same_shape(state.m.at(name), g, "adamw_step");
    }
    ++state.step;
    const auto k = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(opt.betas[0], k);
    const double c2 = 1.0 - std::pow(opt.betas[1], k);
    for (const auto& [name, g] : grads) {
        Tensor& p = params.at(name);
        Tensor& m = state.m.at(name);
        Tensor& v = state.v.at(name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = opt.betas[0] * m[i] + (1.0 - opt.betas[0]) * g[i];
            v[i] = opt.betas[1] * v[i] + (1.0 - opt.betas[1]) * g[i] * g[i];
            const double mhat = m[i] / c1, vhat = v[i] / c2;
            p[i] -= opt.lr * opt.weight_decay * p[i];
            p[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
        }
    }
}

double ema_decay(double rel_length, std::size_t total_steps) {
    if (!(rel_length > 0.0) || total_steps == 0) throw ContractViolation("ema_decay: need rel_length > 0 and steps > 0");
    const double half_life = rel_length * static_cast<double>(total_steps) / 2.0;
    return std::exp(std::log(0.5) / half_life);
}

void ema_update(EmaState& ema, const nn::ParamMap& online) {
    if (ema.shadow.size() != online.size()) throw ContractViolation("ema_update: parameter sets differ");
    for (const auto& [name, p] : online) {
        const auto it = ema.shadow.find(name);
        if (it == ema.shadow.end()) throw ContractViolation("ema_update: no shadow for '" + name + "'");
        Tensor& s = it->second;
        require_same_shape(s, p, "ema_update");
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = ema.decay * s[i] + (1.0 - ema.decay) * p[i];
    }
}

void write_trace_row(std::ostream& os, const TraceRow& r) {
    using config::format_double;
    os << r.step << ',' << format_double(r.fm_loss) << ',' << format_double(r.cm_loss) << ','
       << format_double(r.total) << ',' << format_double(r.grad_norm) << ',' << format_double(r.clamp_fraction)
       << '\n';
}

std::string config_hash(const TrainConfig& c) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : config::to_text(c)) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

TrainResult pretrain_teacher(const TrainConfig& c, const StepHook& hook) {
    if (c.paradigm != Paradigm::PretrainTeacher) throw ContractViolation("pretrain_teacher: paradigm must be pretrain_teacher");
    c.validate();
    const nn::Network net = nn::Network::init(c.network_config());
    const LossFn loss = [&c](const nn::Network& model, const flow::FlowBatch& batch, Rng& rng,
                             ad::GradientMap* grads) {
        const auto fm = flow::encode_batch(c.scheme, flow::Task::FM, batch.t);
        const auto cm = flow::encode_batch(c.scheme, flow::Task::CM, batch.t);
        // Each row sees one of the two encodings of the same time.
        Tensor cond = cm.encoded;
        const std::size_t k = cond.cols();
        for (std::size_t i = 0; i < batch.size(); ++i)
            if (rng.bernoulli(c.mixed_condition_ratio))
                for (std::size_t j = 0; j < k; ++j) cond[i * k + j] = fm.encoded[i * k + j];
        ad::Tape tape;
        const auto params = model.bind(tape, true);
        Rng dropout_rng = Rng::stream(c.seed, "train.dropout", rng.engine()());
        const ad::Var f = model.forward(params, tape.constant(batch.x_t), tape.constant(cond), batch.labels,
                                        c.dropout > 0.0 ? &dropout_rng : nullptr);
        const ad::Var l = obj::fm_loss(f, batch.v);
        obj::LossBreakdown lb;
        lb.fm_loss = lb.total = l.value().item();
        lb.finite = std::isfinite(lb.total);
        *grads = ad::gradient(l);
        if (grads->non_finite) lb.finite = false;
        return lb;
    };
    return optimize(c, net, loss, false, hook);
}

TrainResult distill(const nn::Checkpoint& teacher_ckpt, const TrainConfig& c, const StepHook& hook) {
    if (c.paradigm != Paradigm::Distill) throw ContractViolation("distill: paradigm must be distill");
    c.validate();
    require_compatible(teacher_ckpt.config, c.network_config());
    const nn::Network teacher = teacher_ckpt.eval_network();
    nn::NetworkConfig student_cfg = teacher.config();
    student_cfg.dropout = c.dropout;
    const nn::Network student(student_cfg, teacher.params());
    const bool clip = c.objective != obj::Objective::FACM;
    return optimize(c, student, consistency_loss(c, &teacher), clip, hook);
}

TrainResult train_scratch(const TrainConfig& c, const StepHook& hook) {
    if (c.paradigm != Paradigm::Scratch) throw ContractViolation("train_scratch: paradigm must be scratch");
    c.validate();
    const bool clip = c.objective != obj::Objective::FACM;
    return optimize(c, nn::Network::init(c.network_config()), consistency_loss(c, nullptr), clip, hook);
}

TrainResult run(const TrainConfig& c, const StepHook& hook) {
    switch (c.paradigm) {
        case Paradigm::PretrainTeacher: return pretrain_teacher(c, hook);
        case Paradigm::Scratch: return train_scratch(c, hook);
        case Paradigm::Distill: {
            if (c.teacher.empty()) throw ContractViolation("distill needs a teacher checkpoint (key 'teacher')");
            return distill(nn::load_checkpoint(c.teacher, c.scheme), c, hook);
        }
    }
    throw ContractViolation("unknown paradigm");
}

double fm_validation_loss(const nn::Network& net, const TrainConfig& c, std::size_t n, std::uint64_t seed) {
    Rng rng = Rng::stream(seed, "fm.validation");
    const auto pts = flow::make_dataset(c.dataset, n, rng);
    const Tensor x1 = flow::points_tensor(pts);
    Tensor x0(x1.shape());
    for (double& v : x0.data()) v = rng.normal();
    std::vector<double> t(n);
    for (double& v : t) v = flow::sample_time(rng, c.schedule);
    std::vector<int> labels = net.config().num_classes > 0 ? flow::points_labels(pts) : std::vector<int>(n, -1);
    const auto batch = flow::interpolate_batch(x0, x1, std::move(t), std::move(labels));
    ad::Tape tape;
    const auto params = net.bind(tape, false);
    const auto cond = flow::encode_batch(net.config().scheme, flow::Task::FM, batch.t);
    const ad::Var f = net.forward(params, tape.constant(batch.x_t), tape.constant(cond.encoded), batch.labels);
    return obj::fm_loss(f, batch.v).value().item();
}

}  // namespace facm::train
