#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "facm/objectives.hpp"

using namespace facm;
using namespace facm::obj;

namespace {

nn::NetworkConfig small(flow::Scheme scheme = flow::Scheme::ExpandedInterval, std::uint64_t seed = 21) {
    nn::NetworkConfig c;
    c.hidden_width = 12;
    c.depth = 2;
    c.time_embed_dim = 8;
    c.num_classes = 3;
    c.scheme = scheme;
    c.seed = seed;
    return c;
}

nn::Network perturbed(const nn::NetworkConfig& c) {
    nn::Network net = nn::Network::init(c);
    Rng rng = Rng::stream(c.seed, "test.perturb");
    for (auto& [name, t] : net.params())
        for (double& v : t.data()) v += 0.3 * rng.normal();
    return net;
}

flow::FlowBatch random_batch(std::size_t b, std::uint64_t seed) {
    Rng rng(seed);
    Tensor x0(Shape{b, 2}), x1(Shape{b, 2});
    for (double& v : x0.data()) v = rng.normal();
    for (double& v : x1.data()) v = 2.0 * rng.normal();
    std::vector<double> t(b);
    std::vector<int> labels(b);
    for (std::size_t i = 0; i < b; ++i) {
        t[i] = 0.05 + 0.9 * rng.uniform();
        labels[i] = static_cast<int>(i % 4) - 1;
    }
    return flow::interpolate_batch(x0, x1, t, labels);
}

double eval_norm_l2(const Tensor& pred, const Tensor& target, double c) {
    ad::Tape tape;
    return norm_l2(tape.constant(pred), target, c).value().item();
}

double eval_fm_loss(const Tensor& f, const Tensor& v) {
    ad::Tape tape;
    return fm_loss(tape.constant(f), v).value().item();
}

}  // namespace

TEST_CASE("cfg_velocity examples") {
    const GuidanceSpec spec{1.75, 0.125};
    const Tensor zero = Tensor::matrix(1, 2, {0, 0}), cond = Tensor::matrix(1, 2, {1, 0});
    CHECK(cfg_velocity(zero, cond, zero, spec, 0.5).bitwise_equal(Tensor::matrix(1, 2, {1.75, 0})));
    CHECK(cfg_velocity(zero, cond, zero, spec, 0.1).bitwise_equal(zero));

    Rng rng(1);
    Tensor u(Shape{6, 2}), c(Shape{6, 2}), base(Shape{6, 2});
    for (double& v : u.data()) v = rng.normal();
    for (double& v : c.data()) v = rng.normal();
    for (double& v : base.data()) v = rng.normal();
    const std::vector<double> t(6, 0.5);
    CHECK(cfg_velocity(u, c, u, GuidanceSpec{1.0, 0.0}, t).bitwise_equal(c));
    CHECK(cfg_velocity(base, c, u, GuidanceSpec{0.0, 0.0}, t).bitwise_equal(base));
    CHECK_THROWS_AS(GuidanceSpec({-1.0, 0.0}).validate(), ContractViolation);
}

TEST_CASE("cosine_distance examples") {
    const Tensor a = Tensor::vector({1, 2}), b = Tensor::vector({-1, -2}), o = Tensor::vector({-2, 1});
    CHECK(cosine_distance(a, a) == doctest::Approx(0.0));
    CHECK(cosine_distance(a, b) == doctest::Approx(2.0));
    CHECK(cosine_distance(a, o) == doctest::Approx(1.0));
    bool degenerate = false;
    CHECK(cosine_distance(a, Tensor::vector({0, 0}), &degenerate) == 0.0);
    CHECK(degenerate);
}

TEST_CASE("fm_loss examples") {
    const Tensor v = Tensor::matrix(2, 2, {1, 0, 0.6, 0.8});
    CHECK(eval_fm_loss(v, v) == doctest::Approx(0.0));
    CHECK(eval_fm_loss(-v, v) == doctest::Approx(6.0));
}

TEST_CASE("fm_loss gradient matches finite differences") {
    Rng rng(2);
    Tensor f(Shape{4, 3}), v(Shape{4, 3});
    for (double& x : f.data()) x = rng.normal();
    for (double& x : v.data()) x = rng.normal();
    ad::Tape tape;
    const ad::Var p = tape.parameter("f", f);
    const ad::GradientMap g = ad::gradient(fm_loss(p, v));
    const double h = 1e-5;
    for (std::size_t i = 0; i < f.size(); ++i) {
        Tensor fp = f, fm = f;
        fp[i] += h;
        fm[i] -= h;
        const double fd = (eval_fm_loss(fp, v) - eval_fm_loss(fm, v)) / (2 * h);
        CHECK(std::abs(fd - g.at("f")[i]) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("norm_l2 examples and constant denominator") {
    const Tensor zero = Tensor::matrix(1, 2, {0, 0});
    CHECK(eval_norm_l2(zero, zero, 1e-3) == 0.0);
    CHECK(eval_norm_l2(Tensor::matrix(1, 2, {1, 0}), zero, 1e-3) == doctest::Approx(0.99950).epsilon(1e-5));
    CHECK(std::abs(eval_norm_l2(Tensor::matrix(1, 2, {100, 0}), zero, 1e-3) - 100.0) <= 1e-4);
    CHECK_THROWS_AS(eval_norm_l2(zero, zero, 0.0), ContractViolation);

    // d/dp of e/√(e0 + c) with e0 held fixed: 2(p − y)/√(e0 + c)
    ad::Tape tape;
    const ad::Var p = tape.parameter("p", Tensor::matrix(1, 2, {3, 4}));
    const ad::GradientMap g = ad::gradient(norm_l2(p, zero, 1.0));
    CHECK(g.at("p")[0] == doctest::Approx(6.0 / std::sqrt(26.0)));
    CHECK(g.at("p")[1] == doctest::Approx(8.0 / std::sqrt(26.0)));
}

TEST_CASE("weighting functions") {
    const WeightFn a{WeightKind::OneMinusTPow, 0.5}, b{WeightKind::CosHalfPi, 0.5}, one{WeightKind::One, 0.5};
    CHECK(weight(0.25, a) == 0.5);
    CHECK(std::abs(weight(1.0, b)) < 1e-16);
    for (const WeightFn& fn : {a, b, one}) CHECK(weight(0.0, fn) == 1.0);
    CHECK(parse_weight_kind("cos_half_pi") == WeightKind::CosHalfPi);
    CHECK_THROWS_AS(parse_weight_kind("tanh"), ContractViolation);
    WeightingSpec bad;
    bad.alpha = {WeightKind::OneMinusTPow, 0.0};
    CHECK_THROWS_AS(bad.validate(), ContractViolation);
}

TEST_CASE("cm_target examples") {
    const CmTarget r = cm_target(Tensor::matrix(1, 2, {3, 0}), Tensor::matrix(1, 2, {0, 0}), 0.5,
                                 Tensor::matrix(1, 2, {0, 0}), 0.5);
    CHECK(r.g.bitwise_equal(Tensor::matrix(1, 2, {1, 0})));
    CHECK(r.v_tar.bitwise_equal(Tensor::matrix(1, 2, {2.5, 0})));
    CHECK(r.clamp.clamped == 1);
    CHECK(r.mean_residual_norm == 3.0);

    Rng rng(3);
    Tensor f(Shape{5, 2}), v(Shape{5, 2}), d(Shape{5, 2});
    for (double& x : f.data()) x = 0.2 * rng.normal();
    for (double& x : v.data()) x = 0.2 * rng.normal();
    for (double& x : d.data()) x = 0.2 * rng.normal();
    CHECK(cm_target(f, v, 0.3, d, 0.0).v_tar.bitwise_equal(f));
    const Tensor full = cm_target(f, v, 0.3, d, 1.0).v_tar;
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(full[i] == doctest::Approx(v[i] + 0.7 * d[i]).epsilon(1e-14));
}

TEST_CASE("sCM and MeanFlow baseline targets") {
    Rng rng(4);
    Tensor f(Shape{3, 2}), v(Shape{3, 2}), d(Shape{3, 2});
    for (double& x : f.data()) x = rng.normal();
    for (double& x : v.data()) x = rng.normal();
    for (double& x : d.data()) x = rng.normal();
    const std::vector<double> t{0.5, 0.5, 0.5};

    const Tensor scm = scm_baseline_target(f, v, t, d);
    const std::vector<double> ones(3, 1.0);
    const Tensor relaxed = cm_target(f, v, t, d, ones, ClampSpec{false, -1, 1}).v_tar;
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(std::abs(scm[i] - relaxed[i]) <= 1e-12);

    // w(t) = 2 at t = 0.5: F + 2·0.5·(v − F + 0.5·dF/dt) = v + 0.5·dF/dt
    ScmWeighting custom{ScmWeighting::Kind::Custom, [](double) { return 2.0; }};
    const Tensor spot = scm_baseline_target(f, v, t, d, custom);
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(spot[i] == doctest::Approx(v[i] + 0.5 * d[i]).epsilon(1e-13));

    const Tensor zero = Tensor::zeros_like(v);
    CHECK(scm_baseline_target(v, v, t, zero).bitwise_equal(v));
    CHECK(scm_baseline_target(v, v, t, zero, custom).bitwise_equal(v));
    CHECK_THROWS_AS(scm_baseline_target(f, v, std::vector<double>{1.0, 0.5, 0.5}, d), ContractViolation);

    CHECK(meanflow_baseline_target(v, t, t, d).bitwise_equal(v));
    const std::vector<double> t2(3, 0.2), r2(3, 0.7), r1(3, 1.0);
    const Tensor mf = meanflow_baseline_target(v, t2, r2, d);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(mf[i] == doctest::Approx(v[i] + 0.5 * d[i]).epsilon(1e-14));
    const Tensor at_one = meanflow_baseline_target(v, t, r1, d);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(at_one[i] - scm[i]) <= 1e-12);
    CHECK_THROWS_AS(meanflow_baseline_target(v, t, std::vector<double>{1.5, 1, 1}, d), ContractViolation);
}

TEST_CASE("facm_loss total is the sum of its parts") {
    const nn::Network net = perturbed(small());
    const nn::Network teacher = perturbed(small(flow::Scheme::ExpandedInterval, 22));
    const flow::FlowBatch batch = random_batch(16, 5);
    ObjectiveSettings s;
    for (const nn::Network* tch : {static_cast<const nn::Network*>(nullptr), &teacher}) {
        const LossBreakdown l = facm_loss(net, tch, batch, s);
        CHECK(l.finite);
        CHECK(l.total == l.fm_loss + l.cm_loss);
        CHECK(l.fm_loss > 0.0);
        CHECK(l.cm_loss > 0.0);
    }
    s.fm_weight = 0.0;
    const LossBreakdown ablated = facm_loss(net, &teacher, batch, s);
    CHECK(ablated.fm_loss == 0.0);
    CHECK(ablated.total == ablated.cm_loss);
}

TEST_CASE("a network that outputs the true velocity has zero loss") {
    nn::Network net = nn::Network::init(small());
    for (auto& [name, t] : net.params())
        for (double& v : t.data()) v = 0.0;
    net.params().at("out.b") = Tensor::vector({0.8, -1.3});
    Rng rng(6);
    const std::size_t b = 12;
    Tensor x0(Shape{b, 2}), x1(Shape{b, 2});
    std::vector<double> t(b);
    std::vector<int> labels(b);
    for (std::size_t i = 0; i < b; ++i) {
        x0.at(i, 0) = rng.normal();
        x0.at(i, 1) = rng.normal();
        x1.at(i, 0) = x0.at(i, 0) + 0.8;
        x1.at(i, 1) = x0.at(i, 1) - 1.3;
        t[i] = 0.05 + 0.9 * rng.uniform();
        labels[i] = static_cast<int>(i % 3);
    }
    const flow::FlowBatch batch = flow::interpolate_batch(x0, x1, t, labels);
    ObjectiveSettings s;
    ad::GradientMap g;
    const LossBreakdown l = facm_loss(net, nullptr, batch, s, &g);
    CHECK(l.fm_loss <= 1e-12);
    CHECK(l.cm_loss <= 1e-12);
    CHECK(l.diag.mean_dfdt_norm == 0.0);
    CHECK(l.diag.mean_residual_norm <= 1e-12);
}

TEST_CASE("facm_loss gradient matches finite differences with the target held fixed") {
    for (flow::Scheme scheme : {flow::Scheme::ExpandedInterval, flow::Scheme::AuxiliaryTime}) {
        CAPTURE(flow::to_string(scheme));
        const nn::Network net = perturbed(small(scheme));
        const nn::Network teacher = perturbed(small(scheme, 23));
        const flow::FlowBatch batch = random_batch(8, 7);
        ObjectiveSettings s;
        s.scheme = scheme;
        s.clamp = ClampSpec{true, -0.5, 0.5};
        ad::GradientMap grads;
        const LossBreakdown l = facm_loss(net, &teacher, batch, s, &grads);

        // Stop-gradient quantities from the unperturbed network.
        const Tensor v = target_velocity(net, &teacher, batch, s);
        const auto c_fm = flow::encode_batch(scheme, flow::Task::FM, batch.t);
        const auto c_cm = flow::encode_batch(scheme, flow::Task::CM, batch.t);
        const ad::DualTensor d = nn::forward_jvp(net, batch.x_t, c_cm, v, batch.labels);
        std::vector<double> alpha, beta;
        for (double t : batch.t) {
            alpha.push_back(alpha_weight(t, s.weighting));
            beta.push_back(beta_weight(t, s.weighting));
        }
        const Tensor v_tar = cm_target(d.primal, v, batch.t, d.tangent, alpha, s.clamp).v_tar;
        const Tensor e0 = row_sqnorm(d.primal - v_tar);

        auto surrogate = [&](const nn::Network& n) {
            const Tensor ffm = nn::forward(n, batch.x_t, c_fm, batch.labels);
            const Tensor fcm = nn::forward(n, batch.x_t, c_cm, batch.labels);
            const std::size_t rows = batch.size();
            double fm = 0, cm = 0;
            for (std::size_t i = 0; i < rows; ++i) {
                double sq = 0, dotp = 0, na = 0, nb = 0, e = 0;
                for (std::size_t j = 0; j < 2; ++j) {
                    const double a = ffm.at(i, j), b = v.at(i, j), r = fcm.at(i, j) - v_tar.at(i, j);
                    sq += (a - b) * (a - b);
                    dotp += a * b;
                    na += a * a;
                    nb += b * b;
                    e += r * r;
                }
                fm += sq + 1.0 - dotp / std::sqrt(na * nb);
                cm += beta[i] * e / std::sqrt(e0[i] + s.norm_c);
            }
            return (fm + cm) / static_cast<double>(rows);
        };
        CHECK(surrogate(net) == doctest::Approx(l.total).epsilon(1e-12));

        const double h = 1e-5;
        double worst = 0.0;
        int checked = 0;
        for (const auto& [name, t] : net.params()) {
            for (std::size_t k = 0; k < t.size(); k += std::max<std::size_t>(1, t.size() / 5)) {
                nn::Network plus = net, minus = net;
                plus.params().at(name)[k] += h;
                minus.params().at(name)[k] -= h;
                const double fd = (surrogate(plus) - surrogate(minus)) / (2 * h);
                const double an = grads.at(name)[k];
                worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(fd), 1e-3));
                ++checked;
            }
        }
        CHECK(checked > 20);
        CHECK(worst <= 1e-5);

        // A small step against the gradient lowers the fixed-target objective.
        nn::Network stepped = net;
        for (auto& [name, t] : stepped.params())
            for (std::size_t k = 0; k < t.size(); ++k) t[k] -= 1e-4 * grads.at(name)[k];
        CHECK(surrogate(stepped) < surrogate(net));
    }
}

TEST_CASE("facm_loss flags non-finite teachers and scheme mismatches") {
    const nn::Network net = perturbed(small());
    nn::Network teacher = perturbed(small(flow::Scheme::ExpandedInterval, 24));
    teacher.params().at("out.b")[0] = std::numeric_limits<double>::quiet_NaN();
    const flow::FlowBatch batch = random_batch(4, 8);
    ad::GradientMap g;
    CHECK_FALSE(facm_loss(net, &teacher, batch, ObjectiveSettings{}, &g).finite);

    const nn::Network aux = perturbed(small(flow::Scheme::AuxiliaryTime));
    CHECK_THROWS_AS(facm_loss(net, &aux, batch, ObjectiveSettings{}), ContractViolation);
}

TEST_CASE("baseline objectives") {
    const flow::FlowBatch batch = random_batch(8, 9);
    const nn::Network net = perturbed(small());
    ad::GradientMap g;
    const LossBreakdown scm = scm_loss(net, nullptr, batch, ObjectiveSettings{}, &g);
    CHECK(scm.finite);
    CHECK(scm.total == scm.cm_loss);
    CHECK(g.grads.size() == net.params().size());

    const std::vector<double> r(batch.size(), 1.0);
    CHECK_THROWS_AS(meanflow_loss(net, nullptr, batch, r, ObjectiveSettings{}), ContractViolation);
    const nn::Network aux = perturbed(small(flow::Scheme::AuxiliaryTime));
    ObjectiveSettings s;
    s.scheme = flow::Scheme::AuxiliaryTime;
    const LossBreakdown mf = meanflow_loss(aux, nullptr, batch, r, s, &g);
    CHECK(mf.finite);
    CHECK(mf.cm_loss > 0.0);
    CHECK_THROWS_AS(meanflow_loss(aux, nullptr, batch, std::vector<double>{1.0}, s), ContractViolation);
}
