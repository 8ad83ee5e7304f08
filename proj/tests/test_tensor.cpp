#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "facm/autodiff.hpp"
#include "facm/parallel.hpp"
#include "facm/rng.hpp"
#include "facm/tensor.hpp"

using namespace facm;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.normal();
    return t;
}

double rel(const Tensor& a, const Tensor& b) { return l2norm(a - b) / std::max(l2norm(a), l2norm(b)); }

// Two-layer MLP with a scalar readout, written against the tape.
ad::Var mlp(ad::Tape&, const ad::Var& x, const ad::Var& w1, const ad::Var& b1, const ad::Var& w2) {
    return ad::sum(ad::matmul(ad::silu(ad::add_bias(ad::matmul(x, w1), b1)), w2));
}

double mlp_value(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2) {
    Tensor h = matmul(x, w1);
    for (std::size_t i = 0; i < h.rows(); ++i)
        for (std::size_t j = 0; j < h.cols(); ++j) h.at(i, j) += b1[j];
    return sum(matmul(silu(h), w2));
}

}  // namespace

TEST_CASE("tensor construction and shape checks") {
    CHECK(Tensor().empty());
    CHECK(Tensor::scalar(2.5).item() == 2.5);
    CHECK(Tensor::scalar(1.0).rank() == 0);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ContractViolation);
    CHECK_THROWS_AS(Tensor::vector({1, 2}) + Tensor::vector({1, 2, 3}), ContractViolation);
    CHECK_THROWS_AS(matmul(Tensor(Shape{2, 3}), Tensor(Shape{2, 3})), ContractViolation);
}

TEST_CASE("linear primitives") {
    const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    const Tensor x = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    CHECK(matmul(eye, x).bitwise_equal(x));
    const Tensor a = Tensor::vector({3, -4, 12});
    CHECK(dot(a, a) == doctest::Approx(l2norm(a) * l2norm(a)));
    CHECK(l2norm(a) == 13.0);
    CHECK(silu(Tensor::vector({0.0}))[0] == 0.0);
    CHECK(matmul_tn(x, x).bitwise_equal(matmul(transpose(x), x)));
    CHECK(matmul_nt(x, x).bitwise_equal(matmul(x, transpose(x))));
}

TEST_CASE("clamp examples") {
    const Tensor y = clamp(Tensor::vector({-2, 0.5, 1.5}), -1, 1);
    CHECK(y.bitwise_equal(Tensor::vector({-1, 0.5, 1})));
    const Tensor inside = Tensor::vector({-0.25, 0.0, 0.75});
    CHECK(clamp(inside, -1, 1).bitwise_equal(inside));
    CHECK(clamp(y, -1, 1).bitwise_equal(y));
    CHECK_THROWS_AS(clamp(inside, 1, -1), ContractViolation);

    const double nan = std::numeric_limits<double>::quiet_NaN();
    ClampStats stats;
    const Tensor n = clamp(Tensor::vector({nan, nan}), -1, 1, &stats);
    CHECK(std::isnan(n[0]));
    CHECK(std::isnan(n[1]));
    CHECK(stats.saw_nan());
    CHECK(stats.nan == 2);
}

TEST_CASE("matmul is bit-identical across thread counts") {
    Rng rng(5);
    const Tensor a = random_tensor(Shape{300, 200}, rng);
    const Tensor b = random_tensor(Shape{200, 150}, rng);
    set_num_threads(1);
    const Tensor one = matmul(a, b);
    const Tensor one_tn = matmul_tn(a, a);
    set_num_threads(4);
    const Tensor four = matmul(a, b);
    const Tensor four_tn = matmul_tn(a, a);
    set_num_threads(0);
    CHECK(one.bitwise_equal(four));
    CHECK(one_tn.bitwise_equal(four_tn));
}

TEST_CASE("gradient examples") {
    {
        ad::Tape tape;
        const ad::Var x = tape.parameter("x", Tensor::vector({1, 2}));
        const auto g = ad::gradient(ad::sum(ad::mul(x, x)));
        CHECK(g.at("x").bitwise_equal(Tensor::vector({2, 4})));
        CHECK(tape.consumed());
        CHECK_THROWS_AS(tape.constant(Tensor::scalar(1)), ContractViolation);
    }
    {
        ad::Tape tape;
        const ad::Var w = tape.parameter("W", Tensor::matrix(2, 2, {0.3, -1.2, 2.0, 0.7}));
        const ad::Var x = tape.constant(Tensor::matrix(2, 1, {1, 0}));
        const auto g = ad::gradient(ad::sum(ad::matmul(w, x)));
        CHECK(g.at("W").bitwise_equal(Tensor::matrix(2, 2, {1, 0, 1, 0})));
    }
    {
        ad::Tape tape;
        const ad::Var x = tape.parameter("x", Tensor::vector({1, 2}));
        CHECK_THROWS_AS(ad::gradient(ad::mul(x, x)), ContractViolation);
    }
    {
        ad::Tape tape;
        const ad::Var x = tape.parameter("x", Tensor::vector({1, 2}));
        tape.parameter("unused", Tensor::vector({5, 5, 5}));
        const auto g = ad::gradient(ad::sum(x));
        CHECK(g.at("unused").bitwise_equal(Tensor::vector({0, 0, 0})));
    }
}

TEST_CASE("non-finite gradients are flagged") {
    ad::Tape tape;
    const ad::Var x = tape.parameter("x", Tensor::vector({std::numeric_limits<double>::infinity(), 1}));
    const auto g = ad::gradient(ad::sum(ad::mul(x, x)));
    CHECK(g.non_finite);
    REQUIRE(g.non_finite_params.size() == 1);
    CHECK(g.non_finite_params[0] == "x");
}

TEST_CASE("jvp examples") {
    const std::vector<Tensor> x{Tensor::vector({3.0})}, u{Tensor::vector({1.0})};
    const ad::DualTensor sq = ad::jvp([](ad::Tape&, std::span<const ad::Var> in) { return ad::mul(in[0], in[0]); }, x, u);
    CHECK(sq.primal[0] == 9.0);
    CHECK(sq.tangent[0] == 6.0);

    // f(x, c) = A·x + b·c with tangents (v, 1) has tangent A·v + b
    const Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
    const Tensor b = Tensor::matrix(2, 1, {0.5, -1.5});
    const std::vector<Tensor> in{Tensor::matrix(2, 1, {0.2, 0.4}), Tensor::matrix(1, 1, {0.9})};
    const std::vector<Tensor> tan{Tensor::matrix(2, 1, {1, -1}), Tensor::matrix(1, 1, {1})};
    const ad::DualTensor lin = ad::jvp(
        [&](ad::Tape& t, std::span<const ad::Var> v) {
            return ad::add(ad::matmul(t.constant(a), v[0]), ad::matmul(t.constant(b), v[1]));
        },
        in, tan);
    CHECK(lin.tangent.bitwise_equal(matmul(a, tan[0]) + b));
}

TEST_CASE("jvp errors") {
    const std::vector<Tensor> x{Tensor::vector({1, 2})}, bad{Tensor::vector({1})};
    auto id = [](ad::Tape&, std::span<const ad::Var> in) { return in[0]; };
    CHECK_THROWS_AS(ad::jvp(id, x, bad), ContractViolation);

    ad::Tape tape;
    const ad::Var v = tape.input(Tensor::vector({1, 2}), Tensor::vector({1, 1}));
    try {
        tape.record(
            "cube", {v}, [](ad::ValueList in) { return hadamard(*in[0], hadamard(*in[0], *in[0])); },
            [](ad::ValueList, const Tensor&, const Tensor&, std::span<Tensor>, std::span<const bool>) {}, nullptr);
        FAIL("expected UnimplementedPrimitive");
    } catch (const ad::UnimplementedPrimitive& e) {
        CHECK(e.primitive() == "cube");
    }
}

TEST_CASE("random MLPs: reverse and forward mode against central differences") {
    const double h = 1e-5;
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
        Rng rng = Rng::stream(11, "test.mlp", trial);
        const Tensor x = random_tensor(Shape{4, 3}, rng);
        Tensor w1 = random_tensor(Shape{3, 6}, rng);
        const Tensor b1 = random_tensor(Shape{6}, rng);
        const Tensor w2 = random_tensor(Shape{6, 2}, rng);

        ad::Tape tape;
        const ad::Var loss = mlp(tape, tape.constant(x), tape.parameter("w1", w1), tape.constant(b1), tape.constant(w2));
        const Tensor g = ad::gradient(loss).at("w1");
        Tensor fd(w1.shape());
        for (std::size_t i = 0; i < w1.size(); ++i) {
            const double keep = w1[i];
            w1[i] = keep + h;
            const double up = mlp_value(x, w1, b1, w2);
            w1[i] = keep - h;
            const double down = mlp_value(x, w1, b1, w2);
            w1[i] = keep;
            fd[i] = (up - down) / (2 * h);
        }
        CHECK(rel(g, fd) <= 1e-6);

        const Tensor u = random_tensor(x.shape(), rng);
        const std::vector<Tensor> in{x}, tan{u};
        const ad::DualTensor d = ad::jvp(
            [&](ad::Tape& t, std::span<const ad::Var> v) {
                return mlp(t, v[0], t.constant(w1), t.constant(b1), t.constant(w2));
            },
            in, tan);
        const double fd_dir = (mlp_value(x + h * u, w1, b1, w2) - mlp_value(x - h * u, w1, b1, w2)) / (2 * h);
        CHECK(std::abs(d.tangent.item() - fd_dir) <= 1e-6 * std::abs(fd_dir));

        // dot(gradient, u) == jvp(u)
        ad::Tape gt;
        const ad::Var xp = gt.parameter("x", x);
        const Tensor gx =
            ad::gradient(mlp(gt, xp, gt.constant(w1), gt.constant(b1), gt.constant(w2))).at("x");
        CHECK(std::abs(dot(gx, u) - d.tangent.item()) <= 1e-10 * std::abs(d.tangent.item()));
    }
}

TEST_CASE("every primitive has a tangent rule matching finite differences") {
    Rng rng(21);
    const Tensor a = random_tensor(Shape{3, 4}, rng), b = random_tensor(Shape{3, 4}, rng);
    const Tensor ua = random_tensor(a.shape(), rng), ub = random_tensor(b.shape(), rng);
    const Tensor m = random_tensor(Shape{4, 2}, rng), bias = random_tensor(Shape{4}, rng);
    using Fn = std::function<ad::Var(ad::Tape&, const ad::Var&, const ad::Var&)>;
    const std::vector<std::pair<const char*, Fn>> cases = {
        {"add", [](ad::Tape&, const ad::Var& x, const ad::Var& y) { return ad::add(x, y); }},
        {"sub", [](ad::Tape&, const ad::Var& x, const ad::Var& y) { return ad::sub(x, y); }},
        {"mul", [](ad::Tape&, const ad::Var& x, const ad::Var& y) { return ad::mul(x, y); }},
        {"scale", [](ad::Tape&, const ad::Var& x, const ad::Var&) { return ad::scale(x, -2.5); }},
        {"matmul", [&](ad::Tape& t, const ad::Var& x, const ad::Var&) { return ad::matmul(x, t.constant(m)); }},
        {"add_bias", [&](ad::Tape& t, const ad::Var& x, const ad::Var&) { return ad::add_bias(x, t.constant(bias)); }},
        {"silu", [](ad::Tape&, const ad::Var& x, const ad::Var&) { return ad::silu(x); }},
        {"sin", [](ad::Tape&, const ad::Var& x, const ad::Var&) { return ad::sin(x); }},
        {"cos", [](ad::Tape&, const ad::Var& x, const ad::Var&) { return ad::cos(x); }},
        {"sum", [](ad::Tape&, const ad::Var& x, const ad::Var&) { return ad::sum(x); }},
        {"mean", [](ad::Tape&, const ad::Var& x, const ad::Var&) { return ad::mean(x); }},
        {"dot", [](ad::Tape&, const ad::Var& x, const ad::Var& y) { return ad::dot(x, y); }},
        {"l2norm", [](ad::Tape&, const ad::Var& x, const ad::Var&) { return ad::l2norm(x); }},
        {"row_sum", [](ad::Tape&, const ad::Var& x, const ad::Var&) { return ad::row_sum(x); }},
        {"clamp", [](ad::Tape&, const ad::Var& x, const ad::Var&) { return ad::clamp(x, -0.5, 0.5); }},
        {"gather_rows", [](ad::Tape&, const ad::Var& x, const ad::Var&) { return ad::gather_rows(x, {2, 0, 2}); }},
        {"select_col", [](ad::Tape&, const ad::Var& x, const ad::Var&) { return ad::select_col(x, 1); }},
        {"cosine_distance_rows", [](ad::Tape&, const ad::Var& x, const ad::Var& y) { return ad::cosine_distance_rows(x, y); }},
    };
    const double h = 1e-5;
    for (const auto& [name, f] : cases) {
        CAPTURE(name);
        auto eval = [&](const Tensor& x, const Tensor& y) {
            ad::Tape t;
            return f(t, t.constant(x), t.constant(y)).value();
        };
        ad::Tape t;
        const Tensor tangent = f(t, t.input(a, ua), t.input(b, ub)).tangent();
        const Tensor fd = (1.0 / (2 * h)) * (eval(a + h * ua, b + h * ub) - eval(a - h * ua, b - h * ub));
        CHECK(l2norm(tangent - fd) <= 1e-6 * std::max(1.0, l2norm(fd)));

        // reverse mode: gradient of sum(r ∘ f) matches the same directional derivative
        ad::Tape rt;
        const ad::Var out = f(rt, rt.parameter("a", a), rt.parameter("b", b));
        const Tensor r = Tensor(out.shape(), 1.0);
        const auto g = ad::gradient(ad::sum(ad::mul(out, rt.constant(r))));
        const double reverse = dot(g.at("a"), ua) + dot(g.at("b"), ub);
        CHECK(std::abs(reverse - sum(tangent)) <= 1e-10 * std::max(1.0, std::abs(reverse)));
    }
}

TEST_CASE("degenerate cosine rows give zero value and zero derivative") {
    ad::Tape tape;
    const ad::Var a = tape.parameter("a", Tensor::matrix(2, 2, {0, 0, 1, 0}));
    const ad::Var b = tape.constant(Tensor::matrix(2, 2, {1, 1, 0, 1}));
    const ad::Var d = ad::cosine_distance_rows(a, b);
    CHECK(d.value()[0] == 0.0);
    CHECK(d.value()[1] == doctest::Approx(1.0));
    const auto g = ad::gradient(ad::sum(d));
    CHECK(g.at("a")[0] == 0.0);
    CHECK(g.at("a")[1] == 0.0);
}

TEST_CASE("tape replay reproduces recorded values and primitives are deterministic") {
    Rng rng(3);
    const Tensor x = random_tensor(Shape{5, 3}, rng), w = random_tensor(Shape{3, 4}, rng);
    auto build = [&](ad::Tape& t) { return ad::mean(ad::silu(ad::matmul(t.constant(x), t.parameter("w", w)))); };
    ad::Tape t1, t2;
    const ad::Var l1 = build(t1), l2 = build(t2);
    CHECK(t1.replay_matches());
    CHECK(l1.value().bitwise_equal(l2.value()));
    CHECK(ad::gradient(l1).at("w").bitwise_equal(ad::gradient(l2).at("w")));
}
