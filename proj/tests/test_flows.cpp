#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <vector>

#include "mflow/autodiff.hpp"
#include "mflow/flows.hpp"
#include "mflow/numdiff.hpp"
#include "mflow/rng.hpp"

using mflow::FlowStack;
using mflow::LayerSpec;

namespace {

FlowStack make_glow_stack(int D, int steps, std::uint64_t seed,
                          std::vector<int> hidden = {8, 8}) {
    std::vector<LayerSpec> specs;
    int parity = 0;
    for (int k = 0; k < steps; ++k) {
        specs.push_back(LayerSpec::actnorm(D));
        specs.push_back(LayerSpec::invertible_linear(D));
        specs.push_back(LayerSpec::affine_coupling(D, hidden, parity));
        parity ^= 1;
    }
    return FlowStack(specs, seed);
}

// Random parameter noise, scaled so actnorm scales stay well away from 0.
void perturb(FlowStack& f, std::uint64_t seed, double scale = 0.1) {
    mflow::Rng rng(seed);
    for (double& p : f.params()) p += scale * rng.next_normal();
}

std::vector<double> random_point(int D, mflow::Rng& rng) {
    std::vector<double> x(D);
    for (double& xi : x) xi = rng.next_normal();
    return x;
}

}  // namespace

TEST_CASE("fresh stacks are the identity map") {
    mflow::Rng rng(11);
    for (int D : {2, 3, 5, 8}) {
        FlowStack f = make_glow_stack(D, 2, 77 + D);
        for (int rep = 0; rep < 10; ++rep) {
            std::vector<double> x = random_point(D, rng);
            auto [z, log_det] = f.forward(x);
            for (int i = 0; i < D; ++i)
                REQUIRE(std::abs(z[i] - x[i]) < 1e-12);
            REQUIRE(std::abs(log_det) < 1e-12);
        }
    }
}

TEST_CASE("empty stack is the identity with log_det zero") {
    FlowStack f(3);
    std::vector<double> x = {1.0, -2.0, 0.5};
    auto [z, ld] = f.forward(x);
    REQUIRE(z == x);
    REQUIRE(ld == 0.0);
    auto [x2, ld2] = f.inverse(z);
    REQUIRE(x2 == x);
    REQUIRE(ld2 == 0.0);
}

TEST_CASE("round-trip on randomly perturbed stacks") {
    mflow::Rng rng(2024);
    for (int D : {2, 3, 4, 8}) {
        FlowStack f = make_glow_stack(D, 3, 1000 + D);
        perturb(f, 2000 + D);
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<double> x = random_point(D, rng);
            auto [z, ld_f] = f.forward(x);
            auto [x2, ld_i] = f.inverse(z);
            for (int i = 0; i < D; ++i)
                REQUIRE(std::abs(x2[i] - x[i]) < 1e-10);
            // inverse log-det is the negation of the forward one
            REQUIRE(std::abs(ld_f + ld_i) < 1e-10);
        }
    }
}

TEST_CASE("stack log_det is the sum of per-layer log_dets") {
    const int D = 4;
    FlowStack f = make_glow_stack(D, 2, 5);
    perturb(f, 6);
    mflow::Rng rng(7);
    for (int rep = 0; rep < 10; ++rep) {
        std::vector<double> x = random_point(D, rng);
        auto [z, total] = f.forward(x);
        double acc = 0.0;
        std::vector<double> cur = x;
        for (const mflow::Layer& l : f.layers()) {
            double step = 0.0;
            FlowStack::layer_forward<double>(l, f.params(), cur, step);
            acc += step;
        }
        REQUIRE(std::abs(acc - total) < 1e-12);
        for (int i = 0; i < D; ++i) REQUIRE(cur[i] == z[i]);
    }
}

TEST_CASE("analytic log_det matches the numerical Jacobian oracle") {
    mflow::Rng rng(31337);
    for (int D : {2, 3, 4}) {
        FlowStack f = make_glow_stack(D, 2, 41 + D);
        perturb(f, 51 + D);
        auto fwd = [&](std::span<const double> x) { return f.forward(x).first; };
        for (int rep = 0; rep < 10; ++rep) {
            std::vector<double> x = random_point(D, rng);
            const double analytic = f.forward(x).second;
            const double numeric =
                mflow::log_abs_det(mflow::numerical_jacobian(fwd, x));
            REQUIRE(mflow::rel_err(analytic, numeric) < 1e-5);
        }
    }
}

TEST_CASE("single layers match the Jacobian oracle") {
    struct Case {
        const char* name;
        LayerSpec spec;
    };
    const int D = 3;
    const std::vector<Case> cases = {
        {"actnorm", LayerSpec::actnorm(D)},
        {"linear", LayerSpec::invertible_linear(D)},
        {"coupling_even", LayerSpec::affine_coupling(D, {6}, 0)},
        {"coupling_odd", LayerSpec::affine_coupling(D, {6}, 1)},
    };
    for (const Case& c : cases) {
        DYNAMIC_SECTION(c.name) {
            FlowStack f({c.spec}, 99);
            perturb(f, 17);
            auto fwd = [&](std::span<const double> x) {
                return f.forward(x).first;
            };
            mflow::Rng rng(3);
            for (int rep = 0; rep < 5; ++rep) {
                std::vector<double> x = random_point(D, rng);
                const double analytic = f.forward(x).second;
                const double numeric =
                    mflow::log_abs_det(mflow::numerical_jacobian(fwd, x));
                REQUIRE(mflow::rel_err(analytic, numeric) < 1e-5);
            }
        }
    }
}

TEST_CASE("coupling only moves active coordinates") {
    const int D = 5;
    FlowStack f({LayerSpec::affine_coupling(D, {8}, 0)}, 12);
    perturb(f, 13);
    mflow::Rng rng(14);
    std::vector<double> x = random_point(D, rng);
    auto [z, ld] = f.forward(x);
    // parity 0: even coordinates pass through untouched
    REQUIRE(z[0] == x[0]);
    REQUIRE(z[2] == x[2]);
    REQUIRE(z[4] == x[4]);
    REQUIRE(z[1] != x[1]);
    REQUIRE(z[3] != x[3]);

    FlowStack g({LayerSpec::affine_coupling(D, {8}, 1)}, 12);
    perturb(g, 13);
    auto [z2, ld2] = g.forward(x);
    REQUIRE(z2[1] == x[1]);
    REQUIRE(z2[3] == x[3]);
    REQUIRE(z2[0] != x[0]);
}

TEST_CASE("linear layer permutation shuffles outputs without changing |det|") {
    const int D = 4;
    FlowStack f({LayerSpec::invertible_linear(D)}, 1);
    perturb(f, 2, 0.3);
    mflow::Rng rng(3);
    std::vector<double> x = random_point(D, rng);
    auto [z_id, ld_id] = f.forward(x);

    f.set_permutation(0, {2, 0, 3, 1});
    auto [z_p, ld_p] = f.forward(x);
    REQUIRE(ld_p == ld_id);
    REQUIRE(z_p[0] == z_id[2]);
    REQUIRE(z_p[1] == z_id[0]);
    REQUIRE(z_p[2] == z_id[3]);
    REQUIRE(z_p[3] == z_id[1]);

    auto [back, ld_inv] = f.inverse(z_p);
    for (int i = 0; i < D; ++i) REQUIRE(std::abs(back[i] - x[i]) < 1e-12);

    // permuted map still agrees with the Jacobian oracle
    auto fwd = [&](std::span<const double> v) { return f.forward(v).first; };
    const double numeric =
        mflow::log_abs_det(mflow::numerical_jacobian(fwd, x));
    REQUIRE(mflow::rel_err(ld_p, numeric) < 1e-5);

    REQUIRE_THROWS_AS(f.set_permutation(0, {0, 0, 1, 2}),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(f.set_permutation(0, {0, 1}), std::invalid_argument);
}

TEST_CASE("traced evaluation reproduces the plain one bit for bit") {
    const int D = 4;
    FlowStack f = make_glow_stack(D, 2, 8);
    perturb(f, 9);
    mflow::Rng rng(10);
    std::vector<double> x = random_point(D, rng);
    auto [z, ld] = f.forward(x);

    mflow::ad::Tape tape;
    std::vector<mflow::ad::Var> p;
    p.reserve(f.param_count());
    for (double v : f.params()) p.push_back(tape.leaf(v));
    std::vector<mflow::ad::Var> xv;
    for (double v : x) xv.push_back(tape.leaf(v));
    mflow::ad::Var log_det = tape.leaf(0.0);
    FlowStack::forward_eval<mflow::ad::Var>(f.layers(), p, xv, log_det);
    for (int i = 0; i < D; ++i) REQUIRE(xv[i].value() == z[i]);
    REQUIRE(log_det.value() == ld);
}

TEST_CASE("log_det gradient w.r.t. parameters matches finite differences") {
    const int D = 3;
    FlowStack f = make_glow_stack(D, 1, 20);
    perturb(f, 21);
    mflow::Rng rng(22);
    std::vector<double> x = random_point(D, rng);

    mflow::ad::Tape tape;
    std::vector<mflow::ad::Var> p;
    for (double v : f.params()) p.push_back(tape.leaf(v));
    std::vector<mflow::ad::Var> xv;
    for (double v : x) xv.push_back(tape.leaf(v));
    mflow::ad::Var log_det = tape.leaf(0.0);
    FlowStack::forward_eval<mflow::ad::Var>(f.layers(), p, xv, log_det);
    tape.backward(log_det);

    auto ld_of = [&](std::span<const double> theta) {
        FlowStack g = f;
        g.params().assign(theta.begin(), theta.end());
        return g.forward(x).second;
    };
    std::vector<double> want = mflow::finite_diff_grad(ld_of, f.params());
    for (std::size_t i = 0; i < p.size(); ++i) {
        INFO("param " << i);
        REQUIRE(mflow::rel_err(p[i].adjoint(), want[i]) < 1e-4);
    }
}

TEST_CASE("actnorm data-dependent init whitens each actnorm output") {
    const int D = 3;
    FlowStack f = make_glow_stack(D, 2, 30);
    // make the conditioner act so the second actnorm sees a shifted batch
    perturb(f, 31);

    const std::size_t n = 200;
    mflow::Rng rng(32);
    std::vector<double> rows(n * D);
    for (double& v : rows) v = 3.0 + 2.0 * rng.next_normal();
    f.init_actnorm_from_data(rows, n);

    // walk the batch through the stack and check moments after each actnorm
    std::vector<std::vector<double>> batch(n);
    for (std::size_t r = 0; r < n; ++r)
        batch[r].assign(rows.begin() + r * D, rows.begin() + (r + 1) * D);
    int checked = 0;
    for (const mflow::Layer& l : f.layers()) {
        double ignored = 0.0;
        for (auto& row : batch)
            FlowStack::layer_forward<double>(l, f.params(), row, ignored);
        if (l.spec.kind == mflow::LayerKind::ActNorm) {
            for (int i = 0; i < D; ++i) {
                double mean = 0.0, var = 0.0;
                for (const auto& row : batch) mean += row[i];
                mean /= static_cast<double>(n);
                for (const auto& row : batch)
                    var += (row[i] - mean) * (row[i] - mean);
                var /= static_cast<double>(n);
                REQUIRE(std::abs(mean) < 1e-6);
                REQUIRE(std::abs(var - 1.0) < 1e-6);
            }
            ++checked;
        }
    }
    REQUIRE(checked == 2);
}

TEST_CASE("degenerate parameters are rejected at evaluation") {
    FlowStack a({LayerSpec::actnorm(2)}, 0);
    a.params()[0] = 0.0;
    std::vector<double> x = {1.0, 1.0};
    REQUIRE_THROWS_AS(a.forward(x), std::domain_error);
    REQUIRE_THROWS_AS(a.inverse(x), std::domain_error);

    FlowStack l({LayerSpec::invertible_linear(2)}, 0);
    l.params()[l.param_count() - 1] = std::log(1e-13);
    REQUIRE_THROWS_AS(l.forward(x), std::domain_error);
    REQUIRE_THROWS_AS(l.inverse(x), std::domain_error);
}

TEST_CASE("spec validation") {
    REQUIRE_THROWS_AS(FlowStack({LayerSpec::affine_coupling(1, {4}, 0)}, 0),
                      std::invalid_argument);
    std::vector<LayerSpec> mixed = {LayerSpec::actnorm(2),
                                    LayerSpec::actnorm(3)};
    REQUIRE_THROWS_AS(FlowStack(mixed, 0), std::invalid_argument);
    std::vector<double> wrong = {1.0, 2.0, 3.0};
    FlowStack f({LayerSpec::actnorm(2)}, 0);
    REQUIRE_THROWS_AS(f.forward(wrong), std::invalid_argument);
}

TEST_CASE("standard normal log density") {
    // log N(0; I_2) = -log(2 pi)
    std::vector<double> origin = {0.0, 0.0};
    REQUIRE(mflow::gaussian_log_density<double>(origin) ==
            Catch::Approx(-1.8378770664093453).margin(1e-15));

    mflow::GaussianPrior p{3};
    std::vector<double> y = {0.3, -1.2, 0.7};
    const double want =
        -1.5 * std::log(2.0 * std::numbers::pi) -
        0.5 * (0.3 * 0.3 + 1.2 * 1.2 + 0.7 * 0.7);
    REQUIRE(mflow::gaussian_log_density(p, y) ==
            Catch::Approx(want).margin(1e-14));

    std::vector<double> bad = {0.0, 0.0};
    mflow::GaussianPrior q{3};
    REQUIRE_THROWS_AS(mflow::gaussian_log_density(q, bad),
                      std::invalid_argument);
}

TEST_CASE("identity stack density of a point is the prior density") {
    // with f = identity, -log p(x) at the origin in 2-D is log(2 pi)
    FlowStack f = make_glow_stack(2, 1, 0);
    std::vector<double> origin = {0.0, 0.0};
    auto [z, ld] = f.forward(origin);
    const double nll = -mflow::gaussian_log_density<double>(z) - ld;
    REQUIRE(std::abs(nll - std::log(2.0 * std::numbers::pi)) < 1e-12);
}
