#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <limits>
#include <numbers>

#include "mflow/data.hpp"
#include "mflow/metrics.hpp"
#include "mflow/objective.hpp"
#include "mflow/rng.hpp"

using mflow::FlowModel;
using mflow::FlowStack;
using mflow::LatentSplit;
using mflow::LayerSpec;

namespace {

FlowModel make_model(int D, int d, std::uint64_t seed) {
    std::vector<LayerSpec> specs;
    int parity = 0;
    for (int k = 0; k < 2; ++k) {
        specs.push_back(LayerSpec::actnorm(D));
        specs.push_back(LayerSpec::invertible_linear(D));
        specs.push_back(LayerSpec::affine_coupling(D, {6}, parity));
        parity ^= 1;
    }
    FlowModel m;
    m.f = FlowStack(specs, seed);
    mflow::Rng rng(seed + 1);
    for (double& p : m.f.params()) p += 0.1 * rng.next_normal();
    m.split = LatentSplit{D, d};
    return m;
}

mflow::Dataset gaussian_blob(std::size_t n, int D, std::uint64_t seed) {
    mflow::Dataset ds;
    ds.n = n;
    ds.dim = D;
    mflow::Rng rng(seed);
    ds.points.resize(n * static_cast<std::size_t>(D));
    for (double& v : ds.points) v = rng.next_normal();
    return ds;
}

}  // namespace

TEST_CASE("bits per dimension conversion") {
    REQUIRE(mflow::bpd(7462.32, 3072) == Catch::Approx(3.50).margin(0.01));
    // exact identity against the defining formula
    REQUIRE(mflow::bpd(100.0, 8) == 100.0 / (8.0 * std::numbers::ln2));
    REQUIRE_THROWS_AS(mflow::bpd(1.0, 0), std::invalid_argument);
}

TEST_CASE("nll of the identity model matches the prior") {
    FlowModel m;
    m.f = FlowStack({LayerSpec::actnorm(2)}, 0);  // fresh: identity
    m.split = LatentSplit{2, 1};
    mflow::Dataset ds;
    ds.n = 1;
    ds.dim = 2;
    ds.points = {0.0, 0.0};
    REQUIRE(std::abs(mflow::nll(m, ds) - std::log(2.0 * std::numbers::pi)) <
            1e-12);
}

TEST_CASE("metrics nll agrees with the objective decomposition") {
    FlowModel m = make_model(4, 2, 42);
    mflow::Dataset ds = gaussian_blob(64, 4, 43);
    double acc = 0.0;
    for (std::size_t i = 0; i < ds.n; ++i) {
        mflow::LossConfig cfg;
        cfg.lambda = 0.0;
        mflow::LossParts p = mflow::pixel_rejection_loss(m, ds.row(i), cfg);
        acc += p.nll_u + p.nll_v - p.log_det;
    }
    REQUIRE(std::abs(mflow::nll(m, ds) - acc / ds.n) < 1e-10);
}

TEST_CASE("recon_mse matches a direct computation") {
    FlowModel m = make_model(4, 2, 50);
    mflow::Dataset ds = gaussian_blob(32, 4, 51);
    double acc = 0.0;
    for (std::size_t i = 0; i < ds.n; ++i) {
        std::span<const double> x = ds.row(i);
        std::vector<double> xt = mflow::reconstruct(m.f, x, m.split);
        double row = 0.0;
        for (int j = 0; j < 4; ++j) row += (x[j] - xt[j]) * (x[j] - xt[j]);
        acc += row / 4.0;
    }
    REQUIRE(std::abs(mflow::recon_mse(m, ds) - acc / ds.n) < 1e-12);
}

TEST_CASE("circle distance") {
    REQUIRE(mflow::manifold_point_distance(std::vector<double>{2.0, 0.0},
                                           "circle") == Catch::Approx(1.0));
    REQUIRE(mflow::manifold_point_distance(std::vector<double>{0.0, 0.5},
                                           "circle") == Catch::Approx(0.5));
    REQUIRE(mflow::manifold_point_distance(
                std::vector<double>{std::sqrt(0.5), std::sqrt(0.5)},
                "circle") == Catch::Approx(0.0).margin(1e-12));
    REQUIRE_THROWS_AS(
        mflow::manifold_point_distance(std::vector<double>{1.0}, "circle"),
        std::invalid_argument);
    REQUIRE_THROWS_AS(mflow::manifold_point_distance(
                          std::vector<double>{1.0, 2.0}, "klein_bottle"),
                      std::invalid_argument);
}

TEST_CASE("swiss roll distance") {
    // noiseless samples sit on the roll
    mflow::Dataset ds = mflow::make_swiss_roll(200, 0.0, 4);
    REQUIRE(mflow::manifold_distance(ds, "swiss_roll") < 1e-6);

    // radial push off the spiral: compare against a brute-force scan of the
    // spiral parameter (the curve bends toward the point, so the distance is
    // a little under the push itself)
    const double t = 2.0 * std::numbers::pi;
    std::vector<double> p = {t + 0.3, 10.5, 0.0};
    double brute = std::numeric_limits<double>::infinity();
    const double lo = 1.5 * std::numbers::pi, hi = 4.5 * std::numbers::pi;
    for (int i = 0; i <= 2000000; ++i) {
        const double s = lo + (hi - lo) * i / 2000000.0;
        brute = std::min(brute, std::hypot(s * std::cos(s) - p[0],
                                           s * std::sin(s) - p[2]));
    }
    const double got = mflow::manifold_point_distance(p, "swiss_roll");
    REQUIRE(got == Catch::Approx(brute).margin(1e-6));
    REQUIRE(got < 0.3);
    REQUIRE(got > 0.28);

    // height beyond the band adds the clamp distance
    std::vector<double> q = {t * std::cos(3.0), 22.0, t * std::sin(3.0)};
    const double d0 = mflow::manifold_point_distance(
        std::vector<double>{t * std::cos(3.0), 10.0, t * std::sin(3.0)},
        "swiss_roll");
    const double d1 = mflow::manifold_point_distance(q, "swiss_roll");
    REQUIRE(d1 >= std::sqrt(d0 * d0 + 1.0) - 1e-6);
}

TEST_CASE("evaluation summary") {
    FlowModel m = make_model(2, 1, 60);
    mflow::Dataset circle = mflow::make_circle(256, 0.01, 61);
    mflow::EvalSummary s = mflow::evaluate(m, circle, 100, 7);
    REQUIRE(std::isfinite(s.nll_nats));
    REQUIRE(s.bpd == mflow::bpd(s.nll_nats, 2));
    REQUIRE(s.recon_mse >= 0.0);
    REQUIRE(s.manifold_distance.has_value());

    mflow::Dataset anon = gaussian_blob(64, 2, 62);
    mflow::EvalSummary s2 = mflow::evaluate(m, anon, 100, 7);
    REQUIRE_FALSE(s2.manifold_distance.has_value());
}

TEST_CASE("thread count does not change results") {
    FlowModel m = make_model(4, 2, 70);
    mflow::Dataset ds = gaussian_blob(1000, 4, 71);
    setenv("MFLOW_THREADS", "1", 1);
    const double nll_1 = mflow::nll(m, ds);
    const double mse_1 = mflow::recon_mse(m, ds);
    setenv("MFLOW_THREADS", "7", 1);
    const double nll_7 = mflow::nll(m, ds);
    const double mse_7 = mflow::recon_mse(m, ds);
    unsetenv("MFLOW_THREADS");
    REQUIRE(nll_1 == nll_7);  // bit-identical by construction
    REQUIRE(mse_1 == mse_7);
}

TEST_CASE("dimension mismatches are rejected") {
    FlowModel m = make_model(4, 2, 80);
    mflow::Dataset ds = gaussian_blob(8, 3, 81);
    REQUIRE_THROWS_AS(mflow::nll(m, ds), std::invalid_argument);
    REQUIRE_THROWS_AS(mflow::recon_mse(m, ds), std::invalid_argument);
}
