#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mflow/data.hpp"
#include "mflow/objective.hpp"

namespace mflow {

namespace detail {

inline unsigned eval_thread_cap() {
    if (const char* env = std::getenv("MFLOW_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<unsigned>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? hw : 1;
}

// Mean of fn(i) over i < n.  Work is cut into 64 fixed chunks whose partial
// sums are combined in chunk order, so the result is bit-identical for any
// thread count.
template <typename Fn>
double deterministic_mean(std::size_t n, Fn&& fn) {
    if (n == 0) throw std::invalid_argument("mean over empty set");
    constexpr std::size_t kChunks = 64;
    double partial[kChunks] = {0.0};
    auto run_chunk = [&](std::size_t c) {
        const std::size_t lo = c * n / kChunks;
        const std::size_t hi = (c + 1) * n / kChunks;
        double acc = 0.0;
        for (std::size_t i = lo; i < hi; ++i) acc += fn(i);
        partial[c] = acc;
    };
    const unsigned want = std::min<unsigned>(eval_thread_cap(), kChunks);
    if (want <= 1 || n < 128) {
        for (std::size_t c = 0; c < kChunks; ++c) run_chunk(c);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(want);
        for (unsigned t = 0; t < want; ++t)
            pool.emplace_back([&] {
                for (std::size_t c = next.fetch_add(1); c < kChunks;
                     c = next.fetch_add(1))
                    run_chunk(c);
            });
        for (std::thread& th : pool) th.join();
    }
    double total = 0.0;
    for (std::size_t c = 0; c < kChunks; ++c) total += partial[c];
    return total / static_cast<double>(n);
}

}  // namespace detail

// Exact negative log-density of one point under the model (h's change of
// variables included when present).
inline double point_nll(const FlowModel& m, std::span<const double> x) {
    const int d = m.split.manifold_dim;
    auto [z, log_det] = m.f.forward(x);
    std::span<const double> u(z.data(), static_cast<std::size_t>(d));
    std::span<const double> v(z.data() + d, z.size() - d);
    double nll_u;
    if (m.h) {
        auto [w, ld_h] = m.h->forward(u);
        nll_u = -gaussian_log_density<double>(w) - ld_h;
    } else {
        nll_u = -gaussian_log_density<double>(u);
    }
    return nll_u - gaussian_log_density<double>(v) - log_det;
}

inline double nll(const FlowModel& m, const Dataset& ds) {
    m.validate();
    if (ds.dim != m.split.ambient_dim)
        throw std::invalid_argument("nll: dataset dim != model dim");
    return detail::deterministic_mean(
        ds.n, [&](std::size_t i) { return point_nll(m, ds.row(i)); });
}

// Nats-per-point to bits-per-dimension.
inline double bpd(double nll_nats, int dim) {
    if (dim < 1) throw std::invalid_argument("bpd: dim must be >= 1");
    return nll_nats / (static_cast<double>(dim) * std::numbers::ln2);
}

// Mean squared reconstruction error, averaged over coordinates then rows.
inline double recon_mse(const FlowModel& m, const Dataset& ds) {
    m.validate();
    if (ds.dim != m.split.ambient_dim)
        throw std::invalid_argument("recon_mse: dataset dim != model dim");
    return detail::deterministic_mean(ds.n, [&](std::size_t i) {
        std::span<const double> x = ds.row(i);
        const std::vector<double> xt = reconstruct(m.f, x, m.split);
        double acc = 0.0;
        for (std::size_t j = 0; j < x.size(); ++j)
            acc += (x[j] - xt[j]) * (x[j] - xt[j]);
        return acc / static_cast<double>(x.size());
    });
}

// Distance from a point to the named manifold.
//   circle:     | ||x|| - 1 |
//   swiss_roll: spiral parameter found by grid search plus golden-section
//               refinement; height clamped to the generated band.
inline double manifold_point_distance(std::span<const double> x,
                                      const std::string& manifold) {
    if (manifold == "circle") {
        if (x.size() != 2)
            throw std::invalid_argument("circle distance needs 2-D points");
        return std::abs(std::hypot(x[0], x[1]) - 1.0);
    }
    if (manifold == "swiss_roll") {
        if (x.size() != 3)
            throw std::invalid_argument("swiss_roll distance needs 3-D points");
        const double lo = 1.5 * std::numbers::pi;
        const double hi = 4.5 * std::numbers::pi;
        auto planar2 = [&](double t) {
            const double dx = x[0] - t * std::cos(t);
            const double dz = x[2] - t * std::sin(t);
            return dx * dx + dz * dz;
        };
        constexpr int kGrid = 512;
        double best_t = lo, best = planar2(lo);
        for (int k = 1; k <= kGrid; ++k) {
            const double t = lo + (hi - lo) * k / kGrid;
            const double d2 = planar2(t);
            if (d2 < best) {
                best = d2;
                best_t = t;
            }
        }
        double a = std::max(lo, best_t - (hi - lo) / kGrid);
        double b = std::min(hi, best_t + (hi - lo) / kGrid);
        constexpr double kGolden = 0.6180339887498949;
        for (int it = 0; it < 60; ++it) {
            const double m1 = b - kGolden * (b - a);
            const double m2 = a + kGolden * (b - a);
            if (planar2(m1) < planar2(m2)) b = m2; else a = m1;
        }
        const double t = 0.5 * (a + b);
        const double dy = x[1] < 0.0 ? -x[1] : (x[1] > 21.0 ? x[1] - 21.0 : 0.0);
        return std::sqrt(planar2(t) + dy * dy);
    }
    throw std::invalid_argument("no manifold distance defined for '" +
                                manifold + "'");
}

inline double manifold_distance(const Dataset& pts,
                                const std::string& manifold) {
    return detail::deterministic_mean(pts.n, [&](std::size_t i) {
        return manifold_point_distance(pts.row(i), manifold);
    });
}

struct EvalSummary {
    double nll_nats = 0.0;
    double bpd = 0.0;
    double recon_mse = 0.0;
    std::optional<double> manifold_distance;  // mean over fresh model samples
};

// Full evaluation pass: density and reconstruction on the dataset, plus
// manifold distance of n_samples fresh samples when the dataset's manifold
// is known.
inline EvalSummary evaluate(const FlowModel& m, const Dataset& ds,
                            std::size_t n_samples = 1000,
                            std::uint64_t sample_seed = 0) {
    EvalSummary s;
    s.nll_nats = nll(m, ds);
    s.bpd = bpd(s.nll_nats, ds.dim);
    s.recon_mse = recon_mse(m, ds);
    if (!ds.manifold.empty() && n_samples > 0) {
        Dataset smp;
        smp.n = n_samples;
        smp.dim = ds.dim;
        smp.points = sample(m, n_samples, sample_seed);
        s.manifold_distance = manifold_distance(smp, ds.manifold);
    }
    return s;
}

}  // namespace mflow
