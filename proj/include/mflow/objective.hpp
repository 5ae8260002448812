#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mflow/autodiff.hpp"
#include "mflow/flows.hpp"
#include "mflow/rng.hpp"

namespace mflow {

// Partition of the latent vector into manifold coordinates u (kept when
// sampling) and off-manifold coordinates v (forced to zero).
struct LatentSplit {
    int ambient_dim = 0;
    int manifold_dim = 0;

    void validate() const {
        if (manifold_dim < 1 || manifold_dim >= ambient_dim)
            throw std::invalid_argument(
                "latent split requires 1 <= manifold_dim < ambient_dim, got "
                "d=" + std::to_string(manifold_dim) +
                " D=" + std::to_string(ambient_dim));
    }
};

enum class Variant { SingleBlock, TwoBlock };

struct LossConfig {
    double delta = 1.0;   // Huber width; +inf selects the pure quadratic
    double lambda = 1.0;  // reconstruction weight
    double alpha = 1.0;   // likelihood weight
    Variant variant = Variant::SingleBlock;

    void validate() const {
        if (std::isnan(delta) || delta <= 0.0)
            throw std::invalid_argument("delta must be positive (inf allowed)");
        if (!(lambda >= 0.0))
            throw std::invalid_argument("lambda must be >= 0");
        if (!(alpha > 0.0) || alpha > 1.0)
            throw std::invalid_argument("alpha must be in (0, 1]");
    }
};

// Huber penalty between scalars: quadratic inside the delta tube, linear
// outside, matched in value and slope at the boundary.  The branch is taken
// on the traced value, like every other trace-time branch in the library.
template <typename T>
T huber(const T& a, const T& b, double delta) {
    using std::abs;
    using mflow::ad::value_of;
    T diff = a - b;
    if (std::isinf(delta)) return diff * diff * 0.5;
    if (std::abs(value_of(diff)) < delta) return diff * diff * 0.5;
    return abs(diff) * delta - 0.5 * delta * delta;
}

// Mean per-coordinate Huber penalty between a point and its reconstruction.
template <typename T>
T reconstruction_penalty(std::span<const T> x, std::span<const T> x_rec,
                         double delta) {
    if (x.size() != x_rec.size() || x.empty())
        throw std::invalid_argument("reconstruction_penalty: size mismatch");
    T acc = huber(x[0], x_rec[0], delta);
    for (std::size_t i = 1; i < x.size(); ++i)
        acc = acc + huber(x[i], x_rec[i], delta);
    return acc * (1.0 / static_cast<double>(x.size()));
}

// Zero-pads manifold coordinates back to ambient dimension.  `zero` supplies
// the additive identity for the scalar type (a plain 0.0 for doubles, a tape
// leaf for traced evaluation).
template <typename T>
std::vector<T> pad_latent(std::span<const T> u, int ambient_dim, T zero) {
    if (static_cast<int>(u.size()) > ambient_dim)
        throw std::invalid_argument("pad_latent: u longer than ambient_dim");
    std::vector<T> z(u.begin(), u.end());
    z.resize(ambient_dim, zero);
    return z;
}

inline std::vector<double> pad_latent(std::span<const double> u,
                                      int ambient_dim) {
    return pad_latent<double>(u, ambient_dim, 0.0);
}

// Projects x onto the model manifold: encode, drop the off-manifold block,
// decode.
template <typename T>
std::vector<T> reconstruct_eval(const std::vector<Layer>& f_layers,
                                std::span<const T> f_params,
                                std::span<const T> x, const LatentSplit& split,
                                T zero) {
    split.validate();
    std::vector<T> z(x.begin(), x.end());
    T ld = zero;
    FlowStack::forward_eval<T>(f_layers, f_params, z, ld);
    z.resize(split.manifold_dim);
    std::vector<T> xt = pad_latent<T>(z, split.ambient_dim, zero);
    T ld2 = zero;
    FlowStack::inverse_eval<T>(f_layers, f_params, xt, ld2);
    return xt;
}

inline std::vector<double> reconstruct(const FlowStack& f,
                                       std::span<const double> x,
                                       const LatentSplit& split) {
    return reconstruct_eval<double>(f.layers(), f.params(), x, split, 0.0);
}

// A flow model: the ambient bijection f, the latent split, and (for the
// two-block variant) a second bijection h over the manifold block.
struct FlowModel {
    FlowStack f;
    std::optional<FlowStack> h;
    LatentSplit split;

    void validate() const {
        split.validate();
        if (f.dim() != split.ambient_dim)
            throw std::invalid_argument("model: f dim != ambient_dim");
        if (h && h->dim() != split.manifold_dim)
            throw std::invalid_argument("model: h dim != manifold_dim");
    }
};

struct LossParts {
    double loss = 0.0;
    double nll_u = 0.0;    // manifold block; includes h's change of variables
    double nll_v = 0.0;    // off-manifold block
    double log_det = 0.0;  // forward log-det of f only
    double r = 0.0;        // mean Huber reconstruction penalty
};

template <typename T>
struct LossPartsT {
    T loss, nll_u, nll_v, log_det, r;
};

namespace detail {
inline void check_variant(const FlowModel& m, const LossConfig& cfg) {
    const bool has_h = m.h.has_value();
    if ((cfg.variant == Variant::TwoBlock) != has_h)
        throw std::invalid_argument(
            has_h ? "model carries a manifold flow but variant is single_block"
                  : "two_block variant needs a manifold flow");
}
}  // namespace detail

// Per-sample objective: weighted negative log-likelihood of the full latent
// plus the weighted reconstruction penalty.  Templated over the scalar so
// training traces the exact same expression this returns for doubles.
template <typename T>
LossPartsT<T> pixel_rejection_loss_eval(const FlowModel& m,
                                        std::span<const T> f_params,
                                        std::span<const T> h_params,
                                        std::span<const T> x,
                                        const LossConfig& cfg, T zero) {
    cfg.validate();
    m.validate();
    detail::check_variant(m, cfg);
    if (static_cast<int>(x.size()) != m.split.ambient_dim)
        throw std::invalid_argument("pixel_rejection_loss: input dim mismatch");

    const int d = m.split.manifold_dim;
    const int D = m.split.ambient_dim;

    std::vector<T> z(x.begin(), x.end());
    T log_det = zero;
    FlowStack::forward_eval<T>(m.f.layers(), f_params, z, log_det);
    std::span<const T> u(z.data(), static_cast<std::size_t>(d));
    std::span<const T> v(z.data() + d, static_cast<std::size_t>(D - d));

    T nll_u = zero;
    if (cfg.variant == Variant::TwoBlock) {
        std::vector<T> w(u.begin(), u.end());
        T ld_h = zero;
        FlowStack::forward_eval<T>(m.h->layers(), h_params, w, ld_h);
        nll_u = -gaussian_log_density<T>(w) - ld_h;
    } else {
        nll_u = -gaussian_log_density<T>(u);
    }
    T nll_v = -gaussian_log_density<T>(v);

    std::vector<T> xt = pad_latent<T>(u, D, zero);
    T ld_inv = zero;
    FlowStack::inverse_eval<T>(m.f.layers(), f_params, xt, ld_inv);
    T r = reconstruction_penalty<T>(x, xt, cfg.delta);

    T nll = nll_u + nll_v - log_det;
    T loss = nll * cfg.alpha + r * cfg.lambda;
    return {loss, nll_u, nll_v, log_det, r};
}

inline LossParts pixel_rejection_loss(const FlowModel& m,
                                      std::span<const double> x,
                                      const LossConfig& cfg) {
    std::span<const double> h_params =
        m.h ? std::span<const double>(m.h->params()) : std::span<const double>();
    LossPartsT<double> p = pixel_rejection_loss_eval<double>(
        m, m.f.params(), h_params, x, cfg, 0.0);
    return {p.loss, p.nll_u, p.nll_v, p.log_det, p.r};
}

// Draws n points from the model manifold: manifold block from the prior
// (pulled back through h when present), off-manifold block pinned to zero,
// decoded through f.  Returns an n x ambient_dim row-major matrix.
inline std::vector<double> sample(const FlowModel& m, std::size_t n,
                                  std::uint64_t seed) {
    m.validate();
    const int d = m.split.manifold_dim;
    const int D = m.split.ambient_dim;
    Rng rng(seed);
    std::vector<double> out;
    out.reserve(n * static_cast<std::size_t>(D));
    for (std::size_t k = 0; k < n; ++k) {
        std::vector<double> u(d);
        for (double& ui : u) ui = rng.next_normal();
        if (m.h) u = m.h->inverse(u).first;
        std::vector<double> x = pad_latent(u, D);
        double ld = 0.0;
        FlowStack::inverse_eval<double>(m.f.layers(), m.f.params(), x, ld);
        out.insert(out.end(), x.begin(), x.end());
    }
    return out;
}

}  // namespace mflow
