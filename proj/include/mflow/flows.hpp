#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mflow/autodiff.hpp"
#include "mflow/rng.hpp"

namespace mflow {

enum class LayerKind { ActNorm, InvertibleLinear, AffineCoupling };

// Soft cap on coupling log-scales: s = cap * tanh(raw / cap).  Keeps exp(s)
// within [e^-5, e^5] so a wild conditioner cannot blow up the inverse.
inline constexpr double kScaleCap = 5.0;

// Diagonal entries of the linear layer below this magnitude make the inverse
// meaningless; evaluation refuses instead of returning garbage.
inline constexpr double kDiagFloor = 1e-12;

struct LayerSpec {
    LayerKind kind = LayerKind::ActNorm;
    int dim = 0;
    std::vector<int> hidden;  // conditioner widths, coupling only
    int mask_parity = 0;      // 0: even coordinates passive, 1: odd

    static LayerSpec actnorm(int dim) { return {LayerKind::ActNorm, dim, {}, 0}; }
    static LayerSpec invertible_linear(int dim) {
        return {LayerKind::InvertibleLinear, dim, {}, 0};
    }
    static LayerSpec affine_coupling(int dim, std::vector<int> hidden,
                                     int parity) {
        return {LayerKind::AffineCoupling, dim, std::move(hidden), parity};
    }
};

namespace detail {

inline std::vector<int> passive_indices(const LayerSpec& s) {
    std::vector<int> out;
    for (int i = 0; i < s.dim; ++i)
        if (i % 2 == s.mask_parity) out.push_back(i);
    return out;
}

inline std::vector<int> active_indices(const LayerSpec& s) {
    std::vector<int> out;
    for (int i = 0; i < s.dim; ++i)
        if (i % 2 != s.mask_parity) out.push_back(i);
    return out;
}

// Conditioner layer widths: passive coords in, (log-scale, shift) per active
// coord out.
inline std::vector<int> conditioner_widths(const LayerSpec& s) {
    std::vector<int> w;
    w.push_back(static_cast<int>(passive_indices(s).size()));
    for (int h : s.hidden) w.push_back(h);
    w.push_back(2 * static_cast<int>(active_indices(s).size()));
    return w;
}

inline std::size_t mlp_param_count(const std::vector<int>& widths) {
    std::size_t n = 0;
    for (std::size_t k = 0; k + 1 < widths.size(); ++k)
        n += static_cast<std::size_t>(widths[k + 1]) * widths[k] + widths[k + 1];
    return n;
}

// Dense MLP with tanh hidden activations and a linear output layer.
// Parameter layout per layer: weight matrix (out x in, row-major), then bias.
template <typename T>
void mlp_apply(std::span<const T> p, const std::vector<int>& widths,
               std::vector<T>& buf) {
    using std::tanh;
    std::size_t off = 0;
    std::vector<T> next;
    for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
        const int in = widths[k], out = widths[k + 1];
        const bool last = (k + 2 == widths.size());
        next.clear();
        next.reserve(out);
        const std::size_t w_off = off;
        const std::size_t b_off = off + static_cast<std::size_t>(out) * in;
        for (int i = 0; i < out; ++i) {
            T acc = p[b_off + i];
            for (int j = 0; j < in; ++j)
                acc = acc + p[w_off + static_cast<std::size_t>(i) * in + j] * buf[j];
            next.push_back(last ? acc : tanh(acc));
        }
        buf.swap(next);
        off = b_off + out;
    }
}

}  // namespace detail

inline std::size_t layer_param_count(const LayerSpec& s) {
    switch (s.kind) {
        case LayerKind::ActNorm:
            return 2 * static_cast<std::size_t>(s.dim);
        case LayerKind::InvertibleLinear:
            // strict lower + strict upper + log-diagonal
            return static_cast<std::size_t>(s.dim) * s.dim;
        case LayerKind::AffineCoupling:
            return detail::mlp_param_count(detail::conditioner_widths(s));
    }
    return 0;
}

struct Layer {
    LayerSpec spec;
    std::vector<int> perm;  // InvertibleLinear output permutation
    std::size_t offset = 0;
    std::size_t count = 0;
};

// Composition of layers sharing one flat parameter vector.  A freshly
// constructed stack is the identity map: actnorm starts at s=1, b=0, the
// linear layer at P=L=U=I, and the coupling conditioner has a zero-filled
// output layer.
class FlowStack {
public:
    FlowStack() = default;

    explicit FlowStack(int dim) : dim_(dim) {
        if (dim < 1) throw std::invalid_argument("FlowStack: dim must be >= 1");
    }

    FlowStack(const std::vector<LayerSpec>& specs, std::uint64_t seed) {
        if (specs.empty())
            throw std::invalid_argument("FlowStack: empty spec list");
        dim_ = specs.front().dim;
        Rng rng(seed);
        std::size_t off = 0;
        for (const LayerSpec& s : specs) {
            validate_spec(s, dim_);
            Layer l;
            l.spec = s;
            l.offset = off;
            l.count = layer_param_count(s);
            if (s.kind == LayerKind::InvertibleLinear) {
                l.perm.resize(s.dim);
                for (int i = 0; i < s.dim; ++i) l.perm[i] = i;
            }
            off += l.count;
            layers_.push_back(std::move(l));
        }
        params_.assign(off, 0.0);
        for (const Layer& l : layers_) init_layer(l, rng);
    }

    int dim() const { return dim_; }
    std::size_t param_count() const { return params_.size(); }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    const std::vector<Layer>& layers() const { return layers_; }

    // Replaces the output permutation of an InvertibleLinear layer.
    void set_permutation(std::size_t layer_index, std::vector<int> perm) {
        Layer& l = layers_.at(layer_index);
        if (l.spec.kind != LayerKind::InvertibleLinear)
            throw std::invalid_argument("set_permutation: layer is not linear");
        std::vector<bool> seen(l.spec.dim, false);
        if (perm.size() != static_cast<std::size_t>(l.spec.dim))
            throw std::invalid_argument("set_permutation: wrong size");
        for (int p : perm) {
            if (p < 0 || p >= l.spec.dim || seen[p])
                throw std::invalid_argument("set_permutation: not a permutation");
            seen[p] = true;
        }
        l.perm = std::move(perm);
    }

    std::pair<std::vector<double>, double> forward(
        std::span<const double> x) const {
        check_dim(x.size());
        std::vector<double> z(x.begin(), x.end());
        double log_det = 0.0;
        forward_eval<double>(layers_, params_, z, log_det);
        return {std::move(z), log_det};
    }

    std::pair<std::vector<double>, double> inverse(
        std::span<const double> z) const {
        check_dim(z.size());
        std::vector<double> x(z.begin(), z.end());
        double log_det = 0.0;
        inverse_eval<double>(layers_, params_, x, log_det);
        return {std::move(x), log_det};
    }

    template <typename T>
    static void forward_eval(const std::vector<Layer>& layers,
                             std::span<const T> params, std::vector<T>& x,
                             T& log_det) {
        for (const Layer& l : layers) layer_forward(l, params, x, log_det);
    }

    template <typename T>
    static void inverse_eval(const std::vector<Layer>& layers,
                             std::span<const T> params, std::vector<T>& x,
                             T& log_det) {
        for (std::size_t i = layers.size(); i-- > 0;)
            layer_inverse(layers[i], params, x, log_det);
    }

    template <typename T>
    static void layer_forward(const Layer& l, std::span<const T> params,
                              std::vector<T>& x, T& log_det) {
        using std::abs;
        using std::exp;
        using std::log;
        using mflow::ad::value_of;
        std::span<const T> p = params.subspan(l.offset, l.count);
        const int D = l.spec.dim;
        switch (l.spec.kind) {
            case LayerKind::ActNorm: {
                for (int i = 0; i < D; ++i) {
                    if (value_of(p[i]) == 0.0)
                        throw std::domain_error(
                            "actnorm scale is zero at coordinate " +
                            std::to_string(i));
                    log_det = log_det + log(abs(p[i]));
                    x[i] = p[i] * x[i] + p[D + i];
                }
                break;
            }
            case LayerKind::InvertibleLinear: {
                check_diag(p, D);
                // t = U x (log-parameterized diagonal, strict upper)
                std::vector<T> t(x.begin(), x.end());
                for (int i = 0; i < D; ++i) {
                    T acc = exp(p[diag_off(D) + i]) * x[i];
                    for (int j = i + 1; j < D; ++j)
                        acc = acc + p[u_off(D, i, j)] * x[j];
                    t[i] = acc;
                    log_det = log_det + p[diag_off(D) + i];
                }
                // w = L t (unit diagonal, strict lower), then permute
                std::vector<T> w(t.begin(), t.end());
                for (int i = 1; i < D; ++i) {
                    T acc = t[i];
                    for (int j = 0; j < i; ++j)
                        acc = acc + p[l_off(i, j)] * t[j];
                    w[i] = acc;
                }
                for (int i = 0; i < D; ++i) x[i] = w[l.perm[i]];
                break;
            }
            case LayerKind::AffineCoupling: {
                const std::vector<int> pas = detail::passive_indices(l.spec);
                const std::vector<int> act = detail::active_indices(l.spec);
                std::vector<T> h;
                h.reserve(pas.size());
                for (int i : pas) h.push_back(x[i]);
                detail::mlp_apply(p, detail::conditioner_widths(l.spec), h);
                using std::tanh;
                for (std::size_t k = 0; k < act.size(); ++k) {
                    T s = tanh(h[k] * (1.0 / kScaleCap)) * kScaleCap;
                    x[act[k]] = x[act[k]] * exp(s) + h[act.size() + k];
                    log_det = log_det + s;
                }
                break;
            }
        }
    }

    template <typename T>
    static void layer_inverse(const Layer& l, std::span<const T> params,
                              std::vector<T>& x, T& log_det) {
        using std::abs;
        using std::exp;
        using std::log;
        using mflow::ad::value_of;
        std::span<const T> p = params.subspan(l.offset, l.count);
        const int D = l.spec.dim;
        switch (l.spec.kind) {
            case LayerKind::ActNorm: {
                for (int i = 0; i < D; ++i) {
                    if (value_of(p[i]) == 0.0)
                        throw std::domain_error(
                            "actnorm scale is zero at coordinate " +
                            std::to_string(i));
                    x[i] = (x[i] - p[D + i]) / p[i];
                    log_det = log_det - log(abs(p[i]));
                }
                break;
            }
            case LayerKind::InvertibleLinear: {
                check_diag(p, D);
                // undo the permutation, then the two triangular solves
                std::vector<T> w(x.begin(), x.end());
                for (int i = 0; i < D; ++i) w[l.perm[i]] = x[i];
                std::vector<T> t(w.begin(), w.end());
                for (int i = 1; i < D; ++i) {
                    T acc = w[i];
                    for (int j = 0; j < i; ++j)
                        acc = acc - p[l_off(i, j)] * t[j];
                    t[i] = acc;
                }
                for (int i = D; i-- > 0;) {
                    T acc = t[i];
                    for (int j = i + 1; j < D; ++j)
                        acc = acc - p[u_off(D, i, j)] * x[j];
                    x[i] = acc * exp(-p[diag_off(D) + i]);
                    log_det = log_det - p[diag_off(D) + i];
                }
                break;
            }
            case LayerKind::AffineCoupling: {
                const std::vector<int> pas = detail::passive_indices(l.spec);
                const std::vector<int> act = detail::active_indices(l.spec);
                std::vector<T> h;
                h.reserve(pas.size());
                for (int i : pas) h.push_back(x[i]);
                detail::mlp_apply(p, detail::conditioner_widths(l.spec), h);
                using std::tanh;
                for (std::size_t k = 0; k < act.size(); ++k) {
                    T s = tanh(h[k] * (1.0 / kScaleCap)) * kScaleCap;
                    x[act[k]] = (x[act[k]] - h[act.size() + k]) * exp(-s);
                    log_det = log_det - s;
                }
                break;
            }
        }
    }

    // Data-dependent actnorm initialization: walks the stack in order and
    // sets each actnorm so its outputs on `rows` have per-coordinate mean 0
    // and variance 1, transforming the batch as it goes.  Layers other than
    // actnorm keep their current parameters.
    void init_actnorm_from_data(std::span<const double> rows,
                                std::size_t n_rows) {
        if (n_rows == 0) throw std::invalid_argument("actnorm init: no rows");
        std::vector<std::vector<double>> batch(n_rows);
        for (std::size_t r = 0; r < n_rows; ++r)
            batch[r].assign(rows.begin() + r * dim_,
                            rows.begin() + (r + 1) * dim_);
        for (const Layer& l : layers_) {
            if (l.spec.kind == LayerKind::ActNorm) {
                const int D = l.spec.dim;
                for (int i = 0; i < D; ++i) {
                    double mean = 0.0;
                    for (const auto& row : batch) mean += row[i];
                    mean /= static_cast<double>(n_rows);
                    double var = 0.0;
                    for (const auto& row : batch)
                        var += (row[i] - mean) * (row[i] - mean);
                    var /= static_cast<double>(n_rows);
                    const double sd = std::sqrt(var);
                    const double s = sd < 1e-12 ? 1.0 : 1.0 / sd;
                    params_[l.offset + i] = s;
                    params_[l.offset + D + i] = -mean * s;
                }
            }
            double ignored = 0.0;
            for (auto& row : batch)
                layer_forward<double>(l, params_, row, ignored);
        }
    }

private:
    static void validate_spec(const LayerSpec& s, int dim) {
        if (s.dim != dim)
            throw std::invalid_argument("FlowStack: layer dim mismatch");
        if (dim < 1) throw std::invalid_argument("FlowStack: dim must be >= 1");
        if (s.kind == LayerKind::AffineCoupling) {
            if (dim < 2)
                throw std::invalid_argument(
                    "affine coupling needs dim >= 2 to split");
            for (int h : s.hidden)
                if (h < 1)
                    throw std::invalid_argument(
                        "affine coupling hidden width must be >= 1");
            if (s.mask_parity != 0 && s.mask_parity != 1)
                throw std::invalid_argument("mask_parity must be 0 or 1");
        }
    }

    // strict lower entry (i, j), i > j, rows packed in order
    static std::size_t l_off(int i, int j) {
        return static_cast<std::size_t>(i) * (i - 1) / 2 + j;
    }
    // strict upper entry (i, j), i < j, packed after the lower block
    static std::size_t u_off(int D, int i, int j) {
        const std::size_t lower = static_cast<std::size_t>(D) * (D - 1) / 2;
        const std::size_t row =
            static_cast<std::size_t>(i) * (D - 1) -
            static_cast<std::size_t>(i) * (i - 1) / 2;
        return lower + row + (j - i - 1);
    }
    static std::size_t diag_off(int D) {
        return static_cast<std::size_t>(D) * (D - 1);
    }

    template <typename T>
    static void check_diag(std::span<const T> p, int D) {
        using mflow::ad::value_of;
        for (int i = 0; i < D; ++i) {
            const double d = std::exp(value_of(p[diag_off(D) + i]));
            if (!(d >= kDiagFloor))
                throw std::domain_error(
                    "invertible linear diagonal underflow at coordinate " +
                    std::to_string(i) + ": " + std::to_string(d));
        }
    }

    void init_layer(const Layer& l, Rng& rng) {
        switch (l.spec.kind) {
            case LayerKind::ActNorm:
                for (int i = 0; i < l.spec.dim; ++i)
                    params_[l.offset + i] = 1.0;
                break;
            case LayerKind::InvertibleLinear:
                // identity: zeros everywhere, log-diagonal 0
                break;
            case LayerKind::AffineCoupling: {
                // Xavier-uniform hidden layers; the output layer stays zero
                // so the freshly built stack is exactly the identity.
                const std::vector<int> w = detail::conditioner_widths(l.spec);
                std::size_t off = l.offset;
                for (std::size_t k = 0; k + 1 < w.size(); ++k) {
                    const bool last = (k + 2 == w.size());
                    const double limit = std::sqrt(6.0 / (w[k] + w[k + 1]));
                    for (int i = 0; i < w[k + 1] * w[k]; ++i) {
                        params_[off + i] =
                            last ? 0.0
                                 : limit * (2.0 * rng.next_uniform() - 1.0);
                    }
                    off += static_cast<std::size_t>(w[k + 1]) * w[k] + w[k + 1];
                }
                break;
            }
        }
    }

    void check_dim(std::size_t n) const {
        if (n != static_cast<std::size_t>(dim_))
            throw std::invalid_argument("FlowStack: input has dimension " +
                                        std::to_string(n) + ", expected " +
                                        std::to_string(dim_));
    }

    int dim_ = 0;
    std::vector<Layer> layers_;
    std::vector<double> params_;
};

struct GaussianPrior {
    int dim = 0;
};

// log N(y; 0, I).  Templated so the same expression appears in traced and
// plain evaluations.
template <typename T>
T gaussian_log_density(std::span<const T> y) {
    if (y.empty())
        throw std::invalid_argument("gaussian_log_density: empty vector");
    T ss = y[0] * y[0];
    for (std::size_t i = 1; i < y.size(); ++i) ss = ss + y[i] * y[i];
    const double c =
        -0.5 * static_cast<double>(y.size()) * std::log(2.0 * std::numbers::pi);
    return ss * -0.5 + c;
}

inline double gaussian_log_density(const GaussianPrior& p,
                                   std::span<const double> y) {
    if (p.dim != static_cast<int>(y.size()))
        throw std::invalid_argument("gaussian_log_density: dim mismatch");
    return gaussian_log_density<double>(y);
}

}  // namespace mflow
