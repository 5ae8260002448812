#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mflow/autodiff.hpp"
#include "mflow/data.hpp"
#include "mflow/metrics.hpp"
#include "mflow/objective.hpp"
#include "mflow/rng.hpp"

namespace mflow {

// Stream tags, fixed forever: changing any of these changes every seeded
// run, so they are part of the reproducibility contract.
inline constexpr std::uint64_t kStreamShuffle = 1;
inline constexpr std::uint64_t kStreamSplit = 2;
inline constexpr std::uint64_t kStreamData = 3;

// Per-stage seed derivations, shared by the library drivers and the CLI so
// a one-stage hierarchical run reproduces a plain run bit for bit.
inline std::uint64_t stage_build_seed(std::uint64_t seed, int stage) {
    return Rng(seed).split(16 + 2 * static_cast<std::uint64_t>(stage)).state();
}
inline std::uint64_t stage_train_seed(std::uint64_t seed, int stage) {
    return Rng(seed).split(17 + 2 * static_cast<std::uint64_t>(stage)).state();
}
inline std::uint64_t stage_h_build_seed(std::uint64_t seed, int stage) {
    return Rng(seed).split(1000 + static_cast<std::uint64_t>(stage)).state();
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimState {
    AdamConfig cfg;
    std::uint64_t step = 0;
    std::vector<double> m, v;
};

struct NonFiniteGradientError : std::runtime_error {
    explicit NonFiniteGradientError(std::size_t index)
        : std::runtime_error("non-finite gradient for parameter " +
                             std::to_string(index)),
          index(index) {}
    std::size_t index;
};

struct DivergenceError : std::runtime_error {
    DivergenceError(int epoch, int batch, const std::string& detail)
        : std::runtime_error("training diverged at epoch " +
                             std::to_string(epoch) + ", batch " +
                             std::to_string(batch) + ": " + detail),
          epoch(epoch),
          batch(batch) {}
    int epoch;
    int batch;
};

// One Adam update with bias correction.  Moment buffers are allocated on
// first use and must stay paired with the same parameter vector afterwards.
inline void adam_step(std::vector<double>& params,
                      std::span<const double> grads, OptimState& st) {
    if (grads.size() != params.size())
        throw std::invalid_argument("adam_step: gradient size mismatch");
    if (st.m.empty()) {
        st.m.assign(params.size(), 0.0);
        st.v.assign(params.size(), 0.0);
    }
    if (st.m.size() != params.size())
        throw std::invalid_argument("adam_step: state size mismatch");
    ++st.step;
    const double bc1 = 1.0 - std::pow(st.cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.cfg.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        if (!std::isfinite(g)) throw NonFiniteGradientError(i);
        st.m[i] = st.cfg.beta1 * st.m[i] + (1.0 - st.cfg.beta1) * g;
        st.v[i] = st.cfg.beta2 * st.v[i] + (1.0 - st.cfg.beta2) * g * g;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        params[i] -= st.cfg.lr * mhat / (std::sqrt(vhat) + st.cfg.eps);
    }
}

// Scales the gradient so its global L2 norm does not exceed max_norm.
// Returns the pre-clip norm.
inline double clip_global_norm(std::span<double> grads, double max_norm) {
    double ss = 0.0;
    for (double g : grads) ss += g * g;
    const double norm = std::sqrt(ss);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (double& g : grads) g *= scale;
    }
    return norm;
}

struct TrainOptions {
    LossConfig loss;
    AdamConfig adam;
    int epochs = 20;
    int batch = 64;
    std::uint64_t seed = 1;
    double clip_norm = 100.0;
    bool actnorm_data_init = true;
    int actnorm_init_rows = 256;
};

struct EpochRecord {
    int epoch = 0;        // 1-based
    double mean_loss = 0.0;
    double nll = 0.0;     // held-out (training set when no holdout given)
    double bpd = 0.0;
    double recon_mse = 0.0;
    double wall_time = 0.0;  // seconds, measurement only; not part of any
                             // deterministic output
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
};

// Minibatch training of a single model.  Per batch: re-trace the mean loss
// on a rolled-back tape, reverse-sweep, clip, Adam.  Everything that touches
// the RNG is keyed off opt.seed, so two runs with equal inputs produce
// bit-identical parameters and reports (wall_time aside).
inline TrainReport train_single_step(FlowModel& model, const Dataset& train,
                                     const Dataset& heldout,
                                     const TrainOptions& opt) {
    model.validate();
    opt.loss.validate();
    detail::check_variant(model, opt.loss);
    if (opt.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (opt.batch < 1) throw std::invalid_argument("batch must be >= 1");
    TrainReport report;
    if (opt.epochs == 0) return report;
    if (train.n == 0) throw std::invalid_argument("training set is empty");
    if (train.dim != model.split.ambient_dim)
        throw std::invalid_argument("training data dim != model dim");

    if (opt.actnorm_data_init) {
        const std::size_t k =
            std::min<std::size_t>(train.n, static_cast<std::size_t>(
                                               std::max(1, opt.actnorm_init_rows)));
        model.f.init_actnorm_from_data(
            std::span<const double>(train.points.data(), k * train.dim), k);
        if (model.h) {
            // the manifold flow sees u-coordinates, so initialize it on those
            const int d = model.split.manifold_dim;
            std::vector<double> us;
            us.reserve(k * static_cast<std::size_t>(d));
            for (std::size_t i = 0; i < k; ++i) {
                auto [z, ld] = model.f.forward(train.row(i));
                us.insert(us.end(), z.begin(), z.begin() + d);
            }
            model.h->init_actnorm_from_data(us, k);
        }
    }

    const std::size_t nf = model.f.param_count();
    const std::size_t nh = model.h ? model.h->param_count() : 0;
    std::vector<double> flat(nf + nh);
    std::copy(model.f.params().begin(), model.f.params().end(), flat.begin());
    if (model.h)
        std::copy(model.h->params().begin(), model.h->params().end(),
                  flat.begin() + nf);

    ad::Tape tape;
    std::vector<ad::Var> leaves;
    leaves.reserve(flat.size());
    for (double v : flat) leaves.push_back(tape.leaf(v));
    const std::span<const ad::Var> f_leaves(leaves.data(), nf);
    const std::span<const ad::Var> h_leaves(leaves.data() + nf, nh);
    const std::size_t mark = tape.watermark();

    OptimState state;
    state.cfg = opt.adam;
    Rng shuffle_rng = Rng(opt.seed).split(kStreamShuffle);
    std::vector<std::size_t> order(train.n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> grads(flat.size());

    const Dataset& eval_ds = heldout.n > 0 ? heldout : train;
    for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        shuffle(order, shuffle_rng);
        double loss_sum = 0.0;
        int batch_index = 0;
        for (std::size_t pos = 0; pos < train.n;
             pos += static_cast<std::size_t>(opt.batch), ++batch_index) {
            const std::size_t bn =
                std::min<std::size_t>(opt.batch, train.n - pos);
            tape.rollback(mark);
            ad::Var mean_loss;
            try {
                ad::Var zero = tape.leaf(0.0);
                ad::Var acc = zero;
                for (std::size_t b = 0; b < bn; ++b) {
                    std::span<const double> x = train.row(order[pos + b]);
                    std::vector<ad::Var> xv;
                    xv.reserve(x.size());
                    for (double xi : x) xv.push_back(tape.leaf(xi));
                    auto parts = pixel_rejection_loss_eval<ad::Var>(
                        model, f_leaves, h_leaves, xv, opt.loss, zero);
                    acc = acc + parts.loss;
                }
                mean_loss = acc * (1.0 / static_cast<double>(bn));
            } catch (const std::domain_error& e) {
                throw DivergenceError(epoch, batch_index, e.what());
            }
            if (!std::isfinite(mean_loss.value()))
                throw DivergenceError(epoch, batch_index,
                                      "batch loss is not finite");
            tape.backward(mean_loss);
            for (std::size_t i = 0; i < flat.size(); ++i)
                grads[i] = leaves[i].adjoint();
            clip_global_norm(grads, opt.clip_norm);
            adam_step(flat, grads, state);
            for (std::size_t i = 0; i < flat.size(); ++i)
                tape.set_value(leaves[i], flat[i]);
            std::copy(flat.begin(), flat.begin() + nf,
                      model.f.params().begin());
            if (model.h)
                std::copy(flat.begin() + nf, flat.end(),
                          model.h->params().begin());
            loss_sum += mean_loss.value() * static_cast<double>(bn);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.mean_loss = loss_sum / static_cast<double>(train.n);
        rec.nll = nll(model, eval_ds);
        rec.bpd = bpd(rec.nll, eval_ds.dim);
        rec.recon_mse = recon_mse(model, eval_ds);
        rec.wall_time =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
        report.epochs.push_back(rec);
    }
    return report;
}

// One level of the hierarchy: a flow over the current space plus the split
// that defines the next, smaller space.
struct Stage {
    std::vector<LayerSpec> flow;
    std::vector<LayerSpec> h_flow;  // present only for the two-block loss
    int input_dim = 0;
    int manifold_dim = 0;
    int epochs = 0;
    LossConfig loss;
};

struct StagePlan {
    std::vector<Stage> stages;

    void validate(int data_dim) const {
        if (stages.empty())
            throw std::invalid_argument("stage plan has no stages");
        int cur = data_dim;
        for (std::size_t k = 0; k < stages.size(); ++k) {
            const Stage& s = stages[k];
            if (s.input_dim != cur)
                throw std::invalid_argument(
                    "stage " + std::to_string(k + 1) + " expects input dim " +
                    std::to_string(s.input_dim) + ", previous stage yields " +
                    std::to_string(cur));
            LatentSplit{s.input_dim, s.manifold_dim}.validate();
            if (s.epochs < 0)
                throw std::invalid_argument("stage epochs must be >= 0");
            s.loss.validate();
            cur = s.manifold_dim;
        }
    }
};

struct HierResult {
    std::vector<FlowModel> models;
    std::vector<TrainReport> reports;
};

// Manifold coordinates of x under a chain of frozen stages: each stage
// encodes and keeps the first manifold_dim coordinates.  Any manifold-block
// flow h only models their density and does not move them.  An empty chain
// is the identity.
inline std::vector<double> project_through_stages(
    std::span<const FlowModel> models, std::span<const double> x) {
    std::vector<double> cur(x.begin(), x.end());
    for (const FlowModel& m : models) {
        auto [z, ld] = m.f.forward(cur);
        z.resize(m.split.manifold_dim);
        cur = std::move(z);
    }
    return cur;
}

inline Dataset project_dataset(std::span<const FlowModel> models,
                               const Dataset& ds) {
    Dataset out;
    out.n = ds.n;
    out.dim = models.empty() ? ds.dim
                             : models.back().split.manifold_dim;
    out.points.reserve(out.n * static_cast<std::size_t>(out.dim));
    for (std::size_t i = 0; i < ds.n; ++i) {
        std::vector<double> p = project_through_stages(models, ds.row(i));
        out.points.insert(out.points.end(), p.begin(), p.end());
    }
    return out;
}

// Greedy stage-wise training: stage k is built from its spec, trained on the
// projections of the data through stages 1..k-1, then frozen.  Earlier
// stages are never touched again.  `on_stage` (optional) runs right after
// each stage finishes, before the next one starts.
inline HierResult train_hierarchical(
    const StagePlan& plan, const Dataset& data, const TrainOptions& base,
    std::uint64_t seed,
    const std::function<void(int, const FlowModel&, const TrainReport&)>&
        on_stage = {}) {
    plan.validate(data.dim);
    auto [train_set, held_set] =
        split_train_heldout(data, Rng(seed).split(kStreamSplit).state());
    HierResult result;
    for (std::size_t k = 0; k < plan.stages.size(); ++k) {
        const Stage& sp = plan.stages[k];
        const int stage_no = static_cast<int>(k) + 1;
        FlowModel m;
        m.f = FlowStack(sp.flow, stage_build_seed(seed, stage_no));
        m.split = LatentSplit{sp.input_dim, sp.manifold_dim};
        if (sp.loss.variant == Variant::TwoBlock)
            m.h = FlowStack(sp.h_flow, stage_h_build_seed(seed, stage_no));
        const Dataset tr = project_dataset(result.models, train_set);
        const Dataset he = project_dataset(result.models, held_set);
        TrainOptions opt = base;
        opt.loss = sp.loss;
        opt.epochs = sp.epochs;
        opt.seed = stage_train_seed(seed, stage_no);
        TrainReport rep = train_single_step(m, tr, he, opt);
        result.models.push_back(std::move(m));
        result.reports.push_back(std::move(rep));
        if (on_stage)
            on_stage(stage_no, result.models.back(), result.reports.back());
    }
    return result;
}

}  // namespace mflow
