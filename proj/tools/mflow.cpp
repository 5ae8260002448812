#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mflow/mflow.hpp"

namespace fs = std::filesystem;

namespace {

mflow::RunConfig load_run_config(const std::string& config_path,
                                 const std::optional<std::string>& data,
                                 const std::optional<std::string>& out,
                                 const std::optional<std::uint64_t>& seed) {
    mflow::RunConfig cfg = mflow::parse_config_file(config_path);
    if (data) cfg.data = mflow::parse_data_spec(*data, "--data");
    if (out) cfg.out = *out;
    if (seed) cfg.seed = *seed;
    if (cfg.data.kind == mflow::DataSpec::Kind::None)
        throw mflow::ConfigError("missing required key 'data'");
    if (cfg.out.empty()) throw mflow::ConfigError("missing required key 'out'");
    return cfg;
}

void write_train_log(const std::string& path, const mflow::TrainReport& rep) {
    std::vector<double> rows;
    rows.reserve(rep.epochs.size() * 6);
    for (const mflow::EpochRecord& e : rep.epochs) {
        rows.push_back(static_cast<double>(e.epoch));
        rows.push_back(e.mean_loss);
        rows.push_back(e.nll);
        rows.push_back(e.bpd);
        rows.push_back(e.recon_mse);
        // wall time is measurement noise; the log stays a pure function of
        // (config, seed, data), so the column is pinned to zero
        rows.push_back(0.0);
    }
    mflow::write_csv(path,
                     {"epoch", "loss", "nll", "bpd", "recon_mse", "wall_time"},
                     rows, rep.epochs.size(), 6);
}

int run_training(const std::string& config_path,
                 const std::optional<std::string>& data,
                 const std::optional<std::string>& out,
                 const std::optional<std::uint64_t>& seed, bool hierarchical) {
    const mflow::RunConfig cfg = load_run_config(config_path, data, out, seed);
    const mflow::Dataset ds = mflow::build_dataset(
        cfg.data, mflow::Rng(cfg.seed).split(mflow::kStreamData).state());
    const mflow::StagePlan plan = mflow::build_stage_plan(cfg, ds.dim);
    if (!hierarchical && plan.stages.size() > 1)
        throw mflow::ConfigError(
            "config defines " + std::to_string(plan.stages.size()) +
            " stages; use the hier-train command");
    const mflow::TrainOptions base = mflow::build_train_options(cfg);
    fs::create_directories(cfg.out);

    auto on_stage = [&](int k, const mflow::FlowModel& m,
                        const mflow::TrainReport& rep) {
        const std::string base_name =
            hierarchical ? "stage" + std::to_string(k) : "model";
        const std::string log_name =
            hierarchical ? "stage" + std::to_string(k) + "_log" : "train_log";
        mflow::save_checkpoint(m, (fs::path(cfg.out) / (base_name + ".ckpt")).string(),
                               cfg.echo);
        write_train_log((fs::path(cfg.out) / (log_name + ".csv")).string(), rep);
        double wall = 0.0;
        for (const mflow::EpochRecord& e : rep.epochs) wall += e.wall_time;
        std::cerr << "stage " << k << ": " << rep.epochs.size() << " epochs in "
                  << wall << "s";
        if (!rep.epochs.empty()) {
            const mflow::EpochRecord& last = rep.epochs.back();
            std::cerr << ", final loss " << last.mean_loss << ", nll "
                      << last.nll << ", recon_mse " << last.recon_mse;
        }
        std::cerr << '\n';
    };
    mflow::train_hierarchical(plan, ds, base, cfg.seed, on_stage);
    return 0;
}

int run_sample(const std::string& ckpt, std::size_t n, std::uint64_t seed,
               const std::string& out) {
    const mflow::Checkpoint ck = mflow::load_checkpoint(ckpt);
    const std::vector<double> pts = mflow::sample(ck.model, n, seed);
    const int D = ck.model.split.ambient_dim;
    std::vector<std::string> header;
    for (int i = 0; i < D; ++i) header.push_back("x" + std::to_string(i));
    mflow::write_csv(out, header, pts, n, D);
    return 0;
}

int run_eval(const std::string& ckpt, const std::string& data,
             std::uint64_t seed, std::size_t n_samples) {
    const mflow::Checkpoint ck = mflow::load_checkpoint(ckpt);
    const mflow::Dataset ds = mflow::build_dataset(
        mflow::parse_data_spec(data, "--data"),
        mflow::Rng(seed).split(mflow::kStreamData).state());
    const mflow::EvalSummary s =
        mflow::evaluate(ck.model, ds, n_samples, seed);
    std::cout << "nll,bpd,recon_mse,manifold_distance\n"
              << mflow::format_double(s.nll_nats) << ','
              << mflow::format_double(s.bpd) << ','
              << mflow::format_double(s.recon_mse) << ','
              << (s.manifold_distance
                      ? mflow::format_double(*s.manifold_distance)
                      : "nan")
              << '\n';
    return 0;
}

int run_reconstruct(const std::string& ckpt, const std::string& data,
                    std::uint64_t seed, const std::string& out) {
    const mflow::Checkpoint ck = mflow::load_checkpoint(ckpt);
    const mflow::Dataset ds = mflow::build_dataset(
        mflow::parse_data_spec(data, "--data"),
        mflow::Rng(seed).split(mflow::kStreamData).state());
    if (ds.dim != ck.model.split.ambient_dim)
        throw mflow::ConfigError("data dim " + std::to_string(ds.dim) +
                                 " does not match model dim " +
                                 std::to_string(ck.model.split.ambient_dim));
    const int D = ds.dim;
    std::vector<double> rows;
    rows.reserve(ds.n * 2 * static_cast<std::size_t>(D));
    for (std::size_t i = 0; i < ds.n; ++i) {
        std::span<const double> x = ds.row(i);
        const std::vector<double> xt =
            mflow::reconstruct(ck.model.f, x, ck.model.split);
        rows.insert(rows.end(), x.begin(), x.end());
        rows.insert(rows.end(), xt.begin(), xt.end());
    }
    std::vector<std::string> header;
    for (int i = 0; i < D; ++i) header.push_back("x" + std::to_string(i));
    for (int i = 0; i < D; ++i) header.push_back("recon" + std::to_string(i));
    mflow::write_csv(out, header, rows, ds.n, 2 * D);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "mflow: normalizing-flow manifold learning\n"
        "Evaluation parallelism is capped by the MFLOW_THREADS environment "
        "variable; results do not depend on it."};
    app.require_subcommand(1);

    std::string config_path, ckpt_path, out_path, data_str;
    std::optional<std::string> data_opt, out_opt;
    std::optional<std::uint64_t> seed_opt;
    std::uint64_t seed = 0;
    std::size_t n = 1000;

    CLI::App* train = app.add_subcommand("train", "train a single model");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--data", data_opt,
                      "dataset override: csv path or generator:args");
    train->add_option("--out", out_opt, "output directory override");
    train->add_option("--seed", seed_opt, "run seed override");

    CLI::App* hier =
        app.add_subcommand("hier-train", "train a hierarchy of stages");
    hier->add_option("--config", config_path, "config file")->required();
    hier->add_option("--data", data_opt,
                     "dataset override: csv path or generator:args");
    hier->add_option("--out", out_opt, "output directory override");
    hier->add_option("--seed", seed_opt, "run seed override");

    CLI::App* smp = app.add_subcommand("sample", "draw samples from a model");
    smp->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    smp->add_option("--n", n, "number of samples")->required();
    smp->add_option("--seed", seed, "sampling seed");
    smp->add_option("--out", out_path, "output csv path")->required();

    CLI::App* ev = app.add_subcommand("eval", "evaluate a model on data");
    ev->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    ev->add_option("--data", data_str, "csv path or generator:args")
        ->required();
    ev->add_option("--seed", seed, "seed for generated data and samples");
    ev->add_option("--n", n, "samples for the manifold-distance metric");

    CLI::App* rec =
        app.add_subcommand("reconstruct", "write x and its reconstruction");
    rec->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    rec->add_option("--data", data_str, "csv path or generator:args")
        ->required();
    rec->add_option("--seed", seed, "seed for generated data");
    rec->add_option("--out", out_path, "output csv path")->required();

    try {
        app.parse(argc, argv);
        if (train->parsed())
            return run_training(config_path, data_opt, out_opt, seed_opt,
                                false);
        if (hier->parsed())
            return run_training(config_path, data_opt, out_opt, seed_opt,
                                true);
        if (smp->parsed()) return run_sample(ckpt_path, n, seed, out_path);
        if (ev->parsed()) return run_eval(ckpt_path, data_str, seed, n);
        if (rec->parsed())
            return run_reconstruct(ckpt_path, data_str, seed, out_path);
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const mflow::DivergenceError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
