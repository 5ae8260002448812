#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mflow/data.hpp"
#include "mflow/flows.hpp"
#include "mflow/objective.hpp"
#include "mflow/training.hpp"

namespace mflow {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dataset source: one of the built-in generators or a CSV file.
struct DataSpec {
    enum class Kind { None, Circle, EmbeddedGaussian, SwissRoll, Csv };
    Kind kind = Kind::None;
    std::size_t n = 4096;
    double sigma = 0.0;
    int d = 1;
    int D = 2;
    std::string path;
    char delimiter = ',';
    bool header = false;
    std::optional<std::uint64_t> seed;  // unset: derived from the run seed
};

// Per-stage overrides; anything unset inherits the top-level value.
struct StageConfig {
    std::optional<int> d;
    std::optional<int> epochs;
    std::optional<std::string> flow;
    std::optional<std::vector<int>> hidden;
    std::optional<std::string> variant;
    std::optional<std::string> h_flow;
    std::optional<std::vector<int>> h_hidden;
    std::optional<double> delta, lambda, alpha;
};

struct RunConfig {
    DataSpec data;
    std::optional<int> d;
    std::string flow = "glow*6";
    std::vector<int> hidden = {24, 24};
    std::string variant = "single_block";
    std::string h_flow = "glow*2";
    std::vector<int> h_hidden;  // empty: same as hidden
    double delta = 1.0;
    double lambda = 20.0;
    double alpha = 0.5;
    AdamConfig adam;
    double clip = 100.0;
    int epochs = 25;
    int batch = 64;
    std::uint64_t seed = 1;
    std::string out;
    std::string actnorm_init = "data";
    std::vector<StageConfig> stages;
    std::vector<std::string> echo;  // parsed lines, normalized, input order
};

namespace detail {

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r'))
        --e;
    return std::string(s.substr(b, e - b));
}

inline double config_double(const std::string& key, const std::string& v) {
    if (v == "inf" || v == "infinity")
        return std::numeric_limits<double>::infinity();
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError("key '" + key + "': expected a number, got '" + v +
                          "'");
    return out;
}

inline long config_int(const std::string& key, const std::string& v) {
    long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError("key '" + key + "': expected an integer, got '" + v +
                          "'");
    return out;
}

inline std::uint64_t config_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError("key '" + key +
                          "': expected an unsigned integer, got '" + v + "'");
    return out;
}

inline std::vector<int> config_int_list(const std::string& key,
                                        const std::string& v) {
    std::vector<int> out;
    if (trim(v).empty()) return out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = v.find(',', start);
        const std::string tok = trim(
            v.substr(start, pos == std::string::npos ? std::string::npos
                                                     : pos - start));
        out.push_back(static_cast<int>(config_int(key, tok)));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::map<std::string, std::string> parse_args(const std::string& key,
                                                     const std::string& s) {
    std::map<std::string, std::string> out;
    if (trim(s).empty()) return out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = s.find(',', start);
        const std::string tok = trim(
            s.substr(start, pos == std::string::npos ? std::string::npos
                                                     : pos - start));
        const std::size_t eq = tok.find('=');
        if (eq == std::string::npos)
            throw ConfigError("key '" + key + "': expected name=value, got '" +
                              tok + "'");
        out[trim(tok.substr(0, eq))] = trim(tok.substr(eq + 1));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return out;
}

}  // namespace detail

// Parses a dataset source: "circle:n=8192,sigma=0.01",
// "embedded_gaussian:n=...,d=...,D=...,sigma=...", "swiss_roll:...",
// "csv:path=...[,delimiter=;][,header=1]", or a bare CSV path.
inline DataSpec parse_data_spec(const std::string& value,
                                const std::string& key = "data") {
    DataSpec spec;
    const std::size_t colon = value.find(':');
    if (colon == std::string::npos) {
        spec.kind = DataSpec::Kind::Csv;
        spec.path = detail::trim(value);
        if (spec.path.empty())
            throw ConfigError("key '" + key + "': empty data source");
        return spec;
    }
    const std::string name = detail::trim(value.substr(0, colon));
    auto args = detail::parse_args(key, value.substr(colon + 1));
    auto take = [&](const char* k) -> std::optional<std::string> {
        auto it = args.find(k);
        if (it == args.end()) return std::nullopt;
        std::string v = it->second;
        args.erase(it);
        return v;
    };
    if (name == "circle" || name == "swiss_roll" ||
        name == "embedded_gaussian") {
        spec.kind = name == "circle" ? DataSpec::Kind::Circle
                    : name == "swiss_roll"
                        ? DataSpec::Kind::SwissRoll
                        : DataSpec::Kind::EmbeddedGaussian;
        if (auto v = take("n"))
            spec.n = static_cast<std::size_t>(detail::config_int(key, *v));
        if (auto v = take("sigma")) spec.sigma = detail::config_double(key, *v);
        if (auto v = take("seed")) spec.seed = detail::config_u64(key, *v);
        if (spec.kind == DataSpec::Kind::EmbeddedGaussian) {
            if (auto v = take("d"))
                spec.d = static_cast<int>(detail::config_int(key, *v));
            if (auto v = take("D"))
                spec.D = static_cast<int>(detail::config_int(key, *v));
        }
    } else if (name == "csv") {
        spec.kind = DataSpec::Kind::Csv;
        if (auto v = take("path")) spec.path = *v;
        if (spec.path.empty())
            throw ConfigError("key '" + key + "': csv source needs path=");
        if (auto v = take("delimiter")) {
            if (v->size() != 1)
                throw ConfigError("key '" + key +
                                  "': delimiter must be one character");
            spec.delimiter = (*v)[0];
        }
        if (auto v = take("header"))
            spec.header = detail::config_int(key, *v) != 0;
    } else {
        throw ConfigError("key '" + key + "': unknown data source '" + name +
                          "'");
    }
    if (!args.empty())
        throw ConfigError("key '" + key + "': unknown argument '" +
                          args.begin()->first + "' for source '" + name + "'");
    return spec;
}

inline Dataset build_dataset(const DataSpec& spec,
                             std::uint64_t default_seed) {
    const std::uint64_t seed = spec.seed.value_or(default_seed);
    switch (spec.kind) {
        case DataSpec::Kind::Circle:
            return make_circle(spec.n, spec.sigma, seed);
        case DataSpec::Kind::EmbeddedGaussian:
            return make_embedded_gaussian(spec.n, spec.d, spec.D, spec.sigma,
                                          seed);
        case DataSpec::Kind::SwissRoll:
            return make_swiss_roll(spec.n, spec.sigma, seed);
        case DataSpec::Kind::Csv:
            return load_csv(spec.path, spec.delimiter, spec.header);
        case DataSpec::Kind::None:
            break;
    }
    throw ConfigError("missing required key 'data'");
}

// Expands a flow string like "glow*6", "coupling*8" or
// "actnorm,linear,coupling*2" into layer specs.  Coupling masks alternate
// parity in order of appearance.
inline std::vector<LayerSpec> build_flow_specs(const std::string& flow,
                                               int dim,
                                               const std::vector<int>& hidden,
                                               const std::string& key = "flow") {
    std::vector<LayerSpec> specs;
    int parity = 0;
    auto push = [&](const std::string& name) {
        if (name == "glow") {
            specs.push_back(LayerSpec::actnorm(dim));
            specs.push_back(LayerSpec::invertible_linear(dim));
            specs.push_back(LayerSpec::affine_coupling(dim, hidden, parity));
            parity ^= 1;
        } else if (name == "actnorm") {
            specs.push_back(LayerSpec::actnorm(dim));
        } else if (name == "linear") {
            specs.push_back(LayerSpec::invertible_linear(dim));
        } else if (name == "coupling") {
            specs.push_back(LayerSpec::affine_coupling(dim, hidden, parity));
            parity ^= 1;
        } else {
            throw ConfigError("key '" + key + "': unknown layer '" + name +
                              "'");
        }
    };
    std::size_t start = 0;
    while (start <= flow.size()) {
        const std::size_t pos = flow.find(',', start);
        std::string tok = detail::trim(
            flow.substr(start, pos == std::string::npos ? std::string::npos
                                                        : pos - start));
        if (tok.empty())
            throw ConfigError("key '" + key + "': empty layer entry");
        long count = 1;
        const std::size_t star = tok.find('*');
        if (star != std::string::npos) {
            count = detail::config_int(key, detail::trim(tok.substr(star + 1)));
            tok = detail::trim(tok.substr(0, star));
            if (count < 1)
                throw ConfigError("key '" + key +
                                  "': repeat count must be >= 1");
        }
        for (long i = 0; i < count; ++i) push(tok);
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return specs;
}

inline RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const std::string stripped = detail::trim(line);
        if (stripped.empty()) continue;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) +
                              ": expected 'key = value', got '" + stripped +
                              "'");
        const std::string key = detail::trim(stripped.substr(0, eq));
        const std::string value = detail::trim(stripped.substr(eq + 1));
        cfg.echo.push_back(key + " = " + value);

        if (key.rfind("stage.", 0) == 0) {
            const std::size_t dot = key.find('.', 6);
            if (dot == std::string::npos)
                throw ConfigError("unknown key '" + key + "'");
            const long idx = detail::config_int(key, key.substr(6, dot - 6));
            if (idx < 1 || idx > 64)
                throw ConfigError("key '" + key +
                                  "': stage index out of range");
            if (cfg.stages.size() < static_cast<std::size_t>(idx))
                cfg.stages.resize(idx);
            StageConfig& st = cfg.stages[idx - 1];
            const std::string sub = key.substr(dot + 1);
            if (sub == "d")
                st.d = static_cast<int>(detail::config_int(key, value));
            else if (sub == "epochs")
                st.epochs = static_cast<int>(detail::config_int(key, value));
            else if (sub == "flow")
                st.flow = value;
            else if (sub == "hidden")
                st.hidden = detail::config_int_list(key, value);
            else if (sub == "variant")
                st.variant = value;
            else if (sub == "h_flow")
                st.h_flow = value;
            else if (sub == "h_hidden")
                st.h_hidden = detail::config_int_list(key, value);
            else if (sub == "delta")
                st.delta = detail::config_double(key, value);
            else if (sub == "lambda")
                st.lambda = detail::config_double(key, value);
            else if (sub == "alpha")
                st.alpha = detail::config_double(key, value);
            else
                throw ConfigError("unknown key '" + key + "'");
            continue;
        }

        if (key == "data")
            cfg.data = parse_data_spec(value, key);
        else if (key == "d")
            cfg.d = static_cast<int>(detail::config_int(key, value));
        else if (key == "flow")
            cfg.flow = value;
        else if (key == "hidden")
            cfg.hidden = detail::config_int_list(key, value);
        else if (key == "variant")
            cfg.variant = value;
        else if (key == "h_flow")
            cfg.h_flow = value;
        else if (key == "h_hidden")
            cfg.h_hidden = detail::config_int_list(key, value);
        else if (key == "delta")
            cfg.delta = detail::config_double(key, value);
        else if (key == "lambda")
            cfg.lambda = detail::config_double(key, value);
        else if (key == "alpha")
            cfg.alpha = detail::config_double(key, value);
        else if (key == "lr")
            cfg.adam.lr = detail::config_double(key, value);
        else if (key == "beta1")
            cfg.adam.beta1 = detail::config_double(key, value);
        else if (key == "beta2")
            cfg.adam.beta2 = detail::config_double(key, value);
        else if (key == "eps")
            cfg.adam.eps = detail::config_double(key, value);
        else if (key == "clip")
            cfg.clip = detail::config_double(key, value);
        else if (key == "epochs")
            cfg.epochs = static_cast<int>(detail::config_int(key, value));
        else if (key == "batch")
            cfg.batch = static_cast<int>(detail::config_int(key, value));
        else if (key == "seed")
            cfg.seed = detail::config_u64(key, value);
        else if (key == "out")
            cfg.out = value;
        else if (key == "actnorm_init")
            cfg.actnorm_init = value;
        else
            throw ConfigError("unknown key '" + key + "'");
    }
    if (cfg.actnorm_init != "data" && cfg.actnorm_init != "identity")
        throw ConfigError("key 'actnorm_init': expected data or identity");
    if (cfg.variant != "single_block" && cfg.variant != "two_block")
        throw ConfigError("key 'variant': expected single_block or two_block");
    return cfg;
}

inline RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

namespace detail {

inline Variant parse_variant(const std::string& v, const std::string& key) {
    if (v == "single_block") return Variant::SingleBlock;
    if (v == "two_block") return Variant::TwoBlock;
    throw ConfigError("key '" + key +
                      "': expected single_block or two_block, got '" + v + "'");
}

}  // namespace detail

// Materializes the stage plan for a run: a one-stage plan from the top-level
// keys when no stage.N.* keys are present, otherwise one stage per index
// with unset fields inherited from the top level.
inline StagePlan build_stage_plan(const RunConfig& cfg, int data_dim) {
    StagePlan plan;
    auto make_stage = [&](const StageConfig* st, int input_dim,
                          const std::string& prefix) {
        Stage s;
        s.input_dim = input_dim;
        if (st && st->d)
            s.manifold_dim = *st->d;
        else if (!st && cfg.d)
            s.manifold_dim = *cfg.d;
        else
            throw ConfigError("missing required key '" + prefix + "d'");
        s.epochs = st && st->epochs ? *st->epochs : cfg.epochs;
        const std::vector<int>& hidden =
            st && st->hidden ? *st->hidden : cfg.hidden;
        const std::string& flow = st && st->flow ? *st->flow : cfg.flow;
        s.flow = build_flow_specs(flow, input_dim, hidden, prefix + "flow");
        s.loss.delta = st && st->delta ? *st->delta : cfg.delta;
        s.loss.lambda = st && st->lambda ? *st->lambda : cfg.lambda;
        s.loss.alpha = st && st->alpha ? *st->alpha : cfg.alpha;
        s.loss.variant = detail::parse_variant(
            st && st->variant ? *st->variant : cfg.variant, prefix + "variant");
        if (s.loss.variant == Variant::TwoBlock) {
            const std::vector<int>& hh = st && st->h_hidden ? *st->h_hidden
                                         : !cfg.h_hidden.empty() ? cfg.h_hidden
                                                                 : hidden;
            const std::string& hf = st && st->h_flow ? *st->h_flow : cfg.h_flow;
            s.h_flow =
                build_flow_specs(hf, s.manifold_dim, hh, prefix + "h_flow");
        }
        try {
            s.loss.validate();
            LatentSplit{s.input_dim, s.manifold_dim}.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("stage under '" + prefix +
                              "': " + std::string(e.what()));
        }
        return s;
    };
    if (cfg.stages.empty()) {
        plan.stages.push_back(make_stage(nullptr, data_dim, ""));
    } else {
        int cur = data_dim;
        for (std::size_t k = 0; k < cfg.stages.size(); ++k) {
            const std::string prefix =
                "stage." + std::to_string(k + 1) + ".";
            plan.stages.push_back(make_stage(&cfg.stages[k], cur, prefix));
            cur = plan.stages.back().manifold_dim;
        }
    }
    return plan;
}

inline TrainOptions build_train_options(const RunConfig& cfg) {
    TrainOptions opt;
    opt.adam = cfg.adam;
    opt.epochs = cfg.epochs;
    opt.batch = cfg.batch;
    opt.seed = cfg.seed;
    opt.clip_norm = cfg.clip;
    opt.actnorm_data_init = cfg.actnorm_init == "data";
    opt.loss.delta = cfg.delta;
    opt.loss.lambda = cfg.lambda;
    opt.loss.alpha = cfg.alpha;
    opt.loss.variant = detail::parse_variant(cfg.variant, "variant");
    return opt;
}

}  // namespace mflow
