#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mflow/data.hpp"
#include "mflow/objective.hpp"
#include "mflow/training.hpp"

namespace mflow {

// Line-oriented text checkpoint.  Layout:
//
//   MFLOW-CKPT v1
//   ambient_dim D / manifold_dim d / variant ...
//   f_layers K, one "layer ..." line each
//   h_present 0|1 (followed by h_dim / h_layers block when 1)
//   params N, one value per line at 17 significant digits
//   optstate 0 | optstate N <step> with N m-lines and N v-lines
//   config K, K echo lines verbatim
//   checksum <16-hex FNV-1a over every preceding byte>
//
// Text keeps diffs reviewable; 17 digits round-trip doubles exactly.

struct CheckpointError : std::runtime_error {
    enum class Kind { Version, Checksum, Truncated, Malformed };
    CheckpointError(Kind kind, const std::string& msg)
        : std::runtime_error(msg), kind(kind) {}
    Kind kind;
};

struct Checkpoint {
    FlowModel model;
    std::vector<std::string> config_echo;
    std::optional<OptimState> opt;
};

namespace detail {

inline constexpr char kCkptMagic[] = "MFLOW-CKPT v1";

inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string fnv1a_hex(std::string_view bytes) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a(bytes)));
    return buf;
}

inline void write_int_list(std::ostream& os, const std::vector<int>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) os << ',';
        os << v[i];
    }
}

inline std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    if (s.empty()) return out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = s.find(',', start);
        const std::string tok =
            s.substr(start, pos == std::string::npos ? std::string::npos
                                                     : pos - start);
        int v = 0;
        auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (ec != std::errc() || p != tok.data() + tok.size())
            throw CheckpointError(CheckpointError::Kind::Malformed,
                                  "bad integer list entry '" + tok + "'");
        out.push_back(v);
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return out;
}

inline void write_layer(std::ostream& os, const Layer& l) {
    switch (l.spec.kind) {
        case LayerKind::ActNorm:
            os << "layer actnorm " << l.spec.dim << '\n';
            break;
        case LayerKind::InvertibleLinear:
            os << "layer linear " << l.spec.dim << " perm=";
            write_int_list(os, l.perm);
            os << '\n';
            break;
        case LayerKind::AffineCoupling:
            os << "layer coupling " << l.spec.dim << " parity="
               << l.spec.mask_parity << " hidden=";
            write_int_list(os, l.spec.hidden);
            os << '\n';
            break;
    }
}

inline void write_stack(std::ostream& os, const FlowStack& f,
                        const std::string& count_key) {
    os << count_key << ' ' << f.layers().size() << '\n';
    for (const Layer& l : f.layers()) write_layer(os, l);
}

// Sequential line reader that distinguishes "ran out of lines" from
// "line does not parse".
class LineReader {
public:
    explicit LineReader(std::string_view body) : body_(body) {}

    std::string next() {
        if (pos_ >= body_.size())
            throw CheckpointError(CheckpointError::Kind::Truncated,
                                  "truncated checkpoint: expected more lines");
        const std::size_t nl = body_.find('\n', pos_);
        std::string line(body_.substr(
            pos_, nl == std::string_view::npos ? std::string_view::npos
                                               : nl - pos_));
        pos_ = nl == std::string_view::npos ? body_.size() : nl + 1;
        return line;
    }

    bool done() const { return pos_ >= body_.size(); }

private:
    std::string_view body_;
    std::size_t pos_ = 0;
};

inline std::string expect_key(LineReader& r, const std::string& key) {
    const std::string line = r.next();
    if (line.rfind(key + " ", 0) != 0)
        throw CheckpointError(CheckpointError::Kind::Malformed,
                              "expected '" + key + " ...', got '" + line + "'");
    return line.substr(key.size() + 1);
}

inline long parse_long(const std::string& s, const char* what) {
    long v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw CheckpointError(CheckpointError::Kind::Malformed,
                              std::string("bad ") + what + " '" + s + "'");
    return v;
}

inline double parse_param(const std::string& s) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw CheckpointError(CheckpointError::Kind::Malformed,
                              "bad parameter value '" + s + "'");
    return v;
}

inline FlowStack read_stack(LineReader& r, const std::string& count_key,
                            int dim) {
    const long k = parse_long(expect_key(r, count_key), "layer count");
    if (k == 0) return FlowStack(dim);
    std::vector<LayerSpec> specs;
    std::vector<std::vector<int>> perms;
    for (long i = 0; i < k; ++i) {
        std::istringstream ls(r.next());
        std::string word, kind;
        ls >> word >> kind;
        if (word != "layer")
            throw CheckpointError(CheckpointError::Kind::Malformed,
                                  "expected a layer line, got '" + word + "'");
        int ldim = 0;
        ls >> ldim;
        if (kind == "actnorm") {
            specs.push_back(LayerSpec::actnorm(ldim));
            perms.emplace_back();
        } else if (kind == "linear") {
            std::string rest;
            ls >> rest;
            if (rest.rfind("perm=", 0) != 0)
                throw CheckpointError(CheckpointError::Kind::Malformed,
                                      "linear layer missing perm=");
            specs.push_back(LayerSpec::invertible_linear(ldim));
            perms.push_back(parse_int_list(rest.substr(5)));
        } else if (kind == "coupling") {
            std::string ptok, htok;
            ls >> ptok >> htok;
            if (ptok.rfind("parity=", 0) != 0 || htok.rfind("hidden=", 0) != 0)
                throw CheckpointError(
                    CheckpointError::Kind::Malformed,
                    "coupling layer needs parity= and hidden=");
            const int parity =
                static_cast<int>(parse_long(ptok.substr(7), "parity"));
            specs.push_back(LayerSpec::affine_coupling(
                ldim, parse_int_list(htok.substr(7)), parity));
            perms.emplace_back();
        } else {
            throw CheckpointError(CheckpointError::Kind::Malformed,
                                  "unknown layer kind '" + kind + "'");
        }
    }
    FlowStack f(specs, 0);
    for (std::size_t i = 0; i < perms.size(); ++i)
        if (!perms[i].empty()) f.set_permutation(i, perms[i]);
    return f;
}

}  // namespace detail

inline std::string serialize_checkpoint(const FlowModel& m,
                                        const std::vector<std::string>& echo =
                                            {},
                                        const OptimState* opt = nullptr) {
    m.validate();
    std::ostringstream os;
    os << detail::kCkptMagic << '\n';
    os << "ambient_dim " << m.split.ambient_dim << '\n';
    os << "manifold_dim " << m.split.manifold_dim << '\n';
    os << "variant " << (m.h ? "two_block" : "single_block") << '\n';
    detail::write_stack(os, m.f, "f_layers");
    os << "h_present " << (m.h ? 1 : 0) << '\n';
    if (m.h) {
        os << "h_dim " << m.h->dim() << '\n';
        detail::write_stack(os, *m.h, "h_layers");
    }
    const std::size_t nf = m.f.param_count();
    const std::size_t nh = m.h ? m.h->param_count() : 0;
    os << "params " << (nf + nh) << '\n';
    for (double v : m.f.params()) os << format_double(v) << '\n';
    if (m.h)
        for (double v : m.h->params()) os << format_double(v) << '\n';
    if (opt && !opt->m.empty()) {
        os << "optstate " << opt->m.size() << ' ' << opt->step << '\n';
        for (double v : opt->m) os << format_double(v) << '\n';
        for (double v : opt->v) os << format_double(v) << '\n';
    } else {
        os << "optstate 0\n";
    }
    os << "config " << echo.size() << '\n';
    for (const std::string& line : echo) os << line << '\n';
    std::string body = os.str();
    body += "checksum " + detail::fnv1a_hex(body) + "\n";
    return body;
}

inline Checkpoint parse_checkpoint(std::string_view content) {
    using Kind = CheckpointError::Kind;
    if (content.empty())
        throw CheckpointError(Kind::Truncated, "checkpoint file is empty");

    // split off and verify the trailing checksum line first
    std::string_view trimmed = content;
    if (trimmed.back() == '\n') trimmed.remove_suffix(1);
    const std::size_t last_nl = trimmed.rfind('\n');
    const std::string_view last_line =
        last_nl == std::string_view::npos ? trimmed
                                          : trimmed.substr(last_nl + 1);
    // the version line is diagnosed before anything else so an old format
    // is reported as such rather than as a bad checksum
    const std::size_t first_nl = content.find('\n');
    const std::string_view first_line = content.substr(
        0, first_nl == std::string_view::npos ? content.size() : first_nl);
    if (first_line != detail::kCkptMagic)
        throw CheckpointError(Kind::Version,
                              "unsupported checkpoint version: '" +
                                  std::string(first_line) + "', expected '" +
                                  detail::kCkptMagic + "'");
    if (last_line.rfind("checksum ", 0) != 0)
        throw CheckpointError(Kind::Truncated,
                              "truncated checkpoint: no checksum line");
    const std::string_view stored = last_line.substr(9);
    const std::string_view body =
        content.substr(0, last_nl == std::string_view::npos ? 0 : last_nl + 1);
    if (detail::fnv1a_hex(body) != stored)
        throw CheckpointError(Kind::Checksum,
                              "checksum mismatch: stored " +
                                  std::string(stored) + ", computed " +
                                  detail::fnv1a_hex(body));

    detail::LineReader r(body);
    r.next();  // magic, already validated
    Checkpoint out;
    const long D = detail::parse_long(detail::expect_key(r, "ambient_dim"),
                                      "ambient_dim");
    const long d = detail::parse_long(detail::expect_key(r, "manifold_dim"),
                                      "manifold_dim");
    const std::string variant = detail::expect_key(r, "variant");
    if (variant != "single_block" && variant != "two_block")
        throw CheckpointError(Kind::Malformed,
                              "unknown variant '" + variant + "'");
    out.model.split = LatentSplit{static_cast<int>(D), static_cast<int>(d)};
    out.model.f = detail::read_stack(r, "f_layers", static_cast<int>(D));
    const long h_present =
        detail::parse_long(detail::expect_key(r, "h_present"), "h_present");
    if ((h_present != 0) != (variant == "two_block"))
        throw CheckpointError(Kind::Malformed,
                              "variant and h_present disagree");
    if (h_present) {
        const long hd =
            detail::parse_long(detail::expect_key(r, "h_dim"), "h_dim");
        out.model.h =
            detail::read_stack(r, "h_layers", static_cast<int>(hd));
    }
    const long n_params =
        detail::parse_long(detail::expect_key(r, "params"), "param count");
    const std::size_t nf = out.model.f.param_count();
    const std::size_t nh = out.model.h ? out.model.h->param_count() : 0;
    if (static_cast<std::size_t>(n_params) != nf + nh)
        throw CheckpointError(
            Kind::Malformed,
            "param count " + std::to_string(n_params) +
                " does not match topology (" + std::to_string(nf + nh) + ")");
    for (std::size_t i = 0; i < nf; ++i)
        out.model.f.params()[i] = detail::parse_param(r.next());
    for (std::size_t i = 0; i < nh; ++i)
        out.model.h->params()[i] = detail::parse_param(r.next());

    const std::string opt_head = detail::expect_key(r, "optstate");
    std::istringstream oh(opt_head);
    long n_opt = 0;
    oh >> n_opt;
    if (n_opt > 0) {
        OptimState st;
        unsigned long long step = 0;
        oh >> step;
        st.step = step;
        st.m.resize(n_opt);
        st.v.resize(n_opt);
        for (long i = 0; i < n_opt; ++i) st.m[i] = detail::parse_param(r.next());
        for (long i = 0; i < n_opt; ++i) st.v[i] = detail::parse_param(r.next());
        out.opt = std::move(st);
    }
    const long n_echo =
        detail::parse_long(detail::expect_key(r, "config"), "config count");
    for (long i = 0; i < n_echo; ++i) out.config_echo.push_back(r.next());
    out.model.validate();
    return out;
}

inline void save_checkpoint(const FlowModel& m, const std::string& path,
                            const std::vector<std::string>& echo = {},
                            const OptimState* opt = nullptr) {
    const std::string bytes = serialize_checkpoint(m, echo, opt);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write '" + tmp + "'");
        out << bytes;
        if (!out) throw std::runtime_error("write failed for '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_checkpoint(ss.str());
}

}  // namespace mflow
