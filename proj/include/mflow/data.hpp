#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mflow/rng.hpp"

namespace mflow {

// Row-major point set.  `manifold` names the generating manifold when known
// ("circle", "swiss_roll"); metrics use it to pick the right distance.
struct Dataset {
    std::size_t n = 0;
    int dim = 0;
    std::vector<double> points;
    int manifold_dim = 0;  // 0 when unknown
    std::string manifold;

    std::span<const double> row(std::size_t i) const {
        return {points.data() + i * static_cast<std::size_t>(dim),
                static_cast<std::size_t>(dim)};
    }
};

// Unit circle with isotropic Gaussian noise.  Per point the stream yields
// the angle draw first, then the two noise normals, so sigma = 0 consumes
// the same number of draws and keeps points exactly on the circle.
inline Dataset make_circle(std::size_t n, double sigma, std::uint64_t seed) {
    Dataset ds;
    ds.n = n;
    ds.dim = 2;
    ds.manifold_dim = 1;
    ds.manifold = "circle";
    ds.points.reserve(2 * n);
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const double theta = 2.0 * std::numbers::pi * rng.next_uniform();
        const double n0 = rng.next_normal();
        const double n1 = rng.next_normal();
        ds.points.push_back(std::cos(theta) + sigma * n0);
        ds.points.push_back(std::sin(theta) + sigma * n1);
    }
    return ds;
}

// Gaussian d-manifold embedded in D dimensions through a fixed map
// x = tanh(A u) with A ~ N(0, 1/d) drawn once from the seed, plus noise.
// tanh of an injective linear map keeps the embedding injective.
inline Dataset make_embedded_gaussian(std::size_t n, int d, int D,
                                      double sigma, std::uint64_t seed) {
    if (d < 1 || D <= d)
        throw std::invalid_argument("embedded_gaussian needs 1 <= d < D");
    Dataset ds;
    ds.n = n;
    ds.dim = D;
    ds.manifold_dim = d;
    ds.points.reserve(static_cast<std::size_t>(n) * D);
    Rng rng(seed);
    std::vector<double> A(static_cast<std::size_t>(D) * d);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& a : A) a = scale * rng.next_normal();
    std::vector<double> u(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (double& uj : u) uj = rng.next_normal();
        for (int r = 0; r < D; ++r) {
            double acc = 0.0;
            for (int c = 0; c < d; ++c)
                acc += A[static_cast<std::size_t>(r) * d + c] * u[c];
            ds.points.push_back(std::tanh(acc) + sigma * rng.next_normal());
        }
    }
    return ds;
}

// Classic swiss roll: spiral parameter t in [1.5 pi, 4.5 pi], height in
// [0, 21], plus isotropic noise.
inline Dataset make_swiss_roll(std::size_t n, double sigma,
                               std::uint64_t seed) {
    Dataset ds;
    ds.n = n;
    ds.dim = 3;
    ds.manifold_dim = 2;
    ds.manifold = "swiss_roll";
    ds.points.reserve(3 * n);
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const double t =
            1.5 * std::numbers::pi * (1.0 + 2.0 * rng.next_uniform());
        const double h = 21.0 * rng.next_uniform();
        ds.points.push_back(t * std::cos(t) + sigma * rng.next_normal());
        ds.points.push_back(h + sigma * rng.next_normal());
        ds.points.push_back(t * std::sin(t) + sigma * rng.next_normal());
    }
    return ds;
}

namespace detail {

inline double parse_field(const std::string& field, const std::string& path,
                          std::size_t line, std::size_t col) {
    const char* b = field.data();
    const char* e = b + field.size();
    while (b < e && (*b == ' ' || *b == '\t')) ++b;
    while (e > b && (e[-1] == ' ' || e[-1] == '\t' || e[-1] == '\r')) --e;
    double out = 0.0;
    auto [ptr, ec] = std::from_chars(b, e, out);
    if (ec != std::errc() || ptr != e)
        throw std::runtime_error(path + ":" + std::to_string(line) + ":" +
                                 std::to_string(col) +
                                 ": expected a number, got '" + field + "'");
    return out;
}

}  // namespace detail

inline Dataset load_csv(const std::string& path, char delimiter = ',',
                        bool skip_header = false) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    Dataset ds;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1 && skip_header) continue;
        if (line.empty() || line == "\r") continue;
        std::vector<double> row;
        std::size_t start = 0, col = 1;
        while (true) {
            const std::size_t pos = line.find(delimiter, start);
            const std::string field =
                line.substr(start, pos == std::string::npos ? std::string::npos
                                                            : pos - start);
            row.push_back(detail::parse_field(field, path, lineno, col));
            if (pos == std::string::npos) break;
            start = pos + 1;
            ++col;
        }
        if (ds.dim == 0) {
            ds.dim = static_cast<int>(row.size());
        } else if (static_cast<int>(row.size()) != ds.dim) {
            throw std::runtime_error(
                path + ":" + std::to_string(lineno) + ": row has " +
                std::to_string(row.size()) + " fields, expected " +
                std::to_string(ds.dim));
        }
        ds.points.insert(ds.points.end(), row.begin(), row.end());
        ++ds.n;
    }
    if (ds.n == 0) throw std::runtime_error(path + ": no data rows");
    return ds;
}

// Shortest-round-trip formatting for doubles: 17 significant digits survive
// a parse back to the same bits.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Writes rows to a temp file in the target directory, then renames it over
// the destination, so readers never observe a half-written file.
inline void write_csv(const std::string& path,
                      const std::vector<std::string>& header,
                      std::span<const double> rows, std::size_t n_rows,
                      int n_cols) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw std::runtime_error("cannot write '" + tmp + "'");
        if (!header.empty()) {
            for (std::size_t i = 0; i < header.size(); ++i) {
                if (i) out << ',';
                out << header[i];
            }
            out << '\n';
        }
        for (std::size_t r = 0; r < n_rows; ++r) {
            for (int c = 0; c < n_cols; ++c) {
                if (c) out << ',';
                out << format_double(rows[r * static_cast<std::size_t>(n_cols) + c]);
            }
            out << '\n';
        }
        if (!out) throw std::runtime_error("write failed for '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

// Deterministic 90/10 split keyed on (seed, row index) so it is stable under
// any later shuffling and identical across runs; a row lands in the holdout
// when its hash is 0 mod 10.
inline std::pair<Dataset, Dataset> split_train_heldout(const Dataset& ds,
                                                       std::uint64_t seed) {
    Dataset train, held;
    train.dim = held.dim = ds.dim;
    train.manifold_dim = held.manifold_dim = ds.manifold_dim;
    train.manifold = held.manifold = ds.manifold;
    for (std::size_t i = 0; i < ds.n; ++i) {
        const bool holdout = Rng(seed).split(i).next_u64() % 10 == 0;
        Dataset& dst = holdout ? held : train;
        std::span<const double> r = ds.row(i);
        dst.points.insert(dst.points.end(), r.begin(), r.end());
        ++dst.n;
    }
    return {std::move(train), std::move(held)};
}

}  // namespace mflow
