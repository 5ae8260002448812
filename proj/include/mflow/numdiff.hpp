#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace mflow {

// Central-difference gradient of a scalar function.  Deliberately
// independent of the tape machinery so it can serve as an oracle for it.
inline std::vector<double> finite_diff_grad(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> theta, double h = 1e-5) {
    std::vector<double> point(theta.begin(), theta.end());
    std::vector<double> grad(theta.size());
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double saved = point[i];
        point[i] = saved + h;
        const double fp = f(point);
        point[i] = saved - h;
        const double fm = f(point);
        point[i] = saved;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

// Dense row-major matrix, just enough for Jacobians and determinants.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

    double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const {
        return a[i * cols + j];
    }
};

// Central-difference Jacobian: row i is the gradient of output i.
inline Matrix numerical_jacobian(
    const std::function<std::vector<double>(std::span<const double>)>& g,
    std::span<const double> x, double h = 1e-5) {
    std::vector<double> point(x.begin(), x.end());
    Matrix jac;
    for (std::size_t j = 0; j < point.size(); ++j) {
        const double saved = point[j];
        point[j] = saved + h;
        const std::vector<double> gp = g(point);
        point[j] = saved - h;
        const std::vector<double> gm = g(point);
        point[j] = saved;
        if (jac.rows == 0) jac = Matrix(gp.size(), point.size());
        if (gp.size() != jac.rows || gm.size() != jac.rows)
            throw std::invalid_argument(
                "numerical_jacobian: output dimension changed under probe");
        for (std::size_t i = 0; i < jac.rows; ++i)
            jac(i, j) = (gp[i] - gm[i]) / (2.0 * h);
    }
    return jac;
}

// log |det A| by LU with partial pivoting.  Oracle for analytic log-dets.
inline double log_abs_det(Matrix m) {
    if (m.rows != m.cols)
        throw std::invalid_argument("log_abs_det: matrix not square");
    const std::size_t n = m.rows;
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t piv = k;
        for (std::size_t i = k + 1; i < n; ++i)
            if (std::abs(m(i, k)) > std::abs(m(piv, k))) piv = i;
        if (piv != k)
            for (std::size_t j = 0; j < n; ++j)
                std::swap(m(k, j), m(piv, j));
        const double d = m(k, k);
        if (d == 0.0)
            throw std::domain_error("log_abs_det: singular matrix");
        acc += std::log(std::abs(d));
        for (std::size_t i = k + 1; i < n; ++i) {
            const double f = m(i, k) / d;
            for (std::size_t j = k + 1; j < n; ++j) m(i, j) -= f * m(k, j);
        }
    }
    return acc;
}

// Relative error with an absolute floor, the comparison used throughout the
// test suite when checking derivatives against these oracles.
inline double rel_err(double got, double want) {
    return std::abs(got - want) /
           std::max({1.0, std::abs(got), std::abs(want)});
}

}  // namespace mflow
