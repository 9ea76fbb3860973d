#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "cmust/tensor.hpp"

namespace cmust {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

// C[M,N] = A[M,K] * B[K,N], optionally accumulating into C.
inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n, bool accumulate = false) {
    CMapM A(a, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    CMapM B(b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    MapM C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (accumulate)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

// C[M,K] = A[M,N] * B[K,N]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                    std::size_t k, bool accumulate = false) {
    CMapM A(a, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    CMapM B(b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    MapM C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    if (accumulate)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

// C[K,N] = A[M,K]^T * B[M,N]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate = false) {
    CMapM A(a, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    CMapM B(b, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    MapM C(c, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    if (accumulate)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

// Row softmax with max-subtraction. Result rows sum to 1 within 1e-12.
inline void softmax_row(const double* x, double* y, std::size_t n) {
    double mx = x[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - mx);
        sum += y[i];
    }
    for (std::size_t i = 0; i < n; ++i) y[i] /= sum;
}

inline std::vector<double> softmax(const std::vector<double>& logits) {
    if (logits.empty()) throw shape_error("softmax: empty input");
    for (double v : logits)
        if (!std::isfinite(v)) throw numeric_error("softmax: non-finite input");
    std::vector<double> out(logits.size());
    softmax_row(logits.data(), out.data(), logits.size());
    return out;
}

// y = gain * (x - mean) / sqrt(popvar + eps) + bias over one feature row.
inline void layer_norm_row(const double* x, const double* gain, const double* bias, double eps,
                           double* y, std::size_t n) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = x[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) y[i] = gain[i] * (x[i] - mean) * inv + bias[i];
}

inline std::vector<double> layer_norm(const std::vector<double>& x, const std::vector<double>& gain,
                                      const std::vector<double>& bias, double eps = 1e-5) {
    if (gain.size() != x.size() || bias.size() != x.size())
        throw shape_error("layer_norm: gain/bias length must match input");
    if (eps < 0.0) throw numeric_error("layer_norm: eps must be non-negative");
    std::vector<double> out(x.size());
    layer_norm_row(x.data(), gain.data(), bias.data(), eps, out.data(), x.size());
    return out;
}

inline double huber_term(double r, double delta) {
    double a = std::abs(r);
    return a < delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

inline double huber_term_grad(double r, double delta) {
    if (std::abs(r) < delta) return r;
    return r > 0.0 ? delta : -delta;
}

// Mean elementwise Huber loss.
inline double huber_loss(const Tensor& pred, const Tensor& target, double delta) {
    require_same_shape(pred, target, "huber_loss");
    if (delta <= 0.0) throw numeric_error("huber_loss: delta must be positive");
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) sum += huber_term(pred[i] - target[i], delta);
    return sum / static_cast<double>(pred.size());
}

inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace cmust
