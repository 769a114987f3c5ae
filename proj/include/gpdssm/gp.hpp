#pragma once

#include "gpdssm/common.hpp"

#include <Eigen/Core>

namespace gpdssm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Separable kernel over (t, z): variance * exp(-dt^2 / 2 lt^2) * exp(-|dz|^2 / 2 lz^2).
struct GpKernelParams {
    double variance = 1.0;
    double length_t = 0.3;
    double length_z = 1.0;

    void validate() const;
};

/// Inputs are rows (t, z_1..z_k).
double kernel_tz(const Eigen::Ref<const VectorXd>& a, const Eigen::Ref<const VectorXd>& b, const GpKernelParams& p);
MatrixXd gram(const MatrixXd& a, const MatrixXd& b, const GpKernelParams& p);

/// Whitened variational posterior over the inducing outputs: U = L_mm V with
/// V ~ N(q_mean, q_chol q_chol^T) shared across every output column.
struct InducingState {
    MatrixXd locations;  // m x (1 + k)
    MatrixXd q_mean;     // m x D
    MatrixXd q_chol;     // m x m lower triangular

    long m() const noexcept { return locations.rows(); }
    void validate() const;
};

struct GaussianDist {
    VectorXd mean;
    VectorXd sd;

    void validate() const;
};

/// Lower Cholesky factor of k + jitter*I. Jitter starts at 1e-6 * variance and
/// is escalated x10 up to twice. `jitter_used` receives the final jitter.
MatrixXd jittered_cholesky(const MatrixXd& k, double variance, double* jitter_used = nullptr);

/// Reverse-mode Cholesky: given L = chol(K) and dF/dL (lower part used),
/// returns the symmetric dF/dK.
MatrixXd cholesky_backward(const MatrixXd& l, const MatrixXd& l_bar);

struct Conditional {
    MatrixXd mean;     // q x D
    VectorXd var;      // q, marginal variance shared across output columns
    MatrixXd a;        // K_qm L_mm^-T
    MatrixXd l_mm;
    double jitter = 0.0;
    long clamped = 0;  // marginal variances lifted from tiny negative values to 0

    /// Full q x q predictive covariance (shared across columns).
    MatrixXd covariance(const MatrixXd& query, const InducingState& ind, const GpKernelParams& p) const;
};

Conditional conditional_mean_cov(const MatrixXd& query, const InducingState& ind, const GpKernelParams& p);

double kl_gaussian_diag(const GaussianDist& q);
double kl_whitened_inducing(const InducingState& ind);

VectorXd sample_reparam(const GaussianDist& dist, const VectorXd& draws);

}  // namespace gpdssm
