#include "gpdssm/gp.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace gpdssm {

void GpKernelParams::validate() const {
    if (!(variance > 0) || !(length_t > 0) || !(length_z > 0) || !std::isfinite(variance) || !std::isfinite(length_t) ||
        !std::isfinite(length_z)) {
        throw ValidationError("GP kernel parameters must be positive and finite");
    }
}

double kernel_tz(const Eigen::Ref<const VectorXd>& a, const Eigen::Ref<const VectorXd>& b, const GpKernelParams& p) {
    if (a.size() != b.size() || a.size() < 1) throw ValidationError("kernel inputs must share dimension");
    const double dt = a[0] - b[0];
    const double dz2 = (a.tail(a.size() - 1) - b.tail(b.size() - 1)).squaredNorm();
    return p.variance * std::exp(-dt * dt / (2 * p.length_t * p.length_t) - dz2 / (2 * p.length_z * p.length_z));
}

MatrixXd gram(const MatrixXd& a, const MatrixXd& b, const GpKernelParams& p) {
    if (a.cols() != b.cols()) throw ValidationError("gram inputs must share dimension");
    const double it = 1.0 / (2 * p.length_t * p.length_t), iz = 1.0 / (2 * p.length_z * p.length_z);
    const long k = a.cols() - 1;
    MatrixXd g(a.rows(), b.rows());
    for (long i = 0; i < a.rows(); ++i) {
        for (long j = 0; j < b.rows(); ++j) {
            const double dt = a(i, 0) - b(j, 0);
            const double dz2 = (a.row(i).tail(k) - b.row(j).tail(k)).squaredNorm();
            g(i, j) = p.variance * std::exp(-dt * dt * it - dz2 * iz);
        }
    }
    return g;
}

void InducingState::validate() const {
    if (locations.rows() < 1) throw ValidationError("at least one inducing point required");
    if (q_mean.rows() != m() || q_chol.rows() != m() || q_chol.cols() != m()) {
        throw ValidationError("inducing state shapes disagree");
    }
    for (long i = 0; i < m(); ++i) {
        if (!(q_chol(i, i) > 0)) throw ValidationError("inducing Cholesky factor needs a positive diagonal");
    }
}

void GaussianDist::validate() const {
    if (mean.size() != sd.size()) throw ValidationError("Gaussian mean and sd lengths differ");
    if ((sd.array() <= 0).any() || !sd.allFinite() || !mean.allFinite()) {
        throw ValidationError("Gaussian sd must be positive and finite");
    }
}

MatrixXd jittered_cholesky(const MatrixXd& k, double variance, double* jitter_used) {
    double jitter = 1e-6 * variance;
    for (int attempt = 0; attempt < 3; ++attempt, jitter *= 10) {
        MatrixXd kj = k;
        kj.diagonal().array() += jitter;
        Eigen::LLT<MatrixXd> llt(kj);
        if (llt.info() == Eigen::Success) {
            if (jitter_used) *jitter_used = jitter;
            return llt.matrixL();
        }
    }
    throw NumericalError("Cholesky of the inducing kernel matrix failed after jitter escalation to " +
                         std::to_string(jitter / 10));
}

MatrixXd cholesky_backward(const MatrixXd& l, const MatrixXd& l_bar) {
    MatrixXd p = l.transpose() * l_bar.triangularView<Eigen::Lower>().toDenseMatrix();
    // Phi: lower triangle with halved diagonal
    MatrixXd phi = p.triangularView<Eigen::Lower>();
    phi.diagonal() *= 0.5;
    // S = L^-T Phi L^-1
    MatrixXd s = l.transpose().triangularView<Eigen::Upper>().solve(phi);
    s = l.transpose().triangularView<Eigen::Upper>().solve(s.transpose()).transpose();
    return 0.5 * (s + s.transpose());
}

Conditional conditional_mean_cov(const MatrixXd& query, const InducingState& ind, const GpKernelParams& p) {
    p.validate();
    ind.validate();
    if (query.cols() != ind.locations.cols()) throw ValidationError("query and inducing inputs differ in dimension");
    Conditional c;
    c.l_mm = jittered_cholesky(gram(ind.locations, ind.locations, p), p.variance, &c.jitter);
    const MatrixXd kmq = gram(ind.locations, query, p);
    c.a = c.l_mm.triangularView<Eigen::Lower>().solve(kmq).transpose();
    c.mean = c.a * ind.q_mean;
    const MatrixXd as = c.a * ind.q_chol.triangularView<Eigen::Lower>();
    c.var.resize(query.rows());
    for (long i = 0; i < query.rows(); ++i) {
        double v = p.variance - c.a.row(i).squaredNorm() + as.row(i).squaredNorm();
        if (v < 0) {
            if (v < -1e-9 * p.variance) throw NumericalError("negative predictive variance " + std::to_string(v));
            v = 0;
            ++c.clamped;
        }
        c.var[i] = v;
    }
    return c;
}

MatrixXd Conditional::covariance(const MatrixXd& query, const InducingState& ind, const GpKernelParams& p) const {
    const MatrixXd as = a * ind.q_chol.triangularView<Eigen::Lower>();
    return gram(query, query, p) - a * a.transpose() + as * as.transpose();
}

double kl_gaussian_diag(const GaussianDist& q) {
    q.validate();
    return 0.5 * (q.sd.array().square() + q.mean.array().square() - 1.0 - 2.0 * q.sd.array().log()).sum();
}

double kl_whitened_inducing(const InducingState& ind) {
    ind.validate();
    const double d = static_cast<double>(ind.q_mean.cols());
    const MatrixXd l = ind.q_chol.triangularView<Eigen::Lower>();
    const double tr = l.squaredNorm();
    const double logdet = l.diagonal().array().log().sum();
    return 0.5 * ind.q_mean.squaredNorm() + d * 0.5 * (tr - static_cast<double>(ind.m()) - 2.0 * logdet);
}

VectorXd sample_reparam(const GaussianDist& dist, const VectorXd& draws) {
    if (draws.size() != dist.mean.size()) throw ValidationError("draw vector length does not match distribution");
    return dist.mean + dist.sd.cwiseProduct(draws);
}

}  // namespace gpdssm
