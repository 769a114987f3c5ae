#include "gpdssm/classify.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace gpdssm {

namespace {

double logistic(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// log(1 + exp(x)) without overflow
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

void check_labels(const std::vector<int>& labels, long n) {
    if (static_cast<long>(labels.size()) != n) throw ValidationError("one label per example required");
    bool has0 = false, has1 = false;
    for (int l : labels) {
        if (l != 0 && l != 1) throw ValidationError("labels must be 0 or 1");
        has0 = has0 || l == 0;
        has1 = has1 || l == 1;
    }
    if (!has0 || !has1) throw ValidationError("classifier needs examples of both classes");
}

Eigen::MatrixXd sq_dists(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::MatrixXd d(a.rows(), b.rows());
    for (long i = 0; i < a.rows(); ++i)
        for (long j = 0; j < b.rows(); ++j) d(i, j) = (a.row(i) - b.row(j)).squaredNorm();
    return d;
}

struct Laplace {
    Eigen::VectorXd f, a, pi, sqrt_w, grad;
    Eigen::MatrixXd l;
    double log_q = 0.0;
};

// Newton iterations for the posterior mode (logistic likelihood), with step
// halving whenever the objective would decrease.
Laplace find_mode(const Eigen::MatrixXd& k, const Eigen::VectorXd& t, int max_iters, double tol) {
    const long n = k.rows();
    auto psi = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& f) {
        double ll = 0;
        for (long i = 0; i < n; ++i) ll -= softplus(-(2 * t[i] - 1) * f[i]);
        return ll - 0.5 * a.dot(f);
    };
    Laplace s;
    s.f = Eigen::VectorXd::Zero(n);
    s.a = Eigen::VectorXd::Zero(n);
    double obj = psi(s.a, s.f);
    for (int it = 0;; ++it) {
        s.pi = s.f.unaryExpr(&logistic);
        const Eigen::VectorXd w = s.pi.cwiseProduct(Eigen::VectorXd::Ones(n) - s.pi);
        s.sqrt_w = w.cwiseSqrt();
        s.grad = t - s.pi;
        Eigen::MatrixXd b_mat = s.sqrt_w.asDiagonal() * k * s.sqrt_w.asDiagonal();
        b_mat.diagonal().array() += 1.0;
        Eigen::LLT<Eigen::MatrixXd> llt(b_mat);
        s.l = llt.matrixL();
        const double grad_norm = (s.grad - s.a).norm();
        const double root_n = std::sqrt(static_cast<double>(n));
        if (grad_norm < tol * root_n) {
            s.log_q = obj - s.l.diagonal().array().log().sum();
            return s;
        }
        if (it == max_iters) {
            throw NumericalError("Laplace mode search did not converge in " + std::to_string(max_iters) +
                                 " Newton iterations (gradient norm " + std::to_string(grad_norm) + ")");
        }
        const Eigen::VectorXd b = w.cwiseProduct(s.f) + s.grad;
        const Eigen::VectorXd c = llt.matrixL().solve(s.sqrt_w.cwiseProduct(k * b));
        Eigen::VectorXd a = b - s.sqrt_w.cwiseProduct(llt.matrixU().solve(c));
        Eigen::VectorXd f = k * a;
        double next = psi(a, f);
        // a full step whose decrease is at rounding level is kept
        const double noise = 1e-13 * std::max(1.0, std::abs(obj));
        for (int h = 0; h < 30 && !(next >= obj - noise); ++h) {
            a = 0.5 * (a + s.a);
            f = k * a;
            next = psi(a, f);
        }
        if (next >= obj - noise) {
            s.a = std::move(a);
            s.f = std::move(f);
            obj = next;
        }
    }
}

}  // namespace

Eigen::MatrixXd se_kernel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double variance, double lengthscale) {
    return variance * (-sq_dists(a, b) / (2.0 * lengthscale * lengthscale)).array().exp().matrix();
}

double laplace_evidence(const Eigen::MatrixXd& x, const std::vector<int>& labels, double variance,
                        double lengthscale, Eigen::Vector2d* grad, int newton_iters, double newton_tol) {
    const long n = x.rows();
    check_labels(labels, n);
    Eigen::VectorXd t(n);
    for (long i = 0; i < n; ++i) t[i] = labels[i];
    const Eigen::MatrixXd d2 = sq_dists(x, x);
    const Eigen::MatrixXd k = se_kernel(x, x, variance, lengthscale);
    const Laplace s = find_mode(k, t, newton_iters, newton_tol);
    if (!grad) return s.log_q;
    // explicit kernel dependence plus the implicit dependence through the mode
    const Eigen::MatrixXd lw = s.l.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd(s.sqrt_w.asDiagonal()));
    const Eigen::MatrixXd r = lw.transpose() * lw;
    const Eigen::MatrixXd cm = s.l.triangularView<Eigen::Lower>().solve(s.sqrt_w.asDiagonal() * k);
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
    const Eigen::VectorXd third = -s.pi.cwiseProduct(ones - s.pi).cwiseProduct(ones - 2.0 * s.pi);
    const Eigen::VectorXd s2 = 0.5 * (k.diagonal() - cm.colwise().squaredNorm().transpose()).cwiseProduct(third);
    const Eigen::MatrixXd dk[2] = {k, k.cwiseProduct(d2) / (lengthscale * lengthscale)};
    for (int j = 0; j < 2; ++j) {
        const double s1 = 0.5 * s.a.dot(dk[j] * s.a) - 0.5 * r.cwiseProduct(dk[j]).sum();
        const Eigen::VectorXd b = dk[j] * s.grad;
        const Eigen::VectorXd s3 = b - k * (r * b);
        (*grad)[j] = s1 + s2.dot(s3);
    }
    return s.log_q;
}

GpClassifier GpClassifier::fit(const Eigen::MatrixXd& x, const std::vector<int>& labels,
                               const GpClassifierConfig& cfg) {
    const long n = x.rows();
    check_labels(labels, n);
    if (!x.allFinite()) throw ValidationError("classifier inputs must be finite");
    GpClassifier c;
    c.x_ = x;
    c.t_.resize(n);
    for (long i = 0; i < n; ++i) c.t_[i] = labels[i];
    const Eigen::MatrixXd d2 = sq_dists(x, x);

    std::vector<double> pair;
    for (long i = 0; i < n; ++i)
        for (long j = i + 1; j < n; ++j) pair.push_back(std::sqrt(d2(i, j)));
    std::sort(pair.begin(), pair.end());
    double med = pair.empty() ? 1.0 : pair[pair.size() / 2];
    if (!(med > 0)) med = 1.0;
    double log_var = std::log(cfg.variance);
    double log_len = std::log(cfg.lengthscale > 0 ? cfg.lengthscale : med);
    const double lo_len = std::log(1e-2 * med), hi_len = std::log(1e2 * med);
    const double lo_var = std::log(1e-2), hi_var = std::log(1e3);

    // Adam ascent on the Laplace approximation of the log marginal likelihood
    Eigen::Vector2d m = Eigen::Vector2d::Zero(), v = Eigen::Vector2d::Zero();
    for (int it = 0; it < cfg.hyper_iters; ++it) {
        Eigen::Vector2d g;
        laplace_evidence(x, labels, std::exp(log_var), std::exp(log_len), &g, cfg.newton_iters, cfg.newton_tol);
        const double b1 = 0.9, b2 = 0.999;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g.cwiseProduct(g);
        const Eigen::Vector2d step = cfg.hyper_lr * (m / (1 - std::pow(b1, it + 1))).array() /
                                     ((v / (1 - std::pow(b2, it + 1))).array().sqrt() + 1e-8);
        log_var = std::clamp(log_var + step[0], lo_var, hi_var);
        log_len = std::clamp(log_len + step[1], lo_len, hi_len);
    }

    c.variance_ = std::exp(log_var);
    c.lengthscale_ = std::exp(log_len);
    const Laplace s = find_mode(se_kernel(x, x, c.variance_, c.lengthscale_), c.t_, cfg.newton_iters, cfg.newton_tol);
    c.f_ = s.f;
    c.grad_ = s.grad;
    c.sqrt_w_ = s.sqrt_w;
    c.chol_ = s.l;
    c.log_marginal_ = s.log_q;
    return c;
}

double GpClassifier::predict_proba(const Eigen::VectorXd& z) const {
    if (z.size() != x_.cols()) throw ValidationError("query dimension differs from the training inputs");
    const Eigen::MatrixXd zq = z.transpose();
    const Eigen::VectorXd ks = se_kernel(x_, zq, variance_, lengthscale_).col(0);
    const double mean = ks.dot(grad_);
    const Eigen::VectorXd v = chol_.triangularView<Eigen::Lower>().solve(sqrt_w_.cwiseProduct(ks));
    const double var = std::max(variance_ - v.squaredNorm(), 0.0);
    const double kappa = 1.0 / std::sqrt(1.0 + std::numbers::pi * var / 8.0);
    return logistic(kappa * mean);
}

Eigen::VectorXd GpClassifier::predict_batch(const Eigen::MatrixXd& z) const {
    Eigen::VectorXd p(z.rows());
    for (long i = 0; i < z.rows(); ++i) p[i] = predict_proba(Eigen::VectorXd(z.row(i).transpose()));
    return p;
}

// ---------------------------------------------------------------------------
// Angles

void AngleRecord::validate() const {
    if (!std::isfinite(lcea) || !std::isfinite(ai)) throw ValidationError("angles must be finite");
}

bool AngleRecord::plausible() const { return lcea > -30 && lcea < 80 && ai > -20 && ai < 60; }

const char* to_string(AngleClass c) {
    switch (c) {
        case AngleClass::Control: return "control";
        case AngleClass::Borderline: return "borderline";
        case AngleClass::Dysplastic: return "dysplastic";
    }
    return "?";
}

AngleClass angle_rule(const AngleRecord& r) {
    r.validate();
    if (r.lcea < 20.0 || r.ai > 15.0) return AngleClass::Dysplastic;
    if (r.lcea > 25.0) return AngleClass::Control;
    return AngleClass::Borderline;
}

double AngleScore::predict_proba(const AngleRecord& r) const {
    r.validate();
    const double z1 = (r.lcea - mean[0]) / scale[0], z2 = (r.ai - mean[1]) / scale[1];
    return logistic(coef[0] + coef[1] * z1 + coef[2] * z2);
}

namespace {

// Damped Newton for penalised logistic regression; returns false when the
// iterations fail to settle.
bool newton_logistic(const Eigen::MatrixXd& x, const Eigen::VectorXd& t, double lambda, Eigen::Vector3d& w) {
    auto nll = [&](const Eigen::Vector3d& c) {
        const Eigen::VectorXd eta = x * c;
        double v = 0.5 * lambda * c.tail<2>().squaredNorm();
        for (long i = 0; i < eta.size(); ++i) v += softplus(eta[i]) - t[i] * eta[i];
        return v;
    };
    w.setZero();
    double cur = nll(w);
    for (int it = 0; it < 200; ++it) {
        const Eigen::VectorXd p = (x * w).unaryExpr(&logistic);
        const Eigen::VectorXd wt = p.cwiseProduct(Eigen::VectorXd::Ones(p.size()) - p);
        Eigen::Vector3d g = x.transpose() * (p - t);
        Eigen::Matrix3d h = x.transpose() * wt.asDiagonal() * x;
        g.tail<2>() += lambda * w.tail<2>();
        h.diagonal().tail<2>().array() += lambda;
        Eigen::Vector3d step = h.ldlt().solve(g);
        if (!step.allFinite()) return false;
        double next = nll(w - step);
        for (int k = 0; k < 40 && !(next <= cur); ++k) {
            step *= 0.5;
            next = nll(w - step);
        }
        w -= step;
        const double change = cur - next;
        cur = next;
        if (step.norm() < 1e-10 * std::max(1.0, w.norm()) || change < 1e-14 * std::max(1.0, cur)) {
            return w.allFinite() && g.norm() < 1e-6 * std::max<double>(1.0, x.rows());
        }
    }
    return false;
}

}  // namespace

AngleScore fit_angle_score(const std::vector<AngleRecord>& records, const std::vector<int>& labels) {
    const long n = static_cast<long>(records.size());
    check_labels(labels, n);
    AngleScore s;
    Eigen::MatrixXd raw(n, 2);
    for (long i = 0; i < n; ++i) {
        records[i].validate();
        raw(i, 0) = records[i].lcea;
        raw(i, 1) = records[i].ai;
    }
    s.mean = raw.colwise().mean().transpose();
    for (int j = 0; j < 2; ++j) {
        const double sd = std::sqrt((raw.col(j).array() - s.mean[j]).square().sum() / std::max<long>(n - 1, 1));
        s.scale[j] = sd > 0 ? sd : 1.0;
    }
    Eigen::MatrixXd x(n, 3);
    Eigen::VectorXd t(n);
    for (long i = 0; i < n; ++i) {
        x(i, 0) = 1.0;
        x(i, 1) = (raw(i, 0) - s.mean[0]) / s.scale[0];
        x(i, 2) = (raw(i, 1) - s.mean[1]) / s.scale[1];
        t[i] = labels[i];
    }
    Eigen::Vector3d w;
    const bool ok = newton_logistic(x, t, 0.0, w);
    // separated data drive the unpenalised coefficients towards infinity
    const double max_eta = ok ? (x * w).cwiseAbs().maxCoeff() : 0.0;
    if (!ok || max_eta > 30.0) {
        s.regularized = true;
        if (!newton_logistic(x, t, 1e-4, w)) throw NumericalError("regularised angle logistic fit did not converge");
    }
    s.coef = w;
    return s;
}

}  // namespace gpdssm
