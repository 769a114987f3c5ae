#pragma once

#include "gpdssm/common.hpp"

#include <Eigen/Core>

#include <vector>

namespace gpdssm {

struct GpClassifierConfig {
    double variance = 1.0;      // initial signal variance
    double lengthscale = 0.0;   // <= 0: median pairwise distance of the inputs
    int hyper_iters = 50;       // marginal-likelihood ascent steps (0 keeps the initial values)
    double hyper_lr = 0.05;
    int newton_iters = 100;
    double newton_tol = 1e-9;
};

/// Binary GP classifier with a logistic likelihood and a Laplace posterior.
/// Labels are 0 (control) / 1 (dysplastic).
class GpClassifier {
public:
    static GpClassifier fit(const Eigen::MatrixXd& x, const std::vector<int>& labels,
                            const GpClassifierConfig& cfg = {});

    /// Probit-approximated predictive probability of label 1.
    double predict_proba(const Eigen::VectorXd& z) const;
    Eigen::VectorXd predict_batch(const Eigen::MatrixXd& z) const;  // one query per row

    double variance() const noexcept { return variance_; }
    double lengthscale() const noexcept { return lengthscale_; }
    double log_marginal() const noexcept { return log_marginal_; }
    const Eigen::VectorXd& mode() const noexcept { return f_; }

private:
    Eigen::MatrixXd x_;
    Eigen::VectorXd t_;       // labels as 0/1
    Eigen::VectorXd f_;       // Laplace mode
    Eigen::VectorXd grad_;    // t - pi at the mode
    Eigen::VectorXd sqrt_w_;
    Eigen::MatrixXd chol_;    // chol(I + W^1/2 K W^1/2)
    double variance_ = 1.0;
    double lengthscale_ = 1.0;
    double log_marginal_ = 0.0;
};

/// Laplace approximation of log p(labels | x) for a GP classifier with the
/// given kernel; `grad` receives d/d(log variance, log lengthscale).
double laplace_evidence(const Eigen::MatrixXd& x, const std::vector<int>& labels, double variance, double lengthscale,
                        Eigen::Vector2d* grad = nullptr, int newton_iters = 100, double newton_tol = 1e-9);

/// Squared-exponential kernel variance * exp(-|a-b|^2 / (2 l^2)).
Eigen::MatrixXd se_kernel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double variance, double lengthscale);

struct AngleRecord {
    double lcea = 0.0;  // degrees
    double ai = 0.0;    // degrees

    void validate() const;     // throws on non-finite values
    bool plausible() const;    // lcea in (-30, 80) and ai in (-20, 60)
};

enum class AngleClass { Control, Borderline, Dysplastic };

const char* to_string(AngleClass c);

/// Dysplastic if LCEA < 20 or AI > 15; control if LCEA > 25 and AI <= 15;
/// borderline otherwise.
AngleClass angle_rule(const AngleRecord& r);

/// Logistic regression on standardised (LCEA, AI) fitted by Newton's method.
struct AngleScore {
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    Eigen::Vector2d scale = Eigen::Vector2d::Ones();
    Eigen::Vector3d coef = Eigen::Vector3d::Zero();  // intercept, lcea, ai (standardised)
    bool regularized = false;  // perfect separation triggered the L2 fallback

    double predict_proba(const AngleRecord& r) const;
};

AngleScore fit_angle_score(const std::vector<AngleRecord>& records, const std::vector<int>& labels);

}  // namespace gpdssm
