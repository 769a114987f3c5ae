#pragma once

#include "gpdssm/classify.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace gpdssm {

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
};

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

/// Mann-Whitney AUC; tied (positive, negative) pairs count one half.
/// Labels are 0/1 with 1 the positive (dysplastic) class.
double auc_rank(const std::vector<double>& scores, const std::vector<int>& labels);

/// Threshold sweep over the unique scores, from (0, 0) to (1, 1).
std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& labels);

/// Trapezoidal area under a ROC polyline.
double trapezoid_auc(const std::vector<RocPoint>& roc);

struct ConfusionMetrics {
    double accuracy = 0.0;
    double sensitivity = 0.0;  // TP / (TP + FN)
    double specificity = 0.0;  // TN / (TN + FP)
};

/// A score >= threshold predicts the positive class.
ConfusionMetrics confusion_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                                   double threshold = 0.5);

struct EvalReport {
    std::vector<RocPoint> roc;
    double auc = 0.0;
    double accuracy = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
    std::map<std::string, Interval> ci;  // keyed by metric name

    /// {auc, accuracy, sensitivity, specificity, ci: {name: [lo, hi]}, roc: [[fpr, tpr], ...]}
    std::string to_json() const;
};

/// ROC, AUC and the confusion metrics at 0.5. Throws if a class is missing.
EvalReport roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

using MetricFn = std::function<double(const std::vector<double>&, const std::vector<int>&)>;

struct BootstrapResult {
    Interval ci;                      // percentile 2.5% / 97.5%
    std::vector<double> replicates;   // in replicate order, dropped ones excluded
    long redraws = 0;                 // single-class resamples that were redrawn
    long dropped = 0;                 // replicates still degenerate after 10 redraws
};

/// Percentile bootstrap of metric(scores, labels). Replicate b uses the
/// generator make_rng(seed, b), so the result does not depend on threads.
BootstrapResult bootstrap_ci(const std::vector<double>& scores, const std::vector<int>& labels, const MetricFn& metric,
                             int replicates = 2000, std::uint64_t seed = 0);

/// Paired bootstrap of metric(a) - metric(b) with shared resampled indices.
BootstrapResult bootstrap_paired(const std::vector<double>& scores_a, const std::vector<double>& scores_b,
                                 const std::vector<int>& labels, const MetricFn& metric, int replicates = 2000,
                                 std::uint64_t seed = 0);

/// Fits on the training rows and returns the probability for `query`.
using FitPredictFn =
    std::function<double(const Eigen::MatrixXd& x, const std::vector<int>& labels, const Eigen::VectorXd& query)>;

struct LoocvResult {
    std::vector<double> scores;  // NaN for skipped folds
    std::vector<long> skipped;   // folds whose training part had a single class
    long folds = 0;              // one per example
    long refits = 0;             // folds actually fitted
};

/// Leave-one-out held-out scores. Rows of `x` are examples.
LoocvResult loocv_scores(const Eigen::MatrixXd& x, const std::vector<int>& labels, const FitPredictFn& fit_predict);

/// LOOCV with the GP classifier.
LoocvResult loocv_scores(const Eigen::MatrixXd& x, const std::vector<int>& labels, const GpClassifierConfig& cfg = {});

/// Linear-interpolation quantile of unsorted values, q in [0, 1].
double quantile(std::vector<double> values, double q);

}  // namespace gpdssm
