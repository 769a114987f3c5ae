#include "gpdssm/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <iostream>
#include <cmath>
#include <limits>
#include <numeric>

namespace gpdssm {

namespace {

void check_binary(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ValidationError("scores and labels differ in length");
    bool pos = false, neg = false;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw ValidationError("labels must be 0 or 1");
        if (!std::isfinite(scores[i])) throw ValidationError("scores must be finite");
        pos = pos || labels[i] == 1;
        neg = neg || labels[i] == 0;
    }
    if (!pos || !neg) throw ValidationError("both classes must be present");
}

bool both_classes(const std::vector<int>& labels) {
    bool pos = false, neg = false;
    for (int l : labels) (l == 1 ? pos : neg) = true;
    return pos && neg;
}

// Resamples indices until both classes appear, at most 10 redraws.
bool resample(std::mt19937_64& rng, const std::vector<int>& labels, std::vector<std::size_t>& idx, long& redraws) {
    const std::size_t n = labels.size();
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<int> l(n);
    for (int attempt = 0; attempt <= 10; ++attempt) {
        if (attempt > 0) ++redraws;
        for (std::size_t i = 0; i < n; ++i) {
            idx[i] = pick(rng);
            l[i] = labels[idx[i]];
        }
        if (both_classes(l)) return true;
    }
    return false;
}

BootstrapResult run_bootstrap(const std::vector<int>& labels, int replicates, std::uint64_t seed,
                              const std::function<double(const std::vector<std::size_t>&)>& stat) {
    if (replicates < 100) throw ValidationError("bootstrap needs at least 100 replicates");
    std::vector<double> vals(replicates, std::numeric_limits<double>::quiet_NaN());
    std::vector<long> redraws(replicates, 0);
    parallel_for(replicates, [&](long b) {
        std::mt19937_64 rng = make_rng(seed, static_cast<std::uint64_t>(b));
        std::vector<std::size_t> idx(labels.size());
        if (resample(rng, labels, idx, redraws[b])) vals[b] = stat(idx);
    });
    BootstrapResult r;
    for (int b = 0; b < replicates; ++b) {
        r.redraws += redraws[b];
        if (std::isnan(vals[b])) {
            ++r.dropped;
        } else {
            r.replicates.push_back(vals[b]);
        }
    }
    if (r.replicates.empty()) throw NumericalError("every bootstrap resample was single-class");
    r.ci = {quantile(r.replicates, 0.025), quantile(r.replicates, 0.975)};
    return r;
}

template <class T>
std::vector<T> gather(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
    std::vector<T> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = v[idx[i]];
    return out;
}

}  // namespace

double auc_rank(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_binary(scores, labels);
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // midranks
    std::vector<double> rank(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
        i = j + 1;
    }
    double n_pos = 0, rank_sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] == 1) {
            n_pos += 1;
            rank_sum += rank[i];
        }
    }
    const double n_neg = static_cast<double>(n) - n_pos;
    return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg);
}

std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_binary(scores, labels);
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double n_pos = 0;
    for (int l : labels) n_pos += l;
    const double n_neg = static_cast<double>(n) - n_pos;
    std::vector<RocPoint> roc{{0.0, 0.0}};
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < n;) {
        const double s = scores[order[i]];
        for (; i < n && scores[order[i]] == s; ++i) (labels[order[i]] == 1 ? tp : fp) += 1;
        roc.push_back({fp / n_neg, tp / n_pos});
    }
    return roc;
}

double trapezoid_auc(const std::vector<RocPoint>& roc) {
    double a = 0;
    for (std::size_t i = 1; i < roc.size(); ++i)
        a += (roc[i].fpr - roc[i - 1].fpr) * 0.5 * (roc[i].tpr + roc[i - 1].tpr);
    return a;
}

ConfusionMetrics confusion_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                                   double threshold) {
    check_binary(scores, labels);
    double tp = 0, fn = 0, tn = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool predicted = scores[i] >= threshold;
        if (labels[i] == 1) {
            (predicted ? tp : fn) += 1;
        } else {
            (predicted ? fp : tn) += 1;
        }
    }
    return {(tp + tn) / static_cast<double>(scores.size()), tp / (tp + fn), tn / (tn + fp)};
}

EvalReport roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    EvalReport r;
    r.roc = roc_curve(scores, labels);
    r.auc = auc_rank(scores, labels);
    const ConfusionMetrics c = confusion_metrics(scores, labels);
    r.accuracy = c.accuracy;
    r.sensitivity = c.sensitivity;
    r.specificity = c.specificity;
    return r;
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["auc"] = auc;
    j["accuracy"] = accuracy;
    j["sensitivity"] = sensitivity;
    j["specificity"] = specificity;
    j["ci"] = nlohmann::ordered_json::object();
    for (const auto& [name, iv] : ci) j["ci"][name] = {iv.lo, iv.hi};
    j["roc"] = nlohmann::ordered_json::array();
    for (const auto& p : roc) j["roc"].push_back({p.fpr, p.tpr});
    return j.dump(2);
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw ValidationError("quantile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

BootstrapResult bootstrap_ci(const std::vector<double>& scores, const std::vector<int>& labels, const MetricFn& metric,
                             int replicates, std::uint64_t seed) {
    check_binary(scores, labels);
    return run_bootstrap(labels, replicates, seed, [&](const std::vector<std::size_t>& idx) {
        return metric(gather(scores, idx), gather(labels, idx));
    });
}

BootstrapResult bootstrap_paired(const std::vector<double>& scores_a, const std::vector<double>& scores_b,
                                 const std::vector<int>& labels, const MetricFn& metric, int replicates,
                                 std::uint64_t seed) {
    check_binary(scores_a, labels);
    check_binary(scores_b, labels);
    return run_bootstrap(labels, replicates, seed, [&](const std::vector<std::size_t>& idx) {
        const std::vector<int> l = gather(labels, idx);
        return metric(gather(scores_a, idx), l) - metric(gather(scores_b, idx), l);
    });
}

LoocvResult loocv_scores(const Eigen::MatrixXd& x, const std::vector<int>& labels, const FitPredictFn& fit_predict) {
    const long n = x.rows();
    if (n < 3) throw ValidationError("LOOCV needs at least 3 examples");
    if (static_cast<long>(labels.size()) != n) throw ValidationError("one label per example required");
    LoocvResult r;
    r.scores.assign(n, std::numeric_limits<double>::quiet_NaN());
    r.folds = n;
    std::vector<char> skipped(n, 0);
    parallel_for(n, [&](long i) {
        Eigen::MatrixXd xt(n - 1, x.cols());
        std::vector<int> lt;
        for (long j = 0, row = 0; j < n; ++j) {
            if (j == i) continue;
            xt.row(row++) = x.row(j);
            lt.push_back(labels[j]);
        }
        if (!both_classes(lt)) {
            skipped[i] = 1;
            return;
        }
        r.scores[i] = fit_predict(xt, lt, x.row(i).transpose());
    });
    for (long i = 0; i < n; ++i) {
        if (skipped[i]) {
            std::cerr << "warning: LOOCV fold " << i << " skipped (single class in the training part)\n";
            r.skipped.push_back(i);
        } else {
            ++r.refits;
        }
    }
    return r;
}

LoocvResult loocv_scores(const Eigen::MatrixXd& x, const std::vector<int>& labels, const GpClassifierConfig& cfg) {
    return loocv_scores(x, labels, [&](const Eigen::MatrixXd& xt, const std::vector<int>& lt, const Eigen::VectorXd& q) {
        return GpClassifier::fit(xt, lt, cfg).predict_proba(q);
    });
}

}  // namespace gpdssm
