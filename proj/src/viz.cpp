#include "gpdssm/viz.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace gpdssm {

namespace {

Eigen::VectorXd flatten_points(const Points& p) {
    Eigen::VectorXd v(p.size());
    for (long i = 0; i < p.rows(); ++i) v.segment<3>(3 * i) = p.row(i).transpose();
    return v;
}

Points unflatten_points(const Eigen::VectorXd& v) {
    Points p(v.size() / 3, 3);
    for (long i = 0; i < p.rows(); ++i) p.row(i) = v.segment<3>(3 * i).transpose();
    return p;
}

void check_labels01(const std::vector<int>& labels, std::size_t n) {
    if (labels.size() != n) throw ValidationError("one label per subject required");
    for (int l : labels)
        if (l != 0 && l != 1) throw ValidationError("labels must be 0 or 1");
}

}  // namespace

ClassAverage class_average(const std::vector<Points>& sets, const std::vector<int>& labels) {
    check_labels01(labels, sets.size());
    if (sets.empty()) throw ValidationError("no point sets");
    const long n = sets[0].rows();
    Points sum[2] = {Points::Zero(n, 3), Points::Zero(n, 3)};
    double count[2] = {0, 0};
    for (std::size_t i = 0; i < sets.size(); ++i) {
        if (sets[i].rows() != n) throw ValidationError("point sets must have the same cardinality");
        sum[labels[i]] += sets[i];
        count[labels[i]] += 1;
    }
    if (count[0] == 0 || count[1] == 0) throw ValidationError("class average needs members in both classes");
    return {sum[0] / count[0], sum[1] / count[1]};
}

Eigen::VectorXd bh_adjust(const Eigen::VectorXd& p) {
    const long m = p.size();
    std::vector<long> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](long a, long b) { return p[a] < p[b]; });
    Eigen::VectorXd adj(m);
    double running = 1.0;
    for (long r = m - 1; r >= 0; --r) {
        running = std::min(running, p[order[r]] * static_cast<double>(m) / static_cast<double>(r + 1));
        adj[order[r]] = std::clamp(running, p[order[r]], 1.0);
    }
    return adj;
}

VertexStatMap permutation_map(const Eigen::MatrixXd& values, const std::vector<int>& labels, int n_perm,
                              std::uint64_t seed, double alpha) {
    check_labels01(labels, static_cast<std::size_t>(values.rows()));
    const long n1 = std::count(labels.begin(), labels.end(), 1);
    const long n0 = values.rows() - n1;
    if (n0 < 2 || n1 < 2) throw ValidationError("permutation test needs at least two subjects per group");
    if (n_perm < 1) throw ValidationError("n_perm must be positive");
    if (!(alpha > 0 && alpha < 1)) throw ValidationError("alpha must lie in (0, 1)");

    auto stat = [&](const std::vector<int>& l) {
        Eigen::VectorXd m0 = Eigen::VectorXd::Zero(values.cols()), m1 = m0;
        for (long i = 0; i < values.rows(); ++i) (l[i] ? m1 : m0) += values.row(i).transpose();
        return Eigen::VectorXd((m1 / static_cast<double>(n1) - m0 / static_cast<double>(n0)).cwiseAbs());
    };
    VertexStatMap out;
    out.alpha = alpha;
    out.statistic = stat(labels);
    // count per permutation, then reduce in order
    std::vector<Eigen::VectorXi> exceed(n_perm);
    parallel_for(n_perm, [&](long b) {
        std::mt19937_64 rng = make_rng(seed, static_cast<std::uint64_t>(b));
        std::vector<int> l = labels;
        std::shuffle(l.begin(), l.end(), rng);
        exceed[b] = (stat(l).array() >= out.statistic.array()).cast<int>();
    });
    Eigen::VectorXi total = Eigen::VectorXi::Zero(values.cols());
    for (const auto& e : exceed) total += e;
    out.p_raw = (total.cast<double>().array() + 1.0) / (n_perm + 1.0);
    out.p_adjusted = bh_adjust(out.p_raw);
    for (long v = 0; v < out.p_adjusted.size(); ++v) out.significant.push_back(out.p_adjusted[v] <= alpha);
    return out;
}

Eigen::MatrixXd displacement_magnitudes(const GpdssmState& s, const Eigen::MatrixXd& latents) {
    const Points& ref = s.tpl.mesh.vertices();
    Eigen::MatrixXd out(latents.rows(), ref.rows());
    parallel_for(latents.rows(), [&](long i) {
        const TriMesh r = reconstruct(s, latents.row(i).transpose());
        out.row(i) = (r.vertices() - ref).rowwise().norm().transpose();
    });
    return out;
}

ResidualModes dysplastic_mode_pca(const GpdssmState& s, const Eigen::MatrixXd& latents, const std::vector<int>& labels,
                                  int n_modes) {
    check_labels01(labels, static_cast<std::size_t>(latents.rows()));
    if (n_modes < 1) throw ValidationError("n_modes must be positive");
    std::vector<long> ctrl, dys;
    for (long i = 0; i < latents.rows(); ++i) (labels[i] ? dys : ctrl).push_back(i);
    if (ctrl.empty() || dys.empty()) throw ValidationError("residual modes need both classes");

    ResidualModes out;
    for (long c : ctrl) {
        long best = dys[0];
        for (long d : dys)
            if ((latents.row(d) - latents.row(c)).squaredNorm() < (latents.row(best) - latents.row(c)).squaredNorm())
                best = d;
        out.pairs.emplace_back(c, best);
    }
    const long dim = 3 * s.tpl.mesh.num_vertices();
    Eigen::MatrixXd resid(static_cast<long>(out.pairs.size()), dim);
    parallel_for(resid.rows(), [&](long i) {
        const auto [c, d] = out.pairs[i];
        const TriMesh rc = reconstruct(s, latents.row(c).transpose());
        const TriMesh rd = reconstruct(s, latents.row(d).transpose());
        resid.row(i) = flatten_points(rd.vertices() - rc.vertices()).transpose();
    });

    Eigen::BDCSVD<Eigen::MatrixXd> svd(resid, Eigen::ComputeThinV);
    const long r = std::min<long>(n_modes, svd.singularValues().size());
    out.modes = svd.matrixV().leftCols(r);
    out.variances = svd.singularValues().head(r).array().square() / static_cast<double>(resid.rows());
    for (long j = 0; j < r; ++j) {
        Eigen::Index at;
        out.modes.col(j).cwiseAbs().maxCoeff(&at);
        if (out.modes(at, j) < 0) out.modes.col(j) *= -1.0;
    }

    const Points& ref = s.tpl.mesh.vertices();
    const Points shift = unflatten_points(std::sqrt(out.variances[0]) * out.modes.col(0));
    out.minus = s.tpl.mesh.with_vertices(ref - 2.0 * shift);
    out.plus = s.tpl.mesh.with_vertices(ref + 2.0 * shift);
    out.heat = s.tpl.mesh.with_scalar(shift.rowwise().norm());
    return out;
}

std::string roc_svg(const std::vector<std::pair<std::string, EvalReport>>& curves) {
    static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
    const double size = 400, pad = 50;
    auto px = [&](double f) { return pad + f * size; };
    auto py = [&](double t) { return pad + (1.0 - t) * size; };
    std::ostringstream o;
    o << std::fixed << std::setprecision(2);
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * pad + 160 << "\" height=\""
      << size + 2 * pad << "\">\n";
    o << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << size << "\" height=\"" << size
      << "\" fill=\"none\" stroke=\"black\"/>\n";
    o << "<path d=\"M" << px(0) << " " << py(0) << " L" << px(1) << " " << py(1)
      << "\" stroke=\"gray\" stroke-dasharray=\"4 4\" fill=\"none\"/>\n";
    o << "<text x=\"" << pad + size / 2 << "\" y=\"" << size + pad + 35
      << "\" text-anchor=\"middle\" font-size=\"14\">False positive rate</text>\n";
    o << "<text x=\"15\" y=\"" << pad + size / 2 << "\" transform=\"rotate(-90 15 " << pad + size / 2
      << ")\" text-anchor=\"middle\" font-size=\"14\">True positive rate</text>\n";
    for (std::size_t c = 0; c < curves.size(); ++c) {
        const auto& [name, rep] = curves[c];
        const char* col = colours[c % 5];
        o << "<path d=\"";
        for (std::size_t i = 0; i < rep.roc.size(); ++i)
            o << (i ? " L" : "M") << px(rep.roc[i].fpr) << " " << py(rep.roc[i].tpr);
        o << "\" stroke=\"" << col << "\" stroke-width=\"2\" fill=\"none\"/>\n";
        o << "<text x=\"" << size + pad + 10 << "\" y=\"" << pad + 20 + 20 * c << "\" fill=\"" << col
          << "\" font-size=\"13\">" << name << " (AUC " << std::setprecision(3) << rep.auc << std::setprecision(2)
          << ")</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

}  // namespace gpdssm
