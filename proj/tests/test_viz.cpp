#include "gpdssm/viz.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace gpdssm;

TEST(ClassAverageTest, SingletonsAndSymmetry) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g(0, 1);
    Points base(6, 3), d(6, 3), other(6, 3);
    for (long i = 0; i < base.size(); ++i) {
        base.data()[i] = g(rng);
        d.data()[i] = g(rng);
        other.data()[i] = g(rng);
    }
    const ClassAverage a = class_average({base + d, other, base - d}, {0, 1, 0});
    EXPECT_LT((a.control - base).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(a.dysplastic, other);
    EXPECT_THROW(class_average({base, other}, {0, 0}), ValidationError);
    EXPECT_THROW(class_average({base, Points::Zero(5, 3)}, {0, 1}), ValidationError);
}

TEST(BhAdjust, StepUpByHand) {
    Eigen::VectorXd p(4);
    p << 0.01, 0.02, 0.03, 0.04;
    const Eigen::VectorXd a = bh_adjust(p);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(a[i], 0.04, 1e-15);

    Eigen::VectorXd q(5);
    q << 0.04, 0.001, 0.5, 0.03, 0.2;  // sorted: .001 .03 .04 .2 .5; p m / rank: .005 .075 .0667 .25 .5
    const Eigen::VectorXd b = bh_adjust(q);
    EXPECT_NEAR(b[1], 0.005, 1e-15);
    EXPECT_NEAR(b[3], 0.2 / 3, 1e-15);
    EXPECT_NEAR(b[0], 0.2 / 3, 1e-15);
    EXPECT_NEAR(b[4], 0.25, 1e-15);
    EXPECT_NEAR(b[2], 0.5, 1e-15);
}

TEST(BhAdjust, MonotoneAndAboveRaw) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0, 1);
    for (int t = 0; t < 50; ++t) {
        Eigen::VectorXd p(30);
        for (auto& v : p) v = std::pow(u(rng), 3);
        const Eigen::VectorXd a = bh_adjust(p);
        std::vector<int> order(30);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int x, int y) { return p[x] < p[y]; });
        for (int i = 0; i < 30; ++i) {
            EXPECT_GE(a[i], p[i]);
            EXPECT_LE(a[i], 1.0);
            if (i) EXPECT_GE(a[order[i]], a[order[i - 1]]);
        }
    }
}

TEST(PermutationMap, NullCalibration) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g(1.0, 0.3);
    double mean_p = 0;
    long count = 0;
    for (int rep = 0; rep < 20; ++rep) {
        Eigen::MatrixXd v(12, 40);
        for (long i = 0; i < v.size(); ++i) v.data()[i] = g(rng);
        std::vector<int> labels;
        for (int i = 0; i < 12; ++i) labels.push_back(i % 2);
        const VertexStatMap m = permutation_map(v, labels, 999, rep, 0.05);
        for (long k = 0; k < m.p_raw.size(); ++k) {
            EXPECT_FALSE(m.significant[k]) << rep << " " << k;
            EXPECT_GE(m.p_raw[k], 1.0 / 1000.0);
            EXPECT_LE(m.p_raw[k], 1.0);
            EXPECT_GE(m.p_adjusted[k], m.p_raw[k]);
            mean_p += m.p_raw[k];
            ++count;
        }
    }
    EXPECT_NEAR(mean_p / count, 0.5, 0.05);
}

TEST(PermutationMap, DetectsShiftAndIsLabelSymmetric) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> g(0, 0.2);
    Eigen::MatrixXd v(16, 10);
    std::vector<int> labels, swapped;
    for (int i = 0; i < 16; ++i) {
        labels.push_back(i % 2);
        swapped.push_back(1 - i % 2);
        for (int k = 0; k < 10; ++k) v(i, k) = g(rng) + (k < 3 && i % 2 ? 1.0 : 0.0);
    }
    const VertexStatMap a = permutation_map(v, labels, 999, 1);
    const VertexStatMap b = permutation_map(v, swapped, 999, 1);
    for (int k = 0; k < 3; ++k) EXPECT_TRUE(a.significant[k]);
    EXPECT_LT((a.statistic - b.statistic).cwiseAbs().maxCoeff(), 1e-12);
    set_thread_count(1);
    const VertexStatMap c = permutation_map(v, labels, 999, 1);
    set_thread_count(0);
    EXPECT_EQ(a.p_raw, c.p_raw);
    EXPECT_THROW(permutation_map(v.topRows(3), {0, 1, 1}, 99), ValidationError);
}

TEST(RocSvg, ContainsOnePathPerCurve) {
    const EvalReport r = roc_auc({0.9, 0.2, 0.8, 0.3}, {1, 1, 0, 0});
    const std::string svg = roc_svg({{"a", r}, {"b", r}});
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    std::size_t paths = 0;
    for (std::size_t at = svg.find("<path"); at != std::string::npos; at = svg.find("<path", at + 1)) ++paths;
    EXPECT_EQ(paths, 3u);  // diagonal plus two curves
    EXPECT_NE(svg.find("AUC 0.500"), std::string::npos);
}

namespace {

struct Trained {
    std::vector<TriMesh> meshes;
    std::vector<int> labels;
    GpdssmState state;
    Eigen::MatrixXd latents;
};

const Trained& trained() {
    static const Trained t = [] {
        Trained r;
        std::mt19937_64 rng(21);
        for (int i = 0; i < 16; ++i) {
            const bool shallow = i % 2 == 1;
            CupParams p = sample_cup_params(shallow, rng, 4, 10, 0.05);
            p.radius = 10.0;
            r.meshes.push_back(generate_cup(p));
            r.labels.push_back(shallow ? 1 : 0);
        }
        ModelConfig c;
        c.latent_dim = 3;
        c.n_control = 12;
        c.n_inducing = 8;
        c.time_steps = 5;
        FitConfig fc;
        fc.iters = 250;
        fc.lr = 2e-2;
        r.state = fit(init_state(r.meshes, c, 1), r.meshes, fc).state;
        r.latents.resize(16, 3);
        for (int i = 0; i < 16; ++i) r.latents.row(i) = r.state.latents[i].mean.transpose();
        return r;
    }();
    return t;
}

}  // namespace

TEST(TrainedViz, DysplasticAverageIsShallower) {
    const Trained& t = trained();
    std::vector<Points> sets;
    for (long i = 0; i < t.latents.rows(); ++i) sets.push_back(reconstruct(t.state, t.latents.row(i).transpose()).vertices());
    const ClassAverage a = class_average(sets, t.labels);
    const double depth_c = a.control.col(2).maxCoeff() - a.control.col(2).minCoeff();
    const double depth_d = a.dysplastic.col(2).maxCoeff() - a.dysplastic.col(2).minCoeff();
    EXPECT_LT(depth_d, depth_c);
}

TEST(TrainedViz, ResidualModesConcentrateNearApex) {
    const Trained& t = trained();
    const ResidualModes m = dysplastic_mode_pca(t.state, t.latents, t.labels, 3);
    EXPECT_EQ(m.pairs.size(), 8u);
    const Eigen::MatrixXd gram = m.modes.transpose() * m.modes;
    EXPECT_LT((gram - Eigen::MatrixXd::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff(), 1e-8);
    for (long j = 1; j < m.variances.size(); ++j) EXPECT_LE(m.variances[j], m.variances[j - 1]);

    const Points& v = t.state.tpl.mesh.vertices();
    const double lo = v.col(2).minCoeff(), hi = v.col(2).maxCoeff();
    const Eigen::VectorXd& mag = *m.heat.scalar();
    double top = 0;
    for (long i = 0; i < v.rows(); ++i)
        if (v(i, 2) >= lo + 2.0 * (hi - lo) / 3.0) top += mag[i];
    EXPECT_GE(top / mag.sum(), 0.6);
    EXPECT_EQ(m.plus.num_vertices(), v.rows());
}

TEST(TrainedViz, IdenticalResidualsGiveSingleMode) {
    const Trained& t = trained();
    // two identical controls paired with the same dysplastic latent
    Eigen::MatrixXd z(3, 3);
    z.row(0) = t.latents.row(0);
    z.row(1) = t.latents.row(1);
    z.row(2) = t.latents.row(0);
    const ResidualModes m = dysplastic_mode_pca(t.state, z, {0, 1, 0}, 3);
    ASSERT_EQ(m.pairs.size(), 2u);
    const Points r = reconstruct(t.state, z.row(1).transpose()).vertices() -
                     reconstruct(t.state, z.row(0).transpose()).vertices();
    Eigen::VectorXd flat(r.size());
    for (long i = 0; i < r.rows(); ++i) flat.segment<3>(3 * i) = r.row(i).transpose();
    EXPECT_NEAR(m.variances[0], flat.squaredNorm(), 1e-9 * flat.squaredNorm());
    EXPECT_NEAR(std::abs(m.modes.col(0).dot(flat.normalized())), 1.0, 1e-9);
    for (long j = 1; j < m.variances.size(); ++j) EXPECT_LT(m.variances[j], 1e-20 * flat.squaredNorm() + 1e-24);
    EXPECT_THROW(dysplastic_mode_pca(t.state, z, {0, 0, 0}), ValidationError);
}
