#include "gpdssm/model.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace gpdssm;
using gpdssm::testing::rel_err;

namespace {

struct Dataset {
    std::vector<TriMesh> meshes;
    std::vector<int> labels;  // 1 = shallow
};

Dataset cups(int per_class, std::uint64_t seed, int rings = 4, int sectors = 10) {
    std::mt19937_64 rng(seed);
    Dataset d;
    for (int i = 0; i < 2 * per_class; ++i) {
        const bool shallow = i % 2 == 1;
        CupParams p = sample_cup_params(shallow, rng, rings, sectors, 0.05);
        p.radius = 10.0;
        d.meshes.push_back(generate_cup(p));
        d.labels.push_back(shallow ? 1 : 0);
    }
    return d;
}

ModelConfig small_config() {
    ModelConfig c;
    c.latent_dim = 3;
    c.n_control = 12;
    c.n_inducing = 8;
    c.time_steps = 5;
    return c;
}

std::vector<VarifoldTarget> targets_of(const std::vector<TriMesh>& meshes, const GpdssmState& s) {
    std::vector<VarifoldTarget> t;
    for (const auto& m : meshes) t.emplace_back(embed(m), s.fidelity);
    return t;
}

std::vector<long> all_of(std::size_t n) {
    std::vector<long> b(n);
    std::iota(b.begin(), b.end(), 0);
    return b;
}

double smoothed(const std::vector<double>& v, std::size_t from, std::size_t window) {
    double s = 0;
    for (std::size_t i = from; i < from + window; ++i) s += v[i];
    return s / static_cast<double>(window);
}

}  // namespace

TEST(SelectTemplate, SingleMeshAndMidpoint) {
    const Dataset one = cups(1, 1);
    std::vector<TriMesh> single{one.meshes[0]};
    EXPECT_EQ(select_template(single).index, 0);

    CupParams p;
    p.rings = 4;
    p.sectors = 10;
    std::vector<TriMesh> triple;
    for (double d : {0.5, 0.75, 1.0}) {
        p.depth_scale = d;
        triple.push_back(generate_cup(p));
    }
    // middle depth first so the answer is not index 0 by accident
    std::swap(triple[0], triple[1]);
    const VarifoldKernelParams k{0.3 * p.radius};
    const TemplateChoice tc = select_template(triple, k);
    EXPECT_EQ(tc.index, 0);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            const double d = varifold_sq_dist(embed(triple[i]), embed(triple[j]), k);
            EXPECT_NEAR(tc.sq_dist(i, j), d, 1e-9 * std::max(1.0, d));
        }
    }
}

TEST(SelectTemplate, InvariantUnderReordering) {
    Dataset d = cups(3, 2);
    const TemplateChoice a = select_template(d.meshes);
    const TriMesh chosen = a.index >= 0 ? d.meshes[a.index] : TriMesh();
    std::reverse(d.meshes.begin(), d.meshes.end());
    const TemplateChoice b = select_template(d.meshes);
    EXPECT_EQ(d.meshes[b.index].vertices(), chosen.vertices());
}

TEST(ClassicalMds, ReproducesEuclideanDistances) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g(0, 1);
    MatrixXd x(8, 2);
    for (long i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
    MatrixXd d2(8, 8);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) d2(i, j) = (x.row(i) - x.row(j)).squaredNorm();
    const MatrixXd y = classical_mds(d2, 4);
    EXPECT_LT(y.col(2).norm() + y.col(3).norm(), 1e-6);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) EXPECT_NEAR((y.row(i) - y.row(j)).squaredNorm(), d2(i, j), 1e-9);
}

TEST(InitState, InvariantsAndArchiveRoundTrip) {
    const Dataset d = cups(3, 4);
    const GpdssmState s = init_state(d.meshes, small_config(), 7);
    EXPECT_EQ(s.latents.size(), d.meshes.size());
    EXPECT_EQ(s.tpl.size(), 12);
    EXPECT_GT(s.beta, 0.0);
    const Archive a = s.to_archive();
    const std::string bytes = a.serialize();
    const GpdssmState r = GpdssmState::from_archive(Archive::deserialize(bytes));
    EXPECT_EQ(r.to_archive().serialize(), bytes);
    EXPECT_EQ(pack(r), pack(s));

    ModelConfig bad = small_config();
    bad.latent_dim = 0;
    EXPECT_THROW(init_state(d.meshes, bad, 0), ValidationError);
}

TEST(Archive, RejectsCorruptionAndUnknownVersion) {
    Archive a;
    a.put("x", MatrixXd::Random(2, 3));
    a.put_scalar("s", 4.0);
    std::string b = a.serialize();
    EXPECT_EQ(Archive::deserialize(b).get("x"), a.get("x"));
    EXPECT_THROW(Archive::deserialize(b.substr(0, b.size() - 3)), FormatError);
    EXPECT_THROW(Archive::deserialize(b + "z"), FormatError);
    std::string v = b;
    v[8] = 2;
    EXPECT_THROW(Archive::deserialize(v), FormatError);
    std::string m = b;
    m[0] = 'X';
    EXPECT_THROW(Archive::deserialize(m), FormatError);
    EXPECT_THROW(a.get("missing"), FormatError);
    EXPECT_THROW(Archive::load(gpdssm::testing::temp_dir("archive") / "nope.bin"), IoError);
    const auto path = gpdssm::testing::temp_dir("archive") / "a.bin";
    a.save(path);
    EXPECT_EQ(Archive::load(path).serialize(), b);
}

TEST(PackUnpack, RoundTrip) {
    const Dataset d = cups(2, 5);
    GpdssmState s = init_state(d.meshes, small_config(), 1);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g(0, 0.1);
    VectorXd th = pack(s);
    for (auto& x : th) x += g(rng);
    unpack(th, s);
    EXPECT_LT((pack(s) - th).cwiseAbs().maxCoeff(), 1e-12);
    VectorXd wrong(3);
    EXPECT_THROW(unpack(wrong, s), ValidationError);
}

TEST(Elbo, PlugInOracleAtZeroDeformation) {
    const Dataset d = cups(3, 6);
    GpdssmState s = init_state(d.meshes, small_config(), 2);
    s.gp.variance = 1e-14;  // momenta vanish
    for (auto& q : s.latents) q = {VectorXd::Zero(s.latent_dim), VectorXd::Ones(s.latent_dim)};
    const auto targets = targets_of(d.meshes, s);
    const auto batch = all_of(d.meshes.size());
    const ElboDraws draws = draw_noise(s, batch.size(), 3, 0);
    const ElboTerms t = elbo(s, targets, batch, draws);
    double direct = 0;
    for (const auto& m : d.meshes) direct += s.beta * varifold_sq_dist(embed(s.tpl.mesh), embed(m), s.fidelity);
    EXPECT_LT(rel_err(t.data, direct), 1e-6);
    EXPECT_NEAR(t.kl_z, 0.0, 1e-12);
    EXPECT_NEAR(t.kl_u, 0.0, 1e-12);
    EXPECT_DOUBLE_EQ(t.loss(), t.data + t.kl_z + t.kl_u);
}

TEST(Elbo, DuplicatedShapeDoublesItsContribution) {
    const Dataset d = cups(1, 7);
    GpdssmState s = init_state({d.meshes[0]}, small_config(), 3);
    s.latents[0].mean.setConstant(0.3);
    const auto batch1 = all_of(1);
    const ElboDraws draws = draw_noise(s, 1, 4, 0);
    const double single = elbo(s, targets_of({d.meshes[0]}, s), batch1, draws).data;
    GpdssmState s2 = s;
    s2.latents.push_back(s.latents[0]);
    ElboDraws draws2 = draws;
    draws2.z.push_back(draws.z[0]);
    draws2.u.push_back(draws.u[0]);
    draws2.resid.push_back(draws.resid[0]);
    const double twice = elbo(s2, targets_of({d.meshes[0], d.meshes[0]}, s2), all_of(2), draws2).data;
    EXPECT_LT(rel_err(twice, 2 * single), 1e-12);
}

TEST(Elbo, GradientMatchesFiniteDifferences) {
    const Dataset d = cups(2, 8);
    ModelConfig c = small_config();
    GpdssmState s = init_state(d.meshes, c, 4);
    // move away from the symmetric initial point so every block is exercised
    std::mt19937_64 rng(9);
    std::normal_distribution<double> g(0, 1);
    VectorXd th = pack(s);
    for (long i = 0; i < th.size(); ++i) th[i] += 0.05 * g(rng);
    unpack(th, s);
    const auto targets = targets_of(d.meshes, s);
    const std::vector<long> batch{0, 2, 3};
    const ElboDraws draws = draw_noise(s, batch.size(), 11, 5);
    VectorXd grad;
    elbo(s, targets, batch, draws, &grad);
    ASSERT_EQ(grad.size(), th.size());

    // the 20 coordinates always include one from each parameter block
    std::vector<long> coords{0, 1, 2, 3, 4, 4 + c.n_inducing};
    const long mean0 = 4 + c.n_inducing * (1 + c.latent_dim);
    const long chol0 = mean0 + c.n_inducing * s.output_dim();
    const long lat0 = chol0 + c.n_inducing * (c.n_inducing + 1) / 2;
    coords.push_back(mean0 + 5);
    coords.push_back(chol0);
    coords.push_back(chol0 + 1);
    coords.push_back(lat0 + 2 * c.latent_dim);
    coords.push_back(lat0 + static_cast<long>(d.meshes.size()) * c.latent_dim + 3 * c.latent_dim);
    std::uniform_int_distribution<long> pick(0, th.size() - 1);
    while (coords.size() < 20) coords.push_back(pick(rng));

    for (long i : coords) {
        const double h = 1e-5 * std::max(1.0, std::abs(th[i]));
        GpdssmState sp = s, sm = s;
        VectorXd tp = th, tm = th;
        tp[i] += h;
        tm[i] -= h;
        unpack(tp, sp);
        unpack(tm, sm);
        const double fd =
            (elbo(sp, targets, batch, draws).loss() - elbo(sm, targets, batch, draws).loss()) / (2 * h);
        const double err = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-4});
        EXPECT_LT(err, 1e-3) << "coordinate " << i << " fd " << fd << " analytic " << grad[i];
    }
}

TEST(Fit, DeterministicAndZeroLearningRate) {
    const Dataset d = cups(2, 10);
    const GpdssmState s = init_state(d.meshes, small_config(), 5);
    FitConfig fc;
    fc.iters = 8;
    fc.seed = 3;
    fc.batch_size = 3;
    const FitResult a = fit(s, d.meshes, fc);
    const FitResult b = fit(s, d.meshes, fc);
    EXPECT_EQ(a.trace, b.trace);
    EXPECT_EQ(a.state.to_archive().serialize(), b.state.to_archive().serialize());

    fc.lr = 0;
    const FitResult z = fit(s, d.meshes, fc);
    EXPECT_EQ(pack(z.state), pack(s));
    EXPECT_EQ(z.trace.size(), 8u);

    FitConfig bad;
    bad.iters = -1;
    EXPECT_THROW(fit(s, d.meshes, bad), ValidationError);
}

TEST(Fit, TraceIndependentOfThreadCount) {
    const Dataset d = cups(2, 12);
    const GpdssmState s = init_state(d.meshes, small_config(), 6);
    FitConfig fc;
    fc.iters = 5;
    set_thread_count(1);
    const FitResult a = fit(s, d.meshes, fc);
    set_thread_count(3);
    const FitResult b = fit(s, d.meshes, fc);
    set_thread_count(0);
    ASSERT_EQ(a.trace.size(), b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_LT(rel_err(a.trace[i], b.trace[i]), 1e-6);
}

class TrainedModel : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        data_ = new Dataset(cups(12, 20));
        ModelConfig c = small_config();
        c.latent_dim = 4;
        c.n_control = 16;
        c.n_inducing = 12;
        init_ = new GpdssmState(init_state(data_->meshes, c, 1));
        FitConfig fc;
        fc.iters = 300;
        fc.lr = 2e-2;
        result_ = new FitResult(fit(*init_, data_->meshes, fc));
    }
    static void TearDownTestSuite() {
        delete data_;
        delete init_;
        delete result_;
    }
    static Dataset* data_;
    static GpdssmState* init_;
    static FitResult* result_;
};

Dataset* TrainedModel::data_ = nullptr;
GpdssmState* TrainedModel::init_ = nullptr;
FitResult* TrainedModel::result_ = nullptr;

TEST_F(TrainedModel, LossDecreases) {
    const auto& tr = result_->trace;
    ASSERT_EQ(tr.size(), 300u);
    EXPECT_FALSE(result_->diverged);
    EXPECT_LT(smoothed(tr, tr.size() - 20, 20), 0.5 * smoothed(tr, 0, 20));
}

TEST_F(TrainedModel, LatentClassesSeparate) {
    const auto& lat = result_->state.latents;
    double inter = 0, intra = 0;
    long ni = 0, na = 0;
    for (std::size_t i = 0; i < lat.size(); ++i) {
        for (std::size_t j = i + 1; j < lat.size(); ++j) {
            const double dist = (lat[i].mean - lat[j].mean).norm();
            if (data_->labels[i] != data_->labels[j]) {
                inter += dist;
                ++ni;
            } else {
                intra += dist;
                ++na;
            }
        }
    }
    EXPECT_GT((inter / ni) / (intra / na), 1.3);
}

TEST_F(TrainedModel, ReconstructionProperties) {
    const GpdssmState& s = result_->state;
    const VarifoldRepr tpl = embed(s.tpl.mesh);
    const double tpl_norm = varifold_inner(tpl, tpl, s.fidelity);
    VectorXd far = VectorXd::Constant(s.latent_dim, 20 * s.gp.length_z + 10);
    const TriMesh r_far = reconstruct(s, far);
    EXPECT_LT(varifold_sq_dist(embed(r_far), tpl, s.fidelity), 1e-3 * tpl_norm);

    const auto targets = targets_of(data_->meshes, s);
    double avg = 0;
    for (std::size_t i = 0; i < data_->meshes.size(); ++i) {
        avg += varifold_sq_dist(embed(reconstruct(s, s.latents[i].mean)), embed(data_->meshes[i]), s.fidelity);
    }
    avg /= static_cast<double>(data_->meshes.size());
    const TriMesh r0 = reconstruct(s, s.latents[0].mean);
    EXPECT_EQ(r0.vertices(), reconstruct(s, s.latents[0].mean).vertices());
    const double init_avg = [&] {
        double a = 0;
        for (const auto& m : data_->meshes) a += varifold_sq_dist(tpl, embed(m), s.fidelity);
        return a / static_cast<double>(data_->meshes.size());
    }();
    EXPECT_LT(avg, init_avg);
    // the best-fit training shape sits below the average
    double best = 1e300;
    for (std::size_t i = 0; i < data_->meshes.size(); ++i) {
        best = std::min(best, varifold_sq_dist(embed(reconstruct(s, s.latents[i].mean)), embed(data_->meshes[i]),
                                               s.fidelity));
    }
    EXPECT_LT(best, avg);
}

TEST_F(TrainedModel, InferenceRecoversTrainingLatent) {
    const GpdssmState& s = result_->state;
    InferConfig ic;
    for (int i : {0, 5}) {
        const TriMesh shape = reconstruct(s, s.latents[i].mean);
        const InferResult r = infer_latent(s, shape, ic);
        EXPECT_LT((r.posterior.mean - s.latents[i].mean).norm(), 0.5) << i;
        EXPECT_LE(r.posterior.sd.maxCoeff(), 1.5);
    }
}

TEST_F(TrainedModel, TemplateInferenceHasLowestEnergy) {
    const GpdssmState& s = result_->state;
    InferConfig ic;
    const InferResult t = infer_latent(s, s.tpl.mesh, ic);
    for (int i : {1, 2, 3}) {
        const InferResult r = infer_latent(s, data_->meshes[i], ic);
        EXPECT_LE(t.energy, r.energy) << i;
    }
}

TEST(Fit, TwelveCupsHalveTheSmoothedLoss) {
    const Dataset d = cups(6, 21);
    const GpdssmState s = init_state(d.meshes, small_config(), 2);
    FitConfig fc;
    fc.iters = 300;
    fc.lr = 2e-2;
    const FitResult r = fit(s, d.meshes, fc);
    ASSERT_EQ(r.trace.size(), 300u);
    EXPECT_LT(smoothed(r.trace, 280, 20), 0.5 * smoothed(r.trace, 0, 20));
}
