// Acceptance suite: one PASS/FAIL line per criterion on stdout, details on
// stderr. Pass criterion numbers as arguments to run a subset.

#include "gpdssm/classify.hpp"
#include "gpdssm/eval.hpp"
#include "gpdssm/flow.hpp"
#include "gpdssm/lddmm.hpp"
#include "gpdssm/model.hpp"
#include "gpdssm/pipeline.hpp"
#include "gpdssm/preprocess.hpp"
#include "gpdssm/varifold.hpp"
#include "gpdssm/viz.hpp"

#include "test_util.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

using namespace gpdssm;
namespace fs = std::filesystem;
using gpdssm::testing::rel_err;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

// Records failed checks with a message, keeps the worst observed values.
class Checker {
public:
    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass_ = false;
            if (failures_++ < 5) std::cerr << "  failed: " << what << "\n";
        }
    }
    void worst(const std::string& name, double value) { worst_[name] = std::max(worst_[name], value); }
    Outcome outcome(std::string detail) const {
        std::ostringstream o;
        o << detail;
        for (const auto& [k, v] : worst_) o << "; max " << k << " " << v;
        if (failures_) o << "; " << failures_ << " failed checks";
        return {pass_, o.str()};
    }

private:
    bool pass_ = true;
    long failures_ = 0;
    std::map<std::string, double> worst_;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Points random_points(std::mt19937_64& rng, long n, double scale) {
    std::normal_distribution<double> g(0.0, scale);
    Points p(n, 3);
    for (long i = 0; i < p.size(); ++i) p.data()[i] = g(rng);
    return p;
}

MomentumPath random_path(std::mt19937_64& rng, long n, int steps, double norm) {
    MomentumPath p = MomentumPath::uniform(n, steps);
    for (auto& a : p.alphas) {
        a = random_points(rng, n, 1.0);
        a = (a.array().colwise() / a.rowwise().norm().array()).matrix() * norm;
    }
    return p;
}

// ---------------------------------------------------------------------------

Outcome synthetic_end_to_end() {
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    const auto start = std::chrono::steady_clock::now();
    int ordered = 0;
    double fixed_auc = -1;
    std::ostringstream per_seed;
    for (std::uint64_t seed : seeds) {
        const fs::path dir = gpdssm::testing::temp_dir("acceptance_e2e_" + std::to_string(seed));
        CommandContext ctx;
        ctx.manifest = dir / "manifest.csv";
        ctx.out = dir;
        ctx.config.per_class = 24;
        ctx.config.test_fraction = 0.5;
        ctx.config.seed = seed;
        cmd_generate(ctx);
        Manifest m = Manifest::load(ctx.manifest);
        cmd_preprocess(ctx, m);
        cmd_fit(ctx, m);
        cmd_infer(ctx, m);
        cmd_classify(ctx, m);
        cmd_evaluate(ctx, m);
        const auto r = nlohmann::json::parse(slurp(dir / "report.json"));
        const double g = r["models"]["gpdssm"]["auc"], l = r["models"]["lddmm"]["auc"], a = r["models"]["angles"]["auc"];
        if (seed == seeds.front()) fixed_auc = g;
        ordered += g >= l && l >= a;
        per_seed << " " << seed << ":" << g << "/" << l << "/" << a;
        std::cerr << "  seed " << seed << " test AUC gpdssm " << g << " lddmm " << l << " angles " << a << " (train "
                  << m.indices("train").size() << ", test " << m.indices("test").size() << ")\n";
    }
    const double minutes =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0 / seeds.size();
    // the budget is for a 4-core machine; fewer cores scale it up
    const int cores = std::clamp(static_cast<int>(std::thread::hardware_concurrency()), 1, 4);
    const double budget = 15.0 * 4.0 / cores;
    std::ostringstream o;
    o << "seed " << seeds.front() << " gpdssm AUC " << fixed_auc << " (>= 0.95); ordering on " << ordered << "/5 seeds (>= 4)"
      << "; gpdssm/lddmm/angles" << per_seed.str() << "; " << minutes << " min per run (budget " << budget << " on "
      << cores << " cores)";
    return {fixed_auc >= 0.95 && ordered >= 4 && minutes <= budget, o.str()};
}

Outcome varifold_metric_suite() {
    Checker c;
    std::mt19937_64 rng(2024);
    const VarifoldKernelParams k{0.5};
    for (int t = 0; t < 200; ++t) {
        const TriMesh a = gpdssm::testing::random_mesh(rng), b = gpdssm::testing::random_mesh(rng);
        const VarifoldRepr ea = embed(a), eb = embed(b);
        const double ab = varifold_sq_dist(ea, eb, k), ba = varifold_sq_dist(eb, ea, k);
        c.require(ab >= 0, "non-negative");
        c.require(ab == ba || rel_err(ab, ba) < 1e-12, "symmetric");
        c.worst("asymmetry", rel_err(ab, ba));
        const double self = std::abs(varifold_sq_dist(ea, ea, k));
        c.require(self <= 1e-10, "d(S,S) = 0");
        c.worst("d(S,S)", self);

        const Mat3 r = gpdssm::testing::random_rotation(rng);
        std::normal_distribution<double> n(0.0, 3.0);
        const Vec3 tr(n(rng), n(rng), n(rng));
        const double moved = varifold_sq_dist(embed(a.transformed(r, tr)), embed(b.transformed(r, tr)), k);
        c.require(std::abs(moved - ab) <= 1e-9 * ab, "rigid bi-invariance");
        c.worst("rigid rel", std::abs(moved - ab) / ab);
        const double flipped = varifold_sq_dist(embed(a.flipped()), eb, k);
        c.require(std::abs(flipped - ab) <= 1e-10 * ab, "orientation flip");
        c.worst("flip rel", std::abs(flipped - ab) / ab);
    }
    return c.outcome("200 random mesh pairs");
}

Outcome gradient_oracles() {
    Checker c;
    std::mt19937_64 rng(77);
    // varifold vertex gradients
    for (int trial = 0; trial < 5; ++trial) {
        const TriMesh a = gpdssm::testing::random_mesh(rng, 2, 6), b = gpdssm::testing::random_mesh(rng);
        const VarifoldKernelParams k{0.6};
        const VarifoldRepr rb = embed(b);
        const Points g = varifold_sq_dist_grad(a, rb, k);
        const Points v = a.vertices();
        const double h = 1e-5 * bbox_diagonal(v);
        for (long i = 0; i < v.rows(); ++i) {
            for (int d = 0; d < 3; ++d) {
                Points vp = v, vm = v;
                vp(i, d) += h;
                vm(i, d) -= h;
                const double fd =
                    (varifold_sq_dist(embed(a.with_vertices(vp)), rb, k) - varifold_sq_dist(embed(a.with_vertices(vm)), rb, k)) /
                    (2 * h);
                const double err = std::abs(fd - g(i, d)) / std::max(std::abs(fd), 1e-3 * g.cwiseAbs().maxCoeff());
                c.require(err < 1e-4, "varifold gradient");
                c.worst("varifold rel err", err);
            }
        }
    }

    // ELBO parameter gradients on 20 random coordinates
    {
        std::vector<TriMesh> meshes;
        for (int i = 0; i < 4; ++i) {
            CupParams p = sample_cup_params(i % 2 == 1, rng, 4, 10, 0.05);
            p.radius = 10.0;
            meshes.push_back(generate_cup(p));
        }
        ModelConfig mc;
        mc.latent_dim = 3;
        mc.n_control = 12;
        mc.n_inducing = 8;
        mc.time_steps = 5;
        GpdssmState s = init_state(meshes, mc, 4);
        std::normal_distribution<double> g(0, 1);
        Eigen::VectorXd th = pack(s);
        for (long i = 0; i < th.size(); ++i) th[i] += 0.05 * g(rng);
        unpack(th, s);
        std::vector<VarifoldTarget> targets;
        for (const auto& m : meshes) targets.emplace_back(embed(m), s.fidelity);
        const std::vector<long> batch{0, 1, 3};
        const ElboDraws draws = draw_noise(s, batch.size(), 11, 5);
        Eigen::VectorXd grad;
        elbo(s, targets, batch, draws, &grad);
        std::uniform_int_distribution<long> pick(0, th.size() - 1);
        std::set<long> coords;
        while (coords.size() < 20) coords.insert(pick(rng));
        for (long i : coords) {
            const double h = 1e-5 * std::max(1.0, std::abs(th[i]));
            GpdssmState sp = s, sm = s;
            Eigen::VectorXd tp = th, tm = th;
            tp[i] += h;
            tm[i] -= h;
            unpack(tp, sp);
            unpack(tm, sm);
            const double fd = (elbo(sp, targets, batch, draws).loss() - elbo(sm, targets, batch, draws).loss()) / (2 * h);
            const double err = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-4});
            c.require(err < 1e-3, "ELBO gradient coordinate " + std::to_string(i));
            c.worst("ELBO rel err", err);
        }
    }

    // flow endpoint sensitivities
    for (int trial = 0; trial < 5; ++trial) {
        const long n = 5, extra = 4;
        Points state(n + extra, 3);
        state << random_points(rng, n, 1.0), random_points(rng, extra, 1.0);
        const MomentumPath p = random_path(rng, n, 3, 0.6);
        const double sigma = 0.9;
        const Points w = random_points(rng, n + extra, 1.0);
        flow_detail::FlowTape tape;
        flow_detail::integrate(state, n, p.grid, p.alphas, sigma, 2, &tape);
        const auto grad = flow_detail::integrate_backward(tape, w);
        std::vector<Points> dir_a;
        for (std::size_t j = 0; j < p.alphas.size(); ++j) dir_a.push_back(random_points(rng, n, 1.0));
        const Points dir_s = random_points(rng, n + extra, 1.0);
        double analytic = dir_s.cwiseProduct(grad.d_initial).sum() + 0.5 * grad.d_sigma;
        for (std::size_t j = 0; j < p.alphas.size(); ++j) analytic += dir_a[j].cwiseProduct(grad.d_alphas[j]).sum();
        auto shifted = [&](double e) {
            std::vector<Points> al = p.alphas;
            for (std::size_t j = 0; j < al.size(); ++j) al[j] += e * dir_a[j];
            return flow_detail::integrate(state + e * dir_s, n, p.grid, al, sigma + 0.5 * e, 2).cwiseProduct(w).sum();
        };
        const double h = 1e-6;
        const double fd = (shifted(h) - shifted(-h)) / (2 * h);
        c.require(rel_err(fd, analytic) < 1e-4, "flow sensitivity");
        c.worst("flow rel err", rel_err(fd, analytic));
    }
    return c.outcome("varifold (5 meshes, all vertices), ELBO (20 coordinates), flow (5 directions)");
}

Outcome flow_correctness() {
    Checker c;
    std::mt19937_64 rng(31);
    // zero momenta: exact identity
    const Points x0 = random_points(rng, 8, 2.0);
    c.require(shoot(x0, MomentumPath::uniform(8, 10), {1.0}).endpoint == x0, "zero-momentum identity");

    // single particle moves on a straight line
    Points x(1, 3), a(1, 3);
    x << 1, 2, 3;
    a << 0.5, -0.25, 2.0;
    const Trajectory t = shoot(x, MomentumPath::constant(a, 10), {0.7});
    for (std::size_t s = 0; s < t.states.size(); ++s) {
        const double err = (t.states[s] - (x + static_cast<double>(s) / 10 * a)).norm();
        c.require(err < 1e-10, "straight line");
        c.worst("straight-line err", err);
    }

    // fourth-order convergence of the forward endpoint
    {
        const Points xs = random_points(rng, 12, 1.0);
        const MomentumPath p = random_path(rng, 12, 2, 1.5);
        const Points ref = shoot(xs, p, {1.0}, 1024).endpoint;
        std::vector<double> err;
        for (int s : {8, 16, 32}) err.push_back((shoot(xs, p, {1.0}, s).endpoint - ref).norm());
        for (int i = 0; i < 2; ++i) {
            const double slope = std::log2(err[i] / err[i + 1]);
            c.require(slope >= 3.5 && slope <= 4.5, "RK4 slope " + std::to_string(slope));
            std::cerr << "  RK4 slope " << slope << "\n";
        }
    }

    // round trip
    for (int trial = 0; trial < 5; ++trial) {
        const Points xs = random_points(rng, 20, 10.0);
        const double sigma = 0.3 * bbox_diagonal(xs);
        const MomentumPath p = random_path(rng, 20, 10, 0.5 * sigma);
        const double rt = inverse_flow_check(xs, p, {sigma}) / bbox_diagonal(xs);
        c.require(rt < 1e-3, "round trip");
        c.worst("round trip / diag", rt);
    }

    // Hamiltonian conservation along geodesics
    for (int trial = 0; trial < 10; ++trial) {
        const SpatialKernelParams k{1.0};
        const Points xs = random_points(rng, 8, 1.0), as = random_points(rng, 8, 0.3);
        const auto g = geodesic_shoot(xs, as, k);
        const double h0 = hamiltonian(xs, as, k);
        for (std::size_t s = 1; s < g.positions.size(); ++s) {
            const double e = rel_err(hamiltonian(g.positions[s], g.momenta[s], k), h0);
            c.require(e < 1e-5, "Hamiltonian conservation");
            c.worst("Hamiltonian rel drift", e);
        }
    }
    return c.outcome("identity, straight line, RK4 order, round trip, Hamiltonian");
}

Outcome alignment_recovery() {
    Checker c;
    std::mt19937_64 rng(505);
    SimilarityTransform g0;
    const Vec3 axis = Vec3(1, 1, 0).normalized();
    const double half = 0.5 * 25.0 * M_PI / 180.0;
    g0.quaternion = Eigen::Vector4d(std::cos(half), std::sin(half) * axis.x(), std::sin(half) * axis.y(), 0.0);
    g0.scale = 1.2;
    g0.translation = Vec3(3, -1, 2);
    int recovered = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const TriMesh m = gpdssm::testing::asymmetric_cup(rng);
        AlignmentConfig cfg;
        cfg.starts = 4;
        const AlignmentResult r = rigid_align(m, g0.apply(m), cfg);
        Eigen::Vector4d q = r.transform.quaternion.normalized();
        if (q.dot(g0.quaternion) < 0) q = -q;
        const double err = std::max({(q - g0.quaternion).cwiseAbs().maxCoeff(), std::abs(r.transform.scale - g0.scale),
                                     (r.transform.translation - g0.translation).cwiseAbs().maxCoeff()});
        c.worst("parameter err", err);
        recovered += err < 1e-2;
    }
    c.require(recovered == 20, "recovered " + std::to_string(recovered) + "/20");
    return c.outcome(std::to_string(recovered) + "/20 instances within 1e-2 per parameter");
}

Outcome statistics_oracles() {
    Checker c;
    std::mt19937_64 rng(606);
    // rank AUC vs trapezoid, with ties
    for (int t = 0; t < 500; ++t) {
        std::uniform_int_distribution<int> size(4, 40), level(0, 9);
        const int n = size(rng);
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (int i = 0; i < n; ++i) {
            s[i] = level(rng) / 10.0;
            y[i] = i % 2;
        }
        std::shuffle(y.begin(), y.end(), rng);
        const double d = std::abs(auc_rank(s, y) - trapezoid_auc(roc_curve(s, y)));
        c.require(d <= 1e-10, "AUC agreement");
        c.worst("AUC rank-trapezoid", d);
    }
    // BH
    const Eigen::VectorXd bh = bh_adjust(Eigen::Vector4d(0.01, 0.02, 0.03, 0.04));
    for (long i = 0; i < 4; ++i) c.require(std::abs(bh[i] - 0.04) < 1e-15, "BH example");

    // permutation null: identical groups never flag
    long flags = 0;
    for (int rep = 0; rep < 20; ++rep) {
        std::normal_distribution<double> g(0.0, 1.0);
        Eigen::MatrixXd v(20, 50);
        for (long i = 0; i < v.size(); ++i) v.data()[i] = g(rng);
        std::vector<int> labels(20);
        for (int i = 0; i < 20; ++i) labels[i] = i % 2;
        const VertexStatMap map = permutation_map(v, labels, 999, 1000 + rep, 0.05);
        flags += std::count(map.significant.begin(), map.significant.end(), true);
    }
    c.require(flags == 0, "permutation null flags " + std::to_string(flags));

    // bootstrap determinism per seed, across thread counts
    std::vector<double> s(30);
    std::vector<int> y(30);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int i = 0; i < 30; ++i) {
        y[i] = i % 2;
        s[i] = y[i] + g(rng);
    }
    set_thread_count(1);
    const BootstrapResult a = bootstrap_ci(s, y, auc_rank, 2000, 42);
    set_thread_count(4);
    const BootstrapResult b = bootstrap_ci(s, y, auc_rank, 2000, 42);
    set_thread_count(0);
    const BootstrapResult other = bootstrap_ci(s, y, auc_rank, 2000, 43);
    c.require(a.replicates == b.replicates && a.ci.lo == b.ci.lo && a.ci.hi == b.ci.hi, "bootstrap determinism");
    c.require(a.replicates != other.replicates, "bootstrap seed sensitivity");
    return c.outcome("500 AUC sets, BH example, 20 null permutation maps (" + std::to_string(flags) +
                     " flags), bootstrap determinism");
}

Outcome classifier_contracts() {
    Checker c;
    std::mt19937_64 rng(707);
    std::normal_distribution<double> g(0.0, 0.3);
    // separable clusters
    Eigen::MatrixXd x(24, 2);
    std::vector<int> y(24);
    for (int i = 0; i < 24; ++i) {
        y[i] = i % 2;
        x(i, 0) = (y[i] ? 3.0 : -3.0) + g(rng);
        x(i, 1) = g(rng);
    }
    const LoocvResult loo = loocv_scores(x, y);
    int correct = 0;
    for (int i = 0; i < 24; ++i) correct += (loo.scores[i] >= 0.5) == (y[i] == 1);
    c.require(correct == 24, "LOOCV accuracy");

    // label flip
    std::vector<int> flipped(24);
    for (int i = 0; i < 24; ++i) flipped[i] = 1 - y[i];
    Eigen::MatrixXd noisy = x;
    for (long i = 0; i < noisy.rows(); ++i) noisy(i, 0) = 0.3 * x(i, 0) + 3 * g(rng);
    const GpClassifier p = GpClassifier::fit(noisy, y), q = GpClassifier::fit(noisy, flipped);
    for (int t = 0; t < 50; ++t) {
        const Eigen::Vector2d z(3 * g(rng), 3 * g(rng));
        const double e = std::abs(p.predict_proba(z) + q.predict_proba(z) - 1.0);
        c.require(e < 1e-6, "label flip");
        c.worst("flip err", e);
    }

    c.require(angle_rule({15.7, 19.1}) == AngleClass::Dysplastic, "exemplar dysplastic");
    c.require(angle_rule({22, 12}) == AngleClass::Borderline, "borderline band");
    c.require(angle_rule({30, 5}) == AngleClass::Control, "control");
    return c.outcome("LOOCV accuracy " + std::to_string(correct) + "/24, label flip, angle exemplars");
}

Outcome reproducibility() {
    Checker c;
    const fs::path dir = gpdssm::testing::temp_dir("acceptance_repro");
    CommandContext ctx;
    ctx.manifest = dir / "manifest.csv";
    ctx.out = dir;
    ctx.config = PipelineConfig::parse(
        "per_class=4\nrings=4\nsectors=10\nalign_iters=80\nlatent_dim=3\nn_control=12\nn_inducing=6\ntime_steps=5\n"
        "iters=60\nlddmm_iters=40\nseed=8\n");
    cmd_generate(ctx);
    Manifest m = Manifest::load(ctx.manifest);
    cmd_preprocess(ctx, m);

    auto fit_into = [&](const std::string& name, int threads) {
        const fs::path out = dir / name;
        fs::create_directories(out);
        fs::copy(dir / "aligned", out / "aligned");
        CommandContext k = ctx;
        k.out = out;
        k.config.threads = threads;
        cmd_fit(k, m);
        return out;
    };
    const fs::path a = fit_into("a", 1), b = fit_into("b", 1), t = fit_into("t", 4);
    c.require(slurp(a / "gpdssm.gpa") == slurp(b / "gpdssm.gpa"), "gpdssm archive bytes");
    c.require(slurp(a / "lddmm.gpa") == slurp(b / "lddmm.gpa"), "lddmm archive bytes");
    for (const char* trace : {"gpdssm_trace.csv", "lddmm_trace.csv"}) {
        std::istringstream sa(slurp(a / trace)), st(slurp(t / trace));
        std::string la, lt;
        std::getline(sa, la);
        std::getline(st, lt);
        long rows = 0;
        while (std::getline(sa, la) && std::getline(st, lt)) {
            const double va = std::stod(la.substr(la.find(',') + 1)), vt = std::stod(lt.substr(lt.find(',') + 1));
            c.require(rel_err(va, vt) <= 1e-6, std::string(trace) + " thread drift");
            c.worst("trace rel diff", rel_err(va, vt));
            ++rows;
        }
        c.require(rows > 0 && !std::getline(st, lt), std::string(trace) + " lengths");
    }
    set_thread_count(0);
    return c.outcome("byte-identical archives on rerun; traces compared for 1 vs 4 threads");
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"synthetic end-to-end", synthetic_end_to_end},
        {"varifold metric suite", varifold_metric_suite},
        {"gradient oracles", gradient_oracles},
        {"flow correctness", flow_correctness},
        {"alignment recovery", alignment_recovery},
        {"statistics oracles", statistics_oracles},
        {"classifier contracts", classifier_contracts},
        {"reproducibility", reproducibility},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(id)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        all = all && o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.detail
                  << std::endl;
    }
    return all ? 0 : 1;
}
