#include "gpdssm/model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gpdssm {

namespace {

constexpr double kResidualFloor = 1e-6;  // x variance, keeps the residual sd differentiable

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

// ---------------------------------------------------------------------------
// State

std::vector<double> GpdssmState::grid() const {
    std::vector<double> g(time_steps + 1);
    for (int i = 0; i <= time_steps; ++i) g[i] = static_cast<double>(i) / time_steps;
    return g;
}

void GpdssmState::validate() const {
    tpl.validate();
    gp.validate();
    inducing.validate();
    if (latent_dim < 1) throw ValidationError("latent dimension must be >= 1");
    if (time_steps < 1) throw ValidationError("time steps must be >= 1");
    if (!(spatial.sigma_v > 0) || !(fidelity.sigma_pos > 0) || !(beta > 0)) {
        throw ValidationError("kernel bandwidths and beta must be positive");
    }
    if (inducing.locations.cols() != 1 + latent_dim) throw ValidationError("inducing locations have wrong width");
    if (inducing.q_mean.cols() != output_dim()) throw ValidationError("inducing mean has wrong width");
    for (const auto& q : latents) {
        q.validate();
        if (q.mean.size() != latent_dim) throw ValidationError("latent posterior has wrong dimension");
    }
}

Archive GpdssmState::to_archive() const {
    Archive a;
    a.put_scalar("latent_dim", latent_dim);
    a.put_scalar("time_steps", time_steps);
    a.put_mesh("template", tpl.mesh);
    a.put("control_points", tpl.control_points);
    a.put_scalar("spatial.sigma_v", spatial.sigma_v);
    a.put_scalar("fidelity.sigma_pos", fidelity.sigma_pos);
    a.put_scalar("gp.variance", gp.variance);
    a.put_scalar("gp.length_t", gp.length_t);
    a.put_scalar("gp.length_z", gp.length_z);
    a.put_scalar("beta", beta);
    a.put("inducing.locations", inducing.locations);
    a.put("inducing.q_mean", inducing.q_mean);
    a.put("inducing.q_chol", inducing.q_chol);
    MatrixXd mu(latents.size(), latent_dim), sd(latents.size(), latent_dim);
    for (std::size_t i = 0; i < latents.size(); ++i) {
        mu.row(i) = latents[i].mean.transpose();
        sd.row(i) = latents[i].sd.transpose();
    }
    a.put("latents.mean", mu);
    a.put("latents.sd", sd);
    return a;
}

GpdssmState GpdssmState::from_archive(const Archive& a) {
    GpdssmState s;
    s.latent_dim = static_cast<int>(a.scalar("latent_dim"));
    s.time_steps = static_cast<int>(a.scalar("time_steps"));
    s.tpl = Template{a.get("control_points"), a.mesh("template")};
    s.spatial.sigma_v = a.scalar("spatial.sigma_v");
    s.fidelity.sigma_pos = a.scalar("fidelity.sigma_pos");
    s.gp = GpKernelParams{a.scalar("gp.variance"), a.scalar("gp.length_t"), a.scalar("gp.length_z")};
    s.beta = a.scalar("beta");
    s.inducing.locations = a.get("inducing.locations");
    s.inducing.q_mean = a.get("inducing.q_mean");
    s.inducing.q_chol = a.get("inducing.q_chol");
    const MatrixXd& mu = a.get("latents.mean");
    const MatrixXd& sd = a.get("latents.sd");
    if (mu.rows() != sd.rows() || mu.cols() != sd.cols()) throw FormatError("latent sections disagree", -1);
    for (long i = 0; i < mu.rows(); ++i) s.latents.push_back({mu.row(i).transpose(), sd.row(i).transpose()});
    s.validate();
    return s;
}

void ModelConfig::validate() const {
    if (latent_dim < 1 || n_control < 1 || n_inducing < 1 || time_steps < 1) {
        throw ValidationError("model sizes (latent_dim, n_control, n_inducing, time_steps) must be positive");
    }
    if (!(beta_scale > 0) || !(latent_init_sd > 0) || !(q_chol_init > 0)) {
        throw ValidationError("beta_scale, latent_init_sd and q_chol_init must be positive");
    }
    gp_init.validate();
}

// ---------------------------------------------------------------------------
// Initialisation

TemplateChoice select_template(const std::vector<TriMesh>& meshes, VarifoldKernelParams k) {
    if (meshes.empty()) throw ValidationError("template selection needs at least one mesh");
    const long n = static_cast<long>(meshes.size());
    if (!(k.sigma_pos > 0)) {
        double diag = 0;
        for (const auto& m : meshes) diag += bbox_diagonal(m.vertices());
        k.sigma_pos = 0.25 * diag / static_cast<double>(n);
    }
    std::vector<VarifoldRepr> reprs(n);
    for (long i = 0; i < n; ++i) reprs[i] = embed(meshes[i]);
    std::vector<double> self(n);
    parallel_for(n, [&](long i) { self[i] = varifold_inner(reprs[i], reprs[i], k); });
    TemplateChoice tc;
    tc.sq_dist = MatrixXd::Zero(n, n);
    std::vector<std::pair<long, long>> pairs;
    for (long i = 0; i < n; ++i)
        for (long j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
    std::vector<double> vals(pairs.size());
    parallel_for(static_cast<long>(pairs.size()), [&](long p) {
        const auto [i, j] = pairs[p];
        vals[p] = std::max(0.0, self[i] + self[j] - 2.0 * varifold_inner(reprs[i], reprs[j], k));
    });
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        tc.sq_dist(pairs[p].first, pairs[p].second) = tc.sq_dist(pairs[p].second, pairs[p].first) = vals[p];
    }
    const Eigen::VectorXd sums = tc.sq_dist.rowwise().sum();
    sums.minCoeff(&tc.index);
    return tc;
}

MatrixXd classical_mds(const MatrixXd& sq_dist, int dims) {
    const long n = sq_dist.rows();
    const MatrixXd j = MatrixXd::Identity(n, n) - MatrixXd::Constant(n, n, 1.0 / n);
    const MatrixXd b = -0.5 * j * sq_dist * j;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(b);
    MatrixXd out = MatrixXd::Zero(n, dims);
    const double top = std::max(es.eigenvalues().maxCoeff(), 0.0);
    for (int d = 0; d < dims && d < n; ++d) {
        const long col = n - 1 - d;
        const double lam = es.eigenvalues()[col];
        if (!(lam > 1e-10 * top)) break;
        Eigen::VectorXd v = es.eigenvectors().col(col);
        long arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v[arg] < 0) v = -v;
        out.col(d) = v * std::sqrt(lam);
    }
    return out;
}

GpdssmState init_state(const std::vector<TriMesh>& train, const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const TemplateChoice tc = select_template(train);
    GpdssmState s;
    s.latent_dim = cfg.latent_dim;
    s.time_steps = cfg.time_steps;
    const TriMesh& ref = train[tc.index];
    s.tpl = make_template(ref, cfg.n_control);
    const double diag = bbox_diagonal(ref.vertices());
    s.spatial.sigma_v = cfg.sigma_v > 0 ? cfg.sigma_v : 0.3 * diag;
    s.fidelity.sigma_pos = cfg.sigma_pos > 0 ? cfg.sigma_pos : 0.25 * diag;
    s.gp = cfg.gp_init;

    const long n = static_cast<long>(train.size());
    const VarifoldTarget tt(embed(ref), s.fidelity);
    std::vector<double> d2;
    for (long i = 0; i < n; ++i) {
        if (i == tc.index) continue;
        d2.push_back(varifold_energy(train[i].vertices(), train[i].faces(), tt));
    }
    std::vector<double> positive;
    for (double d : d2)
        if (d > 0) positive.push_back(d);
    s.beta = cfg.beta_scale / (positive.empty() ? tt.self_energy() : median(positive));

    MatrixXd z = classical_mds(tc.sq_dist, cfg.latent_dim);
    const double sd0 = n > 1 ? std::sqrt((z.col(0).array() - z.col(0).mean()).square().sum() / (n - 1)) : 0.0;
    if (sd0 > 0) z /= sd0;
    for (long i = 0; i < n; ++i) {
        s.latents.push_back({z.row(i).transpose(), Eigen::VectorXd::Constant(cfg.latent_dim, cfg.latent_init_sd)});
    }

    const long m = cfg.n_inducing;
    auto rng = make_rng(seed, 0x1d0c);
    std::normal_distribution<double> g(0.0, 1.0);
    s.inducing.locations.resize(m, 1 + cfg.latent_dim);
    for (long j = 0; j < m; ++j) {
        s.inducing.locations(j, 0) = (j + 0.5) / m;
        for (int d = 0; d < cfg.latent_dim; ++d) s.inducing.locations(j, 1 + d) = g(rng);
    }
    s.inducing.q_mean = MatrixXd::Zero(m, s.output_dim());
    s.inducing.q_chol = cfg.q_chol_init * MatrixXd::Identity(m, m);
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------
// Parameter packing

namespace {

struct Layout {
    long m, k, d, n;
    long times() const { return 4; }
    long locz() const { return 4 + m; }
    long mean() const { return locz() + m * k; }
    long chol() const { return mean() + m * d; }
    long lat_mu() const { return chol() + m * (m + 1) / 2; }
    long lat_ls() const { return lat_mu() + n * k; }
    long size() const { return lat_ls() + n * k; }
};

Layout layout_of(const GpdssmState& s) {
    return {s.inducing.m(), s.latent_dim, s.output_dim(), static_cast<long>(s.latents.size())};
}

}  // namespace

Eigen::VectorXd pack(const GpdssmState& s) {
    const Layout L = layout_of(s);
    Eigen::VectorXd th(L.size());
    th[0] = std::log(s.gp.variance);
    th[1] = std::log(s.gp.length_t);
    th[2] = std::log(s.gp.length_z);
    th[3] = std::log(s.spatial.sigma_v);
    for (long j = 0; j < L.m; ++j) {
        th[L.times() + j] = logit(std::clamp(s.inducing.locations(j, 0), 1e-9, 1 - 1e-9));
        for (long d = 0; d < L.k; ++d) th[L.locz() + j * L.k + d] = s.inducing.locations(j, 1 + d);
        for (long c = 0; c < L.d; ++c) th[L.mean() + j * L.d + c] = s.inducing.q_mean(j, c);
    }
    long p = L.chol();
    for (long i = 0; i < L.m; ++i)
        for (long j = 0; j <= i; ++j) th[p++] = i == j ? std::log(s.inducing.q_chol(i, i)) : s.inducing.q_chol(i, j);
    for (long i = 0; i < L.n; ++i) {
        for (long d = 0; d < L.k; ++d) {
            th[L.lat_mu() + i * L.k + d] = s.latents[i].mean[d];
            th[L.lat_ls() + i * L.k + d] = std::log(s.latents[i].sd[d]);
        }
    }
    return th;
}

void unpack(const Eigen::VectorXd& th, GpdssmState& s) {
    const Layout L = layout_of(s);
    if (th.size() != L.size()) throw ValidationError("parameter vector has the wrong length");
    if (!th.allFinite()) throw NumericalError("optimiser produced non-finite parameters");
    s.gp.variance = std::exp(th[0]);
    s.gp.length_t = std::exp(th[1]);
    s.gp.length_z = std::exp(th[2]);
    s.spatial.sigma_v = std::exp(th[3]);
    for (long j = 0; j < L.m; ++j) {
        s.inducing.locations(j, 0) = sigmoid(th[L.times() + j]);
        for (long d = 0; d < L.k; ++d) s.inducing.locations(j, 1 + d) = th[L.locz() + j * L.k + d];
        for (long c = 0; c < L.d; ++c) s.inducing.q_mean(j, c) = th[L.mean() + j * L.d + c];
    }
    long p = L.chol();
    s.inducing.q_chol.setZero();
    for (long i = 0; i < L.m; ++i)
        for (long j = 0; j <= i; ++j) s.inducing.q_chol(i, j) = i == j ? std::exp(th[p++]) : th[p++];
    for (long i = 0; i < L.n; ++i) {
        for (long d = 0; d < L.k; ++d) {
            s.latents[i].mean[d] = th[L.lat_mu() + i * L.k + d];
            s.latents[i].sd[d] = std::exp(th[L.lat_ls() + i * L.k + d]);
        }
    }
}

// ---------------------------------------------------------------------------
// ELBO

namespace {

struct Shared {
    MatrixXd kmm;  // without jitter
    MatrixXd l;    // chol(kmm + jitter)
    double jitter = 0.0;
    MatrixXd ls;   // lower part of q_chol
    std::vector<double> grid;
    MatrixXd grid_t;
};

Shared prepare(const GpdssmState& s) {
    Shared sh;
    sh.kmm = gram(s.inducing.locations, s.inducing.locations, s.gp);
    sh.l = jittered_cholesky(sh.kmm, s.gp.variance, &sh.jitter);
    sh.ls = s.inducing.q_chol.triangularView<Eigen::Lower>();
    sh.grid = s.grid();
    return sh;
}

struct ShapeGrad {
    VectorXd z_bar;
    double logvar = 0, loglt = 0, loglz = 0;  // through K_qm and the residual
    MatrixXd ind_bar;                          // d/d raw locations (t, z)
    MatrixXd l_bar;                            // d/d chol(K_mm)
    MatrixXd m_bar;
    MatrixXd ls_bar;
    double sigma_v = 0;
};

MatrixXd query_inputs(const Shared& sh, const VectorXd& z) {
    MatrixXd xq(sh.grid.size(), 1 + z.size());
    for (std::size_t j = 0; j < sh.grid.size(); ++j) {
        xq(j, 0) = sh.grid[j];
        xq.row(j).tail(z.size()) = z.transpose();
    }
    return xq;
}

std::vector<Points> to_alphas(const MatrixXd& alpha, long n) {
    std::vector<Points> out(alpha.rows(), Points(n, 3));
    for (long j = 0; j < alpha.rows(); ++j)
        for (long c = 0; c < n; ++c)
            for (int d = 0; d < 3; ++d) out[j](c, d) = alpha(j, 3 * c + d);
    return out;
}

// beta * d^2(deformed template, target) for one momentum draw. Without noise
// matrices the posterior-mean momenta are used.
double shape_term(const GpdssmState& s, const Shared& sh, const VarifoldTarget& target, const VectorXd& z,
                  const MatrixXd* e_u, const MatrixXd* e_r, ShapeGrad* g) {
    const long n = s.tpl.size(), m = s.inducing.m(), k = s.latent_dim;
    const MatrixXd xq = query_inputs(sh, z);
    const long q = xq.rows();
    const MatrixXd kqm = gram(xq, s.inducing.locations, s.gp);
    const MatrixXd a = sh.l.triangularView<Eigen::Lower>().solve(kqm.transpose()).transpose();
    MatrixXd v = s.inducing.q_mean;
    if (e_u) v.noalias() += sh.ls * (*e_u);
    MatrixXd alpha = a * v;
    VectorXd resid(q), sq(q);
    if (e_r) {
        for (long j = 0; j < q; ++j) {
            resid[j] = s.gp.variance - a.row(j).squaredNorm();
            sq[j] = std::sqrt(std::max(resid[j], 0.0) + kResidualFloor * s.gp.variance);
            alpha.row(j) += sq[j] * e_r->row(j);
        }
    }
    const TriMesh& mesh = s.tpl.mesh;
    const long nv = mesh.num_vertices();
    Points state(n + nv, 3);
    state << s.tpl.control_points, mesh.vertices();
    flow_detail::FlowTape tape;
    const Points end = flow_detail::integrate(state, n, sh.grid, to_alphas(alpha, n), s.spatial.sigma_v, 1,
                                              g ? &tape : nullptr);
    Points gv;
    const double e = varifold_energy(end.bottomRows(nv), mesh.faces(), target, g ? &gv : nullptr);
    if (!std::isfinite(e)) throw NumericalError("non-finite data term");
    if (!g) return s.beta * e;

    Points d_final = Points::Zero(n + nv, 3);
    d_final.bottomRows(nv) = s.beta * gv;
    const flow_detail::FlowGradient fg = flow_detail::integrate_backward(tape, d_final);
    g->sigma_v = fg.d_sigma;
    MatrixXd gbar(q, 3 * n);
    for (long j = 0; j < q; ++j)
        for (long c = 0; c < n; ++c)
            for (int d = 0; d < 3; ++d) gbar(j, 3 * c + d) = fg.d_alphas[j](c, d);

    MatrixXd a_bar = gbar * v.transpose();
    g->m_bar = a.transpose() * gbar;
    if (e_u) {
        g->ls_bar = (g->m_bar * e_u->transpose()).triangularView<Eigen::Lower>();
    } else {
        g->ls_bar = MatrixXd::Zero(m, m);
    }
    double var_raw = 0.0;
    if (e_r) {
        for (long j = 0; j < q; ++j) {
            const double sq_bar = gbar.row(j).dot(e_r->row(j));
            const double rt_bar = sq_bar / (2.0 * sq[j]);
            var_raw += rt_bar * (kResidualFloor + (resid[j] > 0 ? 1.0 : 0.0));
            if (resid[j] > 0) a_bar.row(j) -= 2.0 * rt_bar * a.row(j);
        }
    }
    const MatrixXd kqm_bar = sh.l.transpose().triangularView<Eigen::Upper>().solve(a_bar.transpose()).transpose();
    g->l_bar = -(kqm_bar.transpose() * a);

    g->z_bar = VectorXd::Zero(k);
    g->ind_bar = MatrixXd::Zero(m, 1 + k);
    const double ilt2 = 1.0 / (s.gp.length_t * s.gp.length_t), ilz2 = 1.0 / (s.gp.length_z * s.gp.length_z);
    for (long j = 0; j < q; ++j) {
        for (long l = 0; l < m; ++l) {
            const double kv = kqm_bar(j, l) * kqm(j, l);
            if (kv == 0.0) continue;
            const double dt = xq(j, 0) - s.inducing.locations(l, 0);
            const VectorXd dz = z - s.inducing.locations.row(l).tail(k).transpose();
            g->logvar += kv;
            g->loglt += kv * dt * dt * ilt2;
            g->loglz += kv * dz.squaredNorm() * ilz2;
            g->ind_bar(l, 0) += kv * dt * ilt2;
            g->ind_bar.row(l).tail(k) += kv * ilz2 * dz.transpose();
            g->z_bar -= kv * ilz2 * dz;
        }
    }
    g->logvar += var_raw * s.gp.variance;
    return s.beta * e;
}

}  // namespace

ElboDraws draw_noise(const GpdssmState& s, std::size_t batch, std::uint64_t seed, std::uint64_t step) {
    ElboDraws d;
    const long m = s.inducing.m(), D = s.output_dim(), q = s.time_steps + 1;
    for (std::size_t b = 0; b < batch; ++b) {
        auto rng = make_rng(seed, (step << 20) | b);
        std::normal_distribution<double> g(0.0, 1.0);
        VectorXd z(s.latent_dim);
        for (auto& x : z) x = g(rng);
        MatrixXd u(m, D), r(q, D);
        for (long i = 0; i < m; ++i)
            for (long c = 0; c < D; ++c) u(i, c) = g(rng);
        for (long i = 0; i < q; ++i)
            for (long c = 0; c < D; ++c) r(i, c) = g(rng);
        d.z.push_back(std::move(z));
        d.u.push_back(std::move(u));
        d.resid.push_back(std::move(r));
    }
    return d;
}

ElboTerms elbo(const GpdssmState& s, const std::vector<VarifoldTarget>& targets, const std::vector<long>& batch,
               const ElboDraws& draws, Eigen::VectorXd* grad) {
    if (batch.empty()) throw ValidationError("ELBO batch is empty");
    if (draws.z.size() < batch.size()) throw ValidationError("not enough noise draws for the batch");
    const long N = static_cast<long>(s.latents.size());
    if (static_cast<long>(targets.size()) != N) throw ValidationError("one target per latent posterior required");
    const Shared sh = prepare(s);
    const long B = static_cast<long>(batch.size());
    const double scale = static_cast<double>(N) / static_cast<double>(B);

    std::vector<double> data(B);
    std::vector<ShapeGrad> grads(grad ? B : 0);
    std::vector<VectorXd> zs(B);
    parallel_for(B, [&](long b) {
        const long i = batch[b];
        zs[b] = sample_reparam(s.latents[i], draws.z[b]);
        try {
            data[b] = shape_term(s, sh, targets[i], zs[b], &draws.u[b], &draws.resid[b], grad ? &grads[b] : nullptr);
        } catch (const NumericalError& e) {
            throw NumericalError("shape " + std::to_string(i) + ": " + e.what());
        }
    });

    ElboTerms t;
    t.per_shape = data;
    for (long b = 0; b < B; ++b) {
        t.data += scale * data[b];
        t.kl_z += scale * kl_gaussian_diag(s.latents[batch[b]]);
    }
    t.kl_u = kl_whitened_inducing(s.inducing);
    if (!grad) return t;

    const Layout L = layout_of(s);
    grad->setZero(L.size());
    VectorXd& g = *grad;
    const long m = L.m, k = L.k;
    MatrixXd l_bar = MatrixXd::Zero(m, m), m_bar = MatrixXd::Zero(m, L.d), ls_bar = MatrixXd::Zero(m, m);
    MatrixXd ind_bar = MatrixXd::Zero(m, 1 + k);
    double sigma_v = 0;
    for (long b = 0; b < B; ++b) {
        const ShapeGrad& sg = grads[b];
        g[0] += scale * sg.logvar;
        g[1] += scale * sg.loglt;
        g[2] += scale * sg.loglz;
        sigma_v += scale * sg.sigma_v;
        l_bar += scale * sg.l_bar;
        m_bar += scale * sg.m_bar;
        ls_bar += scale * sg.ls_bar;
        ind_bar += scale * sg.ind_bar;
        const long i = batch[b];
        const GaussianDist& q = s.latents[i];
        for (long d = 0; d < k; ++d) {
            g[L.lat_mu() + i * k + d] += scale * (sg.z_bar[d] + q.mean[d]);
            g[L.lat_ls() + i * k + d] += scale * (sg.z_bar[d] * draws.z[b][d] * q.sd[d] + q.sd[d] * q.sd[d] - 1.0);
        }
    }

    // K_mm through its Cholesky factor
    const MatrixXd kmm_bar = cholesky_backward(sh.l, l_bar);
    g[0] += kmm_bar.trace() * sh.jitter;
    const double ilt2 = 1.0 / (s.gp.length_t * s.gp.length_t), ilz2 = 1.0 / (s.gp.length_z * s.gp.length_z);
    const MatrixXd& loc = s.inducing.locations;
    for (long i = 0; i < m; ++i) {
        for (long j = 0; j < m; ++j) {
            const double kv = kmm_bar(i, j) * sh.kmm(i, j);
            g[0] += kv;
            if (i == j) continue;
            const double dt = loc(i, 0) - loc(j, 0);
            const VectorXd dz = (loc.row(i).tail(k) - loc.row(j).tail(k)).transpose();
            g[1] += kv * dt * dt * ilt2;
            g[2] += kv * dz.squaredNorm() * ilz2;
            ind_bar(i, 0) -= 2.0 * kv * dt * ilt2;
            ind_bar.row(i).tail(k) -= 2.0 * kv * ilz2 * dz.transpose();
        }
    }

    // KL(q(U) || p(U))
    m_bar += s.inducing.q_mean;
    ls_bar += static_cast<double>(L.d) * sh.ls;
    for (long i = 0; i < m; ++i) ls_bar(i, i) -= static_cast<double>(L.d) / sh.ls(i, i);

    g[3] = sigma_v * s.spatial.sigma_v;
    for (long j = 0; j < m; ++j) {
        const double t = loc(j, 0);
        g[L.times() + j] = ind_bar(j, 0) * t * (1.0 - t);
        for (long d = 0; d < k; ++d) g[L.locz() + j * k + d] = ind_bar(j, 1 + d);
        for (long c = 0; c < L.d; ++c) g[L.mean() + j * L.d + c] = m_bar(j, c);
    }
    long p = L.chol();
    for (long i = 0; i < m; ++i)
        for (long j = 0; j <= i; ++j) g[p++] = i == j ? ls_bar(i, i) * sh.ls(i, i) : ls_bar(i, j);
    return t;
}

// ---------------------------------------------------------------------------
// Training and inference

void FitConfig::validate() const {
    if (!(lr >= 0) || iters < 0 || batch_size < 0) throw ValidationError("fit lr, iters and batch_size must be >= 0");
}

namespace {

struct Adam {
    VectorXd m, v;
    long t = 0;
    explicit Adam(long n) : m(VectorXd::Zero(n)), v(VectorXd::Zero(n)) {}
    void step(VectorXd& x, const VectorXd& g, double lr) {
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g.cwiseProduct(g);
        const double c1 = 1 - std::pow(b1, t), c2 = 1 - std::pow(b2, t);
        x.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    }
};

}  // namespace

FitResult fit(const GpdssmState& init, const std::vector<TriMesh>& train, const FitConfig& cfg) {
    cfg.validate();
    init.validate();
    const long N = static_cast<long>(train.size());
    if (N == 0) throw ValidationError("training set is empty");
    if (static_cast<long>(init.latents.size()) != N) throw ValidationError("latent count differs from training size");
    std::vector<VarifoldTarget> targets;
    targets.reserve(N);
    for (const auto& m : train) targets.emplace_back(embed(m), init.fidelity);

    FitResult res;
    res.state = init;
    VectorXd theta = pack(init);
    Adam adam(theta.size());
    const long B = cfg.batch_size > 0 && cfg.batch_size < N ? cfg.batch_size : N;
    std::vector<long> order(N);
    int over = 0;
    for (int it = 0; it < cfg.iters; ++it) {
        unpack(theta, res.state);
        std::iota(order.begin(), order.end(), 0);
        if (B < N) {
            auto rng = make_rng(cfg.seed, 0xba7c0000ULL + it);
            std::shuffle(order.begin(), order.end(), rng);
        }
        const std::vector<long> batch(order.begin(), order.begin() + B);
        const ElboDraws draws = draw_noise(res.state, batch.size(), cfg.seed, it);
        VectorXd g;
        const ElboTerms t = elbo(res.state, targets, batch, draws, &g);
        res.trace.push_back(t.loss());
        if (!std::isfinite(t.loss())) throw NumericalError("fit produced a non-finite loss at iteration " + std::to_string(it));
        over = t.loss() > 10.0 * res.trace.front() ? over + 1 : 0;
        if (over >= 50) {
            res.diverged = true;
            break;
        }
        if (!cfg.optimize_sigma_v) g[3] = 0.0;
        adam.step(theta, g, cfg.lr);
    }
    unpack(theta, res.state);
    return res;
}

MomentumPath mean_path(const GpdssmState& s, const VectorXd& z) {
    if (z.size() != s.latent_dim) throw ValidationError("latent vector has the wrong dimension");
    const Shared sh = prepare(s);
    const MatrixXd kqm = gram(query_inputs(sh, z), s.inducing.locations, s.gp);
    const MatrixXd a = sh.l.triangularView<Eigen::Lower>().solve(kqm.transpose()).transpose();
    MomentumPath p;
    p.grid = sh.grid;
    p.alphas = to_alphas(a * s.inducing.q_mean, s.tpl.size());
    return p;
}

TriMesh reconstruct(const GpdssmState& s, const VectorXd& z) {
    return deform_mesh(s.tpl, mean_path(s, z), s.spatial);
}

InferResult infer_latent(const GpdssmState& s, const TriMesh& shape, const InferConfig& cfg) {
    s.validate();
    if (cfg.iters < 0 || !(cfg.lr >= 0)) throw ValidationError("infer iters and lr must be >= 0");
    const VarifoldTarget target(embed(shape), s.fidelity);
    const Shared sh = prepare(s);
    const long k = s.latent_dim;

    // start from the training latent (or the origin) that reconstructs the shape best
    VectorXd start = VectorXd::Zero(k);
    double best = shape_term(s, sh, target, start, nullptr, nullptr, nullptr);
    for (const auto& q : s.latents) {
        const double e = shape_term(s, sh, target, q.mean, nullptr, nullptr, nullptr);
        if (e < best) {
            best = e;
            start = q.mean;
        }
    }
    VectorXd theta(2 * k);
    theta.head(k) = start;
    theta.tail(k).setConstant(std::log(0.1));
    Adam adam(2 * k);
    for (int it = 0; it < cfg.iters; ++it) {
        const ElboDraws d = draw_noise(s, 1, cfg.seed, it);
        const VectorXd sd = theta.tail(k).array().exp();
        const VectorXd z = theta.head(k) + sd.cwiseProduct(d.z[0]);
        ShapeGrad g;
        shape_term(s, sh, target, z, &d.u[0], &d.resid[0], &g);
        VectorXd grad(2 * k);
        grad.head(k) = g.z_bar + theta.head(k);
        grad.tail(k) = g.z_bar.cwiseProduct(d.z[0]).cwiseProduct(sd) + sd.cwiseProduct(sd) - VectorXd::Ones(k);
        adam.step(theta, grad, cfg.lr);
    }
    InferResult r;
    r.posterior.mean = theta.head(k);
    r.posterior.sd = theta.tail(k).array().exp();
    r.energy = shape_term(s, sh, target, r.posterior.mean, nullptr, nullptr, nullptr) / s.beta;
    return r;
}

}  // namespace gpdssm
