#include "gpdssm/lddmm.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace gpdssm {

namespace {

// Hamiltonian state: passive and control points (first n rows) plus momenta.
struct HState {
    Points y;
    Points a;
};

HState axpy(const HState& x, double h, const HState& k) { return {x.y + h * k.y, x.a + h * k.a}; }

Points force(const Points& y, long n, const Points& a, double inv_s2) {
    Points f = Points::Zero(n, 3);
    const double c2 = 2.0 * inv_s2;
    for (long i = 0; i < n; ++i) {
        for (long j = 0; j < n; ++j) {
            if (i == j) continue;
            const Vec3 d = (y.row(i) - y.row(j)).transpose();
            const double kv = std::exp(-d.squaredNorm() * inv_s2);
            const double p = a.row(i).dot(a.row(j));
            f.row(i) += c2 * kv * p * d.transpose();
        }
    }
    return f;
}

void force_vjp(const Points& y, long n, const Points& a, double inv_s2, const Points& b, Points& g_y, Points& g_a) {
    const double c2 = 2.0 * inv_s2;
    for (long i = 0; i < n; ++i) {
        const Vec3 bi = b.row(i).transpose();
        if (bi.isZero(0.0)) continue;
        for (long j = 0; j < n; ++j) {
            if (i == j) continue;
            const Vec3 d = (y.row(i) - y.row(j)).transpose();
            const double kv = std::exp(-d.squaredNorm() * inv_s2);
            const double p = a.row(i).dot(a.row(j));
            const double w = bi.dot(d);
            g_a.row(i) += c2 * kv * w * a.row(j);
            g_a.row(j) += c2 * kv * w * a.row(i);
            const Vec3 gx = -c2 * c2 * kv * p * w * d + c2 * kv * p * bi;
            g_y.row(i) += gx.transpose();
            g_y.row(j) -= gx.transpose();
        }
    }
}

HState field(const HState& s, long n, double inv_s2) {
    return {flow_detail::velocity(s.y, n, s.a, inv_s2), force(s.y, n, s.a, inv_s2)};
}

HState field_vjp(const HState& s, long n, double sigma, const HState& lam) {
    HState g{Points::Zero(s.y.rows(), 3), Points::Zero(n, 3)};
    double unused = 0.0;
    flow_detail::velocity_vjp(s.y, n, s.a, sigma, lam.y, g.y, g.a, unused);
    force_vjp(s.y, n, s.a, 1.0 / (sigma * sigma), lam.a, g.y, g.a);
    return g;
}

std::vector<HState> integrate(const HState& init, long n, double sigma, int steps) {
    if (steps < 1) throw ValidationError("geodesic shooting needs at least one step");
    if (!(sigma > 0)) throw ValidationError("sigma_v must be positive");
    const double inv_s2 = 1.0 / (sigma * sigma), h = 1.0 / steps;
    std::vector<HState> states{init};
    states.reserve(steps + 1);
    for (int s = 0; s < steps; ++s) {
        const HState& x = states.back();
        const HState k1 = field(x, n, inv_s2);
        const HState k2 = field(axpy(x, 0.5 * h, k1), n, inv_s2);
        const HState k3 = field(axpy(x, 0.5 * h, k2), n, inv_s2);
        const HState k4 = field(axpy(x, h, k3), n, inv_s2);
        HState next{x.y + (h / 6.0) * (k1.y + 2.0 * k2.y + 2.0 * k3.y + k4.y),
                    x.a + (h / 6.0) * (k1.a + 2.0 * k2.a + 2.0 * k3.a + k4.a)};
        if (!next.y.allFinite() || !next.a.allFinite()) {
            throw NumericalError("geodesic shooting blew up in step " + std::to_string(s));
        }
        states.push_back(std::move(next));
    }
    return states;
}

// d loss / d initial state, given d loss / d final state.
HState integrate_backward(const std::vector<HState>& states, long n, double sigma, HState lam) {
    const int steps = static_cast<int>(states.size()) - 1;
    const double inv_s2 = 1.0 / (sigma * sigma), h = 1.0 / steps;
    for (int s = steps - 1; s >= 0; --s) {
        const HState& x = states[s];
        const HState k1 = field(x, n, inv_s2);
        const HState x2 = axpy(x, 0.5 * h, k1);
        const HState k2 = field(x2, n, inv_s2);
        const HState x3 = axpy(x, 0.5 * h, k2);
        const HState k3 = field(x3, n, inv_s2);
        const HState x4 = axpy(x, h, k3);

        HState dk1{(h / 6.0) * lam.y, (h / 6.0) * lam.a};
        HState dk2{(h / 3.0) * lam.y, (h / 3.0) * lam.a};
        HState dk3 = dk2;
        const HState dk4 = dk1;
        HState dx = lam;

        HState g = field_vjp(x4, n, sigma, dk4);
        dx = axpy(dx, 1.0, g);
        dk3 = axpy(dk3, h, g);
        g = field_vjp(x3, n, sigma, dk3);
        dx = axpy(dx, 1.0, g);
        dk2 = axpy(dk2, 0.5 * h, g);
        g = field_vjp(x2, n, sigma, dk2);
        dx = axpy(dx, 1.0, g);
        dk1 = axpy(dk1, 0.5 * h, g);
        g = field_vjp(x, n, sigma, dk1);
        lam = axpy(dx, 1.0, g);
    }
    return lam;
}

HState initial_state(const Template& tpl, const Points& alpha0) {
    const long n = tpl.size(), nv = tpl.mesh.num_vertices();
    if (alpha0.rows() != n) throw ValidationError("momenta rows differ from the control point count");
    HState s{Points(n + nv, 3), alpha0};
    s.y << tpl.control_points, tpl.mesh.vertices();
    return s;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct Adam {
    Points m, v;
    long t = 0;
    explicit Adam(long n) : m(Points::Zero(n, 3)), v(Points::Zero(n, 3)) {}
    void step(Points& x, const Points& g, double lr) {
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g.cwiseProduct(g);
        const double c1 = 1 - std::pow(b1, t), c2 = 1 - std::pow(b2, t);
        x.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    }
};

Registration register_target(const AtlasState& atlas, const VarifoldTarget& target, const AtlasConfig& cfg) {
    Registration r;
    const long n = atlas.tpl.size();
    r.momenta = Points::Zero(n, 3);
    Adam adam(n);
    const double lr = cfg.lr * atlas.spatial.sigma_v;
    // a target that coincides with the template starts at zero loss
    const double floor = 1e-3 * atlas.beta * target.self_energy();
    int over = 0;
    for (int it = 0; it < cfg.iters; ++it) {
        Points g;
        const double f = registration_objective(atlas.tpl, r.momenta, atlas.spatial, atlas.time_steps, target,
                                                atlas.beta, atlas.lambda, &g);
        r.trace.push_back(f);
        over = f > 10.0 * r.trace.front() + floor ? over + 1 : 0;
        if (over >= 50) {
            r.diverged = true;
            break;
        }
        const double decay = 0.01 + 0.99 * 0.5 * (1.0 + std::cos(std::numbers::pi * it / cfg.iters));
        adam.step(r.momenta, g, lr * decay);
    }
    return r;
}

}  // namespace

double hamiltonian(const Points& x, const Points& alpha, const SpatialKernelParams& k) {
    if (x.rows() != alpha.rows()) throw ValidationError("positions and momenta differ in size");
    const double inv_s2 = 1.0 / (k.sigma_v * k.sigma_v);
    return 0.5 * flow_detail::velocity(x, x.rows(), alpha, inv_s2).cwiseProduct(alpha).sum();
}

GeodesicTrajectory geodesic_shoot(const Points& x0, const Points& alpha0, const SpatialKernelParams& k, int steps) {
    if (x0.rows() != alpha0.rows()) throw ValidationError("positions and momenta differ in size");
    if (!x0.allFinite() || !alpha0.allFinite()) throw ValidationError("non-finite shooting input");
    const auto states = integrate({x0, alpha0}, x0.rows(), k.sigma_v, steps);
    GeodesicTrajectory t;
    for (const auto& s : states) {
        t.positions.push_back(s.y);
        t.momenta.push_back(s.a);
    }
    t.endpoint = states.back().y;
    return t;
}

TriMesh geodesic_deform(const Template& tpl, const Points& alpha0, const SpatialKernelParams& k, int steps) {
    const auto states = integrate(initial_state(tpl, alpha0), tpl.size(), k.sigma_v, steps);
    try {
        return tpl.mesh.with_vertices(states.back().y.bottomRows(tpl.mesh.num_vertices()));
    } catch (const ValidationError& e) {
        throw NumericalError(std::string("geodesic deformation collapsed a face: ") + e.what());
    }
}

double registration_objective(const Template& tpl, const Points& alpha0, const SpatialKernelParams& k, int steps,
                              const VarifoldTarget& target, double beta, double lambda, Points* grad) {
    const long n = tpl.size(), nv = tpl.mesh.num_vertices();
    const auto states = integrate(initial_state(tpl, alpha0), n, k.sigma_v, steps);
    Points gv;
    const double e = varifold_energy(states.back().y.bottomRows(nv), tpl.mesh.faces(), target, grad ? &gv : nullptr);
    const double inv_s2 = 1.0 / (k.sigma_v * k.sigma_v);
    const Points v0 = flow_detail::velocity(tpl.control_points, n, alpha0, inv_s2);
    const double h = 0.5 * v0.cwiseProduct(alpha0).sum();
    if (grad) {
        HState lam{Points::Zero(n + nv, 3), Points::Zero(n, 3)};
        lam.y.bottomRows(nv) = beta * gv;
        const HState g0 = integrate_backward(states, n, k.sigma_v, lam);
        *grad = g0.a + lambda * v0;
    }
    return beta * e + lambda * h;
}

void AtlasConfig::validate() const {
    if (!(beta_scale > 0)) throw ValidationError("atlas beta_scale must be positive");
    if (!(lr >= 0) || iters < 0 || time_steps < 1) throw ValidationError("atlas lr, iters and time_steps invalid");
}

void AtlasState::validate() const {
    tpl.validate();
    if (!(spatial.sigma_v > 0) || !(fidelity.sigma_pos > 0) || !(beta > 0) || !(lambda >= 0)) {
        throw ValidationError("atlas kernels, beta and lambda must be positive");
    }
    for (const auto& m : momenta) {
        if (m.rows() != tpl.size()) throw ValidationError("atlas momenta disagree with the control points");
    }
}

Archive AtlasState::to_archive() const {
    Archive a;
    a.put_mesh("template", tpl.mesh);
    a.put("control_points", tpl.control_points);
    a.put_scalar("spatial.sigma_v", spatial.sigma_v);
    a.put_scalar("fidelity.sigma_pos", fidelity.sigma_pos);
    a.put_scalar("beta", beta);
    a.put_scalar("lambda", lambda);
    a.put_scalar("time_steps", time_steps);
    Eigen::MatrixXd m(momenta.size(), 3 * tpl.size());
    for (std::size_t i = 0; i < momenta.size(); ++i) m.row(i) = flatten(momenta[i]).transpose();
    a.put("momenta", m);
    return a;
}

AtlasState AtlasState::from_archive(const Archive& a) {
    AtlasState s;
    s.tpl = Template{a.get("control_points"), a.mesh("template")};
    s.spatial.sigma_v = a.scalar("spatial.sigma_v");
    s.fidelity.sigma_pos = a.scalar("fidelity.sigma_pos");
    s.beta = a.scalar("beta");
    s.lambda = a.scalar("lambda");
    s.time_steps = static_cast<int>(a.scalar("time_steps"));
    const auto& m = a.get("momenta");
    if (m.cols() != 3 * s.tpl.size()) throw FormatError("momenta section has the wrong width", -1);
    for (long i = 0; i < m.rows(); ++i) s.momenta.push_back(unflatten(m.row(i).transpose()));
    s.validate();
    return s;
}

AtlasFit fit_atlas(const std::vector<TriMesh>& train, const Template& tpl, const SpatialKernelParams& spatial,
                   const VarifoldKernelParams& fidelity, const AtlasConfig& cfg) {
    cfg.validate();
    if (train.empty()) throw ValidationError("atlas fitting needs at least one shape");
    AtlasFit out;
    AtlasState& s = out.state;
    s.tpl = tpl;
    s.spatial = spatial;
    s.fidelity = fidelity;
    s.time_steps = cfg.time_steps;
    s.tpl.validate();

    const long N = static_cast<long>(train.size());
    std::vector<VarifoldTarget> targets;
    targets.reserve(N);
    for (const auto& m : train) targets.emplace_back(embed(m), fidelity);
    std::vector<double> d2;
    for (const auto& t : targets) {
        const double d = varifold_energy(tpl.mesh.vertices(), tpl.mesh.faces(), t);
        if (d > 0) d2.push_back(d);
    }
    const double scale = d2.empty() ? VarifoldTarget(embed(tpl.mesh), fidelity).self_energy() : median(d2);
    s.beta = cfg.beta_scale / scale;
    s.lambda = cfg.lambda > 0 ? cfg.lambda : 1e-3 * s.beta;

    std::vector<Registration> regs(N);
    parallel_for(N, [&](long i) { regs[i] = register_target(s, targets[i], cfg); });
    std::size_t len = 0;
    for (const auto& r : regs) len = std::max(len, r.trace.size());
    out.trace.assign(len, 0.0);
    for (const auto& r : regs) {
        out.diverged = out.diverged || r.diverged;
        for (std::size_t t = 0; t < len; ++t) out.trace[t] += r.trace.empty() ? 0.0 : r.trace[std::min(t, r.trace.size() - 1)];
        s.momenta.push_back(r.momenta);
    }
    return out;
}

Registration register_shape(const AtlasState& atlas, const TriMesh& shape, const AtlasConfig& cfg) {
    cfg.validate();
    atlas.validate();
    return register_target(atlas, VarifoldTarget(embed(shape), atlas.fidelity), cfg);
}

Eigen::VectorXd flatten(const Points& p) {
    Eigen::VectorXd v(3 * p.rows());
    for (long i = 0; i < p.rows(); ++i)
        for (int d = 0; d < 3; ++d) v[3 * i + d] = p(i, d);
    return v;
}

Points unflatten(const Eigen::VectorXd& v) {
    if (v.size() % 3) throw ValidationError("flattened points length is not a multiple of 3");
    Points p(v.size() / 3, 3);
    for (long i = 0; i < p.rows(); ++i)
        for (int d = 0; d < 3; ++d) p(i, d) = v[3 * i + d];
    return p;
}

MomentaPca momenta_pca(const std::vector<Points>& momenta, int k) {
    if (k <= 0) throw ValidationError("PCA dimension must be positive");
    const long N = static_cast<long>(momenta.size());
    if (N < 2) throw ValidationError("momenta PCA needs at least two shapes");
    const long D = 3 * momenta[0].rows();
    Eigen::MatrixXd x(N, D);
    for (long i = 0; i < N; ++i) {
        if (momenta[i].rows() * 3 != D) throw ValidationError("momenta differ in size");
        x.row(i) = flatten(momenta[i]).transpose();
    }
    MomentaPca p;
    p.mean = x.colwise().mean().transpose();
    x.rowwise() -= p.mean.transpose();
    const long kk = std::min<long>({k, N - 1, D});
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(x * x.transpose());
    p.basis = Eigen::MatrixXd::Zero(D, kk);
    p.variances = Eigen::VectorXd::Zero(kk);
    p.embeddings = Eigen::MatrixXd::Zero(N, kk);
    const double top = std::max(es.eigenvalues().maxCoeff(), 0.0);
    for (long c = 0; c < kk; ++c) {
        const long col = N - 1 - c;
        const double lam = es.eigenvalues()[col];
        if (!(lam > 1e-12 * top) || !(lam > 0)) break;
        Eigen::VectorXd u = es.eigenvectors().col(col);
        long arg = 0;
        u.cwiseAbs().maxCoeff(&arg);
        if (u[arg] < 0) u = -u;
        p.embeddings.col(c) = u * std::sqrt(lam);
        p.basis.col(c) = x.transpose() * u / std::sqrt(lam);
        p.variances[c] = lam / static_cast<double>(N - 1);
    }
    return p;
}

Eigen::VectorXd MomentaPca::project(const Points& momenta) const {
    const Eigen::VectorXd v = flatten(momenta);
    if (v.size() != mean.size()) throw ValidationError("momenta size differs from the PCA basis");
    return basis.transpose() * (v - mean);
}

Points MomentaPca::unproject(const Eigen::VectorXd& e) const {
    if (e.size() != basis.cols()) throw ValidationError("embedding size differs from the PCA basis");
    return unflatten(mean + basis * e);
}

}  // namespace gpdssm
