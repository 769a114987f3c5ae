#include "gpdssm/flow.hpp"

#include <cmath>
#include <limits>

namespace gpdssm {

namespace flow_detail {

Points velocity(const Points& y, long n, const Points& alpha, double inv_s2) {
    const long rows = y.rows();
    Points v = Points::Zero(rows, 3);
    for (long p = 0; p < rows; ++p) {
        const double px = y(p, 0), py = y(p, 1), pz = y(p, 2);
        double vx = 0, vy = 0, vz = 0;
        for (long j = 0; j < n; ++j) {
            const double dx = px - y(j, 0), dy = py - y(j, 1), dz = pz - y(j, 2);
            const double kv = std::exp(-(dx * dx + dy * dy + dz * dz) * inv_s2);
            vx += kv * alpha(j, 0), vy += kv * alpha(j, 1), vz += kv * alpha(j, 2);
        }
        v(p, 0) = vx, v(p, 1) = vy, v(p, 2) = vz;
    }
    return v;
}

void velocity_vjp(const Points& y, long n, const Points& alpha, double sigma, const Points& lambda, Points& g_y,
                  Points& g_alpha, double& g_sigma) {
    const double inv_s2 = 1.0 / (sigma * sigma);
    const double ks = 2.0 * inv_s2 / sigma;
    for (long p = 0; p < y.rows(); ++p) {
        const double lx = lambda(p, 0), ly = lambda(p, 1), lz = lambda(p, 2);
        if (lx == 0.0 && ly == 0.0 && lz == 0.0) continue;
        double gpx = 0, gpy = 0, gpz = 0;
        for (long j = 0; j < n; ++j) {
            const double dx = y(p, 0) - y(j, 0), dy = y(p, 1) - y(j, 1), dz = y(p, 2) - y(j, 2);
            const double d2 = dx * dx + dy * dy + dz * dz;
            const double kv = std::exp(-d2 * inv_s2);
            g_alpha(j, 0) += kv * lx, g_alpha(j, 1) += kv * ly, g_alpha(j, 2) += kv * lz;
            const double w = (lx * alpha(j, 0) + ly * alpha(j, 1) + lz * alpha(j, 2)) * kv;
            const double c = -2.0 * inv_s2 * w;
            gpx += c * dx, gpy += c * dy, gpz += c * dz;
            g_y(j, 0) -= c * dx, g_y(j, 1) -= c * dy, g_y(j, 2) -= c * dz;
            g_sigma += w * d2 * ks;
        }
        g_y(p, 0) += gpx, g_y(p, 1) += gpy, g_y(p, 2) += gpz;
    }
}

namespace {

Points interp(const std::vector<Points>& alphas, long j, double w) {
    if (w == 0.0) return alphas[j];
    if (w == 1.0) return alphas[j + 1];
    return (1.0 - w) * alphas[j] + w * alphas[j + 1];
}

}  // namespace

Points integrate(const Points& initial, long n, const std::vector<double>& grid, const std::vector<Points>& alphas,
                 double sigma, int substeps, FlowTape* tape, std::vector<Points>* grid_states) {
    if (grid.size() < 2 || alphas.size() != grid.size()) throw ValidationError("flow grid and momenta disagree");
    if (substeps < 1) throw ValidationError("substeps must be >= 1");
    if (!(sigma > 0)) throw ValidationError("sigma_v must be positive");
    const double inv_s2 = 1.0 / (sigma * sigma);
    if (tape) {
        tape->grid = grid;
        tape->alphas = alphas;
        tape->n_control = n;
        tape->substeps = substeps;
        tape->sigma = sigma;
        tape->step_states.clear();
    }
    Points x = initial;
    if (grid_states) {
        grid_states->clear();
        grid_states->push_back(x.topRows(n));
    }
    for (std::size_t j = 0; j + 1 < grid.size(); ++j) {
        const double h = (grid[j + 1] - grid[j]) / substeps;
        for (int s = 0; s < substeps; ++s) {
            if (tape) tape->step_states.push_back(x);
            const double w0 = static_cast<double>(s) / substeps;
            const double wm = (s + 0.5) / substeps;
            const double w1 = static_cast<double>(s + 1) / substeps;
            const Points a0 = interp(alphas, j, w0), am = interp(alphas, j, wm), a1 = interp(alphas, j, w1);
            const Points k1 = velocity(x, n, a0, inv_s2);
            const Points k2 = velocity(x + 0.5 * h * k1, n, am, inv_s2);
            const Points k3 = velocity(x + 0.5 * h * k2, n, am, inv_s2);
            const Points k4 = velocity(x + h * k3, n, a1, inv_s2);
            x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if (!x.allFinite()) {
                throw NumericalError("flow blew up in RK4 step " + std::to_string(j * substeps + s) +
                                     "; reduce momenta or increase steps");
            }
        }
        if (grid_states) grid_states->push_back(x.topRows(n));
    }
    return x;
}

FlowGradient integrate_backward(const FlowTape& tape, const Points& d_final) {
    const long n = tape.n_control;
    const double sigma = tape.sigma;
    const double inv_s2 = 1.0 / (sigma * sigma);
    const int S = tape.substeps;
    FlowGradient out;
    out.d_alphas.assign(tape.alphas.size(), Points::Zero(n, 3));
    Points lam = d_final;
    const long rows = d_final.rows();
    for (long j = static_cast<long>(tape.grid.size()) - 2; j >= 0; --j) {
        const double h = (tape.grid[j + 1] - tape.grid[j]) / S;
        for (int s = S - 1; s >= 0; --s) {
            const Points& x = tape.step_states[j * S + s];
            const double w0 = static_cast<double>(s) / S, wm = (s + 0.5) / S, w1 = static_cast<double>(s + 1) / S;
            const Points a0 = interp(tape.alphas, j, w0), am = interp(tape.alphas, j, wm),
                         a1 = interp(tape.alphas, j, w1);
            const Points y1 = x;
            const Points k1 = velocity(y1, n, a0, inv_s2);
            const Points y2 = x + 0.5 * h * k1;
            const Points k2 = velocity(y2, n, am, inv_s2);
            const Points y3 = x + 0.5 * h * k2;
            const Points k3 = velocity(y3, n, am, inv_s2);
            const Points y4 = x + h * k3;

            Points dk1 = (h / 6.0) * lam, dk2 = (h / 3.0) * lam, dk3 = (h / 3.0) * lam;
            const Points dk4 = (h / 6.0) * lam;
            Points dx = lam;
            Points ga0 = Points::Zero(n, 3), gam = Points::Zero(n, 3), ga1 = Points::Zero(n, 3);

            Points gy = Points::Zero(rows, 3);
            velocity_vjp(y4, n, a1, sigma, dk4, gy, ga1, out.d_sigma);
            dx += gy;
            dk3 += h * gy;

            gy.setZero();
            velocity_vjp(y3, n, am, sigma, dk3, gy, gam, out.d_sigma);
            dx += gy;
            dk2 += 0.5 * h * gy;

            gy.setZero();
            velocity_vjp(y2, n, am, sigma, dk2, gy, gam, out.d_sigma);
            dx += gy;
            dk1 += 0.5 * h * gy;

            gy.setZero();
            velocity_vjp(y1, n, a0, sigma, dk1, gy, ga0, out.d_sigma);
            dx += gy;

            out.d_alphas[j] += (1.0 - w0) * ga0 + (1.0 - wm) * gam + (1.0 - w1) * ga1;
            out.d_alphas[j + 1] += w0 * ga0 + wm * gam + w1 * ga1;
            lam = std::move(dx);
        }
    }
    out.d_initial = std::move(lam);
    return out;
}

}  // namespace flow_detail

void Template::validate() const {
    if (control_points.rows() < 1) throw ValidationError("template needs at least one control point");
    const Eigen::RowVector3d lo = mesh.vertices().colwise().minCoeff(), hi = mesh.vertices().colwise().maxCoeff();
    const Eigen::RowVector3d mid = 0.5 * (lo + hi), half = 0.75 * (hi - lo);
    for (long i = 0; i < control_points.rows(); ++i) {
        const Eigen::RowVector3d d = (control_points.row(i) - mid).cwiseAbs();
        if ((d.array() > half.array() + 1e-9).any()) {
            throw ValidationError("control point " + std::to_string(i) + " lies outside 1.5x the mesh bounding box");
        }
    }
}

MomentumPath MomentumPath::uniform(long n_points, int steps) {
    if (steps < 1) throw ValidationError("momentum path needs at least one step");
    MomentumPath p;
    for (int i = 0; i <= steps; ++i) p.grid.push_back(static_cast<double>(i) / steps);
    p.alphas.assign(steps + 1, Points::Zero(n_points, 3));
    return p;
}

MomentumPath MomentumPath::constant(const Points& alpha, int steps) {
    MomentumPath p = uniform(alpha.rows(), steps);
    for (auto& a : p.alphas) a = alpha;
    return p;
}

void MomentumPath::validate(long n_points) const {
    if (grid.size() < 2) throw ValidationError("momentum grid needs at least two stamps");
    if (grid.front() != 0.0 || grid.back() != 1.0) throw ValidationError("momentum grid must span [0, 1]");
    for (std::size_t i = 1; i < grid.size(); ++i) {
        if (!(grid[i] > grid[i - 1])) throw ValidationError("momentum grid must be strictly increasing");
    }
    if (alphas.size() != grid.size()) throw ValidationError("one momentum block per grid stamp required");
    for (const auto& a : alphas) {
        if (a.rows() != n_points) throw ValidationError("momentum block has wrong number of points");
    }
}

Vec3 velocity_at(const Vec3& x, const Points& ctrl, const Points& alphas, const SpatialKernelParams& k) {
    if (ctrl.rows() != alphas.rows()) throw ValidationError("control points and momenta disagree in count");
    Vec3 v = Vec3::Zero();
    const double inv = 1.0 / (k.sigma_v * k.sigma_v);
    for (long i = 0; i < ctrl.rows(); ++i) {
        const Vec3 d = x - ctrl.row(i).transpose();
        v += std::exp(-d.squaredNorm() * inv) * alphas.row(i).transpose();
    }
    return v;
}

Trajectory shoot(const Points& ctrl, const MomentumPath& path, const SpatialKernelParams& k, int substeps) {
    path.validate(ctrl.rows());
    Trajectory t;
    t.endpoint = flow_detail::integrate(ctrl, ctrl.rows(), path.grid, path.alphas, k.sigma_v, substeps, nullptr,
                                        &t.states);
    return t;
}

TriMesh deform_mesh(const Template& tpl, const MomentumPath& path, const SpatialKernelParams& k, int substeps) {
    const long n = tpl.size();
    path.validate(n);
    Points state(n + tpl.mesh.num_vertices(), 3);
    state << tpl.control_points, tpl.mesh.vertices();
    const Points end = flow_detail::integrate(state, n, path.grid, path.alphas, k.sigma_v, substeps);
    try {
        return tpl.mesh.with_vertices(end.bottomRows(tpl.mesh.num_vertices()));
    } catch (const ValidationError& e) {
        throw NumericalError(std::string("deformation collapsed a face: ") + e.what());
    }
}

double inverse_flow_check(const Points& ctrl, const MomentumPath& path, const SpatialKernelParams& k, int substeps) {
    path.validate(ctrl.rows());
    const long n = ctrl.rows();
    const Points end = flow_detail::integrate(ctrl, n, path.grid, path.alphas, k.sigma_v, substeps);
    std::vector<double> rgrid(path.grid.rbegin(), path.grid.rend());
    std::vector<Points> ralpha(path.alphas.rbegin(), path.alphas.rend());
    const Points back = flow_detail::integrate(end, n, rgrid, ralpha, k.sigma_v, substeps);
    return (back - ctrl).rowwise().norm().maxCoeff();
}

std::vector<int> farthest_point_sample(const Points& pts, long count) {
    const long n = pts.rows();
    if (n == 0 || count < 1) throw ValidationError("farthest point sampling needs points and a positive count");
    count = std::min(count, n);
    const Eigen::RowVector3d centroid = pts.colwise().mean();
    int start = 0;
    (pts.rowwise() - centroid).rowwise().squaredNorm().minCoeff(&start);
    std::vector<int> chosen{start};
    Eigen::VectorXd dist = (pts.rowwise() - pts.row(start)).rowwise().squaredNorm();
    while (static_cast<long>(chosen.size()) < count) {
        int next = 0;
        dist.maxCoeff(&next);
        chosen.push_back(next);
        dist = dist.cwiseMin((pts.rowwise() - pts.row(next)).rowwise().squaredNorm());
    }
    return chosen;
}

Template make_template(const TriMesh& mesh, long n_control) {
    const auto idx = farthest_point_sample(mesh.vertices(), n_control);
    Points ctrl(idx.size(), 3);
    for (std::size_t i = 0; i < idx.size(); ++i) ctrl.row(i) = mesh.vertices().row(idx[i]);
    return Template{std::move(ctrl), mesh};
}

SpatialKernelParams default_spatial_kernel(const TriMesh& reference) {
    return SpatialKernelParams{0.3 * bbox_diagonal(reference.vertices())};
}

}  // namespace gpdssm
