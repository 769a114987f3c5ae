#include "gpdssm/preprocess.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

namespace gpdssm {

Mat3 quat_to_rotation(const Eigen::Vector4d& q) {
    const double n = q.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw ValidationError("quaternion must be nonzero and finite");
    const double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

Eigen::Vector4d rotation_to_quat(const Mat3& r) {
    Eigen::Quaterniond q(r);
    q.normalize();
    Eigen::Vector4d out(q.w(), q.x(), q.y(), q.z());
    return out[0] < 0 ? Eigen::Vector4d(-out) : out;
}

Mat3 SimilarityTransform::rotation() const { return quat_to_rotation(quaternion); }

Points SimilarityTransform::apply(const Points& p) const {
    Points out = scale * (p * rotation().transpose());
    out.rowwise() += translation.transpose();
    return out;
}

TriMesh SimilarityTransform::apply(const TriMesh& m) const { return m.with_vertices(apply(m.vertices())); }

SimilarityTransform SimilarityTransform::inverse() const {
    SimilarityTransform inv;
    const Eigen::Vector4d q = quaternion.normalized();
    inv.quaternion = Eigen::Vector4d(q[0], -q[1], -q[2], -q[3]);
    inv.scale = 1.0 / scale;
    inv.translation = -(rotation().transpose() * translation) / scale;
    return inv;
}

SimilarityTransform SimilarityTransform::then(const SimilarityTransform& b) const {
    SimilarityTransform out;
    const Mat3 r = b.rotation() * rotation();
    out.quaternion = rotation_to_quat(r);
    out.scale = scale * b.scale;
    out.translation = b.scale * (b.rotation() * translation) + b.translation;
    return out;
}

void SimilarityTransform::validate() const {
    if (std::abs(quaternion.norm() - 1.0) > 1e-9) throw ValidationError("transform quaternion is not unit");
    if (!(scale > 0.0) || !std::isfinite(scale)) throw ValidationError("transform scale must be positive");
    if (!translation.allFinite()) throw ValidationError("transform translation must be finite");
}

// ---------------------------------------------------------------------------
// Minimal enclosing ball

namespace {

bool inside(const Ball& b, const Vec3& p) {
    return (p - b.center).norm() <= b.radius * (1.0 + 1e-12) + 1e-12;
}

Ball ball_2(const Vec3& a, const Vec3& b) { return {0.5 * (a + b), 0.5 * (a - b).norm()}; }

// Smallest ball with all given points (<= 4) on its boundary when that is
// well defined, otherwise the smallest ball containing them.
Ball enclosing_small(const std::vector<Vec3>& pts);

Ball ball_3(const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 u = b - a, v = c - a, w = u.cross(v);
    const double w2 = w.squaredNorm();
    if (w2 < 1e-20 * std::pow(std::max(u.squaredNorm(), v.squaredNorm()), 2)) {
        // collinear: the two extreme points decide
        Ball best = ball_2(a, b);
        for (const Ball& cand : {ball_2(a, c), ball_2(b, c)})
            if (cand.radius > best.radius) best = cand;
        return best;
    }
    const Vec3 off = (u.squaredNorm() * v.cross(w) + v.squaredNorm() * w.cross(u)) / (2.0 * w2);
    return {a + off, off.norm()};
}

Ball ball_4(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
    Mat3 m;
    m.row(0) = (b - a).transpose();
    m.row(1) = (c - a).transpose();
    m.row(2) = (d - a).transpose();
    const double scale = std::max({m.row(0).norm(), m.row(1).norm(), m.row(2).norm()});
    if (std::abs(m.determinant()) < 1e-12 * scale * scale * scale) {
        return enclosing_small({a, b, c, d});
    }
    const Vec3 rhs(0.5 * (b - a).squaredNorm(), 0.5 * (c - a).squaredNorm(), 0.5 * (d - a).squaredNorm());
    const Vec3 off = m.fullPivLu().solve(rhs);
    return {a + off, off.norm()};
}

Ball enclosing_small(const std::vector<Vec3>& pts) {
    // brute force over boundary subsets of size 2 and 3 (coplanar fallback)
    Ball best{pts[0], std::numeric_limits<double>::infinity()};
    const int n = static_cast<int>(pts.size());
    auto consider = [&](const Ball& b) {
        if (b.radius >= best.radius) return;
        for (const auto& p : pts)
            if (!inside(b, p)) return;
        best = b;
    };
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            consider(ball_2(pts[i], pts[j]));
            for (int k = j + 1; k < n; ++k) consider(ball_3(pts[i], pts[j], pts[k]));
        }
    if (n == 1) best = {pts[0], 0.0};
    return best;
}

}  // namespace

Ball minimal_enclosing_ball(const Points& points) {
    const long n = points.rows();
    if (n == 0) throw ValidationError("enclosing ball of an empty point set");
    std::vector<Vec3> p(n);
    for (long i = 0; i < n; ++i) p[i] = points.row(i).transpose();
    std::mt19937_64 rng(0x5eed);
    std::shuffle(p.begin(), p.end(), rng);

    Ball b{p[0], 0.0};
    for (long i = 1; i < n; ++i) {
        if (inside(b, p[i])) continue;
        b = {p[i], 0.0};
        for (long j = 0; j < i; ++j) {
            if (inside(b, p[j])) continue;
            b = ball_2(p[i], p[j]);
            for (long k = 0; k < j; ++k) {
                if (inside(b, p[k])) continue;
                b = ball_3(p[i], p[j], p[k]);
                for (long l = 0; l < k; ++l) {
                    if (inside(b, p[l])) continue;
                    b = ball_4(p[i], p[j], p[k], p[l]);
                }
            }
        }
    }
    return b;
}

// ---------------------------------------------------------------------------
// Cup extraction

namespace {

// Rotation taking unit vector n onto +z.
Mat3 rotation_to_z(const Vec3& n) {
    const Vec3 z(0, 0, 1);
    const double c = n.dot(z);
    if (c < -1.0 + 1e-12) return Eigen::AngleAxisd(M_PI, Vec3::UnitX()).toRotationMatrix();
    return Eigen::Quaterniond::FromTwoVectors(n, z).toRotationMatrix();
}

}  // namespace

TriMesh extract_cup(const TriMesh& mesh, const Landmarks& rim, ExtractionReport* report) {
    if (mesh.empty()) throw ValidationError("cannot extract a cup from an empty mesh");
    if (rim.points.rows() < 3) throw ValidationError("at least three rim landmarks are required");
    const Points& v = mesh.vertices();
    const double diag = bbox_diagonal(v);
    const double tol = 1e-6 * diag;

    for (long i = 0; i < rim.points.rows(); ++i) {
        const double d = (v.rowwise() - rim.points.row(i)).rowwise().norm().minCoeff();
        if (d > 0.05 * diag) {
            throw ValidationError("rim landmark " + std::to_string(i) + " lies " + std::to_string(d) +
                                  " mm from the surface (more than 5% of the bounding-box diagonal)");
        }
    }

    Plane plane = fit_plane(rim);
    const Vec3 centroid = rim.points.colwise().mean().transpose();
    const double rim_radius = (rim.points.rowwise() - centroid.transpose()).rowwise().norm().maxCoeff();

    // The cup lies on the side of the rim plane that rays cast from inside the
    // rim disk hit.
    long above = 0, below = 0;
    for (long i = 0; i < v.rows(); ++i) {
        const Vec3 d = v.row(i).transpose() - centroid;
        const double h = d.dot(plane.normal);
        const double radial = (d - h * plane.normal).norm();
        if (std::abs(h) <= tol || std::abs(h) > 2.0 * rim_radius || radial > 1.05 * rim_radius) continue;
        (h > 0 ? above : below)++;
    }
    if (below > above) {
        plane.normal = -plane.normal;
        plane.offset = -plane.offset;
    }

    const Mat3 rot = rotation_to_z(plane.normal);
    const Vec3 shift = -(rot * centroid);
    Points w = v * rot.transpose();
    w.rowwise() += shift.transpose();
    Points lm = rim.points * rot.transpose();
    lm.rowwise() += shift.transpose();

    std::vector<long> cand;
    for (long i = 0; i < w.rows(); ++i) {
        const double radial = w.row(i).head<2>().norm();
        if (w(i, 2) > tol && w(i, 2) <= 2.0 * rim_radius && radial <= 1.05 * rim_radius) cand.push_back(i);
    }
    Points ball_pts(lm.rows() + static_cast<long>(cand.size()), 3);
    ball_pts.topRows(lm.rows()) = lm;
    for (std::size_t c = 0; c < cand.size(); ++c) ball_pts.row(lm.rows() + c) = w.row(cand[c]);
    const Ball ball = minimal_enclosing_ball(ball_pts);

    std::vector<int> remap(w.rows(), -1);
    std::vector<long> kept;
    for (long i = 0; i < w.rows(); ++i) {
        const Vec3 p = w.row(i).transpose();
        if (p.z() >= -tol && (p - ball.center).norm() <= ball.radius * (1.0 + 1e-9) + tol) {
            remap[i] = static_cast<int>(kept.size());
            kept.push_back(i);
        }
    }
    std::vector<Face> faces;
    for (const Face& f : mesh.faces()) {
        if (remap[f[0]] >= 0 && remap[f[1]] >= 0 && remap[f[2]] >= 0) faces.push_back({remap[f[0]], remap[f[1]], remap[f[2]]});
    }
    if (faces.empty()) throw ValidationError("cup extraction failed: no faces left inside the rim ball");
    Points kv(kept.size(), 3);
    for (std::size_t i = 0; i < kept.size(); ++i) kv.row(i) = w.row(kept[i]);
    std::optional<Eigen::VectorXd> scalar;
    if (mesh.scalar()) {
        Eigen::VectorXd s(kept.size());
        for (std::size_t i = 0; i < kept.size(); ++i) s[i] = (*mesh.scalar())[kept[i]];
        scalar = s;
    }
    auto comps = connected_components(TriMesh::sanitized(kv, faces, scalar, nullptr));
    if (comps.empty()) throw ValidationError("cup extraction failed: filtered surface is empty");
    if (report) {
        report->plane = plane;
        report->rotation = rot;
        report->translation = shift;
        report->ball = ball;
        report->components_dropped = static_cast<long>(comps.size()) - 1;
    }
    return comps.front();
}

// ---------------------------------------------------------------------------
// Similarity alignment

void AlignmentConfig::validate() const {
    if (max_iters < 1) throw ValidationError("alignment max_iters must be positive");
    if (!(step_size > 0.0)) throw ValidationError("alignment step_size must be positive");
    if (starts < 1 || starts > 4) throw ValidationError("alignment starts must be in [1, 4]");
    if (probe_iters < 1) throw ValidationError("alignment probe_iters must be positive");
}

namespace {

constexpr int kParams = 8;  // quaternion(4), log scale, translation / diag (3)
using Theta = Eigen::Matrix<double, kParams, 1>;

struct AlignProblem {
    const TriMesh& moving;
    VarifoldTarget target;
    double length;  // translation unit

    SimilarityTransform transform(const Theta& th) const {
        SimilarityTransform t;
        t.quaternion = th.head<4>().normalized();
        t.scale = std::exp(th[4]);
        t.translation = length * th.tail<3>();
        return t;
    }

    double energy(const Theta& th, Theta* grad) const {
        const SimilarityTransform t = transform(th);
        const Mat3 r = t.rotation();
        const Points rv = moving.vertices() * r.transpose();
        Points moved = t.scale * rv;
        moved.rowwise() += t.translation.transpose();
        Points g;
        const double e = varifold_energy(moved, moving.faces(), target, grad ? &g : nullptr);
        if (!std::isfinite(e)) {
            throw NumericalError("alignment diverged (non-finite energy); reduce the step size");
        }
        if (grad) {
            const Vec3 dt = g.colwise().sum().transpose();
            const double ds = g.cwiseProduct(rv).sum();
            const Mat3 m = t.scale * g.transpose() * moving.vertices();  // dE/dR
            const Eigen::Vector4d q = t.quaternion;
            const double w = q[0], x = q[1], y = q[2], z = q[3];
            std::array<Mat3, 4> dr;
            dr[0] << 0, -z, y, z, 0, -x, -y, x, 0;
            dr[1] << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
            dr[2] << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
            dr[3] << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
            Eigen::Vector4d dq;
            for (int k = 0; k < 4; ++k) dq[k] = 2.0 * m.cwiseProduct(dr[k]).sum();
            const double qn = th.head<4>().norm();
            dq = (dq - q * q.dot(dq)) / qn;
            grad->head<4>() = dq;
            (*grad)[4] = t.scale * ds;
            grad->tail<3>() = length * dt;
        }
        return e;
    }
};

struct Run {
    Theta theta, m = Theta::Zero(), v = Theta::Zero();
    Theta best_theta;
    double best = std::numeric_limits<double>::infinity();
    double last_accepted = std::numeric_limits<double>::infinity();
    Theta last_theta, last_grad;
    double lr_mult = 1.0;
    int iter = 0;
    std::vector<double> trace;
};

// One optimiser iteration. Returns the energy evaluated at the current iterate.
double advance(const AlignProblem& pb, Run& run, const AlignmentConfig& cfg) {
    Theta g;
    double e = pb.energy(run.theta, &g);
    if (cfg.monotone && e > run.last_accepted) {
        run.theta = run.last_theta;
        g = run.last_grad;
        e = run.last_accepted;
        run.lr_mult *= 0.5;
    } else {
        run.last_accepted = e;
        run.last_theta = run.theta;
        run.last_grad = g;
        run.trace.push_back(e);
    }
    if (e < run.best) {
        run.best = e;
        run.best_theta = run.theta;
    }
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++run.iter;
    const double lr =
        cfg.step_size * run.lr_mult * std::max(0.01, 0.5 * (1.0 + std::cos(M_PI * run.iter / cfg.max_iters)));
    run.m = b1 * run.m + (1 - b1) * g;
    run.v = b2 * run.v + (1 - b2) * g.cwiseProduct(g);
    const Theta mh = run.m / (1 - std::pow(b1, run.iter));
    const Theta vh = run.v / (1 - std::pow(b2, run.iter));
    run.theta -= lr * (mh.array() / (vh.array().sqrt() + eps)).matrix();
    run.theta.head<4>().normalize();
    return e;
}

Vec3 area_centroid(const TriMesh& m, double* area) {
    const FaceGeometry g = face_geometry(m);
    *area = g.areas.sum();
    return (g.centers.transpose() * g.areas / *area);
}

}  // namespace

AlignmentResult rigid_align(const TriMesh& moving, const TriMesh& target, const AlignmentConfig& cfg_in) {
    if (moving.empty() || target.empty()) throw ValidationError("alignment needs non-empty meshes");
    AlignmentConfig cfg = cfg_in;
    cfg.validate();
    if (!(cfg.kernel.sigma_pos > 0)) cfg.kernel = default_varifold_kernel(target);
    AlignProblem pb{moving, VarifoldTarget(embed(target), cfg.kernel), bbox_diagonal(target.vertices())};
    const double delta = cfg.tolerance > 0 ? cfg.tolerance : 1e-6 * pb.target.self_energy();

    double am = 0, at = 0;
    const Vec3 cm = area_centroid(moving, &am), ct = area_centroid(target, &at);
    const double s0 = std::sqrt(at / am);
    const std::array<Eigen::Vector4d, 4> quats = {Eigen::Vector4d(1, 0, 0, 0), Eigen::Vector4d(0, 1, 0, 0),
                                                  Eigen::Vector4d(0, 0, 1, 0), Eigen::Vector4d(0, 0, 0, 1)};
    std::vector<Run> runs(cfg.starts);
    for (int s = 0; s < cfg.starts; ++s) {
        Theta th;
        th.head<4>() = quats[s];
        th[4] = std::log(s0);
        th.tail<3>() = (ct - s0 * quat_to_rotation(quats[s]) * cm) / pb.length;
        runs[s].theta = th;
        runs[s].best_theta = th;
    }

    const int probe = std::min(cfg.probe_iters, cfg.max_iters);
    int chosen = -1;
    for (int s = 0; s < cfg.starts && chosen < 0; ++s) {
        for (int it = 0; it < probe; ++it) {
            if (advance(pb, runs[s], cfg) < delta) {
                chosen = s;
                break;
            }
        }
    }
    if (chosen < 0) {
        chosen = 0;
        for (int s = 1; s < cfg.starts; ++s)
            if (runs[s].best < runs[chosen].best) chosen = s;
        Run& run = runs[chosen];
        while (run.iter < cfg.max_iters) {
            if (advance(pb, run, cfg) < delta) break;
        }
    }
    Run& run = runs[chosen];
    AlignmentResult res;
    res.transform = pb.transform(run.best_theta);
    res.aligned = res.transform.apply(moving);
    res.energy = run.best;
    res.iterations = 0;
    for (const auto& r : runs) res.iterations += r.iter;
    res.trace = std::move(run.trace);
    return res;
}

}  // namespace gpdssm
