#include "gpdssm/varifold.hpp"

#include <cmath>

namespace gpdssm {

namespace {

// Flat per-face arrays; faster inner loops than row access on Eigen matrices.
struct Atoms {
    std::vector<double> cx, cy, cz, nx, ny, nz, area;

    explicit Atoms(const VarifoldRepr& r) {
        const long n = r.size();
        cx.resize(n), cy.resize(n), cz.resize(n), nx.resize(n), ny.resize(n), nz.resize(n), area.resize(n);
        for (long i = 0; i < n; ++i) {
            cx[i] = r.centers(i, 0), cy[i] = r.centers(i, 1), cz[i] = r.centers(i, 2);
            nx[i] = r.unit_normals(i, 0), ny[i] = r.unit_normals(i, 1), nz[i] = r.unit_normals(i, 2);
            area[i] = r.areas[i];
        }
    }
    long size() const { return static_cast<long>(area.size()); }
};

VarifoldRepr embed_raw(const Points& v, const std::vector<Face>& faces) {
    const long nf = static_cast<long>(faces.size());
    VarifoldRepr r{Points(nf, 3), Points(nf, 3), Eigen::VectorXd(nf)};
    for (long i = 0; i < nf; ++i) {
        const Face& f = faces[i];
        const Vec3 p0 = v.row(f[0]), p1 = v.row(f[1]), p2 = v.row(f[2]);
        r.centers.row(i) = (p0 + p1 + p2) / 3.0;
        const Vec3 n = 0.5 * (p1 - p0).cross(p2 - p0);
        const double a = n.norm();
        if (!(a > 0.0)) throw NumericalError("degenerate face " + std::to_string(i) + " in varifold embedding");
        r.unit_normals.row(i) = n / a;
        r.areas[i] = a;
    }
    return r;
}

double inner(const Atoms& a, const Atoms& b, double inv_s2) {
    double total = 0.0;
    for (long f = 0; f < a.size(); ++f) {
        double row = 0.0;
        for (long g = 0; g < b.size(); ++g) {
            const double dx = a.cx[f] - b.cx[g], dy = a.cy[f] - b.cy[g], dz = a.cz[f] - b.cz[g];
            const double c = a.nx[f] * b.nx[g] + a.ny[f] * b.ny[g] + a.nz[f] * b.nz[g];
            row += std::exp(-(dx * dx + dy * dy + dz * dz) * inv_s2) * c * c * b.area[g];
        }
        total += row * a.area[f];
    }
    return total;
}

double self_inner(const Atoms& a, double inv_s2) {
    double total = 0.0;
    for (long f = 0; f < a.size(); ++f) {
        double row = 0.0;
        for (long g = f + 1; g < a.size(); ++g) {
            const double dx = a.cx[f] - a.cx[g], dy = a.cy[f] - a.cy[g], dz = a.cz[f] - a.cz[g];
            const double c = a.nx[f] * a.nx[g] + a.ny[f] * a.ny[g] + a.nz[f] * a.nz[g];
            row += std::exp(-(dx * dx + dy * dy + dz * dz) * inv_s2) * c * c * a.area[g];
        }
        total += a.area[f] * (2.0 * row + a.area[f]);
    }
    return total;
}

// Accumulates weight * d<a,b>/d(center_f, N_f) for every face f of a, where
// N_f is the unnormalized face normal. Pair derivative with respect to N_f is
// k * A_g * (2 cos n_g - cos^2 n_f); with respect to c_f it is
// -2/sigma^2 * k * cos^2 * A_f * A_g * (c_f - c_g).
void accumulate_pair_grad(const Atoms& a, const Atoms& b, double inv_s2, double weight, bool same, Points& gc,
                          Points& gn, double* value) {
    double total = 0.0;
    for (long f = 0; f < a.size(); ++f) {
        double gcx = 0, gcy = 0, gcz = 0, gnx = 0, gny = 0, gnz = 0, row = 0;
        const long start = same ? f + 1 : 0;
        for (long g = start; g < b.size(); ++g) {
            const double dx = a.cx[f] - b.cx[g], dy = a.cy[f] - b.cy[g], dz = a.cz[f] - b.cz[g];
            const double c = a.nx[f] * b.nx[g] + a.ny[f] * b.ny[g] + a.nz[f] * b.nz[g];
            const double k = std::exp(-(dx * dx + dy * dy + dz * dz) * inv_s2);
            const double kab = k * b.area[g];
            const double kc2 = kab * c * c;
            row += kc2;
            // normal part, face f
            const double two_c = 2.0 * c * kab;
            gnx += two_c * b.nx[g] - kc2 * a.nx[f];
            gny += two_c * b.ny[g] - kc2 * a.ny[f];
            gnz += two_c * b.nz[g] - kc2 * a.nz[f];
            // center part, face f (times A_f below)
            const double s = -2.0 * inv_s2 * kc2;
            gcx += s * dx, gcy += s * dy, gcz += s * dz;
            if (same) {
                // symmetric partner: face g of a sees face f
                const double kaf = k * a.area[f];
                const double kc2g = kaf * c * c;
                const double two_cg = 2.0 * c * kaf;
                gn(g, 0) += weight * (two_cg * a.nx[f] - kc2g * b.nx[g]);
                gn(g, 1) += weight * (two_cg * a.ny[f] - kc2g * b.ny[g]);
                gn(g, 2) += weight * (two_cg * a.nz[f] - kc2g * b.nz[g]);
                const double sg = -2.0 * inv_s2 * kc2 * a.area[f];
                gc(g, 0) -= weight * sg * dx;
                gc(g, 1) -= weight * sg * dy;
                gc(g, 2) -= weight * sg * dz;
            }
        }
        const double af = a.area[f];
        gn(f, 0) += weight * gnx, gn(f, 1) += weight * gny, gn(f, 2) += weight * gnz;
        gc(f, 0) += weight * gcx * af, gc(f, 1) += weight * gcy * af, gc(f, 2) += weight * gcz * af;
        if (same) {
            // diagonal pair: slot derivative of A_f^2 wrt N_f is N_f
            gn(f, 0) += weight * af * a.nx[f];
            gn(f, 1) += weight * af * a.ny[f];
            gn(f, 2) += weight * af * a.nz[f];
            total += af * (2.0 * row + af);
        } else {
            total += af * row;
        }
    }
    if (value) *value = total;
}

}  // namespace

VarifoldRepr embed(const TriMesh& mesh) { return embed_raw(mesh.vertices(), mesh.faces()); }

double varifold_inner(const VarifoldRepr& a, const VarifoldRepr& b, const VarifoldKernelParams& k) {
    if (a.size() == 0 || b.size() == 0) throw ValidationError("varifold of an empty surface");
    return inner(Atoms(a), Atoms(b), 1.0 / (k.sigma_pos * k.sigma_pos));
}

double varifold_sq_dist(const VarifoldRepr& a, const VarifoldRepr& b, const VarifoldKernelParams& k) {
    if (a.size() == 0 || b.size() == 0) throw ValidationError("varifold of an empty surface");
    const double inv = 1.0 / (k.sigma_pos * k.sigma_pos);
    const Atoms aa(a), bb(b);
    return std::max(0.0, self_inner(aa, inv) - 2.0 * inner(aa, bb, inv) + self_inner(bb, inv));
}

VarifoldTarget::VarifoldTarget(VarifoldRepr repr, const VarifoldKernelParams& k) : repr_(std::move(repr)), kernel_(k) {
    if (repr_.size() == 0) throw ValidationError("varifold target is empty");
    if (!(k.sigma_pos > 0)) throw ValidationError("sigma_pos must be positive");
    self_ = self_inner(Atoms(repr_), 1.0 / (k.sigma_pos * k.sigma_pos));
}

double varifold_energy(const Points& vertices, const std::vector<Face>& faces, const VarifoldTarget& target,
                       Points* grad) {
    const VarifoldRepr a = embed_raw(vertices, faces);
    const Atoms aa(a), bb(target.repr());
    const double s = target.kernel().sigma_pos;
    const double inv = 1.0 / (s * s);
    if (!grad) return self_inner(aa, inv) - 2.0 * inner(aa, bb, inv) + target.self_energy();

    const long nf = a.size();
    Points gc = Points::Zero(nf, 3), gn = Points::Zero(nf, 3);
    double self = 0.0, cross = 0.0;
    // d|a|^2/dN_f = 2 sum_g d pair/dN_f over the full symmetric sum; the
    // one-sided loop adds each off-diagonal pair to both faces.
    accumulate_pair_grad(aa, aa, inv, 2.0, true, gc, gn, &self);
    accumulate_pair_grad(aa, bb, inv, -2.0, false, gc, gn, &cross);

    grad->setZero(vertices.rows(), 3);
    for (long i = 0; i < nf; ++i) {
        const Face& f = faces[i];
        const Vec3 p0 = vertices.row(f[0]), p1 = vertices.row(f[1]), p2 = vertices.row(f[2]);
        const Vec3 gN = gn.row(i);
        const Vec3 gC = gc.row(i) / 3.0;
        // N = 0.5 (e1 x e2): dN.G = 0.5 (de1 . (e2 x G) + de2 . (G x e1))
        const Vec3 e1 = p1 - p0, e2 = p2 - p0;
        const Vec3 g1 = 0.5 * e2.cross(gN);
        const Vec3 g2 = 0.5 * gN.cross(e1);
        grad->row(f[0]) += (gC - g1 - g2).transpose();
        grad->row(f[1]) += (gC + g1).transpose();
        grad->row(f[2]) += (gC + g2).transpose();
    }
    return self - 2.0 * cross + target.self_energy();
}

Points varifold_sq_dist_grad(const TriMesh& a_mesh, const VarifoldRepr& b, const VarifoldKernelParams& k) {
    VarifoldTarget target(b, k);
    Points g;
    varifold_energy(a_mesh.vertices(), a_mesh.faces(), target, &g);
    return g;
}

VarifoldKernelParams default_varifold_kernel(const TriMesh& reference) {
    return VarifoldKernelParams{0.25 * bbox_diagonal(reference.vertices())};
}

}  // namespace gpdssm
