#pragma once

#include "gpdssm/mesh.hpp"

namespace gpdssm {

/// Kernel-embedding view of a surface: one Dirac atom per face.
struct VarifoldRepr {
    Points centers;
    Points unit_normals;
    Eigen::VectorXd areas;

    long size() const noexcept { return areas.size(); }
};

struct VarifoldKernelParams {
    double sigma_pos = 1.0;  // mm
};

VarifoldRepr embed(const TriMesh& mesh);

/// <mu_a, mu_b> with a Gaussian position kernel exp(-|c-c'|^2 / sigma^2) and
/// the unoriented (squared cosine) normal kernel, weighted by areas.
double varifold_inner(const VarifoldRepr& a, const VarifoldRepr& b, const VarifoldKernelParams& k);

double varifold_sq_dist(const VarifoldRepr& a, const VarifoldRepr& b, const VarifoldKernelParams& k);

/// Gradient of varifold_sq_dist(embed(a_mesh), b) with respect to every vertex of a_mesh.
Points varifold_sq_dist_grad(const TriMesh& a_mesh, const VarifoldRepr& b, const VarifoldKernelParams& k);

/// A target whose self inner product is computed once and reused.
class VarifoldTarget {
public:
    VarifoldTarget() = default;
    VarifoldTarget(VarifoldRepr repr, const VarifoldKernelParams& k);

    const VarifoldRepr& repr() const noexcept { return repr_; }
    double self_energy() const noexcept { return self_; }
    const VarifoldKernelParams& kernel() const noexcept { return kernel_; }

private:
    VarifoldRepr repr_;
    VarifoldKernelParams kernel_;
    double self_ = 0.0;
};

/// Squared distance between the surface (vertices, faces) and `target`.
/// When `grad` is non-null it receives d/d(vertices), same shape as `vertices`.
/// This is the hot path used by alignment, model fitting and atlas fitting.
double varifold_energy(const Points& vertices, const std::vector<Face>& faces, const VarifoldTarget& target,
                       Points* grad = nullptr);

/// Default fidelity bandwidth: 0.25 x bounding-box diagonal.
VarifoldKernelParams default_varifold_kernel(const TriMesh& reference);

}  // namespace gpdssm
