#pragma once

#include "gpdssm/mesh.hpp"

#include <vector>

namespace gpdssm {

struct SpatialKernelParams {
    double sigma_v = 1.0;  // mm
};

/// Deformation template: a reference surface plus the control points that
/// carry the momenta. Every mesh vertex is advected by the field the control
/// points induce.
struct Template {
    Points control_points;
    TriMesh mesh;

    long size() const noexcept { return control_points.rows(); }
    void validate() const;
};

/// Time-dependent momenta sampled on a grid of [0, 1]; linear in between.
struct MomentumPath {
    std::vector<double> grid;
    std::vector<Points> alphas;  // one n x 3 block per grid stamp

    static MomentumPath uniform(long n_points, int steps);  // zero momenta
    static MomentumPath constant(const Points& alpha, int steps);
    long steps() const noexcept { return static_cast<long>(grid.size()) - 1; }
    void validate(long n_points) const;
};

Vec3 velocity_at(const Vec3& x, const Points& control_points, const Points& alphas, const SpatialKernelParams& k);

struct Trajectory {
    std::vector<Points> states;  // control points at every grid stamp
    Points endpoint;
};

/// RK4 integration of d/dt x_i = sum_j K(x_i, x_j) alpha_j(t); `substeps`
/// RK4 steps per grid interval.
Trajectory shoot(const Points& control_points, const MomentumPath& path, const SpatialKernelParams& k,
                 int substeps = 1);

/// Advects every template vertex together with the control points.
TriMesh deform_mesh(const Template& tpl, const MomentumPath& path, const SpatialKernelParams& k, int substeps = 1);

/// Flows forward to t=1 and back along the reversed, negated field; returns the
/// largest displacement of a control point from its start.
double inverse_flow_check(const Points& control_points, const MomentumPath& path, const SpatialKernelParams& k,
                          int substeps = 1);

/// Farthest-point sample of `count` rows of `points`, starting from the point
/// closest to the centroid. Returns row indices.
std::vector<int> farthest_point_sample(const Points& points, long count);

Template make_template(const TriMesh& mesh, long n_control);

/// Default bandwidth: 0.3 x template bounding-box diagonal.
SpatialKernelParams default_spatial_kernel(const TriMesh& reference);

namespace flow_detail {

/// Co-integrated flow of `n` control points (first n rows of the state) and
/// any number of passive points (remaining rows). The grid may be increasing
/// or decreasing; a decreasing grid integrates backwards in time.
struct FlowTape {
    std::vector<double> grid;
    std::vector<Points> alphas;
    long n_control = 0;
    int substeps = 1;
    double sigma = 1.0;
    std::vector<Points> step_states;  // state at the start of every RK4 step
};

Points integrate(const Points& initial, long n_control, const std::vector<double>& grid,
                 const std::vector<Points>& alphas, double sigma, int substeps, FlowTape* tape = nullptr,
                 std::vector<Points>* grid_states = nullptr);

struct FlowGradient {
    std::vector<Points> d_alphas;
    double d_sigma = 0.0;
    Points d_initial;
};

/// Reverse pass through the stored RK4 steps: gradient of a scalar loss given
/// d loss / d final state.
FlowGradient integrate_backward(const FlowTape& tape, const Points& d_final);

/// Velocities of every state row under the field of the first n rows.
Points velocity(const Points& state, long n_control, const Points& alpha, double inv_s2);

/// Vector-Jacobian product of velocity() with cotangent `lambda`; accumulates
/// into g_state, g_alpha and g_sigma.
void velocity_vjp(const Points& state, long n_control, const Points& alpha, double sigma, const Points& lambda,
                  Points& g_state, Points& g_alpha, double& g_sigma);

}  // namespace flow_detail

}  // namespace gpdssm
