#pragma once

#include "gpdssm/archive.hpp"
#include "gpdssm/flow.hpp"
#include "gpdssm/varifold.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <vector>

namespace gpdssm {

/// H = 1/2 sum_ij K(x_i, x_j) <a_i, a_j>
double hamiltonian(const Points& x, const Points& alpha, const SpatialKernelParams& k);

struct GeodesicTrajectory {
    std::vector<Points> positions;  // control points at every step, including t = 0
    std::vector<Points> momenta;
    Points endpoint;
};

/// RK4 integration of the Hamiltonian particle system
///   dx_i/dt = sum_j K(x_i, x_j) a_j,   da_i/dt = -sum_j grad_1 K(x_i, x_j) <a_i, a_j>.
GeodesicTrajectory geodesic_shoot(const Points& x0, const Points& alpha0, const SpatialKernelParams& k,
                                  int steps = 10);

/// Template mesh advected along the geodesic generated by alpha0.
TriMesh geodesic_deform(const Template& tpl, const Points& alpha0, const SpatialKernelParams& k, int steps = 10);

/// beta * d^2(geodesic_deform(tpl, alpha0), target) + lambda * H(x0, alpha0).
/// `grad` (optional) receives d/d alpha0.
double registration_objective(const Template& tpl, const Points& alpha0, const SpatialKernelParams& k, int steps,
                              const VarifoldTarget& target, double beta, double lambda, Points* grad = nullptr);

struct AtlasConfig {
    double beta_scale = 1.0;  // beta = beta_scale / median d^2(S_i, template)
    double lambda = 0.0;      // <= 0: 1e-3 * beta
    double lr = 0.01;         // initial Adam step in units of sigma_v, cosine-decayed to 1%
    int iters = 200;
    int time_steps = 10;
    std::uint64_t seed = 0;

    void validate() const;
};

struct AtlasState {
    Template tpl;
    SpatialKernelParams spatial;
    VarifoldKernelParams fidelity;
    std::vector<Points> momenta;  // one n x 3 initial momentum per training shape
    double beta = 1.0;
    double lambda = 1e-3;
    int time_steps = 10;

    void validate() const;
    Archive to_archive() const;
    static AtlasState from_archive(const Archive& a);
};

struct AtlasFit {
    AtlasState state;
    std::vector<double> trace;  // summed objective over shapes per iteration
    bool diverged = false;
};

AtlasFit fit_atlas(const std::vector<TriMesh>& train, const Template& tpl, const SpatialKernelParams& spatial,
                   const VarifoldKernelParams& fidelity, const AtlasConfig& cfg);

struct Registration {
    Points momenta;
    std::vector<double> trace;
    bool diverged = false;
};

/// Fits initial momenta for one shape with the atlas's objective and weights.
Registration register_shape(const AtlasState& atlas, const TriMesh& shape, const AtlasConfig& cfg);

/// Dual PCA on flattened initial momenta.
struct MomentaPca {
    Eigen::VectorXd mean;        // 3n
    Eigen::MatrixXd basis;       // 3n x k, orthonormal columns (zero for null components)
    Eigen::VectorXd variances;   // k
    Eigen::MatrixXd embeddings;  // N x k

    Eigen::VectorXd project(const Points& momenta) const;
    Points unproject(const Eigen::VectorXd& embedding) const;
};

/// k is capped at min(N - 1, 3n).
MomentaPca momenta_pca(const std::vector<Points>& momenta, int k);

Eigen::VectorXd flatten(const Points& p);
Points unflatten(const Eigen::VectorXd& v);

}  // namespace gpdssm
