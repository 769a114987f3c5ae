#pragma once

#include "gpdssm/mesh.hpp"
#include "gpdssm/varifold.hpp"

#include <vector>

namespace gpdssm {

/// x -> scale * R(quaternion) * x + translation. Quaternion stored (w, x, y, z).
struct SimilarityTransform {
    Eigen::Vector4d quaternion{1.0, 0.0, 0.0, 0.0};
    double scale = 1.0;
    Vec3 translation = Vec3::Zero();

    Mat3 rotation() const;
    Points apply(const Points& p) const;
    TriMesh apply(const TriMesh& m) const;
    SimilarityTransform inverse() const;
    /// (a.then(b))(x) = b(a(x))
    SimilarityTransform then(const SimilarityTransform& b) const;
    void validate() const;
};

/// Rotation for a nonzero quaternion (w, x, y, z); normalizes internally.
Mat3 quat_to_rotation(const Eigen::Vector4d& q);
Eigen::Vector4d rotation_to_quat(const Mat3& r);

struct Ball {
    Vec3 center = Vec3::Zero();
    double radius = 0.0;
};

/// Smallest enclosing ball (Welzl). Input order does not matter.
Ball minimal_enclosing_ball(const Points& points);

struct ExtractionReport {
    Plane plane;
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();
    Ball ball;
    long components_dropped = 0;
};

/// Cuts the acetabular cup out of a surface given rim landmarks. The result
/// is expressed in the canonical frame: rim plane z = 0, landmark centroid at
/// the origin, cup on the +z side.
TriMesh extract_cup(const TriMesh& mesh, const Landmarks& rim, ExtractionReport* report = nullptr);

struct AlignmentConfig {
    double tolerance = 0.0;  // <= 0: 1e-6 * |mu_target|^2
    int max_iters = 500;
    double step_size = 1e-2;
    VarifoldKernelParams kernel{0.0};  // sigma_pos <= 0: default for the target
    int starts = 4;                    // identity plus 180 degree flips about x, y, z
    int probe_iters = 100;             // iterations per start before committing to the best
    bool monotone = false;             // reject steps that increase the energy

    void validate() const;
};

struct AlignmentResult {
    SimilarityTransform transform;
    TriMesh aligned;
    double energy = 0.0;
    int iterations = 0;
    std::vector<double> trace;  // energy of every accepted iterate of the committed start
};

/// Similarity transform g minimising |mu_target - mu_{g(moving)}|^2.
AlignmentResult rigid_align(const TriMesh& moving, const TriMesh& target, const AlignmentConfig& cfg = {});

}  // namespace gpdssm
