#pragma once

#include "gpdssm/common.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

namespace gpdssm {

using Face = std::array<int, 3>;

/// Faces with area at or below this (mm^2) are considered degenerate.
inline constexpr double kMinFaceArea = 1e-12;

/// Triangulated surface. Construction validates indices, repeated vertices and
/// face areas; an invalid mesh never exists.
class TriMesh {
public:
    TriMesh() = default;
    TriMesh(Points vertices, std::vector<Face> faces, std::optional<Eigen::VectorXd> scalar = std::nullopt);

    /// Builds a mesh after dropping faces with repeated vertices or
    /// non-positive area. `dropped` receives the number of removed faces.
    static TriMesh sanitized(Points vertices, std::vector<Face> faces, std::optional<Eigen::VectorXd> scalar,
                             std::size_t* dropped);

    const Points& vertices() const noexcept { return vertices_; }
    const std::vector<Face>& faces() const noexcept { return faces_; }
    const std::optional<Eigen::VectorXd>& scalar() const noexcept { return scalar_; }

    long num_vertices() const noexcept { return vertices_.rows(); }
    long num_faces() const noexcept { return static_cast<long>(faces_.size()); }
    bool empty() const noexcept { return faces_.empty(); }

    /// Same connectivity, new vertex positions (validated).
    TriMesh with_vertices(Points vertices) const;
    TriMesh with_scalar(Eigen::VectorXd scalar) const;
    /// Reverses the winding of every face.
    TriMesh flipped() const;
    TriMesh transformed(const Mat3& linear, const Vec3& translation) const;

private:
    Points vertices_;
    std::vector<Face> faces_;
    std::optional<Eigen::VectorXd> scalar_;
};

struct Landmarks {
    Points points;
};

/// Per-face centers, half cross-product normals and areas.
struct FaceGeometry {
    Points centers;
    Points normals;  // unnormalized, norm == area
    Eigen::VectorXd areas;
};

FaceGeometry face_geometry(const TriMesh& mesh);
double total_area(const TriMesh& mesh);

/// Parameters of the synthetic acetabular cup. The cup is a spherical cap of
/// `radius` with its pole on +z, heights scaled by `depth_scale` and the polar
/// extent shortened by `rim_retraction`.
struct CupParams {
    double depth_scale = 1.0;
    double rim_retraction = 0.0;
    double radial_noise_sd = 0.0;
    int rings = 20;
    int sectors = 40;
    std::uint64_t seed = 0;
    double radius = 25.0;
};

TriMesh generate_cup(const CupParams& params);

/// Random parameters for one synthetic subject. Controls draw depth_scale from
/// U(0.85, 1.05) and rim_retraction from U(0, 0.05); dysplastic cups from
/// U(0.45, 0.70) and U(0.10, 0.25).
CupParams sample_cup_params(bool dysplastic, std::mt19937_64& rng, int rings = 20, int sectors = 40,
                            double radial_noise_sd = 0.1);

/// Range of the depth_scale draw for each class.
struct DepthRange {
    double lo;
    double hi;
};
DepthRange depth_range(bool dysplastic);

/// depth_scale < 0.75 is labelled dysplastic.
inline bool is_dysplastic_depth(double depth_scale) { return depth_scale < 0.75; }

/// Vertex indices of the outermost ring of a generated cup.
std::vector<int> cup_rim_indices(const CupParams& params);

/// Plane n.x = offset with unit n; n points into the +z half space (ties: +x, then +y).
struct Plane {
    Vec3 normal;
    double offset = 0.0;
};

Plane fit_plane(const Landmarks& landmarks);

/// Components under shared-edge face adjacency, largest first.
std::vector<TriMesh> connected_components(const TriMesh& mesh);

}  // namespace gpdssm
