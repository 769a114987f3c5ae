#include "gpdssm/mesh.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>

namespace gpdssm {

namespace {

double face_area(const Points& v, const Face& f) {
    const Vec3 e1 = v.row(f[1]) - v.row(f[0]);
    const Vec3 e2 = v.row(f[2]) - v.row(f[0]);
    return 0.5 * e1.cross(e2).norm();
}

bool repeated(const Face& f) { return f[0] == f[1] || f[1] == f[2] || f[0] == f[2]; }

void check_scalar(const std::optional<Eigen::VectorXd>& scalar, long n) {
    if (scalar && scalar->size() != n) {
        throw ValidationError("scalar field has " + std::to_string(scalar->size()) + " entries for " +
                              std::to_string(n) + " vertices");
    }
}

}  // namespace

TriMesh::TriMesh(Points vertices, std::vector<Face> faces, std::optional<Eigen::VectorXd> scalar)
    : vertices_(std::move(vertices)), faces_(std::move(faces)), scalar_(std::move(scalar)) {
    check_scalar(scalar_, vertices_.rows());
    if (!vertices_.allFinite()) throw ValidationError("mesh has non-finite vertex coordinates");
    for (std::size_t i = 0; i < faces_.size(); ++i) {
        const Face& f = faces_[i];
        for (int idx : f) {
            if (idx < 0 || idx >= vertices_.rows()) {
                throw ValidationError("face " + std::to_string(i) + " references vertex " + std::to_string(idx) +
                                      " out of range");
            }
        }
        if (repeated(f)) throw ValidationError("face " + std::to_string(i) + " repeats a vertex");
        if (!(face_area(vertices_, f) > kMinFaceArea)) {
            throw ValidationError("face " + std::to_string(i) + " has non-positive area");
        }
    }
}

TriMesh TriMesh::sanitized(Points vertices, std::vector<Face> faces, std::optional<Eigen::VectorXd> scalar,
                           std::size_t* dropped) {
    std::vector<Face> kept;
    kept.reserve(faces.size());
    for (const Face& f : faces) {
        bool in_range = std::all_of(f.begin(), f.end(), [&](int i) { return i >= 0 && i < vertices.rows(); });
        if (!in_range) throw ValidationError("face references a vertex out of range");
        if (repeated(f) || !(face_area(vertices, f) > kMinFaceArea)) continue;
        kept.push_back(f);
    }
    if (dropped) *dropped = faces.size() - kept.size();
    return TriMesh(std::move(vertices), std::move(kept), std::move(scalar));
}

TriMesh TriMesh::with_vertices(Points vertices) const {
    if (vertices.rows() != vertices_.rows()) throw ValidationError("vertex count mismatch");
    return TriMesh(std::move(vertices), faces_, scalar_);
}

TriMesh TriMesh::with_scalar(Eigen::VectorXd scalar) const { return TriMesh(vertices_, faces_, std::move(scalar)); }

TriMesh TriMesh::flipped() const {
    std::vector<Face> faces = faces_;
    for (Face& f : faces) std::swap(f[1], f[2]);
    return TriMesh(vertices_, std::move(faces), scalar_);
}

TriMesh TriMesh::transformed(const Mat3& linear, const Vec3& translation) const {
    Points v = (vertices_ * linear.transpose()).rowwise() + translation.transpose();
    return TriMesh(std::move(v), faces_, scalar_);
}

FaceGeometry face_geometry(const TriMesh& mesh) {
    const long nf = mesh.num_faces();
    FaceGeometry g{Points(nf, 3), Points(nf, 3), Eigen::VectorXd(nf)};
    const Points& v = mesh.vertices();
    for (long i = 0; i < nf; ++i) {
        const Face& f = mesh.faces()[i];
        const Vec3 p0 = v.row(f[0]), p1 = v.row(f[1]), p2 = v.row(f[2]);
        g.centers.row(i) = (p0 + p1 + p2) / 3.0;
        const Vec3 n = 0.5 * (p1 - p0).cross(p2 - p0);
        g.normals.row(i) = n;
        g.areas[i] = n.norm();
    }
    return g;
}

double total_area(const TriMesh& mesh) { return face_geometry(mesh).areas.sum(); }

TriMesh generate_cup(const CupParams& p) {
    if (!(p.depth_scale > 0)) throw ValidationError("depth_scale must be positive");
    if (!(p.rim_retraction >= 0 && p.rim_retraction < 1)) throw ValidationError("rim_retraction must lie in [0,1)");
    if (!(p.radial_noise_sd >= 0)) throw ValidationError("radial_noise_sd must be non-negative");
    if (p.rings < 1 || p.sectors < 3) throw ValidationError("cup resolution too small");
    if (p.sectors + 2L * (p.rings - 1) * p.sectors < 8) throw ValidationError("cup resolution yields fewer than 8 faces");
    if (!(p.radius > 0)) throw ValidationError("radius must be positive");

    const double theta_max = 0.5 * std::numbers::pi * (1.0 - p.rim_retraction);
    const long nv = 1 + static_cast<long>(p.rings) * p.sectors;
    Points v(nv, 3);
    v.row(0) = Vec3(0, 0, p.depth_scale * p.radius);
    for (int r = 1; r <= p.rings; ++r) {
        const double theta = theta_max * r / p.rings;
        for (int s = 0; s < p.sectors; ++s) {
            const double phi = 2.0 * std::numbers::pi * s / p.sectors;
            v.row(1 + (r - 1) * p.sectors + s) =
                Vec3(p.radius * std::sin(theta) * std::cos(phi), p.radius * std::sin(theta) * std::sin(phi),
                     p.depth_scale * p.radius * std::cos(theta));
        }
    }
    if (p.radial_noise_sd > 0) {
        auto rng = make_rng(p.seed, 0);
        std::normal_distribution<double> noise(0.0, p.radial_noise_sd);
        for (long i = 0; i < nv; ++i) {
            Vec3 x = v.row(i);
            const double len = x.norm();
            v.row(i) = x + noise(rng) * x / len;
        }
    }

    std::vector<Face> faces;
    faces.reserve(p.sectors + 2 * (p.rings - 1) * p.sectors);
    auto ring = [&](int r, int s) { return 1 + (r - 1) * p.sectors + (s % p.sectors); };
    for (int s = 0; s < p.sectors; ++s) faces.push_back({0, ring(1, s), ring(1, s + 1)});
    for (int r = 1; r < p.rings; ++r) {
        for (int s = 0; s < p.sectors; ++s) {
            faces.push_back({ring(r, s), ring(r + 1, s), ring(r + 1, s + 1)});
            faces.push_back({ring(r, s), ring(r + 1, s + 1), ring(r, s + 1)});
        }
    }
    return TriMesh(std::move(v), std::move(faces));
}

DepthRange depth_range(bool dysplastic) { return dysplastic ? DepthRange{0.45, 0.70} : DepthRange{0.85, 1.05}; }

CupParams sample_cup_params(bool dysplastic, std::mt19937_64& rng, int rings, int sectors, double radial_noise_sd) {
    CupParams p;
    p.rings = rings;
    p.sectors = sectors;
    p.radial_noise_sd = radial_noise_sd;
    const DepthRange range = depth_range(dysplastic);
    std::uniform_real_distribution<double> depth(range.lo, range.hi);
    std::uniform_real_distribution<double> retract(dysplastic ? 0.10 : 0.0, dysplastic ? 0.25 : 0.05);
    p.depth_scale = depth(rng);
    p.rim_retraction = retract(rng);
    p.seed = rng();
    return p;
}

std::vector<int> cup_rim_indices(const CupParams& p) {
    std::vector<int> idx(p.sectors);
    std::iota(idx.begin(), idx.end(), 1 + (p.rings - 1) * p.sectors);
    return idx;
}

Plane fit_plane(const Landmarks& lm) {
    const Points& p = lm.points;
    if (p.rows() < 3) throw ValidationError("plane fit needs at least 3 landmarks");
    const Vec3 centroid = p.colwise().mean();
    const Points centered = p.rowwise() - centroid.transpose();
    const Mat3 cov = centered.transpose() * centered;
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    const Eigen::Vector3d ev = eig.eigenvalues();
    // Collinear or coincident points leave the plane undetermined.
    if (!(ev[1] > 1e-12 * std::max(ev[2], 1e-300)) || ev[2] <= 0) {
        throw ValidationError("landmarks are collinear; plane fit is rank deficient");
    }
    Vec3 n = eig.eigenvectors().col(0).normalized();
    constexpr double tie = 1e-12;
    if (n.z() < -tie || (std::abs(n.z()) <= tie && (n.x() < -tie || (std::abs(n.x()) <= tie && n.y() < 0)))) n = -n;
    return Plane{n, n.dot(centroid)};
}

std::vector<TriMesh> connected_components(const TriMesh& mesh) {
    const long nf = mesh.num_faces();
    std::vector<long> parent(nf);
    std::iota(parent.begin(), parent.end(), 0L);
    auto find = [&](long x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    std::map<std::pair<int, int>, long> edge_owner;
    for (long i = 0; i < nf; ++i) {
        const Face& f = mesh.faces()[i];
        for (int e = 0; e < 3; ++e) {
            auto key = std::minmax(f[e], f[(e + 1) % 3]);
            auto [it, inserted] = edge_owner.emplace(std::pair{key.first, key.second}, i);
            if (!inserted) {
                long a = find(i), b = find(it->second);
                if (a != b) parent[std::max(a, b)] = std::min(a, b);
            }
        }
    }
    std::map<long, std::vector<long>> groups;
    for (long i = 0; i < nf; ++i) groups[find(i)].push_back(i);

    std::vector<std::vector<long>> ordered;
    for (auto& [root, faces] : groups) ordered.push_back(std::move(faces));
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const auto& a, const auto& b) { return a.size() > b.size(); });

    std::vector<TriMesh> out;
    for (const auto& face_ids : ordered) {
        std::vector<int> remap(mesh.num_vertices(), -1);
        std::vector<int> used;
        std::vector<Face> faces;
        for (long fi : face_ids) {
            Face f = mesh.faces()[fi];
            for (int& idx : f) {
                if (remap[idx] < 0) {
                    remap[idx] = static_cast<int>(used.size());
                    used.push_back(idx);
                }
                idx = remap[idx];
            }
            faces.push_back(f);
        }
        Points v(used.size(), 3);
        std::optional<Eigen::VectorXd> s;
        if (mesh.scalar()) s = Eigen::VectorXd(used.size());
        for (std::size_t k = 0; k < used.size(); ++k) {
            v.row(k) = mesh.vertices().row(used[k]);
            if (s) (*s)[k] = (*mesh.scalar())[used[k]];
        }
        out.emplace_back(std::move(v), std::move(faces), std::move(s));
    }
    return out;
}

}  // namespace gpdssm
