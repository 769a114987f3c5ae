#include "gpdssm/mesh.hpp"
#include "gpdssm/mesh_io.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <numbers>
#include <set>

using namespace gpdssm;
using gpdssm::testing::temp_dir;

namespace {

void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream(p) << s;
}

TriMesh unit_triangle() {
    Points v(3, 3);
    v << 0, 0, 0, 1, 0, 0, 0, 1, 0;
    return TriMesh(v, {{0, 1, 2}});
}

TriMesh tetrahedron(const Vec3& offset = Vec3::Zero()) {
    Points v(4, 3);
    v << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
    v.rowwise() += offset.transpose();
    return TriMesh(v, {{0, 2, 1}, {0, 1, 3}, {0, 3, 2}, {1, 2, 3}});
}

}  // namespace

TEST(MeshIo, MinimalObj) {
    auto dir = temp_dir("minimal_obj");
    write_text(dir / "a.obj", "# tri\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1 2 3\n");
    LoadReport rep;
    TriMesh m = load_mesh(dir / "a.obj", &rep);
    EXPECT_EQ(m.num_faces(), 1);
    EXPECT_EQ(m.num_vertices(), 3);
    EXPECT_EQ(rep.dropped_faces, 0u);
}

TEST(MeshIo, RepeatedVertexFaceDropped) {
    auto dir = temp_dir("dropped");
    write_text(dir / "a.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\nf 1 1 2\n");
    LoadReport rep;
    TriMesh m = load_mesh(dir / "a.obj", &rep);
    EXPECT_EQ(m.num_faces(), 1);
    EXPECT_EQ(rep.dropped_faces, 1u);
}

TEST(MeshIo, ParseErrorCarriesLineNumber) {
    auto dir = temp_dir("bad_obj");
    write_text(dir / "a.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 oops 0\nf 1 2 3\n");
    try {
        load_mesh(dir / "a.obj");
        FAIL() << "expected a format error";
    } catch (const FormatError& e) {
        EXPECT_EQ(e.line(), 4);
        EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos);
    }
}

TEST(MeshIo, EmptyMeshRejected) {
    auto dir = temp_dir("empty_obj");
    write_text(dir / "a.obj", "v 0 0 0\nv 1 0 0\n");
    EXPECT_THROW(load_mesh(dir / "a.obj"), ValidationError);
    EXPECT_THROW(load_mesh(dir / "missing.obj"), IoError);
}

TEST(MeshIo, PlyRoundTripPreservesGeometry) {
    auto dir = temp_dir("ply_rt");
    CupParams p;
    p.rings = 5;
    p.sectors = 9;
    p.radial_noise_sd = 0.3;
    p.seed = 7;
    TriMesh m = generate_cup(p);
    save_mesh(m, dir / "cup.ply");
    TriMesh back = load_mesh(dir / "cup.ply");
    ASSERT_EQ(back.num_faces(), m.num_faces());
    EXPECT_LT((back.vertices() - m.vertices()).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_FALSE(back.scalar().has_value());
}

TEST(MeshIo, PlyHeaderWithoutScalar) {
    auto dir = temp_dir("ply_plain");
    save_mesh(unit_triangle(), dir / "t.ply", false);
    std::ifstream in(dir / "t.ply");
    std::string all((std::istreambuf_iterator<char>(in)), {});
    EXPECT_EQ(all.find("quality"), std::string::npos);
    EXPECT_NE(all.find("property float x"), std::string::npos);
}

TEST(MeshIo, PlyScalarExported) {
    auto dir = temp_dir("ply_scalar");
    Eigen::VectorXd s(3);
    s << 0.25, 1.5, -2.0;
    TriMesh m = unit_triangle().with_scalar(s);
    save_mesh(m, dir / "t.ply", true);
    std::ifstream in(dir / "t.ply");
    std::string all((std::istreambuf_iterator<char>(in)), {});
    EXPECT_NE(all.find("property float quality"), std::string::npos);
    TriMesh back = load_mesh(dir / "t.ply");
    ASSERT_TRUE(back.scalar().has_value());
    EXPECT_NEAR((*back.scalar())[1], 1.5, 1e-9);
    EXPECT_THROW(save_mesh(unit_triangle(), dir / "u.ply", true), ValidationError);
}

TEST(MeshIo, LandmarksCsv) {
    auto dir = temp_dir("landmarks");
    write_text(dir / "lm.csv", "x,y,z\n1,0,0\n0,1,0\n-1,0,0\n0,-1,0.5\n");
    Landmarks lm = load_landmarks(dir / "lm.csv");
    ASSERT_EQ(lm.points.rows(), 4);
    EXPECT_DOUBLE_EQ(lm.points(3, 2), 0.5);
}

TEST(FaceGeometry, UnitRightTriangle) {
    FaceGeometry g = face_geometry(unit_triangle());
    EXPECT_DOUBLE_EQ(g.areas[0], 0.5);
    EXPECT_NEAR(std::abs(g.normals(0, 2)) / g.areas[0], 1.0, 1e-15);
    EXPECT_NEAR(g.centers(0, 0), 1.0 / 3.0, 1e-15);
}

TEST(FaceGeometry, EquilateralSideTwo) {
    Points v(3, 3);
    v << 0, 0, 0, 2, 0, 0, 1, std::sqrt(3.0), 0;
    FaceGeometry g = face_geometry(TriMesh(v, {{0, 1, 2}}));
    EXPECT_NEAR(g.areas[0], std::sqrt(3.0), 1e-12);
}

TEST(FaceGeometry, TranslationEquivariance) {
    std::mt19937_64 rng(3);
    TriMesh m = gpdssm::testing::random_mesh(rng);
    const Vec3 t(1.5, -2.0, 0.25);
    FaceGeometry a = face_geometry(m), b = face_geometry(m.transformed(Mat3::Identity(), t));
    EXPECT_LT((a.areas - b.areas).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((a.normals - b.normals).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT(((b.centers.rowwise() - t.transpose()) - a.centers).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FaceGeometry, AreasInvariantUnderRigidMotion) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        TriMesh m = gpdssm::testing::random_mesh(rng);
        const Mat3 r = gpdssm::testing::random_rotation(rng);
        FaceGeometry a = face_geometry(m), b = face_geometry(m.transformed(r, Vec3(3, -1, 2)));
        for (long i = 0; i < a.areas.size(); ++i) EXPECT_NEAR(a.areas[i], b.areas[i], 1e-9 * a.areas[i]);
    }
}

TEST(Mesh, ConstructionRejectsInvalid) {
    Points v(3, 3);
    v << 0, 0, 0, 1, 0, 0, 2, 0, 0;
    EXPECT_THROW(TriMesh(v, {{0, 1, 2}}), ValidationError);  // zero area
    EXPECT_THROW(TriMesh(v, {{0, 1, 3}}), ValidationError);  // out of range
    EXPECT_THROW(TriMesh(v, {{0, 0, 1}}), ValidationError);  // repeated
}

TEST(Cup, ExactHemisphere) {
    CupParams p;
    TriMesh m = generate_cup(p);
    EXPECT_EQ(m.num_faces(), 1560);
    EXPECT_NEAR(m.vertices().col(2).maxCoeff() / p.radius, 1.0, 1e-6);
    EXPECT_NEAR(m.vertices().col(2).minCoeff(), 0.0, 1e-9);
}

TEST(Cup, DepthScaling) {
    CupParams p;
    p.depth_scale = 0.55;
    TriMesh m = generate_cup(p);
    EXPECT_NEAR(m.vertices().col(2).maxCoeff() / p.radius, 0.55, 1e-6);
}

TEST(Cup, Deterministic) {
    CupParams p;
    p.radial_noise_sd = 0.5;
    p.seed = 42;
    TriMesh a = generate_cup(p), b = generate_cup(p);
    EXPECT_TRUE((a.vertices().array() == b.vertices().array()).all());
    p.seed = 43;
    TriMesh c = generate_cup(p);
    EXPECT_FALSE((a.vertices().array() == c.vertices().array()).all());
}

TEST(Cup, RimRetractionLiftsRim) {
    CupParams p;
    p.rim_retraction = 0.2;
    TriMesh m = generate_cup(p);
    const double rim_z = m.vertices()(cup_rim_indices(p).front(), 2);
    EXPECT_NEAR(rim_z, p.radius * std::cos(0.5 * std::numbers::pi * 0.8), 1e-9);
    p.depth_scale = 0.0;
    EXPECT_THROW(generate_cup(p), ValidationError);
}

TEST(FitPlane, ExactPlane) {
    Landmarks lm{Points(4, 3)};
    lm.points << 0, 0, 0, 1, 0, 0, 1, 1, 0, 0, 1, 0;
    Plane pl = fit_plane(lm);
    EXPECT_NEAR(pl.normal.z(), 1.0, 1e-12);
    EXPECT_NEAR(pl.offset, 0.0, 1e-12);
}

TEST(FitPlane, TiltedPlane) {
    Landmarks lm{Points(5, 3)};
    const double xy[5][2] = {{0, 0}, {1, 0}, {0, 1}, {2, 3}, {-1, 2}};
    for (int i = 0; i < 5; ++i) lm.points.row(i) = Vec3(xy[i][0], xy[i][1], 2 + xy[i][0] + xy[i][1]);
    Plane pl = fit_plane(lm);
    const Vec3 expect = Vec3(-1, -1, 1) / std::sqrt(3.0);
    EXPECT_LT((pl.normal - expect).norm(), 1e-10);
    EXPECT_NEAR(pl.offset, 2.0 / std::sqrt(3.0), 1e-10);
}

TEST(FitPlane, SymmetricNoiseKeepsNormal) {
    Landmarks lm{Points(8, 3)};
    const double d = 0.05;
    lm.points << 0, 0, d, 1, 0, -d, 1, 1, d, 0, 1, -d, 0, 0, -d, 1, 0, d, 1, 1, -d, 0, 1, d;
    Plane pl = fit_plane(lm);
    EXPECT_LT((pl.normal - Vec3::UnitZ()).norm(), 1e-12);
}

TEST(FitPlane, CollinearRejected) {
    Landmarks lm{Points(3, 3)};
    lm.points << 0, 0, 0, 1, 1, 1, 2, 2, 2;
    EXPECT_THROW(fit_plane(lm), ValidationError);
}

TEST(FitPlane, ResidualBeatsRandomPlanes) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 1.0);
    Landmarks lm{Points(12, 3)};
    for (long i = 0; i < 12; ++i) lm.points.row(i) = Vec3(3 * n(rng), 2 * n(rng), 0.3 * n(rng));
    Plane pl = fit_plane(lm);
    const Vec3 centroid = lm.points.colwise().mean();
    auto residual = [&](const Vec3& nrm, double off) {
        return ((lm.points * nrm).array() - off).square().sum();
    };
    const double best = residual(pl.normal, pl.offset);
    for (int t = 0; t < 100; ++t) {
        Vec3 alt(n(rng), n(rng), n(rng));
        alt.normalize();
        EXPECT_LE(best, residual(alt, alt.dot(centroid)) + 1e-12);
    }
}

TEST(Components, Tetrahedron) { EXPECT_EQ(connected_components(tetrahedron()).size(), 1u); }

TEST(Components, TwoTriangles) {
    Points v(6, 3);
    v << 0, 0, 0, 1, 0, 0, 0, 1, 0, 5, 0, 0, 6, 0, 0, 5, 1, 0;
    auto comps = connected_components(TriMesh(v, {{0, 1, 2}, {3, 4, 5}}));
    ASSERT_EQ(comps.size(), 2u);
    EXPECT_EQ(comps[0].num_faces(), 1);
    EXPECT_EQ(comps[1].num_faces(), 1);
}

TEST(Components, PartitionOfFaces) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        // Several disjoint random meshes merged into one vertex/face list.
        Points v(0, 3);
        std::vector<Face> faces;
        std::uniform_int_distribution<int> count(1, 4);
        const int parts = count(rng);
        for (int p = 0; p < parts; ++p) {
            TriMesh m = gpdssm::testing::random_mesh(rng, 2 + p, 5);
            const int base = static_cast<int>(v.rows());
            Points nv(v.rows() + m.num_vertices(), 3);
            nv << v, (m.vertices().rowwise() + Vec3(10.0 * p, 0, 0).transpose());
            v = nv;
            for (Face f : m.faces()) faces.push_back({f[0] + base, f[1] + base, f[2] + base});
        }
        TriMesh merged(v, faces);
        auto comps = connected_components(merged);
        EXPECT_EQ(static_cast<int>(comps.size()), parts);
        long total = 0;
        std::set<std::tuple<double, double, double>> seen;
        for (std::size_t c = 0; c < comps.size(); ++c) {
            total += comps[c].num_faces();
            if (c > 0) EXPECT_GE(comps[c - 1].num_faces(), comps[c].num_faces());
            for (long i = 0; i < comps[c].num_vertices(); ++i) {
                auto key = std::make_tuple(comps[c].vertices()(i, 0), comps[c].vertices()(i, 1), comps[c].vertices()(i, 2));
                EXPECT_TRUE(seen.insert(key).second) << "vertex shared between components";
            }
        }
        EXPECT_EQ(total, merged.num_faces());
    }
}
