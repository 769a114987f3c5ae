#include "gpdssm/mesh_io.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

namespace gpdssm {

namespace fs = std::filesystem;

namespace {

std::string lower_ext(const fs::path& p) {
    std::string e = p.extension().string();
    for (char& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return e;
}

int parse_obj_index(const std::string& tok, long nverts, long line) {
    const std::string head = tok.substr(0, tok.find('/'));
    std::size_t used = 0;
    long idx = 0;
    try {
        idx = std::stol(head, &used);
    } catch (const std::exception&) {
        throw FormatError("bad face index '" + tok + "' at line " + std::to_string(line), line);
    }
    if (used != head.size() || idx == 0) {
        throw FormatError("bad face index '" + tok + "' at line " + std::to_string(line), line);
    }
    if (idx < 0) idx = nverts + idx + 1;  // relative indexing
    return static_cast<int>(idx - 1);
}

TriMesh load_obj(std::istream& in, LoadReport* report) {
    std::vector<Vec3> verts;
    std::vector<Face> faces;
    std::string raw;
    long line = 0;
    while (std::getline(in, raw)) {
        ++line;
        std::istringstream ls(raw);
        std::string tag;
        if (!(ls >> tag)) continue;
        if (tag == "v") {
            Vec3 p;
            if (!(ls >> p.x() >> p.y() >> p.z())) {
                throw FormatError("malformed vertex at line " + std::to_string(line), line);
            }
            verts.push_back(p);
        } else if (tag == "f") {
            std::vector<std::string> toks;
            for (std::string t; ls >> t;) toks.push_back(t);
            if (toks.size() != 3) {
                throw FormatError("face at line " + std::to_string(line) + " is not a triangle", line);
            }
            Face f{};
            for (int k = 0; k < 3; ++k) {
                f[k] = parse_obj_index(toks[k], static_cast<long>(verts.size()), line);
                if (f[k] < 0 || f[k] >= static_cast<long>(verts.size())) {
                    throw FormatError("face index out of range at line " + std::to_string(line), line);
                }
            }
            faces.push_back(f);
        }
    }
    if (faces.empty()) throw ValidationError("mesh has no faces");
    Points v(verts.size(), 3);
    for (std::size_t i = 0; i < verts.size(); ++i) v.row(i) = verts[i];
    std::size_t dropped = 0;
    TriMesh mesh = TriMesh::sanitized(std::move(v), std::move(faces), std::nullopt, &dropped);
    if (report) report->dropped_faces = dropped;
    if (mesh.empty()) throw ValidationError("mesh has no valid faces");
    return mesh;
}

struct PlyElement {
    std::string name;
    long count = 0;
    std::vector<std::string> props;  // list properties carry the "list:" prefix
};

TriMesh load_ply(std::istream& in, LoadReport* report) {
    std::string raw;
    long line = 0;
    std::vector<PlyElement> elements;
    bool ascii = false, ended = false;
    while (std::getline(in, raw)) {
        ++line;
        std::istringstream ls(raw);
        std::string tag;
        ls >> tag;
        if (line == 1) {
            if (tag != "ply") throw FormatError("missing 'ply' magic at line 1", line);
            continue;
        }
        if (tag == "format") {
            std::string fmt, ver;
            ls >> fmt >> ver;
            if (fmt != "ascii") throw FormatError("only ascii PLY is supported (line " + std::to_string(line) + ")", line);
            ascii = true;
        } else if (tag == "element") {
            PlyElement e;
            if (!(ls >> e.name >> e.count) || e.count < 0) {
                throw FormatError("malformed element at line " + std::to_string(line), line);
            }
            elements.push_back(e);
        } else if (tag == "property") {
            if (elements.empty()) throw FormatError("property before element at line " + std::to_string(line), line);
            std::string type, a, b, name;
            ls >> type;
            if (type == "list") {
                ls >> a >> b >> name;
                elements.back().props.push_back("list:" + name);
            } else {
                ls >> name;
                elements.back().props.push_back(name);
            }
        } else if (tag == "end_header") {
            ended = true;
            break;
        } else if (tag == "comment" || tag == "obj_info" || tag.empty()) {
            continue;
        } else {
            throw FormatError("unknown header keyword '" + tag + "' at line " + std::to_string(line), line);
        }
    }
    if (!ascii || !ended) throw FormatError("incomplete PLY header", line);

    std::vector<Vec3> verts;
    std::vector<double> quality;
    std::vector<Face> faces;
    bool has_quality = false;
    for (const PlyElement& e : elements) {
        int ix = -1, iy = -1, iz = -1, iq = -1, ilist = -1;
        for (int k = 0; k < static_cast<int>(e.props.size()); ++k) {
            const std::string& p = e.props[k];
            if (p == "x") ix = k;
            if (p == "y") iy = k;
            if (p == "z") iz = k;
            if (p == "quality" || p == "scalar") iq = k;
            if (p == "list:vertex_indices" || p == "list:vertex_index") ilist = k;
        }
        if (e.name == "vertex" && (ix < 0 || iy < 0 || iz < 0)) {
            throw FormatError("vertex element lacks x/y/z", line);
        }
        if (e.name == "vertex") has_quality = iq >= 0;
        for (long r = 0; r < e.count; ++r) {
            if (!std::getline(in, raw)) throw FormatError("unexpected end of file at line " + std::to_string(line + 1), line + 1);
            ++line;
            std::istringstream ls(raw);
            if (e.name == "vertex") {
                std::vector<double> vals(e.props.size());
                for (double& x : vals) {
                    if (!(ls >> x)) throw FormatError("malformed vertex at line " + std::to_string(line), line);
                }
                verts.emplace_back(vals[ix], vals[iy], vals[iz]);
                if (iq >= 0) quality.push_back(vals[iq]);
            } else if (e.name == "face") {
                if (ilist != 0 || e.props.size() != 1) {
                    throw FormatError("face element must hold a single index list", line);
                }
                int n = 0;
                if (!(ls >> n)) throw FormatError("malformed face at line " + std::to_string(line), line);
                if (n != 3) throw FormatError("face at line " + std::to_string(line) + " is not a triangle", line);
                Face f{};
                for (int& idx : f) {
                    if (!(ls >> idx)) throw FormatError("malformed face at line " + std::to_string(line), line);
                    if (idx < 0 || idx >= static_cast<long>(verts.size())) {
                        throw FormatError("face index out of range at line " + std::to_string(line), line);
                    }
                }
                faces.push_back(f);
            }
        }
    }
    if (faces.empty()) throw ValidationError("mesh has no faces");
    Points v(verts.size(), 3);
    for (std::size_t i = 0; i < verts.size(); ++i) v.row(i) = verts[i];
    std::optional<Eigen::VectorXd> scalar;
    if (has_quality) scalar = Eigen::Map<Eigen::VectorXd>(quality.data(), static_cast<long>(quality.size()));
    std::size_t dropped = 0;
    TriMesh mesh = TriMesh::sanitized(std::move(v), std::move(faces), std::move(scalar), &dropped);
    if (report) report->dropped_faces = dropped;
    if (mesh.empty()) throw ValidationError("mesh has no valid faces");
    return mesh;
}

}  // namespace

TriMesh load_mesh(const fs::path& path, LoadReport* report) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open mesh file " + path.string());
    std::string first;
    std::getline(in, first);
    in.clear();
    in.seekg(0);
    while (!first.empty() && std::isspace(static_cast<unsigned char>(first.back()))) first.pop_back();
    try {
        if (first == "ply") return load_ply(in, report);
        if (lower_ext(path) == ".ply") return load_ply(in, report);
        return load_obj(in, report);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what(), e.line());
    }
}

void save_mesh(const TriMesh& mesh, const fs::path& path, bool with_scalar) {
    if (with_scalar && !mesh.scalar()) throw ValidationError("save_mesh: mesh has no scalar field");
    std::ostringstream out;
    out << "ply\nformat ascii 1.0\ncomment gpdssm\n";
    out << "element vertex " << mesh.num_vertices() << "\n";
    out << "property float x\nproperty float y\nproperty float z\n";
    if (with_scalar) out << "property float quality\n";
    out << "element face " << mesh.num_faces() << "\n";
    out << "property list uchar int vertex_indices\nend_header\n";
    char buf[160];
    for (long i = 0; i < mesh.num_vertices(); ++i) {
        const auto& v = mesh.vertices();
        if (with_scalar) {
            std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g %.9g\n", v(i, 0), v(i, 1), v(i, 2), (*mesh.scalar())[i]);
        } else {
            std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g\n", v(i, 0), v(i, 1), v(i, 2));
        }
        out << buf;
    }
    for (const Face& f : mesh.faces()) out << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
    write_file_atomic(path, out.str());
}

Landmarks load_landmarks(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open landmarks file " + path.string());
    std::vector<Vec3> pts;
    std::string raw;
    long line = 0;
    while (std::getline(in, raw)) {
        ++line;
        std::size_t start = raw.find_first_not_of(" \t\r");
        if (start == std::string::npos || raw[start] == '#' || std::isalpha(static_cast<unsigned char>(raw[start]))) {
            continue;
        }
        for (char& c : raw) {
            if (c == ',') c = ' ';
        }
        std::istringstream ls(raw);
        Vec3 p;
        if (!(ls >> p.x() >> p.y() >> p.z())) {
            throw FormatError(path.string() + ": malformed landmark at line " + std::to_string(line), line);
        }
        pts.push_back(p);
    }
    if (pts.size() < 3) throw ValidationError(path.string() + ": need at least 3 landmarks");
    Landmarks lm{Points(pts.size(), 3)};
    for (std::size_t i = 0; i < pts.size(); ++i) lm.points.row(i) = pts[i];
    return lm;
}

void save_landmarks(const Landmarks& lm, const fs::path& path) {
    std::ostringstream out;
    char buf[128];
    for (long i = 0; i < lm.points.rows(); ++i) {
        std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g\n", lm.points(i, 0), lm.points(i, 1), lm.points(i, 2));
        out << buf;
    }
    write_file_atomic(path, out.str());
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + path.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) {
            std::error_code ec;
            fs::remove(tmp, ec);
            throw IoError("write failed for " + path.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot move output into place: " + path.string());
    }
}

}  // namespace gpdssm
