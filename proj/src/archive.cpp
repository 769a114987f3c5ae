#include "gpdssm/archive.hpp"

#include "gpdssm/mesh_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace gpdssm {

namespace {

constexpr char kMagic[8] = {'G', 'P', 'D', 'S', 'S', 'M', 'A', 'R'};

static_assert(std::endian::native == std::endian::little, "archive writer assumes a little-endian host");

template <class T>
void write_pod(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    explicit Reader(const std::string& s) : s_(s) {}

    template <class T>
    T pod() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, s_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string out = s_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    bool done() const { return pos_ == s_.size(); }

private:
    void need(std::size_t n) const {
        if (s_.size() - pos_ < n) throw FormatError("archive truncated at byte " + std::to_string(pos_), -1);
    }
    const std::string& s_;
    std::size_t pos_ = 0;
};

}  // namespace

void Archive::put(const std::string& name, const Eigen::MatrixXd& value) {
    for (auto& [n, m] : sections_) {
        if (n == name) {
            m = value;
            return;
        }
    }
    sections_.emplace_back(name, value);
}

void Archive::put_scalar(const std::string& name, double value) { put(name, Eigen::MatrixXd::Constant(1, 1, value)); }

void Archive::put_faces(const std::string& name, const std::vector<Face>& faces) {
    Eigen::MatrixXd m(faces.size(), 3);
    for (std::size_t f = 0; f < faces.size(); ++f)
        for (int k = 0; k < 3; ++k) m(f, k) = faces[f][k];
    put(name, m);
}

void Archive::put_mesh(const std::string& prefix, const TriMesh& mesh) {
    put(prefix + ".vertices", mesh.vertices());
    put_faces(prefix + ".faces", mesh.faces());
}

bool Archive::has(const std::string& name) const {
    for (const auto& s : sections_)
        if (s.first == name) return true;
    return false;
}

const Eigen::MatrixXd& Archive::get(const std::string& name) const {
    for (const auto& s : sections_)
        if (s.first == name) return s.second;
    throw FormatError("archive has no section '" + name + "'", -1);
}

double Archive::scalar(const std::string& name) const {
    const auto& m = get(name);
    if (m.size() != 1) throw FormatError("archive section '" + name + "' is not a scalar", -1);
    return m(0, 0);
}

std::vector<Face> Archive::faces(const std::string& name) const {
    const auto& m = get(name);
    if (m.cols() != 3) throw FormatError("archive section '" + name + "' is not a face list", -1);
    std::vector<Face> out(m.rows());
    for (long f = 0; f < m.rows(); ++f)
        for (int k = 0; k < 3; ++k) out[f][k] = static_cast<int>(m(f, k));
    return out;
}

TriMesh Archive::mesh(const std::string& prefix) const {
    return TriMesh(get(prefix + ".vertices"), faces(prefix + ".faces"));
}

std::vector<std::string> Archive::names() const {
    std::vector<std::string> out;
    for (const auto& s : sections_) out.push_back(s.first);
    return out;
}

std::string Archive::serialize() const {
    std::string out(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(out, kVersion);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(sections_.size()));
    for (const auto& [name, m] : sections_) {
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
        write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
        for (long r = 0; r < m.rows(); ++r)
            for (long c = 0; c < m.cols(); ++c) write_pod<double>(out, m(r, c));
    }
    return out;
}

Archive Archive::deserialize(const std::string& bytes) {
    Reader rd(bytes);
    if (rd.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
        throw FormatError("not a model archive (bad magic)", -1);
    }
    const auto version = rd.pod<std::uint32_t>();
    if (version != kVersion) {
        throw FormatError("unsupported archive version " + std::to_string(version) + " (expected " +
                              std::to_string(kVersion) + ")",
                          -1);
    }
    const auto count = rd.pod<std::uint32_t>();
    Archive a;
    for (std::uint32_t s = 0; s < count; ++s) {
        const auto len = rd.pod<std::uint32_t>();
        std::string name = rd.bytes(len);
        const auto rows = rd.pod<std::uint64_t>(), cols = rd.pod<std::uint64_t>();
        if (rows > (1ULL << 32) || cols > (1ULL << 32)) throw FormatError("archive section too large: " + name, -1);
        Eigen::MatrixXd m(rows, cols);
        for (std::uint64_t r = 0; r < rows; ++r)
            for (std::uint64_t c = 0; c < cols; ++c) m(r, c) = rd.pod<double>();
        a.sections_.emplace_back(std::move(name), std::move(m));
    }
    if (!rd.done()) throw FormatError("trailing bytes after archive sections", -1);
    return a;
}

void Archive::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

Archive Archive::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open archive " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize(ss.str());
}

}  // namespace gpdssm
