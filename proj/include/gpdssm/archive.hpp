#pragma once

#include "gpdssm/mesh.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace gpdssm {

/// Binary container of named real matrices.
///
/// Layout (all integers and reals little-endian):
///   8 bytes   magic "GPDSSMAR"
///   u32       format version (kArchiveVersion)
///   u32       section count
///   per section, in insertion order:
///     u32     name length, then the name bytes (no terminator)
///     u64     rows
///     u64     cols
///     f64     rows*cols values, row-major
class Archive {
public:
    static constexpr std::uint32_t kVersion = 1;

    void put(const std::string& name, const Eigen::MatrixXd& value);
    void put_scalar(const std::string& name, double value);
    void put_faces(const std::string& name, const std::vector<Face>& faces);
    void put_mesh(const std::string& prefix, const TriMesh& mesh);

    bool has(const std::string& name) const;
    const Eigen::MatrixXd& get(const std::string& name) const;
    double scalar(const std::string& name) const;
    std::vector<Face> faces(const std::string& name) const;
    TriMesh mesh(const std::string& prefix) const;
    std::vector<std::string> names() const;

    std::string serialize() const;
    static Archive deserialize(const std::string& bytes);

    void save(const std::filesystem::path& path) const;
    static Archive load(const std::filesystem::path& path);

private:
    std::vector<std::pair<std::string, Eigen::MatrixXd>> sections_;
};

}  // namespace gpdssm
