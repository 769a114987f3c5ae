#pragma once

#include "gpdssm/mesh.hpp"

#include <filesystem>

namespace gpdssm {

struct LoadReport {
    std::size_t dropped_faces = 0;
};

/// Reads an ascii OBJ ("v x y z" / "f i j k") or ascii PLY 1.0 file. The format
/// is chosen from the first line ("ply") or else the extension. Faces with a
/// repeated vertex or zero area are dropped and counted in `report`.
TriMesh load_mesh(const std::filesystem::path& path, LoadReport* report = nullptr);

/// Writes ascii PLY. With `with_scalar` the vertex element carries a
/// "quality" property (the mesh must have a scalar field).
void save_mesh(const TriMesh& mesh, const std::filesystem::path& path, bool with_scalar = false);

/// Landmarks as CSV rows "x,y,z" (mm). Blank lines and lines starting with
/// '#' or a letter (header) are skipped.
Landmarks load_landmarks(const std::filesystem::path& path);
void save_landmarks(const Landmarks& lm, const std::filesystem::path& path);

/// Writes `contents` to path via a sibling temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace gpdssm
