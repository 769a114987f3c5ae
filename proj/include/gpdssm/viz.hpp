#pragma once

#include "gpdssm/eval.hpp"
#include "gpdssm/model.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace gpdssm {

struct ClassAverage {
    Points control;
    Points dysplastic;
};

/// Coordinate-wise mean of corresponding point sets per class (label 0 / 1).
ClassAverage class_average(const std::vector<Points>& sets, const std::vector<int>& labels);

struct VertexStatMap {
    Eigen::VectorXd statistic;  // |mean_1 - mean_0| per vertex
    Eigen::VectorXd p_raw;
    Eigen::VectorXd p_adjusted;
    std::vector<bool> significant;
    double alpha = 0.05;
};

/// Benjamini-Hochberg step-up adjustment.
Eigen::VectorXd bh_adjust(const Eigen::VectorXd& p);

/// Per-vertex permutation test on `values` (one row per subject, one column
/// per vertex). The same label permutation is applied to every vertex;
/// permutation b draws from make_rng(seed, b).
VertexStatMap permutation_map(const Eigen::MatrixXd& values, const std::vector<int>& labels, int n_perm = 999,
                              std::uint64_t seed = 0, double alpha = 0.05);

struct ResidualModes {
    Eigen::MatrixXd modes;      // 3n x r, orthonormal columns (vertex-major x, y, z)
    Eigen::VectorXd variances;  // r, second moment of the residuals along each mode
    std::vector<std::pair<long, long>> pairs;  // (control, nearest dysplastic) indices into the latents
    TriMesh minus;              // template reconstruction -2 sd along the top mode
    TriMesh plus;               // +2 sd
    TriMesh heat;               // template with the per-vertex displacement magnitude of the top mode
};

/// For each control latent the nearest dysplastic latent; residuals
/// reconstruct(z_dys) - reconstruct(z_ctrl) are decomposed by uncentred PCA.
ResidualModes dysplastic_mode_pca(const GpdssmState& s, const Eigen::MatrixXd& latents, const std::vector<int>& labels,
                                  int n_modes = 3);

/// Per-vertex displacement magnitudes of each subject's reconstruction
/// relative to the template mesh.
Eigen::MatrixXd displacement_magnitudes(const GpdssmState& s, const Eigen::MatrixXd& latents);

/// ROC curves as a standalone SVG document.
std::string roc_svg(const std::vector<std::pair<std::string, EvalReport>>& curves);

}  // namespace gpdssm
