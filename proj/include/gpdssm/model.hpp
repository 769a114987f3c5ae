#pragma once

#include "gpdssm/archive.hpp"
#include "gpdssm/flow.hpp"
#include "gpdssm/gp.hpp"
#include "gpdssm/varifold.hpp"

#include <cstdint>
#include <vector>

namespace gpdssm {

struct GpdssmState {
    Template tpl;
    SpatialKernelParams spatial;
    VarifoldKernelParams fidelity;
    GpKernelParams gp;
    InducingState inducing;
    std::vector<GaussianDist> latents;  // one per training shape
    double beta = 1.0;
    int latent_dim = 20;
    int time_steps = 10;

    long output_dim() const noexcept { return 3 * tpl.size(); }
    std::vector<double> grid() const;
    void validate() const;

    Archive to_archive() const;
    static GpdssmState from_archive(const Archive& a);
};

struct ModelConfig {
    int latent_dim = 20;
    int n_control = 64;
    int n_inducing = 32;
    int time_steps = 10;
    double sigma_v = 0.0;    // <= 0: 0.3 x template bbox diagonal
    double sigma_pos = 0.0;  // <= 0: 0.25 x template bbox diagonal
    double beta_scale = 100.0;  // beta = beta_scale / median train-to-template distance
    GpKernelParams gp_init{1.0, 1.0, 1.0};
    double latent_init_sd = 0.1;
    double q_chol_init = 1.0;

    void validate() const;
};

struct TemplateChoice {
    long index = 0;
    Eigen::MatrixXd sq_dist;  // pairwise varifold distances between training meshes
};

/// Medoid under the varifold distance. The bandwidth used for the selection is
/// 0.25 x the mean bbox diagonal of the meshes unless `k` is positive.
TemplateChoice select_template(const std::vector<TriMesh>& meshes, VarifoldKernelParams k = {0.0});

/// Classical multidimensional scaling of a squared-distance matrix; columns
/// beyond the positive spectrum are zero.
Eigen::MatrixXd classical_mds(const Eigen::MatrixXd& sq_dist, int dims);

/// Builds the initial state: medoid template, farthest-point control points,
/// beta from the median template distance, MDS latent means, spread inducing
/// points.
GpdssmState init_state(const std::vector<TriMesh>& train, const ModelConfig& cfg, std::uint64_t seed);

/// Flat unconstrained parameter vector used by the optimiser:
///   log variance, log length_t, log length_z, log sigma_v,
///   inducing time logits (m), inducing latent coordinates (m x k, row-major),
///   whitened mean (m x D, row-major), Cholesky factor (lower triangle by rows,
///   diagonal stored as log), latent means (N x k), latent log sds (N x k).
Eigen::VectorXd pack(const GpdssmState& s);
void unpack(const Eigen::VectorXd& theta, GpdssmState& s);

/// Standard-normal draws for one ELBO evaluation.
struct ElboDraws {
    std::vector<Eigen::VectorXd> z;       // k per batch entry
    std::vector<Eigen::MatrixXd> u;       // m x D per batch entry
    std::vector<Eigen::MatrixXd> resid;   // (T+1) x D per batch entry
};

ElboDraws draw_noise(const GpdssmState& s, std::size_t batch, std::uint64_t seed, std::uint64_t step);

struct ElboTerms {
    double data = 0.0;  // beta-weighted, rescaled to the full training set
    double kl_z = 0.0;
    double kl_u = 0.0;
    std::vector<double> per_shape;  // unscaled beta * d^2 for each batch entry

    double loss() const noexcept { return data + kl_z + kl_u; }
};

/// Negative ELBO with one reparameterised sample per batch shape. `batch`
/// indexes `targets` and the state's latents; `grad` (optional) receives the
/// gradient in pack() layout.
ElboTerms elbo(const GpdssmState& s, const std::vector<VarifoldTarget>& targets, const std::vector<long>& batch,
               const ElboDraws& draws, Eigen::VectorXd* grad = nullptr);

struct FitConfig {
    double lr = 1e-2;
    int iters = 300;
    int batch_size = 0;  // 0: full batch
    std::uint64_t seed = 0;
    bool optimize_sigma_v = true;

    void validate() const;
};

struct FitResult {
    GpdssmState state;
    std::vector<double> trace;
    bool diverged = false;
};

FitResult fit(const GpdssmState& init, const std::vector<TriMesh>& train, const FitConfig& cfg);

struct InferConfig {
    double lr = 5e-2;
    int iters = 150;
    std::uint64_t seed = 0;
};

struct InferResult {
    GaussianDist posterior;
    double energy = 0.0;  // varifold distance between reconstruct(mean) and the shape
};

/// Optimises only q(z*) for a new aligned shape; the model is frozen.
InferResult infer_latent(const GpdssmState& s, const TriMesh& shape, const InferConfig& cfg);

/// Posterior-mean momenta at latent z, flowed from the template.
TriMesh reconstruct(const GpdssmState& s, const Eigen::VectorXd& z);
MomentumPath mean_path(const GpdssmState& s, const Eigen::VectorXd& z);

}  // namespace gpdssm
