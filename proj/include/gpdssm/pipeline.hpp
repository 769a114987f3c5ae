#pragma once

#include "gpdssm/classify.hpp"
#include "gpdssm/lddmm.hpp"
#include "gpdssm/mesh.hpp"
#include "gpdssm/model.hpp"
#include "gpdssm/preprocess.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace gpdssm {

struct ManifestRow {
    std::string id;
    std::string mesh_path;       // relative to the manifest directory unless absolute
    std::string landmarks_path;  // optional
    std::optional<double> lcea;
    std::optional<double> ai;
    std::string split;           // "train" or "test"
};

/// Dataset manifest, a CSV with the header
///   id,mesh_path,landmarks_path,label,lcea,ai,split
/// where label is 0 (control), 1 (dysplastic) or empty. Test labels are sealed
/// until release_test_labels(); reading one before that throws.
class Manifest {
public:
    static Manifest load(const std::filesystem::path& path);
    static Manifest parse(const std::string& text, const std::filesystem::path& directory);
    std::string to_csv() const;
    void save(const std::filesystem::path& path) const;

    void add(ManifestRow row, std::optional<int> label);

    const std::vector<ManifestRow>& rows() const noexcept { return rows_; }
    std::size_t size() const noexcept { return rows_.size(); }
    std::vector<std::size_t> indices(const std::string& split) const;

    std::optional<int> label(std::size_t i) const;
    void release_test_labels() noexcept { released_ = true; }
    /// Attempted reads of a test label while sealed.
    long sealed_reads() const noexcept { return sealed_reads_; }

    std::filesystem::path resolve(const std::string& relative) const;
    const std::filesystem::path& directory() const noexcept { return dir_; }
    void set_directory(std::filesystem::path dir) { dir_ = std::move(dir); }

private:
    std::vector<ManifestRow> rows_;
    std::vector<std::optional<int>> labels_;
    std::filesystem::path dir_;
    bool released_ = false;
    mutable long sealed_reads_ = 0;
};

/// Flat key=value configuration; '#' starts a comment. Unknown keys and
/// out-of-range values are rejected.
struct PipelineConfig {
    std::uint64_t seed = 0;
    int threads = 0;

    // generate
    int per_class = 12;
    double test_fraction = 0.5;
    int rings = 8;
    int sectors = 20;
    double radius = 25.0;
    double radial_noise = 0.1;
    double angle_depth_corr = 0.5;

    // preprocess
    int align_iters = 300;
    int align_starts = 4;

    // gpdssm
    int latent_dim = 4;
    int n_control = 32;
    int n_inducing = 16;
    int time_steps = 10;
    double sigma_v = 0.0;
    double sigma_pos = 0.0;
    double beta_scale = 100.0;
    double lr = 0.02;
    int iters = 300;
    int batch_size = 0;
    double infer_lr = 0.05;
    int infer_iters = 150;

    // lddmm
    double lddmm_beta_scale = 1.0;
    double lddmm_lr = 0.01;
    int lddmm_iters = 200;

    // classification and statistics
    int gp_hyper_iters = 50;
    int n_perm = 999;
    int bootstrap = 2000;
    double alpha = 0.05;
    int n_modes = 3;

    static PipelineConfig parse(const std::string& text);
    static PipelineConfig load(const std::filesystem::path& path);
    std::string to_text() const;
    void validate() const;

    ModelConfig model() const;
    FitConfig fit() const;
    InferConfig infer() const;
    AtlasConfig atlas() const;
    AlignmentConfig alignment() const;
};

enum class ModelChoice { Gpdssm, Lddmm, Angles, All };

ModelChoice parse_model_choice(const std::string& s);

struct CommandContext {
    std::filesystem::path manifest;
    PipelineConfig config;
    std::filesystem::path out;
    ModelChoice model = ModelChoice::All;
};

/// One synthetic subject: cup shape and angles. Subject i is odd-numbered
/// dysplastic and uses the generator make_rng(seed, 100 + i).
struct SubjectDraw {
    bool dysplastic = false;
    CupParams params;
    AngleRecord angles;
    Mat3 rotation = Mat3::Identity();  // pose of the raw mesh
    Vec3 translation = Vec3::Zero();
};

SubjectDraw draw_subject(const PipelineConfig& config, long index);

/// Writes the synthetic cohort: raw posed meshes with rim landmarks, angles,
/// and the manifest at ctx.manifest.
void cmd_generate(const CommandContext& ctx);

void cmd_preprocess(const CommandContext& ctx, Manifest& manifest);
void cmd_fit(const CommandContext& ctx, Manifest& manifest);
void cmd_infer(const CommandContext& ctx, Manifest& manifest);
void cmd_classify(const CommandContext& ctx, Manifest& manifest);
void cmd_evaluate(const CommandContext& ctx, Manifest& manifest);
void cmd_visualize(const CommandContext& ctx, Manifest& manifest);

/// Loads the manifest (except for generate) and dispatches.
void run_command(const std::string& name, const CommandContext& ctx);

/// Process exit code for an exception: 2 validation/format, 3 numerical, 4 I/O.
int exit_code_for(const std::exception& e);

}  // namespace gpdssm
