#include "gpdssm/pipeline.hpp"

#include "gpdssm/classify.hpp"
#include "gpdssm/eval.hpp"
#include "gpdssm/mesh_io.hpp"
#include "gpdssm/viz.hpp"

#include <json.hpp>

#include <Eigen/Geometry>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace gpdssm {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& s, const std::string& what) {
    double v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v))
        throw ValidationError(what + ": '" + s + "' is not a finite number");
    return v;
}

long long parse_int(const std::string& s, const std::string& what) {
    long long v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ValidationError(what + ": '" + s + "' is not an integer");
    return v;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// shortest text that reads back to the same double
std::string fmt(double v) {
    char buf[32];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

// Files are written into a staging directory and moved into place only when
// the command completes; on failure the staging directory is removed.
class Stage {
public:
    Stage(const fs::path& out, const std::string& command) : out_(out), dir_(out / (".staging-" + command)) {
        std::error_code ec;
        fs::remove_all(dir_, ec);
        fs::create_directories(dir_, ec);
        if (ec) throw IoError("cannot create " + dir_.string() + ": " + ec.message());
    }
    Stage(const Stage&) = delete;
    Stage& operator=(const Stage&) = delete;
    ~Stage() {
        std::error_code ec;
        fs::remove_all(dir_, ec);
    }

    // safe to call from worker threads
    fs::path operator()(const std::string& rel) {
        const fs::path p = dir_ / rel;
        std::lock_guard<std::mutex> lock(mu_);
        fs::create_directories(p.parent_path());
        files_.push_back(rel);
        return p;
    }

    void commit() {
        for (const auto& rel : files_) {
            const fs::path dst = out_ / rel;
            std::error_code ec;
            fs::create_directories(dst.parent_path(), ec);
            fs::rename(dir_ / rel, dst, ec);
            if (ec) throw IoError("cannot move output into place at " + dst.string() + ": " + ec.message());
        }
    }

private:
    fs::path out_, dir_;
    std::vector<std::string> files_;
    std::mutex mu_;
};

bool wants(ModelChoice m, ModelChoice which) { return m == ModelChoice::All || m == which; }

void require(const fs::path& p, const std::string& hint) {
    if (!fs::exists(p)) throw ValidationError("missing " + p.string() + " (" + hint + ")");
}

fs::path aligned_path(const CommandContext& ctx, const ManifestRow& r) { return ctx.out / "aligned" / (r.id + ".ply"); }

std::vector<TriMesh> load_aligned(const CommandContext& ctx, const Manifest& m, const std::vector<std::size_t>& rows) {
    std::vector<TriMesh> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const fs::path p = aligned_path(ctx, m.rows()[rows[i]]);
        require(p, "run preprocess first");
        out[i] = load_mesh(p);
    }
    return out;
}

std::vector<int> train_labels(const Manifest& m, const std::vector<std::size_t>& rows) {
    std::vector<int> out;
    for (std::size_t i : rows) {
        const auto l = m.label(i);
        if (!l) throw ValidationError("training row " + m.rows()[i].id + " has no label");
        out.push_back(*l);
    }
    return out;
}

// Latent table: id, split, then named value columns.
struct Table {
    std::vector<std::string> ids;
    std::vector<std::string> splits;
    Eigen::MatrixXd values;
};

void write_table(const fs::path& path, const std::vector<std::string>& columns, const Table& t) {
    std::ostringstream o;
    o << "id,split";
    for (const auto& c : columns) o << ',' << c;
    o << '\n';
    for (std::size_t i = 0; i < t.ids.size(); ++i) {
        o << t.ids[i] << ',' << t.splits[i];
        for (long j = 0; j < t.values.cols(); ++j) o << ',' << fmt(t.values(static_cast<long>(i), j));
        o << '\n';
    }
    write_file_atomic(path, o.str());
}

Table read_table(const fs::path& path) {
    std::istringstream in(read_text(path));
    std::string line;
    std::getline(in, line);
    const std::size_t cols = split_csv(line).size();
    if (cols < 2) throw FormatError("bad table header in " + path.string(), 1);
    Table t;
    std::vector<std::vector<double>> rows;
    long ln = 1;
    while (std::getline(in, line)) {
        ++ln;
        if (trim(line).empty()) continue;
        const auto c = split_csv(line);
        if (c.size() != cols) throw FormatError("wrong column count in " + path.string(), ln);
        t.ids.push_back(c[0]);
        t.splits.push_back(c[1]);
        std::vector<double> v;
        for (std::size_t j = 2; j < c.size(); ++j) v.push_back(parse_double(c[j], path.string()));
        rows.push_back(std::move(v));
    }
    t.values.resize(static_cast<long>(rows.size()), static_cast<long>(cols - 2));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j) t.values(static_cast<long>(i), static_cast<long>(j)) = rows[i][j];
    return t;
}

// Rows of `t` reordered to follow manifest rows; throws if one is missing.
Eigen::MatrixXd rows_for(const Table& t, const Manifest& m, const std::vector<std::size_t>& rows, long cols,
                         const std::string& what) {
    std::map<std::string, long> at;
    for (std::size_t i = 0; i < t.ids.size(); ++i) at[t.ids[i]] = static_cast<long>(i);
    Eigen::MatrixXd out(static_cast<long>(rows.size()), cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto it = at.find(m.rows()[rows[i]].id);
        if (it == at.end()) throw ValidationError(what + " has no entry for " + m.rows()[rows[i]].id + " (run infer)");
        out.row(static_cast<long>(i)) = t.values.row(it->second).head(cols);
    }
    return out;
}

struct ScoreRow {
    std::string id, split, model, kind;
    double probability;
};

std::vector<ScoreRow> read_scores(const fs::path& path) {
    std::istringstream in(read_text(path));
    std::string line;
    std::getline(in, line);
    std::vector<ScoreRow> out;
    long ln = 1;
    while (std::getline(in, line)) {
        ++ln;
        if (trim(line).empty()) continue;
        const auto c = split_csv(line);
        if (c.size() != 5) throw FormatError("wrong column count in " + path.string(), ln);
        out.push_back({c[0], c[1], c[2], c[3], parse_double(c[4], path.string())});
    }
    return out;
}

GpClassifierConfig classifier_config(const PipelineConfig& c) {
    GpClassifierConfig g;
    g.hyper_iters = c.gp_hyper_iters;
    return g;
}

// Angle logistic score for the given rows, fitted on the labelled training rows.
std::vector<double> angle_scores(const Manifest& m, const std::vector<std::size_t>& train,
                                 const std::vector<std::size_t>& query) {
    std::vector<AngleRecord> rec;
    std::vector<int> y;
    for (std::size_t i : train) {
        const auto& r = m.rows()[i];
        if (!r.lcea || !r.ai) continue;
        const auto l = m.label(i);
        if (!l) continue;
        rec.push_back({*r.lcea, *r.ai});
        y.push_back(*l);
    }
    const AngleScore s = fit_angle_score(rec, y);
    std::vector<double> out;
    for (std::size_t i : query) {
        const auto& r = m.rows()[i];
        if (!r.lcea || !r.ai) throw ValidationError("row " + r.id + " has no angles");
        out.push_back(s.predict_proba({*r.lcea, *r.ai}));
    }
    return out;
}

bool has_angles(const Manifest& m, const std::vector<std::size_t>& rows) {
    return !rows.empty() &&
           std::all_of(rows.begin(), rows.end(), [&](std::size_t i) { return m.rows()[i].lcea && m.rows()[i].ai; });
}

void apply_threads(const PipelineConfig& c) { set_thread_count(c.threads); }

}  // namespace

// ---------------------------------------------------------------------------
// Manifest

Manifest Manifest::parse(const std::string& text, const fs::path& directory) {
    static const std::vector<std::string> header{"id", "mesh_path", "landmarks_path", "label", "lcea", "ai", "split"};
    Manifest m;
    m.dir_ = directory;
    std::istringstream in(text);
    std::string line;
    long ln = 0;
    bool have_header = false;
    std::set<std::string> ids;
    while (std::getline(in, line)) {
        ++ln;
        if (trim(line).empty() || trim(line)[0] == '#') continue;
        const auto c = split_csv(line);
        if (!have_header) {
            if (c != header) throw FormatError("manifest header must be id,mesh_path,landmarks_path,label,lcea,ai,split", ln);
            have_header = true;
            continue;
        }
        if (c.size() != header.size()) throw FormatError("manifest row has " + std::to_string(c.size()) + " columns", ln);
        ManifestRow r;
        r.id = c[0];
        if (r.id.empty()) throw FormatError("empty id", ln);
        if (!ids.insert(r.id).second) throw FormatError("duplicate id " + r.id, ln);
        r.mesh_path = c[1];
        r.landmarks_path = c[2];
        std::optional<int> label;
        if (c[3] == "1" || c[3] == "dysplastic") {
            label = 1;
        } else if (c[3] == "0" || c[3] == "control") {
            label = 0;
        } else if (!c[3].empty()) {
            throw FormatError("label must be 0, 1 or empty", ln);
        }
        try {
            if (!c[4].empty()) r.lcea = parse_double(c[4], "lcea");
            if (!c[5].empty()) r.ai = parse_double(c[5], "ai");
        } catch (const ValidationError& e) {
            throw FormatError(e.what(), ln);
        }
        if (r.lcea && r.ai && !AngleRecord{*r.lcea, *r.ai}.plausible())
            std::cerr << "warning: implausible angles for " << r.id << "\n";
        r.split = c[6];
        if (r.split != "train" && r.split != "test") throw FormatError("split must be train or test", ln);
        m.rows_.push_back(std::move(r));
        m.labels_.push_back(label);
    }
    if (!have_header) throw FormatError("manifest is empty", ln);
    return m;
}

Manifest Manifest::load(const fs::path& path) {
    return parse(read_text(path), path.has_parent_path() ? path.parent_path() : fs::path("."));
}

std::string Manifest::to_csv() const {
    std::ostringstream o;
    o << "id,mesh_path,landmarks_path,label,lcea,ai,split\n";
    for (std::size_t i = 0; i < rows_.size(); ++i) {
        const auto& r = rows_[i];
        o << r.id << ',' << r.mesh_path << ',' << r.landmarks_path << ',';
        if (labels_[i]) o << *labels_[i];
        o << ',';
        if (r.lcea) o << fmt(*r.lcea);
        o << ',';
        if (r.ai) o << fmt(*r.ai);
        o << ',' << r.split << '\n';
    }
    return o.str();
}

void Manifest::save(const fs::path& path) const { write_file_atomic(path, to_csv()); }

void Manifest::add(ManifestRow row, std::optional<int> label) {
    if (row.split != "train" && row.split != "test") throw ValidationError("split must be train or test");
    for (const auto& r : rows_)
        if (r.id == row.id) throw ValidationError("duplicate id " + row.id);
    if (label && *label != 0 && *label != 1) throw ValidationError("label must be 0 or 1");
    rows_.push_back(std::move(row));
    labels_.push_back(label);
}

std::vector<std::size_t> Manifest::indices(const std::string& split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < rows_.size(); ++i)
        if (rows_[i].split == split) out.push_back(i);
    return out;
}

std::optional<int> Manifest::label(std::size_t i) const {
    if (i >= rows_.size()) throw ValidationError("manifest row out of range");
    if (rows_[i].split == "test" && !released_) {
        ++sealed_reads_;
        throw ValidationError("test labels are sealed until evaluate (row " + rows_[i].id + ")");
    }
    return labels_[i];
}

fs::path Manifest::resolve(const std::string& relative) const {
    const fs::path p(relative);
    return p.is_absolute() ? p : dir_ / p;
}

// ---------------------------------------------------------------------------
// Config

PipelineConfig PipelineConfig::parse(const std::string& text) {
    PipelineConfig c;
    std::map<std::string, std::function<void(const std::string&)>> set;
    auto real = [&](const char* key, double& field) {
        set[key] = [&field, key](const std::string& v) { field = parse_double(v, key); };
    };
    auto integer = [&](const char* key, int& field) {
        set[key] = [&field, key](const std::string& v) {
            const long long x = parse_int(v, key);
            if (x < -(1LL << 30) || x > (1LL << 30)) throw ValidationError(std::string(key) + " out of range");
            field = static_cast<int>(x);
        };
    };
    set["seed"] = [&c](const std::string& v) {
        const long long x = parse_int(v, "seed");
        if (x < 0) throw ValidationError("seed must be non-negative");
        c.seed = static_cast<std::uint64_t>(x);
    };
    integer("threads", c.threads);
    integer("per_class", c.per_class);
    real("test_fraction", c.test_fraction);
    integer("rings", c.rings);
    integer("sectors", c.sectors);
    real("radius", c.radius);
    real("radial_noise", c.radial_noise);
    real("angle_depth_corr", c.angle_depth_corr);
    integer("align_iters", c.align_iters);
    integer("align_starts", c.align_starts);
    integer("latent_dim", c.latent_dim);
    integer("n_control", c.n_control);
    integer("n_inducing", c.n_inducing);
    integer("time_steps", c.time_steps);
    real("sigma_v", c.sigma_v);
    real("sigma_pos", c.sigma_pos);
    real("beta_scale", c.beta_scale);
    real("lr", c.lr);
    integer("iters", c.iters);
    integer("batch_size", c.batch_size);
    real("infer_lr", c.infer_lr);
    integer("infer_iters", c.infer_iters);
    real("lddmm_beta_scale", c.lddmm_beta_scale);
    real("lddmm_lr", c.lddmm_lr);
    integer("lddmm_iters", c.lddmm_iters);
    integer("gp_hyper_iters", c.gp_hyper_iters);
    integer("n_perm", c.n_perm);
    integer("bootstrap", c.bootstrap);
    real("alpha", c.alpha);
    integer("n_modes", c.n_modes);

    std::istringstream in(text);
    std::string line;
    long ln = 0;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        ++ln;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("expected key=value", ln);
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        const auto it = set.find(key);
        if (it == set.end()) throw FormatError("unknown config key '" + key + "'", ln);
        if (!seen.insert(key).second) throw FormatError("config key '" + key + "' given twice", ln);
        try {
            it->second(value);
        } catch (const ValidationError& e) {
            throw FormatError(e.what(), ln);
        }
    }
    c.validate();
    return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) { return parse(read_text(path)); }

std::string PipelineConfig::to_text() const {
    std::ostringstream o;
    o << "seed=" << seed << "\nthreads=" << threads << "\nper_class=" << per_class
      << "\ntest_fraction=" << fmt(test_fraction) << "\nrings=" << rings << "\nsectors=" << sectors
      << "\nradius=" << fmt(radius) << "\nradial_noise=" << fmt(radial_noise)
      << "\nangle_depth_corr=" << fmt(angle_depth_corr) << "\nalign_iters=" << align_iters
      << "\nalign_starts=" << align_starts << "\nlatent_dim=" << latent_dim << "\nn_control=" << n_control
      << "\nn_inducing=" << n_inducing << "\ntime_steps=" << time_steps << "\nsigma_v=" << fmt(sigma_v)
      << "\nsigma_pos=" << fmt(sigma_pos) << "\nbeta_scale=" << fmt(beta_scale) << "\nlr=" << fmt(lr)
      << "\niters=" << iters << "\nbatch_size=" << batch_size << "\ninfer_lr=" << fmt(infer_lr)
      << "\ninfer_iters=" << infer_iters << "\nlddmm_beta_scale=" << fmt(lddmm_beta_scale)
      << "\nlddmm_lr=" << fmt(lddmm_lr) << "\nlddmm_iters=" << lddmm_iters << "\ngp_hyper_iters=" << gp_hyper_iters
      << "\nn_perm=" << n_perm << "\nbootstrap=" << bootstrap << "\nalpha=" << fmt(alpha) << "\nn_modes=" << n_modes
      << "\n";
    return o.str();
}

void PipelineConfig::validate() const {
    auto need = [](bool ok, const std::string& msg) {
        if (!ok) throw ValidationError(msg);
    };
    need(threads >= 0, "threads must be >= 0");
    need(per_class >= 2, "per_class must be >= 2");
    need(test_fraction >= 0 && test_fraction < 1, "test_fraction must lie in [0, 1)");
    need(rings >= 2 && rings <= 200, "rings must lie in [2, 200]");
    need(sectors >= 3 && sectors <= 400, "sectors must lie in [3, 400]");
    need(radius > 0, "radius must be positive");
    need(radial_noise >= 0, "radial_noise must be >= 0");
    need(angle_depth_corr >= 0 && angle_depth_corr <= 1, "angle_depth_corr must lie in [0, 1]");
    need(align_iters >= 1, "align_iters must be >= 1");
    need(align_starts >= 1 && align_starts <= 4, "align_starts must lie in [1, 4]");
    need(iters >= 0 && infer_iters >= 0 && lddmm_iters >= 0, "iteration counts must be >= 0");
    need(lr > 0 && infer_lr > 0 && lddmm_lr > 0, "learning rates must be positive");
    need(lddmm_beta_scale > 0, "lddmm_beta_scale must be positive");
    need(gp_hyper_iters >= 0, "gp_hyper_iters must be >= 0");
    need(n_perm >= 1, "n_perm must be >= 1");
    need(bootstrap >= 100, "bootstrap must be >= 100");
    need(alpha > 0 && alpha < 1, "alpha must lie in (0, 1)");
    need(n_modes >= 1, "n_modes must be >= 1");
    model().validate();
    fit().validate();
    atlas().validate();
    alignment().validate();
}

ModelConfig PipelineConfig::model() const {
    ModelConfig m;
    m.latent_dim = latent_dim;
    m.n_control = n_control;
    m.n_inducing = n_inducing;
    m.time_steps = time_steps;
    m.sigma_v = sigma_v;
    m.sigma_pos = sigma_pos;
    m.beta_scale = beta_scale;
    return m;
}

FitConfig PipelineConfig::fit() const {
    FitConfig f;
    f.lr = lr;
    f.iters = iters;
    f.batch_size = batch_size;
    f.seed = seed;
    return f;
}

InferConfig PipelineConfig::infer() const {
    InferConfig f;
    f.lr = infer_lr;
    f.iters = infer_iters;
    f.seed = seed;
    return f;
}

AtlasConfig PipelineConfig::atlas() const {
    AtlasConfig a;
    a.beta_scale = lddmm_beta_scale;
    a.lr = lddmm_lr;
    a.iters = lddmm_iters;
    a.time_steps = time_steps;
    a.seed = seed;
    return a;
}

AlignmentConfig PipelineConfig::alignment() const {
    AlignmentConfig a;
    a.max_iters = align_iters;
    a.starts = align_starts;
    a.probe_iters = std::min(100, align_iters);
    return a;
}

ModelChoice parse_model_choice(const std::string& s) {
    if (s == "gpdssm") return ModelChoice::Gpdssm;
    if (s == "lddmm") return ModelChoice::Lddmm;
    if (s == "angles") return ModelChoice::Angles;
    if (s == "all") return ModelChoice::All;
    throw ValidationError("--model must be gpdssm, lddmm, angles or all");
}

// ---------------------------------------------------------------------------
// Commands

namespace {

// Rim landmarks of a generated cup, evenly spaced around the rim.
Points rim_points(const TriMesh& cup, const CupParams& p, int count) {
    const auto rim = cup_rim_indices(p);
    Points lm(count, 3);
    for (int i = 0; i < count; ++i) lm.row(i) = cup.vertices().row(rim[i * rim.size() / count]);
    return lm;
}

// Cup with a surrounding surface sloping away below the rim, like the bone
// around the socket.
TriMesh with_surround(const TriMesh& cup, const CupParams& p) {
    const auto rim = cup_rim_indices(p);
    const int s = static_cast<int>(rim.size());
    const int rings = 3;
    Points v(cup.num_vertices() + rings * s, 3);
    v.topRows(cup.num_vertices()) = cup.vertices();
    std::vector<Face> faces = cup.faces();
    std::vector<int> prev(rim.begin(), rim.end());
    for (int r = 1; r <= rings; ++r) {
        std::vector<int> cur(s);
        for (int k = 0; k < s; ++k) {
            const Vec3 at = cup.vertices().row(rim[k]).transpose();
            Vec3 dir(at.x(), at.y(), 0.0);
            dir.normalize();
            cur[k] = static_cast<int>(cup.num_vertices() + (r - 1) * s + k);
            v.row(cur[k]) = (at + p.radius * (0.25 * r * dir - Vec3(0, 0, 0.06 * r))).transpose();
        }
        for (int k = 0; k < s; ++k) {
            const int k1 = (k + 1) % s;
            faces.push_back({prev[k], cur[k], cur[k1]});
            faces.push_back({prev[k], cur[k1], prev[k1]});
        }
        prev = cur;
    }
    return TriMesh(v, faces);
}

}  // namespace

SubjectDraw draw_subject(const PipelineConfig& c, long index) {
    SubjectDraw d;
    d.dysplastic = index % 2 == 1;
    std::mt19937_64 rng = make_rng(c.seed, 100 + static_cast<std::uint64_t>(index));
    std::normal_distribution<double> normal(0.0, 1.0);
    d.params = sample_cup_params(d.dysplastic, rng, c.rings, c.sectors, c.radial_noise);
    d.params.radius = c.radius;
    // a shared score drives depth (uniform over the class range) and both angles
    const double g = normal(rng);
    const DepthRange range = depth_range(d.dysplastic);
    d.params.depth_scale = range.lo + (range.hi - range.lo) * 0.5 * std::erfc(-g / std::sqrt(2.0));
    const double rho = c.angle_depth_corr, rest = std::sqrt(1.0 - rho * rho);
    d.angles.lcea = (d.dysplastic ? 16.0 : 30.0) + 3.0 * (rho * g + rest * normal(rng));
    d.angles.ai = (d.dysplastic ? 19.0 : 8.0) + 3.0 * (-rho * g + rest * normal(rng));
    Eigen::Quaterniond q(normal(rng), normal(rng), normal(rng), normal(rng));
    q.normalize();
    d.rotation = q.toRotationMatrix();
    d.translation = Vec3(20 * normal(rng), 20 * normal(rng), 20 * normal(rng));
    return d;
}

void cmd_generate(const CommandContext& ctx) {
    const PipelineConfig& c = ctx.config;
    apply_threads(c);
    const fs::path mdir = ctx.manifest.has_parent_path() ? ctx.manifest.parent_path() : fs::path(".");
    const fs::path out = ctx.out.empty() ? mdir : ctx.out;
    fs::create_directories(out);
    Stage stage(out, "generate");

    const int n = 2 * c.per_class;
    // stratified split: the first round(per_class * fraction) of a shuffled order per class go to test
    std::vector<std::string> split(n, "train");
    std::mt19937_64 split_rng = make_rng(c.seed, 1);
    for (int cls = 0; cls < 2; ++cls) {
        std::vector<int> members;
        for (int i = cls; i < n; i += 2) members.push_back(i);
        std::shuffle(members.begin(), members.end(), split_rng);
        const int n_test = static_cast<int>(std::lround(c.per_class * c.test_fraction));
        for (int j = 0; j < n_test; ++j) split[members[j]] = "test";
    }

    Manifest m;
    m.set_directory(mdir);
    std::vector<ManifestRow> rows(n);
    parallel_for(n, [&](long i) {
        const SubjectDraw d = draw_subject(c, i);
        const TriMesh cup = generate_cup(d.params);
        const Points rim = rim_points(cup, d.params, 8);
        const TriMesh posed = with_surround(cup, d.params).transformed(d.rotation, d.translation);
        Landmarks lm{(rim * d.rotation.transpose()).rowwise() + d.translation.transpose()};

        std::ostringstream id;
        id << "sub" << std::setw(3) << std::setfill('0') << i + 1;
        ManifestRow row;
        row.id = id.str();
        row.mesh_path = fs::relative(out / "raw" / (row.id + ".ply"), mdir).generic_string();
        row.landmarks_path = fs::relative(out / "raw" / (row.id + "_rim.csv"), mdir).generic_string();
        row.lcea = d.angles.lcea;
        row.ai = d.angles.ai;
        row.split = split[i];
        rows[i] = row;
        save_mesh(posed, stage("raw/" + row.id + ".ply"));
        save_landmarks(lm, stage("raw/" + row.id + "_rim.csv"));
    });
    for (int i = 0; i < n; ++i) m.add(rows[i], i % 2);
    stage.commit();
    m.save(ctx.manifest);
}

void cmd_preprocess(const CommandContext& ctx, Manifest& m) {
    apply_threads(ctx.config);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < m.size(); ++i)
        if (!m.rows()[i].mesh_path.empty()) rows.push_back(i);
    const auto train = m.indices("train");
    auto ref_it = std::find_if(train.begin(), train.end(), [&](std::size_t i) { return !m.rows()[i].mesh_path.empty(); });
    if (ref_it == train.end()) throw ValidationError("no training row with a mesh to use as the alignment reference");

    auto extract = [&](std::size_t i) {
        const auto& r = m.rows()[i];
        TriMesh mesh = load_mesh(m.resolve(r.mesh_path));
        if (r.landmarks_path.empty()) return mesh;
        return extract_cup(mesh, load_landmarks(m.resolve(r.landmarks_path)));
    };
    const TriMesh reference = extract(*ref_it);
    const AlignmentConfig acfg = ctx.config.alignment();

    fs::create_directories(ctx.out);
    Stage stage(ctx.out, "preprocess");
    std::vector<std::string> report(rows.size());
    std::vector<fs::path> targets(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) targets[k] = stage("aligned/" + m.rows()[rows[k]].id + ".ply");
    parallel_for(static_cast<long>(rows.size()), [&](long k) {
        const std::size_t i = rows[k];
        const TriMesh cup = i == *ref_it ? reference : extract(i);
        std::ostringstream line;
        line << m.rows()[i].id << ',';
        if (i == *ref_it) {
            save_mesh(cup, targets[k]);
            line << "0,1";
        } else {
            const AlignmentResult a = rigid_align(cup, reference, acfg);
            save_mesh(a.aligned, targets[k]);
            line << fmt(a.energy) << ',' << fmt(a.transform.scale);
        }
        report[k] = line.str();
    });
    std::ostringstream o;
    o << "id,energy,scale\n";
    for (const auto& l : report) o << l << '\n';
    write_file_atomic(stage("preprocess_report.csv"), o.str());
    stage.commit();
}

void cmd_fit(const CommandContext& ctx, Manifest& m) {
    const PipelineConfig& c = ctx.config;
    apply_threads(c);
    const auto train = m.indices("train");
    if (train.size() < 2) throw ValidationError("fit needs at least two training rows");
    const std::vector<TriMesh> meshes = load_aligned(ctx, m, train);
    fs::create_directories(ctx.out);
    Stage stage(ctx.out, "fit");

    GpdssmState init = init_state(meshes, c.model(), c.seed);
    SpatialKernelParams spatial = init.spatial;
    if (wants(ctx.model, ModelChoice::Gpdssm)) {
        const FitResult r = fit(init, meshes, c.fit());
        if (r.diverged) std::cerr << "warning: GPDSSM optimisation flagged divergence\n";
        r.state.to_archive().save(stage("gpdssm.gpa"));
        std::ostringstream tr;
        tr << "iteration,loss\n";
        for (std::size_t i = 0; i < r.trace.size(); ++i) tr << i << ',' << fmt(r.trace[i]) << '\n';
        write_file_atomic(stage("gpdssm_trace.csv"), tr.str());
        spatial = r.state.spatial;
    }
    if (wants(ctx.model, ModelChoice::Lddmm)) {
        const AtlasFit a = fit_atlas(meshes, init.tpl, spatial, init.fidelity, c.atlas());
        if (a.diverged) std::cerr << "warning: LDDMM optimisation flagged divergence\n";
        a.state.to_archive().save(stage("lddmm.gpa"));
        std::ostringstream tr;
        tr << "iteration,loss\n";
        for (std::size_t i = 0; i < a.trace.size(); ++i) tr << i << ',' << fmt(a.trace[i]) << '\n';
        write_file_atomic(stage("lddmm_trace.csv"), tr.str());
    }
    write_file_atomic(stage("fit_config.txt"), c.to_text());
    stage.commit();
}

void cmd_infer(const CommandContext& ctx, Manifest& m) {
    const PipelineConfig& c = ctx.config;
    apply_threads(c);
    const auto train = m.indices("train"), test = m.indices("test");
    const std::vector<TriMesh> test_meshes = load_aligned(ctx, m, test);
    fs::create_directories(ctx.out);
    Stage stage(ctx.out, "infer");

    if (wants(ctx.model, ModelChoice::Gpdssm)) {
        require(ctx.out / "gpdssm.gpa", "run fit first");
        const GpdssmState s = GpdssmState::from_archive(Archive::load(ctx.out / "gpdssm.gpa"));
        if (s.latents.size() != train.size()) throw ValidationError("gpdssm.gpa does not match the manifest's training rows");
        const long k = s.latent_dim;
        Table t;
        t.values.resize(static_cast<long>(train.size() + test.size()), 2 * k + 1);
        for (std::size_t i = 0; i < train.size(); ++i) {
            t.ids.push_back(m.rows()[train[i]].id);
            t.splits.push_back("train");
            t.values.row(static_cast<long>(i)) << s.latents[i].mean.transpose(), s.latents[i].sd.transpose(), 0.0;
        }
        std::vector<InferResult> inferred(test.size());
        for (std::size_t i = 0; i < test.size(); ++i) inferred[i] = infer_latent(s, test_meshes[i], c.infer());
        for (std::size_t i = 0; i < test.size(); ++i) {
            t.ids.push_back(m.rows()[test[i]].id);
            t.splits.push_back("test");
            t.values.row(static_cast<long>(train.size() + i)) << inferred[i].posterior.mean.transpose(),
                inferred[i].posterior.sd.transpose(), inferred[i].energy;
        }
        std::vector<std::string> cols;
        for (long j = 0; j < k; ++j) cols.push_back("mean" + std::to_string(j));
        for (long j = 0; j < k; ++j) cols.push_back("sd" + std::to_string(j));
        cols.push_back("energy");
        write_table(stage("latents.csv"), cols, t);
    }
    if (wants(ctx.model, ModelChoice::Lddmm)) {
        require(ctx.out / "lddmm.gpa", "run fit with --model lddmm or all first");
        const AtlasState a = AtlasState::from_archive(Archive::load(ctx.out / "lddmm.gpa"));
        if (a.momenta.size() != train.size()) throw ValidationError("lddmm.gpa does not match the manifest's training rows");
        const MomentaPca pca = momenta_pca(a.momenta, c.latent_dim);
        std::vector<Points> test_momenta(test.size());
        for (std::size_t i = 0; i < test.size(); ++i) test_momenta[i] = register_shape(a, test_meshes[i], c.atlas()).momenta;
        const long k = pca.embeddings.cols();
        Table t;
        t.values.resize(static_cast<long>(train.size() + test.size()), k);
        for (std::size_t i = 0; i < train.size(); ++i) {
            t.ids.push_back(m.rows()[train[i]].id);
            t.splits.push_back("train");
            t.values.row(static_cast<long>(i)) = pca.embeddings.row(static_cast<long>(i));
        }
        for (std::size_t i = 0; i < test.size(); ++i) {
            t.ids.push_back(m.rows()[test[i]].id);
            t.splits.push_back("test");
            t.values.row(static_cast<long>(train.size() + i)) = pca.project(test_momenta[i]).transpose();
        }
        std::vector<std::string> cols;
        for (long j = 0; j < k; ++j) cols.push_back("pc" + std::to_string(j));
        write_table(stage("lddmm_embeddings.csv"), cols, t);
    }
    stage.commit();
}

void cmd_classify(const CommandContext& ctx, Manifest& m) {
    const PipelineConfig& c = ctx.config;
    apply_threads(c);
    const auto train = m.indices("train"), test = m.indices("test");
    const std::vector<int> y = train_labels(m, train);
    fs::create_directories(ctx.out);
    Stage stage(ctx.out, "classify");
    std::ostringstream o;
    o << "id,split,model,kind,probability\n";
    auto emit = [&](const std::vector<std::size_t>& rows, const std::string& model, const std::string& kind,
                    const std::vector<double>& p) {
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (std::isnan(p[i])) continue;
            o << m.rows()[rows[i]].id << ',' << m.rows()[rows[i]].split << ',' << model << ',' << kind << ','
              << fmt(p[i]) << '\n';
        }
    };
    auto latent_model = [&](const std::string& name, const fs::path& file, bool means_only) {
        require(file, "run infer first");
        const Table t = read_table(file);
        long cols = t.values.cols();
        if (means_only) cols = (cols - 1) / 2;
        const Eigen::MatrixXd xtr = rows_for(t, m, train, cols, file.filename().string());
        const Eigen::MatrixXd xte = rows_for(t, m, test, cols, file.filename().string());
        const GpClassifier clf = GpClassifier::fit(xtr, y, classifier_config(c));
        const Eigen::VectorXd p = clf.predict_batch(xte);
        emit(test, name, "test", std::vector<double>(p.data(), p.data() + p.size()));
        if (train.size() >= 3) emit(train, name, "loocv", loocv_scores(xtr, y, classifier_config(c)).scores);
    };
    bool any = false;
    if (wants(ctx.model, ModelChoice::Gpdssm)) {
        latent_model("gpdssm", ctx.out / "latents.csv", true);
        any = true;
    }
    if (wants(ctx.model, ModelChoice::Lddmm)) {
        latent_model("lddmm", ctx.out / "lddmm_embeddings.csv", false);
        any = true;
    }
    if (wants(ctx.model, ModelChoice::Angles) && has_angles(m, train)) {
        emit(test, "angles", "test", angle_scores(m, train, test));
        // leave-one-out for the angle score as well
        std::vector<double> loo(train.size());
        for (std::size_t i = 0; i < train.size(); ++i) {
            std::vector<std::size_t> rest;
            for (std::size_t j = 0; j < train.size(); ++j)
                if (j != i) rest.push_back(train[j]);
            try {
                loo[i] = angle_scores(m, rest, {train[i]})[0];
            } catch (const ValidationError&) {
                loo[i] = std::nan("");
            }
        }
        emit(train, "angles", "loocv", loo);
        any = true;
    }
    if (!any) throw ValidationError("nothing to classify: no model selected has its inputs");
    write_file_atomic(stage("scores.csv"), o.str());
    stage.commit();
}

void cmd_evaluate(const CommandContext& ctx, Manifest& m) {
    const PipelineConfig& c = ctx.config;
    apply_threads(c);
    m.release_test_labels();
    const auto train = m.indices("train"), test = m.indices("test");
    std::vector<ScoreRow> scores;
    if (fs::exists(ctx.out / "scores.csv")) scores = read_scores(ctx.out / "scores.csv");

    auto collect = [&](const std::string& model, const std::string& kind, std::vector<std::string>& ids,
                       std::vector<double>& p, std::vector<int>& y) {
        std::map<std::string, std::size_t> row_of;
        for (std::size_t i = 0; i < m.size(); ++i) row_of[m.rows()[i].id] = i;
        for (const auto& s : scores) {
            if (s.model != model || s.kind != kind) continue;
            const auto it = row_of.find(s.id);
            if (it == row_of.end()) throw ValidationError("scores.csv mentions unknown id " + s.id);
            const auto l = m.label(it->second);
            if (!l) continue;
            ids.push_back(s.id);
            p.push_back(s.probability);
            y.push_back(*l);
        }
    };

    fs::create_directories(ctx.out);
    Stage stage(ctx.out, "evaluate");
    nlohmann::ordered_json report;
    report["models"] = nlohmann::ordered_json::object();
    std::map<std::string, std::pair<std::vector<std::string>, std::vector<double>>> test_scores;
    std::vector<std::pair<std::string, EvalReport>> curves;
    const MetricFn acc = [](const std::vector<double>& s, const std::vector<int>& y) { return confusion_metrics(s, y).accuracy; };
    const MetricFn sens = [](const std::vector<double>& s, const std::vector<int>& y) { return confusion_metrics(s, y).sensitivity; };
    const MetricFn spec = [](const std::vector<double>& s, const std::vector<int>& y) { return confusion_metrics(s, y).specificity; };

    for (const std::string model : {"gpdssm", "lddmm", "angles"}) {
        std::vector<std::string> ids;
        std::vector<double> p;
        std::vector<int> y;
        collect(model, "test", ids, p, y);
        if (p.empty() && model == "angles" && has_angles(m, train) && has_angles(m, test)) {
            p = angle_scores(m, train, test);
            for (std::size_t i : test) {
                ids.push_back(m.rows()[i].id);
                y.push_back(m.label(i).value_or(-1));
            }
        }
        const bool usable = !p.empty() && std::find(y.begin(), y.end(), 0) != y.end() &&
                            std::find(y.begin(), y.end(), 1) != y.end() &&
                            std::find(y.begin(), y.end(), -1) == y.end();
        if (!usable) {
            report["models"][model] = {{"status", "absent"}};
            continue;
        }
        EvalReport r = roc_auc(p, y);
        const std::uint64_t seed = c.seed;
        r.ci["auc"] = bootstrap_ci(p, y, auc_rank, c.bootstrap, seed).ci;
        r.ci["accuracy"] = bootstrap_ci(p, y, acc, c.bootstrap, seed).ci;
        r.ci["sensitivity"] = bootstrap_ci(p, y, sens, c.bootstrap, seed).ci;
        r.ci["specificity"] = bootstrap_ci(p, y, spec, c.bootstrap, seed).ci;
        nlohmann::ordered_json j = nlohmann::ordered_json::parse(r.to_json());
        j["status"] = "present";
        j["n"] = p.size();

        std::vector<std::string> lids;
        std::vector<double> lp;
        std::vector<int> ly;
        collect(model, "loocv", lids, lp, ly);
        if (!lp.empty() && std::count(ly.begin(), ly.end(), 1) > 0 && std::count(ly.begin(), ly.end(), 0) > 0)
            j["loocv_auc"] = auc_rank(lp, ly);
        report["models"][model] = j;
        curves.emplace_back(model, r);

        // align by id for paired comparisons
        std::vector<std::size_t> order(ids.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
        auto& dst = test_scores[model];
        for (std::size_t o : order) {
            dst.first.push_back(ids[o]);
            dst.second.push_back(p[o]);
        }
    }

    report["paired_auc_difference"] = nlohmann::ordered_json::object();
    for (const auto& [a, b] : std::vector<std::pair<std::string, std::string>>{{"gpdssm", "lddmm"}, {"gpdssm", "angles"}, {"lddmm", "angles"}}) {
        if (!test_scores.count(a) || !test_scores.count(b) || test_scores[a].first != test_scores[b].first) continue;
        std::vector<int> y;
        for (const auto& id : test_scores[a].first) {
            for (std::size_t i = 0; i < m.size(); ++i)
                if (m.rows()[i].id == id) y.push_back(*m.label(i));
        }
        const BootstrapResult d = bootstrap_paired(test_scores[a].second, test_scores[b].second, y, auc_rank, c.bootstrap, c.seed);
        double mean = 0;
        for (double v : d.replicates) mean += v;
        mean /= static_cast<double>(d.replicates.size());
        report["paired_auc_difference"][a + "-" + b] = {{"mean", mean}, {"ci", {d.ci.lo, d.ci.hi}}};
    }

    // hard angle rule on the test rows
    if (has_angles(m, test)) {
        std::map<std::string, std::map<std::string, int>> table;
        for (std::size_t i : test) {
            const auto l = m.label(i);
            const char* cls = to_string(angle_rule({*m.rows()[i].lcea, *m.rows()[i].ai}));
            ++table[l ? (*l ? "dysplastic" : "control") : "unlabelled"][cls];
        }
        report["angle_rule"] = table;
    }

    write_file_atomic(stage("report.json"), report.dump(2) + "\n");
    if (!curves.empty()) write_file_atomic(stage("roc.svg"), roc_svg(curves));
    stage.commit();
}

void cmd_visualize(const CommandContext& ctx, Manifest& m) {
    const PipelineConfig& c = ctx.config;
    apply_threads(c);
    require(ctx.out / "gpdssm.gpa", "run fit first");
    const GpdssmState s = GpdssmState::from_archive(Archive::load(ctx.out / "gpdssm.gpa"));
    const auto train = m.indices("train");
    if (s.latents.size() != train.size()) throw ValidationError("gpdssm.gpa does not match the manifest's training rows");
    const std::vector<int> y = train_labels(m, train);
    Eigen::MatrixXd z(static_cast<long>(train.size()), s.latent_dim);
    for (std::size_t i = 0; i < train.size(); ++i) z.row(static_cast<long>(i)) = s.latents[i].mean.transpose();

    fs::create_directories(ctx.out);
    Stage stage(ctx.out, "visualize");
    std::vector<Points> recon(train.size());
    parallel_for(static_cast<long>(train.size()),
                 [&](long i) { recon[i] = reconstruct(s, z.row(i).transpose()).vertices(); });
    const ClassAverage avg = class_average(recon, y);
    save_mesh(s.tpl.mesh.with_vertices(avg.control), stage("viz/class_average_control.ply"));
    save_mesh(s.tpl.mesh.with_vertices(avg.dysplastic), stage("viz/class_average_dysplastic.ply"));
    save_mesh(s.tpl.mesh, stage("viz/template.ply"));

    Eigen::MatrixXd mags(static_cast<long>(train.size()), s.tpl.mesh.num_vertices());
    for (std::size_t i = 0; i < train.size(); ++i)
        mags.row(static_cast<long>(i)) = (recon[i] - s.tpl.mesh.vertices()).rowwise().norm().transpose();
    const VertexStatMap map = permutation_map(mags, y, c.n_perm, c.seed, c.alpha);
    std::ostringstream o;
    o << "vertex,statistic,p_raw,p_adjusted,significant\n";
    for (long v = 0; v < map.statistic.size(); ++v)
        o << v << ',' << fmt(map.statistic[v]) << ',' << fmt(map.p_raw[v]) << ',' << fmt(map.p_adjusted[v]) << ','
          << (map.significant[v] ? 1 : 0) << '\n';
    write_file_atomic(stage("viz/permutation_map.csv"), o.str());
    // brighter = more significant
    save_mesh(s.tpl.mesh.with_scalar(-map.p_adjusted.array().log10().matrix()), stage("viz/permutation_heat.ply"), true);

    const ResidualModes modes = dysplastic_mode_pca(s, z, y, c.n_modes);
    save_mesh(modes.minus, stage("viz/mode1_minus2sd.ply"));
    save_mesh(modes.plus, stage("viz/mode1_plus2sd.ply"));
    save_mesh(modes.heat, stage("viz/mode1_heat.ply"), true);
    std::ostringstream mv;
    mv << "mode,variance\n";
    for (long j = 0; j < modes.variances.size(); ++j) mv << j + 1 << ',' << fmt(modes.variances[j]) << '\n';
    write_file_atomic(stage("viz/mode_variances.csv"), mv.str());
    stage.commit();
}

void run_command(const std::string& name, const CommandContext& ctx) {
    if (name == "generate") {
        cmd_generate(ctx);
        return;
    }
    Manifest m = Manifest::load(ctx.manifest);
    if (name == "preprocess") {
        cmd_preprocess(ctx, m);
    } else if (name == "fit") {
        cmd_fit(ctx, m);
    } else if (name == "infer") {
        cmd_infer(ctx, m);
    } else if (name == "classify") {
        cmd_classify(ctx, m);
    } else if (name == "evaluate") {
        cmd_evaluate(ctx, m);
    } else if (name == "visualize") {
        cmd_visualize(ctx, m);
    } else {
        throw ValidationError("unknown command " + name);
    }
}

int exit_code_for(const std::exception& e) {
    if (const auto* err = dynamic_cast<const Error*>(&e)) {
        switch (err->kind()) {
            case ErrorKind::Validation:
            case ErrorKind::Format: return 2;
            case ErrorKind::Numerical: return 3;
            case ErrorKind::Io: return 4;
        }
    }
    if (dynamic_cast<const fs::filesystem_error*>(&e)) return 4;
    return 3;
}

}  // namespace gpdssm
