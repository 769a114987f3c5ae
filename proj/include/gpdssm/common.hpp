#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

namespace gpdssm {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Points = Eigen::MatrixX3d;  // one point per row

/// Failure categories. The CLI maps them onto process exit codes.
enum class ErrorKind { Validation, Numerical, Io, Format };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct ValidationError : Error {
    explicit ValidationError(const std::string& w) : Error(ErrorKind::Validation, w) {}
};
struct NumericalError : Error {
    explicit NumericalError(const std::string& w) : Error(ErrorKind::Numerical, w) {}
};
struct IoError : Error {
    explicit IoError(const std::string& w) : Error(ErrorKind::Io, w) {}
};
struct FormatError : Error {
    FormatError(const std::string& w, long line) : Error(ErrorKind::Format, w), line_(line) {}
    long line() const noexcept { return line_; }

private:
    long line_;
};

/// Number of worker threads used by parallel_for. 0 selects hardware concurrency.
void set_thread_count(int n);
int thread_count();

/// Runs body(i) for i in [0, n). Each index is visited exactly once; callers
/// write into per-index slots and reduce in index order so results do not
/// depend on the thread count.
void parallel_for(long n, const std::function<void(long)>& body);

/// Independent generator for (seed, stream). Used for bootstrap replicates,
/// permutations and per-shape Monte Carlo draws.
std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream);

/// Axis-aligned bounding-box diagonal length.
double bbox_diagonal(const Points& p);

}  // namespace gpdssm
