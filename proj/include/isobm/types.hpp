#pragma once

#include <Eigen/Dense>

#include <array>
#include <cassert>
#include <stdexcept>
#include <string>

namespace isobm {

// Largest intrinsic or ambient dimension handled. Small fixed-capacity
// Eigen types keep the per-step simulation kernels off the heap.
inline constexpr int kMaxDim = 6;

using Vector = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;

/// Dense rank-3 array with fixed capacity, indexed (i, j, k).
///
/// Used for metric derivatives (d_k g_ij stored as (i, j, k)), Christoffel
/// symbols (Gamma^i_jk stored as (i, j, k)) and embedding Hessians
/// (d_i d_j u^a stored as (a, i, j)).
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(int d0, int d1, int d2) : d0_(d0), d1_(d1), d2_(d2) {
    assert(d0 <= kMaxDim && d1 <= kMaxDim && d2 <= kMaxDim);
    data_.fill(0.0);
  }

  [[nodiscard]] int dim0() const { return d0_; }
  [[nodiscard]] int dim1() const { return d1_; }
  [[nodiscard]] int dim2() const { return d2_; }

  double& operator()(int i, int j, int k) { return data_[index(i, j, k)]; }
  double operator()(int i, int j, int k) const { return data_[index(i, j, k)]; }

  /// Slice with fixed first index as a d1 x d2 matrix.
  [[nodiscard]] Matrix slice(int i) const {
    Matrix m(d1_, d2_);
    for (int j = 0; j < d1_; ++j)
      for (int k = 0; k < d2_; ++k) m(j, k) = (*this)(i, j, k);
    return m;
  }

  [[nodiscard]] double max_abs() const {
    double m = 0.0;
    for (int i = 0; i < d0_ * d1_ * d2_; ++i) m = std::max(m, std::abs(data_[i]));
    return m;
  }

 private:
  [[nodiscard]] int index(int i, int j, int k) const { return (i * kMaxDim + j) * kMaxDim + k; }

  int d0_ = 0;
  int d1_ = 0;
  int d2_ = 0;
  std::array<double, kMaxDim * kMaxDim * kMaxDim> data_{};
};

/// A point expressed in one chart of an atlas.
struct ChartPoint {
  int chart = 0;
  Vector x;
};

enum class ErrorKind {
  DegenerateMetric,
  Chart,
  Overlap,
  Unsupported,
  StepFailure,
  ImmersionFailure,
  EpsTooLarge,
  InsufficientSampling,
  MismatchedHorizon,
  InvalidArgument,
  Config,
  Io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DegenerateMetric: return "degenerate-metric";
    case ErrorKind::Chart: return "chart";
    case ErrorKind::Overlap: return "overlap";
    case ErrorKind::Unsupported: return "unsupported";
    case ErrorKind::StepFailure: return "step-failure";
    case ErrorKind::ImmersionFailure: return "immersion-failure";
    case ErrorKind::EpsTooLarge: return "eps-too-large";
    case ErrorKind::InsufficientSampling: return "insufficient-sampling";
    case ErrorKind::MismatchedHorizon: return "mismatched-horizon";
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::Config: return "config";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

/// Every failure carries the module and operation that raised it.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string module, std::string operation, const std::string& message)
      : std::runtime_error(module + "::" + operation + ": " + to_string(kind) + ": " + message),
        kind_(kind),
        module_(std::move(module)),
        operation_(std::move(operation)) {}

  [[nodiscard]] ErrorKind kind() const { return kind_; }
  [[nodiscard]] const std::string& module() const { return module_; }
  [[nodiscard]] const std::string& operation() const { return operation_; }

 private:
  ErrorKind kind_;
  std::string module_;
  std::string operation_;
};

}  // namespace isobm
