#pragma once

/**
 * @file
 * @brief Shared domain types, reproducible sampling and small dense primitives.
 */

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace lreach {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Bad input: malformed documents, violated preconditions, invalid parameters.
class ValidationError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

/// A computation that could not complete (singularity, non-convergence, infeasibility).
class NumericalError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

class NotPositiveDefinite : public ValidationError
{
public:
  NotPositiveDefinite(const std::string& what, Index pivot) : ValidationError(what), pivot_(pivot) {}
  Index pivot() const { return pivot_; }

private:
  Index pivot_;
};

/**
 * @brief Lower Cholesky factor L with L L^T = A.
 *
 * Only the lower triangle of A is read. Throws NotPositiveDefinite naming the
 * first pivot that is not strictly positive.
 */
Matrix cholesky(const Matrix& a);

/**
 * @brief Multivariate normal N(mean, covariance), validated at construction.
 *
 * The covariance must be symmetric to 1e-12 relative and every eigenvalue must
 * exceed 1e-12 times the largest one.
 */
class GaussianSpec
{
public:
  GaussianSpec(Vector mean, Matrix covariance);

  static GaussianSpec diagonal(const Vector& mean, const Vector& variances);

  Index dim() const { return mean_.size(); }
  const Vector& mean() const { return mean_; }
  const Matrix& covariance() const { return covariance_; }
  const Matrix& cholesky_factor() const { return chol_; }

  double log_pdf(const Eigen::Ref<const Vector>& x) const;
  double pdf(const Eigen::Ref<const Vector>& x) const;

  /// Marginal over the listed coordinates.
  GaussianSpec marginal(const std::vector<Index>& dims) const;

private:
  Vector mean_;
  Matrix covariance_;
  Matrix chol_;
  double log_norm_ = 0.0;
};

double gaussian_pdf(const GaussianSpec& spec, const Eigen::Ref<const Vector>& x);

/// Samples with co-evolving density values {x^i(t), rho^i(t)}; one row per sample.
struct WeightedCloud
{
  double time = 0.0;
  Matrix states;
  Vector weights;

  Index size() const { return states.rows(); }
  Index dim() const { return states.cols(); }

  /// Throws ValidationError on shape mismatch, negative or non-finite entries.
  void validate() const;
};

/**
 * @brief Per-sample random stream.
 *
 * Sample i of a run seeded with s draws from mt19937_64 seeded by
 * splitmix64(s + golden * (i + 1)), so the stream depends only on (s, i) and
 * never on the order in which samples are processed. Normals come from the
 * Box-Muller transform with both outputs used.
 */
class SampleStream
{
public:
  SampleStream(std::uint64_t seed, std::uint64_t index);

  /// Uniform on the open interval (0, 1).
  double uniform();
  double normal();

private:
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

std::uint64_t splitmix64(std::uint64_t x);

/// n i.i.d. draws from spec, weights set to the exact density at each draw.
WeightedCloud sample_gaussian(const GaussianSpec& spec, Index n, std::uint64_t seed);

/// Runs body(i) for i in [0, n) on up to `workers` threads (0 = hardware
/// concurrency). Partitioning never changes results as long as body writes
/// only to slot i. The exception of the lowest failing index is rethrown.
void parallel_for(Index n, int workers, const std::function<void(Index)>& body);

int resolve_workers(int workers);

}  // namespace lreach
