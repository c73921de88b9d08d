#pragma once

/**
 * @file
 * @brief Entropic optimal transport: 2-Wasserstein distances and fixed-support barycenters.
 *
 * All scalings live in the log domain (dual potentials), so small
 * regularization under squared-Euclidean costs does not underflow.
 */

#include "lreach/core.hpp"
#include "lreach/density.hpp"
#include "lreach/liouville.hpp"

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace lreach {

struct DiscreteMeasure
{
  Matrix points;   ///< n x k support locations
  Vector masses;   ///< nonnegative, sums to 1
  /// Per-axis cell centers when the support is a tensor grid (last axis fastest); empty otherwise.
  std::vector<Vector> axes;

  Index size() const { return points.rows(); }
  Vector mean() const { return points.transpose() * masses; }
  void validate() const;
};

/// Cell centers and masses value * volume, renormalized to sum to one.
DiscreteMeasure grid_to_measure(const DensityGrid& grid);

struct TransportPlan
{
  Matrix plan;
  double cost = 0.0;        ///< <plan, C>
  double eps = 0.0;
  double violation = 0.0;   ///< max |row sum - mu| after the last sweep
  Index iterations = 0;
  bool converged = false;
  Vector f, g;              ///< dual potentials, reusable as a warm start
};

struct SinkhornOptions
{
  double eps = 1e-2;
  Index max_iter = 10000;
  double tol = 1e-6;
  const Vector* warm_f = nullptr;
  const Vector* warm_g = nullptr;
};

/// Squared-Euclidean cost. Non-convergence is reported in the plan, not thrown.
TransportPlan sinkhorn(const DiscreteMeasure& mu, const DiscreteMeasure& nu, const SinkhornOptions& options = {});

/// 1, 0.5, 0.25, ... down to 1e-3 (the last entry is exactly 1e-3).
std::vector<double> default_eps_schedule();

/// sqrt(<plan, C>) at the final eps of a warm-started schedule.
double wasserstein2(const DiscreteMeasure& mu, const DiscreteMeasure& nu,
                    const std::vector<double>& eps_schedule = default_eps_schedule());

/// Closed form between Gaussians (Bures metric plus mean shift).
double gaussian_w2_oracle(const GaussianSpec& a, const GaussianSpec& b);

struct BarycenterSpec
{
  std::vector<DiscreteMeasure> inputs;   ///< all on the same support
  Vector lambdas;
  double eps = 0.0;   ///< 0 selects 1e-2 * (support diameter)^2
  Index max_iter = 5000;
  double tol = 1e-5;   ///< total variation between successive iterates

  void validate() const;
};

struct BarycenterResult
{
  DiscreteMeasure measure;
  Index iterations = 0;
  double change = 0.0;   ///< TV distance of the last two iterates
  bool converged = false;
  double eps = 0.0;
};

/**
 * @brief Iterative Bregman projections on the common support.
 *
 * Tensor-grid supports use a separable Gibbs kernel; when exp(-C/eps) would
 * underflow the kernel is applied as a log-sum-exp instead.
 */
BarycenterResult barycenter(const BarycenterSpec& spec);

struct BarycentricOptions
{
  std::vector<Index> bins = {60, 60};
  double eps = 0.0;
  Index max_iter = 5000;
  double tol = 1e-5;
  int workers = 0;
};

/**
 * @brief Per output time: histogram marginals of every input on a common grid
 * (spanning all inputs at that time), then their barycenter with lambdas(t).
 */
std::vector<BarycenterResult> barycentric_trajectory(const std::vector<const CloudTrajectory*>& trajs,
                                                     const std::vector<Index>& dims,
                                                     const std::function<Vector(double)>& lambdas,
                                                     const BarycentricOptions& options = {});

/// CSV with one column per support coordinate (names given) and a final `mass` column.
void write_measure_csv(const DiscreteMeasure& measure, const std::vector<std::string>& names, std::ostream& out);
void write_measure_csv(const DiscreteMeasure& measure, const std::vector<std::string>& names, const std::string& path);

}  // namespace lreach
