#pragma once

/**
 * @file
 * @brief Monte Carlo baseline: states-only propagation and d-dimensional histograms,
 * and the runtime/accuracy comparison against the weighted-cloud pipeline.
 */

#include "lreach/liouville.hpp"
#include "lreach/scenario.hpp"

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace lreach {

/// Same integrator and seeds as propagate() without the density coordinate. Rejects empty clouds.
CloudTrajectory propagate_states_only(const WeightedCloud& cloud0, const VectorField& field,
                                      const PropagationSettings& settings);

/// Piecewise-constant density on a uniform d-dimensional grid (first dimension slowest).
struct HistogramDensity
{
  std::vector<Vector> edges;
  std::vector<Index> counts;
  Vector density;
  std::vector<bool> collapsed;   ///< dims with min = max, kept as a single bin
  Index total = 0;

  Index dim() const { return static_cast<Index>(edges.size()); }
  Index cells() const { return static_cast<Index>(counts.size()); }
  double cell_volume() const;
  double integral() const;

  /// 1D marginal density along `axis` on that axis' bins.
  Vector marginal(Index axis) const;
};

/// Bins between lo and hi per dimension (the transient extremes when taken over all times).
HistogramDensity histogram_density(const Matrix& states, Index bins_per_dim, const Vector& lo, const Vector& hi);

/// Bins between the sample extremes.
HistogramDensity histogram_density(const Matrix& states, Index bins_per_dim);

/// Per-dimension extremes over every output time of a trajectory.
void transient_extremes(const CloudTrajectory& traj, Vector& lo, Vector& hi);

struct ComparisonOptions
{
  std::vector<Index> bins = {10, 15};
  Index repetitions = 3;
  std::size_t vehicle = 0;
  int workers = -1;
  /// Exact density at time t, when known; enables the accuracy columns.
  std::function<std::optional<GaussianSpec>(double)> reference;
};

struct ResolutionReport
{
  Index bins = 0;
  double mc_seconds = 0.0;          ///< median propagation + median histogram time
  double histogram_seconds = 0.0;   ///< median of the histogram stage alone
  std::vector<double> histogram_runs;
  std::vector<double> sup_error;    ///< per state, sup |MC marginal - exact cell average| / exact peak
  std::vector<double> l1_error;     ///< per state, integral |MC marginal - exact|
};

struct ComparisonReport
{
  std::string scenario;
  std::string vehicle;
  Index samples = 0;
  Index repetitions = 0;
  double liouville_seconds = 0.0;     ///< median
  double mc_propagation_seconds = 0.0;   ///< median
  std::vector<double> liouville_runs, mc_propagation_runs;
  std::vector<ResolutionReport> resolutions;
  bool bitwise_equal_states = false;
  std::optional<double> liouville_pointwise_error;   ///< max relative error of rho^i at the final time
};

/**
 * @brief Times both pipelines on identical seeds (I/O excluded) and compares final-time accuracy.
 *
 * The Monte Carlo time of a resolution is the median states-only propagation
 * time plus the median time to build that resolution's histograms at every
 * output time; both stages are measured over `repetitions` runs.
 */
ComparisonReport compare(const Scenario& scenario, const ComparisonOptions& options = {});

/// The exact pushforward for an affine vehicle with a constant-input open-loop policy, else empty.
std::function<std::optional<GaussianSpec>(double)> affine_reference(const VehicleSpec& vehicle, double t0);

std::string report_json(const ComparisonReport& report);
void write_timing_csv(const ComparisonReport& report, std::ostream& out);

}  // namespace lreach
