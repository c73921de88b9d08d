#pragma once

/**
 * @file
 * @brief Marginal densities on grids, support estimates and collision probabilities.
 *
 * Samples of a propagated cloud are i.i.d. draws of the transported density,
 * so each one carries probability mass 1/N. The stored rho^i are point values
 * of the density and are only used for diagnostics.
 */

#include "lreach/core.hpp"
#include "lreach/liouville.hpp"

#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace lreach {

/// Density over 1 or 2 coordinates; values are stored with the last dimension fastest.
struct DensityGrid
{
  std::vector<Index> dims;
  std::vector<Vector> edges;
  Vector values;

  Index rank() const { return static_cast<Index>(dims.size()); }
  Index bins(Index axis) const { return edges[static_cast<std::size_t>(axis)].size() - 1; }
  Index cells() const;
  double cell_volume(Index cell) const;
  Vector center(Index cell) const;
  /// sum of value * cell volume
  double integral() const;
};

enum class MarginalMode
{
  histogram,
  kernel,   ///< Gaussian product kernel, Scott's rule bandwidth
};

struct MarginalOptions
{
  MarginalMode mode = MarginalMode::histogram;
  std::vector<Index> bins;   ///< per dim; empty = 50 (1D) or 60 x 60 (2D)
  std::vector<std::pair<double, double>> range;   ///< per dim; empty = from the samples
};

DensityGrid marginal(const WeightedCloud& cloud, const std::vector<Index>& dims, const MarginalOptions& options = {});

/// Same estimators on a bare sample matrix (rows are samples).
DensityGrid marginal(const Matrix& states, const std::vector<Index>& dims, const MarginalOptions& options = {});

struct PointwiseCheckOptions
{
  Index bins = 10;
  double sigmas = 4.0;        ///< grid spans mean +- sigmas * sd per dim
  Index min_count = 10;
};

/**
 * @brief Histogram marginal of the cloud against the analytic marginal of spec.
 *
 * Both are compared as cell averages (the analytic one integrated exactly per
 * cell); the error is the largest |difference| divided by the analytic peak,
 * over cells holding at least min_count samples.
 */
double pointwise_marginal_check(const WeightedCloud& cloud, const std::vector<Index>& dims, const GaussianSpec& spec,
                                const PointwiseCheckOptions& options = {});

/// Exact average of the Gaussian marginal density over each cell of `grid`.
Vector gaussian_cell_averages(const GaussianSpec& marginal_spec, const DensityGrid& grid);

enum class SupportKind
{
  axis_box,
  hull,
};

struct SupportRegion
{
  std::vector<Index> dims;
  SupportKind kind = SupportKind::axis_box;
  Vector lo, hi;        ///< box bounds (also the hull's bounding box)
  Matrix vertices;      ///< hull vertices, counter-clockwise (k x 2)
  bool degenerate = false;
  bool empty = false;

  bool contains(const Eigen::Ref<const Vector>& p) const;
};

SupportRegion support_estimate(const WeightedCloud& cloud, const std::vector<Index>& dims, SupportKind kind,
                               double trim_quantile = 0.0);

/// Support of a weighted point set (k columns); points with zero mass are ignored.
SupportRegion support_estimate(const Matrix& points, const Vector& masses, SupportKind kind, double trim_quantile = 0.0);

SupportRegion intersect(const SupportRegion& a, const SupportRegion& b);

/// Convex hull by monotone chain, counter-clockwise, collinear points dropped.
Matrix convex_hull(const Matrix& points);

enum class CollisionMode
{
  support_product,
  footprint,
};

struct CollisionOptions
{
  CollisionMode mode = CollisionMode::support_product;
  SupportKind support = SupportKind::axis_box;
  double trim_quantile = 0.0;
  double len_s = 0.0;    ///< footprint half-extent along the first coordinate
  double len_ey = 0.0;   ///< footprint half-extent along the second coordinate
};

/// A discrete probability measure on the plane used by the collision estimators.
struct PointSet
{
  Matrix points;   ///< n x 2
  Vector masses;   ///< sums to 1
};

PointSet project(const WeightedCloud& cloud, const std::vector<Index>& dims);

double collision_probability(const PointSet& a, const PointSet& b, const CollisionOptions& options);

double collision_probability(const WeightedCloud& a, const WeightedCloud& b, const std::vector<Index>& dims,
                             const CollisionOptions& options);

struct CollisionSample
{
  double t;
  double p;
};

std::vector<CollisionSample> collision_curve(const CloudTrajectory& a, const CloudTrajectory& b,
                                             const std::vector<Index>& dims, const CollisionOptions& options);

/// `# dims` and `# edges` comment block, then `c1[,c2],value` rows (blank line between 2D scan lines).
void write_density_csv(const DensityGrid& grid, std::ostream& out);
void write_density_csv(const DensityGrid& grid, const std::string& path);

}  // namespace lreach
