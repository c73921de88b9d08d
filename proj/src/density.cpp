#include "lreach/density.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

namespace lreach {

namespace {

constexpr double kPi = 3.14159265358979323846;

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

void check_dims(const std::vector<Index>& dims, Index d)
{
  if (dims.empty() || dims.size() > 2) throw ValidationError("marginal: one or two coordinates required");
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] < 0 || dims[i] >= d) {
      throw ValidationError("marginal: coordinate " + std::to_string(dims[i]) + " out of range for dimension " +
                            std::to_string(d));
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (dims[i] == dims[j]) throw ValidationError("marginal: coordinates must be distinct");
    }
  }
}

Vector linspace_edges(double lo, double hi, Index bins)
{
  Vector e(bins + 1);
  for (Index k = 0; k <= bins; ++k) e(k) = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(bins);
  e(bins) = hi;
  return e;
}

// Bin of v among uniform edges, or -1 outside. The upper edge belongs to the last bin.
Index bin_of(double v, const Vector& edges)
{
  const Index bins = edges.size() - 1;
  const double lo = edges(0), hi = edges(bins);
  if (!(v >= lo && v <= hi)) return -1;
  const auto k = static_cast<Index>(std::floor((v - lo) / (hi - lo) * static_cast<double>(bins)));
  return std::clamp<Index>(k, 0, bins - 1);
}

std::vector<Index> default_bins(std::size_t rank) { return rank == 1 ? std::vector<Index>{50} : std::vector<Index>{60, 60}; }

double cross(const Eigen::Vector2d& o, const Eigen::Vector2d& a, const Eigen::Vector2d& b)
{
  return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
}

Matrix box_polygon(const Vector& lo, const Vector& hi)
{
  Matrix v(4, 2);
  v << lo(0), lo(1), hi(0), lo(1), hi(0), hi(1), lo(0), hi(1);
  return v;
}

// Sutherland-Hodgman clip of a convex polygon by a convex CCW polygon.
Matrix clip_polygon(const Matrix& subject, const Matrix& clip)
{
  std::vector<Eigen::Vector2d> out;
  for (Index i = 0; i < subject.rows(); ++i) out.emplace_back(subject(i, 0), subject(i, 1));
  const Index m = clip.rows();
  for (Index e = 0; e < m && !out.empty(); ++e) {
    const Eigen::Vector2d a(clip(e, 0), clip(e, 1));
    const Eigen::Vector2d b(clip((e + 1) % m, 0), clip((e + 1) % m, 1));
    std::vector<Eigen::Vector2d> input;
    input.swap(out);
    for (std::size_t k = 0; k < input.size(); ++k) {
      const Eigen::Vector2d& p = input[k];
      const Eigen::Vector2d& q = input[(k + 1) % input.size()];
      const double sp = cross(a, b, p), sq = cross(a, b, q);
      if (sp >= 0.0) out.push_back(p);
      if ((sp >= 0.0) != (sq >= 0.0)) {
        const double w = sp / (sp - sq);
        out.push_back(p + w * (q - p));
      }
    }
  }
  Matrix v(static_cast<Index>(out.size()), 2);
  for (std::size_t k = 0; k < out.size(); ++k) v.row(static_cast<Index>(k)) = out[k].transpose();
  return v;
}

double polygon_area(const Matrix& v)
{
  double a = 0.0;
  for (Index i = 0; i < v.rows(); ++i) {
    const Index j = (i + 1) % v.rows();
    a += v(i, 0) * v(j, 1) - v(j, 0) * v(i, 1);
  }
  return 0.5 * a;
}

}  // namespace

Index DensityGrid::cells() const
{
  Index n = 1;
  for (Index a = 0; a < rank(); ++a) n *= bins(a);
  return n;
}

double DensityGrid::cell_volume(Index cell) const
{
  double vol = 1.0;
  Index rest = cell;
  for (Index a = rank() - 1; a >= 0; --a) {
    const Index k = rest % bins(a);
    rest /= bins(a);
    const Vector& e = edges[static_cast<std::size_t>(a)];
    vol *= e(k + 1) - e(k);
  }
  return vol;
}

Vector DensityGrid::center(Index cell) const
{
  Vector c(rank());
  Index rest = cell;
  for (Index a = rank() - 1; a >= 0; --a) {
    const Index k = rest % bins(a);
    rest /= bins(a);
    const Vector& e = edges[static_cast<std::size_t>(a)];
    c(a) = 0.5 * (e(k) + e(k + 1));
  }
  return c;
}

double DensityGrid::integral() const
{
  double s = 0.0;
  for (Index c = 0; c < cells(); ++c) s += values(c) * cell_volume(c);
  return s;
}

DensityGrid marginal(const Matrix& states, const std::vector<Index>& dims, const MarginalOptions& options)
{
  const Index n = states.rows();
  if (n < 1) throw ValidationError("marginal: empty cloud");
  check_dims(dims, states.cols());
  const std::size_t rank = dims.size();
  const std::vector<Index> bins = options.bins.empty() ? default_bins(rank) : options.bins;
  if (bins.size() != rank) throw ValidationError("marginal: one bin count per coordinate required");
  if (!options.range.empty() && options.range.size() != rank) throw ValidationError("marginal: one range per coordinate required");
  for (Index b : bins) {
    if (b < 1) throw ValidationError("marginal: bin counts must be positive");
  }

  DensityGrid grid;
  grid.dims = dims;
  std::vector<double> bandwidth(rank, 0.0);
  for (std::size_t a = 0; a < rank; ++a) {
    const auto col = states.col(dims[a]);
    const double lo = col.minCoeff(), hi = col.maxCoeff();
    if (!(hi > lo)) {
      throw ValidationError("marginal: coordinate " + std::to_string(dims[a]) + " has fewer than 2 distinct values");
    }
    const double mean = col.mean();
    const double sd = std::sqrt((col.array() - mean).square().sum() / static_cast<double>(std::max<Index>(n - 1, 1)));
    bandwidth[a] = sd * std::pow(static_cast<double>(n), -1.0 / (static_cast<double>(rank) + 4.0));
    double rlo = lo, rhi = hi;
    if (!options.range.empty()) {
      rlo = options.range[a].first;
      rhi = options.range[a].second;
      if (!(rhi > rlo)) throw ValidationError("marginal: empty range");
    } else if (options.mode == MarginalMode::kernel) {
      rlo -= 3.0 * bandwidth[a];
      rhi += 3.0 * bandwidth[a];
    }
    grid.edges.push_back(linspace_edges(rlo, rhi, bins[a]));
  }

  grid.values = Vector::Zero(grid.cells());
  if (options.mode == MarginalMode::histogram) {
    const double mass = 1.0 / static_cast<double>(n);
    for (Index i = 0; i < n; ++i) {
      Index cell = 0;
      bool inside = true;
      for (std::size_t a = 0; a < rank && inside; ++a) {
        const Index k = bin_of(states(i, dims[a]), grid.edges[a]);
        if (k < 0) inside = false;
        cell = cell * bins[a] + k;
      }
      if (inside) grid.values(cell) += mass;
    }
    for (Index c = 0; c < grid.cells(); ++c) grid.values(c) /= grid.cell_volume(c);
    return grid;
  }

  // Kernel estimate: separable, so a product of per-axis kernel matrices.
  std::vector<Matrix> kernels;
  for (std::size_t a = 0; a < rank; ++a) {
    const double h = bandwidth[a];
    const Vector& e = grid.edges[a];
    Matrix k(bins[a], n);
    for (Index b = 0; b < bins[a]; ++b) {
      const double c = 0.5 * (e(b) + e(b + 1));
      for (Index i = 0; i < n; ++i) {
        const double z = (c - states(i, dims[a])) / h;
        k(b, i) = std::exp(-0.5 * z * z) / (std::sqrt(2.0 * kPi) * h);
      }
    }
    kernels.push_back(std::move(k));
  }
  if (rank == 1) {
    grid.values = kernels[0].rowwise().sum() / static_cast<double>(n);
  } else {
    const Matrix v = kernels[0] * kernels[1].transpose() / static_cast<double>(n);
    for (Index r = 0; r < bins[0]; ++r) {
      for (Index c = 0; c < bins[1]; ++c) grid.values(r * bins[1] + c) = v(r, c);
    }
  }
  const double total = grid.integral();
  if (!(total > 0.0)) throw NumericalError("marginal: kernel estimate vanished on the grid");
  grid.values /= total;
  return grid;
}

DensityGrid marginal(const WeightedCloud& cloud, const std::vector<Index>& dims, const MarginalOptions& options)
{
  return marginal(cloud.states, dims, options);
}

Vector gaussian_cell_averages(const GaussianSpec& spec, const DensityGrid& grid)
{
  if (spec.dim() != grid.rank()) throw ValidationError("cell averages: spec and grid ranks differ");
  Vector out(grid.cells());
  if (grid.rank() == 1) {
    const double mu = spec.mean()(0), sd = std::sqrt(spec.covariance()(0, 0));
    const Vector& e = grid.edges[0];
    for (Index k = 0; k < grid.bins(0); ++k) {
      out(k) = (normal_cdf((e(k + 1) - mu) / sd) - normal_cdf((e(k) - mu) / sd)) / (e(k + 1) - e(k));
    }
    return out;
  }
  // Outer Gauss-Legendre over x, inner conditional normal CDF over y.
  static const double nodes[8] = {-0.9602898564975363, -0.7966664774136267, -0.5255324099163290, -0.1834346424956498,
                                  0.1834346424956498,  0.5255324099163290,  0.7966664774136267,  0.9602898564975363};
  static const double weights[8] = {0.1012285362903763, 0.2223810344533745, 0.3137066458778873, 0.3626837833783620,
                                    0.3626837833783620, 0.3137066458778873, 0.2223810344533745, 0.1012285362903763};
  const Vector& mu = spec.mean();
  const Matrix& cov = spec.covariance();
  const double sx = std::sqrt(cov(0, 0));
  const double slope = cov(0, 1) / cov(0, 0);
  const double sc = std::sqrt(cov(1, 1) - cov(0, 1) * cov(0, 1) / cov(0, 0));
  const Vector& ex = grid.edges[0];
  const Vector& ey = grid.edges[1];
  for (Index i = 0; i < grid.bins(0); ++i) {
    const double a = ex(i), b = ex(i + 1);
    for (Index j = 0; j < grid.bins(1); ++j) {
      const double c = ey(j), d = ey(j + 1);
      // composite rule, panels no wider than sx / 2
      const auto panels = static_cast<int>(std::max(1.0, std::ceil(2.0 * (b - a) / sx)));
      const double w = (b - a) / panels;
      double mass = 0.0;
      for (int k = 0; k < panels; ++k) {
        const double lo = a + k * w;
        for (int q = 0; q < 8; ++q) {
          const double x = lo + 0.5 * w * (1.0 + nodes[q]);
          const double zx = (x - mu(0)) / sx;
          const double fx = std::exp(-0.5 * zx * zx) / (std::sqrt(2.0 * kPi) * sx);
          const double m = mu(1) + slope * (x - mu(0));
          mass += 0.5 * w * weights[q] * fx * (normal_cdf((d - m) / sc) - normal_cdf((c - m) / sc));
        }
      }
      out(i * grid.bins(1) + j) = mass / ((b - a) * (d - c));
    }
  }
  return out;
}

double pointwise_marginal_check(const WeightedCloud& cloud, const std::vector<Index>& dims, const GaussianSpec& spec,
                                const PointwiseCheckOptions& options)
{
  check_dims(dims, cloud.dim());
  if (spec.dim() != cloud.dim()) throw ValidationError("pointwise check: spec and cloud dimensions differ");
  const GaussianSpec marg = spec.marginal(dims);
  MarginalOptions mo;
  for (std::size_t a = 0; a < dims.size(); ++a) {
    const double mu = marg.mean()(static_cast<Index>(a));
    const double sd = std::sqrt(marg.covariance()(static_cast<Index>(a), static_cast<Index>(a)));
    mo.range.emplace_back(mu - options.sigmas * sd, mu + options.sigmas * sd);
    mo.bins.push_back(options.bins);
  }
  const DensityGrid hist = marginal(cloud, dims, mo);
  const Vector exact = gaussian_cell_averages(marg, hist);
  const double peak = exact.maxCoeff();
  const double n = static_cast<double>(cloud.size());
  double worst = 0.0;
  for (Index c = 0; c < hist.cells(); ++c) {
    const double count = hist.values(c) * hist.cell_volume(c) * n;
    if (count + 0.5 < static_cast<double>(options.min_count)) continue;
    worst = std::max(worst, std::abs(hist.values(c) - exact(c)) / peak);
  }
  return worst;
}

// ---------------------------------------------------------------------------

bool SupportRegion::contains(const Eigen::Ref<const Vector>& p) const
{
  if (empty) return false;
  for (Index a = 0; a < lo.size(); ++a) {
    if (p(a) < lo(a) || p(a) > hi(a)) return false;
  }
  if (kind == SupportKind::axis_box || vertices.rows() < 3) return true;
  const Eigen::Vector2d q(p(0), p(1));
  const double scale = std::max({1.0, (hi - lo).cwiseAbs().maxCoeff()});
  for (Index k = 0; k < vertices.rows(); ++k) {
    const Index j = (k + 1) % vertices.rows();
    const Eigen::Vector2d a(vertices(k, 0), vertices(k, 1)), b(vertices(j, 0), vertices(j, 1));
    if (cross(a, b, q) < -1e-12 * scale * scale) return false;
  }
  return true;
}

Matrix convex_hull(const Matrix& points)
{
  if (points.cols() != 2) throw ValidationError("convex hull: points must be 2D");
  std::vector<Eigen::Vector2d> p;
  for (Index i = 0; i < points.rows(); ++i) p.emplace_back(points(i, 0), points(i, 1));
  std::sort(p.begin(), p.end(), [](const auto& a, const auto& b) { return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y()); });
  p.erase(std::unique(p.begin(), p.end()), p.end());
  if (p.size() < 3) {
    Matrix v(static_cast<Index>(p.size()), 2);
    for (std::size_t k = 0; k < p.size(); ++k) v.row(static_cast<Index>(k)) = p[k].transpose();
    return v;
  }
  std::vector<Eigen::Vector2d> hull(2 * p.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p[i]) <= 0.0) --k;
    hull[k++] = p[i];
  }
  for (std::size_t i = p.size() - 1, t = k + 1; i > 0; --i) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], p[i - 1]) <= 0.0) --k;
    hull[k++] = p[i - 1];
  }
  hull.resize(k - 1);
  Matrix v(static_cast<Index>(hull.size()), 2);
  for (std::size_t i = 0; i < hull.size(); ++i) v.row(static_cast<Index>(i)) = hull[i].transpose();
  return v;
}

SupportRegion support_estimate(const Matrix& points, const Vector& masses, SupportKind kind, double trim_quantile)
{
  if (points.rows() < 1) throw ValidationError("support: empty point set");
  if (masses.size() != points.rows()) throw ValidationError("support: mass count differs from point count");
  if (!(trim_quantile >= 0.0 && trim_quantile < 0.5)) throw ValidationError("support: trim quantile must lie in [0, 0.5)");
  if (kind == SupportKind::hull && points.cols() != 2) throw ValidationError("support: hulls need exactly 2 coordinates");

  std::vector<Index> keep;
  for (Index i = 0; i < points.rows(); ++i) {
    if (masses(i) > 0.0) keep.push_back(i);
  }
  if (keep.empty()) throw ValidationError("support: all masses are zero");
  const Index k = points.cols();
  const Index n = static_cast<Index>(keep.size());
  const auto cut = static_cast<Index>(std::floor(trim_quantile * static_cast<double>(n)));

  SupportRegion region;
  region.kind = kind;
  region.lo.resize(k);
  region.hi.resize(k);
  for (Index a = 0; a < k; ++a) {
    std::vector<double> v;
    v.reserve(keep.size());
    for (Index i : keep) v.push_back(points(i, a));
    std::sort(v.begin(), v.end());
    region.lo(a) = v[static_cast<std::size_t>(cut)];
    region.hi(a) = v[static_cast<std::size_t>(n - 1 - cut)];
    if (!(region.hi(a) > region.lo(a))) region.degenerate = true;
  }
  if (kind == SupportKind::hull) {
    std::vector<Index> inside;
    for (Index i : keep) {
      const Vector p = points.row(i).transpose();
      if ((p.array() >= region.lo.array()).all() && (p.array() <= region.hi.array()).all()) inside.push_back(i);
    }
    Matrix sel(static_cast<Index>(inside.size()), 2);
    for (std::size_t r = 0; r < inside.size(); ++r) sel.row(static_cast<Index>(r)) = points.row(inside[r]);
    region.vertices = convex_hull(sel);
    if (region.vertices.rows() < 3) region.degenerate = true;
  }
  return region;
}

SupportRegion support_estimate(const WeightedCloud& cloud, const std::vector<Index>& dims, SupportKind kind,
                               double trim_quantile)
{
  check_dims(dims, cloud.dim());
  const PointSet ps = project(cloud, dims);
  SupportRegion r = support_estimate(ps.points, ps.masses, kind, trim_quantile);
  r.dims = dims;
  return r;
}

SupportRegion intersect(const SupportRegion& a, const SupportRegion& b)
{
  if (a.lo.size() != b.lo.size()) throw ValidationError("support: intersecting regions of different dimension");
  SupportRegion out;
  out.dims = a.dims;
  out.kind = (a.kind == SupportKind::hull || b.kind == SupportKind::hull) ? SupportKind::hull : SupportKind::axis_box;
  out.lo = a.lo.cwiseMax(b.lo);
  out.hi = a.hi.cwiseMin(b.hi);
  if (a.empty || b.empty || (out.lo.array() > out.hi.array()).any()) {
    out.empty = true;
    return out;
  }
  if (out.kind == SupportKind::axis_box) return out;

  auto polygon = [](const SupportRegion& r) {
    return (r.kind == SupportKind::hull && r.vertices.rows() >= 3) ? r.vertices : box_polygon(r.lo, r.hi);
  };
  out.vertices = clip_polygon(polygon(a), polygon(b));
  if (out.vertices.rows() < 3 || std::abs(polygon_area(out.vertices)) == 0.0) {
    // Touching along an edge or a point: keep the bounding box so boundary points still count.
    out.degenerate = true;
    if (out.vertices.rows() == 0) out.empty = true;
    return out;
  }
  out.lo = out.vertices.colwise().minCoeff().transpose();
  out.hi = out.vertices.colwise().maxCoeff().transpose();
  return out;
}

PointSet project(const WeightedCloud& cloud, const std::vector<Index>& dims)
{
  check_dims(dims, cloud.dim());
  PointSet ps;
  ps.points.resize(cloud.size(), static_cast<Index>(dims.size()));
  for (std::size_t a = 0; a < dims.size(); ++a) ps.points.col(static_cast<Index>(a)) = cloud.states.col(dims[a]);
  ps.masses = Vector::Constant(cloud.size(), 1.0 / static_cast<double>(cloud.size()));
  return ps;
}

double collision_probability(const PointSet& a, const PointSet& b, const CollisionOptions& options)
{
  if (a.points.cols() != 2 || b.points.cols() != 2) throw ValidationError("collision: point sets must be 2D");
  if (a.masses.size() != a.points.rows() || b.masses.size() != b.points.rows()) {
    throw ValidationError("collision: mass count differs from point count");
  }
  if (options.mode == CollisionMode::support_product) {
    const SupportRegion sa = support_estimate(a.points, a.masses, options.support, options.trim_quantile);
    const SupportRegion sb = support_estimate(b.points, b.masses, options.support, options.trim_quantile);
    const SupportRegion o = intersect(sa, sb);
    if (o.empty) return 0.0;
    auto occupancy = [&o](const PointSet& s) {
      // inside / (inside + outside), so full coverage is exactly 1
      double in = 0.0, out = 0.0;
      for (Index i = 0; i < s.points.rows(); ++i) {
        if (s.masses(i) <= 0.0) continue;
        (o.contains(s.points.row(i).transpose()) ? in : out) += s.masses(i);
      }
      return in > 0.0 ? std::clamp(in / (in + out), 0.0, 1.0) : 0.0;
    };
    return occupancy(a) * occupancy(b);
  }

  if (!(options.len_s >= 0.0) || !(options.len_ey >= 0.0)) throw ValidationError("collision: footprint lengths must be nonnegative");
  // Sort b along the first coordinate and scan the window |ds| <= len_s.
  std::vector<Index> order(static_cast<std::size_t>(b.points.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(), [&](Index i, Index j) { return b.points(i, 0) < b.points(j, 0); });
  std::vector<double> keys;
  keys.reserve(order.size());
  for (Index i : order) keys.push_back(b.points(i, 0));
  double p = 0.0;
  for (Index i = 0; i < a.points.rows(); ++i) {
    if (a.masses(i) == 0.0) continue;
    const double s = a.points(i, 0), ey = a.points(i, 1);
    auto it = std::lower_bound(keys.begin(), keys.end(), s - options.len_s);
    double inner = 0.0;
    for (; it != keys.end() && *it <= s + options.len_s; ++it) {
      const Index j = order[static_cast<std::size_t>(it - keys.begin())];
      if (std::abs(s - b.points(j, 0)) <= options.len_s && std::abs(ey - b.points(j, 1)) <= options.len_ey) inner += b.masses(j);
    }
    p += a.masses(i) * inner;
  }
  return std::clamp(p, 0.0, 1.0);
}

double collision_probability(const WeightedCloud& a, const WeightedCloud& b, const std::vector<Index>& dims,
                             const CollisionOptions& options)
{
  if (a.time != b.time) throw ValidationError("collision: clouds are at different times");
  if (dims.size() != 2) throw ValidationError("collision: two coordinates required");
  return collision_probability(project(a, dims), project(b, dims), options);
}

std::vector<CollisionSample> collision_curve(const CloudTrajectory& a, const CloudTrajectory& b,
                                             const std::vector<Index>& dims, const CollisionOptions& options)
{
  if (a.clouds.size() != b.clouds.size()) throw ValidationError("collision curve: output grids differ");
  std::vector<CollisionSample> curve;
  for (std::size_t k = 0; k < a.clouds.size(); ++k) {
    if (a.clouds[k].time != b.clouds[k].time) throw ValidationError("collision curve: output grids differ");
    curve.push_back({a.clouds[k].time, collision_probability(a.clouds[k], b.clouds[k], dims, options)});
  }
  return curve;
}

void write_density_csv(const DensityGrid& grid, std::ostream& out)
{
  out << std::setprecision(17);
  out << "# dims:";
  for (std::size_t a = 0; a < grid.dims.size(); ++a) out << (a ? "," : " ") << grid.dims[a];
  out << '\n';
  for (std::size_t a = 0; a < grid.edges.size(); ++a) {
    out << "# edges " << grid.dims[a] << ':';
    for (Index k = 0; k < grid.edges[a].size(); ++k) out << (k ? "," : " ") << grid.edges[a](k);
    out << '\n';
  }
  out << (grid.rank() == 1 ? "# c1,value\n" : "# c1,c2,value\n");
  for (Index c = 0; c < grid.cells(); ++c) {
    if (grid.rank() == 2 && c > 0 && c % grid.bins(1) == 0) out << '\n';
    const Vector ctr = grid.center(c);
    for (Index a = 0; a < ctr.size(); ++a) out << ctr(a) << ',';
    out << grid.values(c) << '\n';
  }
}

void write_density_csv(const DensityGrid& grid, const std::string& path)
{
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  write_density_csv(grid, out);
}

}  // namespace lreach
