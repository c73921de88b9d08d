#include "doctest.h"
#include "lreach/density.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

using namespace lreach;

static WeightedCloud uniform_cloud(Index n, double x0, double x1, double y0, double y1, std::uint64_t seed)
{
  WeightedCloud c;
  c.states.resize(n, 2);
  for (Index i = 0; i < n; ++i) {
    SampleStream rng(seed, static_cast<std::uint64_t>(i));
    c.states(i, 0) = x0 + (x1 - x0) * rng.uniform();
    c.states(i, 1) = y0 + (y1 - y0) * rng.uniform();
  }
  c.weights = Vector::Ones(n);
  return c;
}

TEST_CASE("histogram and kernel marginals")
{
  const WeightedCloud g = sample_gaussian(GaussianSpec(Vector::Zero(2), Matrix::Identity(2, 2)), 5000, 1);
  for (MarginalMode mode : {MarginalMode::histogram, MarginalMode::kernel}) {
    MarginalOptions o;
    o.mode = mode;
    const DensityGrid d = marginal(g, {0}, o);
    CHECK(d.values.maxCoeff() == doctest::Approx(0.399).epsilon(0.125));
    CHECK(d.integral() >= 0.98);
    CHECK(d.integral() <= 1.02);
    const DensityGrid d2 = marginal(g, {0, 1}, o);
    CHECK(d2.cells() == 3600);
    CHECK(d2.integral() == doctest::Approx(1.0).epsilon(0.02));
  }

  const WeightedCloud u = uniform_cloud(4000, 0, 1, 0, 1, 2);
  MarginalOptions o;
  o.bins = {4, 4};
  o.range = {{0.0, 1.0}, {0.0, 1.0}};
  const DensityGrid flat = marginal(u, {0, 1}, o);
  CHECK(flat.values.minCoeff() > 0.8);
  CHECK(flat.values.maxCoeff() < 1.2);
  CHECK(flat.integral() == doctest::Approx(1.0));
}

TEST_CASE("cell averages of a gaussian")
{
  const GaussianSpec g(Vector::Zero(1), Matrix::Identity(1, 1));
  DensityGrid grid;
  grid.dims = {0};
  grid.edges = {Eigen::Vector3d(-1, 0, 1)};
  const Vector avg = gaussian_cell_averages(g, grid);
  CHECK(avg(0) == doctest::Approx(0.5 * std::erf(1.0 / std::sqrt(2.0))));

  Matrix cov(2, 2);
  cov << 1, 0.5, 0.5, 2;
  const GaussianSpec g2(Eigen::Vector2d(0.5, -0.5), cov);
  DensityGrid wide;
  wide.dims = {0, 1};
  wide.edges = {Eigen::Vector3d(-12, 0.5, 12), Eigen::Vector3d(-16, -0.5, 16)};
  wide.values = Vector::Zero(4);
  const Vector a2 = gaussian_cell_averages(g2, wide);
  double total = 0.0;
  for (Index c = 0; c < 4; ++c) total += a2(c) * wide.cell_volume(c);
  CHECK(total == doctest::Approx(1.0).epsilon(1e-8));
  // orthant probability of a bivariate normal cut through its mean
  const double rho = 0.5 / std::sqrt(2.0);
  CHECK(a2(0) * wide.cell_volume(0) == doctest::Approx(0.25 + std::asin(rho) / (2 * std::numbers::pi)).epsilon(1e-6));
}

TEST_CASE("pointwise marginal check")
{
  const GaussianSpec ego = GaussianSpec::diagonal(Eigen::Vector4d(0, 0, 20, 0), Eigen::Vector4d(1e-2, 1e-2, 1e-1, 1e-3));
  const WeightedCloud c = sample_gaussian(ego, 1000, 1);
  for (Index d = 0; d < 4; ++d) CHECK(pointwise_marginal_check(c, {d}, ego) <= 0.15);
  CHECK(pointwise_marginal_check(c, {0, 1}, ego) <= 0.3);

  // Error band shrinks roughly like 1/sqrt(N), averaged over seeds.
  double small = 0.0, large = 0.0;
  for (std::uint64_t seed = 10; seed < 20; ++seed) {
    small += pointwise_marginal_check(sample_gaussian(ego, 1000, seed), {2}, ego);
    large += pointwise_marginal_check(sample_gaussian(ego, 4000, seed), {2}, ego);
  }
  CHECK(large / small > 0.3);
  CHECK(large / small < 0.75);
}

TEST_CASE("support estimates")
{
  Matrix corners(4, 2);
  corners << 0, 0, 1, 0, 1, 1, 0, 1;
  const SupportRegion box = support_estimate(corners, Vector::Ones(4), SupportKind::axis_box);
  CHECK(box.lo == Eigen::Vector2d(0, 0));
  CHECK(box.hi == Eigen::Vector2d(1, 1));

  Matrix many(100, 2);
  for (Index i = 0; i < 100; ++i) many.row(i) << 0.01 * i, 0.005 * i;
  many.row(57) << 50.0, 0.2;
  const SupportRegion trimmed = support_estimate(many, Vector::Ones(100), SupportKind::axis_box, 0.01);
  CHECK(trimmed.hi(0) < 1.0);

  Matrix pts(7, 2);
  pts << 0, 0, 1, 0, 1, 1, 0, 1, 0.5, 0.5, 0.2, 0.7, 0.5, 0.0;
  const SupportRegion hull = support_estimate(pts, Vector::Ones(7), SupportKind::hull);
  CHECK(hull.vertices.rows() == 4);
  CHECK(hull.contains(Eigen::Vector2d(0.5, 0.5)));
  CHECK(hull.contains(Eigen::Vector2d(1.0, 0.5)));
  CHECK_FALSE(hull.contains(Eigen::Vector2d(1.01, 0.5)));

  Matrix shifted = pts;
  shifted.col(0).array() += 0.5;
  const SupportRegion other = support_estimate(shifted, Vector::Ones(7), SupportKind::hull);
  const SupportRegion both = intersect(hull, other);
  CHECK_FALSE(both.empty);
  CHECK(both.contains(Eigen::Vector2d(0.75, 0.5)));
  CHECK_FALSE(both.contains(Eigen::Vector2d(0.25, 0.5)));
}

TEST_CASE("collision probability")
{
  CollisionOptions sp;
  const WeightedCloud a = uniform_cloud(2000, 0, 1, 0, 1, 3);
  const WeightedCloud b = uniform_cloud(2000, 0.5, 1.5, 0, 1, 4);
  const WeightedCloud far = uniform_cloud(2000, 5, 6, 0, 1, 5);
  CHECK(collision_probability(a, b, {0, 1}, sp) == doctest::Approx(0.25).epsilon(0.12));
  CHECK(collision_probability(a, a, {0, 1}, sp) == 1.0);
  CHECK(collision_probability(a, far, {0, 1}, sp) == 0.0);

  CollisionOptions fp;
  fp.mode = CollisionMode::footprint;
  fp.len_ey = 0.1;
  CHECK(collision_probability(a, far, {0, 1}, fp) == 0.0);
  PointSet p{Matrix::Zero(1, 2), Vector::Ones(1)};
  PointSet q{Matrix::Zero(1, 2), Vector::Ones(1)};
  q.points(0, 0) = 0.1;
  fp.len_s = 0.2;
  CHECK(collision_probability(p, q, fp) == 1.0);
  fp.len_s = 0.05;
  CHECK(collision_probability(p, q, fp) == 0.0);

  // footprint on independent uniforms: brute force double sum
  fp.len_s = 0.3;
  fp.len_ey = 0.2;
  const PointSet pa = project(uniform_cloud(300, 0, 1, 0, 1, 6), {0, 1});
  const PointSet pb = project(uniform_cloud(300, 0.5, 1.5, 0, 1, 7), {0, 1});
  double brute = 0.0;
  for (Index i = 0; i < pa.points.rows(); ++i) {
    for (Index j = 0; j < pb.points.rows(); ++j) {
      if (std::abs(pa.points(i, 0) - pb.points(j, 0)) <= 0.3 && std::abs(pa.points(i, 1) - pb.points(j, 1)) <= 0.2) {
        brute += pa.masses(i) * pb.masses(j);
      }
    }
  }
  CHECK(collision_probability(pa, pb, fp) == doctest::Approx(brute).epsilon(1e-12));
}

TEST_CASE("collision curves stay in the unit interval")
{
  CloudTrajectory ta, tb;
  for (int k = 0; k < 3; ++k) {
    WeightedCloud a = uniform_cloud(200, 0, 1, 0, 1, 10 + k);
    WeightedCloud b = uniform_cloud(200, 0.3 * k, 1 + 0.3 * k, 3, 4, 20 + k);
    a.time = b.time = k;
    ta.clouds.push_back(a);
    tb.clouds.push_back(b);
  }
  ta.flags.assign(200, 0);
  tb.flags.assign(200, 0);
  for (CollisionMode mode : {CollisionMode::support_product, CollisionMode::footprint}) {
    CollisionOptions o;
    o.mode = mode;
    o.len_s = o.len_ey = 0.5;
    for (const CollisionSample& c : collision_curve(ta, tb, {0, 1}, o)) CHECK(c.p == 0.0);
  }
  for (const CollisionSample& c : collision_curve(ta, ta, {0, 1}, CollisionOptions{})) {
    CHECK(c.p >= 0.0);
    CHECK(c.p <= 1.0);
  }
}

TEST_CASE("density csv")
{
  DensityGrid g;
  g.dims = {0};
  g.edges = {Eigen::Vector3d(0, 1, 2)};
  g.values = Eigen::Vector2d(0.25, 0.75);
  std::ostringstream os;
  write_density_csv(g, os);
  CHECK(os.str().find("0.5,0.25") != std::string::npos);
  CHECK(os.str().find("1.5,0.75") != std::string::npos);
}
