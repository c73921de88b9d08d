#include "doctest.h"
#include "lreach/transport.hpp"

#include <cmath>

using namespace lreach;

static DiscreteMeasure atoms(const std::vector<double>& x, const std::vector<double>& m)
{
  DiscreteMeasure d;
  d.points = Eigen::Map<const Vector>(x.data(), static_cast<Index>(x.size()));
  d.masses = Eigen::Map<const Vector>(m.data(), static_cast<Index>(m.size()));
  return d;
}

static DiscreteMeasure normal_on(const Vector& grid, double mean, double var)
{
  DiscreteMeasure m;
  m.points = grid;
  m.masses = (-(grid.array() - mean).square() / (2 * var)).exp();
  m.masses /= m.masses.sum();
  m.axes = {grid};
  return m;
}

TEST_CASE("grid to measure")
{
  DensityGrid g;
  g.dims = {0, 1};
  g.edges = {Eigen::Vector3d(0, 1, 2), Eigen::Vector3d(0, 1, 2)};
  g.values = Vector::Constant(4, 0.25);
  const DiscreteMeasure m = grid_to_measure(g);
  CHECK(m.size() == 4);
  CHECK(m.masses.isApprox(Vector::Constant(4, 0.25)));
  CHECK(m.axes.size() == 2);

  g.values = Vector::Zero(4);
  g.values(2) = 1.0;
  const DiscreteMeasure hot = grid_to_measure(g);
  CHECK(hot.masses.sum() == 1.0);
  CHECK(hot.masses(2) == 1.0);
}

TEST_CASE("sinkhorn basics")
{
  const TransportPlan forced = sinkhorn(atoms({0}, {1}), atoms({3}, {1}));
  CHECK(forced.plan(0, 0) == doctest::Approx(1.0));
  CHECK(forced.cost == doctest::Approx(9.0));

  const DiscreteMeasure mu = atoms({0, 0.5, 1, 1.5, 2}, {0.2, 0.2, 0.2, 0.2, 0.2});
  SinkhornOptions o;
  o.eps = 1e-3;
  const TransportPlan self = sinkhorn(mu, mu, o);
  CHECK(self.converged);
  CHECK(self.cost <= 1e-3 * std::log(5.0));
  CHECK((self.plan.rowwise().sum() - mu.masses).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("wasserstein distances")
{
  CHECK(wasserstein2(atoms({0}, {1}), atoms({3}, {1})) == doctest::Approx(3.0));
  const Vector line = Vector::LinSpaced(200, -6, 8);
  const DiscreteMeasure a = normal_on(line, 0, 1), b = normal_on(line, 2, 1);
  const double ab = wasserstein2(a, b);
  CHECK(ab == doctest::Approx(2.0).epsilon(0.025));
  CHECK(std::abs(ab - wasserstein2(b, a)) <= 1e-9);

  const GaussianSpec s1(Vector::Zero(1), Matrix::Identity(1, 1));
  const GaussianSpec s2(Vector::Constant(1, 2.0), Matrix::Identity(1, 1));
  CHECK(gaussian_w2_oracle(s1, s1) == doctest::Approx(0.0));
  CHECK(gaussian_w2_oracle(s1, s2) == doctest::Approx(2.0));
  CHECK(gaussian_w2_oracle(GaussianSpec(Vector::Zero(2), Matrix::Identity(2, 2)),
                           GaussianSpec(Vector::Zero(2), 4 * Matrix::Identity(2, 2))) == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("barycenters")
{
  const Vector grid = Vector::LinSpaced(101, -2, 3);
  const DiscreteMeasure n = normal_on(grid, 0.3, 0.2);
  BarycenterSpec same;
  same.inputs = {n, n};
  same.lambdas = Eigen::Vector2d(0.3, 0.7);
  same.eps = 1e-2 * (grid(1) - grid(0)) * (grid(1) - grid(0)) * 100;
  CHECK(0.5 * (barycenter(same).measure.masses - n.masses).cwiseAbs().sum() <= 0.05);

  const Vector fine = Vector::LinSpaced(201, -1, 3);
  DiscreteMeasure d0, d2;
  d0.points = d2.points = fine;
  d0.axes = d2.axes = {fine};
  d0.masses = d2.masses = Vector::Zero(201);
  d0.masses(50) = 1.0;    // x = 0
  d2.masses(150) = 1.0;   // x = 2
  BarycenterSpec diracs;
  diracs.inputs = {d0, d2};
  diracs.lambdas = Eigen::Vector2d(0.5, 0.5);
  diracs.eps = 1e-3;
  const BarycenterResult mid = barycenter(diracs);
  Index mode = 0;
  mid.measure.masses.maxCoeff(&mode);
  CHECK(std::abs(fine(mode) - 1.0) <= (fine(1) - fine(0)) + 1e-12);

  BarycenterSpec bad = diracs;
  bad.lambdas = Eigen::Vector2d(0.5, 0.6);
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("barycentric trajectories")
{
  auto make = [](double offset, std::uint64_t seed) {
    CloudTrajectory t;
    for (int k = 0; k < 2; ++k) {
      WeightedCloud c = sample_gaussian(GaussianSpec::diagonal(Eigen::Vector2d(k, offset), Eigen::Vector2d(0.1, 0.2)), 400, seed + k);
      c.time = k;
      t.clouds.push_back(c);
    }
    t.flags.assign(400, 0);
    return t;
  };
  const CloudTrajectory up = make(3.7, 1), down = make(-3.7, 5);
  BarycentricOptions o;
  o.bins = {20, 20};
  auto half = [](double) { return Vector(Eigen::Vector2d(0.5, 0.5)); };
  const auto ab = barycentric_trajectory({&up, &down}, {0, 1}, half, o);
  const auto ba = barycentric_trajectory({&down, &up}, {0, 1}, half, o);
  REQUIRE(ab.size() == 2);
  for (std::size_t k = 0; k < ab.size(); ++k) {
    const double ey = ab[k].measure.mean()(1);
    CHECK(ey > -3.7);
    CHECK(ey < 3.7);
    CHECK((ab[k].measure.masses - ba[k].measure.masses).cwiseAbs().maxCoeff() <= 1e-9);
  }

  auto one = [](double) { return Vector(Vector::Ones(1)); };
  const auto single = barycentric_trajectory({&up}, {0, 1}, one, o);
  MarginalOptions mo;
  mo.bins = {20, 20};
  const DiscreteMeasure direct = grid_to_measure(marginal(up.clouds[1], {0, 1}, mo));
  CHECK((single[1].measure.masses - direct.masses).cwiseAbs().maxCoeff() <= 1e-12);
}
