#include "doctest.h"
#include "lreach/field.hpp"
#include "lreach/liouville.hpp"

#include <cmath>
#include <sstream>

using namespace lreach;

static PropagationSettings grid(double tf, double dt)
{
  PropagationSettings s;
  s.t_grid = PropagationSettings::uniform_grid(0.0, tf, dt);
  return s;
}

TEST_CASE("contracting scalar flow")
{
  const AffineField field(-Matrix::Identity(1, 1));
  WeightedCloud c;
  c.states = Matrix::Zero(1, 1);
  c.weights = Vector::Constant(1, 0.398942280401432678);
  const CloudTrajectory traj = propagate(c, field, grid(1.0, 0.5));
  REQUIRE(traj.clouds.size() == 3);
  CHECK(traj.clouds[2].time == 1.0);
  CHECK(traj.clouds[2].states(0, 0) == 0.0);
  CHECK(traj.clouds[2].weights(0) == doctest::Approx(1.08444).epsilon(1e-5));
}

TEST_CASE("output grid is hit exactly and workers agree")
{
  const AffineField field(Matrix(Eigen::Vector2d(-0.5, -1.5).asDiagonal()));
  const WeightedCloud c = sample_gaussian(GaussianSpec::diagonal(Vector::Ones(2), Vector::Ones(2)), 64, 3);
  PropagationSettings s = grid(2.0, 0.3);
  s.workers = 1;
  const CloudTrajectory one = propagate(c, field, s);
  s.workers = 4;
  const CloudTrajectory four = propagate(c, field, s);
  for (std::size_t k = 0; k < one.clouds.size(); ++k) {
    CHECK(one.clouds[k].time == s.t_grid[k]);
    CHECK(one.clouds[k].states == four.clouds[k].states);
    CHECK(one.clouds[k].weights == four.clouds[k].weights);
  }
  CHECK(one.times().back() == doctest::Approx(2.0));
  const CloudTrajectory states_only = propagate_states(c.states, field, s);
  CHECK(states_only.clouds.back().states == one.clouds.back().states);
}

TEST_CASE("semi-analytic residual tracks the tolerance")
{
  const AffineField field(-Matrix::Identity(2, 2));
  const GaussianSpec g0 = GaussianSpec::diagonal(Vector::Zero(2), Vector::Ones(2));
  const WeightedCloud c = sample_gaussian(g0, 50, 2);
  auto rho0 = [&](const Vector& x) { return g0.pdf(x); };
  std::vector<double> residuals;
  for (double rtol : {1e-4, 1e-6, 1e-8}) {
    PropagationSettings s = grid(2.0, 0.5);
    s.rtol = rtol;
    s.atol = rtol * 1e-3;
    s.record_path = true;
    s.weight_mode = WeightMode::linear;
    const SemianalyticReport r = verify_semianalytic(propagate(c, field, s), rho0, field);
    CHECK(r.checked_samples == 50);
    residuals.push_back(r.max_relative_residual);
  }
  CHECK(residuals[0] > residuals[1]);
  CHECK(residuals[1] > residuals[2]);

  PropagationSettings s = grid(2.0, 0.5);
  s.record_path = true;
  CHECK(verify_semianalytic(propagate(c, field, s), rho0, field).max_relative_residual <= 1e-6);
}

TEST_CASE("divergence-free field leaves weights unchanged")
{
  Matrix rot(2, 2);
  rot << 0, 1, -1, 0;
  const AffineField field(rot);
  const WeightedCloud c = sample_gaussian(GaussianSpec::diagonal(Vector::Zero(2), Vector::Ones(2)), 100, 4);
  PropagationSettings s = grid(3.0, 1.0);
  s.record_path = true;
  const CloudTrajectory traj = propagate(c, field, s);
  for (const WeightedCloud& w : traj.clouds) CHECK(((w.weights - c.weights).array() / c.weights.array()).abs().maxCoeff() < 1e-12);
  auto rho0 = [](const Vector& x) { return std::exp(-0.5 * x.squaredNorm()) / (2 * std::numbers::pi); };
  CHECK(verify_semianalytic(traj, rho0, field).max_relative_residual < 1e-8);
}

TEST_CASE("mass consistency statistic")
{
  const WeightedCloud c = sample_gaussian(GaussianSpec::diagonal(Vector::Zero(2), Vector::Ones(2)), 2000, 8);
  Matrix rot(2, 2);
  rot << 0, 1, -1, 0;
  const CloudTrajectory traj = propagate(c, AffineField(rot), grid(1.0, 0.5));
  for (double m : mass_consistency(traj)) {
    CHECK(m >= 0.9);
    CHECK(m <= 1.1);
  }
  CloudTrajectory doubled = traj;
  for (WeightedCloud& w : doubled.clouds) w.weights *= 2.0;
  CHECK(mass_consistency(doubled)[0] == doctest::Approx(2.0).epsilon(0.1));
}

TEST_CASE("singular fields freeze samples and too many reject the run")
{
  // dx/dt = x^2 blows up at t = 1 / x0
  const FunctionField blowup(1, [](const Vector& x, double) { return Vector::Constant(1, x(0) * x(0)); },
                             [](const Vector& x, double) { return 2.0 * x(0); });
  WeightedCloud c;
  c.states = Matrix::Zero(20, 1);
  for (Index i = 0; i < 20; ++i) c.states(i, 0) = i == 0 ? 10.0 : -1.0 - i;
  c.weights = Vector::Ones(20);
  PropagationSettings s = grid(0.5, 0.25);
  const CloudTrajectory traj = propagate(c, blowup, s);
  CHECK((traj.flags[0] & flag_frozen) != 0);
  CHECK(traj.flags[1] == flag_none);
  CHECK(traj.count(flag_frozen) == 1);

  for (Index i = 0; i < 5; ++i) c.states(i, 0) = 10.0;
  CHECK_THROWS_AS(propagate(c, blowup, s), NumericalError);

  // dx/dt = 1/(1 - x) drives x onto x = 1 from both sides; the step budget stops the chatter
  const FunctionField sliding(1, [](const Vector& x, double) { return Vector::Constant(1, 1.0 / (1.0 - x(0))); },
                              [](const Vector& x, double) { return 1.0 / ((1.0 - x(0)) * (1.0 - x(0))); });
  WeightedCloud one;
  one.states = Matrix::Constant(1, 1, 0.9);
  one.weights = Vector::Ones(1);
  s.max_steps = 2000;
  s.max_frozen_fraction = 1.0;
  CHECK((propagate(one, sliding, s).flags[0] & flag_frozen) != 0);
}

TEST_CASE("settings validation and csv")
{
  PropagationSettings s;
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s.t_grid = {0.0, 1.0, 0.5};
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s = grid(1.0, 0.5);
  s.rtol = -1;
  CHECK_THROWS_AS(s.validate(), ValidationError);

  const AffineField field(-Matrix::Identity(1, 1));
  WeightedCloud c;
  c.states = Matrix::Ones(2, 1);
  c.weights = Vector::Ones(2);
  std::ostringstream os;
  write_trajectory_csv(propagate(c, field, grid(1.0, 0.5)), os);
  std::istringstream in(os.str());
  std::string header;
  std::getline(in, header);
  CHECK(header == "t,sample,x1,rho,flag");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  CHECK(rows == 6);
}
