#include "doctest.h"
#include "lreach/control.hpp"
#include "lreach/field.hpp"
#include "lreach/models.hpp"

#include <cmath>
#include <numbers>

using namespace lreach;

TEST_CASE("sideslip")
{
  const KinematicParams p;
  CHECK(sideslip(0.0, p) == 0.0);
  CHECK(sideslip(0.1, p) == doctest::Approx(0.0601278).epsilon(1e-6));
  CHECK(sideslip(-0.3, p) == -sideslip(0.3, p));
}

TEST_CASE("kinematic right-hand side")
{
  const KinematicParams p;
  Eigen::Vector4d x(0, 0, 20, 0);
  Eigen::Vector2d u(0, 0);
  CHECK((kinematic_rhs(x, u, p) - Eigen::Vector4d(20, 0, 0, 0)).norm() < 1e-12);

  x << 0, 0, 20, std::numbers::pi / 2;
  u << 1, 0;
  CHECK((kinematic_rhs(x, u, p) - Eigen::Vector4d(0, 20, 1, 0)).norm() < 1e-12);

  x << 0, 0, 10, 0;
  u << 0, 0.1;
  CHECK(kinematic_rhs(x, u, p)(kin::PSI) == doctest::Approx(10.0 / 1.5 * std::sin(sideslip(0.1, p))).epsilon(1e-12));
  CHECK(kinematic_rhs(x, u, p)(kin::PSI) == doctest::Approx(0.400611).epsilon(1e-5));
}

TEST_CASE("normal loads")
{
  const DynamicParams p;
  const Eigen::Vector4d n = normal_loads(p);
  CHECK(n(0) == doctest::Approx(5096.9).epsilon(1e-4));
  CHECK(n(1) == n(0));
  CHECK(n(2) == doctest::Approx(4958.4).epsilon(1e-4));
  CHECK(n.sum() == doctest::Approx(p.mass * p.gravity).epsilon(1e-15));
}

TEST_CASE("tire forces")
{
  const DynamicParams p;
  Eigen::Matrix<double, 6, 1> x;
  x << 20, 0, 0, 0, 0, 0;
  Eigen::Vector3d u(0, 0, 0);
  auto f = tire_forces(x, u, p);
  CHECK(f.Fx.cwiseAbs().maxCoeff() == 0.0);
  CHECK(f.Fy.cwiseAbs().maxCoeff() == 0.0);
  CHECK(f.alpha.cwiseAbs().maxCoeff() == 0.0);

  u << 0, -1, -1;
  f = tire_forces(x, u, p);
  CHECK(f.fx(0) == doctest::Approx(-p.friction * normal_loads(p)(0)));
  CHECK(f.Fx(0) == doctest::Approx(f.fx(0)));

  x << 20, 1, 0, 0, 0, 0;
  u << 0, 0, 0;
  f = tire_forces(x, u, p);
  CHECK(f.alpha(2) == doctest::Approx(std::atan(1.0 / 20.0)));
  CHECK(f.alpha(3) == doctest::Approx(0.049958).epsilon(1e-5));
  CHECK(f.fy(2) == doctest::Approx(-12500.0).epsilon(1e-3));

  const auto r = wheel_rotation(0.05);
  CHECK((r.transpose() * r - Eigen::Matrix2d::Identity()).norm() < 1e-15);
}

TEST_CASE("dynamic right-hand side")
{
  const DynamicParams p;
  Eigen::Matrix<double, 6, 1> x;
  x << 20, 0, 0, 0, -1.85, 0;
  const Eigen::Vector3d u(0, 0, 0);
  Eigen::Matrix<double, 6, 1> expected;
  expected << 0, 0, 0, 0, 0, 20;
  CHECK((dynamic_rhs(x, u, p) - expected).norm() < 1e-12);

  for (double vx : {5.0, 13.0, 31.0}) {
    x << vx, 0, 0, 0, 0.3, 2;
    const auto d = dynamic_rhs(x, u, p);
    CHECK(d(dyn::EY) == 0.0);
    CHECK(d(dyn::S) == vx);
  }
}

// Scalar re-derivation of the bicycle equations, independent of the templated version.
static Eigen::Matrix<double, 6, 1> scalar_bicycle(const Eigen::Matrix<double, 6, 1>& x, const Eigen::Vector3d& u,
                                                  const DynamicParams& p)
{
  const double vx = x(0), vy = x(1), r = x(2), epsi = x(3);
  const double fz_f = 0.5 * p.mass * p.gravity * p.b / (p.a + p.b);
  const double fz_r = 0.5 * p.mass * p.gravity * p.a / (p.a + p.b);
  const double fz[4] = {fz_f, fz_f, fz_r, fz_r};
  const double steer[4] = {u(0), u(0), 0, 0};
  const double px[4] = {p.a, p.a, -p.b, -p.b};
  const double py[4] = {p.c, -p.c, p.c, -p.c};
  const double brake[4] = {u(1), u(2), u(1), u(2)};
  double fxs = 0, fys = 0, mz = 0;
  for (int i = 0; i < 4; ++i) {
    // wheel-hub velocity in the body frame
    const double wx = vx - r * py[i];
    const double wy = vy + r * px[i];
    const double vl = wx * std::cos(steer[i]) + wy * std::sin(steer[i]);
    const double vc = -wx * std::sin(steer[i]) + wy * std::cos(steer[i]);
    const double alpha = std::atan(vc / vl);
    const double flong = p.friction * fz[i] * brake[i];
    const double flat = -p.cornering_stiffness * std::tan(alpha);
    const double bx = flong * std::cos(steer[i]) - flat * std::sin(steer[i]);
    const double by = flong * std::sin(steer[i]) + flat * std::cos(steer[i]);
    fxs += bx;
    fys += by;
    mz += px[i] * by - py[i] * bx;
  }
  Eigen::Matrix<double, 6, 1> d;
  d << vy * r + fxs / p.mass, -vx * r + fys / p.mass, mz / p.yaw_inertia, r, vx * std::sin(epsi) + vy * std::cos(epsi),
      vx * std::cos(epsi) - vy * std::sin(epsi);
  return d;
}

TEST_CASE("dynamic right-hand side against a scalar re-derivation")
{
  const DynamicParams p;
  Eigen::Matrix<double, 6, 1> x;
  x << 20, 1, 0.1, 0, 0, 0;
  const Eigen::Vector3d zero(0, 0, 0);
  CHECK((dynamic_rhs(x, zero, p) - scalar_bicycle(x, zero, p)).norm() < 1e-6 * (1 + scalar_bicycle(x, zero, p).norm()));

  x << 18, -0.4, 0.05, 0.02, 0.5, 3;
  const Eigen::Vector3d u(0.03, -0.2, -0.1);
  CHECK((dynamic_rhs(x, u, p) - scalar_bicycle(x, u, p)).norm() < 1e-6 * (1 + scalar_bicycle(x, u, p).norm()));
}

TEST_CASE("divergence of simple fields")
{
  Matrix a = Eigen::Vector2d(-1, -2).asDiagonal();
  const AffineField f(a);
  CHECK(*f.analytic_divergence(Vector::Ones(2), 0.0) == -3.0);
  CHECK(divergence(f, Vector::Ones(2), 0.0, DivergenceMode::finite_difference) == doctest::Approx(-3.0).epsilon(1e-8));

  OpenLoopSchedule sched;
  ScheduleComponent accel;
  accel.kind = ScheduleComponent::Kind::sine;
  accel.amplitude = 1.0;
  accel.frequency = 1.0;
  ScheduleComponent steer;
  sched.components = {accel, steer};
  const ClosedLoopField kin_field(KinematicParams{}, sched, DivergenceMode::analytic);
  const Vector x = Eigen::Vector4d(3, -1, 18, 0.2);
  CHECK(kin_field.divergence(x, 0.7) == 0.0);
  CHECK(std::abs(divergence(kin_field, x, 0.7, DivergenceMode::finite_difference)) < 1e-6);
  CHECK(kin_field.evaluate(x, std::numbers::pi / 2)(kin::V) == doctest::Approx(1.0));
}
