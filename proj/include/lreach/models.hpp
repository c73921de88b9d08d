#pragma once

/**
 * @file
 * @brief Kinematic and dynamic bicycle vector fields.
 *
 * Everything here is templated on the scalar of the state/control expressions
 * so the same code runs on double and on Eigen::AutoDiffScalar.
 *
 * Kinematic state (x, y, v, psi), control (a_c, delta).
 * Dynamic state (v_x, v_y, v_psi, e_psi, e_y, s) in road-aligned coordinates,
 * control (delta_front, beta_left, beta_right).
 * Wheels are numbered 1 = front-left, 2 = front-right, 3 = rear-left,
 * 4 = rear-right (stored at indices 0..3).
 */

#include "lreach/core.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <type_traits>

namespace lreach {

namespace detail {
template<typename T>
double to_double(const T& v)
{
  if constexpr (std::is_arithmetic_v<T>) {
    return static_cast<double>(v);
  } else {
    return to_double(v.value());
  }
}

// Eigen's AutoDiffScalar has no atan overload.
template<typename T>
T arctan(const T& v)
{
  if constexpr (std::is_arithmetic_v<T>) {
    return std::atan(v);
  } else {
    const auto inner = v.value();
    return T(arctan(inner), v.derivatives() / (1.0 + detail::to_double(inner) * detail::to_double(inner)));
  }
}
}  // namespace detail

inline constexpr double kDegree = std::numbers::pi / 180.0;
inline constexpr double kMaxFrontSteer = 10.0 * kDegree;

struct KinematicParams
{
  double l_front = 1.0;
  double l_rear = 1.5;

  void validate() const
  {
    if (!(l_front > 0.0) || !(l_rear > 0.0)) throw ValidationError("kinematic: axle distances must be positive");
  }
};

struct DynamicParams
{
  double a = 1.432;        ///< CoG to front axle [m]
  double b = 1.472;        ///< CoG to rear axle [m]
  double c = 0.8125;       ///< half track [m]
  double mass = 2050.0;    ///< [kg]
  double yaw_inertia = 3344.0;             ///< [kg m^2]
  double cornering_stiffness = 250000.0;   ///< [N/rad]
  double friction = 0.9;   ///< tire-road friction coefficient
  double curvature = 0.0;  ///< road curvature [1/m]
  double gravity = 9.81;

  void validate() const
  {
    if (!(a > 0.0 && b > 0.0 && c > 0.0 && mass > 0.0 && yaw_inertia > 0.0 && cornering_stiffness > 0.0)) {
      throw ValidationError("dynamic: geometry, mass, inertia and stiffness must be positive");
    }
    if (!(friction > 0.0 && friction <= 1.5)) throw ValidationError("dynamic: friction must lie in (0, 1.5]");
    if (!std::isfinite(curvature)) throw ValidationError("dynamic: curvature must be finite");
  }
};

namespace kin {
enum : Index { X = 0, Y = 1, V = 2, PSI = 3 };
enum : Index { ACCEL = 0, STEER = 1 };
}  // namespace kin

namespace dyn {
enum : Index { VX = 0, VY = 1, VPSI = 2, EPSI = 3, EY = 4, S = 5 };
enum : Index { STEER = 0, BRAKE_LEFT = 1, BRAKE_RIGHT = 2 };
}  // namespace dyn

/// Sideslip angle arctan(l_rear / (l_front + l_rear) * tan(delta)).
template<typename T>
T sideslip(const T& delta, const KinematicParams& p)
{
  using std::tan;
  using std::abs;
  if (!(abs(detail::to_double(delta)) < std::numbers::pi / 2)) {
    throw ValidationError("sideslip: |delta| must be below pi/2");
  }
  return detail::arctan(T(p.l_rear / (p.l_front + p.l_rear) * tan(delta)));
}

template<typename DX, typename DU>
Eigen::Matrix<typename DX::Scalar, 4, 1> kinematic_rhs(const Eigen::MatrixBase<DX>& x,
                                                       const Eigen::MatrixBase<DU>& u,
                                                       const KinematicParams& p)
{
  using T = typename DX::Scalar;
  using std::cos;
  using std::sin;
  if (x.size() != 4 || u.size() != 2) throw ValidationError("kinematic_rhs: expects 4 states and 2 controls");
  const T beta = sideslip(T(u(kin::STEER)), p);
  const T v = x(kin::V);
  const T psi = x(kin::PSI);
  Eigen::Matrix<T, 4, 1> dx;
  dx << v * cos(psi + beta), v * sin(psi + beta), T(u(kin::ACCEL)), v / p.l_rear * sin(beta);
  return dx;
}

/// Static normal loads from force and moment balance.
inline Eigen::Vector4d normal_loads(const DynamicParams& p)
{
  const double front = 0.5 * p.mass * p.gravity * p.b / (p.a + p.b);
  const double rear = 0.5 * p.mass * p.gravity * p.a / (p.a + p.b);
  return Eigen::Vector4d(front, front, rear, rear);
}

/// Orthogonal wheel rotation U(delta) = [[cos, sin], [-sin, cos]].
template<typename T>
Eigen::Matrix<T, 2, 2> wheel_rotation(const T& delta)
{
  using std::cos;
  using std::sin;
  Eigen::Matrix<T, 2, 2> u;
  u << cos(delta), sin(delta), -sin(delta), cos(delta);
  return u;
}

template<typename T>
struct TireForces
{
  using Vec4 = Eigen::Matrix<T, 4, 1>;
  Vec4 Fx, Fy;    ///< body frame
  Vec4 fx, fy;    ///< wheel frame
  Vec4 Fz;        ///< normal loads
  Vec4 alpha;     ///< slip angles
  Vec4 v_l, v_c;  ///< wheel-frame longitudinal / lateral velocities
};

template<typename DX, typename DU>
TireForces<typename DX::Scalar> tire_forces(const Eigen::MatrixBase<DX>& x,
                                            const Eigen::MatrixBase<DU>& u,
                                            const DynamicParams& p)
{
  using T = typename DX::Scalar;
  if (x.size() != 6 || u.size() != 3) throw ValidationError("tire_forces: expects 6 states and 3 controls");

  const double steer = detail::to_double(u(dyn::STEER));
  const double bl = detail::to_double(u(dyn::BRAKE_LEFT));
  const double br = detail::to_double(u(dyn::BRAKE_RIGHT));
  constexpr double slack = 1e-12;
  if (std::abs(steer) > kMaxFrontSteer + slack || std::abs(bl) > 1.0 + slack || std::abs(br) > 1.0 + slack) {
    std::ostringstream os;
    os << "tire_forces: control out of bounds (delta_front = " << steer << " rad, beta_left = " << bl
       << ", beta_right = " << br << ")";
    throw ValidationError(os.str());
  }

  const T delta = T(u(dyn::STEER));
  const T vx = x(dyn::VX), vy = x(dyn::VY), vpsi = x(dyn::VPSI);

  // Body-frame contact point velocities, lever arms (-c, a), (c, a), (-c, -b), (c, -b).
  const Eigen::Vector4d lever_long(-p.c, p.c, -p.c, p.c);
  const Eigen::Vector4d lever_lat(p.a, p.a, -p.b, -p.b);
  const Eigen::Matrix<T, 2, 2> rot = wheel_rotation(delta);

  TireForces<T> f;
  const Eigen::Vector4d fz = normal_loads(p);
  const T beta[4] = {T(u(dyn::BRAKE_LEFT)), T(u(dyn::BRAKE_RIGHT)), T(u(dyn::BRAKE_LEFT)), T(u(dyn::BRAKE_RIGHT))};
  for (int i = 0; i < 4; ++i) {
    Eigen::Matrix<T, 2, 1> body;
    body << vx + lever_long(i) * vpsi, vy + lever_lat(i) * vpsi;
    const Eigen::Matrix<T, 2, 1> wheel = (i < 2) ? Eigen::Matrix<T, 2, 1>(rot * body) : body;
    f.v_l(i) = wheel(0);
    f.v_c(i) = wheel(1);
    if (detail::to_double(f.v_l(i)) == 0.0) {
      std::ostringstream os;
      os << "tire_forces: zero longitudinal wheel speed at wheel " << (i + 1) << ", slip angle undefined";
      throw NumericalError(os.str());
    }
    const T tan_alpha = f.v_c(i) / f.v_l(i);
    f.alpha(i) = detail::arctan(tan_alpha);
    f.Fz(i) = T(fz(i));
    f.fx(i) = p.friction * beta[i] * fz(i);
    f.fy(i) = -p.cornering_stiffness * tan_alpha;

    Eigen::Matrix<T, 2, 1> local;
    local << f.fx(i), f.fy(i);
    const Eigen::Matrix<T, 2, 1> out = (i < 2) ? Eigen::Matrix<T, 2, 1>(rot.transpose() * local) : local;
    f.Fx(i) = out(0);
    f.Fy(i) = out(1);
  }
  return f;
}

template<typename DX, typename DU>
Eigen::Matrix<typename DX::Scalar, 6, 1> dynamic_rhs(const Eigen::MatrixBase<DX>& x,
                                                     const Eigen::MatrixBase<DU>& u,
                                                     const DynamicParams& p)
{
  using T = typename DX::Scalar;
  using std::cos;
  using std::sin;
  if (x.size() != 6 || u.size() != 3) throw ValidationError("dynamic_rhs: expects 6 states and 3 controls");

  const T vx = x(dyn::VX), vy = x(dyn::VY), vpsi = x(dyn::VPSI);
  const T epsi = x(dyn::EPSI), ey = x(dyn::EY);
  const T road = T(1.0) - p.curvature * ey;
  if (detail::to_double(road) == 0.0) {
    throw NumericalError("dynamic_rhs: 1 - kappa * e_y vanishes (road-coordinate singularity)");
  }

  const TireForces<T> f = tire_forces(x, u, p);
  // (-1)^i for i = 1..4
  const T moment_x = -f.Fx(0) + f.Fx(1) - f.Fx(2) + f.Fx(3);
  const T along = vx * cos(epsi) - vy * sin(epsi);

  Eigen::Matrix<T, 6, 1> dx;
  dx(dyn::VX) = vy * vpsi + f.Fx.sum() / p.mass;
  dx(dyn::VY) = -vx * vpsi + f.Fy.sum() / p.mass;
  dx(dyn::VPSI) = (p.a * (f.Fy(0) + f.Fy(1)) - p.b * (f.Fy(2) + f.Fy(3)) + p.c * moment_x) / p.yaw_inertia;
  dx(dyn::EPSI) = vpsi - p.curvature / road * along;
  dx(dyn::EY) = vx * sin(epsi) + vy * cos(epsi);
  dx(dyn::S) = along / road;
  return dx;
}

}  // namespace lreach
