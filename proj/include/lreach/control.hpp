#pragma once

/**
 * @file
 * @brief Plants, feedback policies and the closed-loop vector field.
 *
 * The online MPC policy solves the condensed linear-MPC QP at every query. Its
 * state-to-input map is the same continuous piecewise-affine law an explicit
 * MPC partition would store, so the closed-loop divergence can be taken
 * exactly through the QP sensitivity of the current working set.
 */

#include "lreach/field.hpp"
#include "lreach/models.hpp"
#include "lreach/qp.hpp"

#include <memory>
#include <string>
#include <variant>
#include <vector>

namespace lreach {

/// x' = A x + B u + c
struct AffinePlant
{
  Matrix a;
  Matrix b;
  Vector offset;

  void validate() const;
};

using Plant = std::variant<KinematicParams, DynamicParams, AffinePlant>;

Index state_dim(const Plant& plant);
Index input_dim(const Plant& plant);
Vector plant_rhs(const Plant& plant, const Vector& x, const Vector& u);

/// Exact Jacobians of the open-loop right-hand side (forward-mode AD for the bicycle models).
void plant_jacobians(const Plant& plant, const Vector& x, const Vector& u, Matrix& jac_x, Matrix& jac_u);

struct TrimPoint
{
  Vector x;
  Vector u;
  /// The reference moves as x + rate * t; nonzero only on cyclic coordinates (arc length s).
  Vector rate;
  double residual_norm = 0.0;
  int iterations = 0;

  Vector reference(double t) const { return x + rate * t; }
};

struct LtiPair
{
  Matrix a;
  Matrix b;
};

struct MpcConfig
{
  Matrix q;
  Matrix r;
  Matrix s;
  double prediction_horizon = 3.0;
  double control_horizon = 2.0;
  double dt = 0.1;
  Vector u_lo;
  Vector u_hi;
  double ey_center = 0.0;
  double ey_halfwidth = 1.5;
  /// State coordinate carrying the lateral window; -1 disables it.
  Index ey_index = dyn::EY;

  Index prediction_steps() const;
  Index control_steps() const;
  void validate(Index state_dim, Index input_dim) const;

  /// Q = 10 I, R = I, S = 0.1 I, dt = 0.1 s, t_p = 3 s, t_c = 2 s, bounds +-10 deg, +-1, +-1.
  static MpcConfig dynamic_default(double ey_center);
};

/**
 * @brief Velocity-hold trim of the dynamic bicycle.
 *
 * v_x and e_y are fixed, s is cyclic; the remaining states and the controls
 * are found by damped Gauss-Newton on the first five components of the
 * right-hand side with projection onto the control bounds of `config`.
 */
TrimPoint find_trim(const DynamicParams& params, double vx_target, double ey_target, const MpcConfig& config);

/// Equilibrium of an affine plant with u = u_trim (least squares when A is singular).
TrimPoint affine_trim(const AffinePlant& plant, const Vector& u_trim);

/// Central differences with step 1e-6 * max(1, |coordinate|).
LtiPair linearize(const Plant& plant, const TrimPoint& trim);

/// Zero-order hold via the exponential of [[A, B], [0, 0]] dt.
LtiPair discretize(const LtiPair& continuous, double dt);

// ---------------------------------------------------------------------------
// Policies

struct ScheduleComponent
{
  enum class Kind
  {
    constant,
    sine,
    table,
  };
  Kind kind = Kind::constant;
  double value = 0.0;       ///< constant value, or sine offset
  double amplitude = 0.0;
  double frequency = 1.0;   ///< rad/s
  double phase = 0.0;
  std::vector<double> times;    ///< table knots (linear interpolation, held outside)
  std::vector<double> values;

  double evaluate(double t) const;
  void validate() const;
};

/// Open-loop u(t), one component per input.
struct OpenLoopSchedule
{
  std::vector<ScheduleComponent> components;

  Vector evaluate(double t) const;
  Index input_dim() const { return static_cast<Index>(components.size()); }
};

struct PwaRegion
{
  Matrix h_matrix;   ///< H_j
  Vector h_vector;   ///< h_j
  Matrix gain;       ///< Gamma_j
  Vector offset;     ///< gamma_j
  Vector center;     ///< Chebyshev center, computed at construction
  double radius = 0.0;
};

/// u = Gamma_j x + gamma_j on {x : H_j x <= h_j}, first match in stored order.
class PwaPolicy
{
public:
  PwaPolicy(Index dim, Index input_dim, std::vector<PwaRegion> regions);

  Index dim() const { return dim_; }
  Index input_dim() const { return input_dim_; }
  const std::vector<PwaRegion>& regions() const { return regions_; }

  /// Containing region (tolerance 1e-9) or -1.
  Index locate(const Vector& x) const;

  /// Region used for x: containing one, else nearest Chebyshev center (and a fallback flag).
  Index select(const Vector& x, EvalInfo* info = nullptr) const;

  Vector evaluate(const Vector& x, EvalInfo* info = nullptr) const;

private:
  Index dim_;
  Index input_dim_;
  std::vector<PwaRegion> regions_;
};

PwaPolicy load_pwa_policy(const std::string& path);
PwaPolicy parse_pwa_policy(const std::string& text);
std::string format_pwa_policy(const PwaPolicy& policy);
void save_pwa_policy(const PwaPolicy& policy, const std::string& path);

/**
 * @brief Online condensed linear MPC around a trim point.
 *
 * Decision variables are the input deviations of the first ceil(t_c/dt)
 * steps; later inputs repeat the last free one. Cost
 *   sum_{k=1..Np} dx_k' Q dx_k + sum_{k=0..Np-1} du_k' R du_k
 *   + sum_{k=1..Nc-1} (du_k - du_{k-1})' S (du_k - du_{k-1}) / dt^2
 * subject to input bounds on the free moves and the e_y window on the
 * predicted states k = 1..Np.
 */
class OnlineMpcPolicy
{
public:
  OnlineMpcPolicy(const LtiPair& continuous, MpcConfig config, TrimPoint trim);

  Index dim() const { return trim_.x.size(); }
  Index input_dim() const { return trim_.u.size(); }

  /// Control at (x, t). `jacobian`, when given, receives du/dx of the active piece.
  Vector evaluate(const Vector& x, double t, EvalInfo* info = nullptr, Matrix* jacobian = nullptr) const;

  /// Input deviation sequence from the unconstrained problem (first m entries are du_0).
  Vector unconstrained_moves(const Vector& dx0) const;

  const MpcConfig& config() const { return config_; }
  const TrimPoint& trim() const { return trim_; }
  const LtiPair& discrete() const { return discrete_; }
  const DenseQp& qp() const { return *qp_; }

private:
  MpcConfig config_;
  TrimPoint trim_;
  LtiPair discrete_;
  Matrix linear_map_;   // f = linear_map_ * dx0
  Vector bound_base_;   // h = bound_base_ + bound_map_ * dx0
  Matrix bound_map_;
  Matrix unconstrained_gain_;   // -H^{-1} F
  std::shared_ptr<const DenseQp> qp_;
};

using FeedbackPolicy = std::variant<OpenLoopSchedule, PwaPolicy, std::shared_ptr<const OnlineMpcPolicy>>;

Index policy_input_dim(const FeedbackPolicy& policy);

/// Control and, for state feedback, du/dx at (x, t).
Vector evaluate_policy(const FeedbackPolicy& policy, const Vector& x, double t, EvalInfo* info = nullptr,
                       Matrix* jacobian = nullptr);

/**
 * @brief g(x, t) = f(x, pi(x, t)).
 *
 * Divergence: zero for kinematic open loop, trace of the closed-loop matrix
 * for affine plants under open loop or PWA feedback, and otherwise
 * tr(df/dx) + tr(df/du du/dx) with exact plant Jacobians and the policy's
 * local gain. DivergenceMode::finite_difference forces the stencil on g.
 */
class ClosedLoopField : public VectorField
{
public:
  ClosedLoopField(Plant plant, FeedbackPolicy policy, DivergenceMode mode = DivergenceMode::analytic);

  Index dim() const override { return state_dim(plant_); }
  Vector evaluate(const Vector& x, double t, EvalInfo* info = nullptr) const override;
  std::optional<double> analytic_divergence(const Vector& x, double t) const override;
  double divergence(const Vector& x, double t, EvalInfo* info = nullptr) const override;
  Vector evaluate_with_divergence(const Vector& x, double t, double& div, EvalInfo* info = nullptr) const override;

  const Plant& plant() const { return plant_; }
  const FeedbackPolicy& policy() const { return policy_; }

private:
  Plant plant_;
  FeedbackPolicy policy_;
  DivergenceMode mode_;
};

}  // namespace lreach
