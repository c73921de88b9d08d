#include "lreach/control.hpp"

#include <unsupported/Eigen/AutoDiff>
#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace lreach {

namespace {

// Derivative vectors never exceed 9 entries (6 states + 3 inputs), so keep them on the stack.
using Derivatives = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 9, 1>;
using Dual = Eigen::AutoDiffScalar<Derivatives>;

template<typename Rhs>
void dual_jacobians(const Vector& x, const Vector& u, Rhs rhs, Matrix& jac_x, Matrix& jac_u)
{
  const Index d = x.size();
  const Index m = u.size();
  const Index n = d + m;
  Eigen::Matrix<Dual, Eigen::Dynamic, 1> xd(d), ud(m);
  for (Index i = 0; i < d; ++i) xd(i) = Dual(x(i), n, i);
  for (Index i = 0; i < m; ++i) ud(i) = Dual(u(i), n, d + i);
  const auto out = rhs(xd, ud);
  jac_x.resize(d, d);
  jac_u.resize(d, m);
  for (Index i = 0; i < d; ++i) {
    const Derivatives& g = out(i).derivatives();
    for (Index j = 0; j < d; ++j) jac_x(i, j) = g.size() ? g(j) : 0.0;
    for (Index j = 0; j < m; ++j) jac_u(i, j) = g.size() ? g(d + j) : 0.0;
  }
}

void check_sizes(const Plant& plant, const Vector& x, const Vector& u)
{
  if (x.size() != state_dim(plant) || u.size() != input_dim(plant)) {
    std::ostringstream os;
    os << "plant expects " << state_dim(plant) << " states and " << input_dim(plant) << " inputs, got " << x.size()
       << " and " << u.size();
    throw ValidationError(os.str());
  }
}

double step_for(double v) { return 1e-6 * std::max(1.0, std::abs(v)); }

}  // namespace

void AffinePlant::validate() const
{
  if (a.rows() != a.cols() || a.rows() == 0) throw ValidationError("affine plant: A must be square and nonempty");
  if (b.rows() != a.rows()) throw ValidationError("affine plant: B has the wrong number of rows");
  if (offset.size() != 0 && offset.size() != a.rows()) throw ValidationError("affine plant: offset has the wrong size");
  if (!a.allFinite() || !b.allFinite() || !offset.allFinite()) throw ValidationError("affine plant: non-finite entries");
}

Index state_dim(const Plant& plant)
{
  if (std::holds_alternative<KinematicParams>(plant)) return 4;
  if (std::holds_alternative<DynamicParams>(plant)) return 6;
  return std::get<AffinePlant>(plant).a.rows();
}

Index input_dim(const Plant& plant)
{
  if (std::holds_alternative<KinematicParams>(plant)) return 2;
  if (std::holds_alternative<DynamicParams>(plant)) return 3;
  return std::get<AffinePlant>(plant).b.cols();
}

Vector plant_rhs(const Plant& plant, const Vector& x, const Vector& u)
{
  check_sizes(plant, x, u);
  if (const auto* k = std::get_if<KinematicParams>(&plant)) return kinematic_rhs(x, u, *k);
  if (const auto* p = std::get_if<DynamicParams>(&plant)) return dynamic_rhs(x, u, *p);
  const auto& a = std::get<AffinePlant>(plant);
  Vector dx = a.a * x + a.b * u;
  if (a.offset.size()) dx += a.offset;
  return dx;
}

void plant_jacobians(const Plant& plant, const Vector& x, const Vector& u, Matrix& jac_x, Matrix& jac_u)
{
  check_sizes(plant, x, u);
  if (const auto* k = std::get_if<KinematicParams>(&plant)) {
    dual_jacobians(x, u, [&](const auto& xd, const auto& ud) { return kinematic_rhs(xd, ud, *k); }, jac_x, jac_u);
  } else if (const auto* p = std::get_if<DynamicParams>(&plant)) {
    dual_jacobians(x, u, [&](const auto& xd, const auto& ud) { return dynamic_rhs(xd, ud, *p); }, jac_x, jac_u);
  } else {
    const auto& a = std::get<AffinePlant>(plant);
    jac_x = a.a;
    jac_u = a.b;
  }
}

// ---------------------------------------------------------------------------

Index MpcConfig::prediction_steps() const { return static_cast<Index>(std::ceil(prediction_horizon / dt - 1e-9)); }

Index MpcConfig::control_steps() const { return static_cast<Index>(std::ceil(control_horizon / dt - 1e-9)); }

void MpcConfig::validate(Index d, Index m) const
{
  if (!(dt > 0.0)) throw ValidationError("mpc: dt must be positive");
  if (!(control_horizon > 0.0) || !(control_horizon <= prediction_horizon)) {
    throw ValidationError("mpc: need 0 < control_horizon <= prediction_horizon");
  }
  if (q.rows() != d || q.cols() != d) throw ValidationError("mpc: Q has the wrong shape");
  if (r.rows() != m || r.cols() != m) throw ValidationError("mpc: R has the wrong shape");
  if (s.rows() != m || s.cols() != m) throw ValidationError("mpc: S has the wrong shape");
  if (u_lo.size() != m || u_hi.size() != m) throw ValidationError("mpc: input bounds have the wrong size");
  for (Index i = 0; i < m; ++i) {
    if (!(u_lo(i) < u_hi(i))) throw ValidationError("mpc: u_lo must be below u_hi componentwise");
  }
  if (ey_index >= d) throw ValidationError("mpc: lateral window coordinate out of range");
  if (ey_index >= 0 && !(ey_halfwidth > 0.0)) throw ValidationError("mpc: ey_halfwidth must be positive");
  cholesky(r);   // SPD check
  Eigen::SelfAdjointEigenSolver<Matrix> qs(0.5 * (q + q.transpose())), ss(0.5 * (s + s.transpose()));
  if (qs.eigenvalues().minCoeff() <= 0.0) throw ValidationError("mpc: Q must be positive definite");
  if (ss.eigenvalues().minCoeff() < 0.0) throw ValidationError("mpc: S must be positive semidefinite");
}

MpcConfig MpcConfig::dynamic_default(double ey_center)
{
  MpcConfig c;
  c.q = 10.0 * Matrix::Identity(6, 6);
  c.r = Matrix::Identity(3, 3);
  c.s = 0.1 * Matrix::Identity(3, 3);
  c.u_lo = Vector(3);
  c.u_hi = Vector(3);
  c.u_lo << -kMaxFrontSteer, -1.0, -1.0;
  c.u_hi << kMaxFrontSteer, 1.0, 1.0;
  c.ey_center = ey_center;
  return c;
}

TrimPoint find_trim(const DynamicParams& params, double vx_target, double ey_target, const MpcConfig& config)
{
  params.validate();
  if (!(vx_target > 0.0)) throw ValidationError("trim: v_x target must be positive");
  if (config.u_lo.size() != 3 || config.u_hi.size() != 3) throw ValidationError("trim: control bounds must have 3 entries");
  if (config.ey_index >= 0 && std::abs(ey_target - config.ey_center) > config.ey_halfwidth) {
    throw ValidationError("trim: e_y target lies outside the lateral window");
  }

  // Free variables z = (v_y, v_psi, e_psi, delta, beta_l, beta_r).
  const Index free_states[3] = {dyn::VY, dyn::VPSI, dyn::EPSI};
  auto assemble = [&](const Eigen::Matrix<double, 6, 1>& z, Vector& x, Vector& u) {
    x = Vector::Zero(6);
    x(dyn::VX) = vx_target;
    x(dyn::EY) = ey_target;
    for (int i = 0; i < 3; ++i) x(free_states[i]) = z(i);
    u = z.tail<3>();
  };
  auto project = [&](Eigen::Matrix<double, 6, 1>& z) {
    for (int i = 0; i < 3; ++i) z(3 + i) = std::clamp(z(3 + i), config.u_lo(i), config.u_hi(i));
  };
  auto residual = [&](const Eigen::Matrix<double, 6, 1>& z) {
    Vector x, u;
    assemble(z, x, u);
    return Vector(dynamic_rhs(x, u, params).head<5>());
  };

  Eigen::Matrix<double, 6, 1> z = Eigen::Matrix<double, 6, 1>::Zero();
  project(z);
  Vector r = residual(z);
  int iter = 0;
  for (; iter < 100 && r.norm() > 1e-12; ++iter) {
    Vector x, u;
    assemble(z, x, u);
    Matrix jx, ju;
    plant_jacobians(params, x, u, jx, ju);
    Matrix jac(5, 6);
    for (int i = 0; i < 3; ++i) jac.col(i) = jx.col(free_states[i]).head(5);
    jac.rightCols(3) = ju.topRows(5);
    const Vector step = -jac.completeOrthogonalDecomposition().solve(r);

    double alpha = 1.0;
    bool improved = false;
    while (alpha > 1e-10) {
      Eigen::Matrix<double, 6, 1> trial = z + alpha * step;
      project(trial);
      const Vector rt = residual(trial);
      if (rt.allFinite() && rt.norm() < r.norm()) {
        z = trial;
        r = rt;
        improved = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!improved) break;
  }

  TrimPoint trim;
  assemble(z, trim.x, trim.u);
  trim.residual_norm = r.norm();
  trim.iterations = iter;
  if (!(trim.residual_norm <= 1e-8)) {
    std::ostringstream os;
    os << "trim: no convergence after " << iter << " iterations (residual " << trim.residual_norm << ")";
    throw NumericalError(os.str());
  }
  trim.rate = Vector::Zero(6);
  trim.rate(dyn::S) = dynamic_rhs(trim.x, trim.u, params)(dyn::S);
  return trim;
}

TrimPoint affine_trim(const AffinePlant& plant, const Vector& u_trim)
{
  plant.validate();
  if (u_trim.size() != plant.b.cols()) throw ValidationError("affine trim: input size mismatch");
  Vector rhs = plant.b * u_trim;
  if (plant.offset.size()) rhs += plant.offset;
  TrimPoint trim;
  trim.x = -plant.a.completeOrthogonalDecomposition().solve(rhs);
  trim.u = u_trim;
  trim.rate = Vector::Zero(plant.a.rows());
  trim.residual_norm = (plant.a * trim.x + rhs).norm();
  return trim;
}

LtiPair linearize(const Plant& plant, const TrimPoint& trim)
{
  check_sizes(plant, trim.x, trim.u);
  const Index d = trim.x.size();
  const Index m = trim.u.size();
  LtiPair lti{Matrix(d, d), Matrix(d, m)};
  Vector x = trim.x;
  for (Index j = 0; j < d; ++j) {
    const double h = step_for(trim.x(j));
    x(j) = trim.x(j) + h;
    const Vector up = plant_rhs(plant, x, trim.u);
    x(j) = trim.x(j) - h;
    const Vector down = plant_rhs(plant, x, trim.u);
    x(j) = trim.x(j);
    lti.a.col(j) = (up - down) / (2.0 * h);
  }
  Vector u = trim.u;
  for (Index j = 0; j < m; ++j) {
    const double h = step_for(trim.u(j));
    u(j) = trim.u(j) + h;
    const Vector up = plant_rhs(plant, trim.x, u);
    u(j) = trim.u(j) - h;
    const Vector down = plant_rhs(plant, trim.x, u);
    u(j) = trim.u(j);
    lti.b.col(j) = (up - down) / (2.0 * h);
  }
  return lti;
}

LtiPair discretize(const LtiPair& c, double dt)
{
  const Index d = c.a.rows();
  const Index m = c.b.cols();
  if (c.a.cols() != d || c.b.rows() != d) throw ValidationError("discretize: inconsistent LTI pair");
  if (!(dt > 0.0)) throw ValidationError("discretize: dt must be positive");
  Matrix aug = Matrix::Zero(d + m, d + m);
  aug.topLeftCorner(d, d) = c.a * dt;
  aug.topRightCorner(d, m) = c.b * dt;
  const Matrix e = aug.exp();
  return {e.topLeftCorner(d, d), e.topRightCorner(d, m)};
}

// ---------------------------------------------------------------------------

double ScheduleComponent::evaluate(double t) const
{
  switch (kind) {
    case Kind::constant:
      return value;
    case Kind::sine:
      return value + amplitude * std::sin(frequency * t + phase);
    case Kind::table: {
      if (t <= times.front()) return values.front();
      if (t >= times.back()) return values.back();
      const auto it = std::upper_bound(times.begin(), times.end(), t);
      const std::size_t k = static_cast<std::size_t>(it - times.begin());
      const double w = (t - times[k - 1]) / (times[k] - times[k - 1]);
      return (1.0 - w) * values[k - 1] + w * values[k];
    }
  }
  return 0.0;
}

void ScheduleComponent::validate() const
{
  if (!std::isfinite(value) || !std::isfinite(amplitude) || !std::isfinite(frequency) || !std::isfinite(phase)) {
    throw ValidationError("schedule: non-finite parameter");
  }
  if (kind == Kind::table) {
    if (times.empty() || times.size() != values.size()) throw ValidationError("schedule: table needs matching nonempty times and values");
    for (std::size_t i = 1; i < times.size(); ++i) {
      if (!(times[i] > times[i - 1])) throw ValidationError("schedule: table times must be strictly increasing");
    }
  }
}

Vector OpenLoopSchedule::evaluate(double t) const
{
  Vector u(input_dim());
  for (Index i = 0; i < u.size(); ++i) u(i) = components[static_cast<std::size_t>(i)].evaluate(t);
  return u;
}

// ---------------------------------------------------------------------------

OnlineMpcPolicy::OnlineMpcPolicy(const LtiPair& continuous, MpcConfig config, TrimPoint trim)
    : config_(std::move(config)), trim_(std::move(trim))
{
  const Index d = continuous.a.rows();
  const Index m = continuous.b.cols();
  if (trim_.x.size() != d || trim_.u.size() != m) throw ValidationError("mpc: trim does not match the LTI pair");
  if (trim_.rate.size() == 0) trim_.rate = Vector::Zero(d);
  config_.validate(d, m);
  for (Index i = 0; i < m; ++i) {
    if (trim_.u(i) < config_.u_lo(i) || trim_.u(i) > config_.u_hi(i)) throw ValidationError("mpc: trim input violates the bounds");
  }
  discrete_ = discretize(continuous, config_.dt);

  const Index np = config_.prediction_steps();
  const Index nc = config_.control_steps();
  const Index nz = nc * m;
  const Matrix& ad = discrete_.a;
  const Matrix& bd = discrete_.b;
  auto block_of = [&](Index k) { return std::min(k, nc - 1); };

  Matrix hess = Matrix::Zero(nz, nz);
  Matrix lin = Matrix::Zero(nz, d);
  // Prediction dx_k = phi * dx0 + gam * z, advanced one step at a time.
  Matrix phi = Matrix::Identity(d, d);
  Matrix gam = Matrix::Zero(d, nz);
  Matrix ey_phi(np, d), ey_gam(np, nz);
  for (Index k = 1; k <= np; ++k) {
    Matrix next = ad * gam;
    next.middleCols(block_of(k - 1) * m, m) += bd;
    gam = std::move(next);
    phi = ad * phi;
    hess.noalias() += gam.transpose() * config_.q * gam;
    lin.noalias() += gam.transpose() * config_.q * phi;
    if (config_.ey_index >= 0) {
      ey_phi.row(k - 1) = phi.row(config_.ey_index);
      ey_gam.row(k - 1) = gam.row(config_.ey_index);
    }
  }
  for (Index k = 0; k < np; ++k) hess.block(block_of(k) * m, block_of(k) * m, m, m) += config_.r;
  const Matrix slew = config_.s / (config_.dt * config_.dt);
  for (Index k = 1; k < nc; ++k) {
    const Index a = k * m, b = (k - 1) * m;
    hess.block(a, a, m, m) += slew;
    hess.block(b, b, m, m) += slew;
    hess.block(a, b, m, m) -= slew;
    hess.block(b, a, m, m) -= slew;
  }
  hess = 0.5 * (hess + hess.transpose());

  const Index window_rows = config_.ey_index >= 0 ? 2 * np : 0;
  const Index rows = 2 * nz + window_rows;
  Matrix g = Matrix::Zero(rows, nz);
  bound_base_ = Vector::Zero(rows);
  bound_map_ = Matrix::Zero(rows, d);
  for (Index k = 0; k < nc; ++k) {
    for (Index i = 0; i < m; ++i) {
      const Index col = k * m + i;
      g(2 * col, col) = 1.0;
      bound_base_(2 * col) = config_.u_hi(i) - trim_.u(i);
      g(2 * col + 1, col) = -1.0;
      bound_base_(2 * col + 1) = -(config_.u_lo(i) - trim_.u(i));
    }
  }
  if (window_rows) {
    const double ref = trim_.x(config_.ey_index);
    for (Index k = 0; k < np; ++k) {
      const Index r0 = 2 * nz + 2 * k;
      g.row(r0) = ey_gam.row(k);
      bound_base_(r0) = config_.ey_center + config_.ey_halfwidth - ref;
      bound_map_.row(r0) = -ey_phi.row(k);
      g.row(r0 + 1) = -ey_gam.row(k);
      bound_base_(r0 + 1) = -(config_.ey_center - config_.ey_halfwidth - ref);
      bound_map_.row(r0 + 1) = ey_phi.row(k);
    }
  }

  linear_map_ = lin;
  qp_ = std::make_shared<const DenseQp>(hess, g);
  unconstrained_gain_.resize(nz, d);
  for (Index j = 0; j < d; ++j) unconstrained_gain_.col(j) = qp_->unconstrained(linear_map_.col(j));
}

Vector OnlineMpcPolicy::unconstrained_moves(const Vector& dx0) const { return unconstrained_gain_ * dx0; }

Vector OnlineMpcPolicy::evaluate(const Vector& x, double t, EvalInfo* info, Matrix* jacobian) const
{
  const Index m = input_dim();
  if (x.size() != dim()) throw ValidationError("mpc: state dimension mismatch");
  const Vector dx0 = x - trim_.reference(t);
  const Vector f = linear_map_ * dx0;
  const Vector h = bound_base_ + bound_map_ * dx0;

  QpResult res;
  Vector du;
  Matrix jac;
  std::vector<char> pinned(static_cast<std::size_t>(m), 0);
  if (qp_->try_solve(f, h, res) == QpStatus::optimal) {
    du = res.z.head(m);
    if (jacobian) jac = qp_->sensitivity(res, linear_map_, bound_map_).topRows(m);
    // Active first-move bounds hold exactly.
    for (Index row : res.active) {
      if (row < 2 * m) {
        const Index i = row / 2;
        du(i) = bound_base_(row) * (row % 2 == 0 ? 1.0 : -1.0);
        pinned[static_cast<std::size_t>(i)] = 1;
      }
    }
  } else {
    if (info) info->policy_fallback = true;
    du = unconstrained_gain_.topRows(m) * dx0;
    if (jacobian) jac = unconstrained_gain_.topRows(m);
  }

  Vector u = trim_.u + du;
  for (Index i = 0; i < m; ++i) {
    const double clamped = std::clamp(u(i), config_.u_lo(i), config_.u_hi(i));
    if (clamped != u(i) || pinned[static_cast<std::size_t>(i)]) {
      if (jacobian) jac.row(i).setZero();
    }
    u(i) = clamped;
  }
  if (jacobian) *jacobian = std::move(jac);
  return u;
}

// ---------------------------------------------------------------------------

Index policy_input_dim(const FeedbackPolicy& policy)
{
  return std::visit(
      [](const auto& p) -> Index {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, std::shared_ptr<const OnlineMpcPolicy>>) {
          return p->input_dim();
        } else {
          return p.input_dim();
        }
      },
      policy);
}

Vector evaluate_policy(const FeedbackPolicy& policy, const Vector& x, double t, EvalInfo* info, Matrix* jacobian)
{
  if (const auto* ol = std::get_if<OpenLoopSchedule>(&policy)) {
    if (jacobian) *jacobian = Matrix::Zero(ol->input_dim(), x.size());
    return ol->evaluate(t);
  }
  if (const auto* pwa = std::get_if<PwaPolicy>(&policy)) {
    const Index j = pwa->select(x, info);
    const PwaRegion& region = pwa->regions()[static_cast<std::size_t>(j)];
    if (jacobian) *jacobian = region.gain;
    return region.gain * x + region.offset;
  }
  const auto& mpc = std::get<std::shared_ptr<const OnlineMpcPolicy>>(policy);
  return mpc->evaluate(x, t, info, jacobian);
}

ClosedLoopField::ClosedLoopField(Plant plant, FeedbackPolicy policy, DivergenceMode mode)
    : plant_(std::move(plant)), policy_(std::move(policy)), mode_(mode)
{
  std::visit([](const auto& p) { p.validate(); }, plant_);
  if (policy_input_dim(policy_) != input_dim(plant_)) throw ValidationError("closed loop: policy and plant input sizes differ");
  if (const auto* pwa = std::get_if<PwaPolicy>(&policy_)) {
    if (pwa->dim() != state_dim(plant_)) throw ValidationError("closed loop: PWA policy state size differs from the plant");
  }
  if (const auto* mpc = std::get_if<std::shared_ptr<const OnlineMpcPolicy>>(&policy_)) {
    if (!*mpc || (*mpc)->dim() != state_dim(plant_)) throw ValidationError("closed loop: MPC policy state size differs from the plant");
  }
  if (const auto* ol = std::get_if<OpenLoopSchedule>(&policy_)) {
    for (const auto& c : ol->components) c.validate();
  }
}

Vector ClosedLoopField::evaluate(const Vector& x, double t, EvalInfo* info) const
{
  return plant_rhs(plant_, x, evaluate_policy(policy_, x, t, info));
}

std::optional<double> ClosedLoopField::analytic_divergence(const Vector& x, double) const
{
  if (mode_ == DivergenceMode::finite_difference) return std::nullopt;
  const bool open_loop = std::holds_alternative<OpenLoopSchedule>(policy_);
  if (open_loop && std::holds_alternative<KinematicParams>(plant_)) return 0.0;
  if (const auto* a = std::get_if<AffinePlant>(&plant_)) {
    if (open_loop) return a->a.trace();
    if (const auto* pwa = std::get_if<PwaPolicy>(&policy_)) {
      const Index j = pwa->select(x);
      return (a->a + a->b * pwa->regions()[static_cast<std::size_t>(j)].gain).trace();
    }
  }
  return std::nullopt;
}

double ClosedLoopField::divergence(const Vector& x, double t, EvalInfo* info) const
{
  double div = 0.0;
  evaluate_with_divergence(x, t, div, info);
  return div;
}

Vector ClosedLoopField::evaluate_with_divergence(const Vector& x, double t, double& div, EvalInfo* info) const
{
  if (mode_ == DivergenceMode::finite_difference) {
    Vector g = evaluate(x, t, info);
    div = finite_difference_divergence(*this, x, t, kDivergenceStep, info);
    return g;
  }
  if (const auto d = analytic_divergence(x, t)) {
    div = *d;
    return evaluate(x, t, info);
  }
  Matrix gain;
  const Vector u = evaluate_policy(policy_, x, t, info, &gain);
  Matrix jx, ju;
  plant_jacobians(plant_, x, u, jx, ju);
  div = jx.trace() + (ju * gain).trace();
  return plant_rhs(plant_, x, u);
}

}  // namespace lreach
