#pragma once

/**
 * @file
 * @brief Small dense strictly convex QP: min 1/2 z'Hz + f'z  s.t.  G z <= h.
 *
 * Dual active-set method (Goldfarb-Idnani). The Hessian factorization and
 * L^{-1} G' are computed once per DenseQp, so repeated solves with the same
 * (H, G) and varying (f, h) only pay for the active-set iterations. This is
 * the situation of the online MPC policy.
 */

#include "lreach/core.hpp"

#include <vector>

namespace lreach {

struct QpResult
{
  Vector z;
  Vector multipliers;          ///< one per constraint row, >= 0
  std::vector<Index> active;   ///< rows in the final working set
  int iterations = 0;
  double objective = 0.0;
};

/// The constraint set is empty; `row()` is the constraint that could not be added.
class QpInfeasible : public NumericalError
{
public:
  QpInfeasible(const std::string& what, Index row) : NumericalError(what), row_(row) {}
  Index row() const { return row_; }

private:
  Index row_;
};

enum class QpStatus
{
  optimal,
  infeasible,
  max_iterations,
};

class DenseQp
{
public:
  DenseQp(Matrix hessian, Matrix constraints);

  Index variables() const { return hessian_.rows(); }
  Index rows() const { return constraints_.rows(); }

  /// Throws QpInfeasible or NumericalError (iteration limit).
  QpResult solve(const Vector& linear, const Vector& bounds) const;

  /// Non-throwing variant; on infeasibility `certificate` receives the row.
  QpStatus try_solve(const Vector& linear, const Vector& bounds, QpResult& out, Index* certificate = nullptr) const;

  /// -H^{-1} f
  Vector unconstrained(const Vector& linear) const;

  /**
   * @brief Derivative of the minimizer w.r.t. a parameter theta, holding the
   * working set of `result` fixed, when f = f0 + F theta and h = h0 + E theta.
   *
   * Returns dz/dtheta (variables x params).
   */
  Matrix sensitivity(const QpResult& result, const Matrix& linear_jac, const Matrix& bound_jac) const;

  const Matrix& hessian() const { return hessian_; }
  const Matrix& constraints() const { return constraints_; }

private:
  Vector solve_upper(const Vector& v) const;   // L^{-T} v
  Vector solve_lower(const Vector& v) const;   // L^{-1} v

  Matrix hessian_;
  Matrix constraints_;
  Matrix chol_;       // H = L L'
  Matrix scaled_;     // L^{-1} G'  (variables x rows)
  Vector row_norms_;
};

/// One-shot convenience wrapper around DenseQp.
QpResult qp_solve(const Matrix& hessian, const Vector& linear, const Matrix& constraints, const Vector& bounds);

}  // namespace lreach
