#include "lreach/qp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace lreach {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Least-squares coefficients of `target` in the span of the working-set columns.
Vector project_coefficients(const Matrix& basis, const Vector& target)
{
  if (basis.cols() == 0) return Vector();
  return basis.colPivHouseholderQr().solve(target);
}

}  // namespace

DenseQp::DenseQp(Matrix hessian, Matrix constraints) : hessian_(std::move(hessian)), constraints_(std::move(constraints))
{
  const Index n = hessian_.rows();
  if (hessian_.cols() != n) throw ValidationError("qp: Hessian is not square");
  if (constraints_.rows() > 0 && constraints_.cols() != n) throw ValidationError("qp: constraint matrix has wrong width");
  if (constraints_.rows() == 0) constraints_.resize(0, n);
  chol_ = cholesky(0.5 * (hessian_ + hessian_.transpose()));
  scaled_ = chol_.triangularView<Eigen::Lower>().solve(constraints_.transpose());
  row_norms_ = constraints_.rowwise().norm();
}

Vector DenseQp::solve_lower(const Vector& v) const { return chol_.triangularView<Eigen::Lower>().solve(v); }

Vector DenseQp::solve_upper(const Vector& v) const { return chol_.transpose().triangularView<Eigen::Upper>().solve(v); }

Vector DenseQp::unconstrained(const Vector& linear) const { return -solve_upper(solve_lower(linear)); }

QpStatus DenseQp::try_solve(const Vector& linear, const Vector& bounds, QpResult& out, Index* certificate) const
{
  const Index n = variables();
  const Index m = rows();
  if (linear.size() != n || bounds.size() != m) throw ValidationError("qp: vector sizes do not match the problem");

  const Vector q = solve_lower(linear);
  Vector z = -solve_upper(q);

  std::vector<Index> active;
  std::vector<double> mult;   // multipliers of the working set, same order as `active`
  std::vector<char> in_set(static_cast<std::size_t>(m), 0);

  const int max_iter = static_cast<int>(10 * (n + m) + 100);
  int iter = 0;
  int stalled = 0;
  bool bland = false;

  auto tolerance = [&](Index i) { return 1e-10 * (1.0 + std::abs(bounds(i)) + row_norms_(i) * z.cwiseAbs().maxCoeff()); };

  while (true) {
    // Pick a violated constraint: most violated, or lowest index once stalling is detected.
    Index p = -1;
    double worst = 0.0;
    for (Index i = 0; i < m; ++i) {
      if (in_set[static_cast<std::size_t>(i)]) continue;
      const double viol = constraints_.row(i).dot(z) - bounds(i);
      if (viol <= tolerance(i)) continue;
      const double score = viol / std::max(row_norms_(i), 1e-300);
      if (bland) {
        p = i;
        break;
      }
      if (score > worst) {
        worst = score;
        p = i;
      }
    }
    if (p < 0) break;

    double up = 0.0;   // multiplier of the candidate p
    while (true) {
      if (++iter > max_iter) {
        out.iterations = iter;
        return QpStatus::max_iterations;
      }
      const Index q_size = static_cast<Index>(active.size());
      Matrix basis(n, q_size);
      for (Index j = 0; j < q_size; ++j) basis.col(j) = scaled_.col(active[static_cast<std::size_t>(j)]);
      const Vector wp = scaled_.col(p);
      const Vector r = project_coefficients(basis, wp);
      const Vector res = q_size > 0 ? Vector(wp - basis * r) : wp;
      const double nres2 = res.squaredNorm();

      double t1 = kInf;
      Index drop = -1;
      for (Index j = 0; j < q_size; ++j) {
        if (r(j) > 1e-14) {
          const double ratio = mult[static_cast<std::size_t>(j)] / r(j);
          if (ratio < t1) {
            t1 = ratio;
            drop = j;
          }
        }
      }
      const bool dependent = nres2 <= 1e-14 * std::max(1.0, wp.squaredNorm());
      const double viol = constraints_.row(p).dot(z) - bounds(p);
      const double t2 = dependent ? kInf : std::max(0.0, viol) / nres2;

      if (t1 == kInf && t2 == kInf) {
        if (certificate) *certificate = p;
        out.iterations = iter;
        return QpStatus::infeasible;
      }

      const double t = std::min(t1, t2);
      if (t == 0.0) {
        if (++stalled > 5) bland = true;
      }
      if (t2 < kInf) z -= t * solve_upper(res);
      for (Index j = 0; j < q_size; ++j) mult[static_cast<std::size_t>(j)] -= t * r(j);
      up += t;

      if (t2 <= t1) {
        active.push_back(p);
        mult.push_back(up);
        in_set[static_cast<std::size_t>(p)] = 1;
        break;
      }
      in_set[static_cast<std::size_t>(active[static_cast<std::size_t>(drop)])] = 0;
      active.erase(active.begin() + drop);
      mult.erase(mult.begin() + drop);
    }
  }

  // Polish: exact solution of the equality-constrained problem on the final working set.
  const Index q_size = static_cast<Index>(active.size());
  Vector lambda_active(q_size);
  for (Index j = 0; j < q_size; ++j) lambda_active(j) = mult[static_cast<std::size_t>(j)];
  if (q_size > 0) {
    Matrix basis(n, q_size);
    Vector rhs(q_size);
    for (Index j = 0; j < q_size; ++j) {
      const Index row = active[static_cast<std::size_t>(j)];
      basis.col(j) = scaled_.col(row);
      rhs(j) = bounds(row);
    }
    const Matrix gram = basis.transpose() * basis;
    Eigen::LDLT<Matrix> ldlt(gram);
    const Vector lam = -ldlt.solve(rhs + basis.transpose() * q);
    const Vector zp = -solve_upper(q + basis * lam);
    bool ok = lam.allFinite() && zp.allFinite() && lam.minCoeff() >= -1e-9 * (1.0 + lam.cwiseAbs().maxCoeff());
    if (ok) {
      for (Index i = 0; i < m && ok; ++i) {
        if (constraints_.row(i).dot(zp) - bounds(i) > 1e-9 * (1.0 + std::abs(bounds(i)))) ok = false;
      }
    }
    if (ok) {
      z = zp;
      lambda_active = lam.cwiseMax(0.0);
    }
  }

  out.z = z;
  out.multipliers = Vector::Zero(m);
  for (Index j = 0; j < q_size; ++j) out.multipliers(active[static_cast<std::size_t>(j)]) = std::max(0.0, lambda_active(j));
  out.active = active;
  out.iterations = iter;
  out.objective = 0.5 * z.dot(hessian_ * z) + linear.dot(z);
  return QpStatus::optimal;
}

QpResult DenseQp::solve(const Vector& linear, const Vector& bounds) const
{
  QpResult result;
  Index row = -1;
  switch (try_solve(linear, bounds, result, &row)) {
    case QpStatus::optimal:
      return result;
    case QpStatus::infeasible: {
      std::ostringstream os;
      os << "qp: infeasible constraints (certificate row " << row << ")";
      throw QpInfeasible(os.str(), row);
    }
    case QpStatus::max_iterations:
      break;
  }
  throw NumericalError("qp: iteration limit reached");
}

Matrix DenseQp::sensitivity(const QpResult& result, const Matrix& linear_jac, const Matrix& bound_jac) const
{
  const Index n = variables();
  const Index params = linear_jac.cols();
  Matrix qf(n, params);
  for (Index k = 0; k < params; ++k) qf.col(k) = solve_lower(linear_jac.col(k));
  const Index q_size = static_cast<Index>(result.active.size());
  Matrix inner = qf;
  if (q_size > 0) {
    Matrix basis(n, q_size);
    Matrix db(q_size, params);
    for (Index j = 0; j < q_size; ++j) {
      const Index row = result.active[static_cast<std::size_t>(j)];
      basis.col(j) = scaled_.col(row);
      db.row(j) = bound_jac.row(row);
    }
    const Matrix gram = basis.transpose() * basis;
    const Matrix dlam = -gram.ldlt().solve(db + basis.transpose() * qf);
    inner += basis * dlam;
  }
  Matrix dz(n, params);
  for (Index k = 0; k < params; ++k) dz.col(k) = -solve_upper(inner.col(k));
  return dz;
}

QpResult qp_solve(const Matrix& hessian, const Vector& linear, const Matrix& constraints, const Vector& bounds)
{
  return DenseQp(hessian, constraints).solve(linear, bounds);
}

}  // namespace lreach
