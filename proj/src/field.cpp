#include "lreach/field.hpp"

#include <algorithm>
#include <cmath>

namespace lreach {

double VectorField::divergence(const Vector& x, double t, EvalInfo* info) const
{
  if (auto d = analytic_divergence(x, t)) return *d;
  return finite_difference_divergence(*this, x, t, kDivergenceStep, info);
}

Vector VectorField::evaluate_with_divergence(const Vector& x, double t, double& div, EvalInfo* info) const
{
  Vector g = evaluate(x, t, info);
  div = divergence(x, t, info);
  return g;
}

double finite_difference_divergence(const VectorField& field, const Vector& x, double t, double eps, EvalInfo* info)
{
  const Index d = field.dim();
  if (x.size() != d) throw ValidationError("divergence: state dimension mismatch");
  double sum = 0.0;
  Vector probe = x;
  for (Index k = 0; k < d; ++k) {
    const double h = eps * std::max(1.0, std::abs(x(k)));
    probe(k) = x(k) + h;
    const double up = field.evaluate(probe, t, info)(k);
    probe(k) = x(k) - h;
    const double down = field.evaluate(probe, t, info)(k);
    probe(k) = x(k);
    sum += (up - down) / (2.0 * h);
  }
  return sum;
}

double divergence(const VectorField& field, const Vector& x, double t, DivergenceMode mode)
{
  if (mode == DivergenceMode::finite_difference) return finite_difference_divergence(field, x, t);
  if (auto d = field.analytic_divergence(x, t)) return *d;
  throw ValidationError("divergence: field has no analytic divergence");
}

AffineField::AffineField(Matrix a, Vector b) : a_(std::move(a)), b_(std::move(b))
{
  if (a_.rows() != a_.cols() || b_.size() != a_.rows()) throw ValidationError("affine field: inconsistent shapes");
}

AffineField::AffineField(Matrix a) : AffineField(a, Vector::Zero(a.rows())) {}

Vector AffineField::evaluate(const Vector& x, double, EvalInfo*) const { return a_ * x + b_; }

std::optional<double> AffineField::analytic_divergence(const Vector&, double) const { return a_.trace(); }

FunctionField::FunctionField(Index dim, Rhs rhs, Div div) : dim_(dim), rhs_(std::move(rhs)), div_(std::move(div)) {}

Vector FunctionField::evaluate(const Vector& x, double t, EvalInfo*) const { return rhs_(x, t); }

std::optional<double> FunctionField::analytic_divergence(const Vector& x, double t) const
{
  if (!div_) return std::nullopt;
  return div_(x, t);
}

}  // namespace lreach
