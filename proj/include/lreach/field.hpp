#pragma once

#include "lreach/core.hpp"

#include <functional>
#include <optional>

namespace lreach {

/// Per-evaluation annotations raised by a field (policy fallbacks).
struct EvalInfo
{
  bool policy_fallback = false;
};

enum class DivergenceMode
{
  analytic,
  finite_difference,
};

/// Relative step of the central-difference divergence stencil.
inline constexpr double kDivergenceStep = 1e-5;

/**
 * @brief Time-varying vector field g(x, t).
 *
 * Implementations must be immutable and reentrant: many propagation workers
 * evaluate the same field concurrently.
 */
class VectorField
{
public:
  virtual ~VectorField() = default;

  virtual Index dim() const = 0;
  virtual Vector evaluate(const Vector& x, double t, EvalInfo* info = nullptr) const = 0;

  /// Closed-form divergence when the field has one.
  virtual std::optional<double> analytic_divergence(const Vector& /*x*/, double /*t*/) const { return std::nullopt; }

  /// Divergence used by the propagator: analytic when available, otherwise
  /// central differences. Subclasses may override with a cheaper exact route.
  virtual double divergence(const Vector& x, double t, EvalInfo* info = nullptr) const;

  /// g(x, t) and its divergence in one call; fields whose two evaluations
  /// share expensive work (a policy QP) override this.
  virtual Vector evaluate_with_divergence(const Vector& x, double t, double& div, EvalInfo* info = nullptr) const;
};

/// sum_k [g_k(x + h_k e_k) - g_k(x - h_k e_k)] / (2 h_k), h_k = eps * max(1, |x_k|).
double finite_difference_divergence(const VectorField& field, const Vector& x, double t,
                                    double eps = kDivergenceStep, EvalInfo* info = nullptr);

/// Throws ValidationError in analytic mode when the field has no closed form.
double divergence(const VectorField& field, const Vector& x, double t, DivergenceMode mode);

/// g(x, t) = A x + b; divergence trace(A).
class AffineField : public VectorField
{
public:
  AffineField(Matrix a, Vector b);
  explicit AffineField(Matrix a);

  Index dim() const override { return a_.rows(); }
  Vector evaluate(const Vector& x, double t, EvalInfo* info = nullptr) const override;
  std::optional<double> analytic_divergence(const Vector& x, double t) const override;

  const Matrix& matrix() const { return a_; }

private:
  Matrix a_;
  Vector b_;
};

/// Field from callables; handy for tests and one-off benchmarks.
class FunctionField : public VectorField
{
public:
  using Rhs = std::function<Vector(const Vector&, double)>;
  using Div = std::function<double(const Vector&, double)>;

  FunctionField(Index dim, Rhs rhs, Div div = nullptr);

  Index dim() const override { return dim_; }
  Vector evaluate(const Vector& x, double t, EvalInfo* info = nullptr) const override;
  std::optional<double> analytic_divergence(const Vector& x, double t) const override;

private:
  Index dim_;
  Rhs rhs_;
  Div div_;
};

}  // namespace lreach
