#include "lreach/transport.hpp"

#include "lreach/log.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>

namespace lreach {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
// exp(-690) is still a normal double; beyond that kernels are applied in log form.
constexpr double kMatmulLimit = 690.0;

Matrix squared_distances(const Matrix& a, const Matrix& b)
{
  const Vector na = a.rowwise().squaredNorm();
  const Vector nb = b.rowwise().squaredNorm();
  Matrix c = (-2.0 * a * b.transpose()).colwise() + na;
  c.rowwise() += nb.transpose();
  return c.cwiseMax(0.0);
}

/// out(o, c) = log sum_in exp(logk(o, in) + l(in, c)), with -inf entries allowed in l.
Matrix lse_apply(const Matrix& logk, const Matrix& l)
{
  Matrix out(logk.rows(), l.cols());
  for (Index c = 0; c < l.cols(); ++c) {
    for (Index o = 0; o < logk.rows(); ++o) {
      double m = kNegInf;
      for (Index i = 0; i < l.rows(); ++i) m = std::max(m, logk(o, i) + l(i, c));
      if (m == kNegInf) {
        out(o, c) = kNegInf;
        continue;
      }
      double s = 0.0;
      for (Index i = 0; i < l.rows(); ++i) s += std::exp(logk(o, i) + l(i, c) - m);
      out(o, c) = m + std::log(s);
    }
  }
  return out;
}

/// Column-wise log-sum-exp of a matrix.
Vector col_lse(const Matrix& a)
{
  Vector out(a.cols());
  for (Index j = 0; j < a.cols(); ++j) {
    const double m = a.col(j).maxCoeff();
    out(j) = m == kNegInf ? kNegInf : m + std::log((a.col(j).array() - m).exp().sum());
  }
  return out;
}

std::vector<Index> positive_support(const Vector& masses)
{
  std::vector<Index> idx;
  for (Index i = 0; i < masses.size(); ++i) {
    if (masses(i) > 0.0) idx.push_back(i);
  }
  return idx;
}

/// Gibbs kernel exp(-|x - y|^2 / eps) on a support, applied to (log-)vectors.
class GibbsKernel
{
public:
  GibbsKernel(const DiscreteMeasure& support, double eps) : n_(support.size())
  {
    Index cells = 1;
    for (const Vector& a : support.axes) cells *= a.size();
    separable_ = !support.axes.empty() && support.axes.size() <= 2 && cells == n_;
    double max_cost = 0.0;
    if (separable_) {
      for (const Vector& a : support.axes) {
        const Matrix c = squared_distances(a, a);
        max_cost += c.maxCoeff();
        axis_log_.push_back(-c / eps);
      }
    } else {
      const Matrix c = squared_distances(support.points, support.points);
      max_cost = c.maxCoeff();
      dense_log_ = -c / eps;
    }
    log_mode_ = max_cost / eps >= kMatmulLimit;
    if (!log_mode_) {
      if (separable_) {
        for (const Matrix& l : axis_log_) axis_.push_back(l.array().exp().matrix());
      } else {
        dense_ = dense_log_.array().exp().matrix();
      }
    }
  }

  bool log_mode() const { return log_mode_; }

  Vector apply(const Vector& v) const
  {
    if (!separable_) return dense_ * v;
    if (axis_.size() == 1) return axis_[0] * v;
    const Index n1 = axis_[0].rows(), n2 = axis_[1].rows();
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMajor> m(v.data(), n1, n2);
    RowMajor r = axis_[0] * m * axis_[1].transpose();
    return Eigen::Map<const Vector>(r.data(), n_);
  }

  Vector apply_log(const Vector& lv) const
  {
    if (!separable_) return lse_apply(dense_log_, lv);
    if (axis_log_.size() == 1) return lse_apply(axis_log_[0], lv);
    const Index n1 = axis_log_[0].rows(), n2 = axis_log_[1].rows();
    // l(a, b) with b fastest; transform the b axis, then the a axis.
    Matrix l(n2, n1);
    for (Index a = 0; a < n1; ++a) l.col(a) = lv.segment(a * n2, n2);
    const Matrix t = lse_apply(axis_log_[1], l);    // n2 x n1
    const Matrix u = lse_apply(axis_log_[0], t.transpose());   // n1 x n2
    Vector out(n_);
    for (Index a = 0; a < n1; ++a) out.segment(a * n2, n2) = u.row(a).transpose();
    return out;
  }

private:
  Index n_;
  bool separable_ = false;
  bool log_mode_ = false;
  std::vector<Matrix> axis_log_, axis_;
  Matrix dense_log_, dense_;
};

double total_variation(const Vector& a, const Vector& b) { return 0.5 * (a - b).cwiseAbs().sum(); }

}  // namespace

void DiscreteMeasure::validate() const
{
  if (points.rows() < 1) throw ValidationError("measure: empty support");
  if (masses.size() != points.rows()) throw ValidationError("measure: mass count differs from point count");
  if (!points.allFinite() || !masses.allFinite()) throw ValidationError("measure: non-finite entries");
  if ((masses.array() < 0.0).any()) throw ValidationError("measure: negative mass");
  if (std::abs(masses.sum() - 1.0) > 1e-12 * std::max<double>(1.0, static_cast<double>(masses.size()))) {
    throw ValidationError("measure: masses do not sum to 1");
  }
}

DiscreteMeasure grid_to_measure(const DensityGrid& grid)
{
  DiscreteMeasure m;
  m.points.resize(grid.cells(), grid.rank());
  m.masses.resize(grid.cells());
  for (Index c = 0; c < grid.cells(); ++c) {
    m.points.row(c) = grid.center(c).transpose();
    m.masses(c) = std::max(0.0, grid.values(c)) * grid.cell_volume(c);
  }
  const double total = m.masses.sum();
  if (!(total > 0.0)) throw ValidationError("measure: grid carries no mass");
  m.masses /= total;
  for (Index a = 0; a < grid.rank(); ++a) {
    const Vector& e = grid.edges[static_cast<std::size_t>(a)];
    m.axes.push_back(0.5 * (e.head(e.size() - 1) + e.tail(e.size() - 1)));
  }
  return m;
}

TransportPlan sinkhorn(const DiscreteMeasure& mu, const DiscreteMeasure& nu, const SinkhornOptions& options)
{
  mu.validate();
  nu.validate();
  if (mu.points.cols() != nu.points.cols()) throw ValidationError("sinkhorn: supports live in different dimensions");
  if (!(options.eps > 0.0)) throw ValidationError("sinkhorn: eps must be positive");
  if (options.max_iter < 1) throw ValidationError("sinkhorn: max_iter must be positive");

  const std::vector<Index> ri = positive_support(mu.masses);
  const std::vector<Index> ci = positive_support(nu.masses);
  const Index n = static_cast<Index>(ri.size()), m = static_cast<Index>(ci.size());
  Matrix x(n, mu.points.cols()), y(m, nu.points.cols());
  Vector a(n), b(m);
  for (Index i = 0; i < n; ++i) {
    x.row(i) = mu.points.row(ri[static_cast<std::size_t>(i)]);
    a(i) = mu.masses(ri[static_cast<std::size_t>(i)]);
  }
  for (Index j = 0; j < m; ++j) {
    y.row(j) = nu.points.row(ci[static_cast<std::size_t>(j)]);
    b(j) = nu.masses(ci[static_cast<std::size_t>(j)]);
  }
  const Matrix cost = squared_distances(x, y);
  const double eps = options.eps;
  const Vector log_a = a.array().log();
  const Vector log_b = b.array().log();

  Vector f = Vector::Zero(n), g = Vector::Zero(m);
  if (options.warm_f && options.warm_f->size() == mu.size()) {
    for (Index i = 0; i < n; ++i) f(i) = (*options.warm_f)(ri[static_cast<std::size_t>(i)]);
  }
  if (options.warm_g && options.warm_g->size() == nu.size()) {
    for (Index j = 0; j < m; ++j) g(j) = (*options.warm_g)(ci[static_cast<std::size_t>(j)]);
  }

  TransportPlan out;
  out.eps = eps;
  Matrix logp(n, m);
  for (Index it = 1; it <= options.max_iter; ++it) {
    // g update makes the column marginals exact, f update the row marginals.
    Matrix s = ((-cost).colwise() + (f + eps * log_a)) / eps;
    g = -eps * col_lse(s);
    s = ((-cost.transpose()).colwise() + (g + eps * log_b)) / eps;
    f = -eps * col_lse(s);
    out.iterations = it;
    if (it % 10 == 0 || it == options.max_iter) {
      logp = ((-cost).colwise() + f).rowwise() + g.transpose();
      logp /= eps;
      logp.colwise() += log_a;
      logp.rowwise() += log_b.transpose();
      const Vector cols = logp.array().exp().colwise().sum().transpose();
      out.violation = (cols - b).cwiseAbs().maxCoeff();
      if (out.violation <= options.tol) {
        out.converged = true;
        break;
      }
    }
  }
  logp = ((-cost).colwise() + f).rowwise() + g.transpose();
  logp /= eps;
  logp.colwise() += log_a;
  logp.rowwise() += log_b.transpose();
  const Matrix p = logp.array().exp();
  out.violation = std::max((p.rowwise().sum() - a).cwiseAbs().maxCoeff(), (p.colwise().sum().transpose() - b).cwiseAbs().maxCoeff());

  out.plan = Matrix::Zero(mu.size(), nu.size());
  out.f = Vector::Zero(mu.size());
  out.g = Vector::Zero(nu.size());
  for (Index i = 0; i < n; ++i) {
    out.f(ri[static_cast<std::size_t>(i)]) = f(i);
    for (Index j = 0; j < m; ++j) out.plan(ri[static_cast<std::size_t>(i)], ci[static_cast<std::size_t>(j)]) = p(i, j);
  }
  for (Index j = 0; j < m; ++j) out.g(ci[static_cast<std::size_t>(j)]) = g(j);
  out.cost = (p.array() * cost.array()).sum();
  return out;
}

std::vector<double> default_eps_schedule()
{
  std::vector<double> s;
  for (double e = 1.0; e > 1e-3; e *= 0.5) s.push_back(e);
  s.push_back(1e-3);
  return s;
}

double wasserstein2(const DiscreteMeasure& mu, const DiscreteMeasure& nu, const std::vector<double>& eps_schedule)
{
  if (eps_schedule.empty()) throw ValidationError("wasserstein2: empty eps schedule");
  TransportPlan plan;
  for (double eps : eps_schedule) {
    SinkhornOptions o;
    o.eps = eps;
    if (plan.f.size() > 0) {
      o.warm_f = &plan.f;
      o.warm_g = &plan.g;
    }
    plan = sinkhorn(mu, nu, o);
  }
  if (!plan.converged) {
    log::warn("wasserstein2: sinkhorn stopped at violation " + std::to_string(plan.violation));
  }
  return std::sqrt(std::max(0.0, plan.cost));
}

double gaussian_w2_oracle(const GaussianSpec& a, const GaussianSpec& b)
{
  if (a.dim() != b.dim()) throw ValidationError("gaussian W2: dimensions differ");
  auto sqrtm = [](const Matrix& m) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (m + m.transpose()));
    return Matrix(es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                  es.eigenvectors().transpose());
  };
  const Matrix sa = sqrtm(a.covariance());
  const Matrix cross = sqrtm(sa * b.covariance() * sa);
  const double bures = (a.covariance() + b.covariance() - 2.0 * cross).trace();
  return std::sqrt(std::max(0.0, (a.mean() - b.mean()).squaredNorm() + bures));
}

void BarycenterSpec::validate() const
{
  if (inputs.empty()) throw ValidationError("barycenter: no inputs");
  if (lambdas.size() != static_cast<Index>(inputs.size())) throw ValidationError("barycenter: one lambda per input required");
  if ((lambdas.array() < 0.0).any() || std::abs(lambdas.sum() - 1.0) > 1e-12) {
    throw ValidationError("barycenter: lambdas must be nonnegative and sum to 1");
  }
  if (eps < 0.0) throw ValidationError("barycenter: eps must be nonnegative");
  if (max_iter < 1 || !(tol > 0.0)) throw ValidationError("barycenter: max_iter and tol must be positive");
  for (const DiscreteMeasure& m : inputs) {
    m.validate();
    if (m.points.rows() != inputs[0].points.rows() || m.points.cols() != inputs[0].points.cols() ||
        (m.points - inputs[0].points).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + inputs[0].points.cwiseAbs().maxCoeff())) {
      throw ValidationError("barycenter: inputs must share one support");
    }
  }
}

BarycenterResult barycenter(const BarycenterSpec& spec)
{
  spec.validate();
  const std::size_t k = spec.inputs.size();
  const DiscreteMeasure& support = spec.inputs[0];
  BarycenterResult out;
  for (std::size_t i = 0; i < k; ++i) {
    if (spec.lambdas(static_cast<Index>(i)) == 1.0) {
      out.measure = spec.inputs[i];
      out.converged = true;
      return out;
    }
  }
  double eps = spec.eps;
  if (eps == 0.0) {
    const Vector span = support.points.colwise().maxCoeff() - support.points.colwise().minCoeff();
    eps = 1e-2 * span.squaredNorm();
    if (!(eps > 0.0)) eps = 1e-2;
  }
  out.eps = eps;
  const GibbsKernel kernel(support, eps);
  const Index n = support.size();
  Vector b_prev = Vector::Constant(n, 1.0 / static_cast<double>(n));
  Vector b = b_prev;

  if (!kernel.log_mode()) {
    std::vector<Vector> v(k, Vector::Ones(n));
    std::vector<Vector> ktu(k);
    for (Index it = 1; it <= spec.max_iter; ++it) {
      Vector logb = Vector::Zero(n);
      for (std::size_t i = 0; i < k; ++i) {
        const Vector kv = kernel.apply(v[i]);
        Vector u(n);
        for (Index j = 0; j < n; ++j) u(j) = spec.inputs[i].masses(j) > 0.0 ? spec.inputs[i].masses(j) / kv(j) : 0.0;
        ktu[i] = kernel.apply(u);
        logb += spec.lambdas(static_cast<Index>(i)) * ktu[i].array().log().matrix();
      }
      b = logb.array().exp();
      for (std::size_t i = 0; i < k; ++i) {
        for (Index j = 0; j < n; ++j) v[i](j) = ktu[i](j) > 0.0 ? b(j) / ktu[i](j) : 0.0;
      }
      if (!b.allFinite() || !(b.sum() > 0.0)) throw NumericalError("barycenter: scalings left the floating-point range");
      b /= b.sum();
      out.iterations = it;
      out.change = total_variation(b, b_prev);
      b_prev = b;
      if (out.change <= spec.tol) {
        out.converged = true;
        break;
      }
    }
  } else {
    std::vector<Vector> lv(k, Vector::Zero(n));
    std::vector<Vector> lktu(k);
    std::vector<Vector> lp(k);
    for (std::size_t i = 0; i < k; ++i) {
      lp[i] = spec.inputs[i].masses.unaryExpr([](double m) { return m > 0.0 ? std::log(m) : kNegInf; });
    }
    for (Index it = 1; it <= spec.max_iter; ++it) {
      Vector logb = Vector::Zero(n);
      for (std::size_t i = 0; i < k; ++i) {
        const Vector lkv = kernel.apply_log(lv[i]);
        Vector lu(n);
        for (Index j = 0; j < n; ++j) lu(j) = lp[i](j) == kNegInf ? kNegInf : lp[i](j) - lkv(j);
        lktu[i] = kernel.apply_log(lu);
        const double lam = spec.lambdas(static_cast<Index>(i));
        if (lam > 0.0) logb += lam * lktu[i];
      }
      for (std::size_t i = 0; i < k; ++i) {
        for (Index j = 0; j < n; ++j) lv[i](j) = (lktu[i](j) == kNegInf || logb(j) == kNegInf) ? kNegInf : logb(j) - lktu[i](j);
      }
      const double top = logb.maxCoeff();
      b = (logb.array() - top).exp();
      b /= b.sum();
      out.iterations = it;
      out.change = total_variation(b, b_prev);
      b_prev = b;
      if (out.change <= spec.tol) {
        out.converged = true;
        break;
      }
    }
  }
  if (!out.converged) {
    log::warn("barycenter: stopped after " + std::to_string(out.iterations) + " iterations, TV change " +
              std::to_string(out.change));
  }
  out.measure.points = support.points;
  out.measure.axes = support.axes;
  out.measure.masses = b;
  return out;
}

std::vector<BarycenterResult> barycentric_trajectory(const std::vector<const CloudTrajectory*>& trajs,
                                                     const std::vector<Index>& dims,
                                                     const std::function<Vector(double)>& lambdas,
                                                     const BarycentricOptions& options)
{
  if (trajs.empty()) throw ValidationError("barycentric trajectory: no inputs");
  const std::size_t times = trajs[0]->clouds.size();
  for (const CloudTrajectory* t : trajs) {
    if (t->clouds.size() != times) throw ValidationError("barycentric trajectory: output grids differ");
    for (std::size_t k = 0; k < times; ++k) {
      if (t->clouds[k].time != trajs[0]->clouds[k].time) throw ValidationError("barycentric trajectory: output grids differ");
    }
  }
  if (options.bins.size() != dims.size()) throw ValidationError("barycentric trajectory: one bin count per coordinate required");

  std::vector<BarycenterResult> out(times);
  parallel_for(static_cast<Index>(times), options.workers, [&](Index kk) {
    const auto k = static_cast<std::size_t>(kk);
    const double t = trajs[0]->clouds[k].time;
    MarginalOptions mo;
    mo.bins = options.bins;
    for (Index d : dims) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (const CloudTrajectory* tr : trajs) {
        lo = std::min(lo, tr->clouds[k].states.col(d).minCoeff());
        hi = std::max(hi, tr->clouds[k].states.col(d).maxCoeff());
      }
      if (!(hi > lo)) throw ValidationError("barycentric trajectory: coordinate " + std::to_string(d) + " is constant");
      mo.range.emplace_back(lo, hi);
    }
    BarycenterSpec spec;
    for (const CloudTrajectory* tr : trajs) spec.inputs.push_back(grid_to_measure(marginal(tr->clouds[k], dims, mo)));
    spec.lambdas = lambdas(t);
    spec.eps = options.eps;
    spec.max_iter = options.max_iter;
    spec.tol = options.tol;
    out[k] = barycenter(spec);
  });
  return out;
}

void write_measure_csv(const DiscreteMeasure& measure, const std::vector<std::string>& names, std::ostream& out)
{
  if (static_cast<Index>(names.size()) != measure.points.cols()) throw ValidationError("measure CSV: one name per coordinate required");
  out << std::setprecision(17);
  for (const std::string& n : names) out << n << ',';
  out << "mass\n";
  for (Index i = 0; i < measure.size(); ++i) {
    for (Index a = 0; a < measure.points.cols(); ++a) out << measure.points(i, a) << ',';
    out << measure.masses(i) << '\n';
  }
}

void write_measure_csv(const DiscreteMeasure& measure, const std::vector<std::string>& names, const std::string& path)
{
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  write_measure_csv(measure, names, out);
}

}  // namespace lreach
