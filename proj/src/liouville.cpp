#include "lreach/liouville.hpp"

#include "lreach/log.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace lreach {

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200, e6 = 22.0 / 525,
                 e7 = -1.0 / 40;

constexpr double kSafety = 0.9;
constexpr double kFacMin = 0.2;
constexpr double kFacMax = 10.0;

struct SampleResult
{
  Matrix states;   // times x d
  Vector weights;  // times (empty when states only)
  std::uint8_t flags = flag_none;
  std::vector<PathNode> path;
};

class SampleIntegrator
{
public:
  SampleIntegrator(const VectorField& field, const PropagationSettings& s, bool with_weight)
      : field_(field), settings_(s), with_weight_(with_weight), d_(field.dim())
  {
  }

  SampleResult run(const Vector& x0, double w0) const
  {
    const auto& grid = settings_.t_grid;
    const Index nt = static_cast<Index>(grid.size());
    const Index n = with_weight_ ? d_ + 1 : d_;
    SampleResult out;
    out.states.resize(nt, d_);
    if (with_weight_) out.weights.resize(nt);

    EvalInfo info;
    Vector y(n);
    y.head(d_) = x0;
    if (with_weight_) y(d_) = settings_.weight_mode == WeightMode::log ? std::log(w0) : w0;
    double t = grid.front();

    auto store = [&](Index k) {
      out.states.row(k) = y.head(d_).transpose();
      if (with_weight_) out.weights(k) = settings_.weight_mode == WeightMode::log ? std::exp(y(d_)) : y(d_);
    };
    auto freeze_from = [&](Index k) {
      out.flags |= flag_frozen;
      for (Index j = k; j < nt; ++j) store(j);
    };

    Vector k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), ytmp(n), ynew(n);
    store(0);
    if (!eval(t, y, k1, info)) {
      freeze_from(1);
      out.flags |= info.policy_fallback ? flag_policy_fallback : flag_none;
      return out;
    }
    if (settings_.record_path) out.path.push_back({t, y.head(d_), k1.head(d_)});

    double h = initial_step(t, y, k1, info);
    bool last_rejected = false;
    Index attempts = 0;
    for (Index k = 1; k < nt; ++k) {
      const double target = grid[static_cast<std::size_t>(k)];
      while (t < target) {
        double step = std::min(h, settings_.max_step);
        bool hits = false;
        if (t + step >= target || target - (t + step) <= 1e-12 * std::max(1.0, std::abs(target))) {
          step = target - t;
          hits = true;
        }
        if (step <= 1e-12 * std::max(1.0, std::abs(t)) || ++attempts > settings_.max_steps) {
          log::debug("step size underflow at t = " + std::to_string(t));
          freeze_from(k);
          out.flags |= info.policy_fallback ? flag_policy_fallback : flag_none;
          return out;
        }

        bool ok = true;
        ytmp = y + step * a21 * k1;
        ok = ok && eval(t + c2 * step, ytmp, k2, info);
        if (ok) {
          ytmp = y + step * (a31 * k1 + a32 * k2);
          ok = eval(t + c3 * step, ytmp, k3, info);
        }
        if (ok) {
          ytmp = y + step * (a41 * k1 + a42 * k2 + a43 * k3);
          ok = eval(t + c4 * step, ytmp, k4, info);
        }
        if (ok) {
          ytmp = y + step * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
          ok = eval(t + c5 * step, ytmp, k5, info);
        }
        if (ok) {
          ytmp = y + step * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
          ok = eval(t + step, ytmp, k6, info);
        }
        double err = std::numeric_limits<double>::infinity();
        if (ok) {
          ynew = y + step * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
          ok = eval(t + step, ynew, k7, info);
        }
        if (ok) {
          const Vector est = step * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
          err = error_norm(est, y, ynew);
        }

        if (err <= 1.0) {
          t = hits ? target : t + step;
          y = ynew;
          k1 = k7;
          if (settings_.record_path) out.path.push_back({t, y.head(d_), k1.head(d_)});
          double fac = err > 0.0 ? kSafety * std::pow(err, -0.2) : kFacMax;
          fac = std::clamp(fac, kFacMin, last_rejected ? 1.0 : kFacMax);
          h = step * fac;
          last_rejected = false;
        } else {
          const double fac = std::isfinite(err) ? std::max(kFacMin, kSafety * std::pow(err, -0.2)) : kFacMin;
          h = step * fac;
          last_rejected = true;
        }
      }
      store(k);
    }
    out.flags |= info.policy_fallback ? flag_policy_fallback : flag_none;
    return out;
  }

private:
  // Augmented right-hand side; false when the field cannot be evaluated.
  bool eval(double t, const Vector& y, Vector& out, EvalInfo& info) const
  {
    try {
      if (!with_weight_) {
        out = field_.evaluate(y, t, &info);
      } else {
        double div = 0.0;
        out.head(d_) = field_.evaluate_with_divergence(y.head(d_), t, div, &info);
        out(d_) = settings_.weight_mode == WeightMode::log ? -div : -y(d_) * div;
      }
    } catch (const NumericalError&) {
      return false;
    }
    return out.allFinite();
  }

  // RMS norm over the state coordinates only, so the state step sequence does
  // not depend on whether the weight is carried along.
  double error_norm(const Vector& est, const Vector& y0, const Vector& y1) const
  {
    double sum = 0.0;
    for (Index i = 0; i < d_; ++i) {
      const double sc = settings_.atol + settings_.rtol * std::max(std::abs(y0(i)), std::abs(y1(i)));
      const double r = est(i) / sc;
      sum += r * r;
    }
    return std::sqrt(sum / static_cast<double>(d_));
  }

  double scaled_norm(const Vector& v, const Vector& y) const
  {
    double sum = 0.0;
    for (Index i = 0; i < d_; ++i) {
      const double r = v(i) / (settings_.atol + settings_.rtol * std::abs(y(i)));
      sum += r * r;
    }
    return std::sqrt(sum / static_cast<double>(d_));
  }

  // Hairer, Norsett & Wanner starting step.
  double initial_step(double t, const Vector& y, const Vector& f0, EvalInfo& info) const
  {
    const double d0 = scaled_norm(y, y);
    const double d1 = scaled_norm(f0, y);
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, settings_.max_step);
    Vector f1(y.size());
    const Vector y1 = y + h0 * f0;
    if (!eval(t + h0, y1, f1, info)) return h0;
    const double d2 = scaled_norm(f1 - f0, y) / h0;
    const double dm = std::max(d1, d2);
    const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
    return std::min(100.0 * h0, h1);
  }

  const VectorField& field_;
  const PropagationSettings& settings_;
  bool with_weight_;
  Index d_;
};

CloudTrajectory run_propagation(const Matrix& states0, const Vector* weights0, const VectorField& field,
                                const PropagationSettings& settings)
{
  settings.validate();
  const Index n = states0.rows();
  const Index d = field.dim();
  if (n < 1) throw ValidationError("propagate: the cloud is empty");
  if (states0.cols() != d) throw ValidationError("propagate: cloud and field dimensions differ");
  if (!states0.allFinite()) throw ValidationError("propagate: non-finite initial state");
  if (weights0) {
    if (weights0->size() != n) throw ValidationError("propagate: weight count differs from sample count");
    for (Index i = 0; i < n; ++i) {
      if (!((*weights0)(i) > 0.0) || !std::isfinite((*weights0)(i))) {
        throw ValidationError("propagate: initial weights must be strictly positive and finite (sample " +
                              std::to_string(i) + ")");
      }
    }
  }

  const bool with_weight = weights0 != nullptr;
  const auto& grid = settings.t_grid;
  const Index nt = static_cast<Index>(grid.size());
  CloudTrajectory traj;
  traj.clouds.resize(static_cast<std::size_t>(nt));
  for (Index k = 0; k < nt; ++k) {
    auto& c = traj.clouds[static_cast<std::size_t>(k)];
    c.time = grid[static_cast<std::size_t>(k)];
    c.states.resize(n, d);
    if (with_weight) c.weights.resize(n);
  }
  traj.flags.assign(static_cast<std::size_t>(n), flag_none);
  if (settings.record_path) traj.paths.resize(static_cast<std::size_t>(n));

  const SampleIntegrator integrator(field, settings, with_weight);
  parallel_for(n, settings.workers, [&](Index i) {
    SampleResult r = integrator.run(states0.row(i).transpose(), with_weight ? (*weights0)(i) : 1.0);
    for (Index k = 0; k < nt; ++k) {
      auto& c = traj.clouds[static_cast<std::size_t>(k)];
      c.states.row(i) = r.states.row(k);
      if (with_weight) c.weights(i) = r.weights(k);
    }
    traj.flags[static_cast<std::size_t>(i)] = r.flags;
    if (settings.record_path) traj.paths[static_cast<std::size_t>(i)] = std::move(r.path);
  });

  const Index frozen = traj.count(flag_frozen);
  const Index fallback = traj.count(flag_policy_fallback);
  if (fallback > 0) log::info(std::to_string(fallback) + " samples used the policy fallback");
  if (static_cast<double>(frozen) > settings.max_frozen_fraction * static_cast<double>(n)) {
    std::ostringstream os;
    os << "propagate: " << frozen << " of " << n << " samples hit a step-size underflow (limit "
       << settings.max_frozen_fraction * 100.0 << "%)";
    throw NumericalError(os.str());
  }
  if (frozen > 0) log::warn(std::to_string(frozen) + " samples frozen after step-size underflow");
  return traj;
}

}  // namespace

void PropagationSettings::validate() const
{
  if (!(rtol > 0.0) || !(atol > 0.0)) throw ValidationError("propagation: rtol and atol must be positive");
  if (!(max_step > 0.0)) throw ValidationError("propagation: max_step must be positive");
  if (t_grid.empty()) throw ValidationError("propagation: empty output grid");
  for (std::size_t i = 0; i < t_grid.size(); ++i) {
    if (!std::isfinite(t_grid[i])) throw ValidationError("propagation: non-finite output time");
    if (i > 0 && !(t_grid[i] > t_grid[i - 1])) throw ValidationError("propagation: output times must increase strictly");
  }
  if (!(max_frozen_fraction >= 0.0 && max_frozen_fraction <= 1.0)) {
    throw ValidationError("propagation: max_frozen_fraction must lie in [0, 1]");
  }
  if (max_steps < 1) throw ValidationError("propagation: max_steps must be positive");
}

std::vector<double> PropagationSettings::uniform_grid(double t0, double tf, double dt)
{
  if (!(tf > t0) || !(dt > 0.0)) throw ValidationError("uniform grid: need t0 < tf and dt > 0");
  std::vector<double> grid;
  const auto steps = static_cast<long>(std::floor((tf - t0) / dt + 1e-9));
  for (long k = 0; k <= steps; ++k) grid.push_back(t0 + static_cast<double>(k) * dt);
  if (tf - grid.back() > 1e-9 * std::max(1.0, std::abs(tf))) {
    grid.push_back(tf);
  } else {
    grid.back() = tf;
  }
  return grid;
}

std::vector<double> CloudTrajectory::times() const
{
  std::vector<double> t;
  for (const auto& c : clouds) t.push_back(c.time);
  return t;
}

Index CloudTrajectory::count(SampleFlag flag) const
{
  return static_cast<Index>(std::count_if(flags.begin(), flags.end(), [flag](std::uint8_t f) { return (f & flag) != 0; }));
}

CloudTrajectory propagate(const WeightedCloud& cloud0, const VectorField& field, const PropagationSettings& settings)
{
  cloud0.validate();
  if (!settings.t_grid.empty() && cloud0.time != settings.t_grid.front()) {
    throw ValidationError("propagate: cloud time differs from the first output time");
  }
  return run_propagation(cloud0.states, &cloud0.weights, field, settings);
}

CloudTrajectory propagate_states(const Matrix& states0, const VectorField& field, const PropagationSettings& settings)
{
  return run_propagation(states0, nullptr, field, settings);
}

SemianalyticReport verify_semianalytic(const CloudTrajectory& traj, const std::function<double(const Vector&)>& rho0,
                                       const VectorField& field)
{
  const Index n = traj.samples();
  if (traj.paths.size() != static_cast<std::size_t>(n)) {
    throw ValidationError("verify_semianalytic: trajectory was propagated without recorded paths");
  }
  const std::vector<double> times = traj.times();
  SemianalyticReport report;
  report.per_time.assign(times.size(), 0.0);

  const double gl_nodes[3] = {0.5 - 0.5 * std::sqrt(0.6), 0.5, 0.5 + 0.5 * std::sqrt(0.6)};
  const double gl_weights[3] = {5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0};

  for (Index i = 0; i < n; ++i) {
    if (traj.flags[static_cast<std::size_t>(i)] & flag_frozen) continue;
    const auto& path = traj.paths[static_cast<std::size_t>(i)];
    if (path.empty()) continue;
    ++report.checked_samples;
    const double base = rho0(path.front().x);
    double integral = 0.0;
    std::size_t k = 0;
    auto check = [&](double t) {
      while (k < times.size() && times[k] < t) ++k;
      if (k < times.size() && times[k] == t) {
        const double predicted = base * std::exp(-integral);
        const double stored = traj.clouds[k].weights(i);
        const double rel = std::abs(stored - predicted) / predicted;
        report.per_time[k] = std::max(report.per_time[k], rel);
        report.max_relative_residual = std::max(report.max_relative_residual, rel);
      }
    };
    check(path.front().t);
    for (std::size_t p = 1; p < path.size(); ++p) {
      const PathNode& a = path[p - 1];
      const PathNode& b = path[p];
      const double h = b.t - a.t;
      double piece = 0.0;
      for (int q = 0; q < 3; ++q) {
        const double s = gl_nodes[q];
        const double h00 = 2 * s * s * s - 3 * s * s + 1, h10 = s * s * s - 2 * s * s + s;
        const double h01 = -2 * s * s * s + 3 * s * s, h11 = s * s * s - s * s;
        const Vector x = h00 * a.x + h10 * h * a.g + h01 * b.x + h11 * h * b.g;
        piece += gl_weights[q] * field.divergence(x, a.t + s * h);
      }
      integral += h * piece;
      check(b.t);
    }
  }
  return report;
}

std::vector<double> mass_consistency(const CloudTrajectory& traj)
{
  std::vector<double> out;
  for (const WeightedCloud& c : traj.clouds) {
    const Index n = c.size();
    const Index d = c.dim();
    if (n < 100) throw ValidationError("mass_consistency: needs at least 100 samples");
    if (c.weights.size() != n) throw ValidationError("mass_consistency: trajectory carries no weights");
    const Vector mean = c.states.colwise().mean();
    Vector bw(d);
    // Half of Scott's bandwidth: the smoothing bias of q inflates the ratio
    // by roughly (1 + h^2 / 2)^(d/2) in sd units, undersmoothing keeps it small.
    const double scott = 0.5 * std::pow(static_cast<double>(n), -1.0 / (d + 4.0));
    for (Index j = 0; j < d; ++j) {
      const double var = (c.states.col(j).array() - mean(j)).square().sum() / static_cast<double>(n - 1);
      bw(j) = std::sqrt(var) * scott;
      if (!(bw(j) > 0.0)) throw ValidationError("mass_consistency: a coordinate has zero spread");
    }
    const double norm = std::pow(2.0 * 3.14159265358979323846, -0.5 * static_cast<double>(d)) / bw.prod();
    const Matrix scaled = c.states * bw.cwiseInverse().asDiagonal();
    // Self-normalized: sum of stored weights over sum of leave-one-out estimates.
    double stored = 0.0, estimated = 0.0;
    for (Index i = 0; i < n; ++i) {
      double q = 0.0;
      for (Index k = 0; k < n; ++k) {
        if (k == i) continue;
        q += std::exp(-0.5 * (scaled.row(i) - scaled.row(k)).squaredNorm());
      }
      estimated += q * norm / static_cast<double>(n - 1);
      stored += c.weights(i);
    }
    out.push_back(stored / estimated);
  }
  return out;
}

void write_trajectory_csv(const CloudTrajectory& traj, std::ostream& out)
{
  const Index d = traj.dim();
  out << "t,sample";
  for (Index j = 0; j < d; ++j) out << ",x" << (j + 1);
  out << ",rho,flag\n";
  out << std::setprecision(17);
  for (const WeightedCloud& c : traj.clouds) {
    for (Index i = 0; i < c.size(); ++i) {
      out << c.time << ',' << i;
      for (Index j = 0; j < d; ++j) out << ',' << c.states(i, j);
      out << ',' << (c.weights.size() ? c.weights(i) : 0.0) << ',' << static_cast<int>(traj.flags[static_cast<std::size_t>(i)])
          << '\n';
    }
  }
}

void write_trajectory_csv(const CloudTrajectory& traj, const std::string& path)
{
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  write_trajectory_csv(traj, out);
}

}  // namespace lreach
