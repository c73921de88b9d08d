#include "lreach/montecarlo.hpp"

#include "lreach/log.hpp"

#include "json.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>

namespace lreach {

namespace {

double seconds_since(std::chrono::steady_clock::time_point start)
{
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

double median(std::vector<double> v)
{
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

CloudTrajectory propagate_states_only(const WeightedCloud& cloud0, const VectorField& field,
                                      const PropagationSettings& settings)
{
  if (cloud0.size() < 1) throw ValidationError("propagate_states_only: empty cloud");
  if (cloud0.time != settings.t_grid.front()) throw ValidationError("propagate_states_only: cloud time differs from the grid start");
  return propagate_states(cloud0.states, field, settings);
}

double HistogramDensity::cell_volume() const
{
  double v = 1.0;
  for (std::size_t a = 0; a < edges.size(); ++a) v *= edges[a](edges[a].size() - 1) - edges[a](0);
  for (std::size_t a = 0; a < edges.size(); ++a) v /= static_cast<double>(edges[a].size() - 1);
  return v;
}

double HistogramDensity::integral() const { return density.sum() * cell_volume(); }

Vector HistogramDensity::marginal(Index axis) const
{
  if (axis < 0 || axis >= dim()) throw ValidationError("histogram: axis out of range");
  const Index bins = edges[static_cast<std::size_t>(axis)].size() - 1;
  Index stride = 1;
  for (Index a = dim() - 1; a > axis; --a) stride *= edges[static_cast<std::size_t>(a)].size() - 1;
  Vector m = Vector::Zero(bins);
  for (Index c = 0; c < cells(); ++c) m((c / stride) % bins) += static_cast<double>(counts[static_cast<std::size_t>(c)]);
  const Vector& e = edges[static_cast<std::size_t>(axis)];
  return m / (static_cast<double>(total) * (e(1) - e(0)));
}

HistogramDensity histogram_density(const Matrix& states, Index bins_per_dim, const Vector& lo, const Vector& hi)
{
  const Index n = states.rows(), d = states.cols();
  if (n < 1) throw ValidationError("histogram: no samples");
  if (bins_per_dim < 2) throw ValidationError("histogram: at least 2 bins per dimension required");
  if (lo.size() != d || hi.size() != d) throw ValidationError("histogram: bounds do not match the dimension");
  HistogramDensity h;
  h.total = n;
  Index cells = 1;
  std::vector<Index> bins(static_cast<std::size_t>(d));
  for (Index a = 0; a < d; ++a) {
    const bool collapsed = !(hi(a) > lo(a));
    h.collapsed.push_back(collapsed);
    bins[static_cast<std::size_t>(a)] = collapsed ? 1 : bins_per_dim;
    if (collapsed) {
      // A unit-width single bin keeps the integral equal to one.
      Vector e(2);
      e << lo(a) - 0.5, lo(a) + 0.5;
      h.edges.push_back(e);
      log::warn("histogram: dimension " + std::to_string(a) + " is degenerate; collapsed to one bin");
    } else {
      h.edges.push_back(Vector::LinSpaced(bins_per_dim + 1, lo(a), hi(a)));
    }
    cells *= bins[static_cast<std::size_t>(a)];
  }
  h.counts.assign(static_cast<std::size_t>(cells), 0);
  for (Index i = 0; i < n; ++i) {
    Index cell = 0;
    for (Index a = 0; a < d; ++a) {
      const Index b = bins[static_cast<std::size_t>(a)];
      Index k = 0;
      if (b > 1) {
        const double x = states(i, a);
        if (x < lo(a) || x > hi(a)) throw ValidationError("histogram: sample outside the given bounds");
        k = std::min<Index>(b - 1, static_cast<Index>(std::floor((x - lo(a)) / (hi(a) - lo(a)) * static_cast<double>(b))));
      }
      cell = cell * b + k;
    }
    ++h.counts[static_cast<std::size_t>(cell)];
  }
  const double scale = 1.0 / (static_cast<double>(n) * h.cell_volume());
  h.density.resize(cells);
  for (Index c = 0; c < cells; ++c) h.density(c) = static_cast<double>(h.counts[static_cast<std::size_t>(c)]) * scale;
  return h;
}

HistogramDensity histogram_density(const Matrix& states, Index bins_per_dim)
{
  return histogram_density(states, bins_per_dim, states.colwise().minCoeff().transpose(),
                           states.colwise().maxCoeff().transpose());
}

void transient_extremes(const CloudTrajectory& traj, Vector& lo, Vector& hi)
{
  if (traj.clouds.empty()) throw ValidationError("transient extremes: empty trajectory");
  lo = traj.clouds[0].states.colwise().minCoeff().transpose();
  hi = traj.clouds[0].states.colwise().maxCoeff().transpose();
  for (const WeightedCloud& c : traj.clouds) {
    lo = lo.cwiseMin(c.states.colwise().minCoeff().transpose());
    hi = hi.cwiseMax(c.states.colwise().maxCoeff().transpose());
  }
}

std::function<std::optional<GaussianSpec>(double)> affine_reference(const VehicleSpec& vehicle, double t0)
{
  const auto* plant = std::get_if<AffinePlant>(&vehicle.model);
  if (!plant || vehicle.policy.kind != PolicySpec::Kind::open_loop) return {};
  Vector u(input_dim(vehicle.model));
  for (std::size_t k = 0; k < vehicle.policy.schedule.components.size(); ++k) {
    const ScheduleComponent& c = vehicle.policy.schedule.components[k];
    const bool constant = c.kind == ScheduleComponent::Kind::constant ||
                          (c.kind == ScheduleComponent::Kind::sine && c.amplitude == 0.0);
    if (!constant) return {};
    u(static_cast<Index>(k)) = c.value;
  }
  const Matrix a = plant->a;
  const Vector w = plant->b * u + plant->offset;
  const GaussianSpec init = vehicle.init;
  return [a, w, init, t0](double t) -> std::optional<GaussianSpec> {
    const Index d = a.rows();
    Matrix aug = Matrix::Zero(d + 1, d + 1);
    aug.topLeftCorner(d, d) = a * (t - t0);
    aug.topRightCorner(d, 1) = w * (t - t0);
    const Matrix e = aug.exp();
    const Matrix phi = e.topLeftCorner(d, d);
    const Vector mean = phi * init.mean() + e.topRightCorner(d, 1);
    Matrix cov = phi * init.covariance() * phi.transpose();
    cov = 0.5 * (cov + cov.transpose());
    return GaussianSpec(mean, cov);
  };
}

ComparisonReport compare(const Scenario& scenario, const ComparisonOptions& options)
{
  if (options.vehicle >= scenario.vehicles.size()) throw ValidationError("compare: vehicle index out of range");
  if (options.repetitions < 3) throw ValidationError("compare: at least 3 repetitions required");
  if (options.bins.empty()) throw ValidationError("compare: no bin resolutions");
  for (Index b : options.bins) {
    if (b < 2) throw ValidationError("compare: at least 2 bins per dimension required");
  }
  const VehicleSpec& vehicle = scenario.vehicles[options.vehicle];
  const VehicleSetup setup = build_vehicle(vehicle);
  const WeightedCloud cloud0 = initial_cloud(vehicle);
  PropagationSettings settings = scenario.propagation;
  if (options.workers >= 0) settings.workers = options.workers;

  ComparisonReport report;
  report.scenario = scenario.name;
  report.vehicle = vehicle.name;
  report.samples = cloud0.size();
  report.repetitions = options.repetitions;
  std::vector<std::vector<double>> hist_runs(options.bins.size());
  CloudTrajectory liouville, mc;
  std::vector<HistogramDensity> final_hist(options.bins.size());

  for (Index rep = 0; rep < options.repetitions; ++rep) {
    auto start = std::chrono::steady_clock::now();
    liouville = propagate(cloud0, *setup.field, settings);
    report.liouville_runs.push_back(seconds_since(start));

    start = std::chrono::steady_clock::now();
    mc = propagate_states_only(cloud0, *setup.field, settings);
    report.mc_propagation_runs.push_back(seconds_since(start));

    for (std::size_t r = 0; r < options.bins.size(); ++r) {
      start = std::chrono::steady_clock::now();
      Vector lo, hi;
      transient_extremes(mc, lo, hi);
      for (const WeightedCloud& c : mc.clouds) final_hist[r] = histogram_density(c.states, options.bins[r], lo, hi);
      hist_runs[r].push_back(seconds_since(start));
    }
  }
  report.liouville_seconds = median(report.liouville_runs);
  report.mc_propagation_seconds = median(report.mc_propagation_runs);
  report.bitwise_equal_states = true;
  for (std::size_t k = 0; k < mc.clouds.size(); ++k) {
    if (mc.clouds[k].states != liouville.clouds[k].states) report.bitwise_equal_states = false;
  }

  const double tf = liouville.clouds.back().time;
  const std::optional<GaussianSpec> exact = options.reference ? options.reference(tf) : std::nullopt;
  if (exact) {
    const WeightedCloud& c = liouville.clouds.back();
    double worst = 0.0;
    for (Index i = 0; i < c.size(); ++i) {
      const double ref = exact->pdf(c.states.row(i).transpose());
      worst = std::max(worst, std::abs(c.weights(i) - ref) / ref);
    }
    report.liouville_pointwise_error = worst;
  }

  for (std::size_t r = 0; r < options.bins.size(); ++r) {
    ResolutionReport rr;
    rr.bins = options.bins[r];
    rr.histogram_seconds = median(hist_runs[r]);
    rr.histogram_runs = hist_runs[r];
    rr.mc_seconds = report.mc_propagation_seconds + rr.histogram_seconds;
    if (exact) {
      const HistogramDensity& h = final_hist[r];
      for (Index a = 0; a < h.dim(); ++a) {
        const Vector m = h.marginal(a);
        const Vector& e = h.edges[static_cast<std::size_t>(a)];
        const double mu = exact->mean()(a), sd = std::sqrt(exact->covariance()(a, a));
        Vector ref(m.size());
        for (Index k = 0; k < m.size(); ++k) {
          ref(k) = (normal_cdf((e(k + 1) - mu) / sd) - normal_cdf((e(k) - mu) / sd)) / (e(k + 1) - e(k));
        }
        const double peak = 1.0 / (std::sqrt(2.0 * 3.14159265358979323846) * sd);
        rr.sup_error.push_back((m - ref).cwiseAbs().maxCoeff() / peak);
        rr.l1_error.push_back((m - ref).cwiseAbs().sum() * (e(1) - e(0)));
      }
    }
    report.resolutions.push_back(rr);
  }
  return report;
}

std::string report_json(const ComparisonReport& report)
{
  nlohmann::json j = {{"scenario", report.scenario},
                      {"vehicle", report.vehicle},
                      {"samples", report.samples},
                      {"repetitions", report.repetitions},
                      {"liouville_seconds", report.liouville_seconds},
                      {"liouville_runs", report.liouville_runs},
                      {"mc_propagation_seconds", report.mc_propagation_seconds},
                      {"mc_propagation_runs", report.mc_propagation_runs},
                      {"bitwise_equal_states", report.bitwise_equal_states}};
  if (report.liouville_pointwise_error) j["liouville_pointwise_error"] = *report.liouville_pointwise_error;
  j["resolutions"] = nlohmann::json::array();
  for (const ResolutionReport& r : report.resolutions) {
    nlohmann::json e = {{"bins", r.bins},
                        {"mc_seconds", r.mc_seconds},
                        {"histogram_seconds", r.histogram_seconds},
                        {"histogram_runs", r.histogram_runs}};
    if (!r.sup_error.empty()) {
      e["marginal_sup_error"] = r.sup_error;
      e["marginal_l1_error"] = r.l1_error;
    }
    j["resolutions"].push_back(e);
  }
  return j.dump(2);
}

void write_timing_csv(const ComparisonReport& report, std::ostream& out)
{
  out << "pipeline,bins,repetition,seconds\n";
  for (std::size_t k = 0; k < report.liouville_runs.size(); ++k) out << "liouville,," << k << ',' << report.liouville_runs[k] << '\n';
  for (std::size_t k = 0; k < report.mc_propagation_runs.size(); ++k) {
    out << "mc_propagation,," << k << ',' << report.mc_propagation_runs[k] << '\n';
  }
  for (const ResolutionReport& r : report.resolutions) {
    for (std::size_t k = 0; k < r.histogram_runs.size(); ++k) out << "mc_histogram," << r.bins << ',' << k << ',' << r.histogram_runs[k] << '\n';
  }
}

}  // namespace lreach
