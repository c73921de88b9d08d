#include "lreach/cli.hpp"

#include "lreach/montecarlo.hpp"
#include "lreach/scenario.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

namespace lreach {

namespace {

struct Args
{
  std::string scenario;
  std::string output;
  int workers = -1;
  std::optional<std::uint64_t> seed;
  std::optional<Index> samples;
  std::optional<std::string> mode;
  std::optional<double> eps;
  std::string bins;
  std::vector<std::string> set;
  Index repetitions = 3;
  std::string vehicle;
};

std::vector<Index> parse_bins(const std::string& text)
{
  std::vector<Index> bins;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      bins.push_back(v);
    } catch (const std::exception&) {
      throw ValidationError("--bins: '" + item + "' is not a positive integer");
    }
  }
  if (bins.empty()) throw ValidationError("--bins: empty list");
  return bins;
}

Scenario load(const Args& a)
{
  ScenarioOverrides o;
  for (const std::string& kv : a.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("--set expects key=value, got '" + kv + "'");
    o.set.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
  }
  o.seed = a.seed;
  o.samples = a.samples;
  o.collision_mode = a.mode;
  o.eps = a.eps;
  Scenario sc = load_scenario(a.scenario, o);
  if (!a.bins.empty()) {
    const std::vector<Index> b = parse_bins(a.bins);
    sc.marginals.bins_1d = b[0];
    sc.marginals.bins_2d = {b[0], b.size() > 1 ? b[1] : b[0]};
  }
  return sc;
}

void require_output(const Args& a)
{
  if (a.output.empty()) throw ValidationError("an output directory is required (-o)");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
  CLI::App app{"Density propagation along characteristics for vehicle reachability"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("lreach ") + LREACH_VERSION);
  Args a;

  auto common = [&a](CLI::App* sub, bool writes) {
    sub->add_option("scenario", a.scenario, "Scenario JSON (or a run manifest)")->required()->check(CLI::ExistingFile);
    if (writes) sub->add_option("-o,--output", a.output, "Output directory; nothing is written outside it");
    sub->add_option("--workers", a.workers, "Worker threads (default: scenario setting, 0 = all cores)")->check(CLI::NonNegativeNumber);
    sub->add_option("--seed-override", a.seed, "Replace vehicle seeds with S, S+1, ... in document order");
    sub->add_option("--n", a.samples, "Samples per vehicle")->check(CLI::PositiveNumber);
    sub->add_option("--set", a.set, "Override a document field, e.g. --set propagation.rtol=1e-8 (repeatable)");
  };

  CLI::App* run_cmd = app.add_subcommand("run", "Full pipeline: propagation, marginals, collisions, barycenters, manifest");
  common(run_cmd, true);
  run_cmd->add_option("--bins", a.bins, "Marginal bins: B or B1,B2 (2D)");
  run_cmd->add_option("--mode", a.mode, "Collision mode")->check(CLI::IsMember({"support_product", "footprint"}));
  run_cmd->add_option("--eps", a.eps, "Barycenter regularization (0 = default)");

  CLI::App* marg_cmd = app.add_subcommand("marginals", "Propagation and marginal series only");
  common(marg_cmd, true);
  marg_cmd->add_option("--bins", a.bins, "Marginal bins: B or B1,B2 (2D)");

  CLI::App* coll_cmd = app.add_subcommand("collision", "Propagation and collision curves only");
  common(coll_cmd, true);
  coll_cmd->add_option("--mode", a.mode, "Collision mode")->check(CLI::IsMember({"support_product", "footprint"}));

  CLI::App* bary_cmd = app.add_subcommand("barycenter", "Propagation and the barycentric trajectory");
  common(bary_cmd, true);
  bary_cmd->add_option("--eps", a.eps, "Barycenter regularization (0 = default)");
  bary_cmd->add_option("--mode", a.mode, "Collision mode for barycenter curves")->check(CLI::IsMember({"support_product", "footprint"}));

  CLI::App* mc_cmd = app.add_subcommand("compare-mc", "Runtime and accuracy against the Monte Carlo histogram baseline");
  common(mc_cmd, true);
  mc_cmd->add_option("--bins", a.bins, "Bins per dimension, comma separated (default 10,15)");
  mc_cmd->add_option("--repetitions", a.repetitions, "Timed repetitions (at least 3)");
  mc_cmd->add_option("--vehicle", a.vehicle, "Vehicle name (default: the first)");

  CLI::App* val_cmd = app.add_subcommand("validate", "Check a scenario without computing");
  common(val_cmd, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, er;
    const int code = app.exit(e, o, er);
    out << o.str();
    err << er.str();
    return code == 0 ? 0 : 1;
  }

  try {
    if (val_cmd->parsed()) {
      const Scenario sc = load(a);
      out << "ok: " << sc.name << ", " << sc.vehicles.size() << " vehicles, " << sc.propagation.t_grid.size()
          << " output times\n";
      return 0;
    }
    if (mc_cmd->parsed()) {
      const std::string bins = a.bins;
      a.bins.clear();
      const Scenario sc = load(a);
      ComparisonOptions co;
      if (!bins.empty()) co.bins = parse_bins(bins);
      co.repetitions = a.repetitions;
      co.workers = a.workers;
      if (!a.vehicle.empty()) co.vehicle = static_cast<std::size_t>(sc.vehicle_index(a.vehicle));
      co.reference = affine_reference(sc.vehicles[co.vehicle], sc.t0);
      const ComparisonReport report = compare(sc, co);
      const std::string json = report_json(report);
      if (!a.output.empty()) {
        std::filesystem::create_directories(a.output);
        std::ofstream(std::filesystem::path(a.output) / "comparison.json") << json << '\n';
        std::ofstream csv(std::filesystem::path(a.output) / "timings.csv");
        write_timing_csv(report, csv);
      }
      out << json << '\n';
      return 0;
    }

    require_output(a);
    Scenario sc = load(a);
    if (marg_cmd->parsed()) {
      sc.collision.reset();
      sc.barycenter.reset();
    } else if (coll_cmd->parsed()) {
      if (!sc.collision) throw ValidationError("collision: the scenario has no collision section");
      sc.marginals = MarginalPlan{{}, {}, sc.marginals.mode, sc.marginals.bins_1d, sc.marginals.bins_2d};
      sc.barycenter.reset();
    } else if (bary_cmd->parsed()) {
      if (!sc.barycenter) throw ValidationError("barycenter: the scenario has no barycenter section");
      sc.marginals = MarginalPlan{{}, {}, sc.marginals.mode, sc.marginals.bins_1d, sc.marginals.bins_2d};
    }
    RunOptions ro;
    ro.workers = a.workers;
    run(sc, a.output, ro);
    out << "wrote " << (std::filesystem::path(a.output) / "manifest.json").string() << '\n';
    return 0;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "numerical failure: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace lreach
