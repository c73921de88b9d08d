#pragma once

/**
 * @file
 * @brief Experiment documents and the run pipeline.
 *
 * A scenario lists vehicles (plant, policy, initial Gaussian, sample count,
 * seed), the output grid and the analyses to run. Documents are JSON with a
 * strict schema (see docs/formats.md); every violation names its path.
 */

#include "lreach/control.hpp"
#include "lreach/density.hpp"
#include "lreach/liouville.hpp"
#include "lreach/transport.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace lreach {

struct PolicySpec
{
  enum class Kind
  {
    open_loop,
    pwa,
    mpc,
  };
  Kind kind = Kind::open_loop;
  OpenLoopSchedule schedule;
  std::string pwa_file;   ///< resolved against the scenario's directory
  double vx = 20.0;       ///< trim speed (mpc)
  MpcConfig mpc;          ///< ey_center doubles as the trim lateral offset
  Vector u_trim;          ///< affine plants: input held at the trim
};

struct VehicleSpec
{
  std::string name;
  Plant model;
  PolicySpec policy;
  GaussianSpec init{Vector::Zero(1), Matrix::Identity(1, 1)};
  Index samples = 1000;
  std::uint64_t seed = 1;
  DivergenceMode divergence = DivergenceMode::analytic;
};

struct MarginalPlan
{
  std::vector<Index> univariate;
  std::vector<std::vector<Index>> bivariate;
  MarginalMode mode = MarginalMode::histogram;
  Index bins_1d = 50;
  std::vector<Index> bins_2d = {60, 60};
};

struct CollisionPlan
{
  std::vector<Index> dims;
  CollisionOptions options;
  std::vector<std::pair<std::string, std::string>> pairs;   ///< empty = every pair
};

struct BarycenterPlan
{
  std::vector<std::string> inputs;
  Vector lambdas;
  std::vector<Index> dims;
  std::vector<Index> bins = {60, 60};
  double eps = 0.0;
  Index max_iter = 5000;
  double tol = 1e-5;
  std::vector<std::string> coordinate_names = {"s", "e_y"};
};

struct Scenario
{
  std::string name;
  double t0 = 0.0;
  double tf = 1.0;
  double output_dt = 0.1;
  PropagationSettings propagation;
  std::vector<VehicleSpec> vehicles;
  MarginalPlan marginals;
  std::optional<CollisionPlan> collision;
  std::optional<BarycenterPlan> barycenter;
  std::string document;     ///< canonical JSON of the validated input
  std::string base_dir;

  const VehicleSpec& vehicle(const std::string& name) const;
  Index vehicle_index(const std::string& name) const;
};

/// Command-line style adjustments applied to the document before validation.
struct ScenarioOverrides
{
  std::vector<std::pair<std::string, std::string>> set;   ///< dotted path = JSON value
  std::optional<std::uint64_t> seed;   ///< vehicle k gets seed + k
  std::optional<Index> samples;
  std::optional<std::string> collision_mode;
  std::optional<double> eps;
};

/// Reads a scenario or a run manifest (whose embedded scenario is used).
Scenario load_scenario(const std::string& path, const ScenarioOverrides& overrides = {});
Scenario parse_scenario(const std::string& text, const std::string& base_dir = ".",
                        const ScenarioOverrides& overrides = {});

/// Trim, linearization and policy construction for one vehicle.
struct VehicleSetup
{
  std::shared_ptr<const ClosedLoopField> field;
  std::optional<TrimPoint> trim;
};

VehicleSetup build_vehicle(const VehicleSpec& spec);

WeightedCloud initial_cloud(const VehicleSpec& spec);

struct VehicleResult
{
  std::string name;
  std::optional<TrimPoint> trim;
  CloudTrajectory trajectory;
  double seconds = 0.0;
};

struct CollisionResult
{
  std::string a, b;
  std::vector<CollisionSample> curve;
};

struct BarycenterOutcome
{
  std::vector<BarycenterResult> measures;
  std::vector<CollisionResult> curves;   ///< barycenter against each input and each other vehicle
};

struct RunResult
{
  std::vector<VehicleResult> vehicles;
  std::vector<CollisionResult> collisions;
  std::optional<BarycenterOutcome> barycenter;
};

/// All computation of a run, no I/O. `workers` < 0 keeps the scenario's setting.
RunResult simulate(const Scenario& scenario, int workers = -1);

/// Collision curve between a barycentric measure sequence and a trajectory.
std::vector<CollisionSample> measure_collision_curve(const std::vector<BarycenterResult>& measures,
                                                     const CloudTrajectory& traj, const std::vector<Index>& dims,
                                                     const CollisionOptions& options);

struct RunOptions
{
  int workers = -1;
  bool write_trajectories = true;
};

/**
 * @brief simulate() plus every export and `manifest.json` in out_dir.
 *
 * The manifest embeds the validated scenario, so `run` on the manifest
 * reproduces the outputs bitwise. On failure the manifest records the stage.
 */
RunResult run(const Scenario& scenario, const std::string& out_dir, const RunOptions& options = {});

/// Marginal series for one vehicle and coordinate set over all output times (`t,c1[,c2],density`).
void write_marginal_series(const CloudTrajectory& traj, const std::vector<Index>& dims, const MarginalOptions& options,
                           const std::string& path);

void write_collision_csv(const std::vector<CollisionSample>& curve, const std::string& path);

}  // namespace lreach
