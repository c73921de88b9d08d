#include "lreach/scenario.hpp"

#include "lreach/log.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace lreach {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

/// A JSON value plus its path in the document, for strict reads with located errors.
class Node
{
public:
  Node(const json& value, std::string path) : value_(&value), path_(std::move(path)) {}

  [[noreturn]] void fail(const std::string& message) const { throw ValidationError(path_ + ": " + message); }

  const std::string& path() const { return path_; }
  const json& raw() const { return *value_; }

  void expect_object(std::initializer_list<const char*> allowed) const
  {
    if (!value_->is_object()) fail("expected an object");
    for (const auto& item : value_->items()) {
      if (std::find_if(allowed.begin(), allowed.end(), [&](const char* k) { return item.key() == k; }) == allowed.end()) {
        throw ValidationError(child_path(item.key()) + ": unknown field");
      }
    }
  }

  bool has(const std::string& key) const { return value_->contains(key); }

  Node at(const std::string& key) const
  {
    if (!value_->contains(key)) throw ValidationError(child_path(key) + ": required field missing");
    return Node((*value_)[key], child_path(key));
  }

  std::optional<Node> opt(const std::string& key) const
  {
    if (!value_->contains(key) || (*value_)[key].is_null()) return std::nullopt;
    return Node((*value_)[key], child_path(key));
  }

  std::size_t size() const
  {
    if (!value_->is_array()) fail("expected an array");
    return value_->size();
  }

  Node operator[](std::size_t i) const { return Node((*value_)[i], path_ + "[" + std::to_string(i) + "]"); }

  double number() const
  {
    if (!value_->is_number()) fail("expected a number");
    const double v = value_->get<double>();
    if (!std::isfinite(v)) fail("expected a finite number");
    return v;
  }

  double positive() const
  {
    const double v = number();
    if (!(v > 0.0)) fail("must be positive");
    return v;
  }

  Index integer() const
  {
    if (!value_->is_number_integer()) fail("expected an integer");
    return value_->get<Index>();
  }

  std::uint64_t unsigned_integer() const
  {
    if (!value_->is_number_integer() || value_->get<long long>() < 0) {
      if (!value_->is_number_unsigned()) fail("expected a nonnegative integer");
    }
    return value_->get<std::uint64_t>();
  }

  std::string string() const
  {
    if (!value_->is_string()) fail("expected a string");
    return value_->get<std::string>();
  }

  bool boolean() const
  {
    if (!value_->is_boolean()) fail("expected true or false");
    return value_->get<bool>();
  }

  Vector vector(Index expected = -1) const
  {
    const std::size_t n = size();
    if (expected >= 0 && static_cast<Index>(n) != expected) fail("expected " + std::to_string(expected) + " entries");
    Vector v(static_cast<Index>(n));
    for (std::size_t i = 0; i < n; ++i) v(static_cast<Index>(i)) = (*this)[i].number();
    return v;
  }

  std::vector<double> doubles() const
  {
    const Vector v = vector();
    return {v.data(), v.data() + v.size()};
  }

  std::vector<Index> indices() const
  {
    std::vector<Index> out;
    for (std::size_t i = 0; i < size(); ++i) out.push_back((*this)[i].integer());
    return out;
  }

  Matrix matrix(Index rows = -1, Index cols = -1) const
  {
    const std::size_t n = size();
    if (rows >= 0 && static_cast<Index>(n) != rows) fail("expected " + std::to_string(rows) + " rows");
    if (n == 0) fail("expected a nonempty matrix");
    const Index c = static_cast<Index>((*this)[0].size());
    if (cols >= 0 && c != cols) fail("expected " + std::to_string(cols) + " columns");
    Matrix m(static_cast<Index>(n), c);
    for (std::size_t r = 0; r < n; ++r) m.row(static_cast<Index>(r)) = (*this)[r].vector(c).transpose();
    return m;
  }

  /// A weight matrix given as a scalar (times I), a diagonal, or a full matrix.
  Matrix weight(Index order) const
  {
    if (value_->is_number()) return number() * Matrix::Identity(order, order);
    if (value_->is_array() && !value_->empty() && (*value_)[0].is_number()) return vector(order).asDiagonal();
    return matrix(order, order);
  }

private:
  std::string child_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* value_;
  std::string path_;
};

std::vector<std::string> coordinate_names(const Plant& plant)
{
  if (std::holds_alternative<KinematicParams>(plant)) return {"x", "y", "v", "psi"};
  if (std::holds_alternative<DynamicParams>(plant)) return {"vx", "vy", "vpsi", "epsi", "ey", "s"};
  std::vector<std::string> n;
  for (Index k = 0; k < state_dim(plant); ++k) n.push_back("x" + std::to_string(k + 1));
  return n;
}

Plant parse_model(const Node& n)
{
  const std::string type = n.at("type").string();
  if (type == "kinematic") {
    n.expect_object({"type", "l_front", "l_rear"});
    KinematicParams p;
    if (auto v = n.opt("l_front")) p.l_front = v->positive();
    if (auto v = n.opt("l_rear")) p.l_rear = v->positive();
    return p;
  }
  if (type == "dynamic") {
    n.expect_object({"type", "a", "b", "c", "mass", "yaw_inertia", "cornering_stiffness", "friction", "curvature", "gravity"});
    DynamicParams p;
    if (auto v = n.opt("a")) p.a = v->positive();
    if (auto v = n.opt("b")) p.b = v->positive();
    if (auto v = n.opt("c")) p.c = v->positive();
    if (auto v = n.opt("mass")) p.mass = v->positive();
    if (auto v = n.opt("yaw_inertia")) p.yaw_inertia = v->positive();
    if (auto v = n.opt("cornering_stiffness")) p.cornering_stiffness = v->positive();
    if (auto v = n.opt("friction")) {
      p.friction = v->number();
      if (!(p.friction > 0.0 && p.friction <= 1.5)) v->fail("must lie in (0, 1.5]");
    }
    if (auto v = n.opt("curvature")) p.curvature = v->number();
    if (auto v = n.opt("gravity")) p.gravity = v->positive();
    return p;
  }
  if (type == "affine") {
    n.expect_object({"type", "a", "b", "offset"});
    AffinePlant p;
    p.a = n.at("a").matrix();
    if (p.a.rows() != p.a.cols()) n.at("a").fail("must be square");
    p.b = n.at("b").matrix(p.a.rows());
    p.offset = n.opt("offset") ? n.at("offset").vector(p.a.rows()) : Vector::Zero(p.a.rows());
    try {
      p.validate();
    } catch (const ValidationError& e) {
      n.fail(e.what());
    }
    return p;
  }
  n.at("type").fail("unknown model type '" + type + "' (kinematic, dynamic, affine)");
}

ScheduleComponent parse_component(const Node& n)
{
  n.expect_object({"kind", "value", "amplitude", "frequency", "phase", "times", "values"});
  ScheduleComponent c;
  const std::string kind = n.opt("kind") ? n.at("kind").string() : "constant";
  if (kind == "constant") {
    c.kind = ScheduleComponent::Kind::constant;
  } else if (kind == "sine") {
    c.kind = ScheduleComponent::Kind::sine;
  } else if (kind == "table") {
    c.kind = ScheduleComponent::Kind::table;
  } else {
    n.at("kind").fail("unknown kind '" + kind + "' (constant, sine, table)");
  }
  if (auto v = n.opt("value")) c.value = v->number();
  if (auto v = n.opt("amplitude")) c.amplitude = v->number();
  if (auto v = n.opt("frequency")) c.frequency = v->number();
  if (auto v = n.opt("phase")) c.phase = v->number();
  if (auto v = n.opt("times")) c.times = v->doubles();
  if (auto v = n.opt("values")) c.values = v->doubles();
  try {
    c.validate();
  } catch (const ValidationError& e) {
    n.fail(e.what());
  }
  return c;
}

PolicySpec parse_policy(const Node& n, const Plant& plant, const GaussianSpec& init, const std::string& base_dir)
{
  PolicySpec p;
  const std::string type = n.at("type").string();
  const Index d = state_dim(plant), m = input_dim(plant);
  if (type == "open_loop") {
    n.expect_object({"type", "inputs"});
    const Node inputs = n.at("inputs");
    if (static_cast<Index>(inputs.size()) != m) inputs.fail("expected one schedule per input (" + std::to_string(m) + ")");
    for (std::size_t k = 0; k < inputs.size(); ++k) p.schedule.components.push_back(parse_component(inputs[k]));
    p.kind = PolicySpec::Kind::open_loop;
    return p;
  }
  if (type == "pwa") {
    n.expect_object({"type", "file"});
    fs::path file = n.at("file").string();
    if (file.is_relative()) file = fs::path(base_dir) / file;
    p.pwa_file = fs::weakly_canonical(file).string();
    p.kind = PolicySpec::Kind::pwa;
    return p;
  }
  if (type != "mpc") n.at("type").fail("unknown policy type '" + type + "' (open_loop, pwa, mpc)");

  n.expect_object({"type", "vx", "ey_center", "q", "r", "s", "prediction_horizon", "control_horizon", "dt", "u_lo", "u_hi",
                   "ey_halfwidth", "ey_index", "u_trim"});
  p.kind = PolicySpec::Kind::mpc;
  const bool dynamic = std::holds_alternative<DynamicParams>(plant);
  if (std::holds_alternative<KinematicParams>(plant)) n.fail("mpc policies need a dynamic or affine model");
  if (dynamic) {
    // The lateral window and the trim sit at the initial mean e_y unless given.
    const double center = n.opt("ey_center") ? n.at("ey_center").number() : init.mean()(dyn::EY);
    p.mpc = MpcConfig::dynamic_default(center);
    if (auto v = n.opt("vx")) p.vx = v->positive();
  } else {
    p.mpc.q = n.at("q").weight(d);
    p.mpc.r = n.at("r").weight(m);
    p.mpc.s = Matrix::Zero(m, m);
    p.mpc.u_lo = n.at("u_lo").vector(m);
    p.mpc.u_hi = n.at("u_hi").vector(m);
    p.mpc.ey_index = -1;
    if (auto v = n.opt("ey_center")) p.mpc.ey_center = v->number();
    if (n.opt("vx")) n.at("vx").fail("only used with dynamic models");
  }
  if (auto v = n.opt("q")) p.mpc.q = v->weight(d);
  if (auto v = n.opt("r")) p.mpc.r = v->weight(m);
  if (auto v = n.opt("s")) p.mpc.s = v->weight(m);
  if (auto v = n.opt("prediction_horizon")) p.mpc.prediction_horizon = v->positive();
  if (auto v = n.opt("control_horizon")) p.mpc.control_horizon = v->positive();
  if (auto v = n.opt("dt")) p.mpc.dt = v->positive();
  if (auto v = n.opt("u_lo")) p.mpc.u_lo = v->vector(m);
  if (auto v = n.opt("u_hi")) p.mpc.u_hi = v->vector(m);
  if (auto v = n.opt("ey_halfwidth")) p.mpc.ey_halfwidth = v->positive();
  if (auto v = n.opt("ey_index")) {
    p.mpc.ey_index = v->integer();
    if (p.mpc.ey_index < -1 || p.mpc.ey_index >= d) v->fail("out of range");
  }
  if (auto v = n.opt("u_trim")) {
    if (dynamic) v->fail("dynamic trims are solved for, not given");
    p.u_trim = v->vector(m);
  } else if (!dynamic) {
    p.u_trim = Vector::Zero(m);
  }
  try {
    p.mpc.validate(d, m);
  } catch (const ValidationError& e) {
    n.fail(e.what());
  }
  return p;
}

GaussianSpec parse_init(const Node& n, Index d)
{
  n.expect_object({"mean", "covariance", "variances"});
  const Vector mean = n.at("mean").vector(d);
  if (n.has("covariance") == n.has("variances")) n.fail("give exactly one of covariance, variances");
  try {
    if (auto v = n.opt("variances")) {
      const Vector var = v->vector(d);
      for (Index k = 0; k < d; ++k) {
        if (!(var(k) > 0.0)) (*v)[static_cast<std::size_t>(k)].fail("variance must be positive");
      }
      return GaussianSpec::diagonal(mean, var);
    }
    return GaussianSpec(mean, n.at("covariance").matrix(d, d));
  } catch (const ValidationError& e) {
    const std::string field = n.has("variances") ? "variances" : "covariance";
    throw ValidationError(n.path() + "." + field + ": " + e.what());
  }
}

void check_coordinates(const Node& n, const std::vector<Index>& dims, const std::vector<VehicleSpec>& vehicles,
                       std::size_t expected)
{
  if (expected && dims.size() != expected) n.fail("expected " + std::to_string(expected) + " coordinates");
  std::set<Index> seen;
  for (Index d : dims) {
    if (!seen.insert(d).second) n.fail("coordinates must be distinct");
    for (const VehicleSpec& v : vehicles) {
      if (d < 0 || d >= state_dim(v.model)) n.fail("coordinate " + std::to_string(d) + " out of range for vehicle '" + v.name + "'");
    }
  }
}

std::vector<std::string> split_path(const std::string& path)
{
  std::vector<std::string> parts;
  std::stringstream ss(path);
  std::string item;
  while (std::getline(ss, item, '.')) parts.push_back(item);
  return parts;
}

void apply_overrides(json& doc, const ScenarioOverrides& o)
{
  for (const auto& [key, text] : o.set) {
    json value;
    try {
      value = json::parse(text);
    } catch (const json::parse_error&) {
      value = text;
    }
    json* node = &doc;
    const std::vector<std::string> parts = split_path(key);
    if (parts.empty()) throw ValidationError("--set: empty key");
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const std::string& part = parts[i];
      const bool last = i + 1 == parts.size();
      if (node->is_array()) {
        std::size_t idx = 0;
        try {
          idx = std::stoul(part);
        } catch (const std::exception&) {
          throw ValidationError("--set " + key + ": '" + part + "' is not an array index");
        }
        if (idx >= node->size()) throw ValidationError("--set " + key + ": index " + part + " out of range");
        node = &(*node)[idx];
      } else if (node->is_object() || node->is_null()) {
        node = &(*node)[part];
      } else {
        throw ValidationError("--set " + key + ": cannot descend into a scalar");
      }
      if (last) *node = value;
    }
  }
  if (o.seed || o.samples) {
    if (!doc.contains("vehicles") || !doc["vehicles"].is_array()) throw ValidationError("vehicles: required field missing");
    for (std::size_t k = 0; k < doc["vehicles"].size(); ++k) {
      if (o.seed) doc["vehicles"][k]["seed"] = *o.seed + k;
      if (o.samples) doc["vehicles"][k]["samples"] = *o.samples;
    }
  }
  if (o.collision_mode) {
    if (!doc.contains("collision")) throw ValidationError("--mode: the scenario has no collision section");
    doc["collision"]["mode"] = *o.collision_mode;
  }
  if (o.eps) {
    if (!doc.contains("barycenter")) throw ValidationError("--eps: the scenario has no barycenter section");
    doc["barycenter"]["eps"] = *o.eps;
  }
}

}  // namespace

const VehicleSpec& Scenario::vehicle(const std::string& name) const
{
  return vehicles[static_cast<std::size_t>(vehicle_index(name))];
}

Index Scenario::vehicle_index(const std::string& name) const
{
  for (std::size_t k = 0; k < vehicles.size(); ++k) {
    if (vehicles[k].name == name) return static_cast<Index>(k);
  }
  throw ValidationError("unknown vehicle '" + name + "'");
}

Scenario parse_scenario(const std::string& text, const std::string& base_dir, const ScenarioOverrides& overrides)
{
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("malformed JSON: ") + e.what());
  }
  std::string base = base_dir;
  if (doc.is_object() && doc.contains("manifest_version")) {
    if (!doc.contains("scenario")) throw ValidationError("manifest: no embedded scenario");
    doc = json(doc["scenario"]);
  }
  apply_overrides(doc, overrides);

  const Node root(doc, "");
  root.expect_object({"name", "t0", "tf", "output_dt", "propagation", "vehicles", "marginals", "collision", "barycenter"});
  Scenario sc;
  sc.base_dir = base;
  sc.name = root.at("name").string();
  if (auto v = root.opt("t0")) sc.t0 = v->number();
  sc.tf = root.at("tf").number();
  if (!(sc.tf > sc.t0)) root.at("tf").fail("must exceed t0");
  if (auto v = root.opt("output_dt")) sc.output_dt = v->positive();

  if (auto p = root.opt("propagation")) {
    p->expect_object({"rtol", "atol", "max_step", "workers", "weight_mode", "max_frozen_fraction", "max_steps"});
    if (auto v = p->opt("rtol")) sc.propagation.rtol = v->positive();
    if (auto v = p->opt("atol")) sc.propagation.atol = v->positive();
    if (auto v = p->opt("max_step")) sc.propagation.max_step = v->positive();
    if (auto v = p->opt("workers")) {
      const Index w = v->integer();
      if (w < 0) v->fail("must be nonnegative");
      sc.propagation.workers = static_cast<int>(w);
    }
    if (auto v = p->opt("weight_mode")) {
      const std::string m = v->string();
      if (m == "log") {
        sc.propagation.weight_mode = WeightMode::log;
      } else if (m == "linear") {
        sc.propagation.weight_mode = WeightMode::linear;
      } else {
        v->fail("expected 'log' or 'linear'");
      }
    }
    if (auto v = p->opt("max_frozen_fraction")) sc.propagation.max_frozen_fraction = v->number();
    if (auto v = p->opt("max_steps")) sc.propagation.max_steps = v->integer();
  }
  sc.propagation.t_grid = PropagationSettings::uniform_grid(sc.t0, sc.tf, sc.output_dt);
  sc.propagation.validate();

  const Node vehicles = root.at("vehicles");
  if (vehicles.size() == 0) vehicles.fail("at least one vehicle required");
  std::set<std::string> names;
  for (std::size_t k = 0; k < vehicles.size(); ++k) {
    const Node v = vehicles[k];
    v.expect_object({"name", "model", "policy", "init", "samples", "seed", "divergence"});
    VehicleSpec spec;
    spec.name = v.at("name").string();
    if (spec.name.empty() || spec.name.find_first_of("/\\ ") != std::string::npos || spec.name == "barycenter") {
      v.at("name").fail("must be nonempty, without slashes or spaces, and not 'barycenter'");
    }
    if (!names.insert(spec.name).second) v.at("name").fail("duplicate vehicle name");
    spec.model = parse_model(v.at("model"));
    spec.init = parse_init(v.at("init"), state_dim(spec.model));
    spec.policy = parse_policy(v.at("policy"), spec.model, spec.init, base);
    spec.samples = v.at("samples").integer();
    if (spec.samples < 1) v.at("samples").fail("must be at least 1");
    if (auto s = v.opt("seed")) spec.seed = s->unsigned_integer();
    if (auto s = v.opt("divergence")) {
      const std::string m = s->string();
      if (m == "analytic") {
        spec.divergence = DivergenceMode::analytic;
      } else if (m == "finite_difference") {
        spec.divergence = DivergenceMode::finite_difference;
      } else {
        s->fail("expected 'analytic' or 'finite_difference'");
      }
    }
    if (spec.policy.kind == PolicySpec::Kind::pwa) {
      try {
        const PwaPolicy pwa = load_pwa_policy(spec.policy.pwa_file);
        if (pwa.dim() != state_dim(spec.model) || pwa.input_dim() != input_dim(spec.model)) {
          throw ValidationError("dimensions do not match the model");
        }
      } catch (const ValidationError& e) {
        throw ValidationError(v.path() + ".policy.file: " + e.what());
      }
    }
    sc.vehicles.push_back(std::move(spec));
  }

  if (auto m = root.opt("marginals")) {
    m->expect_object({"univariate", "bivariate", "mode", "bins_1d", "bins_2d"});
    if (auto u = m->opt("univariate")) {
      sc.marginals.univariate = u->indices();
      for (std::size_t i = 0; i < sc.marginals.univariate.size(); ++i) {
        check_coordinates((*u)[i], {sc.marginals.univariate[i]}, sc.vehicles, 1);
      }
    }
    if (auto b = m->opt("bivariate")) {
      for (std::size_t i = 0; i < b->size(); ++i) {
        sc.marginals.bivariate.push_back((*b)[i].indices());
        check_coordinates((*b)[i], sc.marginals.bivariate.back(), sc.vehicles, 2);
      }
    }
    if (auto v = m->opt("mode")) {
      const std::string mode = v->string();
      if (mode == "histogram") {
        sc.marginals.mode = MarginalMode::histogram;
      } else if (mode == "kernel") {
        sc.marginals.mode = MarginalMode::kernel;
      } else {
        v->fail("expected 'histogram' or 'kernel'");
      }
    }
    if (auto v = m->opt("bins_1d")) {
      sc.marginals.bins_1d = v->integer();
      if (sc.marginals.bins_1d < 1) v->fail("must be positive");
    }
    if (auto v = m->opt("bins_2d")) {
      sc.marginals.bins_2d = v->indices();
      if (sc.marginals.bins_2d.size() != 2 || sc.marginals.bins_2d[0] < 1 || sc.marginals.bins_2d[1] < 1) {
        v->fail("expected two positive bin counts");
      }
    }
  }

  if (auto c = root.opt("collision")) {
    c->expect_object({"dims", "mode", "support", "trim_quantile", "len_s", "len_ey", "pairs"});
    CollisionPlan plan;
    plan.dims = c->at("dims").indices();
    check_coordinates(c->at("dims"), plan.dims, sc.vehicles, 2);
    if (auto v = c->opt("mode")) {
      const std::string mode = v->string();
      if (mode == "support_product") {
        plan.options.mode = CollisionMode::support_product;
      } else if (mode == "footprint") {
        plan.options.mode = CollisionMode::footprint;
      } else {
        v->fail("expected 'support_product' or 'footprint'");
      }
    }
    if (auto v = c->opt("support")) {
      const std::string s = v->string();
      if (s == "axis_box") {
        plan.options.support = SupportKind::axis_box;
      } else if (s == "hull") {
        plan.options.support = SupportKind::hull;
      } else {
        v->fail("expected 'axis_box' or 'hull'");
      }
    }
    if (auto v = c->opt("trim_quantile")) {
      plan.options.trim_quantile = v->number();
      if (!(plan.options.trim_quantile >= 0.0 && plan.options.trim_quantile < 0.5)) v->fail("must lie in [0, 0.5)");
    }
    if (auto v = c->opt("len_s")) plan.options.len_s = v->positive();
    if (auto v = c->opt("len_ey")) plan.options.len_ey = v->positive();
    if (plan.options.mode == CollisionMode::footprint && !(plan.options.len_s > 0.0 && plan.options.len_ey > 0.0)) {
      c->fail("footprint mode needs len_s and len_ey");
    }
    if (auto v = c->opt("pairs")) {
      for (std::size_t i = 0; i < v->size(); ++i) {
        const Node pair = (*v)[i];
        if (pair.size() != 2) pair.fail("expected two vehicle names");
        const std::string a = pair[0].string(), b = pair[1].string();
        if (!names.count(a)) pair[0].fail("unknown vehicle '" + a + "'");
        if (!names.count(b)) pair[1].fail("unknown vehicle '" + b + "'");
        if (a == b) pair.fail("a vehicle cannot collide with itself");
        plan.pairs.emplace_back(a, b);
      }
    } else {
      for (std::size_t i = 0; i < sc.vehicles.size(); ++i) {
        for (std::size_t j = i + 1; j < sc.vehicles.size(); ++j) plan.pairs.emplace_back(sc.vehicles[i].name, sc.vehicles[j].name);
      }
    }
    sc.collision = plan;
  }

  if (auto b = root.opt("barycenter")) {
    b->expect_object({"inputs", "lambdas", "dims", "bins", "eps", "max_iter", "tol", "coordinate_names"});
    BarycenterPlan plan;
    const Node inputs = b->at("inputs");
    if (inputs.size() == 0) inputs.fail("at least one input required");
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      plan.inputs.push_back(inputs[i].string());
      if (!names.count(plan.inputs.back())) inputs[i].fail("unknown vehicle '" + plan.inputs.back() + "'");
    }
    plan.lambdas = b->at("lambdas").vector(static_cast<Index>(plan.inputs.size()));
    if ((plan.lambdas.array() < 0.0).any() || std::abs(plan.lambdas.sum() - 1.0) > 1e-12) {
      b->at("lambdas").fail("must be nonnegative and sum to 1");
    }
    plan.dims = b->at("dims").indices();
    check_coordinates(b->at("dims"), plan.dims, sc.vehicles, 2);
    if (auto v = b->opt("bins")) {
      plan.bins = v->indices();
      if (plan.bins.size() != 2 || plan.bins[0] < 1 || plan.bins[1] < 1) v->fail("expected two positive bin counts");
    }
    if (auto v = b->opt("eps")) {
      plan.eps = v->number();
      if (plan.eps < 0.0) v->fail("must be nonnegative (0 selects the default)");
    }
    if (auto v = b->opt("max_iter")) {
      plan.max_iter = v->integer();
      if (plan.max_iter < 1) v->fail("must be positive");
    }
    if (auto v = b->opt("tol")) plan.tol = v->positive();
    if (auto v = b->opt("coordinate_names")) {
      plan.coordinate_names.clear();
      for (std::size_t i = 0; i < v->size(); ++i) plan.coordinate_names.push_back((*v)[i].string());
      if (plan.coordinate_names.size() != 2) v->fail("expected two names");
    }
    if (sc.collision && sc.collision->dims != plan.dims) b->at("dims").fail("must equal collision.dims");
    sc.barycenter = plan;
  }

  // The canonical document carries resolved file paths so manifests re-run anywhere.
  for (std::size_t k = 0; k < sc.vehicles.size(); ++k) {
    if (sc.vehicles[k].policy.kind == PolicySpec::Kind::pwa) doc["vehicles"][k]["policy"]["file"] = sc.vehicles[k].policy.pwa_file;
  }
  sc.document = doc.dump(2);
  return sc;
}

Scenario load_scenario(const std::string& path, const ScenarioOverrides& overrides)
{
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const fs::path dir = fs::absolute(fs::path(path)).parent_path();
  return parse_scenario(ss.str(), dir.string(), overrides);
}

VehicleSetup build_vehicle(const VehicleSpec& spec)
{
  VehicleSetup setup;
  FeedbackPolicy policy;
  switch (spec.policy.kind) {
    case PolicySpec::Kind::open_loop:
      policy = spec.policy.schedule;
      break;
    case PolicySpec::Kind::pwa:
      policy = load_pwa_policy(spec.policy.pwa_file);
      break;
    case PolicySpec::Kind::mpc: {
      TrimPoint trim;
      if (const auto* dp = std::get_if<DynamicParams>(&spec.model)) {
        trim = find_trim(*dp, spec.policy.vx, spec.policy.mpc.ey_center, spec.policy.mpc);
      } else {
        trim = affine_trim(std::get<AffinePlant>(spec.model), spec.policy.u_trim);
      }
      const LtiPair lti = linearize(spec.model, trim);
      policy = std::make_shared<const OnlineMpcPolicy>(lti, spec.policy.mpc, trim);
      setup.trim = trim;
      break;
    }
  }
  if (policy_input_dim(policy) != input_dim(spec.model)) {
    throw ValidationError("vehicle '" + spec.name + "': policy and model input dimensions differ");
  }
  setup.field = std::make_shared<const ClosedLoopField>(spec.model, std::move(policy), spec.divergence);
  return setup;
}

WeightedCloud initial_cloud(const VehicleSpec& spec) { return sample_gaussian(spec.init, spec.samples, spec.seed); }

std::vector<CollisionSample> measure_collision_curve(const std::vector<BarycenterResult>& measures,
                                                     const CloudTrajectory& traj, const std::vector<Index>& dims,
                                                     const CollisionOptions& options)
{
  if (measures.size() != traj.clouds.size()) throw ValidationError("collision curve: output grids differ");
  std::vector<CollisionSample> curve;
  for (std::size_t k = 0; k < measures.size(); ++k) {
    const PointSet a{measures[k].measure.points, measures[k].measure.masses};
    curve.push_back({traj.clouds[k].time, collision_probability(a, project(traj.clouds[k], dims), options)});
  }
  return curve;
}

namespace {

std::string format_double(double v)
{
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

json trim_json(const TrimPoint& t)
{
  return {{"x", std::vector<double>(t.x.data(), t.x.data() + t.x.size())},
          {"u", std::vector<double>(t.u.data(), t.u.data() + t.u.size())},
          {"residual_norm", t.residual_norm},
          {"iterations", t.iterations}};
}

/// Shared body of simulate() and run(); writes exports only when out_dir is set.
class Pipeline
{
public:
  Pipeline(const Scenario& sc, int workers, const std::string* out_dir) : sc_(sc), out_(out_dir)
  {
    settings_ = sc.propagation;
    if (workers >= 0) settings_.workers = workers;
    if (out_) {
      fs::create_directories(*out_);
      manifest_ = {{"manifest_version", 1},
                   {"version", LREACH_VERSION},
                   {"scenario", json::parse(sc.document)},
                   {"artifacts", json::array()},
                   {"vehicles", json::array()},
                   {"status", "running"}};
    }
  }

  RunResult execute()
  {
    try {
      stage_ = "propagation";
      for (const VehicleSpec& v : sc_.vehicles) propagate_vehicle(v);
      stage_ = "marginals";
      if (out_) write_marginals();
      stage_ = "collision";
      if (sc_.collision) collisions();
      stage_ = "barycenter";
      if (sc_.barycenter) barycenter_stage();
    } catch (const std::exception& e) {
      if (out_) {
        manifest_["status"] = "failed";
        manifest_["failed_stage"] = stage_;
        manifest_["error"] = e.what();
        write_manifest();
      }
      throw;
    }
    if (out_) {
      manifest_["status"] = "complete";
      write_manifest();
    }
    return std::move(result_);
  }

private:
  const CloudTrajectory& trajectory(const std::string& name) const
  {
    return result_.vehicles[static_cast<std::size_t>(sc_.vehicle_index(name))].trajectory;
  }

  void artifact(const std::string& kind, const std::string& rel, json extra = json::object())
  {
    extra["kind"] = kind;
    extra["path"] = rel;
    manifest_["artifacts"].push_back(extra);
  }

  std::string path(const std::string& rel) const
  {
    const fs::path p = fs::path(*out_) / rel;
    fs::create_directories(p.parent_path());
    return p.string();
  }

  void propagate_vehicle(const VehicleSpec& v)
  {
    const VehicleSetup setup = build_vehicle(v);
    const WeightedCloud cloud0 = initial_cloud(v);
    const auto start = std::chrono::steady_clock::now();
    VehicleResult r;
    r.name = v.name;
    r.trim = setup.trim;
    r.trajectory = propagate(cloud0, *setup.field, settings_);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log::info("vehicle " + v.name + ": " + std::to_string(v.samples) + " samples in " + std::to_string(r.seconds) + " s, " +
              std::to_string(r.trajectory.count(flag_policy_fallback)) + " with policy fallback, " +
              std::to_string(r.trajectory.count(flag_frozen)) + " frozen");
    if (out_) {
      json entry = {{"name", v.name},
                    {"seed", v.seed},
                    {"samples", v.samples},
                    {"policy_fallback_samples", r.trajectory.count(flag_policy_fallback)},
                    {"frozen_samples", r.trajectory.count(flag_frozen)}};
      if (r.trim) entry["trim"] = trim_json(*r.trim);
      manifest_["vehicles"].push_back(entry);
      const std::string rel = "trajectories/" + v.name + ".csv";
      write_trajectory_csv(r.trajectory, path(rel));
      artifact("trajectory", rel, {{"vehicle", v.name}});
    }
    result_.vehicles.push_back(std::move(r));
  }

  void write_marginals()
  {
    for (std::size_t k = 0; k < sc_.vehicles.size(); ++k) {
      const VehicleSpec& v = sc_.vehicles[k];
      const std::vector<std::string> names = coordinate_names(v.model);
      const CloudTrajectory& traj = result_.vehicles[k].trajectory;
      MarginalOptions mo;
      mo.mode = sc_.marginals.mode;
      for (Index d : sc_.marginals.univariate) {
        mo.bins = {sc_.marginals.bins_1d};
        const std::string rel = "marginals/" + v.name + "_" + names[static_cast<std::size_t>(d)] + ".csv";
        write_marginal_series(traj, {d}, mo, path(rel));
        artifact("marginal", rel, {{"vehicle", v.name}, {"dims", {d}}});
      }
      for (const auto& dims : sc_.marginals.bivariate) {
        mo.bins = sc_.marginals.bins_2d;
        const std::string rel = "marginals/" + v.name + "_" + names[static_cast<std::size_t>(dims[0])] + "_" +
                                names[static_cast<std::size_t>(dims[1])] + ".csv";
        write_marginal_series(traj, dims, mo, path(rel));
        artifact("marginal", rel, {{"vehicle", v.name}, {"dims", dims}});
      }
    }
  }

  void collisions()
  {
    for (const auto& [a, b] : sc_.collision->pairs) {
      CollisionResult c{a, b, collision_curve(trajectory(a), trajectory(b), sc_.collision->dims, sc_.collision->options)};
      if (out_) {
        const std::string rel = "collisions/" + a + "__" + b + ".csv";
        write_collision_csv(c.curve, path(rel));
        artifact("collision", rel, {{"a", a}, {"b", b}});
      }
      result_.collisions.push_back(std::move(c));
    }
  }

  void barycenter_stage()
  {
    const BarycenterPlan& plan = *sc_.barycenter;
    std::vector<const CloudTrajectory*> inputs;
    for (const std::string& n : plan.inputs) inputs.push_back(&trajectory(n));
    BarycentricOptions bo;
    bo.bins = plan.bins;
    bo.eps = plan.eps;
    bo.max_iter = plan.max_iter;
    bo.tol = plan.tol;
    bo.workers = settings_.workers;
    const Vector lambdas = plan.lambdas;
    BarycenterOutcome outcome;
    outcome.measures = barycentric_trajectory(inputs, plan.dims, [lambdas](double) { return lambdas; }, bo);
    const CollisionOptions options = sc_.collision ? sc_.collision->options : CollisionOptions{};
    for (const VehicleSpec& v : sc_.vehicles) {
      outcome.curves.push_back({"barycenter", v.name, measure_collision_curve(outcome.measures, trajectory(v.name), plan.dims, options)});
    }
    if (out_) {
      json index = json::array();
      for (std::size_t k = 0; k < outcome.measures.size(); ++k) {
        const BarycenterResult& r = outcome.measures[k];
        std::ostringstream name;
        name << "barycenter/measure_" << std::setw(4) << std::setfill('0') << k << ".csv";
        write_measure_csv(r.measure, plan.coordinate_names, path(name.str()));
        const Vector mean = r.measure.mean();
        index.push_back({{"t", result_.vehicles.front().trajectory.clouds[k].time},
                         {"file", name.str().substr(std::string("barycenter/").size())},
                         {"mean", std::vector<double>(mean.data(), mean.data() + mean.size())},
                         {"iterations", r.iterations},
                         {"converged", r.converged},
                         {"eps", r.eps}});
        artifact("barycenter_measure", name.str(), {{"t", result_.vehicles.front().trajectory.clouds[k].time}});
      }
      std::ofstream(path("barycenter/index.json")) << index.dump(2) << '\n';
      artifact("barycenter_index", "barycenter/index.json");
      for (const CollisionResult& c : outcome.curves) {
        const std::string rel = "collisions/barycenter__" + c.b + ".csv";
        write_collision_csv(c.curve, path(rel));
        artifact("collision", rel, {{"a", "barycenter"}, {"b", c.b}});
      }
    }
    result_.barycenter = std::move(outcome);
  }

  void write_manifest() const { std::ofstream(path("manifest.json")) << manifest_.dump(2) << '\n'; }

  const Scenario& sc_;
  const std::string* out_;
  PropagationSettings settings_;
  json manifest_;
  std::string stage_;
  RunResult result_;
};

}  // namespace

RunResult simulate(const Scenario& scenario, int workers) { return Pipeline(scenario, workers, nullptr).execute(); }

RunResult run(const Scenario& scenario, const std::string& out_dir, const RunOptions& options)
{
  return Pipeline(scenario, options.workers, &out_dir).execute();
}

void write_marginal_series(const CloudTrajectory& traj, const std::vector<Index>& dims, const MarginalOptions& options,
                           const std::string& path)
{
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  out << std::setprecision(17);
  out << (dims.size() == 1 ? "t,c1,density\n" : "t,c1,c2,density\n");
  for (const WeightedCloud& c : traj.clouds) {
    DensityGrid g;
    try {
      g = marginal(c, dims, options);
    } catch (const ValidationError& e) {
      log::warn("marginal at t = " + format_double(c.time) + " skipped: " + e.what());
      continue;
    }
    for (Index k = 0; k < g.cells(); ++k) {
      const Vector ctr = g.center(k);
      out << c.time;
      for (Index a = 0; a < ctr.size(); ++a) out << ',' << ctr(a);
      out << ',' << g.values(k) << '\n';
    }
  }
}

void write_collision_csv(const std::vector<CollisionSample>& curve, const std::string& path)
{
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  out << std::setprecision(17) << "t,p\n";
  for (const CollisionSample& s : curve) out << s.t << ',' << s.p << '\n';
}

}  // namespace lreach
