#include "lreach/control.hpp"

#include "json.hpp"

#include <fstream>
#include <limits>
#include <sstream>

namespace lreach {

namespace {

using nlohmann::json;

constexpr double kCenterBox = 1e6;
constexpr double kCenterRegularization = 1e-8;

// max r s.t. H_i x + ||H_i|| r <= h_i, solved as a slightly regularized QP inside a large box.
void chebyshev_center(PwaRegion& region, Index dim, std::size_t index)
{
  const Index rows = region.h_matrix.rows();
  std::vector<Index> kept;
  for (Index i = 0; i < rows; ++i) {
    const double norm = region.h_matrix.row(i).norm();
    if (norm == 0.0) {
      if (region.h_vector(i) < 0.0) {
        std::ostringstream os;
        os << "pwa: region " << index << " is empty (row " << i << " reads 0 <= " << region.h_vector(i) << ")";
        throw ValidationError(os.str());
      }
      continue;
    }
    kept.push_back(i);
  }
  const Index n = dim + 1;
  const Index m = static_cast<Index>(kept.size()) + 2 * n;
  Matrix g = Matrix::Zero(m, n);
  Vector h(m);
  for (std::size_t k = 0; k < kept.size(); ++k) {
    const Index i = kept[k];
    g.row(static_cast<Index>(k)).head(dim) = region.h_matrix.row(i);
    g(static_cast<Index>(k), dim) = region.h_matrix.row(i).norm();
    h(static_cast<Index>(k)) = region.h_vector(i);
  }
  for (Index j = 0; j < n; ++j) {
    const Index r0 = static_cast<Index>(kept.size()) + 2 * j;
    g(r0, j) = 1.0;
    g(r0 + 1, j) = -1.0;
    h(r0) = kCenterBox;
    h(r0 + 1) = kCenterBox;
  }
  Vector f = Vector::Zero(n);
  f(dim) = -1.0;
  const QpResult res = qp_solve(kCenterRegularization * Matrix::Identity(n, n), f, g, h);
  region.center = res.z.head(dim);
  region.radius = res.z(dim);
  if (region.radius < -1e-9) {
    std::ostringstream os;
    os << "pwa: region " << index << " is empty (Chebyshev radius " << region.radius << ")";
    throw ValidationError(os.str());
  }
}

Matrix read_matrix(const json& j, const std::string& where, Index rows, Index cols)
{
  if (!j.is_array()) throw ValidationError("pwa: " + where + " must be an array of rows");
  if (rows >= 0 && static_cast<Index>(j.size()) != rows) {
    throw ValidationError("pwa: " + where + " must have " + std::to_string(rows) + " rows");
  }
  Matrix out(static_cast<Index>(j.size()), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    const json& row = j[r];
    const std::string at = where + "[" + std::to_string(r) + "]";
    if (!row.is_array() || static_cast<Index>(row.size()) != cols) {
      throw ValidationError("pwa: " + at + " must hold " + std::to_string(cols) + " numbers");
    }
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (!row[c].is_number()) throw ValidationError("pwa: " + at + "[" + std::to_string(c) + "] is not a number");
      out(static_cast<Index>(r), static_cast<Index>(c)) = row[c].get<double>();
    }
  }
  return out;
}

Vector read_vector(const json& j, const std::string& where, Index size)
{
  if (!j.is_array() || (size >= 0 && static_cast<Index>(j.size()) != size)) {
    throw ValidationError("pwa: " + where + " must be an array of " + std::to_string(size) + " numbers");
  }
  Vector out(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ValidationError("pwa: " + where + "[" + std::to_string(i) + "] is not a number");
    out(static_cast<Index>(i)) = j[i].get<double>();
  }
  return out;
}

json write_matrix(const Matrix& m)
{
  json rows = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

json write_vector(const Vector& v)
{
  json out = json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

}  // namespace

PwaPolicy::PwaPolicy(Index dim, Index input_dim, std::vector<PwaRegion> regions)
    : dim_(dim), input_dim_(input_dim), regions_(std::move(regions))
{
  if (dim <= 0 || input_dim <= 0) throw ValidationError("pwa: dimensions must be positive");
  if (regions_.empty()) throw ValidationError("pwa: policy has no regions");
  for (std::size_t j = 0; j < regions_.size(); ++j) {
    PwaRegion& r = regions_[j];
    const std::string at = "pwa: region " + std::to_string(j);
    if (r.h_matrix.cols() != dim && r.h_matrix.rows() > 0) throw ValidationError(at + ": H has the wrong width");
    if (r.h_matrix.rows() == 0) r.h_matrix.resize(0, dim);
    if (r.h_vector.size() != r.h_matrix.rows()) throw ValidationError(at + ": h does not match H");
    if (r.gain.rows() != input_dim || r.gain.cols() != dim) throw ValidationError(at + ": Gamma has the wrong shape");
    if (r.offset.size() != input_dim) throw ValidationError(at + ": gamma has the wrong size");
    if (!r.h_matrix.allFinite() || !r.h_vector.allFinite() || !r.gain.allFinite() || !r.offset.allFinite()) {
      throw ValidationError(at + ": non-finite entries");
    }
    chebyshev_center(r, dim, j);
  }
}

Index PwaPolicy::locate(const Vector& x) const
{
  if (x.size() != dim_) throw ValidationError("pwa: state dimension mismatch");
  for (std::size_t j = 0; j < regions_.size(); ++j) {
    const PwaRegion& r = regions_[j];
    if (r.h_matrix.rows() == 0 || (r.h_matrix * x - r.h_vector).maxCoeff() <= 1e-9) return static_cast<Index>(j);
  }
  return -1;
}

Index PwaPolicy::select(const Vector& x, EvalInfo* info) const
{
  const Index j = locate(x);
  if (j >= 0) return j;
  if (info) info->policy_fallback = true;
  Index best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < regions_.size(); ++k) {
    const double dist = (x - regions_[k].center).squaredNorm();
    if (dist < best_dist) {
      best_dist = dist;
      best = static_cast<Index>(k);
    }
  }
  return best;
}

Vector PwaPolicy::evaluate(const Vector& x, EvalInfo* info) const
{
  const PwaRegion& r = regions_[static_cast<std::size_t>(select(x, info))];
  return r.gain * x + r.offset;
}

PwaPolicy parse_pwa_policy(const std::string& text)
{
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("pwa: malformed document: ") + e.what());
  }
  if (!doc.is_object()) throw ValidationError("pwa: document must be an object");
  for (const auto& item : doc.items()) {
    if (item.key() != "dim" && item.key() != "input_dim" && item.key() != "regions") {
      throw ValidationError("pwa: unknown field '" + item.key() + "'");
    }
  }
  if (!doc.contains("dim") || !doc["dim"].is_number_integer()) throw ValidationError("pwa: 'dim' must be an integer");
  if (!doc.contains("input_dim") || !doc["input_dim"].is_number_integer()) {
    throw ValidationError("pwa: 'input_dim' must be an integer");
  }
  if (!doc.contains("regions") || !doc["regions"].is_array()) throw ValidationError("pwa: 'regions' must be an array");
  const Index d = doc["dim"].get<Index>();
  const Index m = doc["input_dim"].get<Index>();
  if (d <= 0 || m <= 0) throw ValidationError("pwa: 'dim' and 'input_dim' must be positive");
  const json& list = doc["regions"];
  if (list.empty()) throw ValidationError("pwa: 'regions' is empty");

  std::vector<PwaRegion> regions;
  for (std::size_t j = 0; j < list.size(); ++j) {
    const json& r = list[j];
    const std::string at = "regions[" + std::to_string(j) + "]";
    if (!r.is_object()) throw ValidationError("pwa: " + at + " must be an object");
    for (const auto& item : r.items()) {
      if (item.key() != "H" && item.key() != "h" && item.key() != "Gamma" && item.key() != "gamma") {
        throw ValidationError("pwa: " + at + ": unknown field '" + item.key() + "'");
      }
    }
    for (const char* key : {"H", "h", "Gamma", "gamma"}) {
      if (!r.contains(key)) throw ValidationError("pwa: " + at + ": missing field '" + key + "'");
    }
    PwaRegion region;
    region.h_matrix = read_matrix(r["H"], at + ".H", -1, d);
    region.h_vector = read_vector(r["h"], at + ".h", region.h_matrix.rows());
    region.gain = read_matrix(r["Gamma"], at + ".Gamma", m, d);
    region.offset = read_vector(r["gamma"], at + ".gamma", m);
    regions.push_back(std::move(region));
  }
  return PwaPolicy(d, m, std::move(regions));
}

std::string format_pwa_policy(const PwaPolicy& policy)
{
  json doc;
  doc["dim"] = policy.dim();
  doc["input_dim"] = policy.input_dim();
  json list = json::array();
  for (const PwaRegion& r : policy.regions()) {
    json item;
    item["H"] = write_matrix(r.h_matrix);
    item["h"] = write_vector(r.h_vector);
    item["Gamma"] = write_matrix(r.gain);
    item["gamma"] = write_vector(r.offset);
    list.push_back(std::move(item));
  }
  doc["regions"] = std::move(list);
  return doc.dump(2) + "\n";
}

PwaPolicy load_pwa_policy(const std::string& path)
{
  std::ifstream in(path);
  if (!in) throw ValidationError("pwa: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_pwa_policy(buf.str());
}

void save_pwa_policy(const PwaPolicy& policy, const std::string& path)
{
  std::ofstream out(path);
  if (!out) throw ValidationError("pwa: cannot write '" + path + "'");
  out << format_pwa_policy(policy);
}

}  // namespace lreach
