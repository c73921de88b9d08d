#include "lreach/core.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>
#include <vector>

namespace lreach {

Matrix cholesky(const Matrix& a)
{
  if (a.rows() != a.cols()) throw ValidationError("cholesky: matrix is not square");
  const Index n = a.rows();
  Matrix l = Matrix::Zero(n, n);
  for (Index j = 0; j < n; ++j) {
    double d = a(j, j) - l.row(j).head(j).squaredNorm();
    if (!(d > 0.0) || !std::isfinite(d)) {
      std::ostringstream os;
      os << "cholesky: matrix is not positive definite (pivot " << j << " = " << d << ")";
      throw NotPositiveDefinite(os.str(), j);
    }
    l(j, j) = std::sqrt(d);
    for (Index i = j + 1; i < n; ++i) {
      l(i, j) = (a(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / l(j, j);
    }
  }
  return l;
}

GaussianSpec::GaussianSpec(Vector mean, Matrix covariance)
    : mean_(std::move(mean)), covariance_(std::move(covariance))
{
  const Index d = mean_.size();
  if (d == 0) throw ValidationError("gaussian: empty mean");
  if (covariance_.rows() != d || covariance_.cols() != d) {
    std::ostringstream os;
    os << "gaussian: covariance is " << covariance_.rows() << "x" << covariance_.cols()
       << " but mean has dimension " << d;
    throw ValidationError(os.str());
  }
  if (!mean_.allFinite() || !covariance_.allFinite()) throw ValidationError("gaussian: non-finite entries");

  const double scale = covariance_.cwiseAbs().maxCoeff();
  const double asym = (covariance_ - covariance_.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-12 * scale) throw ValidationError("gaussian: covariance is not symmetric");

  Eigen::SelfAdjointEigenSolver<Matrix> eig(covariance_, Eigen::EigenvaluesOnly);
  const Vector& ev = eig.eigenvalues();
  const double max_ev = ev.maxCoeff();
  for (Index k = 0; k < d; ++k) {
    if (!(ev(k) > 0.0) || ev(k) <= 1e-12 * max_ev) {
      std::ostringstream os;
      os << "gaussian: covariance is not positive definite (eigenvalue " << k << " = " << ev(k) << ")";
      throw ValidationError(os.str());
    }
  }

  chol_ = cholesky(covariance_);
  log_norm_ = -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi)
              - chol_.diagonal().array().log().sum();
}

GaussianSpec GaussianSpec::diagonal(const Vector& mean, const Vector& variances)
{
  if (mean.size() != variances.size()) throw ValidationError("gaussian: mean and variance sizes differ");
  return GaussianSpec(mean, variances.asDiagonal().toDenseMatrix());
}

double GaussianSpec::log_pdf(const Eigen::Ref<const Vector>& x) const
{
  if (x.size() != dim()) {
    std::ostringstream os;
    os << "gaussian_pdf: point has dimension " << x.size() << ", expected " << dim();
    throw ValidationError(os.str());
  }
  const Vector y = chol_.triangularView<Eigen::Lower>().solve(x - mean_);
  return log_norm_ - 0.5 * y.squaredNorm();
}

double GaussianSpec::pdf(const Eigen::Ref<const Vector>& x) const { return std::exp(log_pdf(x)); }

GaussianSpec GaussianSpec::marginal(const std::vector<Index>& dims) const
{
  const Index k = static_cast<Index>(dims.size());
  Vector m(k);
  Matrix c(k, k);
  for (Index i = 0; i < k; ++i) {
    if (dims[i] < 0 || dims[i] >= dim()) throw ValidationError("gaussian: marginal dimension out of range");
    m(i) = mean_(dims[i]);
    for (Index j = 0; j < k; ++j) c(i, j) = covariance_(dims[i], dims[j]);
  }
  return GaussianSpec(m, c);
}

double gaussian_pdf(const GaussianSpec& spec, const Eigen::Ref<const Vector>& x) { return spec.pdf(x); }

void WeightedCloud::validate() const
{
  if (states.rows() != weights.size()) throw ValidationError("cloud: state rows and weight count differ");
  if (!states.allFinite()) throw ValidationError("cloud: non-finite state");
  for (Index i = 0; i < weights.size(); ++i) {
    if (!std::isfinite(weights(i)) || weights(i) < 0.0) throw ValidationError("cloud: invalid weight");
  }
}

std::uint64_t splitmix64(std::uint64_t x)
{
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

SampleStream::SampleStream(std::uint64_t seed, std::uint64_t index)
    : engine_(splitmix64(seed + 0x9E3779B97F4A7C15ULL * (index + 1)))
{}

double SampleStream::uniform()
{
  return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
}

double SampleStream::normal()
{
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  const double r = std::sqrt(-2.0 * std::log(uniform()));
  const double theta = 2.0 * std::numbers::pi * uniform();
  cached_ = r * std::sin(theta);
  has_cached_ = true;
  return r * std::cos(theta);
}

WeightedCloud sample_gaussian(const GaussianSpec& spec, Index n, std::uint64_t seed)
{
  if (n < 1) throw ValidationError("sample_gaussian: sample count must be at least 1");
  const Index d = spec.dim();
  WeightedCloud cloud;
  cloud.time = 0.0;
  cloud.states.resize(n, d);
  cloud.weights.resize(n);
  Vector z(d);
  for (Index i = 0; i < n; ++i) {
    SampleStream stream(seed, static_cast<std::uint64_t>(i));
    for (Index k = 0; k < d; ++k) z(k) = stream.normal();
    const Vector x = spec.mean() + spec.cholesky_factor() * z;
    cloud.states.row(i) = x.transpose();
    cloud.weights(i) = spec.pdf(x);
  }
  return cloud;
}

int resolve_workers(int workers)
{
  if (workers > 0) return workers;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_for(Index n, int workers, const std::function<void(Index)>& body)
{
  if (n <= 0) return;
  const int w = static_cast<int>(std::min<Index>(resolve_workers(workers), n));
  if (w == 1) {
    for (Index i = 0; i < n; ++i) body(i);
    return;
  }

  std::mutex mutex;
  Index failed_index = n;
  std::exception_ptr failure;
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(w));
  for (int t = 0; t < w; ++t) {
    const Index begin = n * t / w;
    const Index end = n * (t + 1) / w;
    threads.emplace_back([&, begin, end] {
      for (Index i = begin; i < end; ++i) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mutex);
          if (i < failed_index) {
            failed_index = i;
            failure = std::current_exception();
          }
          return;
        }
      }
    });
  }
  for (auto& th : threads) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace lreach
