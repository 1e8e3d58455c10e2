#include "gradsep/numerics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "gradsep/error.hpp"

namespace gradsep::numerics {

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix Matrix::from_data(std::size_t rows, std::size_t cols, std::vector<double> values) {
  if (values.size() != rows * cols) {
    throw std::invalid_argument("Matrix::from_data: " + std::to_string(values.size()) +
                                " values for " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericalError("Matrix::from_data: non-finite entry");
    }
  }
  Matrix m;
  m.rows_ = rows;
  m.cols_ = cols;
  m.data_ = std::move(values);
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::filled(std::size_t rows, std::size_t cols, double value) {
  Matrix m(rows, cols);
  std::fill(m.data_.begin(), m.data_.end(), value);
  return m;
}

bool Matrix::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor::Tensor(std::vector<std::size_t> d, std::vector<double> v)
    : dims(std::move(d)), data(std::move(v)) {
  std::size_t n = 1;
  for (std::size_t dim : dims) n *= dim;
  if (n != data.size()) {
    throw std::invalid_argument("Tensor: dims do not match payload size");
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> d) {
  std::size_t n = 1;
  for (std::size_t dim : d) n *= dim;
  return Tensor(std::move(d), std::vector<double>(n, 0.0));
}

Tensor Tensor::from_matrix(const Matrix& m) {
  return Tensor({m.rows(), m.cols()}, std::vector<double>(m.data().begin(), m.data().end()));
}

Tensor Tensor::from_vector(const std::vector<double>& v) {
  return Tensor({v.size()}, v);
}

Matrix Tensor::as_matrix() const {
  if (dims.size() != 2) {
    throw std::invalid_argument("Tensor::as_matrix: rank " + std::to_string(dims.size()));
  }
  Matrix m(dims[0], dims[1]);
  std::copy(data.begin(), data.end(), m.data().begin());
  return m;
}

// ---- vector kernels -------------------------------------------------------

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
  // Four fixed accumulator lanes: deterministic association, vectorizable.
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t n4 = a.size() / 4 * 4;
  for (std::size_t i = 0; i < n4; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (std::size_t i = n4; i < a.size(); ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("axpy: length mismatch");
  const double* px = x.data();
  double* py = y.data();
  for (std::size_t i = 0; i < x.size(); ++i) py[i] += alpha * px[i];
}

void scale(std::span<double> x, double alpha) {
  for (double& v : x) v *= alpha;
}

double pairwise_sum(std::span<const double> x) {
  if (x.size() <= 64) {
    double s = 0;
    for (double v : x) s += v;
    return s;
  }
  std::size_t half = x.size() / 2;
  return pairwise_sum(x.subspan(0, half)) + pairwise_sum(x.subspan(half));
}

double mean(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("mean of empty span");
  return pairwise_sum(x) / static_cast<double>(x.size());
}

// ---- matrix ops -----------------------------------------------------------

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dims mismatch");
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* ci = c.row_ptr(i);
    const double* ai = a.row_ptr(i);
    for (std::size_t l = 0; l < a.cols(); ++l) {
      const double alpha = ai[l];
      const double* bl = b.row_ptr(l);
      for (std::size_t j = 0; j < n; ++j) ci[j] += alpha * bl[j];
    }
  }
  return c;
}

Matrix matmul_abt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_abt: inner dims mismatch");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* ci = c.row_ptr(i);
    for (std::size_t j = 0; j < b.rows(); ++j) ci[j] = dot(a.row(i), b.row(j));
  }
  return c;
}

Matrix matmul_atb(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("matmul_atb: inner dims mismatch");
  Matrix c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* ar = a.row_ptr(r);
    const double* br = b.row_ptr(r);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double alpha = ar[i];
      double* ci = c.row_ptr(i);
      for (std::size_t j = 0; j < n; ++j) ci[j] += alpha * br[j];
    }
  }
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("hadamard: shape mismatch");
  }
  Matrix c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] * b.data()[i];
  return c;
}

void add_inplace(Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("add_inplace: shape mismatch");
  }
  axpy(1.0, b.data(), a.data());
}

double frobenius_norm(const Matrix& a) { return norm2(a.data()); }

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("max_abs_diff: shape mismatch");
  }
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

// ---- deterministic RNG ----------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t& s) {
  std::uint64_t z = (s += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t s = seed;
  for (auto& w : state_) w = splitmix64(s);
}

std::uint64_t SeededRng::next_u64() {
  const std::uint64_t result = std::rotl(state_[0] + state_[3], 23) + state_[0];
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = std::rotl(state_[3], 45);
  return result;
}

double SeededRng::uniform01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform01();
}

std::uint64_t SeededRng::uniform_index(std::uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("uniform_index: zero bound");
  const std::uint64_t threshold = (0 - bound) % bound;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x < threshold);
  return x % bound;
}

double SeededRng::gaussian() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  // u1 in (0, 1] keeps the log finite.
  const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  const double u2 = uniform01();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

double SeededRng::gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

SeededRng SeededRng::derive(std::uint64_t tag) const {
  std::uint64_t s = seed_ ^ (0xA0761D6478BD642FULL + tag);
  std::uint64_t mixed = splitmix64(s);
  return SeededRng(mixed ^ (tag * 0xE7037ED1A0B428DBULL));
}

// ---- Adam -----------------------------------------------------------------

AdamState::AdamState(std::size_t param_count, double lr_in)
    : m(param_count, 0.0), v(param_count, 0.0), lr(lr_in) {}

void adam_step_inplace(std::span<double> params, std::span<const double> grad, AdamState& state) {
  if (params.size() != grad.size() || params.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: size mismatch");
  }
  state.step_count += 1;
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
  }
}

Matrix adam_step(const Matrix& params, const Matrix& grad, AdamState& state) {
  Matrix out = params;
  adam_step_inplace(out.data(), grad.data(), state);
  return out;
}

// ---- symmetric eigendecomposition -----------------------------------------

EigResult sym_eig(const Matrix& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("sym_eig: matrix not square");
  const std::size_t n = a.rows();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::abs(a(i, j) - a(j, i)) > 1e-10) {
        throw NumericalError("sym_eig: input not symmetric within 1e-10");
      }
    }
  }

  Matrix w = a;  // symmetrize to kill the sub-tolerance drift
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double s = 0.5 * (w(i, j) + w(j, i));
      w(i, j) = s;
      w(j, i) = s;
    }
  }
  Matrix v = Matrix::identity(n);

  auto off_norm = [&]() {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += w(i, j) * w(i, j);
    return std::sqrt(2.0 * s);
  };

  const double total = std::max(frobenius_norm(w), 1e-300);
  const int max_sweeps = 64;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    if (off_norm() <= 1e-14 * total) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = w(p, q);
        if (apq == 0.0) continue;
        const double tau = (w(q, q) - w(p, p)) / (2.0 * apq);
        const double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        // A := J^T A J on rows/cols p, q
        for (std::size_t k = 0; k < n; ++k) {
          const double wkp = w(k, p);
          const double wkq = w(k, q);
          w(k, p) = c * wkp - s * wkq;
          w(k, q) = s * wkp + c * wkq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double wpk = w(p, k);
          const double wqk = w(q, k);
          w(p, k) = c * wpk - s * wqk;
          w(q, k) = s * wpk + c * wqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (w(x, x) != w(y, y)) return w(x, x) > w(y, y);
    return x < y;
  });

  EigResult res;
  res.eigenvalues.resize(n);
  res.eigenvectors = Matrix(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    const std::size_t src = order[c];
    res.eigenvalues[c] = w(src, src);
    // Sign convention: largest-magnitude component positive, first on ties.
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double mag = std::abs(v(r, src));
      if (mag > best) {
        best = mag;
        arg = r;
      }
    }
    const double flip = v(arg, src) < 0 ? -1.0 : 1.0;
    for (std::size_t r = 0; r < n; ++r) res.eigenvectors(r, c) = flip * v(r, src);
  }
  return res;
}

// ---- finite differences ----------------------------------------------------

double finite_diff_check(const std::function<double(const Matrix&)>& f,
                         const Matrix& analytic, const Matrix& point, double h) {
  if (analytic.rows() != point.rows() || analytic.cols() != point.cols()) {
    throw std::invalid_argument("finite_diff_check: gradient/point shape mismatch");
  }
  if (!(h > 0)) throw std::invalid_argument("finite_diff_check: h must be positive");
  Matrix x = point;
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + h;
    const double fp = f(x);
    x.data()[i] = orig - h;
    const double fm = f(x);
    x.data()[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericalError("finite_diff_check: non-finite objective value");
    }
    const double fd = (fp - fm) / (2.0 * h);
    const double g = analytic.data()[i];
    worst = std::max(worst, std::abs(fd - g) / (std::abs(g) + 1e-8));
  }
  return worst;
}

}  // namespace gradsep::numerics
