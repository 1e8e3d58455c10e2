#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace gradsep::numerics {

// Dense row-major matrix of doubles. Internal operations assume finite data;
// values crossing an external boundary (files, user input) go through
// from_data() which rejects NaN/Inf.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);  // zero-filled

  static Matrix from_data(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Matrix identity(std::size_t n);
  static Matrix filled(std::size_t rows, std::size_t cols, double value);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* row_ptr(std::size_t r) { return data_.data() + r * cols_; }
  const double* row_ptr(std::size_t r) const { return data_.data() + r * cols_; }
  std::span<double> row(std::size_t r) { return {row_ptr(r), cols_}; }
  std::span<const double> row(std::size_t r) const { return {row_ptr(r), cols_}; }
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool all_finite() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Dense tensor used for parameter/gradient payloads (rank 1, 2 or 4 here).
struct Tensor {
  std::vector<std::size_t> dims;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> d, std::vector<double> v);
  static Tensor zeros(std::vector<std::size_t> d);
  static Tensor from_matrix(const Matrix& m);
  static Tensor from_vector(const std::vector<double>& v);

  std::size_t numel() const { return data.size(); }
  Matrix as_matrix() const;  // rank-2 only
};

// ---- vector kernels -------------------------------------------------------

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
void axpy(double alpha, std::span<const double> x, std::span<double> y);  // y += alpha*x
void scale(std::span<double> x, double alpha);
double mean(std::span<const double> x);

// Sum with pairwise splitting: associativity fixed by the recursion, so the
// result does not depend on traversal chunking.
double pairwise_sum(std::span<const double> x);

// ---- matrix ops -----------------------------------------------------------

Matrix matmul(const Matrix& a, const Matrix& b);      // a(m,k) * b(k,n)
Matrix matmul_abt(const Matrix& a, const Matrix& b);  // a(m,k) * b(n,k)^T
Matrix matmul_atb(const Matrix& a, const Matrix& b);  // a(k,m)^T * b(k,n)
Matrix transpose(const Matrix& a);
Matrix hadamard(const Matrix& a, const Matrix& b);
void add_inplace(Matrix& a, const Matrix& b);
double frobenius_norm(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);

// ---- deterministic RNG ----------------------------------------------------

// xoshiro256++ seeded through splitmix64, Gaussians via Box-Muller. The
// generator is specified by algorithm_id(): equal seeds give equal streams
// everywhere, independent of platform or standard library.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed);

  static std::string algorithm_id() { return "xoshiro256pp/boxmuller/v1"; }

  std::uint64_t next_u64();
  double uniform01();                       // [0, 1), 53-bit resolution
  double uniform(double lo, double hi);
  std::uint64_t uniform_index(std::uint64_t bound);  // [0, bound)
  double gaussian();                        // standard normal
  double gaussian(double mean, double stddev);

  // Independent child stream for (seed, tag) pairs; used to derive per-run
  // streams from a master seed.
  SeededRng derive(std::uint64_t tag) const;

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t state_[4] = {};
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// ---- Adam -----------------------------------------------------------------

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step_count = 0;
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  AdamState() = default;
  AdamState(std::size_t param_count, double lr);
};

// One bias-corrected Adam update; mutates state, returns updated params.
Matrix adam_step(const Matrix& params, const Matrix& grad, AdamState& state);
// In-place flavor used by the optimization loops.
void adam_step_inplace(std::span<double> params, std::span<const double> grad, AdamState& state);

// ---- symmetric eigendecomposition -----------------------------------------

struct EigResult {
  std::vector<double> eigenvalues;  // descending
  Matrix eigenvectors;              // column i pairs with eigenvalues[i]
};

// Cyclic Jacobi rotations. Requires a symmetric within 1e-10 entrywise.
EigResult sym_eig(const Matrix& a);

// ---- finite differences ----------------------------------------------------

// Max over coordinates of |central difference - analytic| / (|analytic| + 1e-8).
double finite_diff_check(const std::function<double(const Matrix&)>& f,
                         const Matrix& analytic, const Matrix& point, double h);

}  // namespace gradsep::numerics
