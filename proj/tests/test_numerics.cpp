#include "gradsep/numerics.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradsep/error.hpp"

using namespace gradsep;
using namespace gradsep::numerics;

namespace {

// Independent three-loop product used as the oracle for the blocked kernels.
Matrix matmul_reference(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

Matrix random_matrix(std::size_t r, std::size_t c, SeededRng& rng) {
  Matrix m(r, c);
  for (auto& v : m.data()) v = rng.gaussian();
  return m;
}

}  // namespace

TEST_CASE("matrix construction validates external data") {
  CHECK_THROWS_AS(Matrix::from_data(2, 2, {1.0, 2.0, 3.0}), std::invalid_argument);
  CHECK_THROWS_AS(Matrix::from_data(1, 2, {1.0, std::nan("")}), NumericalError);
  CHECK_THROWS_AS(Matrix::from_data(1, 2, {1.0, INFINITY}), NumericalError);
  Matrix ok = Matrix::from_data(2, 2, {1, 2, 3, 4});
  CHECK(ok(1, 0) == 3.0);
  CHECK(ok.all_finite());
}

TEST_CASE("matmul kernels agree with the reference product") {
  SeededRng rng(17);
  for (auto [m, k, n] : {std::tuple<int, int, int>{1, 1, 1}, {3, 5, 4}, {16, 33, 7}, {31, 8, 31}}) {
    Matrix a = random_matrix(m, k, rng);
    Matrix b = random_matrix(k, n, rng);
    CHECK(max_abs_diff(matmul(a, b), matmul_reference(a, b)) < 1e-12);
    Matrix bt = transpose(b);
    CHECK(max_abs_diff(matmul_abt(a, bt), matmul_reference(a, b)) < 1e-12);
    Matrix at = transpose(a);
    CHECK(max_abs_diff(matmul_atb(at, b), matmul_reference(a, b)) < 1e-12);
  }
  CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), std::invalid_argument);
}

TEST_CASE("pairwise sum matches sequential accumulation") {
  std::vector<double> xs;
  double expect = 0;
  for (int i = 0; i < 1000; ++i) {
    xs.push_back(0.001 * i - 0.3);
    expect += xs.back();
  }
  CHECK(pairwise_sum(xs) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(mean(xs) == doctest::Approx(expect / 1000.0).epsilon(1e-12));
}

TEST_CASE("adam single step reproduces the hand-derived update") {
  // m=0.1, v=0.001; bias-corrected mhat=1, vhat=1; step = 0.1/(1+1e-8).
  Matrix params(1, 1);
  Matrix grad = Matrix::filled(1, 1, 1.0);
  AdamState st(1, 0.1);
  Matrix out = adam_step(params, grad, st);
  CHECK(std::abs(out(0, 0) - (-0.1)) <= 1e-9);
  CHECK(out(0, 0) == doctest::Approx(-0.099999999).epsilon(1e-12));
  CHECK(st.step_count == 1);
  CHECK(st.m[0] == doctest::Approx(0.1));
  CHECK(st.v[0] == doctest::Approx(0.001));
}

TEST_CASE("adam is deterministic across fresh replays") {
  SeededRng rng(5);
  Matrix p0 = random_matrix(4, 3, rng);
  Matrix g1 = random_matrix(4, 3, rng);
  Matrix g2 = random_matrix(4, 3, rng);

  auto run = [&]() {
    AdamState st(p0.size(), 0.01);
    Matrix p = adam_step(p0, g1, st);
    return adam_step(p, g2, st);
  };
  Matrix a = run();
  Matrix b = run();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("sym_eig on a diagonal matrix sorts eigenvalues descending") {
  Matrix a(3, 3);
  a(0, 0) = 3;
  a(1, 1) = 1;
  a(2, 2) = 2;
  EigResult r = sym_eig(a);
  CHECK(r.eigenvalues[0] == doctest::Approx(3.0));
  CHECK(r.eigenvalues[1] == doctest::Approx(2.0));
  CHECK(r.eigenvalues[2] == doctest::Approx(1.0));
  // eigenvector columns are signed unit axes
  CHECK(std::abs(r.eigenvectors(0, 0)) == doctest::Approx(1.0));
  CHECK(std::abs(r.eigenvectors(2, 1)) == doctest::Approx(1.0));
  CHECK(std::abs(r.eigenvectors(1, 2)) == doctest::Approx(1.0));
}

TEST_CASE("sym_eig reproduces the 2x2 hand calculation") {
  Matrix a = Matrix::from_data(2, 2, {2, 1, 1, 2});
  EigResult r = sym_eig(a);
  const double inv_sqrt2 = 0.70710678118654752;
  CHECK(r.eigenvalues[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(r.eigenvalues[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.eigenvectors(0, 0) == doctest::Approx(inv_sqrt2));
  CHECK(r.eigenvectors(1, 0) == doctest::Approx(inv_sqrt2));
  CHECK(r.eigenvectors(0, 1) == doctest::Approx(inv_sqrt2));
  CHECK(r.eigenvectors(1, 1) == doctest::Approx(-inv_sqrt2));
}

TEST_CASE("sym_eig reconstruction and orthonormality hold up to 512x512") {
  SeededRng rng(23);
  for (std::size_t n : {5ul, 64ul, 129ul, 512ul}) {
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i; j < n; ++j) {
        const double v = rng.gaussian();
        a(i, j) = v;
        a(j, i) = v;
      }
    EigResult r = sym_eig(a);
    // E Lambda E^T == A
    Matrix el = r.eigenvectors;
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t i = 0; i < n; ++i) el(i, c) *= r.eigenvalues[c];
    Matrix recon = matmul_abt(el, r.eigenvectors);
    CHECK(max_abs_diff(recon, a) < 1e-9);
    // E^T E == I
    Matrix gram = matmul_atb(r.eigenvectors, r.eigenvectors);
    CHECK(max_abs_diff(gram, Matrix::identity(n)) < 1e-9);
    for (std::size_t i = 0; i + 1 < n; ++i) CHECK(r.eigenvalues[i] >= r.eigenvalues[i + 1]);
  }
}

TEST_CASE("sym_eig rejects asymmetric input") {
  Matrix a = Matrix::from_data(2, 2, {1, 0.5, 0.2, 1});
  CHECK_THROWS_AS(sym_eig(a), NumericalError);
  CHECK_THROWS_AS(sym_eig(Matrix(2, 3)), std::invalid_argument);
}

TEST_CASE("finite_diff_check accepts a correct gradient and flags a wrong one") {
  auto f = [](const Matrix& x) {
    double s = 0;
    for (double v : x.data()) s += v * v + 0.3 * v;
    return s;
  };
  SeededRng rng(9);
  Matrix x = random_matrix(3, 4, rng);
  Matrix g(3, 4);
  for (std::size_t i = 0; i < x.size(); ++i) g.data()[i] = 2.0 * x.data()[i] + 0.3;
  CHECK(finite_diff_check(f, g, x, 1e-5) < 1e-8);

  Matrix bad = g;
  bad(0, 0) += 0.5;
  CHECK(finite_diff_check(f, bad, x, 1e-5) > 1e-2);
  CHECK_THROWS_AS(finite_diff_check(f, g, x, 0.0), std::invalid_argument);
}

TEST_CASE("seeded rng replays identically and differs across seeds") {
  SeededRng a(42), b(42), c(43);
  bool all_equal = true;
  bool any_diff_seed = false;
  for (int i = 0; i < 5; ++i) {
    const std::uint64_t x = a.next_u64();
    all_equal = all_equal && (x == b.next_u64());
    any_diff_seed = any_diff_seed || (x != c.next_u64());
  }
  CHECK(all_equal);
  CHECK(any_diff_seed);
}

TEST_CASE("uniform01 stays inside [0,1) and gaussian moments look right") {
  SeededRng rng(7);
  double s = 0, s2 = 0;
  for (int i = 0; i < 20000; ++i) {
    const double u = rng.uniform01();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    const double g = rng.gaussian();
    s += g;
    s2 += g * g;
  }
  CHECK(std::abs(s / 20000.0) < 0.03);
  CHECK(std::abs(s2 / 20000.0 - 1.0) < 0.05);
}

TEST_CASE("derived streams are decorrelated from the parent") {
  SeededRng base(100);
  SeededRng d1 = base.derive(1);
  SeededRng d2 = base.derive(2);
  CHECK(d1.next_u64() != d2.next_u64());
  SeededRng d1_again = base.derive(1);
  SeededRng d1_fresh = SeededRng(100).derive(1);
  const std::uint64_t expect = d1_fresh.next_u64();
  CHECK(d1_again.next_u64() == expect);
}

TEST_CASE("uniform_index covers the range without bias artifacts") {
  SeededRng rng(11);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 7000; ++i) counts[rng.uniform_index(7)]++;
  for (int c : counts) CHECK(c > 800);
  CHECK_THROWS_AS(rng.uniform_index(0), std::invalid_argument);
}
