#include "gradsep/evalio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <vector>

#include "doctest.h"
#include "gradsep/error.hpp"
#include "gradsep/numerics.hpp"

using namespace gradsep;
using evalio::Dataset;
using evalio::Image;
using evalio::kUnmatched;
using evalio::MatchResult;
using evalio::Shape3;
using numerics::Matrix;
using numerics::SeededRng;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  SeededRng rng(seed);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.gaussian();
  return m;
}

void write_bytes(const char* path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  REQUIRE(out.good());
}

std::vector<std::uint8_t> slurp(const char* path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Greedy baseline for the matching property: repeatedly take the best
// remaining (recovered, truth) pair.
double greedy_total(const Matrix& score) {
  const std::size_t nr = score.rows(), nt = score.cols();
  std::set<std::size_t> used_r, used_t;
  double total = 0.0;
  const std::size_t pairs = std::min(nr, nt);
  for (std::size_t step = 0; step < pairs; ++step) {
    double best = -1.0;
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < nr; ++i) {
      if (used_r.count(i)) continue;
      for (std::size_t j = 0; j < nt; ++j) {
        if (used_t.count(j)) continue;
        if (score(i, j) > best) {
          best = score(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    used_r.insert(bi);
    used_t.insert(bj);
    total += best;
  }
  return total;
}

Matrix pair_scores(const Matrix& rec, const Matrix& truth) {
  Matrix s(rec.rows(), truth.rows());
  for (std::size_t i = 0; i < rec.rows(); ++i)
    for (std::size_t j = 0; j < truth.rows(); ++j)
      s(i, j) = evalio::abs_cosine(rec.row(i), truth.row(j));
  return s;
}

}  // namespace

TEST_CASE("abs_cosine pinned values and properties") {
  std::vector<double> a{1.0, 2.0, 2.0}, b{2.0, 1.0, 2.0};
  CHECK(evalio::abs_cosine(a, b) == doctest::Approx(8.0 / 9.0).epsilon(1e-15));
  CHECK(evalio::abs_cosine(a, a) == doctest::Approx(1.0).epsilon(1e-15));

  std::vector<double> neg{-1.0, -2.0, -2.0};
  CHECK(evalio::abs_cosine(a, neg) == doctest::Approx(1.0).epsilon(1e-15));

  std::vector<double> e1{1.0, 0.0}, e2{0.0, 3.0};
  CHECK(evalio::abs_cosine(e1, e2) == 0.0);

  // Symmetric and scale-invariant.
  std::vector<double> a37(a), b_half(b);
  for (double& v : a37) v *= 3.7;
  for (double& v : b_half) v *= 0.5;
  CHECK(evalio::abs_cosine(a37, b_half) ==
        doctest::Approx(evalio::abs_cosine(b, a)).epsilon(1e-14));

  std::vector<double> zero{0.0, 0.0, 0.0};
  CHECK_THROWS_AS((void)evalio::abs_cosine(a, zero), NumericalError);
  CHECK_THROWS_AS((void)evalio::abs_cosine(a, e1), std::invalid_argument);
  std::vector<double> empty;
  CHECK_THROWS_AS((void)evalio::abs_cosine(empty, empty), std::invalid_argument);
}

TEST_CASE("psnr pinned values") {
  std::vector<double> zeros(4, 0.0), ones(4, 1.0);
  CHECK(std::isinf(evalio::psnr(zeros, zeros)));
  CHECK(evalio::psnr(zeros, ones) == doctest::Approx(0.0).epsilon(1e-15));

  // One pixel off by 0.5 in a 4-vector: mse = 1/16, psnr = 40*log10(2).
  std::vector<double> b{0.5, 0.0, 0.0, 0.0};
  const double expect = 40.0 * std::log10(2.0);
  CHECK(evalio::psnr(zeros, b) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(evalio::psnr(b, zeros) == doctest::Approx(expect).epsilon(1e-12));

  std::vector<double> three(3, 0.0);
  CHECK_THROWS_AS((void)evalio::psnr(zeros, three), std::invalid_argument);
}

TEST_CASE("ssim identity, checkerboard oracle, bounds") {
  const Shape3 shape{1, 8, 8};
  std::vector<double> board(64), inverted(64);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      board[y * 8 + x] = static_cast<double>((y + x) % 2);
      inverted[y * 8 + x] = 1.0 - board[y * 8 + x];
    }

  CHECK(evalio::ssim(board, board, shape) == doctest::Approx(1.0).epsilon(1e-12));

  // Single 8x8 window: mu=0.5 both, var=0.25 both, cov=-0.25. Luminance term
  // is 1, structure term is (-0.5 + C2) / (0.5 + C2).
  const double c2 = 0.03 * 0.03;
  const double expect = (-0.5 + c2) / (0.5 + c2);
  CHECK(expect < 0.0);
  CHECK(evalio::ssim(board, inverted, shape) == doctest::Approx(expect).epsilon(1e-12));

  // Random images: ssim(a,a) = 1, and values stay in [-1, 1].
  SeededRng rng(3);
  const Shape3 s2{3, 12, 10};
  std::vector<double> a(s2.numel()), b(s2.numel());
  for (auto& v : a) v = rng.uniform01();
  for (auto& v : b) v = rng.uniform01();
  CHECK(evalio::ssim(a, a, s2) == doctest::Approx(1.0).epsilon(1e-12));
  const double sab = evalio::ssim(a, b, s2);
  CHECK(sab >= -1.0);
  CHECK(sab <= 1.0);

  // Small image falls back to a whole-image window.
  const Shape3 tiny{1, 3, 3};
  std::vector<double> t(9, 0.25);
  CHECK(evalio::ssim(t, t, tiny) == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS((void)evalio::ssim(a, b, Shape3{3, 12, 11}), std::invalid_argument);
}

TEST_CASE("fit_affine removes scale, sign and offset") {
  SeededRng rng(11);
  std::vector<double> truth(48);
  for (auto& v : truth) v = rng.uniform01();

  std::vector<double> rec(truth);
  for (auto& v : rec) v = -2.0 * v + 0.7;
  const auto fit = evalio::fit_affine(rec, truth);
  double max_err = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    max_err = std::max(max_err, std::abs(fit[i] - truth[i]));
  CHECK(max_err < 1e-12);

  // Constant input degrades to the best constant: the truth mean.
  std::vector<double> flat(truth.size(), 0.3);
  const auto fit2 = evalio::fit_affine(flat, truth);
  const double mt = std::accumulate(truth.begin(), truth.end(), 0.0) /
                    static_cast<double>(truth.size());
  for (double v : fit2) CHECK(v == doctest::Approx(mt).epsilon(1e-14));

  std::vector<double> shorter(truth.begin(), truth.begin() + 5);
  CHECK_THROWS_AS((void)evalio::fit_affine(shorter, truth), std::invalid_argument);
}

TEST_CASE("center_rows and rescale_unit") {
  Matrix m = Matrix::from_data(2, 3, {1.0, 2.0, 3.0, 10.0, 10.0, 10.0});
  const Matrix c = evalio::center_rows(m);
  CHECK(c(0, 0) == doctest::Approx(-1.0));
  CHECK(c(0, 1) == doctest::Approx(0.0));
  CHECK(c(0, 2) == doctest::Approx(1.0));
  for (std::size_t j = 0; j < 3; ++j) CHECK(c(1, j) == doctest::Approx(0.0));

  std::vector<double> x{2.0, 3.0, 4.0};
  const auto r = evalio::rescale_unit(x);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(r[2] == 1.0);

  std::vector<double> flat{7.0, 7.0};
  const auto rf = evalio::rescale_unit(flat);
  CHECK(rf[0] == 0.5);
  CHECK(rf[1] == 0.5);
}

TEST_CASE("hungarian_match identity and reversal") {
  const Matrix truth = random_matrix(4, 6, 21);
  const MatchResult id = evalio::hungarian_match(truth, truth);
  REQUIRE(id.permutation.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(id.permutation[i] == i);
    CHECK(id.per_pair_abs_cos[i] == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(id.unmatched.empty());
  CHECK(id.mean_matched() == doctest::Approx(1.0).epsilon(1e-12));

  // Reversed rows, rescaled and sign-flipped: still a perfect reversing match.
  Matrix rev(4, 6);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) rev(i, j) = -2.5 * truth(3 - i, j);
  const MatchResult r = evalio::hungarian_match(rev, truth);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(r.permutation[i] == 3 - i);
    CHECK(r.per_pair_abs_cos[i] == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("hungarian_match equals the factorial oracle on 5x5") {
  for (std::uint64_t seed = 100; seed < 104; ++seed) {
    const Matrix rec = random_matrix(5, 12, seed);
    const Matrix truth = random_matrix(5, 12, seed + 50);
    const Matrix score = pair_scores(rec, truth);

    std::vector<std::size_t> perm{0, 1, 2, 3, 4};
    double best = -1.0;
    do {
      double total = 0.0;
      for (std::size_t i = 0; i < 5; ++i) total += score(i, perm[i]);
      best = std::max(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));

    const MatchResult res = evalio::hungarian_match(rec, truth);
    CHECK(res.total() == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("hungarian_match rectangular cases and zero rows") {
  const Matrix truth = random_matrix(5, 8, 77);

  // Fewer recoveries than truths: everything matches, injectively.
  Matrix rec3(3, 8);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 8; ++j) rec3(i, j) = truth(i + 1, j);
  const MatchResult a = evalio::hungarian_match(rec3, truth);
  CHECK(a.unmatched.empty());
  std::set<std::size_t> seen;
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a.permutation[i] == i + 1);
    seen.insert(a.permutation[i]);
  }
  CHECK(seen.size() == 3);

  // More recoveries than truths: the surplus is reported unmatched.
  const Matrix rec7 = random_matrix(7, 8, 78);
  const Matrix truth4 = random_matrix(4, 8, 79);
  const MatchResult b = evalio::hungarian_match(rec7, truth4);
  CHECK(b.unmatched.size() == 3);
  std::set<std::size_t> matched_truth;
  for (std::size_t i = 0; i < 7; ++i) {
    if (b.permutation[i] == kUnmatched) {
      CHECK(b.per_pair_abs_cos[i] == 0.0);
      CHECK(std::find(b.unmatched.begin(), b.unmatched.end(), i) != b.unmatched.end());
    } else {
      matched_truth.insert(b.permutation[i]);
    }
  }
  CHECK(matched_truth.size() == 4);

  // A collapsed (all-zero) recovery scores 0 instead of raising.
  Matrix with_zero = random_matrix(3, 6, 80);
  for (std::size_t j = 0; j < 6; ++j) with_zero(1, j) = 0.0;
  const Matrix truth3 = random_matrix(3, 6, 81);
  const MatchResult z = evalio::hungarian_match(with_zero, truth3);
  REQUIRE(z.permutation.size() == 3);
  CHECK(z.per_pair_abs_cos[1] == 0.0);

  CHECK_THROWS_AS((void)evalio::hungarian_match(Matrix(), truth), std::invalid_argument);
  CHECK_THROWS_AS((void)evalio::hungarian_match(truth, random_matrix(2, 9, 1)),
                  std::invalid_argument);
}

TEST_CASE("hungarian_match dominates greedy matching") {
  for (std::uint64_t seed = 200; seed < 210; ++seed) {
    const Matrix rec = random_matrix(6, 10, seed);
    const Matrix truth = random_matrix(6, 10, seed + 1000);
    const Matrix score = pair_scores(rec, truth);
    const MatchResult res = evalio::hungarian_match(rec, truth);
    CHECK(res.total() >= greedy_total(score) - 1e-12);
  }
}

TEST_CASE("montage tiles images into a grid") {
  Matrix imgs(4, 4);  // four 1x2x2 images
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t p = 0; p < 4; ++p) imgs(i, p) = static_cast<double>(i * 4 + p) / 16.0;
  const Shape3 cell{1, 2, 2};

  const Image grid = evalio::montage(imgs, cell, 2);
  CHECK(grid.shape == Shape3{1, 4, 4});
  // Image 3 occupies the bottom-right 2x2 block.
  CHECK(grid.pixels[2 * 4 + 2] == imgs(3, 0));
  CHECK(grid.pixels[2 * 4 + 3] == imgs(3, 1));
  CHECK(grid.pixels[3 * 4 + 2] == imgs(3, 2));
  CHECK(grid.pixels[3 * 4 + 3] == imgs(3, 3));
  // Image 0 top-left.
  CHECK(grid.pixels[0] == imgs(0, 0));
  CHECK(grid.pixels[1 * 4 + 1] == imgs(0, 3));

  // One image comes back as itself.
  Matrix one(1, 4);
  for (std::size_t p = 0; p < 4; ++p) one(0, p) = imgs(0, p);
  const Image self = evalio::montage(one, cell, 1);
  CHECK(self.shape == cell);
  for (std::size_t p = 0; p < 4; ++p) CHECK(self.pixels[p] == one(0, p));

  // Odd count leaves the last cell black.
  Matrix three(3, 4);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < 4; ++p) three(i, p) = 1.0;
  const Image padded = evalio::montage(three, cell, 2);
  CHECK(padded.shape == Shape3{1, 4, 4});
  CHECK(padded.pixels[2 * 4 + 2] == 0.0);
  CHECK(padded.pixels[3 * 4 + 3] == 0.0);

  CHECK_THROWS_AS((void)evalio::montage(Matrix(), cell, 2), std::invalid_argument);
  CHECK_THROWS_AS((void)evalio::montage(imgs, cell, 0), std::invalid_argument);
  CHECK_THROWS_AS((void)evalio::montage(imgs, Shape3{1, 2, 3}, 2), std::invalid_argument);
}

TEST_CASE("write_ppm produces the exact P5/P6 byte layout") {
  const char* path = "test_evalio_img.pnm";

  Image gray{Shape3{1, 2, 2}, {0.0, 0.5, 1.0, 0.25}};
  evalio::write_ppm(path, gray);
  const auto p5 = slurp(path);
  const std::string h5 = "P5\n2 2\n255\n";
  REQUIRE(p5.size() == h5.size() + 4);
  CHECK(std::equal(h5.begin(), h5.end(), p5.begin()));
  CHECK(p5[h5.size() + 0] == 0);
  CHECK(p5[h5.size() + 1] == 128);  // round half away from zero
  CHECK(p5[h5.size() + 2] == 255);
  CHECK(p5[h5.size() + 3] == 64);

  // P6 interleaves channels per pixel; our storage is channel-major.
  Image rgb{Shape3{3, 1, 2}, {0.0, 1.0, 0.2, 0.8, 0.4, 0.6}};
  evalio::write_ppm(path, rgb);
  const auto p6 = slurp(path);
  const std::string h6 = "P6\n2 1\n255\n";
  REQUIRE(p6.size() == h6.size() + 6);
  CHECK(std::equal(h6.begin(), h6.end(), p6.begin()));
  const std::uint8_t expect[6] = {0, 51, 102, 255, 204, 153};
  for (std::size_t i = 0; i < 6; ++i) CHECK(p6[h6.size() + i] == expect[i]);

  // Out-of-range pixels clamp instead of wrapping.
  Image hot{Shape3{1, 1, 2}, {-0.5, 1.5}};
  evalio::write_ppm(path, hot);
  const auto clamped = slurp(path);
  CHECK(clamped[clamped.size() - 2] == 0);
  CHECK(clamped[clamped.size() - 1] == 255);

  Image twoch{Shape3{2, 1, 1}, {0.0, 0.0}};
  CHECK_THROWS_AS(evalio::write_ppm(path, twoch), std::invalid_argument);
  std::remove(path);
}

TEST_CASE("read_ppm round-trips and rejects malformed files") {
  const char* path = "test_evalio_rt.pnm";
  SeededRng rng(9);
  Image img{Shape3{3, 6, 5}, {}};
  img.pixels.resize(img.shape.numel());
  // Quantized values round-trip bit for bit through the 8-bit file.
  for (auto& v : img.pixels)
    v = static_cast<double>(rng.uniform_index(256)) / 255.0;

  evalio::write_ppm(path, img);
  const Image back = evalio::read_ppm(path);
  CHECK(back.shape == img.shape);
  REQUIRE(back.pixels.size() == img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    CHECK(back.pixels[i] == img.pixels[i]);

  // Comments in the header are legal PNM.
  std::string text = "P5\n# comment line\n2 2\n255\n";
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  bytes.insert(bytes.end(), {10, 20, 30, 40});
  write_bytes(path, bytes);
  const Image commented = evalio::read_ppm(path);
  CHECK(commented.shape == Shape3{1, 2, 2});
  CHECK(commented.pixels[3] == doctest::Approx(40.0 / 255.0));

  // Truncated pixel payload.
  bytes.pop_back();
  write_bytes(path, bytes);
  CHECK_THROWS_AS((void)evalio::read_ppm(path), IoError);

  // Wrong magic and wrong maxval.
  std::string p3 = "P3\n1 1\n255\n0 0 0\n";
  write_bytes(path, std::vector<std::uint8_t>(p3.begin(), p3.end()));
  CHECK_THROWS_AS((void)evalio::read_ppm(path), IoError);
  std::string big = "P5\n1 1\n65535\n";
  big.push_back('\0');
  big.push_back('\0');
  write_bytes(path, std::vector<std::uint8_t>(big.begin(), big.end()));
  CHECK_THROWS_AS((void)evalio::read_ppm(path), IoError);

  std::remove(path);
  CHECK_THROWS_AS((void)evalio::read_ppm(path), IoError);
}

TEST_CASE("load_cifar10 parses records and validates") {
  const char* path = "test_evalio_cifar.bin";

  // One record: label 3, pixels cycling through byte values.
  std::vector<std::uint8_t> rec(3073);
  rec[0] = 3;
  for (std::size_t i = 0; i < 3072; ++i)
    rec[1 + i] = static_cast<std::uint8_t>((i * 7 + 3) % 256);
  write_bytes(path, rec);

  const Dataset one = evalio::load_cifar10(path);
  CHECK(one.size() == 1);
  CHECK(one.shape == Shape3{3, 32, 32});
  CHECK(one.labels[0] == 3);
  REQUIRE(one.images.cols() == 3072);
  for (std::size_t p = 0; p < 3072; ++p)
    CHECK(one.images(0, p) == rec[1 + p] / 255.0);
  REQUIRE(one.channel_mean.size() == 3);
  REQUIRE(one.channel_std.size() == 3);
  CHECK(one.channel_mean[0] == doctest::Approx(0.5).epsilon(0.1));

  // Round-trip: loaded record -> PPM -> reread, bit exact at 8-bit depth.
  const char* img_path = "test_evalio_cifar.pnm";
  Image img{one.shape, {one.images.row(0).begin(), one.images.row(0).end()}};
  evalio::write_ppm(img_path, img);
  const Image back = evalio::read_ppm(img_path);
  for (std::size_t p = 0; p < 3072; ++p) CHECK(back.pixels[p] == one.images(0, p));
  std::remove(img_path);

  // Two records.
  std::vector<std::uint8_t> two(rec);
  two.insert(two.end(), rec.begin(), rec.end());
  two[3073] = 9;
  write_bytes(path, two);
  const Dataset pair = evalio::load_cifar10(path);
  CHECK(pair.size() == 2);
  CHECK(pair.labels[1] == 9);

  // Truncated file.
  std::vector<std::uint8_t> cut(rec.begin(), rec.end() - 1);
  write_bytes(path, cut);
  CHECK_THROWS_WITH_AS((void)evalio::load_cifar10(path),
                       doctest::Contains("3073"), IoError);

  // Label out of range.
  rec[0] = 10;
  write_bytes(path, rec);
  CHECK_THROWS_WITH_AS((void)evalio::load_cifar10(path),
                       doctest::Contains("label"), IoError);

  write_bytes(path, {});
  CHECK_THROWS_AS((void)evalio::load_cifar10(path), IoError);
  std::remove(path);
}

TEST_CASE("synth_dataset determinism and class structure") {
  const Shape3 shape{3, 32, 32};
  const Dataset a = evalio::synth_dataset(64, shape, 4, 5);
  const Dataset b = evalio::synth_dataset(64, shape, 4, 5);

  REQUIRE(a.size() == 64);
  CHECK(a.labels == b.labels);
  REQUIRE(a.images.size() == b.images.size());
  for (std::size_t i = 0; i < a.images.size(); ++i)
    CHECK(a.images.data()[i] == b.images.data()[i]);

  for (int label : a.labels) {
    CHECK(label >= 0);
    CHECK(label < 4);
  }
  for (double v : a.images.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  // Class means are pairwise far apart in L2.
  std::vector<std::vector<double>> means(4, std::vector<double>(shape.numel(), 0.0));
  std::vector<std::size_t> counts(4, 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto row = a.images.row(i);
    auto& m = means[static_cast<std::size_t>(a.labels[i])];
    for (std::size_t p = 0; p < row.size(); ++p) m[p] += row[p];
    ++counts[static_cast<std::size_t>(a.labels[i])];
  }
  for (std::size_t c = 0; c < 4; ++c) {
    REQUIRE(counts[c] > 0);
    for (double& v : means[c]) v /= static_cast<double>(counts[c]);
  }
  for (std::size_t c1 = 0; c1 < 4; ++c1)
    for (std::size_t c2 = c1 + 1; c2 < 4; ++c2) {
      double d2 = 0.0;
      for (std::size_t p = 0; p < shape.numel(); ++p)
        d2 += (means[c1][p] - means[c2][p]) * (means[c1][p] - means[c2][p]);
      CHECK(std::sqrt(d2) >= 0.1);
    }

  // Different seeds differ.
  const Dataset c = evalio::synth_dataset(64, shape, 4, 6);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.images.size(); ++i)
    diff += std::abs(a.images.data()[i] - c.images.data()[i]);
  CHECK(diff > 1.0);

  // Global pixel statistics sit where the victim training expects them.
  REQUIRE(a.channel_mean.size() == 3);
  const double mu = (a.channel_mean[0] + a.channel_mean[1] + a.channel_mean[2]) / 3.0;
  CHECK(mu > 0.3);
  CHECK(mu < 0.6);
  CHECK(a.channel_std[0] > 0.05);
  CHECK(a.channel_std[0] < 0.35);

  const Dataset empty = evalio::synth_dataset(0, shape, 4, 1);
  CHECK(empty.size() == 0);
  CHECK(empty.shape == shape);

  CHECK_THROWS_AS((void)evalio::synth_dataset(4, shape, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)evalio::synth_dataset(4, Shape3{}, 2, 1), std::invalid_argument);
}

TEST_CASE("attack report aggregates and round-trip") {
  const double inf = std::numeric_limits<double>::infinity();
  evalio::AttackReport rep;
  rep.attack_id = "cpa-fi";
  rep.seed = 99;
  rep.wall_time_sec = 1.25;
  rep.config = {{"victim", "fc2"}, {"lambda.tv", "0.1"}, {"note", "two words here"}};
  rep.samples = {{0.97, 31.5, 0.88}, {0.99, inf, 0.93}, {0.5, 12.25, 0.1}};

  const auto mean = rep.mean();
  CHECK(mean.abs_cos == doctest::Approx((0.97 + 0.99 + 0.5) / 3.0).epsilon(1e-15));
  CHECK(std::isinf(mean.psnr));
  const auto med = rep.median();
  CHECK(med.abs_cos == 0.97);
  CHECK(med.psnr == 31.5);
  CHECK(med.ssim == 0.88);

  const char* path = "test_evalio_report.txt";
  evalio::save_report(path, rep);
  const evalio::AttackReport back = evalio::load_report(path);
  CHECK(back.attack_id == rep.attack_id);
  CHECK(back.seed == rep.seed);
  CHECK(back.wall_time_sec == rep.wall_time_sec);
  REQUIRE(back.config.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.config[i].first == rep.config[i].first);
    CHECK(back.config[i].second == rep.config[i].second);
  }
  REQUIRE(back.samples.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.samples[i].abs_cos == rep.samples[i].abs_cos);
    CHECK(back.samples[i].psnr == rep.samples[i].psnr);
    CHECK(back.samples[i].ssim == rep.samples[i].ssim);
  }

  // Saving the reloaded report reproduces the file byte for byte.
  const char* path2 = "test_evalio_report2.txt";
  evalio::save_report(path2, back);
  CHECK(slurp(path) == slurp(path2));
  std::remove(path2);

  // Even sample count: medians average the middle pair.
  evalio::AttackReport even = rep;
  even.samples = {{0.2, 10.0, 0.1}, {0.4, 20.0, 0.3}, {0.6, 30.0, 0.5}, {0.8, 40.0, 0.7}};
  CHECK(even.median().abs_cos == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(even.median().psnr == doctest::Approx(25.0).epsilon(1e-15));

  // Empty-sample report round-trips with zero aggregates.
  evalio::AttackReport bare;
  bare.attack_id = "gm";
  evalio::save_report(path, bare);
  const evalio::AttackReport bare_back = evalio::load_report(path);
  CHECK(bare_back.samples.empty());
  CHECK(bare_back.mean().abs_cos == 0.0);
  std::remove(path);
}

TEST_CASE("attack report rejects malformed input") {
  const char* path = "test_evalio_badreport.txt";

  auto write_text = [&](const std::string& text) {
    write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
  };

  // Aggregates that do not match the samples.
  write_text(
      "GSRPT1\nattack gm\nseed 7\nwall_time_sec 0\nconfig 0\nsamples 1\n"
      "0.5 10 0.25\nmean 0.5 10 0.25\nmedian 0.4 10 0.25\nend\n");
  CHECK_THROWS_WITH_AS((void)evalio::load_report(path),
                       doctest::Contains("aggregates"), IoError);

  write_text("GSRPTX\nattack gm\n");
  CHECK_THROWS_WITH_AS((void)evalio::load_report(path),
                       doctest::Contains("GSRPT1"), IoError);

  // Truncated mid-file.
  write_text("GSRPT1\nattack gm\nseed 7\nwall_time_sec 0\nconfig 0\nsamples 2\n0.5 10 0.25\n");
  CHECK_THROWS_AS((void)evalio::load_report(path), IoError);

  write_text("GSRPT1\nattack gm\nseed 7\nwall_time_sec zero\n");
  CHECK_THROWS_WITH_AS((void)evalio::load_report(path),
                       doctest::Contains("bad float"), IoError);

  std::remove(path);

  // Save-side validation.
  evalio::AttackReport bad;
  bad.attack_id = "two words";
  CHECK_THROWS_AS(evalio::save_report(path, bad), std::invalid_argument);
  bad.attack_id = "ok";
  bad.samples = {{std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0}};
  CHECK_THROWS_AS(evalio::save_report(path, bad), std::invalid_argument);
  bad.samples.clear();
  bad.config = {{"bad key", "v"}};
  CHECK_THROWS_AS(evalio::save_report(path, bad), std::invalid_argument);
}
