#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gradsep/nets.hpp"
#include "gradsep/numerics.hpp"

namespace gradsep::evalio {

using nets::Shape3;
using numerics::Matrix;

// ---- datasets ---------------------------------------------------------------

struct Dataset {
  Matrix images;                     // n x (c*h*w), channel-major, values in [0,1]
  std::vector<int> labels;
  Shape3 shape;
  std::vector<double> channel_mean;  // per-channel stats over the whole set
  std::vector<double> channel_std;

  std::size_t size() const { return images.rows(); }
};

// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes
// (channel-major planes, which matches our layout directly).
Dataset load_cifar10(const std::string& path);

// Class-conditional synthetic images: a smooth per-class base field plus a
// smooth per-sample field plus Laplacian pixel noise, clipped to [0,1].
// Deterministic per seed. Class base fields are far apart in L2, so class
// structure survives the noise and a victim net has something to learn.
Dataset synth_dataset(std::size_t n, Shape3 shape, std::size_t k, std::uint64_t seed);

// ---- metrics ----------------------------------------------------------------

// |a.b| / (|a||b|). Sign-blind on purpose: separation recovers sources only
// up to sign.
double abs_cosine(std::span<const double> a, std::span<const double> b);

// Peak signal-to-noise ratio in dB for [0,1] images; identical inputs give
// +infinity.
double psnr(std::span<const double> a, std::span<const double> b);

// Mean SSIM over sliding uniform 8x8 windows (population moments, C1=0.01^2,
// C2=0.03^2 on unit dynamic range), averaged across channels. Windows shrink
// to the image when a side is smaller than 8.
double ssim(std::span<const double> a, std::span<const double> b, Shape3 shape);

// Least-squares fit s*rec + t to truth. Absorbs the scale/sign/offset the
// separation cannot identify; apply before psnr/ssim. A constant rec row
// degrades to the best constant fit (mean of truth).
std::vector<double> fit_affine(std::span<const double> rec, std::span<const double> truth);

// Subtract each row's mean. Image rows are centered before matching so the
// score is a correlation, not dominated by the shared DC level.
Matrix center_rows(const Matrix& m);

// Min-max rescale to [0,1] for display; a constant input maps to all 0.5.
std::vector<double> rescale_unit(std::span<const double> x);

// ---- matching ---------------------------------------------------------------

inline constexpr std::size_t kUnmatched = std::numeric_limits<std::size_t>::max();

struct MatchResult {
  // permutation[i] = truth row assigned to recovered row i, or kUnmatched.
  std::vector<std::size_t> permutation;
  std::vector<double> per_pair_abs_cos;  // 0.0 on unmatched entries
  std::vector<std::size_t> unmatched;    // recovered rows left over when rec > truth

  double total() const;
  double mean_matched() const;
};

// Optimal assignment maximizing total |cos| between recovered and truth rows,
// O(n^3). Rows that are identically zero score 0 against everything instead
// of raising, so one collapsed recovery cannot sink the whole evaluation.
MatchResult hungarian_match(const Matrix& recovered, const Matrix& truth);

// ---- images on disk ---------------------------------------------------------

struct Image {
  Shape3 shape;
  std::vector<double> pixels;  // channel-major, [0,1]
};

// Tile n images into a ceil(n/cols) x cols grid; missing cells are black.
Image montage(const Matrix& images, Shape3 shape, std::size_t cols);

// 8-bit binary PPM (P6) for 3-channel images, PGM (P5) for single-channel.
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

// ---- attack reports ---------------------------------------------------------

struct SampleMetrics {
  double abs_cos = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct AttackReport {
  std::string attack_id;  // no whitespace
  std::vector<std::pair<std::string, std::string>> config;  // ordered snapshot
  std::vector<SampleMetrics> samples;
  double wall_time_sec = 0.0;
  std::uint64_t seed = 0;

  SampleMetrics mean() const;
  SampleMetrics median() const;
};

// Line-delimited text with a fixed field order and %.17g floats, so files
// round-trip bit-exactly and diff cleanly. load_report recomputes the
// aggregates and rejects files where they disagree with the samples.
void save_report(const std::string& path, const AttackReport& report);
AttackReport load_report(const std::string& path);

}  // namespace gradsep::evalio
