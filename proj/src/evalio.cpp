#include "gradsep/evalio.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <thread>

#include "binio.hpp"
#include "gradsep/error.hpp"

namespace gradsep::evalio {

namespace {

std::size_t thread_budget(std::size_t work_items) {
  unsigned hw = std::thread::hardware_concurrency();
  std::size_t t = hw ? hw : 1;
  if (const char* env = std::getenv("GRADSEP_THREADS")) {
    char* end = nullptr;
    unsigned long val = std::strtoul(env, &end, 10);
    if (end && *end == '\0' && val > 0) t = std::min<std::size_t>(t, val);
  }
  return std::min(t, work_items);
}

// Row results are written to disjoint slots, so the split is deterministic.
template <class F>
void parallel_rows(std::size_t n, F&& fn) {
  std::size_t t = thread_budget(n);
  if (t <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(t);
  for (std::size_t w = 0; w < t; ++w)
    pool.emplace_back([&fn, w, t, n] {
      for (std::size_t i = w; i < n; i += t) fn(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace

// ---- datasets ---------------------------------------------------------------

namespace {

void fill_channel_stats(Dataset& ds) {
  const std::size_t c = ds.shape.c, plane = ds.shape.h * ds.shape.w;
  ds.channel_mean.assign(c, 0.0);
  ds.channel_std.assign(c, 0.0);
  if (ds.images.rows() == 0) return;
  const std::size_t count = ds.images.rows() * plane;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < ds.images.rows(); ++i) {
      const double* px = ds.images.row_ptr(i) + ch * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        s += px[p];
        s2 += px[p] * px[p];
      }
    }
    const double mu = s / static_cast<double>(count);
    ds.channel_mean[ch] = mu;
    ds.channel_std[ch] = std::sqrt(std::max(0.0, s2 / static_cast<double>(count) - mu * mu));
  }
}

}  // namespace

Dataset load_cifar10(const std::string& path) {
  constexpr std::size_t kRecord = 3073;  // 1 label byte + 3 channel-major 32x32 planes
  const auto bytes = binio::read_file(path);
  if (bytes.empty()) throw IoError(path + ": empty file");
  if (bytes.size() % kRecord != 0)
    throw IoError(path + ": size " + std::to_string(bytes.size()) +
                  " is not a multiple of 3073");
  const std::size_t n = bytes.size() / kRecord;

  Dataset ds;
  ds.shape = Shape3{3, 32, 32};
  ds.images = Matrix(n, 3072);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kRecord;
    if (rec[0] > 9)
      throw IoError(path + ": record " + std::to_string(i) + " has label " +
                    std::to_string(rec[0]) + " (expected 0..9)");
    ds.labels[i] = rec[0];
    double* out = ds.images.row_ptr(i);
    for (std::size_t p = 0; p < 3072; ++p) out[p] = rec[1 + p] / 255.0;
  }
  fill_channel_stats(ds);
  return ds;
}

namespace {

void add_bump_field(numerics::SeededRng& rng, Shape3 s, int bumps, double amp_lo,
                    double amp_hi, double scale, std::vector<double>& img) {
  for (int b = 0; b < bumps; ++b) {
    const double cy = rng.uniform(0.0, static_cast<double>(s.h));
    const double cx = rng.uniform(0.0, static_cast<double>(s.w));
    const double sig = rng.uniform(s.h / 12.0, s.h / 5.0);
    const double amp =
        scale * rng.uniform(amp_lo, amp_hi) * (rng.uniform01() < 0.5 ? -1.0 : 1.0);
    std::vector<double> per_channel(s.c);
    for (auto& v : per_channel) v = rng.uniform(0.15, 1.0);
    const double inv = 1.0 / (2.0 * sig * sig);
    std::size_t idx = 0;
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x) {
          const double dy = y - cy, dx = x - cx;
          img[idx++] += amp * per_channel[c] * std::exp(-(dy * dy + dx * dx) * inv);
        }
  }
}

double laplace_noise(numerics::SeededRng& rng, double b) {
  const double v = rng.uniform01() - 0.5;
  double t = 1.0 - 2.0 * std::abs(v);
  if (t <= 0.0) t = 2.2e-16;
  return (v < 0.0 ? b : -b) * std::log(t);
}

}  // namespace

Dataset synth_dataset(std::size_t n, Shape3 shape, std::size_t k, std::uint64_t seed) {
  if (shape.numel() == 0) throw std::invalid_argument("synth_dataset: empty shape");
  if (k == 0 && n > 0) throw std::invalid_argument("synth_dataset: k must be positive");

  Dataset ds;
  ds.shape = shape;
  ds.images = Matrix(n, shape.numel());
  ds.labels.resize(n);

  numerics::SeededRng rng(seed);
  std::vector<std::vector<double>> bases(k, std::vector<double>(shape.numel(), 0.0));
  for (auto& base : bases) add_bump_field(rng, shape, 3, 0.4, 0.8, 1.0, base);

  // Pixel noise std 0.10; Laplace scale is std / sqrt(2).
  const double noise_b = 0.10 / std::sqrt(2.0);
  std::vector<double> img(shape.numel());
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::size_t>(rng.uniform_index(k));
    ds.labels[i] = static_cast<int>(label);
    for (std::size_t p = 0; p < shape.numel(); ++p)
      img[p] = 0.45 + 0.35 * bases[label][p];
    add_bump_field(rng, shape, 4, 0.35, 0.8, 0.8, img);
    double* out = ds.images.row_ptr(i);
    for (std::size_t p = 0; p < shape.numel(); ++p)
      out[p] = std::clamp(img[p] + laplace_noise(rng, noise_b), 0.0, 1.0);
  }
  fill_channel_stats(ds);
  return ds;
}

// ---- metrics ----------------------------------------------------------------

double abs_cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("abs_cosine: length mismatch");
  if (a.empty()) throw std::invalid_argument("abs_cosine: empty input");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0)
    throw NumericalError("abs_cosine: undefined for zero vector");
  return std::abs(dot) / std::sqrt(na * nb);
}

double psnr(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("psnr: length mismatch");
  if (a.empty()) throw std::invalid_argument("psnr: empty input");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

double ssim(std::span<const double> a, std::span<const double> b, Shape3 shape) {
  if (a.size() != shape.numel() || b.size() != shape.numel())
    throw std::invalid_argument("ssim: image size does not match shape");
  if (shape.numel() == 0) throw std::invalid_argument("ssim: empty shape");
  constexpr double kC1 = 0.01 * 0.01;  // (K1 * L)^2 with L = 1
  constexpr double kC2 = 0.03 * 0.03;
  const std::size_t h = shape.h, w = shape.w;
  const std::size_t wh = std::min<std::size_t>(8, h), ww = std::min<std::size_t>(8, w);
  const double win = static_cast<double>(wh * ww);

  double acc = 0.0;
  std::size_t windows = 0;
  for (std::size_t c = 0; c < shape.c; ++c) {
    const double* pa = a.data() + c * h * w;
    const double* pb = b.data() + c * h * w;
    for (std::size_t y0 = 0; y0 + wh <= h; ++y0)
      for (std::size_t x0 = 0; x0 + ww <= w; ++x0) {
        double sa = 0.0, sb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
        for (std::size_t y = y0; y < y0 + wh; ++y)
          for (std::size_t x = x0; x < x0 + ww; ++x) {
            const double va = pa[y * w + x], vb = pb[y * w + x];
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
          }
        const double ma = sa / win, mb = sb / win;
        const double va = std::max(0.0, saa / win - ma * ma);
        const double vb = std::max(0.0, sbb / win - mb * mb);
        const double cov = sab / win - ma * mb;
        acc += ((2.0 * ma * mb + kC1) * (2.0 * cov + kC2)) /
               ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
        ++windows;
      }
  }
  return acc / static_cast<double>(windows);
}

std::vector<double> fit_affine(std::span<const double> rec, std::span<const double> truth) {
  if (rec.size() != truth.size())
    throw std::invalid_argument("fit_affine: length mismatch");
  if (rec.empty()) throw std::invalid_argument("fit_affine: empty input");
  const double n = static_cast<double>(rec.size());
  double mr = 0.0, mt = 0.0;
  for (std::size_t i = 0; i < rec.size(); ++i) {
    mr += rec[i];
    mt += truth[i];
  }
  mr /= n;
  mt /= n;
  double var = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < rec.size(); ++i) {
    var += (rec[i] - mr) * (rec[i] - mr);
    cov += (rec[i] - mr) * (truth[i] - mt);
  }
  const double s = var > 0.0 ? cov / var : 0.0;
  const double t = mt - s * mr;
  std::vector<double> out(rec.size());
  for (std::size_t i = 0; i < rec.size(); ++i) out[i] = s * rec[i] + t;
  return out;
}

Matrix center_rows(const Matrix& m) {
  Matrix out = m;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(row.size());
    for (double& v : row) v -= mu;
  }
  return out;
}

std::vector<double> rescale_unit(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("rescale_unit: empty input");
  const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<double> out(x.size());
  if (hi == lo) {
    std::fill(out.begin(), out.end(), 0.5);
    return out;
  }
  const double inv = 1.0 / (hi - lo);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - lo) * inv;
  return out;
}

// ---- matching ---------------------------------------------------------------

double MatchResult::total() const {
  double s = 0.0;
  for (double v : per_pair_abs_cos) s += v;
  return s;
}

double MatchResult::mean_matched() const {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < permutation.size(); ++i)
    if (permutation[i] != kUnmatched) {
      s += per_pair_abs_cos[i];
      ++n;
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

namespace {

// Potential-based Hungarian algorithm, O(rows^2 * cols) with rows <= cols.
// Minimizes cost; returns the column assigned to each row.
std::vector<std::size_t> assign_min_cost(const Matrix& cost) {
  const std::size_t n = cost.rows(), m = cost.cols();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  std::vector<char> used(m + 1, 0);

  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      std::size_t j1 = 0;
      double delta = inf;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> row_to_col(n, kUnmatched);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

double safe_abs_cos(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::abs(dot) / std::sqrt(na * nb);
}

}  // namespace

MatchResult hungarian_match(const Matrix& recovered, const Matrix& truth) {
  if (recovered.rows() == 0 || truth.rows() == 0)
    throw std::invalid_argument("hungarian_match: empty input");
  if (recovered.cols() != truth.cols())
    throw std::invalid_argument("hungarian_match: column count mismatch");

  const std::size_t nr = recovered.rows(), nt = truth.rows();
  Matrix score(nr, nt);
  parallel_rows(nr, [&](std::size_t i) {
    for (std::size_t j = 0; j < nt; ++j)
      score(i, j) = safe_abs_cos(recovered.row(i), truth.row(j));
  });

  MatchResult res;
  res.permutation.assign(nr, kUnmatched);
  res.per_pair_abs_cos.assign(nr, 0.0);

  if (nr <= nt) {
    Matrix cost(nr, nt);
    for (std::size_t i = 0; i < nr; ++i)
      for (std::size_t j = 0; j < nt; ++j) cost(i, j) = -score(i, j);
    res.permutation = assign_min_cost(cost);
  } else {
    // More recoveries than truths: assign every truth row, leave the rest out.
    Matrix cost(nt, nr);
    for (std::size_t j = 0; j < nt; ++j)
      for (std::size_t i = 0; i < nr; ++i) cost(j, i) = -score(i, j);
    const auto truth_to_rec = assign_min_cost(cost);
    for (std::size_t j = 0; j < nt; ++j)
      if (truth_to_rec[j] != kUnmatched) res.permutation[truth_to_rec[j]] = j;
  }

  for (std::size_t i = 0; i < nr; ++i) {
    if (res.permutation[i] == kUnmatched)
      res.unmatched.push_back(i);
    else
      res.per_pair_abs_cos[i] = score(i, res.permutation[i]);
  }
  return res;
}

// ---- images on disk ---------------------------------------------------------

Image montage(const Matrix& images, Shape3 shape, std::size_t cols) {
  if (images.rows() == 0) throw std::invalid_argument("montage: no images");
  if (cols == 0) throw std::invalid_argument("montage: cols must be positive");
  if (images.cols() != shape.numel())
    throw std::invalid_argument("montage: image width does not match shape");

  const std::size_t n = images.rows();
  const std::size_t grid_rows = (n + cols - 1) / cols;
  Image out;
  out.shape = Shape3{shape.c, grid_rows * shape.h, cols * shape.w};
  out.pixels.assign(out.shape.numel(), 0.0);

  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t gy = (i / cols) * shape.h, gx = (i % cols) * shape.w;
    const double* src = images.row_ptr(i);
    for (std::size_t c = 0; c < shape.c; ++c)
      for (std::size_t y = 0; y < shape.h; ++y) {
        double* dst = out.pixels.data() +
                      (c * out.shape.h + gy + y) * out.shape.w + gx;
        const double* row = src + (c * shape.h + y) * shape.w;
        std::copy(row, row + shape.w, dst);
      }
  }
  return out;
}

void write_ppm(const std::string& path, const Image& img) {
  if (img.shape.c != 1 && img.shape.c != 3)
    throw std::invalid_argument("write_ppm: only 1 or 3 channels supported");
  if (img.pixels.size() != img.shape.numel())
    throw std::invalid_argument("write_ppm: pixel count does not match shape");
  if (img.shape.numel() == 0) throw std::invalid_argument("write_ppm: empty image");

  const std::size_t h = img.shape.h, w = img.shape.w, c = img.shape.c;
  std::string header = (c == 3 ? "P6\n" : "P5\n") + std::to_string(w) + " " +
                       std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.reserve(bytes.size() + h * w * c);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp(img.pixels[(ch * h + y) * w + x], 0.0, 1.0);
        bytes.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
      }
  binio::write_file(path, bytes);
}

namespace {

struct PnmScanner {
  const std::vector<std::uint8_t>& bytes;
  const std::string& path;
  std::size_t pos = 0;

  void skip_space() {
    while (pos < bytes.size()) {
      const char ch = static_cast<char>(bytes[pos]);
      if (ch == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (ch == ' ' || ch == '\t' || ch == '\r' || ch == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  }

  std::size_t next_uint() {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos]))
      throw IoError(path + ": malformed PNM header");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1u << 24) throw IoError(path + ": PNM dimension out of range");
      ++pos;
    }
    return v;
  }
};

}  // namespace

Image read_ppm(const std::string& path) {
  const auto bytes = binio::read_file(path);
  if (bytes.size() < 2) throw IoError(path + ": not a PNM file");
  const char m0 = static_cast<char>(bytes[0]), m1 = static_cast<char>(bytes[1]);
  std::size_t channels;
  if (m0 == 'P' && m1 == '6')
    channels = 3;
  else if (m0 == 'P' && m1 == '5')
    channels = 1;
  else
    throw IoError(path + ": unsupported PNM magic (want P5 or P6)");

  PnmScanner scan{bytes, path, 2};
  const std::size_t w = scan.next_uint();
  const std::size_t h = scan.next_uint();
  const std::size_t maxval = scan.next_uint();
  if (w == 0 || h == 0) throw IoError(path + ": zero PNM dimension");
  if (maxval != 255) throw IoError(path + ": only maxval 255 supported");
  if (scan.pos >= bytes.size()) throw IoError(path + ": truncated pixel data");
  ++scan.pos;  // single whitespace byte after maxval

  const std::size_t need = w * h * channels;
  if (bytes.size() - scan.pos < need) throw IoError(path + ": truncated pixel data");

  Image img;
  img.shape = Shape3{channels, h, w};
  img.pixels.resize(need);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < channels; ++ch)
        img.pixels[(ch * h + y) * w + x] = bytes[scan.pos++] / 255.0;
  return img;
}

// ---- attack reports ---------------------------------------------------------

namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt_f64(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool has_space(const std::string& s) {
  return s.find_first_of(" \t\r\n") != std::string::npos;
}

}  // namespace

SampleMetrics AttackReport::mean() const {
  SampleMetrics m;
  if (samples.empty()) return m;
  for (const auto& s : samples) {
    m.abs_cos += s.abs_cos;
    m.psnr += s.psnr;
    m.ssim += s.ssim;
  }
  const double n = static_cast<double>(samples.size());
  m.abs_cos /= n;
  m.psnr /= n;
  m.ssim /= n;
  return m;
}

SampleMetrics AttackReport::median() const {
  SampleMetrics m;
  if (samples.empty()) return m;
  std::vector<double> a, p, s;
  for (const auto& e : samples) {
    a.push_back(e.abs_cos);
    p.push_back(e.psnr);
    s.push_back(e.ssim);
  }
  m.abs_cos = median_of(std::move(a));
  m.psnr = median_of(std::move(p));
  m.ssim = median_of(std::move(s));
  return m;
}

void save_report(const std::string& path, const AttackReport& report) {
  if (report.attack_id.empty() || has_space(report.attack_id))
    throw std::invalid_argument("save_report: attack id must be a single token");
  for (const auto& [key, value] : report.config) {
    if (key.empty() || has_space(key))
      throw std::invalid_argument("save_report: config key must be a single token");
    if (value.find('\n') != std::string::npos)
      throw std::invalid_argument("save_report: config value must be one line");
  }
  for (const auto& s : report.samples)
    if (std::isnan(s.abs_cos) || std::isnan(s.psnr) || std::isnan(s.ssim))
      throw std::invalid_argument("save_report: NaN metric");
  if (std::isnan(report.wall_time_sec))
    throw std::invalid_argument("save_report: NaN wall time");

  std::string out = "GSRPT1\n";
  out += "attack " + report.attack_id + "\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%" PRIu64, report.seed);
  out += std::string("seed ") + buf + "\n";
  out += "wall_time_sec " + fmt_f64(report.wall_time_sec) + "\n";
  out += "config " + std::to_string(report.config.size()) + "\n";
  for (const auto& [key, value] : report.config) out += key + " " + value + "\n";
  out += "samples " + std::to_string(report.samples.size()) + "\n";
  for (const auto& s : report.samples)
    out += fmt_f64(s.abs_cos) + " " + fmt_f64(s.psnr) + " " + fmt_f64(s.ssim) + "\n";
  const auto mn = report.mean(), md = report.median();
  out += "mean " + fmt_f64(mn.abs_cos) + " " + fmt_f64(mn.psnr) + " " +
         fmt_f64(mn.ssim) + "\n";
  out += "median " + fmt_f64(md.abs_cos) + " " + fmt_f64(md.psnr) + " " +
         fmt_f64(md.ssim) + "\n";
  out += "end\n";
  binio::write_file(path, std::vector<std::uint8_t>(out.begin(), out.end()));
}

namespace {

struct LineReader {
  std::vector<std::string> lines;
  std::size_t next = 0;
  const std::string& path;

  const std::string& take(const char* what) {
    if (next >= lines.size())
      throw IoError(path + ": truncated report, expected " + what);
    return lines[next++];
  }
};

// Expects "<tag> <rest>"; returns rest.
std::string expect_tag(LineReader& lr, const std::string& tag) {
  const std::string& line = lr.take(tag.c_str());
  if (line.compare(0, tag.size(), tag) != 0 || line.size() <= tag.size() ||
      line[tag.size()] != ' ')
    throw IoError(lr.path + ": expected '" + tag + "' line, got '" + line + "'");
  return line.substr(tag.size() + 1);
}

double parse_f64(const std::string& s, const std::string& path) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size())
    throw IoError(path + ": bad float '" + s + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& s, const std::string& path) {
  if (s.empty() || !std::isdigit(static_cast<unsigned char>(s[0])))
    throw IoError(path + ": bad integer '" + s + "'");
  char* end = nullptr;
  const std::uint64_t v = std::strtoull(s.c_str(), &end, 10);
  if (end != s.c_str() + s.size())
    throw IoError(path + ": bad integer '" + s + "'");
  return v;
}

SampleMetrics parse_triple(const std::string& rest, const std::string& path) {
  const std::size_t s1 = rest.find(' ');
  const std::size_t s2 = s1 == std::string::npos ? s1 : rest.find(' ', s1 + 1);
  if (s1 == std::string::npos || s2 == std::string::npos)
    throw IoError(path + ": expected three metric fields in '" + rest + "'");
  SampleMetrics m;
  m.abs_cos = parse_f64(rest.substr(0, s1), path);
  m.psnr = parse_f64(rest.substr(s1 + 1, s2 - s1 - 1), path);
  m.ssim = parse_f64(rest.substr(s2 + 1), path);
  return m;
}

bool same_metric(double a, double b) { return a == b || (std::isinf(a) && std::isinf(b) && a * b > 0); }

bool same_metrics(const SampleMetrics& a, const SampleMetrics& b) {
  return same_metric(a.abs_cos, b.abs_cos) && same_metric(a.psnr, b.psnr) &&
         same_metric(a.ssim, b.ssim);
}

}  // namespace

AttackReport load_report(const std::string& path) {
  const auto bytes = binio::read_file(path);
  LineReader lr{{}, 0, path};
  std::string cur;
  for (std::uint8_t b : bytes) {
    if (b == '\n') {
      lr.lines.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(b));
    }
  }
  if (!cur.empty()) lr.lines.push_back(std::move(cur));

  if (lr.take("magic") != "GSRPT1") throw IoError(path + ": not a GSRPT1 report");

  AttackReport rep;
  rep.attack_id = expect_tag(lr, "attack");
  if (rep.attack_id.empty() || has_space(rep.attack_id))
    throw IoError(path + ": malformed attack id");
  rep.seed = parse_u64(expect_tag(lr, "seed"), path);
  rep.wall_time_sec = parse_f64(expect_tag(lr, "wall_time_sec"), path);

  const std::uint64_t n_config = parse_u64(expect_tag(lr, "config"), path);
  for (std::uint64_t i = 0; i < n_config; ++i) {
    const std::string& line = lr.take("config entry");
    const std::size_t sp = line.find(' ');
    if (sp == std::string::npos || sp == 0)
      throw IoError(path + ": malformed config entry '" + line + "'");
    rep.config.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }

  const std::uint64_t n_samples = parse_u64(expect_tag(lr, "samples"), path);
  for (std::uint64_t i = 0; i < n_samples; ++i)
    rep.samples.push_back(parse_triple(lr.take("sample entry"), path));

  const SampleMetrics mean_in = parse_triple(expect_tag(lr, "mean"), path);
  const SampleMetrics median_in = parse_triple(expect_tag(lr, "median"), path);
  if (lr.take("end") != "end") throw IoError(path + ": missing end marker");

  // %.17g round-trips doubles exactly, so the stored aggregates must agree
  // bit for bit with ones recomputed from the parsed samples.
  if (!same_metrics(mean_in, rep.mean()) || !same_metrics(median_in, rep.median()))
    throw IoError(path + ": aggregates do not match samples");
  return rep;
}

}  // namespace gradsep::evalio
