#include "gradsep/cpa.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "binio.hpp"
#include "gradsep/error.hpp"

namespace gradsep::cpa {

using numerics::EigResult;
using numerics::matmul;
using numerics::matmul_abt;
using numerics::SeededRng;

namespace {

// log cosh(t) without overflow: |t| - ln 2 + log1p(exp(-2|t|)).
double logcosh(double t) {
  const double at = std::abs(t);
  return at - 0.6931471805599453 + std::log1p(std::exp(-2.0 * at));
}

void validate_config(const AttackConfig& cfg) {
  if (cfg.lambda_ne < 0 || cfg.lambda_tv < 0 || cfg.lambda_mi < 0 || cfg.lambda_sp < 0 ||
      cfg.lambda_sr < 0) {
    throw std::invalid_argument("attack config: lambdas must be >= 0");
  }
  if (!(cfg.temperature_t > 0)) throw std::invalid_argument("attack config: temperature must be > 0");
  if (!(cfg.negentropy_a >= 1.0 && cfg.negentropy_a <= 2.0)) {
    throw std::invalid_argument("attack config: negentropy_a must lie in [1,2]");
  }
  if (cfg.iters == 0) throw std::invalid_argument("attack config: iters must be positive");
  if (!(cfg.lr > 0)) throw std::invalid_argument("attack config: lr must be > 0");
  if (cfg.mode == AttackMode::kEmbedding && cfg.lambda_tv != 0) {
    throw std::invalid_argument("attack config: embedding mode forbids lambda_tv");
  }
}

}  // namespace

// ---- whitening ------------------------------------------------------------------

namespace {

// Shared whitening core. Image mode centers each row (standard ICA); embedding
// mode whitens raw second moments instead, because an exactly zero-mean
// recovery can never be one-sided and the sign regularizer would reduce to
// half the sparsity term.
std::pair<Matrix, WhiteningTransform> whiten_impl(const MixedSignalMatrix& g, std::size_t n,
                                                  bool center) {
  const std::size_t m = g.g.rows();
  const std::size_t d = g.g.cols();
  if (n == 0) throw std::invalid_argument("center_whiten: n must be positive");
  if (n > m) {
    throw std::invalid_argument("center_whiten: requested " + std::to_string(n) +
                                " sources from " + std::to_string(m) + " mixtures");
  }
  if (!g.g.all_finite()) throw NumericalError("center_whiten: non-finite gradient matrix");

  std::vector<double> means(m, 0.0);
  if (center) {
    for (std::size_t r = 0; r < m; ++r) means[r] = numerics::mean(g.g.row(r));
  }

  // Canonical row order: sort centered rows lexicographically so the whitened
  // output is identical no matter how the input rows were permuted.
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  Matrix centered(m, d);
  for (std::size_t r = 0; r < m; ++r) {
    const double* src = g.g.row_ptr(r);
    double* dst = centered.row_ptr(r);
    for (std::size_t c = 0; c < d; ++c) dst[c] = src[c] - means[r];
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(centered.row_ptr(a), centered.row_ptr(a) + d,
                                        centered.row_ptr(b), centered.row_ptr(b) + d);
  });
  Matrix sorted(m, d);
  for (std::size_t r = 0; r < m; ++r) {
    std::copy(centered.row_ptr(order[r]), centered.row_ptr(order[r]) + d, sorted.row_ptr(r));
  }

  Matrix cov = matmul_abt(sorted, sorted);
  const double inv_d = 1.0 / static_cast<double>(d);
  for (double& v : cov.data()) v *= inv_d;

  EigResult eig = numerics::sym_eig(cov);
  // Whitening is scale-invariant, so judge rank relative to the spectrum top:
  // captured gradients from a trained victim can be uniformly tiny without
  // being deficient.
  const double floor = std::max(eig.eigenvalues[0], 0.0) * 1e-10;
  std::size_t deficient = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (eig.eigenvalues[i] <= floor) ++deficient;
  }
  if (deficient > 0) {
    throw NumericalError("center_whiten: rank deficiency, " + std::to_string(deficient) +
                         " of the top " + std::to_string(n) +
                         " eigenvalues are <= 1e-10 of the largest");
  }

  Matrix proj_sorted(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = 1.0 / std::sqrt(eig.eigenvalues[i]);
    for (std::size_t r = 0; r < m; ++r) proj_sorted(i, r) = s * eig.eigenvectors(r, i);
  }
  Matrix gw = matmul(proj_sorted, sorted);

  WhiteningTransform t;
  t.row_means = std::move(means);
  t.retained = n;
  t.projection = Matrix(n, m);
  for (std::size_t k = 0; k < m; ++k) {
    for (std::size_t i = 0; i < n; ++i) t.projection(i, order[k]) = proj_sorted(i, k);
  }
  return {std::move(gw), std::move(t)};
}

}  // namespace

std::pair<Matrix, WhiteningTransform> center_whiten(const MixedSignalMatrix& g, std::size_t n) {
  return whiten_impl(g, n, true);
}

// ---- scalar ops -------------------------------------------------------------------

double negentropy(std::span<const double> x, double a) {
  if (!(a > 0)) throw std::invalid_argument("negentropy: a must be > 0");
  if (x.empty()) return 0;
  double s = 0;
  for (double v : x) s += logcosh(a * v);
  return 2.0 / (a * a) * s / static_cast<double>(x.size());
}

double gaussian_negentropy_reference(double a) {
  if (!(a > 0)) throw std::invalid_argument("negentropy: a must be > 0");
  // Simpson quadrature of (2/a^2) log cosh(a t) phi(t) over [-12, 12]; the
  // tail mass beyond 12 sigma is ~1e-32 and the grid is fine enough for
  // ~1e-11 absolute accuracy.
  const std::size_t intervals = 8000;
  const double lo = -12.0, hi = 12.0;
  const double h = (hi - lo) / static_cast<double>(intervals);
  const double inv_sqrt2pi = 0.3989422804014327;
  auto f = [&](double t) {
    return 2.0 / (a * a) * logcosh(a * t) * inv_sqrt2pi * std::exp(-0.5 * t * t);
  };
  double s = f(lo) + f(hi);
  for (std::size_t i = 1; i < intervals; ++i) {
    s += f(lo + h * static_cast<double>(i)) * (i % 2 == 1 ? 4.0 : 2.0);
  }
  return s * h / 3.0;
}

double mi_regularizer(const UnmixingMatrix& u, double t) {
  if (!(t > 0)) throw std::invalid_argument("mi_regularizer: temperature must be > 0");
  const std::size_t n = u.u.rows();
  if (n == 0) throw std::invalid_argument("mi_regularizer: empty matrix");
  if (n == 1) return 0;
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = numerics::norm2(u.u.row(i));
    if (norms[i] == 0) throw NumericalError("mi_regularizer: zero row " + std::to_string(i));
  }
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double c = numerics::dot(u.u.row(i), u.u.row(j)) / (norms[i] * norms[j]);
      s += std::exp(t * std::abs(c));
    }
  }
  return 2.0 * s / (static_cast<double>(n) * static_cast<double>(n - 1));
}

double tv_prior(std::span<const double> x, Shape3 shape) {
  if (x.size() != shape.numel() || shape.numel() == 0) {
    throw std::invalid_argument("tv_prior: vector length does not match shape");
  }
  const std::size_t hw = shape.h * shape.w;
  const std::size_t nv = (shape.h - 1) * shape.w;
  const std::size_t nh = shape.h * (shape.w - 1);
  double total = 0;
  for (std::size_t c = 0; c < shape.c; ++c) {
    const double* plane = x.data() + c * hw;
    double sv = 0, sh = 0;
    for (std::size_t i = 0; i + 1 < shape.h; ++i) {
      for (std::size_t j = 0; j < shape.w; ++j) {
        sv += std::abs(plane[(i + 1) * shape.w + j] - plane[i * shape.w + j]);
      }
    }
    for (std::size_t i = 0; i < shape.h; ++i) {
      for (std::size_t j = 0; j + 1 < shape.w; ++j) {
        sh += std::abs(plane[i * shape.w + j + 1] - plane[i * shape.w + j]);
      }
    }
    total += (nv ? sv / static_cast<double>(nv) : 0.0) + (nh ? sh / static_cast<double>(nh) : 0.0);
  }
  return total / static_cast<double>(shape.c);
}

double sparsity(std::span<const double> x) {
  if (x.empty()) return 0;
  double s = 0;
  for (double v : x) s += std::abs(v);
  return s / static_cast<double>(x.size());
}

double sign_regularizer(std::span<const double> x) {
  if (x.empty()) return 0;
  double pos = 0, neg = 0;
  for (double v : x) {
    if (v > 0)
      pos += v;
    else
      neg -= v;
  }
  const double inv = 1.0 / static_cast<double>(x.size());
  return std::min(pos * inv, neg * inv);
}

// ---- objective --------------------------------------------------------------------

namespace {

// subgradient of tv_prior, same layout as the input
void tv_grad_into(std::span<const double> x, Shape3 shape, std::span<double> grad) {
  const std::size_t hw = shape.h * shape.w;
  const double nv = static_cast<double>((shape.h - 1) * shape.w) * static_cast<double>(shape.c);
  const double nh = static_cast<double>(shape.h * (shape.w - 1)) * static_cast<double>(shape.c);
  for (std::size_t c = 0; c < shape.c; ++c) {
    const double* plane = x.data() + c * hw;
    double* gp = grad.data() + c * hw;
    if (nv > 0) {
      for (std::size_t i = 0; i + 1 < shape.h; ++i) {
        for (std::size_t j = 0; j < shape.w; ++j) {
          const double diff = plane[(i + 1) * shape.w + j] - plane[i * shape.w + j];
          const double s = (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0)) / nv;
          gp[(i + 1) * shape.w + j] += s;
          gp[i * shape.w + j] -= s;
        }
      }
    }
    if (nh > 0) {
      for (std::size_t i = 0; i < shape.h; ++i) {
        for (std::size_t j = 0; j + 1 < shape.w; ++j) {
          const double diff = plane[i * shape.w + j + 1] - plane[i * shape.w + j];
          const double s = (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0)) / nh;
          gp[i * shape.w + j + 1] += s;
          gp[i * shape.w + j] -= s;
        }
      }
    }
  }
}

ObjectiveEval objective_core(const Matrix& u, const Matrix& gw, const AttackConfig& cfg,
                             const std::optional<Shape3>& shape_hint, double j_gauss) {
  const std::size_t n = u.rows();
  const std::size_t d = gw.cols();
  const double a = cfg.negentropy_a;

  // normalized rows
  Matrix un(n, n);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = numerics::norm2(u.row(i));
    if (norms[i] == 0) throw NumericalError("attack objective: zero unmixing row");
    for (std::size_t j = 0; j < n; ++j) un(i, j) = u(i, j) / norms[i];
  }

  Matrix xh = matmul(un, gw);  // n x d source estimates
  Matrix gx(n, d);             // d(objective)/d(xh)
  double value = 0;

  for (std::size_t i = 0; i < n; ++i) {
    const std::span<const double> row = xh.row(i);
    const double ji = negentropy(row, a);
    const double dev = ji - j_gauss;
    const double sgn = dev > 0 ? 1.0 : (dev < 0 ? -1.0 : 0.0);
    double row_obj = cfg.lambda_ne * std::abs(dev);
    double* g = gx.row_ptr(i);
    const double ne_coeff = cfg.lambda_ne * sgn * 2.0 / (a * static_cast<double>(d));
    for (std::size_t k = 0; k < d; ++k) g[k] = ne_coeff * std::tanh(a * row[k]);

    if (cfg.mode == AttackMode::kImage) {
      if (cfg.lambda_tv > 0) {
        const Shape3 shape = *shape_hint;
        row_obj -= cfg.lambda_tv * tv_prior(row, shape);
        std::vector<double> gtv(d, 0.0);
        tv_grad_into(row, shape, gtv);
        for (std::size_t k = 0; k < d; ++k) g[k] -= cfg.lambda_tv * gtv[k];
      }
    } else {
      if (cfg.lambda_sp > 0) {
        row_obj -= cfg.lambda_sp * sparsity(row);
        const double inv = cfg.lambda_sp / static_cast<double>(d);
        for (std::size_t k = 0; k < d; ++k) {
          g[k] -= inv * (row[k] > 0 ? 1.0 : (row[k] < 0 ? -1.0 : 0.0));
        }
      }
      if (cfg.lambda_sr > 0) {
        double pos = 0, neg = 0;
        for (double v : row) {
          if (v > 0)
            pos += v;
          else
            neg -= v;
        }
        const double invd = 1.0 / static_cast<double>(d);
        row_obj -= cfg.lambda_sr * std::min(pos, neg) * invd;
        const double coeff = cfg.lambda_sr * invd;
        if (pos <= neg) {
          for (std::size_t k = 0; k < d; ++k) {
            if (row[k] > 0) g[k] -= coeff;
          }
        } else {
          for (std::size_t k = 0; k < d; ++k) {
            if (row[k] < 0) g[k] += coeff;
          }
        }
      }
    }
    value += row_obj;
  }
  value /= static_cast<double>(n);

  // d(mean row objectives)/d(un) = (gx/n) * gw^T
  Matrix g_un = matmul_abt(gx, gw);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (double& v : g_un.data()) v *= inv_n;

  if (cfg.lambda_mi > 0 && n > 1) {
    Matrix cm = matmul_abt(un, un);
    double r = 0;
    const double pair_scale = 2.0 / (static_cast<double>(n) * static_cast<double>(n - 1));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double c = cm(i, j);
        const double e = std::exp(cfg.temperature_t * std::abs(c));
        r += e;
        const double w =
            cfg.lambda_mi * pair_scale * e * cfg.temperature_t * (c > 0 ? 1.0 : (c < 0 ? -1.0 : 0.0));
        for (std::size_t k = 0; k < n; ++k) {
          g_un(i, k) -= w * (un(j, k) - c * un(i, k));
          g_un(j, k) -= w * (un(i, k) - c * un(j, k));
        }
      }
    }
    value -= cfg.lambda_mi * pair_scale * r;
  }

  // through the row normalization: project out the radial component
  ObjectiveEval ev;
  ev.value = value;
  ev.grad = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double radial = numerics::dot(g_un.row(i), un.row(i));
    for (std::size_t k = 0; k < n; ++k) {
      ev.grad(i, k) = (g_un(i, k) - radial * un(i, k)) / norms[i];
    }
  }
  return ev;
}

}  // namespace

void tv_prior_grad(std::span<const double> x, Shape3 shape, std::span<double> grad) {
  if (x.size() != shape.numel() || shape.numel() == 0) {
    throw std::invalid_argument("tv_prior: vector length does not match shape");
  }
  if (grad.size() != x.size()) {
    throw std::invalid_argument("tv_prior_grad: gradient length does not match input");
  }
  tv_grad_into(x, shape, grad);
}

ObjectiveEval attack_objective(const Matrix& u, const Matrix& gw, const AttackConfig& cfg,
                               const std::optional<Shape3>& shape_hint) {
  if (u.rows() != gw.rows() || u.cols() != u.rows()) {
    throw std::invalid_argument("attack_objective: unmixing matrix must be n x n");
  }
  if (cfg.mode == AttackMode::kImage && cfg.lambda_tv > 0) {
    if (!shape_hint || shape_hint->numel() != gw.cols()) {
      throw std::invalid_argument("attack_objective: shape hint does not match signal length");
    }
  }
  return objective_core(u, gw, cfg, shape_hint, gaussian_negentropy_reference(cfg.negentropy_a));
}

// ---- the attack loop ----------------------------------------------------------------

namespace {

RecoveredBatch run_attack(const MixedSignalMatrix& g, const AttackConfig& cfg, std::size_t n) {
  validate_config(cfg);
  if (cfg.mode == AttackMode::kImage) {
    if (!g.shape_hint) throw std::invalid_argument("cpa_image: shape hint required");
    if (g.shape_hint->numel() != g.g.cols()) {
      throw std::invalid_argument("cpa_image: shape hint does not match signal length");
    }
  }

  auto [gw, wt] = whiten_impl(g, n, cfg.mode == AttackMode::kImage);
  const double j_gauss = gaussian_negentropy_reference(cfg.negentropy_a);

  SeededRng rng(cfg.seed);
  Matrix u(n, n);
  const double init_scale = 1.0 / std::sqrt(static_cast<double>(n));
  for (double& v : u.data()) v = rng.gaussian() * init_scale;

  numerics::AdamState adam(n * n, cfg.lr);
  RecoveredBatch out;
  const std::size_t log_every = 100;

  std::vector<double> neg_grad(n * n);
  for (std::size_t it = 1; it <= cfg.iters; ++it) {
    ObjectiveEval ev = objective_core(u, gw, cfg, g.shape_hint, j_gauss);
    if (!std::isfinite(ev.value) || !ev.grad.all_finite()) {
      throw NumericalError("attack objective became non-finite at iteration " +
                           std::to_string(it));
    }
    if ((it - 1) % log_every == 0) out.objective_trace.push_back(ev.value);
    for (std::size_t k = 0; k < neg_grad.size(); ++k) neg_grad[k] = -ev.grad.data()[k];
    numerics::adam_step_inplace(u.data(), neg_grad, adam);
  }
  out.objective_trace.push_back(objective_core(u, gw, cfg, g.shape_hint, j_gauss).value);

  // final normalized estimates, then per-row sign resolution
  Matrix un(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double nrm = numerics::norm2(u.row(i));
    if (nrm == 0) throw NumericalError("attack finished with a zero unmixing row");
    for (std::size_t j = 0; j < n; ++j) un(i, j) = u(i, j) / nrm;
  }
  out.sources = matmul(un, gw);
  out.sign_flags.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto [row, flag] = disambiguate_sign(out.sources.row(i), cfg.mode, g.shape_hint);
    out.sign_flags[i] = flag;
    std::copy(row.begin(), row.end(), out.sources.row_ptr(i));
  }
  return out;
}

}  // namespace

RecoveredBatch cpa_image(const MixedSignalMatrix& g, const AttackConfig& cfg, std::size_t n) {
  if (cfg.mode != AttackMode::kImage) {
    throw std::invalid_argument("cpa_image: config mode must be image");
  }
  return run_attack(g, cfg, n);
}

RecoveredBatch cpa_embedding(const MixedSignalMatrix& g, const AttackConfig& cfg, std::size_t n) {
  if (cfg.mode != AttackMode::kEmbedding) {
    throw std::invalid_argument("cpa_embedding: config mode must be embedding");
  }
  return run_attack(g, cfg, n);
}

// ---- sign resolution and embedding restoration ----------------------------------------

std::pair<std::vector<double>, int> disambiguate_sign(std::span<const double> row,
                                                      AttackMode mode,
                                                      const std::optional<Shape3>& shape_hint,
                                                      double norm_mean, double norm_std) {
  if (shape_hint && shape_hint->numel() != row.size()) {
    throw std::invalid_argument("disambiguate_sign: shape hint does not match row length");
  }
  int flag = 1;
  if (mode == AttackMode::kEmbedding) {
    flag = numerics::mean(row) >= 0 ? 1 : -1;
  } else {
    std::size_t in_pos = 0, in_neg = 0;
    for (double v : row) {
      const double p = v * norm_std + norm_mean;
      const double q = -v * norm_std + norm_mean;
      if (p >= 0.0 && p <= 1.0) ++in_pos;
      if (q >= 0.0 && q <= 1.0) ++in_neg;
    }
    flag = in_pos >= in_neg ? 1 : -1;
  }
  std::vector<double> out(row.begin(), row.end());
  if (flag < 0) {
    for (double& v : out) v = -v;
  }
  return {std::move(out), flag};
}

namespace {

double lower_quartile(std::span<const double> row) {
  std::vector<double> tmp(row.begin(), row.end());
  const double pos = 0.25 * static_cast<double>(tmp.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  std::nth_element(tmp.begin(), tmp.begin() + static_cast<std::ptrdiff_t>(lo), tmp.end());
  const double a = tmp[lo];
  if (lo + 1 >= tmp.size()) return a;
  std::nth_element(tmp.begin(), tmp.begin() + static_cast<std::ptrdiff_t>(lo + 1), tmp.end());
  const double b = tmp[lo + 1];
  return a + (pos - static_cast<double>(lo)) * (b - a);
}

}  // namespace

Matrix embedding_estimates(const RecoveredBatch& batch) {
  Matrix out = batch.sources;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const double q = lower_quartile(out.row(i));
    double* p = out.row_ptr(i);
    for (std::size_t k = 0; k < out.cols(); ++k) {
      p[k] = std::max(p[k] - q, 0.0);
    }
  }
  return out;
}

std::size_t suggest_batch_size(const MixedSignalMatrix& g) {
  const std::size_t m = g.g.rows();
  if (m < 2) return m;
  Matrix centered(m, g.g.cols());
  for (std::size_t r = 0; r < m; ++r) {
    const double mu = numerics::mean(g.g.row(r));
    const double* src = g.g.row_ptr(r);
    double* dst = centered.row_ptr(r);
    for (std::size_t c = 0; c < g.g.cols(); ++c) dst[c] = src[c] - mu;
  }
  Matrix cov = matmul_abt(centered, centered);
  const double inv_d = 1.0 / static_cast<double>(g.g.cols());
  for (double& v : cov.data()) v *= inv_d;
  EigResult eig = numerics::sym_eig(cov);

  const std::size_t limit = std::max<std::size_t>(1, m / 2);
  std::size_t best = 1;
  double best_ratio = -1;
  for (std::size_t i = 1; i <= limit && i < m; ++i) {
    const double lo = eig.eigenvalues[i];
    const double hi = eig.eigenvalues[i - 1];
    if (hi <= 0) break;
    const double ratio = lo > 0 ? hi / lo : std::numeric_limits<double>::infinity();
    if (ratio > best_ratio) {
      best_ratio = ratio;
      best = i;
    }
    if (lo <= 0) break;
  }
  return best;
}

// ---- recovered-matrix file ---------------------------------------------------------

namespace {
constexpr char kRecoveredMagic[] = "GSREC1";
}

void save_recovered(const std::string& path, const Matrix& sources) {
  std::vector<std::uint8_t> out;
  binio::put_bytes(out, kRecoveredMagic, 6);
  binio::put_u32(out, static_cast<std::uint32_t>(sources.rows()));
  binio::put_u32(out, static_cast<std::uint32_t>(sources.cols()));
  for (double v : sources.data()) binio::put_f64(out, v);
  binio::write_file(path, out);
}

Matrix load_recovered(const std::string& path) {
  const std::vector<std::uint8_t> bytes = binio::read_file(path);
  binio::Reader r(bytes.data(), bytes.size(), path);
  char magic[6];
  r.raw(magic, 6);
  if (std::string(magic, 6) != kRecoveredMagic) throw IoError(path + ": bad matrix magic");
  const std::uint32_t rows = r.u32();
  const std::uint32_t cols = r.u32();
  std::vector<double> data = r.f64_array(static_cast<std::size_t>(rows) * cols);
  if (!r.at_end()) throw IoError(path + ": trailing bytes");
  for (double v : data) {
    if (!std::isfinite(v)) throw IoError(path + ": non-finite value");
  }
  return Matrix::from_data(rows, cols, std::move(data));
}

}  // namespace gradsep::cpa
