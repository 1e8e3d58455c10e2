#include "gradsep/inversion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <variant>

#include "gradsep/cpa.hpp"
#include "gradsep/error.hpp"

namespace gradsep::inversion {

using nets::Fc2Params;
using nets::TensorMap;
using numerics::SeededRng;

namespace {

void validate_config(const InversionConfig& cfg) {
  if (cfg.lambda_tv < 0 || cfg.lambda_gm < 0) {
    throw std::invalid_argument("inversion: lambda weights must be nonnegative");
  }
  if (cfg.iters == 0) throw std::invalid_argument("inversion: iters must be positive");
  if (!(cfg.lr > 0)) throw std::invalid_argument("inversion: lr must be positive");
  if (!(cfg.pixel_lo < cfg.pixel_hi)) {
    throw std::invalid_argument("inversion: pixel_lo must be below pixel_hi");
  }
}

void clamp_box(std::span<double> x, double lo, double hi) {
  for (double& v : x) v = std::clamp(v, lo, hi);
}

std::size_t model_input_dim(const VictimModel& model) {
  if (const auto* fc = std::get_if<Fc2Params>(&model)) return fc->input_dim();
  return std::get<ConvNetParams>(model).input_shape.numel();
}

std::size_t model_classes(const VictimModel& model) {
  if (const auto* fc = std::get_if<Fc2Params>(&model)) return fc->classes();
  return std::get<ConvNetParams>(model).classes();
}

// Aggregate mean-CE parameter gradient of the dummy batch under either label
// treatment.
TensorMap dummy_gradient(const VictimModel& model, const Matrix& x, const std::vector<int>& labels,
                         const Matrix& label_logits, bool labels_known) {
  if (const auto* fc = std::get_if<Fc2Params>(&model)) {
    nets::Fc2Trace t = nets::fc2_forward(*fc, x);
    Matrix dlogits = labels_known
                         ? nets::softmax_ce_grad(t.logits, labels)
                         : nets::softmax_ce_grad_soft(t.logits, nets::softmax(label_logits));
    return nets::fc2_backward(*fc, t, dlogits);
  }
  const auto& cn = std::get<ConvNetParams>(model);
  nets::ConvTrace t = nets::convnet_forward(cn, x);
  Matrix dlogits = labels_known
                       ? nets::softmax_ce_grad(t.logits, labels)
                       : nets::softmax_ce_grad_soft(t.logits, nets::softmax(label_logits));
  return nets::convnet_backward(cn, t, dlogits);
}

nets::GradDotResult grad_dot(const VictimModel& model, const Matrix& x,
                             const std::vector<int>& labels, const Matrix& label_logits,
                             bool labels_known, const TensorMap& c) {
  if (const auto* fc = std::get_if<Fc2Params>(&model)) {
    return labels_known ? nets::fc2_grad_dot_input(*fc, x, labels, c)
                        : nets::fc2_grad_dot_input_soft(*fc, x, label_logits, c);
  }
  const auto& cn = std::get<ConvNetParams>(model);
  return labels_known ? nets::convnet_grad_dot_input(cn, x, labels, c)
                      : nets::convnet_grad_dot_input_soft(cn, x, label_logits, c);
}

}  // namespace

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("cosine_similarity: length mismatch");
  }
  const double na = numerics::norm2(a);
  const double nb = numerics::norm2(b);
  if (na == 0 || nb == 0) throw NumericalError("cosine undefined for zero vector");
  return numerics::dot(a, b) / (na * nb);
}

ObjectiveEval fi_objective(const ConvNetParams& model, const Matrix& x,
                           std::span<const double> z_hat, double lambda_tv) {
  if (x.rows() != 1 || x.cols() != model.input_shape.numel()) {
    throw std::invalid_argument("fi_objective: x must be 1 x input size");
  }
  if (z_hat.size() != model.embedding_dim()) {
    throw std::invalid_argument("fi_objective: embedding length mismatch");
  }
  const double nz = numerics::norm2(z_hat);
  if (nz == 0) throw NumericalError("feature inversion: zero embedding target");

  nets::Objective on_embedding;
  on_embedding.value = [&](const Matrix& emb) {
    const double ne = numerics::norm2(emb.row(0));
    if (ne == 0) throw NumericalError("feature inversion: dummy embedding collapsed to zero");
    return numerics::dot(emb.row(0), z_hat) / (ne * nz);
  };
  on_embedding.grad = [&](const Matrix& emb) {
    const double ne = numerics::norm2(emb.row(0));
    if (ne == 0) throw NumericalError("feature inversion: dummy embedding collapsed to zero");
    const double cs = numerics::dot(emb.row(0), z_hat) / (ne * nz);
    Matrix d(1, emb.cols());
    for (std::size_t k = 0; k < emb.cols(); ++k) {
      d(0, k) = z_hat[k] / (ne * nz) - cs * emb(0, k) / (ne * ne);
    }
    return d;
  };

  ObjectiveEval ev;
  ev.dx = nets::convnet_embedding_input_gradient(model, x, on_embedding, &ev.value);
  if (lambda_tv > 0) {
    ev.value -= lambda_tv * cpa::tv_prior(x.row(0), model.input_shape);
    std::vector<double> tvg(x.cols(), 0.0);
    cpa::tv_prior_grad(x.row(0), model.input_shape, tvg);
    for (std::size_t k = 0; k < x.cols(); ++k) ev.dx(0, k) -= lambda_tv * tvg[k];
  }
  return ev;
}

ObjectiveEval gm_objective(const VictimModel& model, const Matrix& x,
                           const std::vector<int>& labels, const Matrix& label_logits,
                           bool labels_known, const GradientBundle& bundle, double lambda_tv,
                           const std::optional<Shape3>& tv_shape) {
  const std::size_t n = x.rows();
  if (n == 0) throw std::invalid_argument("gm_objective: empty batch");
  if (x.cols() != model_input_dim(model)) {
    throw std::invalid_argument("gm_objective: input width does not match model");
  }
  if (labels_known) {
    if (labels.size() != n) throw std::invalid_argument("gm_objective: labels size mismatch");
  } else if (label_logits.rows() != n || label_logits.cols() != model_classes(model)) {
    throw std::invalid_argument("gm_objective: label logits shape mismatch");
  }

  TensorMap gd = dummy_gradient(model, x, labels, label_logits, labels_known);

  // align the bundle to the model's layer order by name
  double dot_dt = 0, ngd2 = 0, ngt2 = 0;
  for (const auto& [name, t] : gd) {
    const numerics::Tensor* bt = bundle.layer(name);
    if (bt == nullptr || bt->dims != t.dims) {
      throw std::invalid_argument("gm_objective: bundle layer '" + name +
                                  "' missing or shaped differently");
    }
    dot_dt += numerics::dot(t.data, bt->data);
    ngd2 += numerics::dot(t.data, t.data);
    ngt2 += numerics::dot(bt->data, bt->data);
  }
  const double ngd = std::sqrt(ngd2);
  const double ngt = std::sqrt(ngt2);
  if (ngd == 0 || ngt == 0) {
    throw NumericalError("gradient matching: cosine undefined for zero gradient");
  }
  const double cos = dot_dt / (ngd * ngt);

  TensorMap c;
  c.reserve(gd.size());
  for (const auto& [name, t] : gd) {
    const numerics::Tensor* bt = bundle.layer(name);
    numerics::Tensor ct;
    ct.dims = t.dims;
    ct.data.resize(t.data.size());
    for (std::size_t k = 0; k < t.data.size(); ++k) {
      ct.data[k] = bt->data[k] / (ngd * ngt) - cos * t.data[k] / ngd2;
    }
    c.emplace_back(name, std::move(ct));
  }

  nets::GradDotResult res = grad_dot(model, x, labels, label_logits, labels_known, c);

  ObjectiveEval ev;
  ev.value = 1.0 - cos;
  ev.dx = Matrix(n, x.cols());
  for (std::size_t k = 0; k < ev.dx.data().size(); ++k) ev.dx.data()[k] = -res.dx.data()[k];
  if (!labels_known) {
    ev.dlabel_logits = Matrix(n, label_logits.cols());
    for (std::size_t k = 0; k < ev.dlabel_logits.data().size(); ++k) {
      ev.dlabel_logits.data()[k] = -res.dlabel_logits.data()[k];
    }
  }

  if (lambda_tv > 0) {
    Shape3 shape;
    if (const auto* cn = std::get_if<ConvNetParams>(&model)) {
      shape = cn->input_shape;
    } else if (tv_shape && tv_shape->numel() == x.cols()) {
      shape = *tv_shape;
    } else {
      throw std::invalid_argument("gm_objective: TV prior on an FC model needs a matching shape");
    }
    std::vector<double> tvg(x.cols());
    for (std::size_t i = 0; i < n; ++i) {
      ev.value += lambda_tv * cpa::tv_prior(x.row(i), shape);
      std::fill(tvg.begin(), tvg.end(), 0.0);
      cpa::tv_prior_grad(x.row(i), shape, tvg);
      for (std::size_t k = 0; k < x.cols(); ++k) ev.dx(i, k) += lambda_tv * tvg[k];
    }
  }
  return ev;
}

std::vector<double> feature_invert(const ConvNetParams& model, std::span<const double> z_hat,
                                   const InversionConfig& cfg) {
  validate_config(cfg);
  const std::size_t numel = model.input_shape.numel();
  SeededRng rng(cfg.seed);
  Matrix x(1, numel);
  for (double& v : x.data()) v = 0.5 + 0.1 * rng.gaussian();

  numerics::AdamState adam(numel, cfg.lr);
  std::vector<double> neg(numel);
  for (std::size_t it = 1; it <= cfg.iters; ++it) {
    ObjectiveEval ev = fi_objective(model, x, z_hat, cfg.lambda_tv);
    if (!std::isfinite(ev.value) || !ev.dx.all_finite()) {
      throw NumericalError("feature inversion objective became non-finite at iteration " +
                           std::to_string(it));
    }
    for (std::size_t k = 0; k < numel; ++k) neg[k] = -ev.dx(0, k);
    numerics::adam_step_inplace(x.data(), neg, adam);
    clamp_box(x.data(), cfg.pixel_lo, cfg.pixel_hi);
  }
  return {x.row(0).begin(), x.row(0).end()};
}

Matrix feature_invert_gm(const ConvNetParams& model, const Matrix& z_hats,
                         const GradientBundle& bundle, const std::vector<int>& labels,
                         const InversionConfig& cfg) {
  validate_config(cfg);
  const std::size_t n = z_hats.rows();
  const std::size_t numel = model.input_shape.numel();
  if (n == 0) throw std::invalid_argument("feature_invert_gm: empty embedding batch");
  if (z_hats.cols() != model.embedding_dim()) {
    throw std::invalid_argument("feature_invert_gm: embedding width mismatch");
  }
  if (labels.size() != n) throw std::invalid_argument("feature_invert_gm: labels size mismatch");
  if (cfg.lambda_gm > 0 && bundle.batch_size_claimed != n) {
    throw std::invalid_argument("feature_invert_gm: bundle batch size differs from embeddings");
  }

  Matrix x(n, numel);
  for (std::size_t i = 0; i < n; ++i) {
    SeededRng rng(cfg.seed + i);
    for (double& v : x.row(i)) v = 0.5 + 0.1 * rng.gaussian();
  }

  const VictimModel vm = model;  // variant view for the shared GM term
  numerics::AdamState adam(n * numel, cfg.lr);
  Matrix grad(n, numel);
  Matrix xi(1, numel);
  std::vector<double> neg(n * numel);
  for (std::size_t it = 1; it <= cfg.iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(x.row(i).begin(), x.row(i).end(), xi.row_ptr(0));
      ObjectiveEval ev = fi_objective(model, xi, z_hats.row(i), cfg.lambda_tv);
      if (!std::isfinite(ev.value) || !ev.dx.all_finite()) {
        throw NumericalError("feature inversion objective became non-finite at iteration " +
                             std::to_string(it));
      }
      std::copy(ev.dx.row(0).begin(), ev.dx.row(0).end(), grad.row_ptr(i));
    }
    if (cfg.lambda_gm > 0) {
      ObjectiveEval gm = gm_objective(vm, x, labels, Matrix(), true, bundle, 0.0);
      if (!std::isfinite(gm.value) || !gm.dx.all_finite()) {
        throw NumericalError("gradient matching term became non-finite at iteration " +
                             std::to_string(it));
      }
      // gm.dx descends 1 - cos; ascending cos means descending gm.value
      for (std::size_t k = 0; k < grad.data().size(); ++k) {
        grad.data()[k] -= cfg.lambda_gm * gm.dx.data()[k];
      }
    }
    for (std::size_t k = 0; k < neg.size(); ++k) neg[k] = -grad.data()[k];
    numerics::adam_step_inplace(x.data(), neg, adam);
    clamp_box(x.data(), cfg.pixel_lo, cfg.pixel_hi);
  }
  return x;
}

GmResult gradient_match(const VictimModel& model, const GradientBundle& bundle, std::size_t n,
                        const std::optional<std::vector<int>>& labels,
                        const InversionConfig& cfg, const std::optional<Shape3>& shape_hint) {
  validate_config(cfg);
  if (n == 0) throw std::invalid_argument("gradient_match: batch size must be positive");
  if (n != bundle.batch_size_claimed) {
    throw std::invalid_argument("gradient_match: n does not match the bundle's claimed batch");
  }
  if (cfg.labels_known && (!labels || labels->size() != n)) {
    throw std::invalid_argument("gradient_match: labels required when labels_known");
  }
  const std::size_t d = model_input_dim(model);
  const std::size_t k = model_classes(model);

  SeededRng rng(cfg.seed);
  GmResult out;
  out.images = Matrix(n, d);
  for (double& v : out.images.data()) v = 0.5 + 0.1 * rng.gaussian();
  out.label_logits = Matrix(n, k);  // zero start: uniform soft labels

  const std::vector<int> hard = cfg.labels_known ? *labels : std::vector<int>{};
  numerics::AdamState ax(n * d, cfg.lr);
  numerics::AdamState al(n * k, cfg.lr);
  const std::size_t log_every = 100;

  for (std::size_t it = 1; it <= cfg.iters; ++it) {
    ObjectiveEval ev = gm_objective(model, out.images, hard, out.label_logits, cfg.labels_known,
                                    bundle, cfg.lambda_tv, shape_hint);
    if (!std::isfinite(ev.value) || !ev.dx.all_finite()) {
      throw NumericalError("gradient matching objective became non-finite at iteration " +
                           std::to_string(it));
    }
    if ((it - 1) % log_every == 0) out.objective_trace.push_back(ev.value);
    numerics::adam_step_inplace(out.images.data(), ev.dx.data(), ax);
    clamp_box(out.images.data(), cfg.pixel_lo, cfg.pixel_hi);
    if (!cfg.labels_known) {
      numerics::adam_step_inplace(out.label_logits.data(), ev.dlabel_logits.data(), al);
    }
  }
  out.objective_trace.push_back(gm_objective(model, out.images, hard, out.label_logits,
                                             cfg.labels_known, bundle, cfg.lambda_tv, shape_hint)
                                    .value);
  return out;
}

}  // namespace gradsep::inversion
