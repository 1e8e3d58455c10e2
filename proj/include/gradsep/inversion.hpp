#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "gradsep/fedsim.hpp"
#include "gradsep/nets.hpp"
#include "gradsep/numerics.hpp"

namespace gradsep::inversion {

using fedsim::GradientBundle;
using nets::ConvNetParams;
using nets::Shape3;
using nets::VictimModel;
using numerics::Matrix;

struct InversionConfig {
  double lambda_tv = 0;
  double lambda_gm = 0;
  std::size_t iters = 25000;
  double lr = 0.001;
  std::uint64_t seed = 1;
  bool labels_known = true;
  // Box the dummies are clamped to after every step. [0,1] fits victims fed
  // raw pixels; a victim trained on standardized inputs needs the box mapped
  // through the same transform, e.g. (0-mu)/sd .. (1-mu)/sd.
  double pixel_lo = 0;
  double pixel_hi = 1;
};

// <a,b> / (|a| |b|). Zero norm on either side is an error.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct ObjectiveEval {
  double value = 0;
  Matrix dx;
  Matrix dlabel_logits;  // filled only on the soft-label path
};

// Feature-inversion objective for one dummy (x is 1 x input-numel):
// CS(f(x), z_hat) - lambda_tv * R_TV(x), with its analytic input gradient.
// Exposed so the gradient can be checked against finite differences.
ObjectiveEval fi_objective(const ConvNetParams& model, const Matrix& x,
                           std::span<const double> z_hat, double lambda_tv);

// Gradient-matching objective for a dummy batch: 1 - CS(grad(x, y), bundle)
// + lambda_tv * sum_i R_TV(x_i). Hard labels when labels_known, otherwise
// soft labels through softmax(label_logits) with d/dlogits returned.
// tv_shape is required only for FC models with lambda_tv > 0; a ConvNet
// supplies its own input shape.
ObjectiveEval gm_objective(const VictimModel& model, const Matrix& x,
                           const std::vector<int>& labels, const Matrix& label_logits,
                           bool labels_known, const GradientBundle& bundle, double lambda_tv,
                           const std::optional<Shape3>& tv_shape = std::nullopt);

// Recover an input whose embedding matches z_hat: Adam ascent on
// fi_objective from a Gaussian(0.5, 0.1) start, pixels clamped to the
// config box after every step.
std::vector<double> feature_invert(const ConvNetParams& model, std::span<const double> z_hat,
                                   const InversionConfig& cfg);

// Joint batch feature inversion with an optional gradient-matching term:
// sum_i [CS(f(x_i), z_i) - lambda_tv R_TV(x_i)] + lambda_gm CS(grad, bundle).
// Dummy i starts from seed cfg.seed + i, so with lambda_gm = 0 every row
// reproduces feature_invert(z_i, seed + i) bit for bit.
Matrix feature_invert_gm(const ConvNetParams& model, const Matrix& z_hats,
                         const GradientBundle& bundle, const std::vector<int>& labels,
                         const InversionConfig& cfg);

struct GmResult {
  Matrix images;        // n x input-numel, inside the clamp box
  Matrix label_logits;  // n x k, meaningful only when labels were unknown
  std::vector<double> objective_trace;
};

// The gradient-matching baseline: optimize a full dummy batch (and soft
// labels, if unknown) to minimize gm_objective against the captured bundle.
GmResult gradient_match(const VictimModel& model, const GradientBundle& bundle, std::size_t n,
                        const std::optional<std::vector<int>>& labels,
                        const InversionConfig& cfg,
                        const std::optional<Shape3>& shape_hint = std::nullopt);

}  // namespace gradsep::inversion
