#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gradsep/nets.hpp"
#include "gradsep/numerics.hpp"

namespace gradsep::cpa {

using nets::Shape3;
using numerics::Matrix;

// Aggregate FC-layer weight gradient treated as a mixture of batch inputs:
// each neuron row is a weighted sum of the inputs that activated it.
struct MixedSignalMatrix {
  Matrix g;  // m neurons x d dims
  std::string source_layer;
  std::optional<Shape3> shape_hint;
};

struct WhiteningTransform {
  std::vector<double> row_means;  // length m, per-row centering means
  Matrix projection;              // n x m
  std::size_t retained = 0;
};

struct UnmixingMatrix {
  Matrix u;  // n x n
};

enum class AttackMode { kImage, kEmbedding };

struct AttackConfig {
  double lambda_ne = 1;  // weight on the negentropy term, 0 ablates it
  double lambda_tv = 0;
  double lambda_mi = 0;
  double lambda_sp = 0;
  double lambda_sr = 0;
  double temperature_t = 3.0;
  double negentropy_a = 1.0;
  std::size_t iters = 25000;
  double lr = 0.001;
  std::uint64_t seed = 1;
  AttackMode mode = AttackMode::kImage;
};

struct RecoveredBatch {
  Matrix sources;               // n x d, unit variance rows, signs applied
  std::vector<int> sign_flags;  // +1 / -1 per row
  std::vector<double> objective_trace;
};

// Center each row of g, eigendecompose the row covariance and keep the top-n
// subspace scaled to identity covariance. The returned gw satisfies
// gw = projection * (g - row_means) and gw*gw^T/d = I_n.
// Output is canonical: permuting the rows of g changes only which projection
// column touches which row, never the whitened matrix itself.
std::pair<Matrix, WhiteningTransform> center_whiten(const MixedSignalMatrix& g, std::size_t n);

// mean over elements of (2/a^2) log cosh(a x_i), the log-cosh
// non-Gaussianity surrogate.
double negentropy(std::span<const double> x, double a);

// E[negentropy] of a standard normal, by quadrature; the reference point the
// attack objective measures deviation from.
double gaussian_negentropy_reference(double a);

// mean over ordered pairs i != j of exp(t |cos(u_i, u_j)|); 0 for n = 1.
double mi_regularizer(const UnmixingMatrix& u, double t);

// anisotropic total variation: per-channel mean absolute neighbor difference,
// vertical plus horizontal, averaged over channels. Layout channel-major,
// row-major.
double tv_prior(std::span<const double> x, Shape3 shape);

// Accumulate the R_TV subgradient into grad (same length as x; not cleared).
void tv_prior_grad(std::span<const double> x, Shape3 shape, std::span<double> grad);

double sparsity(std::span<const double> x);  // mean |x_i|

// min(mean ReLU(x), mean ReLU(-x)): zero when all entries share a sign.
double sign_regularizer(std::span<const double> x);

// Value and analytic d/dU of the full attack objective (the quantity the
// optimizer maximizes) at an arbitrary unmixing matrix. Exposed so the
// gradient can be checked against finite differences.
struct ObjectiveEval {
  double value = 0;
  Matrix grad;  // n x n, same layout as u
};
ObjectiveEval attack_objective(const Matrix& u, const Matrix& gw, const AttackConfig& cfg,
                               const std::optional<Shape3>& shape_hint);

// Run the attack end to end: whiten, optimize U with Adam, return signed
// sources. Image mode whitens centered rows (center_whiten); embedding mode
// whitens raw second moments, since a centered recovery is exactly zero-mean
// and could never satisfy the one-sidedness the sign regularizer rewards.
RecoveredBatch cpa_image(const MixedSignalMatrix& g, const AttackConfig& cfg, std::size_t n);
RecoveredBatch cpa_embedding(const MixedSignalMatrix& g, const AttackConfig& cfg, std::size_t n);

// Resolve the per-row sign ambiguity of ICA. Image mode counts pixels that
// land inside [0,1] after de-normalizing with the dataset statistics and
// keeps the sign with the higher count; embedding mode makes the row mean
// nonnegative. Ties choose +1. Pass the victim dataset's own mean/std when
// known; the defaults approximate natural-image statistics. The mean must
// not be exactly 0.5 or the in-range test cannot tell the signs apart.
std::pair<std::vector<double>, int> disambiguate_sign(std::span<const double> row,
                                                      AttackMode mode,
                                                      const std::optional<Shape3>& shape_hint,
                                                      double norm_mean = 0.45,
                                                      double norm_std = 0.2);

// Nonnegative embedding estimates from a sign-corrected recovery: shift each
// row so its lower quartile sits at zero (ReLU embeddings are sparse, so the
// true lower quartile is zero), then clamp negatives.
Matrix embedding_estimates(const RecoveredBatch& batch);

// Eigen-gap heuristic: the i <= m/2 with the largest covariance-spectrum
// ratio lambda_i / lambda_{i+1}.
std::size_t suggest_batch_size(const MixedSignalMatrix& g);

// f64 binary matrix file, magic "GSREC1".
void save_recovered(const std::string& path, const Matrix& sources);
Matrix load_recovered(const std::string& path);

}  // namespace gradsep::cpa
