#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "gradsep/numerics.hpp"

namespace gradsep::nets {

using numerics::Matrix;
using numerics::SeededRng;
using numerics::Tensor;

struct Shape3 {
  std::size_t c = 0, h = 0, w = 0;
  std::size_t numel() const { return c * h * w; }
  bool operator==(const Shape3&) const = default;
};

// Ordered layer-name -> gradient (or parameter) tensors. Order is the
// canonical layer order of the owning architecture.
using TensorMap = std::vector<std::pair<std::string, Tensor>>;

const Tensor* find_tensor(const TensorMap& m, const std::string& name);
std::vector<double> concat_tensors(const TensorMap& m);
double tensor_map_dot(const TensorMap& a, const TensorMap& b);

// ---- FC-2: Linear(hidden) -> ReLU -> Linear(classes) -----------------------

struct Fc2Params {
  Matrix w1;               // hidden x d_in
  std::vector<double> b1;  // hidden
  Matrix w2;               // classes x hidden
  std::vector<double> b2;  // classes

  std::size_t input_dim() const { return w1.cols(); }
  std::size_t hidden_dim() const { return w1.rows(); }
  std::size_t classes() const { return w2.rows(); }

  static Fc2Params init(std::size_t d_in, std::size_t hidden, std::size_t classes, SeededRng& rng);
  TensorMap tensors() const;
  void set_tensors(const TensorMap& t);
};

struct Fc2Trace {
  Matrix x;       // n x d_in
  Matrix pre1;    // n x hidden
  Matrix act1;    // n x hidden
  Matrix logits;  // n x classes
};

Fc2Trace fc2_forward(const Fc2Params& p, const Matrix& x);

// ---- ConvNet-S: 3x[conv3x3 s1 p1 -> ReLU -> maxpool2x2] -> FC head ---------

struct ConvBlockParams {
  Tensor w;               // (out_c, in_c, 3, 3)
  std::vector<double> b;  // out_c
  std::size_t in_c = 0, out_c = 0;
};

struct ConvNetParams {
  std::vector<ConvBlockParams> blocks;
  Matrix head_w1;               // hidden x embedding
  std::vector<double> head_b1;  // hidden
  Matrix head_w2;               // classes x hidden
  std::vector<double> head_b2;  // classes
  Shape3 input_shape;

  std::size_t embedding_dim() const { return head_w1.cols(); }
  std::size_t hidden_dim() const { return head_w1.rows(); }
  std::size_t classes() const { return head_w2.rows(); }
  // Layer whose weight gradient carries the linear mixture of embeddings.
  static std::string target_layer() { return "head1.weight"; }

  // The standard instance: 3x32x32 input, channels 16/32/64, hidden 256.
  static ConvNetParams init_s(std::size_t classes, SeededRng& rng);
  // Small instances for gradient tests.
  static ConvNetParams init(Shape3 input, const std::vector<std::size_t>& channels,
                            std::size_t hidden, std::size_t classes, SeededRng& rng);
  TensorMap tensors() const;
  void set_tensors(const TensorMap& t);
};

struct ConvBlockTrace {
  Matrix conv_in;                   // n x in_shape.numel()
  std::vector<Matrix> cols;         // per sample: (ho*wo of conv) x (in_c*9)
  Matrix pre;                       // n x (out_c*h*w) pre-activation
  Matrix relu_out;                  // n x (out_c*h*w)
  std::vector<std::uint32_t> argmax;  // n * out_c*ho*wo flat indices into relu plane
  Shape3 in_shape, conv_shape, out_shape;
};

struct ConvTrace {
  std::vector<ConvBlockTrace> blocks;
  Matrix embedding;  // n x embedding_dim
  Matrix head_pre1;
  Matrix head_act1;
  Matrix logits;
};

ConvTrace convnet_forward(const ConvNetParams& p, const Matrix& x);
// Forward through the conv stack only; fills the block part of the trace.
Matrix convnet_embedding(const ConvNetParams& p, const Matrix& x, ConvTrace* trace = nullptr);

// ---- loss -------------------------------------------------------------------

Matrix softmax(const Matrix& logits);
double cross_entropy(const Matrix& logits, const std::vector<int>& labels);
// d(mean CE)/dlogits = (softmax - onehot)/n
Matrix softmax_ce_grad(const Matrix& logits, const std::vector<int>& labels);
double cross_entropy_soft(const Matrix& logits, const Matrix& label_probs);
Matrix softmax_ce_grad_soft(const Matrix& logits, const Matrix& label_probs);
Matrix onehot(const std::vector<int>& labels, std::size_t classes);

// ---- backward ---------------------------------------------------------------

// Gradients of mean cross-entropy over the batch w.r.t. all parameters.
TensorMap fc2_backward(const Fc2Params& p, const Fc2Trace& t, const Matrix& dlogits,
                       Matrix* dx = nullptr);
TensorMap convnet_backward(const ConvNetParams& p, const ConvTrace& t, const Matrix& dlogits,
                           Matrix* dx = nullptr);

TensorMap backward_aggregate(const Fc2Params& p, const Matrix& x, const std::vector<int>& labels);
TensorMap backward_aggregate(const ConvNetParams& p, const Matrix& x, const std::vector<int>& labels);
std::vector<TensorMap> backward_per_sample(const Fc2Params& p, const Matrix& x,
                                           const std::vector<int>& labels);
std::vector<TensorMap> backward_per_sample(const ConvNetParams& p, const Matrix& x,
                                           const std::vector<int>& labels);

// ---- input gradients ----------------------------------------------------------

// Scalar objective of a network output plus its gradient w.r.t. that output.
struct Objective {
  std::function<double(const Matrix&)> value;
  std::function<Matrix(const Matrix&)> grad;
};

Matrix fc2_input_gradient(const Fc2Params& p, const Matrix& x, const Objective& on_logits,
                          double* value = nullptr);
Matrix convnet_input_gradient(const ConvNetParams& p, const Matrix& x, const Objective& on_logits,
                              double* value = nullptr);
Matrix convnet_embedding_input_gradient(const ConvNetParams& p, const Matrix& x,
                                        const Objective& on_embedding, double* value = nullptr);

// ---- gradient-of-gradient (double backprop) ----------------------------------
//
// T(x) = <grad_theta CE(x, y), c> for a constant tensor bundle c. Returns T,
// dT/dx, and (for soft labels) dT/dlabel_logits. This is the building block
// for gradient-matching objectives.

struct GradDotResult {
  double value = 0;
  Matrix dx;
  Matrix dlabel_logits;  // empty for hard labels
};

GradDotResult fc2_grad_dot_input(const Fc2Params& p, const Matrix& x,
                                 const std::vector<int>& labels, const TensorMap& c);
GradDotResult fc2_grad_dot_input_soft(const Fc2Params& p, const Matrix& x,
                                      const Matrix& label_logits, const TensorMap& c);
GradDotResult convnet_grad_dot_input(const ConvNetParams& p, const Matrix& x,
                                     const std::vector<int>& labels, const TensorMap& c);
GradDotResult convnet_grad_dot_input_soft(const ConvNetParams& p, const Matrix& x,
                                          const Matrix& label_logits, const TensorMap& c);

// ---- training -----------------------------------------------------------------

struct TrainResult {
  std::vector<double> epoch_losses;
  double final_accuracy = 0;
};

TrainResult train_fc2(Fc2Params& p, const Matrix& xs, const std::vector<int>& ys,
                      std::size_t epochs, std::size_t batch, double lr, std::uint64_t seed);
TrainResult train_convnet(ConvNetParams& p, const Matrix& xs, const std::vector<int>& ys,
                          std::size_t epochs, std::size_t batch, double lr, std::uint64_t seed);

std::vector<int> predict(const Fc2Params& p, const Matrix& xs);
std::vector<int> predict(const ConvNetParams& p, const Matrix& xs);

// ---- checkpoints ----------------------------------------------------------------

using VictimModel = std::variant<Fc2Params, ConvNetParams>;

void save_checkpoint(const std::string& path, const VictimModel& model);
VictimModel load_checkpoint(const std::string& path);

}  // namespace gradsep::nets
