#include "gradsep/nets.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "binio.hpp"
#include "gradsep/error.hpp"

namespace gradsep::nets {

using numerics::AdamState;
using numerics::adam_step_inplace;
using numerics::hadamard;
using numerics::matmul;
using numerics::matmul_abt;
using numerics::matmul_atb;

namespace {

Matrix relu(const Matrix& m) {
  Matrix r = m;
  for (double& v : r.data()) v = v > 0 ? v : 0.0;
  return r;
}

Matrix relu_mask(const Matrix& pre) {
  Matrix m(pre.rows(), pre.cols());
  for (std::size_t i = 0; i < pre.size(); ++i) m.data()[i] = pre.data()[i] > 0 ? 1.0 : 0.0;
  return m;
}

void add_row_bias(Matrix& m, const std::vector<double>& b) {
  if (m.cols() != b.size()) throw std::invalid_argument("bias length mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double* p = m.row_ptr(r);
    for (std::size_t c = 0; c < m.cols(); ++c) p[c] += b[c];
  }
}

std::vector<double> column_sums(const Matrix& m) {
  std::vector<double> s(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double* p = m.row_ptr(r);
    for (std::size_t c = 0; c < m.cols(); ++c) s[c] += p[c];
  }
  return s;
}

std::vector<double> uniform_fan_in(std::size_t count, std::size_t fan_in, SeededRng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(count);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return v;
}

void check_labels(const std::vector<int>& labels, std::size_t n, std::size_t classes) {
  if (labels.size() != n) throw std::invalid_argument("label count does not match batch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::invalid_argument("label out of range");
    }
  }
}

}  // namespace

const Tensor* find_tensor(const TensorMap& m, const std::string& name) {
  for (const auto& [k, t] : m) {
    if (k == name) return &t;
  }
  return nullptr;
}

std::vector<double> concat_tensors(const TensorMap& m) {
  std::size_t total = 0;
  for (const auto& [k, t] : m) total += t.numel();
  std::vector<double> out;
  out.reserve(total);
  for (const auto& [k, t] : m) out.insert(out.end(), t.data.begin(), t.data.end());
  return out;
}

double tensor_map_dot(const TensorMap& a, const TensorMap& b) {
  if (a.size() != b.size()) throw std::invalid_argument("tensor_map_dot: layer count mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first || a[i].second.numel() != b[i].second.numel()) {
      throw std::invalid_argument("tensor_map_dot: layer mismatch at " + a[i].first);
    }
    s += numerics::dot(a[i].second.data, b[i].second.data);
  }
  return s;
}

// ---- FC-2 -------------------------------------------------------------------

Fc2Params Fc2Params::init(std::size_t d_in, std::size_t hidden, std::size_t classes,
                          SeededRng& rng) {
  Fc2Params p;
  p.w1 = Matrix::from_data(hidden, d_in, uniform_fan_in(hidden * d_in, d_in, rng));
  p.b1 = uniform_fan_in(hidden, d_in, rng);
  p.w2 = Matrix::from_data(classes, hidden, uniform_fan_in(classes * hidden, hidden, rng));
  p.b2 = uniform_fan_in(classes, hidden, rng);
  return p;
}

TensorMap Fc2Params::tensors() const {
  return {{"fc1.weight", Tensor::from_matrix(w1)},
          {"fc1.bias", Tensor::from_vector(b1)},
          {"fc2.weight", Tensor::from_matrix(w2)},
          {"fc2.bias", Tensor::from_vector(b2)}};
}

void Fc2Params::set_tensors(const TensorMap& t) {
  const Tensor* tw1 = find_tensor(t, "fc1.weight");
  const Tensor* tb1 = find_tensor(t, "fc1.bias");
  const Tensor* tw2 = find_tensor(t, "fc2.weight");
  const Tensor* tb2 = find_tensor(t, "fc2.bias");
  if (!tw1 || !tb1 || !tw2 || !tb2) throw std::invalid_argument("fc2 tensors incomplete");
  w1 = tw1->as_matrix();
  b1 = tb1->data;
  w2 = tw2->as_matrix();
  b2 = tb2->data;
}

Fc2Trace fc2_forward(const Fc2Params& p, const Matrix& x) {
  if (x.cols() != p.input_dim()) throw std::invalid_argument("fc2_forward: input dim mismatch");
  Fc2Trace t;
  t.x = x;
  t.pre1 = matmul_abt(x, p.w1);
  add_row_bias(t.pre1, p.b1);
  t.act1 = relu(t.pre1);
  t.logits = matmul_abt(t.act1, p.w2);
  add_row_bias(t.logits, p.b2);
  return t;
}

// ---- loss -------------------------------------------------------------------

Matrix softmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const double* in = logits.row_ptr(r);
    double* out = p.row_ptr(r);
    double hi = in[0];
    for (std::size_t c = 1; c < logits.cols(); ++c) hi = std::max(hi, in[c]);
    double z = 0;
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      out[c] = std::exp(in[c] - hi);
      z += out[c];
    }
    for (std::size_t c = 0; c < logits.cols(); ++c) out[c] /= z;
  }
  return p;
}

Matrix onehot(const std::vector<int>& labels, std::size_t classes) {
  Matrix y(labels.size(), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) y(i, static_cast<std::size_t>(labels[i])) = 1.0;
  return y;
}

double cross_entropy(const Matrix& logits, const std::vector<int>& labels) {
  check_labels(labels, logits.rows(), logits.cols());
  double total = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const double* in = logits.row_ptr(r);
    double hi = in[0];
    for (std::size_t c = 1; c < logits.cols(); ++c) hi = std::max(hi, in[c]);
    double z = 0;
    for (std::size_t c = 0; c < logits.cols(); ++c) z += std::exp(in[c] - hi);
    total += hi + std::log(z) - in[static_cast<std::size_t>(labels[r])];
  }
  return total / static_cast<double>(logits.rows());
}

Matrix softmax_ce_grad(const Matrix& logits, const std::vector<int>& labels) {
  check_labels(labels, logits.rows(), logits.cols());
  Matrix s = softmax(logits);
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t r = 0; r < s.rows(); ++r) {
    s(r, static_cast<std::size_t>(labels[r])) -= 1.0;
    numerics::scale(s.row(r), inv_n);
  }
  return s;
}

double cross_entropy_soft(const Matrix& logits, const Matrix& label_probs) {
  if (logits.rows() != label_probs.rows() || logits.cols() != label_probs.cols()) {
    throw std::invalid_argument("cross_entropy_soft: shape mismatch");
  }
  double total = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const double* in = logits.row_ptr(r);
    const double* q = label_probs.row_ptr(r);
    double hi = in[0];
    for (std::size_t c = 1; c < logits.cols(); ++c) hi = std::max(hi, in[c]);
    double z = 0;
    for (std::size_t c = 0; c < logits.cols(); ++c) z += std::exp(in[c] - hi);
    const double lse = hi + std::log(z);
    for (std::size_t c = 0; c < logits.cols(); ++c) total += q[c] * (lse - in[c]);
  }
  return total / static_cast<double>(logits.rows());
}

Matrix softmax_ce_grad_soft(const Matrix& logits, const Matrix& label_probs) {
  if (logits.rows() != label_probs.rows() || logits.cols() != label_probs.cols()) {
    throw std::invalid_argument("softmax_ce_grad_soft: shape mismatch");
  }
  Matrix s = softmax(logits);
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t i = 0; i < s.size(); ++i) {
    s.data()[i] = (s.data()[i] - label_probs.data()[i]) * inv_n;
  }
  return s;
}

// ---- FC-2 backward ------------------------------------------------------------

TensorMap fc2_backward(const Fc2Params& p, const Fc2Trace& t, const Matrix& dlogits, Matrix* dx) {
  Matrix gw2 = matmul_atb(dlogits, t.act1);
  std::vector<double> gb2 = column_sums(dlogits);
  Matrix d_act1 = matmul(dlogits, p.w2);
  Matrix d_pre1 = hadamard(d_act1, relu_mask(t.pre1));
  Matrix gw1 = matmul_atb(d_pre1, t.x);
  std::vector<double> gb1 = column_sums(d_pre1);
  if (dx) *dx = matmul(d_pre1, p.w1);
  return {{"fc1.weight", Tensor::from_matrix(gw1)},
          {"fc1.bias", Tensor::from_vector(gb1)},
          {"fc2.weight", Tensor::from_matrix(gw2)},
          {"fc2.bias", Tensor::from_vector(gb2)}};
}

TensorMap backward_aggregate(const Fc2Params& p, const Matrix& x, const std::vector<int>& labels) {
  Fc2Trace t = fc2_forward(p, x);
  return fc2_backward(p, t, softmax_ce_grad(t.logits, labels), nullptr);
}

std::vector<TensorMap> backward_per_sample(const Fc2Params& p, const Matrix& x,
                                           const std::vector<int>& labels) {
  check_labels(labels, x.rows(), p.classes());
  std::vector<TensorMap> out;
  out.reserve(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    Matrix xi(1, x.cols());
    std::copy(x.row(i).begin(), x.row(i).end(), xi.data().begin());
    out.push_back(backward_aggregate(p, xi, {labels[i]}));
  }
  return out;
}

// ---- conv primitives ----------------------------------------------------------

namespace {

constexpr std::size_t kK = 3;    // kernel side
constexpr std::ptrdiff_t kPad = 1;

// cols: (h*w) x (c*9) patches of a single sample, zero padded.
Matrix im2col_sample(const double* img, Shape3 in) {
  const std::size_t hw = in.h * in.w;
  Matrix cols(hw, in.c * kK * kK);
  for (std::size_t y = 0; y < in.h; ++y) {
    for (std::size_t x = 0; x < in.w; ++x) {
      double* row = cols.row_ptr(y * in.w + x);
      std::size_t col = 0;
      for (std::size_t ci = 0; ci < in.c; ++ci) {
        const double* plane = img + ci * hw;
        for (std::size_t dy = 0; dy < kK; ++dy) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + dy) - kPad;
          for (std::size_t dx = 0; dx < kK; ++dx, ++col) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + dx) - kPad;
            row[col] = (sy >= 0 && sy < static_cast<std::ptrdiff_t>(in.h) && sx >= 0 &&
                        sx < static_cast<std::ptrdiff_t>(in.w))
                           ? plane[static_cast<std::size_t>(sy) * in.w + static_cast<std::size_t>(sx)]
                           : 0.0;
          }
        }
      }
    }
  }
  return cols;
}

// Adjoint of im2col: scatter-add patch gradients back onto the image.
void col2im_sample(const Matrix& cols, Shape3 in, double* img) {
  const std::size_t hw = in.h * in.w;
  for (std::size_t y = 0; y < in.h; ++y) {
    for (std::size_t x = 0; x < in.w; ++x) {
      const double* row = cols.row_ptr(y * in.w + x);
      std::size_t col = 0;
      for (std::size_t ci = 0; ci < in.c; ++ci) {
        double* plane = img + ci * hw;
        for (std::size_t dy = 0; dy < kK; ++dy) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + dy) - kPad;
          for (std::size_t dx = 0; dx < kK; ++dx, ++col) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + dx) - kPad;
            if (sy >= 0 && sy < static_cast<std::ptrdiff_t>(in.h) && sx >= 0 &&
                sx < static_cast<std::ptrdiff_t>(in.w)) {
              plane[static_cast<std::size_t>(sy) * in.w + static_cast<std::size_t>(sx)] += row[col];
            }
          }
        }
      }
    }
  }
}

Matrix weight_as_matrix(const Tensor& w) {
  // (oc, ic, 3, 3) viewed as oc x (ic*9); the flat layout already matches.
  return Matrix::from_data(w.dims[0], w.dims[1] * w.dims[2] * w.dims[3], w.data);
}

// Forward convolution of a whole batch: returns n x (oc*h*w).
Matrix conv_apply(const Matrix& input, Shape3 in, const Matrix& wmat,
                  const std::vector<double>* bias) {
  const std::size_t oc = wmat.rows();
  const std::size_t hw = in.h * in.w;
  Matrix out(input.rows(), oc * hw);
  for (std::size_t s = 0; s < input.rows(); ++s) {
    Matrix cols = im2col_sample(input.row_ptr(s), in);
    Matrix om = matmul_abt(wmat, cols);  // oc x hw
    double* dst = out.row_ptr(s);
    for (std::size_t o = 0; o < oc; ++o) {
      const double* src = om.row_ptr(o);
      const double add = bias ? (*bias)[o] : 0.0;
      for (std::size_t i = 0; i < hw; ++i) dst[o * hw + i] = src[i] + add;
    }
  }
  return out;
}

// Gradient w.r.t. the convolution input given output-side gradients.
Matrix conv_apply_transposed(const Matrix& dout, Shape3 in, const Matrix& wmat) {
  const std::size_t oc = wmat.rows();
  const std::size_t hw = in.h * in.w;
  Matrix dx(dout.rows(), in.numel());
  for (std::size_t s = 0; s < dout.rows(); ++s) {
    Matrix dmat(oc, hw);
    const double* src = dout.row_ptr(s);
    std::copy(src, src + oc * hw, dmat.data().begin());
    Matrix dcols = matmul_atb(dmat, wmat);  // hw x (ic*9)
    col2im_sample(dcols, in, dx.row_ptr(s));
  }
  return dx;
}

struct PoolResult {
  Matrix pooled;
  std::vector<std::uint32_t> argmax;
};

PoolResult maxpool2_forward(const Matrix& input, Shape3 in) {
  if (in.h % 2 != 0 || in.w % 2 != 0) throw std::invalid_argument("maxpool2: odd spatial size");
  const Shape3 out{in.c, in.h / 2, in.w / 2};
  PoolResult res;
  res.pooled = Matrix(input.rows(), out.numel());
  res.argmax.assign(input.rows() * out.numel(), 0);
  const std::size_t hw = in.h * in.w;
  for (std::size_t s = 0; s < input.rows(); ++s) {
    const double* src = input.row_ptr(s);
    double* dst = res.pooled.row_ptr(s);
    std::uint32_t* am = res.argmax.data() + s * out.numel();
    for (std::size_t ci = 0; ci < in.c; ++ci) {
      for (std::size_t y = 0; y < out.h; ++y) {
        for (std::size_t x = 0; x < out.w; ++x) {
          const std::size_t base = ci * hw + (2 * y) * in.w + 2 * x;
          std::size_t best = base;
          double hi = src[base];
          for (const std::size_t cand : {base + 1, base + in.w, base + in.w + 1}) {
            if (src[cand] > hi) {
              hi = src[cand];
              best = cand;
            }
          }
          const std::size_t cell = ci * out.h * out.w + y * out.w + x;
          dst[cell] = hi;
          am[cell] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return res;
}

Matrix pool_scatter(const Matrix& pooled, const std::vector<std::uint32_t>& argmax, Shape3 in,
                    Shape3 out) {
  Matrix up(pooled.rows(), in.numel());
  for (std::size_t s = 0; s < pooled.rows(); ++s) {
    const double* src = pooled.row_ptr(s);
    double* dst = up.row_ptr(s);
    const std::uint32_t* am = argmax.data() + s * out.numel();
    for (std::size_t i = 0; i < out.numel(); ++i) dst[am[i]] += src[i];
  }
  return up;
}

Matrix pool_gather(const Matrix& plane, const std::vector<std::uint32_t>& argmax, Shape3 in,
                   Shape3 out) {
  (void)in;
  Matrix down(plane.rows(), out.numel());
  for (std::size_t s = 0; s < plane.rows(); ++s) {
    const double* src = plane.row_ptr(s);
    double* dst = down.row_ptr(s);
    const std::uint32_t* am = argmax.data() + s * out.numel();
    for (std::size_t i = 0; i < out.numel(); ++i) dst[i] = src[am[i]];
  }
  return down;
}

}  // namespace

// ---- ConvNet ----------------------------------------------------------------

ConvNetParams ConvNetParams::init(Shape3 input, const std::vector<std::size_t>& channels,
                                  std::size_t hidden, std::size_t classes, SeededRng& rng) {
  if (channels.empty()) throw std::invalid_argument("convnet: need at least one block");
  ConvNetParams p;
  p.input_shape = input;
  Shape3 cur = input;
  for (std::size_t out_c : channels) {
    if (cur.h % 2 != 0 || cur.w % 2 != 0) {
      throw std::invalid_argument("convnet: spatial size must halve cleanly");
    }
    ConvBlockParams b;
    b.in_c = cur.c;
    b.out_c = out_c;
    const std::size_t fan_in = cur.c * kK * kK;
    b.w = Tensor({out_c, cur.c, kK, kK}, uniform_fan_in(out_c * cur.c * kK * kK, fan_in, rng));
    b.b = uniform_fan_in(out_c, fan_in, rng);
    p.blocks.push_back(std::move(b));
    cur = Shape3{out_c, cur.h / 2, cur.w / 2};
  }
  const std::size_t emb = cur.numel();
  p.head_w1 = Matrix::from_data(hidden, emb, uniform_fan_in(hidden * emb, emb, rng));
  p.head_b1 = uniform_fan_in(hidden, emb, rng);
  p.head_w2 = Matrix::from_data(classes, hidden, uniform_fan_in(classes * hidden, hidden, rng));
  p.head_b2 = uniform_fan_in(classes, hidden, rng);
  return p;
}

ConvNetParams ConvNetParams::init_s(std::size_t classes, SeededRng& rng) {
  return init(Shape3{3, 32, 32}, {16, 32, 64}, 256, classes, rng);
}

TensorMap ConvNetParams::tensors() const {
  TensorMap t;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string base = "conv" + std::to_string(i + 1);
    t.emplace_back(base + ".weight", blocks[i].w);
    t.emplace_back(base + ".bias", Tensor::from_vector(blocks[i].b));
  }
  t.emplace_back("head1.weight", Tensor::from_matrix(head_w1));
  t.emplace_back("head1.bias", Tensor::from_vector(head_b1));
  t.emplace_back("head2.weight", Tensor::from_matrix(head_w2));
  t.emplace_back("head2.bias", Tensor::from_vector(head_b2));
  return t;
}

void ConvNetParams::set_tensors(const TensorMap& t) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string base = "conv" + std::to_string(i + 1);
    const Tensor* tw = find_tensor(t, base + ".weight");
    const Tensor* tb = find_tensor(t, base + ".bias");
    if (!tw || !tb) throw std::invalid_argument("convnet tensors incomplete");
    blocks[i].w = *tw;
    blocks[i].b = tb->data;
  }
  const Tensor* h1w = find_tensor(t, "head1.weight");
  const Tensor* h1b = find_tensor(t, "head1.bias");
  const Tensor* h2w = find_tensor(t, "head2.weight");
  const Tensor* h2b = find_tensor(t, "head2.bias");
  if (!h1w || !h1b || !h2w || !h2b) throw std::invalid_argument("convnet tensors incomplete");
  head_w1 = h1w->as_matrix();
  head_b1 = h1b->data;
  head_w2 = h2w->as_matrix();
  head_b2 = h2b->data;
}

Matrix convnet_embedding(const ConvNetParams& p, const Matrix& x, ConvTrace* trace) {
  if (x.cols() != p.input_shape.numel()) {
    throw std::invalid_argument("convnet: input dim mismatch");
  }
  Matrix cur = x;
  Shape3 shape = p.input_shape;
  std::vector<ConvBlockTrace> blocks;
  blocks.reserve(p.blocks.size());
  for (const ConvBlockParams& bp : p.blocks) {
    ConvBlockTrace bt;
    bt.in_shape = shape;
    bt.conv_shape = Shape3{bp.out_c, shape.h, shape.w};
    bt.out_shape = Shape3{bp.out_c, shape.h / 2, shape.w / 2};
    bt.conv_in = cur;
    Matrix wmat = weight_as_matrix(bp.w);
    const std::size_t hw = shape.h * shape.w;
    bt.pre = Matrix(cur.rows(), bp.out_c * hw);
    bt.cols.reserve(cur.rows());
    for (std::size_t s = 0; s < cur.rows(); ++s) {
      bt.cols.push_back(im2col_sample(cur.row_ptr(s), shape));
      Matrix om = matmul_abt(wmat, bt.cols.back());
      double* dst = bt.pre.row_ptr(s);
      for (std::size_t o = 0; o < bp.out_c; ++o) {
        const double* src = om.row_ptr(o);
        for (std::size_t i = 0; i < hw; ++i) dst[o * hw + i] = src[i] + bp.b[o];
      }
    }
    bt.relu_out = relu(bt.pre);
    PoolResult pr = maxpool2_forward(bt.relu_out, bt.conv_shape);
    bt.argmax = std::move(pr.argmax);
    cur = std::move(pr.pooled);
    shape = bt.out_shape;
    blocks.push_back(std::move(bt));
  }
  if (trace) {
    trace->blocks = std::move(blocks);
    trace->embedding = cur;
  }
  return cur;
}

ConvTrace convnet_forward(const ConvNetParams& p, const Matrix& x) {
  ConvTrace t;
  convnet_embedding(p, x, &t);
  t.head_pre1 = matmul_abt(t.embedding, p.head_w1);
  add_row_bias(t.head_pre1, p.head_b1);
  t.head_act1 = relu(t.head_pre1);
  t.logits = matmul_abt(t.head_act1, p.head_w2);
  add_row_bias(t.logits, p.head_b2);
  return t;
}

TensorMap convnet_backward(const ConvNetParams& p, const ConvTrace& t, const Matrix& dlogits,
                           Matrix* dx) {
  Matrix gw2 = matmul_atb(dlogits, t.head_act1);
  std::vector<double> gb2 = column_sums(dlogits);
  Matrix d_act1 = matmul(dlogits, p.head_w2);
  Matrix d_pre1 = hadamard(d_act1, relu_mask(t.head_pre1));
  Matrix gw1 = matmul_atb(d_pre1, t.embedding);
  std::vector<double> gb1 = column_sums(d_pre1);
  Matrix d_pool = matmul(d_pre1, p.head_w1);  // n x embedding

  std::vector<Tensor> gws(p.blocks.size());
  std::vector<std::vector<double>> gbs(p.blocks.size());
  for (std::size_t bi = p.blocks.size(); bi-- > 0;) {
    const ConvBlockParams& bp = p.blocks[bi];
    const ConvBlockTrace& bt = t.blocks[bi];
    Matrix wmat = weight_as_matrix(bp.w);
    Matrix d_relu = pool_scatter(d_pool, bt.argmax, bt.conv_shape, bt.out_shape);
    Matrix d_pre = hadamard(d_relu, relu_mask(bt.pre));
    const std::size_t hw = bt.conv_shape.h * bt.conv_shape.w;
    Matrix gw(bp.out_c, bp.in_c * kK * kK);
    std::vector<double> gb(bp.out_c, 0.0);
    const bool need_dx = bi > 0 || dx != nullptr;
    Matrix d_in;
    if (need_dx) d_in = Matrix(d_pre.rows(), bt.in_shape.numel());
    for (std::size_t s = 0; s < d_pre.rows(); ++s) {
      Matrix dmat(bp.out_c, hw);
      const double* src = d_pre.row_ptr(s);
      std::copy(src, src + bp.out_c * hw, dmat.data().begin());
      add_inplace(gw, matmul(dmat, bt.cols[s]));
      for (std::size_t o = 0; o < bp.out_c; ++o) gb[o] += numerics::pairwise_sum(dmat.row(o));
      if (need_dx) {
        Matrix dcols = matmul_atb(dmat, wmat);
        col2im_sample(dcols, bt.in_shape, d_in.row_ptr(s));
      }
    }
    gws[bi] = Tensor({bp.out_c, bp.in_c, kK, kK},
                     std::vector<double>(gw.data().begin(), gw.data().end()));
    gbs[bi] = std::move(gb);
    if (bi > 0) {
      d_pool = std::move(d_in);
    } else if (dx) {
      *dx = std::move(d_in);
    }
  }

  TensorMap out;
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string base = "conv" + std::to_string(i + 1);
    out.emplace_back(base + ".weight", std::move(gws[i]));
    out.emplace_back(base + ".bias", Tensor::from_vector(gbs[i]));
  }
  out.emplace_back("head1.weight", Tensor::from_matrix(gw1));
  out.emplace_back("head1.bias", Tensor::from_vector(gb1));
  out.emplace_back("head2.weight", Tensor::from_matrix(gw2));
  out.emplace_back("head2.bias", Tensor::from_vector(gb2));
  return out;
}

TensorMap backward_aggregate(const ConvNetParams& p, const Matrix& x,
                             const std::vector<int>& labels) {
  ConvTrace t = convnet_forward(p, x);
  return convnet_backward(p, t, softmax_ce_grad(t.logits, labels), nullptr);
}

std::vector<TensorMap> backward_per_sample(const ConvNetParams& p, const Matrix& x,
                                           const std::vector<int>& labels) {
  check_labels(labels, x.rows(), p.classes());
  std::vector<TensorMap> out;
  out.reserve(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    Matrix xi(1, x.cols());
    std::copy(x.row(i).begin(), x.row(i).end(), xi.data().begin());
    out.push_back(backward_aggregate(p, xi, {labels[i]}));
  }
  return out;
}

// ---- input gradients -----------------------------------------------------------

Matrix fc2_input_gradient(const Fc2Params& p, const Matrix& x, const Objective& on_logits,
                          double* value) {
  Fc2Trace t = fc2_forward(p, x);
  if (value) *value = on_logits.value(t.logits);
  Matrix dlogits = on_logits.grad(t.logits);
  if (dlogits.rows() != t.logits.rows() || dlogits.cols() != t.logits.cols()) {
    throw std::invalid_argument("objective gradient shape mismatch");
  }
  Matrix dx;
  fc2_backward(p, t, dlogits, &dx);
  return dx;
}

Matrix convnet_input_gradient(const ConvNetParams& p, const Matrix& x, const Objective& on_logits,
                              double* value) {
  ConvTrace t = convnet_forward(p, x);
  if (value) *value = on_logits.value(t.logits);
  Matrix dlogits = on_logits.grad(t.logits);
  if (dlogits.rows() != t.logits.rows() || dlogits.cols() != t.logits.cols()) {
    throw std::invalid_argument("objective gradient shape mismatch");
  }
  Matrix dx;
  convnet_backward(p, t, dlogits, &dx);
  return dx;
}

Matrix convnet_embedding_input_gradient(const ConvNetParams& p, const Matrix& x,
                                        const Objective& on_embedding, double* value) {
  ConvTrace t;
  Matrix z = convnet_embedding(p, x, &t);
  if (value) *value = on_embedding.value(z);
  Matrix d_pool = on_embedding.grad(z);
  if (d_pool.rows() != z.rows() || d_pool.cols() != z.cols()) {
    throw std::invalid_argument("objective gradient shape mismatch");
  }
  for (std::size_t bi = p.blocks.size(); bi-- > 0;) {
    const ConvBlockTrace& bt = t.blocks[bi];
    Matrix wmat = weight_as_matrix(p.blocks[bi].w);
    Matrix d_relu = pool_scatter(d_pool, bt.argmax, bt.conv_shape, bt.out_shape);
    Matrix d_pre = hadamard(d_relu, relu_mask(bt.pre));
    d_pool = conv_apply_transposed(d_pre, bt.in_shape, wmat);
  }
  return d_pool;
}

// ---- double backprop -------------------------------------------------------------

namespace {

struct BundleView {
  Matrix w;  // weight as matrix (dense: out x in; conv: oc x ic*9)
  const std::vector<double>* b = nullptr;
};

BundleView bundle_layer(const TensorMap& c, const std::string& base,
                        const std::vector<std::size_t>& wdims) {
  const Tensor* tw = find_tensor(c, base + ".weight");
  const Tensor* tb = find_tensor(c, base + ".bias");
  if (!tw || !tb) throw std::invalid_argument("bundle missing layer " + base);
  if (tw->dims != wdims) throw std::invalid_argument("bundle shape mismatch at " + base);
  BundleView v;
  if (wdims.size() == 2) {
    v.w = tw->as_matrix();
  } else {
    v.w = Matrix::from_data(wdims[0], wdims[1] * wdims[2] * wdims[3], tw->data);
  }
  v.b = &tb->data;
  return v;
}

double frob_inner(const Matrix& a, const Matrix& b) { return numerics::dot(a.data(), b.data()); }

// a_logits = (1/n) * J_softmax(p) rho, rowwise.
Matrix softmax_vjp(const Matrix& p, const Matrix& rho, double inv_n) {
  Matrix out(p.rows(), p.cols());
  for (std::size_t r = 0; r < p.rows(); ++r) {
    const double* pr = p.row_ptr(r);
    const double* rr = rho.row_ptr(r);
    double inner = 0;
    for (std::size_t c = 0; c < p.cols(); ++c) inner += pr[c] * rr[c];
    double* o = out.row_ptr(r);
    for (std::size_t c = 0; c < p.cols(); ++c) o[c] = inv_n * pr[c] * (rr[c] - inner);
  }
  return out;
}

GradDotResult fc2_grad_dot_core(const Fc2Params& p, const Matrix& x, const Matrix& label_probs,
                                const TensorMap& c, bool want_dlabel) {
  Fc2Trace t = fc2_forward(p, x);
  const double n = static_cast<double>(x.rows());
  Matrix prob = softmax(t.logits);
  Matrix s(prob.rows(), prob.cols());
  for (std::size_t i = 0; i < s.size(); ++i) {
    s.data()[i] = (prob.data()[i] - label_probs.data()[i]) / n;
  }
  Matrix mask = relu_mask(t.pre1);
  Matrix dh = hadamard(matmul(s, p.w2), mask);

  BundleView c1 = bundle_layer(c, "fc1", {p.hidden_dim(), p.input_dim()});
  BundleView c2 = bundle_layer(c, "fc2", {p.classes(), p.hidden_dim()});

  // rho pass: adjoints of the backward deltas, input side toward output side.
  Matrix rho_dh = matmul_abt(x, c1.w);
  add_row_bias(rho_dh, *c1.b);
  Matrix part2 = matmul_abt(t.act1, c2.w);
  add_row_bias(part2, *c2.b);
  GradDotResult res;
  res.value = frob_inner(dh, rho_dh) + frob_inner(s, part2);
  Matrix rho_s = matmul_abt(hadamard(rho_dh, mask), p.w2);
  add_inplace(rho_s, part2);

  Matrix a_logits = softmax_vjp(prob, rho_s, 1.0 / n);

  // activation adjoint pass.
  Matrix a_act1 = matmul(a_logits, p.w2);
  add_inplace(a_act1, matmul(s, c2.w));
  Matrix a_pre1 = hadamard(a_act1, mask);
  res.dx = matmul(a_pre1, p.w1);
  add_inplace(res.dx, matmul(dh, c1.w));

  if (want_dlabel) {
    Matrix dq = softmax_vjp(label_probs, rho_s, -1.0 / n);
    res.dlabel_logits = std::move(dq);
  }
  return res;
}

GradDotResult convnet_grad_dot_core(const ConvNetParams& p, const Matrix& x,
                                    const Matrix& label_probs, const TensorMap& c,
                                    bool want_dlabel) {
  ConvTrace t = convnet_forward(p, x);
  const double n = static_cast<double>(x.rows());
  Matrix prob = softmax(t.logits);
  Matrix s(prob.rows(), prob.cols());
  for (std::size_t i = 0; i < s.size(); ++i) {
    s.data()[i] = (prob.data()[i] - label_probs.data()[i]) / n;
  }

  const std::size_t nb = p.blocks.size();
  std::vector<BundleView> cb(nb);
  std::vector<Matrix> wmats(nb);
  std::vector<Matrix> masks(nb);
  for (std::size_t i = 0; i < nb; ++i) {
    cb[i] = bundle_layer(c, "conv" + std::to_string(i + 1),
                         {p.blocks[i].out_c, p.blocks[i].in_c, kK, kK});
    wmats[i] = weight_as_matrix(p.blocks[i].w);
    masks[i] = relu_mask(t.blocks[i].pre);
  }
  BundleView ch1 = bundle_layer(c, "head1", {p.hidden_dim(), p.embedding_dim()});
  BundleView ch2 = bundle_layer(c, "head2", {p.classes(), p.hidden_dim()});

  // standard backward deltas, kept per block.
  Matrix mask1 = relu_mask(t.head_pre1);
  Matrix d_pre1 = hadamard(matmul(s, p.head_w2), mask1);
  std::vector<Matrix> d_pre(nb);
  {
    Matrix d_pool = matmul(d_pre1, p.head_w1);
    for (std::size_t bi = nb; bi-- > 0;) {
      const ConvBlockTrace& bt = t.blocks[bi];
      Matrix d_relu = pool_scatter(d_pool, bt.argmax, bt.conv_shape, bt.out_shape);
      d_pre[bi] = hadamard(d_relu, masks[bi]);
      if (bi > 0) d_pool = conv_apply_transposed(d_pre[bi], bt.in_shape, wmats[bi]);
    }
  }

  GradDotResult res;

  // rho pass, bottom block upward.
  Matrix rho_pool;
  for (std::size_t bi = 0; bi < nb; ++bi) {
    const ConvBlockTrace& bt = t.blocks[bi];
    Matrix inj = conv_apply(bt.conv_in, bt.in_shape, cb[bi].w, cb[bi].b);
    res.value += frob_inner(d_pre[bi], inj);
    Matrix rho_pre = std::move(inj);
    if (bi > 0) add_inplace(rho_pre, conv_apply(rho_pool, bt.in_shape, wmats[bi], nullptr));
    rho_pool = pool_gather(hadamard(rho_pre, masks[bi]), bt.argmax, bt.conv_shape, bt.out_shape);
  }

  Matrix rho_pre1 = matmul_abt(rho_pool, p.head_w1);
  {
    Matrix inj1 = matmul_abt(t.embedding, ch1.w);
    add_row_bias(inj1, *ch1.b);
    res.value += frob_inner(d_pre1, inj1);
    add_inplace(rho_pre1, inj1);
  }
  Matrix part2 = matmul_abt(t.head_act1, ch2.w);
  add_row_bias(part2, *ch2.b);
  res.value += frob_inner(s, part2);
  Matrix rho_s = matmul_abt(hadamard(rho_pre1, mask1), p.head_w2);
  add_inplace(rho_s, part2);

  Matrix a_logits = softmax_vjp(prob, rho_s, 1.0 / n);

  // activation adjoint pass, head then blocks downward.
  Matrix a_act1 = matmul(a_logits, p.head_w2);
  add_inplace(a_act1, matmul(s, ch2.w));
  Matrix a_pre1 = hadamard(a_act1, mask1);
  Matrix a_pool = matmul(a_pre1, p.head_w1);
  add_inplace(a_pool, matmul(d_pre1, ch1.w));
  for (std::size_t bi = nb; bi-- > 0;) {
    const ConvBlockTrace& bt = t.blocks[bi];
    Matrix a_relu = pool_scatter(a_pool, bt.argmax, bt.conv_shape, bt.out_shape);
    Matrix a_pre = hadamard(a_relu, masks[bi]);
    a_pool = conv_apply_transposed(a_pre, bt.in_shape, wmats[bi]);
    add_inplace(a_pool, conv_apply_transposed(d_pre[bi], bt.in_shape, cb[bi].w));
  }
  res.dx = std::move(a_pool);

  if (want_dlabel) {
    res.dlabel_logits = softmax_vjp(label_probs, rho_s, -1.0 / n);
  }
  return res;
}

}  // namespace

GradDotResult fc2_grad_dot_input(const Fc2Params& p, const Matrix& x,
                                 const std::vector<int>& labels, const TensorMap& c) {
  check_labels(labels, x.rows(), p.classes());
  return fc2_grad_dot_core(p, x, onehot(labels, p.classes()), c, false);
}

GradDotResult fc2_grad_dot_input_soft(const Fc2Params& p, const Matrix& x,
                                      const Matrix& label_logits, const TensorMap& c) {
  return fc2_grad_dot_core(p, x, softmax(label_logits), c, true);
}

GradDotResult convnet_grad_dot_input(const ConvNetParams& p, const Matrix& x,
                                     const std::vector<int>& labels, const TensorMap& c) {
  check_labels(labels, x.rows(), p.classes());
  return convnet_grad_dot_core(p, x, onehot(labels, p.classes()), c, false);
}

GradDotResult convnet_grad_dot_input_soft(const ConvNetParams& p, const Matrix& x,
                                          const Matrix& label_logits, const TensorMap& c) {
  return convnet_grad_dot_core(p, x, softmax(label_logits), c, true);
}

// ---- training ----------------------------------------------------------------

namespace {

template <typename Params>
TrainResult train_generic(Params& p, const Matrix& xs, const std::vector<int>& ys,
                          std::size_t epochs, std::size_t batch, double lr, std::uint64_t seed) {
  if (xs.rows() != ys.size()) throw std::invalid_argument("train: label count mismatch");
  if (batch == 0) throw std::invalid_argument("train: zero batch size");
  SeededRng rng(seed);
  TensorMap params = p.tensors();
  std::vector<AdamState> states;
  states.reserve(params.size());
  for (const auto& [name, tensor] : params) states.emplace_back(tensor.numel(), lr);

  std::vector<std::size_t> order(xs.rows());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    // Fisher-Yates with the deterministic stream.
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.uniform_index(i)]);
    }
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t count = std::min(batch, order.size() - start);
      Matrix bx(count, xs.cols());
      std::vector<int> by(count);
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t src = order[start + i];
        std::copy(xs.row(src).begin(), xs.row(src).end(), bx.row_ptr(i));
        by[i] = ys[src];
      }
      double loss;
      TensorMap grads;
      if constexpr (std::is_same_v<Params, Fc2Params>) {
        Fc2Trace t = fc2_forward(p, bx);
        loss = cross_entropy(t.logits, by);
        grads = fc2_backward(p, t, softmax_ce_grad(t.logits, by), nullptr);
      } else {
        ConvTrace t = convnet_forward(p, bx);
        loss = cross_entropy(t.logits, by);
        grads = convnet_backward(p, t, softmax_ce_grad(t.logits, by), nullptr);
      }
      epoch_loss += loss * static_cast<double>(count);
      for (std::size_t gi = 0; gi < grads.size(); ++gi) {
        adam_step_inplace(params[gi].second.data, grads[gi].second.data, states[gi]);
      }
      p.set_tensors(params);
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(xs.rows()));
  }

  std::vector<int> pred = predict(p, xs);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == ys[i] ? 1 : 0;
  result.final_accuracy = static_cast<double>(hits) / static_cast<double>(pred.size());
  return result;
}

}  // namespace

TrainResult train_fc2(Fc2Params& p, const Matrix& xs, const std::vector<int>& ys,
                      std::size_t epochs, std::size_t batch, double lr, std::uint64_t seed) {
  return train_generic(p, xs, ys, epochs, batch, lr, seed);
}

TrainResult train_convnet(ConvNetParams& p, const Matrix& xs, const std::vector<int>& ys,
                          std::size_t epochs, std::size_t batch, double lr, std::uint64_t seed) {
  return train_generic(p, xs, ys, epochs, batch, lr, seed);
}

std::vector<int> predict(const Fc2Params& p, const Matrix& xs) {
  Fc2Trace t = fc2_forward(p, xs);
  std::vector<int> out(xs.rows());
  for (std::size_t r = 0; r < xs.rows(); ++r) {
    const auto row = t.logits.row(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

std::vector<int> predict(const ConvNetParams& p, const Matrix& xs) {
  ConvTrace t = convnet_forward(p, xs);
  std::vector<int> out(xs.rows());
  for (std::size_t r = 0; r < xs.rows(); ++r) {
    const auto row = t.logits.row(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

// ---- checkpoints ----------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[] = "GSNET1";

void put_tensor(std::vector<std::uint8_t>& out, const std::string& name, const Tensor& t) {
  binio::put_string(out, name);
  binio::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
  for (std::size_t d : t.dims) binio::put_u64(out, d);
  for (double v : t.data) binio::put_f64(out, v);
}

}  // namespace

void save_checkpoint(const std::string& path, const VictimModel& model) {
  std::vector<std::uint8_t> out;
  binio::put_bytes(out, kCheckpointMagic, 6);
  TensorMap tensors;
  if (const auto* fc2 = std::get_if<Fc2Params>(&model)) {
    tensors = fc2->tensors();
  } else {
    const auto& conv = std::get<ConvNetParams>(model);
    tensors = conv.tensors();
    const Shape3 s = conv.input_shape;
    tensors.emplace_back("input.shape",
                         Tensor::from_vector({static_cast<double>(s.c), static_cast<double>(s.h),
                                              static_cast<double>(s.w)}));
  }
  for (const auto& [name, tensor] : tensors) put_tensor(out, name, tensor);
  binio::write_file(path, out);
}

VictimModel load_checkpoint(const std::string& path) {
  const std::vector<std::uint8_t> bytes = binio::read_file(path);
  binio::Reader r(bytes.data(), bytes.size(), path);
  char magic[6];
  r.raw(magic, 6);
  if (std::string(magic, 6) != kCheckpointMagic) {
    throw IoError(path + ": bad checkpoint magic");
  }
  TensorMap tensors;
  while (!r.at_end()) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw IoError(path + ": implausible tensor rank");
    std::vector<std::size_t> dims(rank);
    std::size_t numel = 1;
    for (auto& d : dims) {
      d = r.u64();
      numel *= d;
    }
    std::vector<double> data = r.f64_array(numel);
    for (double v : data) {
      if (!std::isfinite(v)) throw IoError(path + ": non-finite value in " + name);
    }
    tensors.emplace_back(std::move(name), Tensor(std::move(dims), std::move(data)));
  }

  if (find_tensor(tensors, "conv1.weight")) {
    const Tensor* shape = find_tensor(tensors, "input.shape");
    if (!shape || shape->data.size() != 3) throw IoError(path + ": missing input shape");
    std::size_t n_blocks = 0;
    while (find_tensor(tensors, "conv" + std::to_string(n_blocks + 1) + ".weight")) ++n_blocks;
    ConvNetParams p;
    p.input_shape = Shape3{static_cast<std::size_t>(shape->data[0]),
                           static_cast<std::size_t>(shape->data[1]),
                           static_cast<std::size_t>(shape->data[2])};
    p.blocks.resize(n_blocks);
    for (std::size_t i = 0; i < n_blocks; ++i) {
      const Tensor* w = find_tensor(tensors, "conv" + std::to_string(i + 1) + ".weight");
      if (!w || w->dims.size() != 4) throw IoError(path + ": bad conv weight");
      p.blocks[i].out_c = w->dims[0];
      p.blocks[i].in_c = w->dims[1];
    }
    p.set_tensors(tensors);
    return p;
  }
  if (find_tensor(tensors, "fc1.weight")) {
    Fc2Params p;
    p.set_tensors(tensors);
    return p;
  }
  throw IoError(path + ": unrecognized checkpoint contents");
}

}  // namespace gradsep::nets
