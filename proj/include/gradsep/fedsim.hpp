#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradsep/nets.hpp"
#include "gradsep/numerics.hpp"

namespace gradsep::fedsim {

using nets::TensorMap;
using numerics::Matrix;

struct DpMeta {
  double sigma = 0;
  bool clipped = false;
  double delta = 0;
};

// The honest-but-curious server's view of one FL round: the aggregate
// gradient the client sent, plus whatever defense metadata applies.
struct GradientBundle {
  TensorMap layers;
  std::uint32_t batch_size_claimed = 0;
  std::optional<DpMeta> dp_meta;

  const numerics::Tensor* layer(const std::string& name) const {
    return nets::find_tensor(layers, name);
  }
  std::vector<double> concat() const { return nets::concat_tensors(layers); }
};

GradientBundle capture(const nets::Fc2Params& params, const Matrix& batch,
                       const std::vector<int>& labels);
GradientBundle capture(const nets::ConvNetParams& params, const Matrix& batch,
                       const std::vector<int>& labels);
GradientBundle capture(const nets::VictimModel& model, const Matrix& batch,
                       const std::vector<int>& labels);

// Defense: scale the concatenated gradient to unit L2 norm, then add iid
// Gaussian(0, sigma^2) per coordinate. sigma = 0 leaves just the clipping.
GradientBundle apply_dp(const GradientBundle& bundle, double sigma, std::uint64_t seed,
                        double delta = 1e-5);

// Gaussian-mechanism bound with sensitivity 1/batch_size. sigma = 0 returns
// +infinity.
double dp_epsilon(double sigma, double delta, std::uint32_t batch_size);

std::vector<std::uint8_t> serialize(const GradientBundle& bundle);
GradientBundle deserialize(std::span<const std::uint8_t> bytes,
                           const std::string& origin = "bundle");

void save_bundle(const std::string& path, const GradientBundle& bundle);
GradientBundle load_bundle(const std::string& path);

// CRC-32 (IEEE 802.3, reflected 0xEDB88320), the trailing integrity word of
// the bundle format.
std::uint32_t crc32(std::span<const std::uint8_t> bytes);

}  // namespace gradsep::fedsim
