#include "gradsep/fedsim.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "binio.hpp"
#include "gradsep/error.hpp"

namespace gradsep::fedsim {

using numerics::SeededRng;
using numerics::Tensor;

GradientBundle capture(const nets::Fc2Params& params, const Matrix& batch,
                       const std::vector<int>& labels) {
  GradientBundle b;
  b.layers = nets::backward_aggregate(params, batch, labels);
  b.batch_size_claimed = static_cast<std::uint32_t>(batch.rows());
  return b;
}

GradientBundle capture(const nets::ConvNetParams& params, const Matrix& batch,
                       const std::vector<int>& labels) {
  GradientBundle b;
  b.layers = nets::backward_aggregate(params, batch, labels);
  b.batch_size_claimed = static_cast<std::uint32_t>(batch.rows());
  return b;
}

GradientBundle capture(const nets::VictimModel& model, const Matrix& batch,
                       const std::vector<int>& labels) {
  if (const auto* fc2 = std::get_if<nets::Fc2Params>(&model)) {
    return capture(*fc2, batch, labels);
  }
  return capture(std::get<nets::ConvNetParams>(model), batch, labels);
}

GradientBundle apply_dp(const GradientBundle& bundle, double sigma, std::uint64_t seed,
                        double delta) {
  if (sigma < 0) throw std::invalid_argument("apply_dp: sigma must be >= 0");
  std::vector<double> flat = bundle.concat();
  const double norm = numerics::norm2(flat);
  if (norm == 0) throw NumericalError("apply_dp: zero-norm gradient cannot be normalized");

  GradientBundle out = bundle;
  SeededRng rng(seed);
  const double inv = 1.0 / norm;
  for (auto& [name, t] : out.layers) {
    for (double& v : t.data) {
      v *= inv;
      if (sigma > 0) v += rng.gaussian(0.0, sigma);
    }
  }
  out.dp_meta = DpMeta{sigma, true, delta};
  return out;
}

double dp_epsilon(double sigma, double delta, std::uint32_t batch_size) {
  if (sigma < 0) throw std::invalid_argument("dp_epsilon: sigma must be >= 0");
  if (!(delta > 0 && delta < 1)) throw std::invalid_argument("dp_epsilon: delta must be in (0,1)");
  if (batch_size == 0) throw std::invalid_argument("dp_epsilon: batch_size must be positive");
  if (sigma == 0) return std::numeric_limits<double>::infinity();
  const double sensitivity = 1.0 / static_cast<double>(batch_size);
  return sensitivity / sigma * std::sqrt(2.0 * std::log(1.25 / delta));
}

// ---- CRC-32 -------------------------------------------------------------------

namespace {

std::array<std::uint32_t, 256> make_crc_table() {
  std::array<std::uint32_t, 256> table{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    table[i] = c;
  }
  return table;
}

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  static const std::array<std::uint32_t, 256> table = make_crc_table();
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::uint8_t b : bytes) c = table[(c ^ b) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

// ---- serialization --------------------------------------------------------------

namespace {

constexpr char kBundleMagic[] = "GSGRD1";

}  // namespace

std::vector<std::uint8_t> serialize(const GradientBundle& bundle) {
  std::vector<std::uint8_t> out;
  binio::put_bytes(out, kBundleMagic, 6);
  binio::put_u32(out, bundle.batch_size_claimed);
  const bool has_dp = bundle.dp_meta.has_value();
  binio::put_u8(out, has_dp ? 1 : 0);
  binio::put_f64(out, has_dp ? bundle.dp_meta->sigma : 0.0);
  binio::put_u8(out, has_dp && bundle.dp_meta->clipped ? 1 : 0);
  binio::put_f64(out, has_dp ? bundle.dp_meta->delta : 0.0);
  binio::put_u32(out, static_cast<std::uint32_t>(bundle.layers.size()));
  for (const auto& [name, t] : bundle.layers) {
    binio::put_string(out, name);
    binio::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (std::size_t d : t.dims) binio::put_u64(out, d);
    for (double v : t.data) binio::put_f64(out, v);
  }
  binio::put_u32(out, crc32(out));
  return out;
}

GradientBundle deserialize(std::span<const std::uint8_t> bytes, const std::string& origin) {
  if (bytes.size() < 4) throw IoError(origin + ": truncated bundle");
  const std::uint32_t stored =
      static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
      static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8 |
      static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16 |
      static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24;
  if (crc32(bytes.first(bytes.size() - 4)) != stored) {
    throw IoError(origin + ": checksum mismatch, bundle is corrupted");
  }

  binio::Reader r(bytes.data(), bytes.size() - 4, origin);
  char magic[6];
  r.raw(magic, 6);
  if (std::string(magic, 6) != kBundleMagic) throw IoError(origin + ": bad bundle magic");

  GradientBundle b;
  b.batch_size_claimed = r.u32();
  const bool has_dp = r.u8() != 0;
  DpMeta meta;
  meta.sigma = r.f64();
  meta.clipped = r.u8() != 0;
  meta.delta = r.f64();
  if (has_dp) b.dp_meta = meta;

  const std::uint32_t layer_count = r.u32();
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw IoError(origin + ": implausible tensor rank");
    std::vector<std::size_t> dims(rank);
    std::size_t numel = 1;
    for (auto& d : dims) {
      d = r.u64();
      if (d != 0 && numel > bytes.size() / d) throw IoError(origin + ": implausible tensor size");
      numel *= d;
    }
    std::vector<double> data = r.f64_array(numel);
    for (double v : data) {
      if (!std::isfinite(v)) throw IoError(origin + ": non-finite value in " + name);
    }
    b.layers.emplace_back(std::move(name), Tensor(std::move(dims), std::move(data)));
  }
  if (!r.at_end()) throw IoError(origin + ": trailing bytes after last layer");
  return b;
}

void save_bundle(const std::string& path, const GradientBundle& bundle) {
  binio::write_file(path, serialize(bundle));
}

GradientBundle load_bundle(const std::string& path) {
  const std::vector<std::uint8_t> bytes = binio::read_file(path);
  return deserialize(bytes, path);
}

}  // namespace gradsep::fedsim
