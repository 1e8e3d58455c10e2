#include "gradsep/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <type_traits>
#include <variant>

#include "binio.hpp"
#include "gradsep/cpa.hpp"
#include "gradsep/error.hpp"
#include "gradsep/evalio.hpp"
#include "gradsep/fedsim.hpp"
#include "gradsep/inversion.hpp"
#include "gradsep/nets.hpp"
#include "gradsep/numerics.hpp"

namespace gradsep::cli {

namespace {

using evalio::Shape3;
using numerics::Matrix;
using numerics::SeededRng;

constexpr Shape3 kImageShape{3, 32, 32};

// Seed-stream tags. Dataset, victim init and victim training are shared by
// every run of one experiment; the per-run streams hang off 0x100 + run.
constexpr std::uint64_t kTagData = 1;
constexpr std::uint64_t kTagVictimInit = 2;
constexpr std::uint64_t kTagTrain = 3;
constexpr std::uint64_t kTagDp = 4;
constexpr std::uint64_t kTagCpa = 5;
constexpr std::uint64_t kTagFi = 6;
constexpr std::uint64_t kTagGm = 7;
constexpr std::uint64_t kTagRunBase = 0x100;

std::uint64_t run_seed(const RunConfig& cfg, std::uint64_t run) {
  return SeededRng(cfg.seed).derive(kTagRunBase + run).seed();
}

std::uint64_t sub_seed(std::uint64_t rseed, std::uint64_t tag) {
  return SeededRng(rseed).derive(tag).seed();
}

// ---- key table ----------------------------------------------------------

using Member = std::variant<std::string RunConfig::*, bool RunConfig::*, double RunConfig::*,
                            std::uint32_t RunConfig::*, std::uint64_t RunConfig::*>;

struct KeySpec {
  const char* name;
  Member member;
};

const std::vector<KeySpec>& key_table() {
  static const std::vector<KeySpec> table = {
      {"victim", &RunConfig::victim},
      {"dataset", &RunConfig::dataset},
      {"batch_size", &RunConfig::batch_size},
      {"attack", &RunConfig::attack},
      {"seed", &RunConfig::seed},
      {"output_dir", &RunConfig::output_dir},
      {"fast", &RunConfig::fast},
      {"dp.sigma", &RunConfig::dp_sigma},
      {"dp.delta", &RunConfig::dp_delta},
      {"cpa.lambda_ne", &RunConfig::cpa_lambda_ne},
      {"cpa.lambda_tv", &RunConfig::cpa_lambda_tv},
      {"cpa.lambda_mi", &RunConfig::cpa_lambda_mi},
      {"cpa.lambda_sp", &RunConfig::cpa_lambda_sp},
      {"cpa.lambda_sr", &RunConfig::cpa_lambda_sr},
      {"cpa.t", &RunConfig::cpa_t},
      {"cpa.a", &RunConfig::cpa_a},
      {"cpa.iters", &RunConfig::cpa_iters},
      {"cpa.lr", &RunConfig::cpa_lr},
      {"fi.lambda_tv", &RunConfig::fi_lambda_tv},
      {"fi.lambda_gm", &RunConfig::fi_lambda_gm},
      {"fi.iters", &RunConfig::fi_iters},
      {"fi.lr", &RunConfig::fi_lr},
      {"fi.labels_known", &RunConfig::fi_labels_known},
      {"synth.classes", &RunConfig::synth_classes},
      {"victim.hidden", &RunConfig::victim_hidden},
      {"victim.train", &RunConfig::victim_train},
      {"victim.epochs", &RunConfig::victim_epochs},
      {"victim.lr", &RunConfig::victim_lr},
      {"victim.batch", &RunConfig::victim_batch},
      {"run", &RunConfig::run_index},
      {"sweep.points", &RunConfig::sweep_points},
      {"sweep.run", &RunConfig::sweep_run},
  };
  return table;
}

const KeySpec& find_key(const std::string& key) {
  for (const auto& spec : key_table())
    if (key == spec.name) return spec;
  throw std::invalid_argument("unknown config key '" + key + "'");
}

std::string fmt_f64(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s, const std::string& key) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size())
    throw std::invalid_argument("bad number '" + s + "' for key " + key);
  return v;
}

std::uint64_t parse_uint(const std::string& s, const std::string& key) {
  if (s.empty() || !std::isdigit(static_cast<unsigned char>(s[0])))
    throw std::invalid_argument("bad integer '" + s + "' for key " + key);
  char* end = nullptr;
  const std::uint64_t v = std::strtoull(s.c_str(), &end, 10);
  if (end != s.c_str() + s.size())
    throw std::invalid_argument("bad integer '" + s + "' for key " + key);
  return v;
}

bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("bad boolean '" + s + "' for key " + key +
                              " (want true/false)");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// ---- misc IO --------------------------------------------------------------

void write_text_file(const std::string& path, const std::string& text) {
  binio::write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text_file(const std::string& path) {
  const auto bytes = binio::read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

std::vector<int> read_labels_file(const std::string& path) {
  std::istringstream in(read_text_file(path));
  std::vector<int> labels;
  std::string tok;
  while (in >> tok) {
    char* end = nullptr;
    const long v = std::strtol(tok.c_str(), &end, 10);
    if (end != tok.c_str() + tok.size() || v < 0)
      throw IoError(path + ": bad label '" + tok + "'");
    labels.push_back(static_cast<int>(v));
  }
  return labels;
}

std::pair<double, double> read_norm_file(const std::string& path) {
  std::istringstream in(read_text_file(path));
  std::string mu_key, sd_key;
  double mu = 0, sd = 1;
  if (!(in >> mu_key >> mu >> sd_key >> sd) || mu_key != "mu" || sd_key != "sd" ||
      !std::isfinite(mu) || !(sd > 0)) {
    throw IoError(path + ": expected 'mu <value>' and 'sd <value>' lines");
  }
  return {mu, sd};
}

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

// ---- validation -------------------------------------------------------------

void validate(const RunConfig& cfg) {
  if (cfg.victim != "fc2" && cfg.victim != "convnet-s")
    throw std::invalid_argument("victim must be fc2 or convnet-s, got '" + cfg.victim + "'");
  if (cfg.attack != "cpa" && cfg.attack != "cpa-fi" && cfg.attack != "cpa-fi-gm" &&
      cfg.attack != "gm")
    throw std::invalid_argument("attack must be cpa, cpa-fi, cpa-fi-gm or gm, got '" +
                                cfg.attack + "'");
  if ((cfg.attack == "cpa-fi" || cfg.attack == "cpa-fi-gm") && cfg.victim != "convnet-s")
    throw std::invalid_argument("attack " + cfg.attack +
                                " inverts embeddings and requires victim=convnet-s");
  if (cfg.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (cfg.dataset.empty() || cfg.dataset == "cifar10")
    throw std::invalid_argument(
        "dataset must be 'synthetic' or a path to a CIFAR-10 batch file");
  if (cfg.dataset == "synthetic" && cfg.synth_classes < 2)
    throw std::invalid_argument("synth.classes must be at least 2");
  if (cfg.dp_sigma < 0) throw std::invalid_argument("dp.sigma must be nonnegative");
  if (cfg.output_dir.empty()) throw std::invalid_argument("output_dir must be set");
}

void warn_lambda_range(const RunConfig& cfg, std::ostream& err) {
  // The tuning sweep covers [1e-5, 10]; values outside it are legal but were
  // never validated, so flag them.
  std::vector<std::pair<const char*, double>> used;
  if (cfg.attack == "cpa" || cfg.attack == "cpa-fi" || cfg.attack == "cpa-fi-gm") {
    used.emplace_back("cpa.lambda_ne", cfg.cpa_lambda_ne);
    used.emplace_back("cpa.lambda_mi", cfg.cpa_lambda_mi);
    if (cfg.victim == "fc2") {
      used.emplace_back("cpa.lambda_tv", cfg.cpa_lambda_tv);
    } else {
      used.emplace_back("cpa.lambda_sp", cfg.cpa_lambda_sp);
      used.emplace_back("cpa.lambda_sr", cfg.cpa_lambda_sr);
    }
  }
  if (cfg.attack == "cpa-fi" || cfg.attack == "cpa-fi-gm" || cfg.attack == "gm")
    used.emplace_back("fi.lambda_tv", cfg.fi_lambda_tv);
  if (cfg.attack == "cpa-fi-gm") used.emplace_back("fi.lambda_gm", cfg.fi_lambda_gm);

  for (const auto& [name, v] : used)
    if (v > 0 && (v < 1e-5 || v > 10.0))
      err << "warning: " << name << " = " << fmt_f64(v)
          << " is outside the tuned range [1e-05, 10]\n";
}

// ---- experiment setup ---------------------------------------------------------

struct Workbench {
  nets::VictimModel model;
  Matrix batch;  // raw [0,1] pixels; victims see (batch - norm_mu) / norm_sd
  std::vector<int> labels;
  Shape3 shape;
  std::size_t classes = 0;
  std::size_t batch_start = 0;  // absolute dataset row of the first batch sample
  double norm_mu = 0;
  double norm_sd = 1;
};

// An fc2 victim trains poorly on raw pixels (the shared positive offset
// dominates the first layer), so its inputs are standardized with scalar
// stats taken from the training slice. The conv stack is fine on raw
// pixels, and feature inversion wants the plain [0,1] box, so convnet-s
// keeps the identity transform.
void fill_norm_stats(Workbench& wb, const RunConfig& cfg, const evalio::Dataset& ds) {
  if (cfg.victim != "fc2") return;
  if (cfg.victim_train == 0) {
    // No training slice to measure; fall back to nominal synthetic stats.
    wb.norm_mu = 0.45;
    wb.norm_sd = 0.2;
    return;
  }
  const std::size_t count = cfg.victim_train * wb.shape.numel();
  double mu = 0;
  for (std::size_t i = 0; i < count; ++i) mu += ds.images.data()[i];
  mu /= static_cast<double>(count);
  double var = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const double d = ds.images.data()[i] - mu;
    var += d * d;
  }
  wb.norm_mu = mu;
  wb.norm_sd = std::max(std::sqrt(var / static_cast<double>(count)), 1e-8);
}

Matrix standardized(const Matrix& x, double mu, double sd) {
  Matrix out = x;
  if (mu != 0 || sd != 1)
    for (double& v : out.data()) v = (v - mu) / sd;
  return out;
}

Workbench prepare(const RunConfig& cfg, std::uint64_t run) {
  const std::size_t needed =
      cfg.victim_train + (run + 1) * static_cast<std::size_t>(cfg.batch_size);

  evalio::Dataset ds;
  std::size_t classes;
  if (cfg.dataset == "synthetic") {
    // Sample i is the same for any dataset length, so run slices are stable.
    ds = evalio::synth_dataset(needed, kImageShape, cfg.synth_classes,
                               SeededRng(cfg.seed).derive(kTagData).seed());
    classes = cfg.synth_classes;
  } else {
    ds = evalio::load_cifar10(cfg.dataset);
    classes = 10;
    if (ds.size() < needed)
      throw std::invalid_argument("dataset " + cfg.dataset + " has " +
                                  std::to_string(ds.size()) + " samples but run " +
                                  std::to_string(run) + " needs " + std::to_string(needed));
  }

  Workbench wb;
  wb.shape = kImageShape;
  wb.classes = classes;
  fill_norm_stats(wb, cfg, ds);

  SeededRng init_rng = SeededRng(cfg.seed).derive(kTagVictimInit);
  if (cfg.victim == "fc2")
    wb.model = nets::Fc2Params::init(kImageShape.numel(), cfg.victim_hidden, classes, init_rng);
  else
    wb.model = nets::ConvNetParams::init_s(classes, init_rng);

  if (cfg.victim_epochs > 0 && cfg.victim_train > 0) {
    Matrix train_x(cfg.victim_train, kImageShape.numel());
    std::vector<int> train_y(cfg.victim_train);
    for (std::size_t i = 0; i < cfg.victim_train; ++i) {
      const auto row = ds.images.row(i);
      for (std::size_t j = 0; j < row.size(); ++j)
        train_x.row_ptr(i)[j] = (row[j] - wb.norm_mu) / wb.norm_sd;
      train_y[i] = ds.labels[i];
    }
    const std::size_t tb = std::max<std::size_t>(
        1, std::min<std::size_t>(cfg.victim_batch, cfg.victim_train));
    const std::uint64_t tseed = SeededRng(cfg.seed).derive(kTagTrain).seed();
    if (auto* fc2 = std::get_if<nets::Fc2Params>(&wb.model))
      nets::train_fc2(*fc2, train_x, train_y, cfg.victim_epochs, tb, cfg.victim_lr, tseed);
    else
      nets::train_convnet(std::get<nets::ConvNetParams>(wb.model), train_x, train_y,
                          cfg.victim_epochs, tb, cfg.victim_lr, tseed);
  }

  wb.batch_start = cfg.victim_train + run * static_cast<std::size_t>(cfg.batch_size);
  wb.batch = Matrix(cfg.batch_size, kImageShape.numel());
  wb.labels.resize(cfg.batch_size);
  for (std::size_t i = 0; i < cfg.batch_size; ++i) {
    const auto row = ds.images.row(wb.batch_start + i);
    std::copy(row.begin(), row.end(), wb.batch.row_ptr(i));
    wb.labels[i] = ds.labels[wb.batch_start + i];
  }
  return wb;
}

fedsim::GradientBundle capture_bundle(const RunConfig& cfg, const Workbench& wb,
                                      std::uint64_t run) {
  fedsim::GradientBundle bundle =
      fedsim::capture(wb.model, standardized(wb.batch, wb.norm_mu, wb.norm_sd), wb.labels);
  if (cfg.dp_sigma > 0) {
    const std::uint64_t dseed = sub_seed(run_seed(cfg, run), kTagDp);
    bundle = fedsim::apply_dp(bundle, cfg.dp_sigma, dseed, cfg.dp_delta);
  }
  return bundle;
}

// ---- attack dispatch ------------------------------------------------------------

struct AttackInputs {
  const nets::VictimModel& model;
  const fedsim::GradientBundle& bundle;
  const Matrix& truth;               // raw [0,1] batch pixels
  const std::vector<int>& labels;
  double norm_mu = 0;                // input transform the victim was fed through
  double norm_sd = 1;
};

struct AttackOutcome {
  Matrix recovered;                  // rows scored against truth_used
  Matrix truth_used;                 // pixels or true embeddings
  bool pixel_domain = false;
  Shape3 metric_shape;
  evalio::MatchResult match;
  evalio::AttackReport report;       // wall_time_sec filled by the caller
};

std::uint64_t capped_iters(std::uint64_t iters, bool fast) {
  return fast ? std::min<std::uint64_t>(iters, 2500) : iters;
}

cpa::MixedSignalMatrix mixture_from_bundle(const fedsim::GradientBundle& bundle,
                                           const std::string& layer,
                                           const std::optional<Shape3>& hint) {
  const numerics::Tensor* t = bundle.layer(layer);
  if (t == nullptr || t->dims.size() != 2)
    throw std::invalid_argument("bundle has no rank-2 layer '" + layer +
                                "'; was it captured with this victim?");
  return cpa::MixedSignalMatrix{t->as_matrix(), layer, hint};
}

cpa::AttackConfig make_cpa_config(const RunConfig& cfg, bool embedding, std::uint64_t seed) {
  cpa::AttackConfig a;
  if (embedding) {
    a.mode = cpa::AttackMode::kEmbedding;
    a.lambda_sp = cfg.cpa_lambda_sp;
    a.lambda_sr = cfg.cpa_lambda_sr;
  } else {
    a.mode = cpa::AttackMode::kImage;
    a.lambda_tv = cfg.cpa_lambda_tv;
  }
  a.lambda_ne = cfg.cpa_lambda_ne;
  a.lambda_mi = cfg.cpa_lambda_mi;
  a.temperature_t = cfg.cpa_t;
  a.negentropy_a = cfg.cpa_a;
  a.iters = capped_iters(cfg.cpa_iters, cfg.fast);
  a.lr = cfg.cpa_lr;
  a.seed = seed;
  return a;
}

inversion::InversionConfig make_inv_config(const RunConfig& cfg, double lambda_gm,
                                           std::uint64_t seed) {
  inversion::InversionConfig ic;
  ic.lambda_tv = cfg.fi_lambda_tv;
  ic.lambda_gm = lambda_gm;
  ic.iters = capped_iters(cfg.fi_iters, cfg.fast);
  ic.lr = cfg.fi_lr;
  ic.seed = seed;
  ic.labels_known = cfg.fi_labels_known;
  return ic;
}

AttackOutcome attack_once(const RunConfig& cfg, const AttackInputs& in) {
  const std::size_t n = cfg.batch_size;
  if (in.bundle.batch_size_claimed != n)
    throw std::invalid_argument("bundle claims batch size " +
                                std::to_string(in.bundle.batch_size_claimed) +
                                " but config says " + std::to_string(n));
  const auto* fc2 = std::get_if<nets::Fc2Params>(&in.model);
  const auto* conv = std::get_if<nets::ConvNetParams>(&in.model);
  if (cfg.victim == "fc2" && fc2 == nullptr)
    throw std::invalid_argument("checkpoint does not hold an fc2 victim");
  if (cfg.victim == "convnet-s" && conv == nullptr)
    throw std::invalid_argument("checkpoint does not hold a convnet-s victim");

  const std::uint64_t rseed = run_seed(cfg, cfg.run_index);

  AttackOutcome out;
  if (cfg.attack == "cpa" && fc2 != nullptr) {
    const auto mixed = mixture_from_bundle(in.bundle, "fc1.weight", kImageShape);
    const auto acfg = make_cpa_config(cfg, false, sub_seed(rseed, kTagCpa));
    out.recovered = cpa::cpa_image(mixed, acfg, n).sources;
    out.truth_used = in.truth;
    out.pixel_domain = true;
    out.metric_shape = kImageShape;
  } else if (cfg.attack == "cpa") {
    const auto mixed = mixture_from_bundle(in.bundle, nets::ConvNetParams::target_layer(),
                                           std::nullopt);
    const auto acfg = make_cpa_config(cfg, true, sub_seed(rseed, kTagCpa));
    out.recovered = cpa::embedding_estimates(cpa::cpa_embedding(mixed, acfg, n));
    out.truth_used = nets::convnet_embedding(*conv, in.truth);
    out.pixel_domain = false;
    out.metric_shape = Shape3{1, 1, conv->embedding_dim()};
  } else if (cfg.attack == "cpa-fi" || cfg.attack == "cpa-fi-gm") {
    const auto mixed = mixture_from_bundle(in.bundle, nets::ConvNetParams::target_layer(),
                                           std::nullopt);
    const auto acfg = make_cpa_config(cfg, true, sub_seed(rseed, kTagCpa));
    const Matrix z_hat = cpa::embedding_estimates(cpa::cpa_embedding(mixed, acfg, n));
    if (in.labels.size() != n)
      throw std::invalid_argument("attack " + cfg.attack + " needs " + std::to_string(n) +
                                  " labels, got " + std::to_string(in.labels.size()));
    const double lgm = cfg.attack == "cpa-fi-gm" ? cfg.fi_lambda_gm : 0.0;
    const auto icfg = make_inv_config(cfg, lgm, sub_seed(rseed, kTagFi));
    out.recovered = inversion::feature_invert_gm(*conv, z_hat, in.bundle, in.labels, icfg);
    out.truth_used = in.truth;
    out.pixel_domain = true;
    out.metric_shape = conv->input_shape;
  } else {  // gm
    auto icfg = make_inv_config(cfg, 0.0, sub_seed(rseed, kTagGm));
    // The dummy batch lives in the victim's input domain, so the [0,1]
    // pixel box maps through the capture-time standardization.
    icfg.pixel_lo = (0.0 - in.norm_mu) / in.norm_sd;
    icfg.pixel_hi = (1.0 - in.norm_mu) / in.norm_sd;
    std::optional<std::vector<int>> lbl;
    if (cfg.fi_labels_known) {
      if (in.labels.size() != n)
        throw std::invalid_argument("attack gm with fi.labels_known needs " +
                                    std::to_string(n) + " labels, got " +
                                    std::to_string(in.labels.size()));
      lbl = in.labels;
    }
    out.recovered =
        inversion::gradient_match(in.model, in.bundle, n, lbl, icfg, kImageShape).images;
    out.truth_used = in.truth;
    out.pixel_domain = true;
    out.metric_shape = kImageShape;
  }

  // Image rows are matched on centered values (a correlation); embeddings are
  // nonnegative and sparse, so they match on the raw direction.
  if (out.pixel_domain)
    out.match = evalio::hungarian_match(evalio::center_rows(out.recovered),
                                        evalio::center_rows(out.truth_used));
  else
    out.match = evalio::hungarian_match(out.recovered, out.truth_used);

  out.report.attack_id = cfg.attack;
  out.report.config = config_snapshot(cfg);
  out.report.seed = cfg.seed;
  for (std::size_t i = 0; i < out.recovered.rows(); ++i) {
    evalio::SampleMetrics sm;
    sm.abs_cos = out.match.per_pair_abs_cos[i];
    if (out.match.permutation[i] != evalio::kUnmatched) {
      const auto truth_row = out.truth_used.row(out.match.permutation[i]);
      const auto fit = evalio::fit_affine(out.recovered.row(i), truth_row);
      sm.psnr = evalio::psnr(fit, truth_row);
      sm.ssim = evalio::ssim(fit, truth_row, out.metric_shape);
    }
    out.report.samples.push_back(sm);
  }
  return out;
}

// ---- manifests ------------------------------------------------------------------

std::string manifest_header(const RunConfig& cfg, const std::string& command) {
  std::string text = "gradsep manifest v1\ncommand " + command + "\n";
  text += serialize_config(cfg);
  return text;
}

// ---- commands ---------------------------------------------------------------------

int cmd_capture(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  validate(cfg);
  warn_lambda_range(cfg, err);
  const auto t0 = std::chrono::steady_clock::now();

  const Workbench wb = prepare(cfg, cfg.run_index);
  const fedsim::GradientBundle bundle = capture_bundle(cfg, wb, cfg.run_index);

  ensure_dir(cfg.output_dir);
  const std::string dir = cfg.output_dir + "/";
  fedsim::save_bundle(dir + "bundle.bin", bundle);
  nets::save_checkpoint(dir + "victim.ckpt", wb.model);
  cpa::save_recovered(dir + "truth.bin", wb.batch);
  std::string labels_text;
  for (int l : wb.labels) labels_text += std::to_string(l) + "\n";
  write_text_file(dir + "labels.txt", labels_text);
  write_text_file(dir + "norm.txt",
                  "mu " + fmt_f64(wb.norm_mu) + "\nsd " + fmt_f64(wb.norm_sd) + "\n");

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::string man = manifest_header(cfg, "capture");
  man += "classes " + std::to_string(wb.classes) + "\n";
  man += "batch_rows " + std::to_string(wb.batch_start) + " " +
         std::to_string(wb.batch_start + cfg.batch_size) + "\n";
  man += "norm.mu " + fmt_f64(wb.norm_mu) + "\nnorm.sd " + fmt_f64(wb.norm_sd) + "\n";
  man += std::string("dp.applied ") + (bundle.dp_meta ? "true" : "false") + "\n";
  if (bundle.dp_meta)
    man += "dp.epsilon " +
           fmt_f64(fedsim::dp_epsilon(cfg.dp_sigma, cfg.dp_delta, cfg.batch_size)) + "\n";
  for (const char* a : {"bundle.bin", "victim.ckpt", "truth.bin", "labels.txt", "norm.txt"})
    man += std::string("artifact ") + a + "\n";
  man += "wall_time_sec " + fmt_f64(wall) + "\n";
  write_text_file(dir + "capture_manifest.txt", man);

  char line[256];
  std::snprintf(line, sizeof line,
                "captured %s batch of %u (rows %zu..%zu) into %s (%.2f s)\n",
                cfg.victim.c_str(), cfg.batch_size, wb.batch_start,
                wb.batch_start + cfg.batch_size, cfg.output_dir.c_str(), wall);
  out << line;
  if (bundle.dp_meta)
    out << "dp defense active: sigma " << fmt_f64(cfg.dp_sigma) << ", epsilon "
        << fmt_f64(fedsim::dp_epsilon(cfg.dp_sigma, cfg.dp_delta, cfg.batch_size)) << "\n";
  return 0;
}

int cmd_attack(const RunConfig& cfg, const std::string& bundle_path, std::ostream& out,
               std::ostream& err) {
  validate(cfg);
  warn_lambda_range(cfg, err);

  const std::string dir = cfg.output_dir + "/";
  const fedsim::GradientBundle bundle = fedsim::load_bundle(bundle_path);
  const nets::VictimModel model = nets::load_checkpoint(dir + "victim.ckpt");
  const Matrix truth = cpa::load_recovered(dir + "truth.bin");
  const std::vector<int> labels = read_labels_file(dir + "labels.txt");
  const auto [norm_mu, norm_sd] = read_norm_file(dir + "norm.txt");
  if (truth.rows() != cfg.batch_size)
    throw IoError(dir + "truth.bin holds " + std::to_string(truth.rows()) +
                  " rows but config says batch_size " + std::to_string(cfg.batch_size));

  const auto t0 = std::chrono::steady_clock::now();
  AttackOutcome res = attack_once(cfg, {model, bundle, truth, labels, norm_mu, norm_sd});
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.report.wall_time_sec = wall;

  ensure_dir(cfg.output_dir);
  evalio::save_report(dir + "report.txt", res.report);
  cpa::save_recovered(dir + "recovered.bin", res.recovered);

  bool wrote_montage = false;
  if (res.pixel_domain) {
    // Truth row on top, its matched recovery (display-rescaled) below.
    const std::size_t n = res.recovered.rows();
    Matrix stack(2 * n, res.recovered.cols());
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = res.match.permutation[i];
      if (j != evalio::kUnmatched) {
        const auto t = res.truth_used.row(j);
        std::copy(t.begin(), t.end(), stack.row_ptr(i));
      }
      const auto disp = evalio::rescale_unit(res.recovered.row(i));
      std::copy(disp.begin(), disp.end(), stack.row_ptr(n + i));
    }
    evalio::write_ppm(dir + "montage.ppm",
                      evalio::montage(stack, res.metric_shape, n));
    wrote_montage = true;
  }

  const auto mean = res.report.mean(), med = res.report.median();
  std::string man = manifest_header(cfg, "attack");
  man += "bundle " + bundle_path + "\n";
  man += "mean_abs_cos " + fmt_f64(mean.abs_cos) + "\n";
  man += "median_abs_cos " + fmt_f64(med.abs_cos) + "\n";
  man += "mean_psnr " + fmt_f64(mean.psnr) + "\n";
  man += "mean_ssim " + fmt_f64(mean.ssim) + "\n";
  for (const char* a : {"report.txt", "recovered.bin"})
    man += std::string("artifact ") + a + "\n";
  if (wrote_montage) man += "artifact montage.ppm\n";
  man += "wall_time_sec " + fmt_f64(wall) + "\n";
  write_text_file(dir + "attack_manifest.txt", man);

  char line[256];
  std::snprintf(line, sizeof line,
                "attack %s on %s batch %u: mean |cos| %.4f, median %.4f, mean psnr %.2f "
                "(%.2f s)\n",
                cfg.attack.c_str(), cfg.victim.c_str(), cfg.batch_size, mean.abs_cos,
                med.abs_cos, mean.psnr, wall);
  out << line;
  return 0;
}

int cmd_sweep(const RunConfig& cfg, const std::vector<std::string>& params,
              std::ostream& out, std::ostream& err) {
  validate(cfg);
  warn_lambda_range(cfg, err);
  if (params.empty())
    throw std::invalid_argument("sweep needs --params with one or more keys");
  static const std::set<std::string> sweepable = {
      "cpa.lambda_ne", "cpa.lambda_tv", "cpa.lambda_mi", "cpa.lambda_sp", "cpa.lambda_sr",
      "cpa.t",         "fi.lambda_tv",  "fi.lambda_gm"};
  for (const auto& p : params)
    if (!sweepable.count(p))
      throw std::invalid_argument("'" + p + "' is not a sweepable key");
  if (cfg.sweep_points == 0)
    throw std::invalid_argument("sweep.points must be positive");

  // Log-spaced grid over the tuning range.
  const double lg_lo = -5.0, lg_hi = 1.0;
  std::vector<double> points(cfg.sweep_points);
  for (std::size_t i = 0; i < points.size(); ++i)
    points[i] = cfg.sweep_points == 1
                    ? std::pow(10.0, lg_lo)
                    : std::pow(10.0, lg_lo + static_cast<double>(i) * (lg_hi - lg_lo) /
                                                 static_cast<double>(cfg.sweep_points - 1));

  std::size_t total = 1;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (total > 100000 / points.size())
      throw std::invalid_argument("sweep grid too large");
    total *= points.size();
  }

  // One tuning batch, disjoint from the report batches by run index.
  RunConfig base = cfg;
  base.run_index = cfg.sweep_run;
  const Workbench wb = prepare(base, base.run_index);
  const fedsim::GradientBundle bundle = capture_bundle(base, wb, base.run_index);

  auto point_config = [&](std::size_t idx) {
    RunConfig c = base;
    std::size_t rem = idx;
    for (const auto& p : params) {
      set_config_value(c, p, fmt_f64(points[rem % points.size()]));
      rem /= points.size();
    }
    return c;
  };

  std::vector<double> scores(total, 0.0);
  std::vector<std::exception_ptr> errors(total);
  const std::size_t workers = thread_budget(total);
  auto run_point = [&](std::size_t idx) {
    try {
      const RunConfig c = point_config(idx);
      scores[idx] = attack_once(c, {wb.model, bundle, wb.batch, wb.labels,
                                    wb.norm_mu, wb.norm_sd})
                        .report.mean()
                        .abs_cos;
    } catch (...) {
      errors[idx] = std::current_exception();
    }
  };
  if (workers <= 1) {
    for (std::size_t i = 0; i < total; ++i) run_point(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < total; i += workers) run_point(i);
      });
    for (auto& th : pool) th.join();
  }
  for (std::size_t i = 0; i < total; ++i)
    if (errors[i]) std::rethrow_exception(errors[i]);

  std::size_t best = 0;
  for (std::size_t i = 1; i < total; ++i)
    if (scores[i] > scores[best]) best = i;

  ensure_dir(cfg.output_dir);
  std::string doc = "# gradsep sweep winner\n# tuning batch: run " +
                    std::to_string(base.run_index) + "\n";
  for (std::size_t i = 0; i < total; ++i) {
    const RunConfig c = point_config(i);
    doc += "# point " + std::to_string(i) + ":";
    for (const auto& p : params) doc += " " + p + "=" + get_config_value(c, p);
    doc += " mean_abs_cos=" + fmt_f64(scores[i]);
    if (i == best) doc += " (winner)";
    doc += "\n";
  }
  RunConfig winner = point_config(best);
  winner.run_index = cfg.run_index;  // the winner config is for the report batches
  doc += serialize_config(winner);
  write_text_file(cfg.output_dir + "/sweep_best.txt", doc);

  out << "sweep over";
  for (const auto& p : params) out << " " << p;
  out << " (" << total << " points): best mean |cos| " << fmt_f64(scores[best]) << " at";
  for (const auto& p : params) out << " " << p << "=" << get_config_value(winner, p);
  out << "\n";
  return 0;
}

int cmd_eval(const std::vector<std::string>& paths, std::ostream& out) {
  if (paths.empty()) throw std::invalid_argument("eval needs at least one report path");

  struct Group {
    std::string attack, batch;
    std::size_t runs = 0;
    evalio::AttackReport pooled;
  };
  std::vector<Group> groups;

  auto config_lookup = [](const evalio::AttackReport& r, const std::string& key) {
    for (const auto& [k, v] : r.config)
      if (k == key) return v;
    return std::string("?");
  };

  for (const auto& path : paths) {
    const evalio::AttackReport rep = evalio::load_report(path);
    const std::string batch = config_lookup(rep, "batch_size");
    Group* g = nullptr;
    for (auto& cand : groups)
      if (cand.attack == rep.attack_id && cand.batch == batch) g = &cand;
    if (g == nullptr) {
      groups.push_back({rep.attack_id, batch, 0, {}});
      g = &groups.back();
    }
    ++g->runs;
    g->pooled.samples.insert(g->pooled.samples.end(), rep.samples.begin(),
                             rep.samples.end());
  }

  char line[256];
  std::snprintf(line, sizeof line, "%-12s %6s %5s %8s %10s %11s %10s %10s\n", "attack",
                "batch", "runs", "samples", "mean|cos|", "median|cos|", "mean-psnr",
                "mean-ssim");
  out << line;
  for (const auto& g : groups) {
    const auto mean = g.pooled.mean(), med = g.pooled.median();
    std::snprintf(line, sizeof line, "%-12s %6s %5zu %8zu %10.4f %11.4f %10.2f %10.4f\n",
                  g.attack.c_str(), g.batch.c_str(), g.runs, g.pooled.samples.size(),
                  mean.abs_cos, med.abs_cos, mean.psnr, mean.ssim);
    out << line;
  }

  // The table is meant to compare attacks at one batch size per column; call
  // out mixtures so nobody averages across sizes by accident.
  std::set<std::string> attacks;
  for (const auto& g : groups) attacks.insert(g.attack);
  for (const auto& a : attacks) {
    std::set<std::string> sizes;
    for (const auto& g : groups)
      if (g.attack == a) sizes.insert(g.batch);
    if (sizes.size() > 1)
      out << "note: attack '" << a << "' spans " << sizes.size()
          << " batch sizes; rows are per size\n";
  }
  return 0;
}

// ---- argument parsing ---------------------------------------------------------

const char* kUsageHead =
    "usage: gradsep <command> [options]\n"
    "\n"
    "commands:\n"
    "  capture   train a victim and capture one federated round\n"
    "  attack    run a recovery attack against a captured bundle\n"
    "  sweep     grid-search regularizer weights on a held-out tuning batch\n"
    "  eval      aggregate attack reports into a comparison table\n"
    "\n"
    "options:\n"
    "  --config FILE     load 'key = value' lines; flags override file values\n"
    "  --KEY=VALUE       set one config key directly (list below)\n"
    "  --bundle PATH     attack: bundle to read (default OUTPUT_DIR/bundle.bin)\n"
    "  --params K1,K2    sweep: comma-separated keys to search over [1e-5, 10]\n"
    "  --fast            cap iteration counts at 2500\n"
    "\n"
    "attack reads victim.ckpt, truth.bin and labels.txt from output_dir, which\n"
    "cmd capture writes next to bundle.bin.\n"
    "\n"
    "config keys (defaults in parentheses):\n";

std::string usage_text() {
  std::string text = kUsageHead;
  const RunConfig defaults;
  for (const auto& key : config_keys())
    text += "  " + key + " (" + get_config_value(defaults, key) + ")\n";
  return text;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

// ---- public config plumbing ------------------------------------------------------

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& spec : key_table()) keys.emplace_back(spec.name);
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const KeySpec& spec = find_key(key);
  std::visit(
      [&](auto member) {
        using T = std::remove_cvref_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<T, std::string>) {
          cfg.*member = value;
        } else if constexpr (std::is_same_v<T, bool>) {
          cfg.*member = parse_bool(value, key);
        } else if constexpr (std::is_same_v<T, double>) {
          cfg.*member = parse_double(value, key);
        } else if constexpr (std::is_same_v<T, std::uint32_t>) {
          const std::uint64_t v = parse_uint(value, key);
          if (v > std::numeric_limits<std::uint32_t>::max())
            throw std::invalid_argument("value out of range for key " + key);
          cfg.*member = static_cast<std::uint32_t>(v);
        } else {
          cfg.*member = parse_uint(value, key);
        }
      },
      spec.member);
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  const KeySpec& spec = find_key(key);
  return std::visit(
      [&](auto member) -> std::string {
        using T = std::remove_cvref_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<T, std::string>) {
          return cfg.*member;
        } else if constexpr (std::is_same_v<T, bool>) {
          return (cfg.*member) ? "true" : "false";
        } else if constexpr (std::is_same_v<T, double>) {
          return fmt_f64(cfg.*member);
        } else {
          return std::to_string(cfg.*member);
        }
      },
      spec.member);
}

std::vector<std::pair<std::string, std::string>> config_snapshot(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> snap;
  for (const auto& spec : key_table())
    snap.emplace_back(spec.name, get_config_value(cfg, spec.name));
  return snap;
}

std::string serialize_config(const RunConfig& cfg) {
  std::string text;
  for (const auto& [key, value] : config_snapshot(cfg))
    text += key + " = " + value + "\n";
  return text;
}

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": empty key");
    set_config_value(cfg, key, value);
  }
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
  apply_config_text(cfg, read_text_file(path), path);
}

// ---- entry point ------------------------------------------------------------------

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    if (args.empty()) {
      err << usage_text();
      return 2;
    }
    const std::string& cmd = args[0];
    if (cmd == "help" || cmd == "--help" || cmd == "-h") {
      out << usage_text();
      return 0;
    }
    if (cmd != "capture" && cmd != "attack" && cmd != "sweep" && cmd != "eval") {
      err << "unknown command '" << cmd << "'\n\n" << usage_text();
      return 2;
    }

    std::vector<std::string> config_files, positionals, flag_keys, flag_values;
    std::string bundle_path, params_arg;
    for (std::size_t i = 1; i < args.size(); ++i) {
      const std::string& a = args[i];
      auto take_value = [&](const std::string& flag) -> std::string {
        if (i + 1 >= args.size())
          throw std::invalid_argument("flag " + flag + " needs a value");
        return args[++i];
      };
      if (a == "--fast") {
        flag_keys.push_back("fast");
        flag_values.push_back("true");
      } else if (a == "--config") {
        config_files.push_back(take_value(a));
      } else if (a.rfind("--config=", 0) == 0) {
        config_files.push_back(a.substr(9));
      } else if (a == "--bundle") {
        bundle_path = take_value(a);
      } else if (a.rfind("--bundle=", 0) == 0) {
        bundle_path = a.substr(9);
      } else if (a == "--params") {
        params_arg = take_value(a);
      } else if (a.rfind("--params=", 0) == 0) {
        params_arg = a.substr(9);
      } else if (a.rfind("--", 0) == 0) {
        const std::string body = a.substr(2);
        const auto eq = body.find('=');
        if (eq != std::string::npos) {
          flag_keys.push_back(body.substr(0, eq));
          flag_values.push_back(body.substr(eq + 1));
        } else {
          flag_keys.push_back(body);
          flag_values.push_back(take_value(a));
        }
      } else {
        positionals.push_back(a);
      }
    }

    RunConfig cfg;
    for (const auto& f : config_files) apply_config_file(cfg, f);
    for (std::size_t i = 0; i < flag_keys.size(); ++i)
      set_config_value(cfg, flag_keys[i], flag_values[i]);

    if (cmd == "eval") return cmd_eval(positionals, out);
    if (!positionals.empty())
      throw std::invalid_argument("unexpected argument '" + positionals[0] + "'");

    if (cmd == "capture") return cmd_capture(cfg, out, err);
    if (cmd == "attack") {
      if (bundle_path.empty()) bundle_path = cfg.output_dir + "/bundle.bin";
      return cmd_attack(cfg, bundle_path, out, err);
    }
    return cmd_sweep(cfg, split_commas(params_arg), out, err);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace gradsep::cli
