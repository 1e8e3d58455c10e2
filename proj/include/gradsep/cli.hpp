#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace gradsep::cli {

// Flat key/value run configuration. Defaults are the tuned desk-scale
// settings; every field is reachable as "--key=value" on the command line or
// as a "key = value" line in a config file (flags win over files).
struct RunConfig {
  std::string victim = "fc2";         // fc2 | convnet-s
  std::string dataset = "synthetic";  // "synthetic" or a CIFAR-10 batch file
  std::uint32_t batch_size = 8;
  std::string attack = "cpa";         // cpa | cpa-fi | cpa-fi-gm | gm
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  bool fast = false;  // cap iteration counts at 2500 for quick runs

  double dp_sigma = 0.0;
  double dp_delta = 1e-5;

  // Separation attack. lambda_tv applies to image-mode runs (victim fc2),
  // lambda_sp / lambda_sr to embedding-mode runs (victim convnet-s).
  double cpa_lambda_ne = 1.0;
  double cpa_lambda_tv = 1.0;
  double cpa_lambda_mi = 0.3;
  double cpa_lambda_sp = 0.1;
  double cpa_lambda_sr = 0.3;
  double cpa_t = 3.0;
  double cpa_a = 1.0;
  std::uint64_t cpa_iters = 25000;
  double cpa_lr = 0.001;

  // Feature inversion / gradient matching.
  double fi_lambda_tv = 1e-4;
  double fi_lambda_gm = 0.1;
  std::uint64_t fi_iters = 25000;
  double fi_lr = 0.001;
  bool fi_labels_known = true;

  std::uint64_t synth_classes = 10;

  // Victim setup: the model is trained briefly before the captured round so
  // gradients come from a live network, not random initialization.
  std::uint64_t victim_hidden = 256;  // fc2 only; convnet-s is fixed
  std::uint64_t victim_train = 512;
  std::uint64_t victim_epochs = 20;
  double victim_lr = 0.001;
  std::uint64_t victim_batch = 32;

  // Which held-out batch this run captures/attacks. Batches are disjoint
  // slices after the training split, so run 0..4 give the five report
  // batches and sweep.run stays clear of them.
  std::uint64_t run_index = 0;
  std::uint64_t sweep_points = 7;
  std::uint64_t sweep_run = 99;
};

// The flat key names, in the canonical (serialization) order.
std::vector<std::string> config_keys();

// Both throw std::invalid_argument on unknown keys or unparsable values.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

// Ordered (key, value) pairs; embedded in attack reports and manifests.
std::vector<std::pair<std::string, std::string>> config_snapshot(const RunConfig& cfg);

// "key = value" lines in canonical order; reload with apply_config_text.
std::string serialize_config(const RunConfig& cfg);
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin);
void apply_config_file(RunConfig& cfg, const std::string& path);

// Entry point. args excludes argv[0]. Returns the process exit code:
// 0 ok, 2 usage error, 3 numerical failure, 4 I/O failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gradsep::cli
