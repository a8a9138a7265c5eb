#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "modfed/fed.hpp"
#include "modfed/metrics.hpp"
#include "modfed/mri.hpp"
#include "modfed/recon.hpp"

namespace modfed::harness {

// Every field is echoed into manifest.json. Configs are JSON objects whose
// keys are the field names below; unknown keys are rejected.
struct ExperimentConfig {
  std::string profile = "desk";
  fed::Strategy strategy = fed::Strategy::ModFed;
  fed::ClientLossMode client_loss_mode = fed::ClientLossMode::Literal;

  // Data
  int clients = 3;
  int scenario = 2;
  std::size_t image_size = 64;
  std::size_t images_per_client = 40;
  std::size_t test_images_per_client = 10;
  double s2_fraction = 0.2;
  mri::PhantomKind phantom_kind = mri::PhantomKind::Ellipse;
  double phase_strength = 0.6;
  int acceleration = 4;
  double center_fraction = 0.08;
  // Optional per-client overrides; otherwise derived from the scenario and
  // the built-in contrast presets.
  std::vector<mri::MaskPattern> client_masks;
  std::vector<std::vector<double>> client_contrasts;
  double noise_variance = 0.0;

  // Model
  int unroll_depth = 2;
  int hidden_width = 16;
  double lambda_init = 0.05;
  int cg_max_iters = 10;
  double cg_tol = 1e-6;

  // Training
  int rounds = 30;
  int local_epochs = 2;
  std::size_t batch_size = 4;
  double learning_rate = 6e-3;
  double weight_decay = 0.01;
  double gamma = 0.1;
  double prox_mu = 0.01;
  // Empty selects ALL_GLOBAL for FEDAVG/FEDPROX and SLAM_LOCAL otherwise.
  std::string partition;
  std::vector<std::string> local_params;

  // Run
  std::uint64_t seed = 1;
  std::optional<std::uint64_t> data_seed;
  std::string output_dir = "runs/default";
  int checkpoint_every = 0;
  int threads = 1;
  bool validation_metrics = true;

  std::uint64_t resolved_data_seed() const { return data_seed.value_or(seed); }
  net::PartitionScheme resolved_partition() const;
  std::vector<mri::MaskPattern> resolved_masks() const;
  std::vector<std::vector<double>> resolved_contrasts() const;
  net::ReconConfig recon_config() const;
  fed::FedConfig fed_config() const;
};

std::vector<std::string> profile_names();
ExperimentConfig profile(const std::string& name);

struct Overrides {
  std::optional<std::string> profile;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
};

// Profile defaults, then the JSON object, then explicit overrides. The
// profile comes from the override, else the JSON "profile" key, else desk.
ExperimentConfig parse_config(const std::string& json_text, const Overrides& overrides = {});
ExperimentConfig load_config(const std::string& path, const Overrides& overrides = {});
// Throws ConfigError naming the offending field.
void validate(const ExperimentConfig& config);

// Canonical JSON (sorted keys, every field present).
std::string canonical_json(const ExperimentConfig& config);
std::string config_hash(const ExperimentConfig& config);
// Hash of the fields that determine the generated data.
std::string data_fingerprint(const ExperimentConfig& config);

// Built-in tissue contrasts: T1-like, T2-like, PD-like.
const std::array<std::vector<double>, 3>& contrast_presets();
// Scenario 1: every client 1D_RANDOM. Scenario 2: 1D_UNIFORM, 1D_RANDOM,
// 2D_RANDOM cycling over clients.
std::vector<mri::MaskPattern> scenario_masks(int scenario, int clients);

struct ClientDataset {
  std::shared_ptr<const mri::SamplingMask> mask;
  fed::ClientData train;
  std::vector<fed::Sample> test;
  std::vector<mri::DatasetEntry> entries;
};

std::vector<ClientDataset> build_datasets(const ExperimentConfig& config);

struct ClientTestScores {
  int client = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  double zero_filled_psnr = 0.0;
  double zero_filled_ssim = 0.0;
  double loss = 0.0;
};

struct ExperimentResult {
  std::string output_dir;
  std::vector<fed::RoundReport> reports;
  std::vector<ClientTestScores> test;
  metrics::GenReport gen;
  metrics::GenReport gen_untrained;
  double seconds = 0.0;

  double mean_test_psnr() const;
  double mean_zero_filled_psnr() const;
  // Mean over clients of loss_s1 in the given 1-based round.
  double mean_round_loss(int round) const;
};

// Generates data, trains, evaluates and writes into config.output_dir:
//   manifest.json, metrics.csv, test_metrics.csv, gen_report.json,
//   summary.json, dataset.bin (+ .json), checkpoints/
ExperimentResult run_experiment(const ExperimentConfig& config);

struct CompareRow {
  std::string run;
  std::string strategy;
  double mean_psnr = 0.0;
  double median_psnr = 0.0;
  double mean_ssim = 0.0;
  double median_ssim = 0.0;
  double train_error = 0.0;
  std::size_t param_count = 0;
};

struct Comparison {
  std::vector<CompareRow> rows;
  std::string csv;
  std::string table;
};

// Reads manifests and test metrics; refuses runs with different data.
Comparison compare_runs(const std::vector<std::string>& dirs);

struct CheckResult {
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Central finite differences (step 1e-5) for every differentiable op, the
// RSLAM block and the unrolled model on 8x8 images with J = 2.
std::vector<CheckResult> gradcheck(std::uint64_t seed = 7);
// Built-in consistency checks of transforms, solver, weights and metrics.
std::vector<CheckResult> selftest(std::uint64_t seed = 11);

// Raises glibc's mmap and trim thresholds so the per-sample graphs reuse
// heap pages instead of faulting fresh ones.
void tune_allocator();

}  // namespace modfed::harness
