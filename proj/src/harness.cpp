#include "modfed/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <zlib.h>

#include "json.hpp"
#include "modfed/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#ifndef MODFED_GIT_REV
#define MODFED_GIT_REV "unknown"
#endif

namespace modfed::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string hex32(std::uint32_t v) { return fmt::format("{:08x}", v); }

std::uint32_t crc_of(const std::string& s) {
  return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0),
                                          reinterpret_cast<const Bytef*>(s.data()),
                                          static_cast<uInt>(s.size())));
}

}  // namespace

// ---- Profiles -------------------------------------------------------------------

std::vector<std::string> profile_names() { return {"desk", "paper"}; }

ExperimentConfig profile(const std::string& name) {
  ExperimentConfig c;
  if (name == "desk") return c;
  if (name == "paper") {
    c.profile = "paper";
    c.image_size = 256;
    c.images_per_client = 200;
    c.test_images_per_client = 50;
    c.unroll_depth = 5;
    c.rounds = 220;
    c.local_epochs = 2;
    c.batch_size = 24;
    c.learning_rate = 1e-4;
    c.gamma = 0.1;
    c.center_fraction = 0.08;
    c.output_dir = "runs/paper";
    return c;
  }
  throw ConfigError(fmt::format("unknown profile '{}' (desk, paper)", name));
}

const std::array<std::vector<double>, 3>& contrast_presets() {
  static const std::array<std::vector<double>, 3> presets{
      std::vector<double>{0.6, 0.8, 1.0, 0.2},  // T1-like
      std::vector<double>{0.4, 0.6, 0.3, 1.0},  // T2-like
      std::vector<double>{0.8, 0.9, 0.7, 0.6},  // PD-like
  };
  return presets;
}

std::vector<mri::MaskPattern> scenario_masks(int scenario, int clients) {
  if (scenario != 1 && scenario != 2) throw ConfigError("scenario must be 1 or 2");
  static constexpr mri::MaskPattern kCycle[] = {mri::MaskPattern::Uniform1D, mri::MaskPattern::Random1D,
                                                mri::MaskPattern::Random2D};
  std::vector<mri::MaskPattern> out;
  for (int k = 0; k < clients; ++k) {
    out.push_back(scenario == 1 ? mri::MaskPattern::Random1D : kCycle[k % 3]);
  }
  return out;
}

net::PartitionScheme ExperimentConfig::resolved_partition() const {
  if (!partition.empty()) return net::partition_scheme_from_string(partition);
  return strategy == fed::Strategy::FedAvg || strategy == fed::Strategy::FedProx
             ? net::PartitionScheme::AllGlobal
             : net::PartitionScheme::SlamLocal;
}

std::vector<mri::MaskPattern> ExperimentConfig::resolved_masks() const {
  return client_masks.empty() ? scenario_masks(scenario, clients) : client_masks;
}

std::vector<std::vector<double>> ExperimentConfig::resolved_contrasts() const {
  if (!client_contrasts.empty()) return client_contrasts;
  std::vector<std::vector<double>> out;
  for (int k = 0; k < clients; ++k) out.push_back(contrast_presets()[static_cast<std::size_t>(k % 3)]);
  return out;
}

net::ReconConfig ExperimentConfig::recon_config() const {
  net::ReconConfig r;
  r.depth = unroll_depth;
  r.width = hidden_width;
  r.lambda_init = lambda_init;
  r.cg.max_iters = cg_max_iters;
  r.cg.tol = cg_tol;
  return r;
}

fed::FedConfig ExperimentConfig::fed_config() const {
  fed::FedConfig f;
  f.strategy = strategy;
  f.loss_mode = client_loss_mode;
  f.rounds = rounds;
  f.local_epochs = local_epochs;
  f.batch_size = batch_size;
  f.prox_mu = prox_mu;
  f.optimizer.learning_rate = learning_rate;
  f.optimizer.weight_decay = weight_decay;
  f.threads = threads;
  f.validation_metrics = validation_metrics;
  return f;
}

// ---- Parsing --------------------------------------------------------------------

namespace {

[[noreturn]] void field_error(const std::string& field, const std::string& msg) {
  throw ConfigError(fmt::format("config field '{}': {}", field, msg));
}

double as_number(const json& v, const std::string& field) {
  if (!v.is_number()) field_error(field, "expected a number");
  return v.get<double>();
}

std::int64_t as_integer(const json& v, const std::string& field) {
  if (!v.is_number_integer()) field_error(field, "expected an integer");
  return v.get<std::int64_t>();
}

std::size_t as_count(const json& v, const std::string& field) {
  const auto n = as_integer(v, field);
  if (n < 0) field_error(field, "must be >= 0");
  return static_cast<std::size_t>(n);
}

std::uint64_t as_seed(const json& v, const std::string& field) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    field_error(field, "expected a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

std::string as_string(const json& v, const std::string& field) {
  if (!v.is_string()) field_error(field, "expected a string");
  return v.get<std::string>();
}

template <typename F>
auto parsed(const std::string& field, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    field_error(field, e.what());
  }
}

using Setter = std::function<void(ExperimentConfig&, const json&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"profile", [](ExperimentConfig&, const json&) {}},
      {"strategy", [](ExperimentConfig& c, const json& v) {
         c.strategy = parsed("strategy", [&] { return fed::strategy_from_string(as_string(v, "strategy")); });
       }},
      {"client_loss_mode", [](ExperimentConfig& c, const json& v) {
         c.client_loss_mode = parsed("client_loss_mode", [&] {
           return fed::client_loss_mode_from_string(as_string(v, "client_loss_mode"));
         });
       }},
      {"clients", [](ExperimentConfig& c, const json& v) { c.clients = static_cast<int>(as_integer(v, "clients")); }},
      {"scenario", [](ExperimentConfig& c, const json& v) { c.scenario = static_cast<int>(as_integer(v, "scenario")); }},
      {"image_size", [](ExperimentConfig& c, const json& v) { c.image_size = as_count(v, "image_size"); }},
      {"images_per_client", [](ExperimentConfig& c, const json& v) { c.images_per_client = as_count(v, "images_per_client"); }},
      {"test_images_per_client", [](ExperimentConfig& c, const json& v) {
         c.test_images_per_client = as_count(v, "test_images_per_client");
       }},
      {"s2_fraction", [](ExperimentConfig& c, const json& v) { c.s2_fraction = as_number(v, "s2_fraction"); }},
      {"phantom_kind", [](ExperimentConfig& c, const json& v) {
         c.phantom_kind = parsed("phantom_kind", [&] { return mri::phantom_kind_from_string(as_string(v, "phantom_kind")); });
       }},
      {"phase_strength", [](ExperimentConfig& c, const json& v) { c.phase_strength = as_number(v, "phase_strength"); }},
      {"acceleration", [](ExperimentConfig& c, const json& v) { c.acceleration = static_cast<int>(as_integer(v, "acceleration")); }},
      {"center_fraction", [](ExperimentConfig& c, const json& v) { c.center_fraction = as_number(v, "center_fraction"); }},
      {"client_masks", [](ExperimentConfig& c, const json& v) {
         if (!v.is_array()) field_error("client_masks", "expected an array of pattern names");
         c.client_masks.clear();
         for (const auto& e : v) {
           c.client_masks.push_back(parsed("client_masks", [&] {
             return mri::mask_pattern_from_string(as_string(e, "client_masks"));
           }));
         }
       }},
      {"client_contrasts", [](ExperimentConfig& c, const json& v) {
         if (!v.is_array()) field_error("client_contrasts", "expected an array of 4-element arrays");
         c.client_contrasts.clear();
         for (const auto& e : v) {
           if (!e.is_array()) field_error("client_contrasts", "expected an array of 4-element arrays");
           std::vector<double> row;
           for (const auto& x : e) row.push_back(as_number(x, "client_contrasts"));
           c.client_contrasts.push_back(std::move(row));
         }
       }},
      {"noise_variance", [](ExperimentConfig& c, const json& v) { c.noise_variance = as_number(v, "noise_variance"); }},
      {"unroll_depth", [](ExperimentConfig& c, const json& v) { c.unroll_depth = static_cast<int>(as_integer(v, "unroll_depth")); }},
      {"hidden_width", [](ExperimentConfig& c, const json& v) { c.hidden_width = static_cast<int>(as_integer(v, "hidden_width")); }},
      {"lambda_init", [](ExperimentConfig& c, const json& v) { c.lambda_init = as_number(v, "lambda_init"); }},
      {"cg_max_iters", [](ExperimentConfig& c, const json& v) { c.cg_max_iters = static_cast<int>(as_integer(v, "cg_max_iters")); }},
      {"cg_tol", [](ExperimentConfig& c, const json& v) { c.cg_tol = as_number(v, "cg_tol"); }},
      {"rounds", [](ExperimentConfig& c, const json& v) { c.rounds = static_cast<int>(as_integer(v, "rounds")); }},
      {"local_epochs", [](ExperimentConfig& c, const json& v) { c.local_epochs = static_cast<int>(as_integer(v, "local_epochs")); }},
      {"batch_size", [](ExperimentConfig& c, const json& v) { c.batch_size = as_count(v, "batch_size"); }},
      {"learning_rate", [](ExperimentConfig& c, const json& v) { c.learning_rate = as_number(v, "learning_rate"); }},
      {"weight_decay", [](ExperimentConfig& c, const json& v) { c.weight_decay = as_number(v, "weight_decay"); }},
      {"gamma", [](ExperimentConfig& c, const json& v) { c.gamma = as_number(v, "gamma"); }},
      {"prox_mu", [](ExperimentConfig& c, const json& v) { c.prox_mu = as_number(v, "prox_mu"); }},
      {"partition", [](ExperimentConfig& c, const json& v) { c.partition = as_string(v, "partition"); }},
      {"local_params", [](ExperimentConfig& c, const json& v) {
         if (!v.is_array()) field_error("local_params", "expected an array of names");
         c.local_params.clear();
         for (const auto& e : v) c.local_params.push_back(as_string(e, "local_params"));
       }},
      {"seed", [](ExperimentConfig& c, const json& v) { c.seed = as_seed(v, "seed"); }},
      {"data_seed", [](ExperimentConfig& c, const json& v) {
         if (v.is_null()) {
           c.data_seed.reset();
         } else {
           c.data_seed = as_seed(v, "data_seed");
         }
       }},
      {"output_dir", [](ExperimentConfig& c, const json& v) { c.output_dir = as_string(v, "output_dir"); }},
      {"checkpoint_every", [](ExperimentConfig& c, const json& v) {
         c.checkpoint_every = static_cast<int>(as_integer(v, "checkpoint_every"));
       }},
      {"threads", [](ExperimentConfig& c, const json& v) { c.threads = static_cast<int>(as_integer(v, "threads")); }},
      {"validation_metrics", [](ExperimentConfig& c, const json& v) {
         if (!v.is_boolean()) field_error("validation_metrics", "expected true or false");
         c.validation_metrics = v.get<bool>();
       }},
  };
  return table;
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text, const Overrides& overrides) {
  json doc;
  try {
    doc = json_text.empty() ? json::object() : json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("config is not valid JSON: {}", e.what()));
  }
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");

  std::string profile_name = "desk";
  if (doc.contains("profile")) profile_name = as_string(doc["profile"], "profile");
  if (overrides.profile) profile_name = *overrides.profile;
  ExperimentConfig config = profile(profile_name);

  const auto& table = setters();
  for (const auto& [key, value] : doc.items()) {
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError(fmt::format("unknown config field '{}'", key));
    it->second(config, value);
  }
  if (overrides.seed) config.seed = *overrides.seed;
  if (overrides.output_dir) config.output_dir = *overrides.output_dir;
  validate(config);
  return config;
}

ExperimentConfig load_config(const std::string& path, const Overrides& overrides) {
  std::ifstream is(path);
  if (!is) throw IoError(fmt::format("cannot open config '{}'", path));
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), overrides);
}

void validate(const ExperimentConfig& c) {
  auto require = [](bool ok, const char* field, const std::string& msg) {
    if (!ok) field_error(field, msg);
  };
  require(c.clients >= 1, "clients", "must be >= 1");
  require(c.scenario == 1 || c.scenario == 2, "scenario", "must be 1 or 2");
  require(mri::is_power_of_two(c.image_size) && c.image_size >= 8, "image_size",
          "must be a power of two >= 8");
  require(c.images_per_client >= 2, "images_per_client", "must be >= 2");
  require(c.s2_fraction > 0.0 && c.s2_fraction < 1.0, "s2_fraction", "must be in (0, 1)");
  const auto n_s2 = static_cast<std::size_t>(std::lround(c.s2_fraction * static_cast<double>(c.images_per_client)));
  require(n_s2 >= 1 && n_s2 < c.images_per_client, "s2_fraction",
          "must leave at least one image in each training subset");
  require(c.phase_strength >= 0.0, "phase_strength", "must be >= 0");
  require(c.acceleration >= 1, "acceleration", "must be >= 1");
  require(c.center_fraction >= 0.0 && (c.acceleration == 1 || c.center_fraction < 1.0 / c.acceleration),
          "center_fraction", "must be in [0, 1/acceleration)");
  require(c.client_masks.empty() || c.client_masks.size() == static_cast<std::size_t>(c.clients),
          "client_masks", "needs one entry per client");
  require(c.client_contrasts.empty() || c.client_contrasts.size() == static_cast<std::size_t>(c.clients),
          "client_contrasts", "needs one entry per client");
  for (const auto& row : c.client_contrasts) {
    require(row.size() == 4, "client_contrasts", "each entry needs 4 intensities");
    for (double v : row) require(v >= 0.0 && v <= 1.0, "client_contrasts", "intensities must lie in [0, 1]");
  }
  require(c.noise_variance >= 0.0, "noise_variance", "must be >= 0");
  require(c.unroll_depth >= 1, "unroll_depth", "must be >= 1");
  require(c.hidden_width >= 1, "hidden_width", "must be >= 1");
  require(c.lambda_init > 0.0, "lambda_init", "must be > 0");
  require(c.cg_max_iters >= 1, "cg_max_iters", "must be >= 1");
  require(c.cg_tol > 0.0, "cg_tol", "must be > 0");
  require(c.rounds >= 1, "rounds", "must be >= 1");
  require(c.local_epochs >= 1, "local_epochs", "must be >= 1");
  require(c.batch_size >= 1, "batch_size", "must be >= 1");
  require(c.learning_rate > 0.0, "learning_rate", "must be > 0");
  require(c.weight_decay >= 0.0, "weight_decay", "must be >= 0");
  require(c.gamma >= 0.0, "gamma", "must be >= 0");
  require(c.prox_mu >= 0.0, "prox_mu", "must be >= 0");
  const auto scheme = parsed("partition", [&] { return c.resolved_partition(); });
  require(scheme != net::PartitionScheme::Custom || !c.local_params.empty(), "local_params",
          "CUSTOM partition needs at least one name");
  require(c.checkpoint_every >= 0, "checkpoint_every", "must be >= 0");
  require(c.threads >= 1, "threads", "must be >= 1");
  require(!c.output_dir.empty(), "output_dir", "must not be empty");
}

std::string canonical_json(const ExperimentConfig& c) {
  json j;
  j["profile"] = c.profile;
  j["strategy"] = fed::to_string(c.strategy);
  j["client_loss_mode"] = fed::to_string(c.client_loss_mode);
  j["clients"] = c.clients;
  j["scenario"] = c.scenario;
  j["image_size"] = c.image_size;
  j["images_per_client"] = c.images_per_client;
  j["test_images_per_client"] = c.test_images_per_client;
  j["s2_fraction"] = c.s2_fraction;
  j["phantom_kind"] = mri::to_string(c.phantom_kind);
  j["phase_strength"] = c.phase_strength;
  j["acceleration"] = c.acceleration;
  j["center_fraction"] = c.center_fraction;
  j["client_masks"] = json::array();
  for (auto m : c.resolved_masks()) j["client_masks"].push_back(mri::to_string(m));
  j["client_contrasts"] = c.resolved_contrasts();
  j["noise_variance"] = c.noise_variance;
  j["unroll_depth"] = c.unroll_depth;
  j["hidden_width"] = c.hidden_width;
  j["lambda_init"] = c.lambda_init;
  j["cg_max_iters"] = c.cg_max_iters;
  j["cg_tol"] = c.cg_tol;
  j["rounds"] = c.rounds;
  j["local_epochs"] = c.local_epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["weight_decay"] = c.weight_decay;
  j["gamma"] = c.gamma;
  j["prox_mu"] = c.prox_mu;
  j["partition"] = net::to_string(c.resolved_partition());
  j["local_params"] = c.local_params;
  j["seed"] = c.seed;
  j["data_seed"] = c.resolved_data_seed();
  j["output_dir"] = c.output_dir;
  j["checkpoint_every"] = c.checkpoint_every;
  j["threads"] = c.threads;
  j["validation_metrics"] = c.validation_metrics;
  return j.dump();
}

std::string config_hash(const ExperimentConfig& c) {
  // The output directory does not change what is computed.
  ExperimentConfig copy = c;
  copy.output_dir = "-";
  return hex32(crc_of(canonical_json(copy)));
}

std::string data_fingerprint(const ExperimentConfig& c) {
  json j;
  j["clients"] = c.clients;
  j["image_size"] = c.image_size;
  j["images_per_client"] = c.images_per_client;
  j["test_images_per_client"] = c.test_images_per_client;
  j["s2_fraction"] = c.s2_fraction;
  j["phantom_kind"] = mri::to_string(c.phantom_kind);
  j["phase_strength"] = c.phase_strength;
  j["acceleration"] = c.acceleration;
  j["center_fraction"] = c.center_fraction;
  j["client_masks"] = json::array();
  for (auto m : c.resolved_masks()) j["client_masks"].push_back(mri::to_string(m));
  j["client_contrasts"] = c.resolved_contrasts();
  j["noise_variance"] = c.noise_variance;
  j["data_seed"] = c.resolved_data_seed();
  return hex32(crc_of(j.dump()));
}

// ---- Data -------------------------------------------------------------------------

std::vector<ClientDataset> build_datasets(const ExperimentConfig& config) {
  validate(config);
  const std::uint64_t ds = config.resolved_data_seed();
  const auto masks = config.resolved_masks();
  const auto contrasts = config.resolved_contrasts();
  const std::size_t n_train = config.images_per_client;
  const std::size_t n_test = config.test_images_per_client;
  const auto n_s2 = static_cast<std::size_t>(std::lround(config.s2_fraction * static_cast<double>(n_train)));

  std::vector<ClientDataset> out;
  for (int k = 0; k < config.clients; ++k) {
    const auto ku = static_cast<std::uint64_t>(k);
    mri::MaskSpec ms;
    ms.pattern = masks[ku];
    ms.acceleration = config.acceleration;
    ms.center_fraction = config.center_fraction;
    ms.seed = mri::mix_seed(ds, 2 * ku + 1);
    auto mask = mri::make_mask(ms, config.image_size, config.image_size);

    mri::PhantomSpec ps;
    ps.kind = config.phantom_kind;
    ps.size = config.image_size;
    ps.contrast = contrasts[ku];
    ps.phase_strength = config.phase_strength;
    ps.seed = mri::mix_seed(ds, 2 * ku);
    auto records = mri::make_phantoms(ps, n_train + n_test, mask);
    if (config.noise_variance > 0.0) {
      for (std::size_t i = 0; i < records.size(); ++i) {
        records[i].kspace = mri::add_noise(records[i].kspace, config.noise_variance,
                                           mri::mix_seed(records[i].seed, 0x6e6f697365ULL));
      }
    }

    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mri::mix_seed(ds, 1000 + ku));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::string> split(n_train + n_test, "s1");
    for (std::size_t i = 0; i < n_s2; ++i) split[order[i]] = "s2";
    for (std::size_t i = n_train; i < n_train + n_test; ++i) split[i] = "test";

    ClientDataset cd;
    cd.mask = mask;
    for (std::size_t i = 0; i < records.size(); ++i) {
      fed::Sample s;
      s.input = mri::to_channels(mri::adjoint_op(records[i].kspace, mask));
      s.target = mri::to_channels(records[i].truth);
      s.mask = mask;
      if (split[i] == "s1") {
        cd.train.s1.push_back(std::move(s));
      } else if (split[i] == "s2") {
        cd.train.s2.push_back(std::move(s));
      } else {
        cd.test.push_back(std::move(s));
      }
      cd.entries.push_back(mri::DatasetEntry{std::move(records[i]), k, split[i]});
    }
    out.push_back(std::move(cd));
  }
  return out;
}

// ---- Running ----------------------------------------------------------------------

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

double ExperimentResult::mean_test_psnr() const {
  double s = 0.0;
  for (const auto& t : test) s += t.psnr;
  return test.empty() ? 0.0 : s / static_cast<double>(test.size());
}

double ExperimentResult::mean_zero_filled_psnr() const {
  double s = 0.0;
  for (const auto& t : test) s += t.zero_filled_psnr;
  return test.empty() ? 0.0 : s / static_cast<double>(test.size());
}

double ExperimentResult::mean_round_loss(int round) const {
  if (round < 1 || static_cast<std::size_t>(round) > reports.size()) {
    throw ContractError(fmt::format("no report for round {}", round));
  }
  const auto& r = reports[static_cast<std::size_t>(round - 1)];
  double s = 0.0;
  for (const auto& c : r.clients) s += c.loss_s1;
  return s / static_cast<double>(r.clients.size());
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
  os << text;
  if (!os) throw IoError(fmt::format("failed writing '{}'", path.string()));
}

std::string num(double v) { return fmt::format("{:.12g}", v); }

json gen_json(const metrics::GenReport& g) {
  json j;
  j["L_S"] = g.train_error;
  j["L_D"] = g.test_error ? json(*g.test_error) : json("NA");
  j["p"] = g.param_count;
  j["m"] = g.sample_count;
  return j;
}

std::vector<double> sample_losses(const fed::Objective& objective, const ParamSet& params,
                                  std::span<const fed::Sample> samples) {
  std::vector<double> out;
  for (const auto& s : samples) out.push_back(objective.loss(params, s, s.target, 0.0, nullptr));
  return out;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config) {
  validate(config);
  tune_allocator();
  const auto started = std::chrono::steady_clock::now();
  const fs::path out_dir(config.output_dir);
  std::error_code ec;
  fs::create_directories(out_dir / "checkpoints", ec);
  if (ec) throw IoError(fmt::format("cannot create '{}': {}", out_dir.string(), ec.message()));

  json manifest;
  manifest["config"] = json::parse(canonical_json(config));
  manifest["config_hash"] = config_hash(config);
  manifest["data_fingerprint"] = data_fingerprint(config);
  manifest["git_rev"] = MODFED_GIT_REV;
  manifest["format"] = 1;
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");

  auto datasets = build_datasets(config);
  {
    std::vector<mri::DatasetEntry> entries;
    for (const auto& d : datasets) entries.insert(entries.end(), d.entries.begin(), d.entries.end());
    mri::write_dataset((out_dir / "dataset.bin").string(), entries);
  }

  const net::ReconConfig recon = config.recon_config();
  const fed::ReconObjective objective(recon);
  ParamSet init = net::make_params(recon, mri::mix_seed(config.seed, 0x6d6f64656cULL));
  net::partition_params(init, net::PartitionSpec{config.resolved_partition(), config.local_params});

  std::vector<fed::ClientSetup> setups;
  for (std::size_t k = 0; k < datasets.size(); ++k) {
    setups.push_back(fed::ClientSetup{datasets[k].train, config.gamma, mri::mix_seed(config.seed, 100 + k)});
  }

  ExperimentResult result;
  result.output_dir = out_dir.string();

  // L_S before training, for the generalization report.
  {
    std::vector<double> train, test;
    for (const auto& d : datasets) {
      for (double l : sample_losses(objective, init, d.train.s1)) train.push_back(l);
      for (double l : sample_losses(objective, init, d.train.s2)) train.push_back(l);
      for (double l : sample_losses(objective, init, d.test)) test.push_back(l);
    }
    result.gen_untrained = metrics::gen_report(init, train, test);
  }

  std::ofstream csv(out_dir / "metrics.csv", std::ios::binary);
  if (!csv) throw IoError("cannot open metrics.csv for writing");
  csv << "round,client,loss_s1,loss_s2,loss_server,alpha,psnr_val,ssim_val\n";
  auto on_round = [&](const fed::RoundReport& r, const fed::ServerState& server,
                      std::span<const fed::ClientState>) {
    for (const auto& c : r.clients) {
      csv << fmt::format("{},{},{},{},{},{},{},{}\n", r.round, c.client, num(c.loss_s1), num(c.loss_s2),
                         num(c.loss_server), num(c.alpha), num(c.psnr_val), num(c.ssim_val));
    }
    csv.flush();
    if (config.checkpoint_every > 0 && r.round % config.checkpoint_every == 0) {
      net::save_checkpoint((out_dir / "checkpoints" / fmt::format("server_round{:04}.ckpt", r.round)).string(),
                           server.model);
    }
  };
  fed::FederationResult fr = fed::run_federation(objective, init, setups, config.fed_config(), on_round);
  csv.close();
  result.reports = fr.reports;

  net::save_checkpoint((out_dir / "checkpoints" / "server_final.ckpt").string(), fr.server);
  for (std::size_t k = 0; k < fr.personalized.size(); ++k) {
    net::save_checkpoint((out_dir / "checkpoints" / fmt::format("client{}_final.ckpt", k)).string(),
                         fr.personalized[k]);
  }

  std::string test_csv = "client,image,psnr,ssim,zero_filled_psnr,zero_filled_ssim,loss\n";
  std::vector<double> train_losses, test_losses;
  for (std::size_t k = 0; k < datasets.size(); ++k) {
    const ParamSet& model = fr.personalized[k];
    for (double l : sample_losses(objective, model, datasets[k].train.s1)) train_losses.push_back(l);
    for (double l : sample_losses(objective, model, datasets[k].train.s2)) train_losses.push_back(l);
    ClientTestScores cs;
    cs.client = static_cast<int>(k);
    const auto& test = datasets[k].test;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const ad::Tensor recon_img = objective.predict(model, test[i]);
      const auto sc = metrics::score(recon_img, test[i].target);
      const auto zf = metrics::score(test[i].input, test[i].target);
      ad::Tensor diff = recon_img;
      for (std::size_t j = 0; j < diff.size(); ++j) diff[j] -= test[i].target[j];
      const double loss = ad::norm2(diff);
      test_losses.push_back(loss);
      test_csv += fmt::format("{},{},{},{},{},{},{}\n", k, i, num(sc.psnr), num(sc.ssim), num(zf.psnr),
                              num(zf.ssim), num(loss));
      cs.psnr += sc.psnr;
      cs.ssim += sc.ssim;
      cs.zero_filled_psnr += zf.psnr;
      cs.zero_filled_ssim += zf.ssim;
      cs.loss += loss;
    }
    if (!test.empty()) {
      const double n = static_cast<double>(test.size());
      cs.psnr /= n;
      cs.ssim /= n;
      cs.zero_filled_psnr /= n;
      cs.zero_filled_ssim /= n;
      cs.loss /= n;
    }
    result.test.push_back(cs);
  }
  write_text(out_dir / "test_metrics.csv", test_csv);

  result.gen = metrics::gen_report(fr.server, train_losses, test_losses);
  json gen;
  gen["trained"] = gen_json(result.gen);
  gen["untrained"] = gen_json(result.gen_untrained);
  write_text(out_dir / "gen_report.json", gen.dump(2) + "\n");

  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  json summary;
  summary["strategy"] = fed::to_string(config.strategy);
  summary["partition"] = net::to_string(config.resolved_partition());
  summary["rounds"] = config.rounds;
  summary["first_round_loss"] = result.mean_round_loss(1);
  summary["last_round_loss"] = result.mean_round_loss(config.rounds);
  summary["mean_test_psnr"] = result.mean_test_psnr();
  summary["mean_zero_filled_psnr"] = result.mean_zero_filled_psnr();
  summary["clients"] = json::array();
  for (const auto& t : result.test) {
    summary["clients"].push_back({{"client", t.client},
                                  {"psnr", t.psnr},
                                  {"ssim", t.ssim},
                                  {"zero_filled_psnr", t.zero_filled_psnr},
                                  {"zero_filled_ssim", t.zero_filled_ssim},
                                  {"loss", t.loss}});
  }
  summary["gen_report"] = metrics::to_string(result.gen);
  summary["seconds"] = result.seconds;
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  return result;
}

// ---- Comparison -------------------------------------------------------------------

namespace {

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError(fmt::format("missing '{}'", path.string()));
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw IoError(fmt::format("cannot parse '{}': {}", path.string(), e.what()));
  }
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

Comparison compare_runs(const std::vector<std::string>& dirs) {
  if (dirs.empty()) throw ConfigError("compare: no run directories given");
  Comparison cmp;
  std::string fingerprint;
  std::string first;
  for (const auto& dir : dirs) {
    const fs::path d(dir);
    const json manifest = read_json(d / "manifest.json");
    const std::string fp = manifest.at("data_fingerprint").get<std::string>();
    if (fingerprint.empty()) {
      fingerprint = fp;
      first = dir;
    } else if (fp != fingerprint) {
      throw ConfigError(fmt::format(
          "compare: '{}' was run on different data (fingerprint {}, data_seed {}) than '{}' "
          "(fingerprint {})",
          dir, fp, manifest.at("config").at("data_seed").dump(), first, fingerprint));
    }

    std::ifstream is(d / "test_metrics.csv");
    if (!is) throw IoError(fmt::format("missing '{}'", (d / "test_metrics.csv").string()));
    std::string line;
    std::getline(is, line);
    std::vector<double> psnr, ssim;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells;
      std::stringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) cells.push_back(cell);
      if (cells.size() < 4) throw IoError(fmt::format("malformed row in {}/test_metrics.csv", dir));
      psnr.push_back(std::stod(cells[2]));
      ssim.push_back(std::stod(cells[3]));
    }
    const json gen = read_json(d / "gen_report.json");

    CompareRow row;
    row.run = dir;
    row.strategy = manifest.at("config").at("strategy").get<std::string>();
    row.mean_psnr = mean(psnr);
    row.median_psnr = median(psnr);
    row.mean_ssim = mean(ssim);
    row.median_ssim = median(ssim);
    row.train_error = gen.at("trained").at("L_S").get<double>();
    row.param_count = gen.at("trained").at("p").get<std::size_t>();
    cmp.rows.push_back(row);
  }

  cmp.csv = "run,strategy,mean_psnr,median_psnr,mean_ssim,median_ssim,train_error,param_count\n";
  for (const auto& r : cmp.rows) {
    cmp.csv += fmt::format("{},{},{},{},{},{},{},{}\n", r.run, r.strategy, num(r.mean_psnr), num(r.median_psnr),
                           num(r.mean_ssim), num(r.median_ssim), num(r.train_error), r.param_count);
  }

  std::size_t run_w = 3;
  for (const auto& r : cmp.rows) run_w = std::max(run_w, r.run.size());
  cmp.table = fmt::format("{:<{}}  {:<9}  {:>9}  {:>9}  {:>7}  {:>7}  {:>10}  {:>8}\n", "run", run_w, "strategy",
                          "psnr", "psnr_med", "ssim", "ssim_med", "train_err", "params");
  for (const auto& r : cmp.rows) {
    cmp.table += fmt::format("{:<{}}  {:<9}  {:>9.3f}  {:>9.3f}  {:>7.4f}  {:>7.4f}  {:>10.5f}  {:>8}\n", r.run,
                             run_w, r.strategy, r.mean_psnr, r.median_psnr, r.mean_ssim, r.median_ssim,
                             r.train_error, r.param_count);
  }
  return cmp;
}

}  // namespace modfed::harness
