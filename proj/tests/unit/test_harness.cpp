#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "modfed/error.hpp"
#include "modfed/harness.hpp"

using namespace modfed;
using namespace modfed::harness;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("modfed_test_harness_" + name);
  fs::remove_all(d);
  return d;
}

// Seconds-scale configuration for end-to-end checks.
ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig c = parse_config(R"({
    "image_size": 16, "images_per_client": 5, "test_images_per_client": 2,
    "unroll_depth": 1, "hidden_width": 2, "rounds": 2, "local_epochs": 1, "batch_size": 2,
    "checkpoint_every": 1
  })");
  c.output_dir = out.string();
  return c;
}

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("profiles") {
  const ExperimentConfig desk = profile("desk");
  CHECK(desk.clients == 3);
  CHECK(desk.image_size == 64);
  CHECK(desk.images_per_client == 40);
  CHECK(desk.unroll_depth == 2);
  CHECK(desk.hidden_width == 16);
  CHECK(desk.rounds == 30);
  CHECK(desk.local_epochs == 2);
  CHECK(desk.batch_size == 4);
  const ExperimentConfig paper = profile("paper");
  CHECK(paper.rounds == 220);
  CHECK(paper.local_epochs == 2);
  CHECK(paper.batch_size == 24);
  CHECK(paper.gamma == 0.1);
  CHECK(paper.learning_rate == 1e-4);
  CHECK_THROWS_AS(profile("laptop"), ConfigError);
  CHECK(parse_config(R"({"profile": "paper"})").rounds == 220);
  Overrides o;
  o.profile = "desk";
  CHECK(parse_config(R"({"profile": "paper"})", o).rounds == 30);
}

TEST_CASE("scenario masks") {
  using mri::MaskPattern;
  CHECK(scenario_masks(1, 3) == std::vector<MaskPattern>(3, MaskPattern::Random1D));
  CHECK(scenario_masks(2, 3) ==
        std::vector<MaskPattern>{MaskPattern::Uniform1D, MaskPattern::Random1D, MaskPattern::Random2D});
  CHECK_THROWS_AS(scenario_masks(3, 3), ConfigError);

  ExperimentConfig c = parse_config(R"({"scenario": 1, "image_size": 16, "images_per_client": 5,
                                        "test_images_per_client": 1})");
  const auto data = build_datasets(c);
  REQUIRE(data.size() == 3);
  for (const auto& d : data) {
    CHECK(d.mask->spec().pattern == MaskPattern::Random1D);
    CHECK(d.mask->spec().acceleration == 4);
  }
}

TEST_CASE("config errors name the field") {
  CHECK(config_error(R"({"rounds": 0})").find("'rounds'") != std::string::npos);
  CHECK(config_error(R"({"learning_rate": "fast"})").find("'learning_rate'") != std::string::npos);
  CHECK(config_error(R"({"strategy": "FEDSGD"})").find("'strategy'") != std::string::npos);
  CHECK(config_error(R"({"image_size": 48})").find("'image_size'") != std::string::npos);
  CHECK(config_error(R"({"center_fraction": 0.3})").find("'center_fraction'") != std::string::npos);
  CHECK(config_error(R"({"client_masks": ["1D_RANDOM"]})").find("'client_masks'") != std::string::npos);
  CHECK(config_error(R"({"partition": "CUSTOM"})").find("'local_params'") != std::string::npos);
  CHECK(config_error(R"({"rounsd": 3})").find("unknown config field 'rounsd'") != std::string::npos);
  CHECK_FALSE(config_error("[1, 2]").empty());
  CHECK_FALSE(config_error("{not json").empty());
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), IoError);
}

TEST_CASE("partition defaults follow the strategy") {
  CHECK(parse_config(R"({"strategy": "FEDAVG"})").resolved_partition() == net::PartitionScheme::AllGlobal);
  CHECK(parse_config(R"({"strategy": "MODFED"})").resolved_partition() == net::PartitionScheme::SlamLocal);
  CHECK(parse_config(R"({"strategy": "FEDAVG", "partition": "SLAM_LOCAL"})").resolved_partition() ==
        net::PartitionScheme::SlamLocal);
}

TEST_CASE("canonical json and hashes") {
  const ExperimentConfig a = parse_config(R"({"seed": 4, "gamma": 0.2})");
  const ExperimentConfig b = parse_config(R"({"gamma": 0.2, "seed": 4})");
  CHECK(canonical_json(a) == canonical_json(b));
  CHECK(config_hash(a) == config_hash(b));

  // The canonical form parses back to the same configuration.
  CHECK(canonical_json(parse_config(canonical_json(a))) == canonical_json(a));

  ExperimentConfig moved = a;
  moved.output_dir = "elsewhere";
  CHECK(config_hash(moved) == config_hash(a));

  ExperimentConfig other = a;
  other.learning_rate = 1e-3;
  CHECK(config_hash(other) != config_hash(a));
  CHECK(data_fingerprint(other) == data_fingerprint(a));

  ExperimentConfig reseeded = a;
  reseeded.seed = 5;
  CHECK(data_fingerprint(reseeded) != data_fingerprint(a));
  reseeded.data_seed = 4;
  CHECK(data_fingerprint(reseeded) == data_fingerprint(a));
}

TEST_CASE("datasets are split and deterministic") {
  ExperimentConfig c = parse_config(R"({"image_size": 16, "images_per_client": 10, "test_images_per_client": 3})");
  const auto a = build_datasets(c);
  const auto b = build_datasets(c);
  REQUIRE(a.size() == 3);
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k].train.s1.size() == 8);
    CHECK(a[k].train.s2.size() == 2);
    CHECK(a[k].test.size() == 3);
    for (std::size_t i = 0; i < a[k].train.s1.size(); ++i) CHECK(a[k].train.s1[i].input == b[k].train.s1[i].input);
  }
  // Different clients see different tissue contrasts and masks.
  CHECK_FALSE(a[0].train.s1[0].target == a[1].train.s1[0].target);
  CHECK(a[0].mask->spec().pattern != a[2].mask->spec().pattern);

  c.noise_variance = 0.03;
  const auto noisy = build_datasets(c);
  CHECK_FALSE(noisy[0].train.s1[0].input == a[0].train.s1[0].input);
  CHECK(noisy[0].train.s1[0].target == a[0].train.s1[0].target);
}

TEST_CASE("run writes reproducible artifacts") {
  const fs::path d1 = scratch_dir("run1"), d2 = scratch_dir("run2");
  const ExperimentResult r1 = run_experiment(tiny(d1));
  const ExperimentResult r2 = run_experiment(tiny(d2));

  for (const char* f : {"manifest.json", "metrics.csv", "test_metrics.csv", "gen_report.json", "summary.json",
                        "dataset.bin", "dataset.bin.json", "checkpoints/server_final.ckpt",
                        "checkpoints/server_round0001.ckpt", "checkpoints/client2_final.ckpt"}) {
    CHECK_MESSAGE(fs::exists(d1 / f), f);
  }
  CHECK(slurp(d1 / "metrics.csv") == slurp(d2 / "metrics.csv"));
  CHECK(slurp(d1 / "test_metrics.csv") == slurp(d2 / "test_metrics.csv"));
  CHECK(r1.reports.size() == 2);
  CHECK(r1.test.size() == 3);

  const auto manifest = nlohmann::json::parse(slurp(d1 / "manifest.json"));
  CHECK(manifest.at("config_hash") == config_hash(tiny(d1)));
  CHECK(manifest.at("config").at("hidden_width") == 2);

  // Header plus one row per client and round.
  std::istringstream rows(slurp(d1 / "metrics.csv"));
  std::string line;
  int n = 0;
  while (std::getline(rows, line)) ++n;
  CHECK(n == 1 + 2 * 3);

  const auto gen = nlohmann::json::parse(slurp(d1 / "gen_report.json"));
  CHECK(gen.at("trained").at("m") == 15);
  CHECK(gen.at("trained").at("p") == net::make_params(tiny(d1).recon_config(), 0).element_count());

  SUBCASE("compare") {
    const Comparison one = compare_runs({d1.string()});
    CHECK(one.rows.size() == 1);
    CHECK(one.rows[0].strategy == "MODFED");
    const Comparison two = compare_runs({d1.string(), d2.string()});
    REQUIRE(two.rows.size() == 2);
    CHECK(two.rows[0].mean_psnr == two.rows[1].mean_psnr);
    CHECK(two.rows[0].median_ssim == two.rows[1].median_ssim);
    CHECK(two.rows[0].train_error == two.rows[1].train_error);
    CHECK(two.rows[0].param_count == two.rows[1].param_count);
    CHECK(two.csv.rfind("run,strategy,mean_psnr", 0) == 0);
    CHECK(two.table.find("MODFED") != std::string::npos);
  }

  SUBCASE("compare refuses different data") {
    const fs::path d3 = scratch_dir("run3");
    ExperimentConfig c = tiny(d3);
    c.data_seed = 99;
    c.rounds = 1;
    c.strategy = fed::Strategy::FedAvg;
    run_experiment(c);
    try {
      compare_runs({d1.string(), d3.string()});
      FAIL("expected a config error");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("different data") != std::string::npos);
    }
    fs::remove_all(d3);
  }

  CHECK_THROWS_AS(compare_runs({}), ConfigError);
  CHECK_THROWS_AS(compare_runs({(d1 / "nope").string()}), IoError);
}

TEST_CASE("empty test set reports NA") {
  const fs::path d = scratch_dir("notest");
  ExperimentConfig c = tiny(d);
  c.test_images_per_client = 0;
  c.rounds = 1;
  const ExperimentResult r = run_experiment(c);
  CHECK_FALSE(r.gen.test_error.has_value());
  const auto gen = nlohmann::json::parse(slurp(d / "gen_report.json"));
  CHECK(gen.at("trained").at("L_D") == "NA");
  fs::remove_all(d);
}

TEST_CASE("check suites pass") {
  for (const auto& c : selftest(11)) CHECK_MESSAGE(c.passed, c.name);
}
