// Command-line front end over the C API.
#include <cstdio>
#include <cstdlib>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "modfed/modfed.h"

namespace {

struct ExperimentDeleter {
  void operator()(modfed_experiment* e) const { modfed_experiment_destroy(e); }
};
using ExperimentPtr = std::unique_ptr<modfed_experiment, ExperimentDeleter>;

int report(modfed_status s, const char* what) {
  if (s == MODFED_OK) return 0;
  std::fprintf(stderr, "modfed: %s: %s: %s\n", what, modfed_status_name(s), modfed_last_error());
  return static_cast<int>(s);
}

void print_and_free(char* text) {
  if (!text) return;
  std::fputs(text, stdout);
  modfed_string_free(text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated MRI reconstruction with adaptive aggregation"};
  app.set_version_flag("--version", std::string(modfed_version()));
  app.require_subcommand(1);

  std::string config_path;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool print_config = false;

  auto* run = app.add_subcommand("run", "train and evaluate one configuration");
  run->add_option("--config", config_path, "JSON config file");
  run->add_option("--profile", profile, "desk or paper");
  run->add_option("--seed", seed, "master seed");
  run->add_option("--out", out_dir, "output directory");
  run->add_flag("--print-config", print_config, "print the resolved config and exit");

  std::vector<std::string> dirs;
  std::string csv_path;
  auto* compare = app.add_subcommand("compare", "tabulate finished runs on the same data");
  compare->add_option("dirs", dirs, "run directories")->required();
  compare->add_option("--csv", csv_path, "also write the table as CSV");

  std::uint64_t check_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--seed", check_seed, "seed for the random inputs")->default_val(7);
  auto* selftest = app.add_subcommand("selftest", "built-in consistency checks");
  selftest->add_option("--seed", check_seed, "seed for the random inputs")->default_val(11);

  CLI11_PARSE(app, argc, argv);

  if (*run) {
    modfed_experiment* raw = nullptr;
    const char* prof = profile.empty() ? nullptr : profile.c_str();
    const modfed_status s = config_path.empty() ? modfed_experiment_create(prof, &raw)
                                                : modfed_experiment_load(config_path.c_str(), prof, &raw);
    if (int rc = report(s, "config")) return rc;
    ExperimentPtr exp(raw);
    if (seed) {
      if (int rc = report(modfed_experiment_set_seed(exp.get(), *seed), "seed")) return rc;
    }
    if (!out_dir.empty()) {
      if (int rc = report(modfed_experiment_set_output_dir(exp.get(), out_dir.c_str()), "output")) return rc;
    }
    if (print_config) {
      char* text = nullptr;
      if (int rc = report(modfed_experiment_config_json(exp.get(), &text), "config")) return rc;
      print_and_free(text);
      std::fputc('\n', stdout);
      return 0;
    }
    if (int rc = report(modfed_experiment_run(exp.get()), "run")) return rc;
    char* text = nullptr;
    if (int rc = report(modfed_experiment_summary(exp.get(), &text), "summary")) return rc;
    print_and_free(text);
    return 0;
  }

  if (*compare) {
    std::vector<const char*> ptrs;
    for (const auto& d : dirs) ptrs.push_back(d.c_str());
    char* table = nullptr;
    char* csv = nullptr;
    if (int rc = report(modfed_compare_runs(ptrs.data(), ptrs.size(), &table, &csv), "compare")) return rc;
    print_and_free(table);
    if (!csv_path.empty()) {
      std::FILE* f = std::fopen(csv_path.c_str(), "wb");
      if (!f) {
        modfed_string_free(csv);
        std::fprintf(stderr, "modfed: cannot write %s\n", csv_path.c_str());
        return MODFED_ERR_IO;
      }
      std::fputs(csv, f);
      std::fclose(f);
    }
    modfed_string_free(csv);
    return 0;
  }

  char* text = nullptr;
  const modfed_status s = *gradcheck ? modfed_gradcheck(check_seed, &text) : modfed_selftest(check_seed, &text);
  print_and_free(text);
  return report(s, *gradcheck ? "gradcheck" : "selftest");
}
