#include "modfed/modfed.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <optional>
#include <string>

#include <fmt/format.h>

#include "modfed/error.hpp"
#include "modfed/harness.hpp"

#ifndef MODFED_VERSION
#define MODFED_VERSION "0.0.0"
#endif

struct modfed_experiment {
  modfed::harness::ExperimentConfig config;
  std::optional<modfed::harness::ExperimentResult> result;
};

namespace {

thread_local std::string g_last_error;

modfed_status status_of(modfed::ErrorKind kind) {
  using modfed::ErrorKind;
  switch (kind) {
    case ErrorKind::Config: return MODFED_ERR_CONFIG;
    case ErrorKind::Shape: return MODFED_ERR_SHAPE;
    case ErrorKind::UnsupportedSize: return MODFED_ERR_UNSUPPORTED_SIZE;
    case ErrorKind::Numeric: return MODFED_ERR_NUMERIC;
    case ErrorKind::Io: return MODFED_ERR_IO;
    case ErrorKind::Protocol: return MODFED_ERR_PROTOCOL;
    case ErrorKind::Contract: return MODFED_ERR_CONTRACT;
  }
  return MODFED_ERR_INTERNAL;
}

template <typename F>
modfed_status guarded(F&& body) {
  try {
    g_last_error.clear();
    return body();
  } catch (const modfed::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return MODFED_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return MODFED_ERR_INTERNAL;
  }
}

modfed_status fail(modfed_status s, std::string msg) {
  g_last_error = std::move(msg);
  return s;
}

char* dup_string(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

std::string report_text(const std::vector<modfed::harness::CheckResult>& checks, bool& all_passed) {
  std::string text;
  all_passed = true;
  for (const auto& c : checks) {
    all_passed = all_passed && c.passed;
    text += fmt::format("{} {:<28} {:.3e} (tol {:.0e})\n", c.passed ? "ok  " : "FAIL", c.name, c.value,
                        c.tolerance);
  }
  return text;
}

modfed::harness::Overrides profile_override(const char* profile) {
  modfed::harness::Overrides o;
  if (profile && *profile) o.profile = profile;
  return o;
}

}  // namespace

extern "C" {

const char* modfed_last_error(void) { return g_last_error.c_str(); }

const char* modfed_version(void) { return MODFED_VERSION; }

const char* modfed_status_name(modfed_status status) {
  switch (status) {
    case MODFED_OK: return "ok";
    case MODFED_ERR_CONFIG: return "config error";
    case MODFED_ERR_SHAPE: return "shape error";
    case MODFED_ERR_UNSUPPORTED_SIZE: return "unsupported size";
    case MODFED_ERR_NUMERIC: return "numeric error";
    case MODFED_ERR_IO: return "i/o error";
    case MODFED_ERR_PROTOCOL: return "protocol error";
    case MODFED_ERR_CONTRACT: return "contract violation";
    case MODFED_ERR_CHECK_FAILED: return "check failed";
    case MODFED_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

modfed_status modfed_experiment_create(const char* profile, modfed_experiment** out) {
  return modfed_experiment_from_json(nullptr, profile, out);
}

modfed_status modfed_experiment_from_json(const char* json_text, const char* profile, modfed_experiment** out) {
  if (!out) return fail(MODFED_ERR_CONTRACT, "out pointer is null");
  *out = nullptr;
  return guarded([&] {
    auto exp = std::make_unique<modfed_experiment>();
    exp->config = modfed::harness::parse_config(json_text ? json_text : "", profile_override(profile));
    *out = exp.release();
    return MODFED_OK;
  });
}

modfed_status modfed_experiment_load(const char* path, const char* profile, modfed_experiment** out) {
  if (!out || !path) return fail(MODFED_ERR_CONTRACT, "path or out pointer is null");
  *out = nullptr;
  return guarded([&] {
    auto exp = std::make_unique<modfed_experiment>();
    exp->config = modfed::harness::load_config(path, profile_override(profile));
    *out = exp.release();
    return MODFED_OK;
  });
}

void modfed_experiment_destroy(modfed_experiment* exp) { delete exp; }

modfed_status modfed_experiment_set_seed(modfed_experiment* exp, uint64_t seed) {
  if (!exp) return fail(MODFED_ERR_CONTRACT, "experiment is null");
  exp->config.seed = seed;
  exp->result.reset();
  return MODFED_OK;
}

modfed_status modfed_experiment_set_output_dir(modfed_experiment* exp, const char* dir) {
  if (!exp || !dir) return fail(MODFED_ERR_CONTRACT, "experiment or directory is null");
  if (!*dir) return fail(MODFED_ERR_CONFIG, "config field 'output_dir': must not be empty");
  exp->config.output_dir = dir;
  exp->result.reset();
  return MODFED_OK;
}

modfed_status modfed_experiment_config_json(const modfed_experiment* exp, char** out) {
  if (!exp || !out) return fail(MODFED_ERR_CONTRACT, "experiment or out pointer is null");
  return guarded([&] {
    *out = dup_string(modfed::harness::canonical_json(exp->config));
    return MODFED_OK;
  });
}

modfed_status modfed_experiment_run(modfed_experiment* exp) {
  if (!exp) return fail(MODFED_ERR_CONTRACT, "experiment is null");
  return guarded([&] {
    exp->result.reset();
    exp->result = modfed::harness::run_experiment(exp->config);
    return MODFED_OK;
  });
}

modfed_status modfed_experiment_round_count(const modfed_experiment* exp, int* out) {
  if (!exp || !out) return fail(MODFED_ERR_CONTRACT, "experiment or out pointer is null");
  if (!exp->result) return fail(MODFED_ERR_CONTRACT, "experiment has not been run");
  *out = static_cast<int>(exp->result->reports.size());
  return MODFED_OK;
}

modfed_status modfed_experiment_client_count(const modfed_experiment* exp, int* out) {
  if (!exp || !out) return fail(MODFED_ERR_CONTRACT, "experiment or out pointer is null");
  *out = exp->config.clients;
  return MODFED_OK;
}

modfed_status modfed_experiment_round_loss(const modfed_experiment* exp, int round, double* out) {
  if (!exp || !out) return fail(MODFED_ERR_CONTRACT, "experiment or out pointer is null");
  if (!exp->result) return fail(MODFED_ERR_CONTRACT, "experiment has not been run");
  return guarded([&] {
    *out = exp->result->mean_round_loss(round);
    return MODFED_OK;
  });
}

modfed_status modfed_experiment_test_psnr(const modfed_experiment* exp, int client, double* psnr,
                                          double* zero_filled_psnr) {
  if (!exp) return fail(MODFED_ERR_CONTRACT, "experiment is null");
  if (!exp->result) return fail(MODFED_ERR_CONTRACT, "experiment has not been run");
  const auto& test = exp->result->test;
  if (client < 0 || static_cast<std::size_t>(client) >= test.size()) {
    return fail(MODFED_ERR_CONTRACT, fmt::format("client {} out of range [0, {})", client, test.size()));
  }
  if (psnr) *psnr = test[static_cast<std::size_t>(client)].psnr;
  if (zero_filled_psnr) *zero_filled_psnr = test[static_cast<std::size_t>(client)].zero_filled_psnr;
  return MODFED_OK;
}

modfed_status modfed_experiment_summary(const modfed_experiment* exp, char** out) {
  if (!exp || !out) return fail(MODFED_ERR_CONTRACT, "experiment or out pointer is null");
  if (!exp->result) return fail(MODFED_ERR_CONTRACT, "experiment has not been run");
  return guarded([&] {
    const auto& r = *exp->result;
    std::string s = fmt::format("{} rounds in {:.1f} s, loss {:.4f} -> {:.4f}\n", r.reports.size(), r.seconds,
                                r.mean_round_loss(1), r.mean_round_loss(static_cast<int>(r.reports.size())));
    for (const auto& t : r.test) {
      s += fmt::format("client {}: psnr {:.2f} dB (zero-filled {:.2f}), ssim {:.4f} (zero-filled {:.4f})\n",
                       t.client, t.psnr, t.zero_filled_psnr, t.ssim, t.zero_filled_ssim);
    }
    s += fmt::format("trained   {}\nuntrained {}\noutput    {}\n", modfed::metrics::to_string(r.gen),
                     modfed::metrics::to_string(r.gen_untrained), r.output_dir);
    *out = dup_string(s);
    return MODFED_OK;
  });
}

modfed_status modfed_compare_runs(const char* const* dirs, size_t count, char** table, char** csv) {
  if (!dirs && count > 0) return fail(MODFED_ERR_CONTRACT, "dirs is null");
  return guarded([&] {
    std::vector<std::string> list;
    for (size_t i = 0; i < count; ++i) {
      if (!dirs[i]) throw modfed::ContractError("null run directory");
      list.emplace_back(dirs[i]);
    }
    const auto cmp = modfed::harness::compare_runs(list);
    if (table) *table = dup_string(cmp.table);
    if (csv) *csv = dup_string(cmp.csv);
    return MODFED_OK;
  });
}

modfed_status modfed_gradcheck(uint64_t seed, char** report) {
  return guarded([&] {
    bool ok = false;
    const std::string text = report_text(modfed::harness::gradcheck(seed), ok);
    if (report) *report = dup_string(text);
    if (!ok) g_last_error = "gradient check failed";
    return ok ? MODFED_OK : MODFED_ERR_CHECK_FAILED;
  });
}

modfed_status modfed_selftest(uint64_t seed, char** report) {
  return guarded([&] {
    bool ok = false;
    const std::string text = report_text(modfed::harness::selftest(seed), ok);
    if (report) *report = dup_string(text);
    if (!ok) g_last_error = "self test failed";
    return ok ? MODFED_OK : MODFED_ERR_CHECK_FAILED;
  });
}

void modfed_string_free(char* s) { std::free(s); }

}  // extern "C"
