// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Desk-scale runs are written under --out.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "modfed/error.hpp"
#include "modfed/fed.hpp"
#include "modfed/harness.hpp"
#include "modfed/metrics.hpp"
#include "modfed/mri.hpp"
#include "modfed/recon.hpp"

using namespace modfed;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

double max_param_diff(const ParamSet& a, const ParamSet& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, ad::max_abs_diff(a[i].value, b[i].value));
  return m;
}

// Two clients holding the same samples, small model, for the reduction checks.
struct SmallFederation {
  net::ReconConfig recon;
  ParamSet init;
  std::vector<fed::Sample> s1, s2;

  SmallFederation() {
    recon.width = 4;
    recon.depth = 2;
    init = net::make_params(recon, 5);
    net::partition_params(init, {net::PartitionScheme::AllGlobal, {}});
    harness::ExperimentConfig c = harness::profile("desk");
    c.clients = 1;
    c.image_size = 16;
    c.images_per_client = 10;
    c.test_images_per_client = 0;
    const auto data = harness::build_datasets(c);
    s1 = data[0].train.s1;
    s2 = data[0].train.s2;
  }

  fed::ClientSetup client(double gamma, std::uint64_t seed) const {
    fed::ClientSetup s;
    s.data.s1 = s1;
    s.data.s2 = s2;
    s.gamma = gamma;
    s.seed = seed;
    return s;
  }

  fed::FedConfig config(fed::Strategy strategy, int rounds) const {
    fed::FedConfig f;
    f.strategy = strategy;
    f.rounds = rounds;
    f.local_epochs = 2;
    f.batch_size = 3;
    f.optimizer.learning_rate = 5e-3;
    f.validation_metrics = false;
    return f;
  }
};

std::vector<ParamSet> server_trajectory(const fed::Objective& obj, const ParamSet& init,
                                        std::vector<fed::ClientSetup> clients, const fed::FedConfig& cfg) {
  std::vector<ParamSet> traj;
  fed::run_federation(obj, init, std::move(clients), cfg,
                      [&](const fed::RoundReport&, const fed::ServerState& s, std::span<const fed::ClientState>) {
                        traj.push_back(s.model);
                      });
  return traj;
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = harness::gradcheck(7);
  const double secs = seconds_since(t0);
  double worst_op = 0.0, model = 0.0;
  bool ok = true;
  for (const auto& c : checks) {
    ok = ok && c.passed;
    if (c.name.rfind("unrolled", 0) == 0) {
      model = std::max(model, c.value);
      ok = ok && c.value < 1e-3;
    } else {
      worst_op = std::max(worst_op, c.value);
      ok = ok && c.value < 1e-4;
    }
  }
  ok = ok && secs < 120.0;
  return {ok, fmt::format("{} checks, worst op {:.2e} (< 1e-4), full model {:.2e} (< 1e-3), {:.1f} s (< 120 s)",
                          checks.size(), worst_op, model, secs)};
}

Outcome cg_oracle() {
  const std::size_t n = 32;
  double worst = 0.0;
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> lam(0.01, 2.0);
  const mri::MaskPattern patterns[] = {mri::MaskPattern::Random1D, mri::MaskPattern::Uniform1D,
                                       mri::MaskPattern::Random2D};
  for (int t = 0; t < 20; ++t) {
    const auto mask = mri::make_mask({patterns[t % 3], 2 + t % 3 * 2, 0.08, static_cast<std::uint64_t>(t)}, n, n);
    mri::ComplexImage rhs(n, n);
    for (auto& v : rhs.values()) v = {g(rng), g(rng)};
    const double lambda = lam(rng);
    const auto res = mri::cg_solve(rhs, *mask, lambda, {200, 1e-14});
    mri::KSpace k = mri::fft2c(rhs);
    for (std::size_t i = 0; i < k.size(); ++i) k.values()[i] /= ((*mask)[i] + lambda);
    const mri::ComplexImage exact = mri::ifft2c(k);
    double num = 0.0;
    for (std::size_t i = 0; i < exact.size(); ++i) num += std::norm(res.solution[i] - exact[i]);
    worst = std::max(worst, std::sqrt(num) / exact.norm());
  }
  return {worst < 1e-8, fmt::format("20 systems, worst relative error {:.2e} (< 1e-8)", worst)};
}

Outcome aggregation_algebra() {
  const auto w = fed::adaptive_weights(std::vector<double>{0.0, std::log(2.0)});
  const double e_values = std::max(std::abs(w[0] - 1.0 / 3.0), std::abs(w[1] - 2.0 / 3.0));

  double e_shift = 0.0, e_sum = 0.0;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5.0, 30.0);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> l(1 + t % 6);
    for (double& v : l) v = u(rng);
    const auto a = fed::adaptive_weights(l);
    std::vector<double> shifted = l;
    const double c = u(rng);
    for (double& v : shifted) v += c;
    const auto b = fed::adaptive_weights(shifted);
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      e_shift = std::max(e_shift, std::abs(a[k] - b[k]));
      s += a[k];
    }
    e_sum = std::max(e_sum, std::abs(s - 1.0));
  }

  const ParamSet p0 = net::make_params({}, 1);
  const ParamSet p1 = net::make_params({}, 2);
  const std::vector<ParamSet> sets{p0, p1};
  const bool copy = fed::aggregate(sets, std::vector<double>{1.0, 0.0}) == p0;

  const bool ok = e_values < 1e-12 && e_shift < 1e-12 && e_sum < 1e-12 && copy;
  return {ok, fmt::format("[0, ln 2] error {:.1e}, shift invariance {:.1e}, |sum - 1| {:.1e}, alpha=[1,0] copy {}",
                          e_values, e_shift, e_sum, copy ? "exact" : "differs")};
}

Outcome fedavg_reduction() {
  SmallFederation f;
  const fed::ReconObjective obj(f.recon);
  auto clients = [&] { return std::vector<fed::ClientSetup>{f.client(0.0, 17), f.client(0.0, 17)}; };
  const auto mod = server_trajectory(obj, f.init, clients(), f.config(fed::Strategy::ModFed, 3));
  const auto avg = server_trajectory(obj, f.init, clients(), f.config(fed::Strategy::FedAvg, 3));
  double worst = 0.0;
  for (std::size_t t = 0; t < mod.size(); ++t) worst = std::max(worst, max_param_diff(mod[t], avg[t]));
  return {mod.size() == 3 && avg.size() == 3 && worst < 1e-10,
          fmt::format("3 rounds, max parameter difference {:.2e} (< 1e-10)", worst)};
}

Outcome degenerate_federation() {
  SmallFederation f;
  const fed::ReconObjective obj(f.recon);
  fed::FedConfig cfg = f.config(fed::Strategy::ModFed, 5);
  cfg.local_epochs = 1;
  const auto fr = fed::run_federation(obj, f.init, {f.client(0.0, 23)}, cfg);
  const auto central = fed::train_centralized(obj, f.init, f.client(0.0, 23), cfg);
  bool losses = central.epoch_losses.size() == fr.reports.size();
  for (std::size_t t = 0; losses && t < fr.reports.size(); ++t) {
    losses = fr.reports[t].clients[0].loss_s1 == central.epoch_losses[t];
  }
  const bool params = fr.server == central.params;
  return {losses && params, fmt::format("5 rounds, parameters {}, per-round losses {}",
                                        params ? "bitwise equal" : "differ", losses ? "bitwise equal" : "differ")};
}

struct DeskRuns {
  harness::ExperimentResult modfed, fedavg, noisy;
};

Outcome desk_run(const DeskRuns& r) {
  const double l1 = r.modfed.mean_round_loss(1);
  const double l30 = r.modfed.mean_round_loss(static_cast<int>(r.modfed.reports.size()));
  const double ratio = l30 / l1;
  bool b_ok = true;
  std::string gains;
  for (const auto& t : r.modfed.test) {
    const double gain = t.psnr - t.zero_filled_psnr;
    b_ok = b_ok && gain >= 2.0;
    gains += fmt::format("{}{:+.2f}", gains.empty() ? "" : "/", gain);
  }
  const double mp = r.modfed.mean_test_psnr(), fp = r.fedavg.mean_test_psnr();
  const bool a_ok = ratio <= 0.5;
  const bool c_ok = mp >= fp - 0.1;
  return {a_ok && b_ok && c_ok,
          fmt::format("(a) loss ratio {:.3f} (<= 0.5) {}; (b) gain over zero-filled {} dB (>= 2) {}; "
                      "(c) MODFED {:.2f} dB vs FEDAVG {:.2f} dB (>= -0.1) {}; {:.0f} s + {:.0f} s",
                      ratio, a_ok ? "ok" : "FAIL", gains, b_ok ? "ok" : "FAIL", mp, fp, c_ok ? "ok" : "FAIL",
                      r.modfed.seconds, r.fedavg.seconds)};
}

Outcome noise_protocol(const DeskRuns& r) {
  bool finite = true;
  for (const auto& rep : r.noisy.reports) {
    for (const auto& c : rep.clients) finite = finite && std::isfinite(c.loss_s1) && std::isfinite(c.loss_s2);
  }
  bool ok = finite;
  std::string gains;
  for (const auto& t : r.noisy.test) {
    const double gain = t.psnr - t.zero_filled_psnr;
    ok = ok && gain >= 1.0;
    gains += fmt::format("{}{:+.2f}", gains.empty() ? "" : "/", gain);
  }
  return {ok, fmt::format("losses {}, gain over zero-filled {} dB (>= 1)", finite ? "finite" : "NOT finite", gains)};
}

Outcome metric_correctness() {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto image = [&](std::size_t h, std::size_t w) {
    ad::Tensor t({1, h, w});
    for (double& v : t.values()) v = u(rng);
    return t;
  };
  const ad::Tensor x = image(64, 64);
  const double self = metrics::ssim(x, x);
  ad::Tensor off = x;
  for (double& v : off.values()) v += 0.1;
  const double p = metrics::psnr(off, x, 1.0);

  // Straight-line windowed SSIM: explicit 11 x 11 Gaussian, one window at a time.
  auto oracle = [](const ad::Tensor& a, const ad::Tensor& b) {
    const std::size_t n = 11, h = a.dim(1), w = a.dim(2);
    std::vector<double> g(n * n);
    double gs = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double di = static_cast<double>(i) - 5.0, dj = static_cast<double>(j) - 5.0;
        g[i * n + j] = std::exp(-(di * di + dj * dj) / (2.0 * 1.5 * 1.5));
        gs += g[i * n + j];
      }
    }
    const double c1 = 1e-4, c2 = 9e-4;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t y0 = 0; y0 + n <= h; ++y0) {
      for (std::size_t x0 = 0; x0 + n <= w; ++x0) {
        double ma = 0, mb = 0;
        for (std::size_t i = 0; i < n * n; ++i) {
          const std::size_t q = (y0 + i / n) * w + x0 + i % n;
          ma += g[i] / gs * a[q];
          mb += g[i] / gs * b[q];
        }
        double va = 0, vb = 0, cab = 0;
        for (std::size_t i = 0; i < n * n; ++i) {
          const std::size_t q = (y0 + i / n) * w + x0 + i % n;
          va += g[i] / gs * (a[q] - ma) * (a[q] - ma);
          vb += g[i] / gs * (b[q] - mb) * (b[q] - mb);
          cab += g[i] / gs * (a[q] - ma) * (b[q] - mb);
        }
        total += ((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
    }
    return total / static_cast<double>(count);
  };
  double worst = 0.0;
  for (int t = 0; t < 10; ++t) {
    const ad::Tensor a = image(48, 40), b = image(48, 40);
    worst = std::max(worst, std::abs(metrics::ssim(a, b) - oracle(a, b)));
  }
  const bool ok = std::abs(self - 1.0) < 1e-12 && std::abs(p - 20.0) < 1e-9 && worst < 1e-10;
  return {ok, fmt::format("ssim(x,x) - 1 = {:.1e}, offset psnr {:.12f} dB, windowed oracle error {:.1e} (< 1e-10)",
                          self - 1.0, p, worst)};
}

Outcome literal_invariance() {
  SmallFederation f;
  ParamSet init = net::make_params(f.recon, 5);
  net::partition_params(init, {net::PartitionScheme::SlamLocal, {}});
  const fed::ReconObjective obj(f.recon);
  fed::FedConfig cfg = f.config(fed::Strategy::ModFed, 3);
  cfg.loss_mode = fed::ClientLossMode::Literal;
  auto traj = [&](double gamma) {
    return server_trajectory(obj, init, {f.client(gamma, 31), f.client(gamma, 32)}, cfg);
  };
  const auto a = traj(0.0), b = traj(0.1);
  bool same = a.size() == b.size() && a.size() == 3;
  for (std::size_t t = 0; same && t < a.size(); ++t) same = a[t] == b[t];
  return {same, fmt::format("3 rounds, server trajectories for gamma 0 and 0.1 {}", same ? "bitwise equal" : "differ")};
}

Outcome reproducibility(const fs::path& root) {
  harness::ExperimentConfig c = harness::profile("desk");
  c.rounds = 3;
  c.images_per_client = 10;
  c.test_images_per_client = 2;
  c.seed = 42;
  c.output_dir = (root / "repro_a").string();
  harness::run_experiment(c);
  c.output_dir = (root / "repro_b").string();
  harness::run_experiment(c);
  const std::string a = slurp(root / "repro_a" / "metrics.csv");
  const std::string b = slurp(root / "repro_b" / "metrics.csv");
  const bool same = !a.empty() && a == b;
  return {same, fmt::format("metrics.csv {} bytes, {}", a.size(), same ? "byte-identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string out = "acceptance_runs";
  app.add_option("--out", out, "directory for the desk-scale runs");
  CLI11_PARSE(app, argc, argv);
  harness::tune_allocator();

  const fs::path root(out);
  fs::create_directories(root);
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& body) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("criterion %2d %s  %-26s %s [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", name, o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  };

  report(1, "gradient suite", gradient_suite);
  report(2, "CG oracle", cg_oracle);
  report(3, "aggregation algebra", aggregation_algebra);
  report(4, "FedAvg reduction", fedavg_reduction);
  report(5, "degenerate federation", degenerate_federation);

  DeskRuns runs;
  bool have_runs = false;
  std::string run_error;
  try {
    harness::ExperimentConfig desk = harness::profile("desk");
    desk.output_dir = (root / "desk_modfed").string();
    runs.modfed = harness::run_experiment(desk);
    harness::ExperimentConfig avg = desk;
    avg.strategy = fed::Strategy::FedAvg;
    avg.partition.clear();
    avg.output_dir = (root / "desk_fedavg").string();
    runs.fedavg = harness::run_experiment(avg);
    harness::ExperimentConfig noisy = desk;
    noisy.noise_variance = 0.03;
    noisy.output_dir = (root / "desk_noise").string();
    runs.noisy = harness::run_experiment(noisy);
    have_runs = true;
  } catch (const std::exception& e) {
    run_error = e.what();
  }
  report(6, "desk run", [&] { return have_runs ? desk_run(runs) : Outcome{false, "run failed: " + run_error}; });
  report(7, "noise protocol", [&] { return have_runs ? noise_protocol(runs) : Outcome{false, "run failed: " + run_error}; });

  report(8, "metric correctness", metric_correctness);
  report(9, "literal-loss invariance", literal_invariance);
  report(10, "reproducibility", [&] { return reproducibility(root); });

  std::printf("%d of 10 criteria passed\n", 10 - failures);
  return failures == 0 ? 0 : 1;
}
