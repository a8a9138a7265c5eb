#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modfed/params.hpp"
#include "modfed/tensor.hpp"

namespace modfed::metrics {

struct MetricConfig {
  double data_range = 1.0;
  double k1 = 0.01;
  double k2 = 0.03;
  int window = 11;  // odd; clipped to the image size
  double sigma = 1.5;
};

// 10 log10(L^2 / MSE). Identical images give +infinity.
double psnr(const ad::Tensor& x, const ad::Tensor& reference, double data_range = 1.0);

// Mean SSIM over every fully contained Gaussian window (no padding). Local
// moments are Gaussian-weighted without Bessel correction.
double ssim(const ad::Tensor& x, const ad::Tensor& y, const MetricConfig& config = {});

// Normalised 11x11 (by default) Gaussian window, row-major.
std::vector<double> gaussian_window(int size, double sigma);

struct ImageScores {
  double psnr = 0.0;
  double ssim = 0.0;
};

// Scores a 2-channel reconstruction against a 2-channel reference on
// magnitude images, both divided by the reference's maximum magnitude.
ImageScores score(const ad::Tensor& recon, const ad::Tensor& reference,
                  const MetricConfig& config = {});

// Training error L_S, testing error L_D, parameter count p, sample count m.
struct GenReport {
  double train_error = 0.0;
  std::optional<double> test_error;
  std::size_t param_count = 0;
  std::size_t sample_count = 0;
};

// Errors are means of the given per-sample losses; an empty test set leaves
// test_error unset.
GenReport gen_report(const ParamSet& params, std::span<const double> train_losses,
                     std::span<const double> test_losses);

// "L_S=... L_D=... p=... m=..." with "NA" for a missing L_D.
std::string to_string(const GenReport& report);

}  // namespace modfed::metrics
