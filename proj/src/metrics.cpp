#include "modfed/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "modfed/error.hpp"
#include "modfed/mri.hpp"

namespace modfed::metrics {

using ad::Tensor;

namespace {

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, ad::shape_string(a.shape()),
                                 ad::shape_string(b.shape())));
  }
}

// Height and width of a 2-D image stored as H x W or 1 x H x W.
std::pair<std::size_t, std::size_t> image_dims(const Tensor& t) {
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  if (t.rank() == 3 && t.dim(0) == 1) return {t.dim(1), t.dim(2)};
  throw ShapeError(fmt::format("ssim expects a single-channel image, got {}",
                               ad::shape_string(t.shape())));
}

// Valid-mode separable filtering of an h x w plane with a 1-D kernel.
std::vector<double> filter_valid(const std::vector<double>& plane, std::size_t h, std::size_t w,
                                 const std::vector<double>& taps) {
  const std::size_t n = taps.size();
  const std::size_t ow = w - n + 1;
  const std::size_t oh = h - n + 1;
  std::vector<double> rows(h * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += taps[i] * plane[y * w + x + i];
      rows[y * ow + x] = acc;
    }
  }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += taps[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  }
  return out;
}

std::vector<double> gaussian_taps(int size, double sigma) {
  std::vector<double> taps(static_cast<std::size_t>(size));
  const double c = (size - 1) / 2.0;
  for (int i = 0; i < size; ++i) taps[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
  const double total = std::accumulate(taps.begin(), taps.end(), 0.0);
  for (double& t : taps) t /= total;
  return taps;
}

}  // namespace

double psnr(const Tensor& x, const Tensor& reference, double data_range) {
  require_same("psnr", x, reference);
  if (!(data_range > 0.0)) throw ConfigError("psnr: data range must be > 0");
  if (x.empty()) throw ShapeError("psnr: empty image");
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - reference[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(x.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / mse);
}

std::vector<double> gaussian_window(int size, double sigma) {
  const auto taps = gaussian_taps(size, sigma);
  std::vector<double> w(taps.size() * taps.size());
  for (std::size_t i = 0; i < taps.size(); ++i) {
    for (std::size_t j = 0; j < taps.size(); ++j) w[i * taps.size() + j] = taps[i] * taps[j];
  }
  return w;
}

double ssim(const Tensor& x, const Tensor& y, const MetricConfig& config) {
  require_same("ssim", x, y);
  if (!(config.data_range > 0.0) || !(config.k1 > 0.0) || !(config.k2 > 0.0)) {
    throw ConfigError("ssim: data range, k1 and k2 must be > 0");
  }
  if (config.window < 1 || config.window % 2 == 0) throw ConfigError("ssim: window size must be odd");
  const auto [h, w] = image_dims(x);
  int size = config.window;
  while (static_cast<std::size_t>(size) > std::min(h, w)) size -= 2;
  if (size < 1) throw ShapeError("ssim: image too small");

  const auto taps = gaussian_taps(size, config.sigma);
  std::vector<double> xs(x.data(), x.data() + x.size());
  std::vector<double> ys(y.data(), y.data() + y.size());
  std::vector<double> xx(xs.size()), yy(xs.size()), xy(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    xx[i] = xs[i] * xs[i];
    yy[i] = ys[i] * ys[i];
    xy[i] = xs[i] * ys[i];
  }
  const auto mx = filter_valid(xs, h, w, taps);
  const auto my = filter_valid(ys, h, w, taps);
  const auto mxx = filter_valid(xx, h, w, taps);
  const auto myy = filter_valid(yy, h, w, taps);
  const auto mxy = filter_valid(xy, h, w, taps);

  const double c1 = (config.k1 * config.data_range) * (config.k1 * config.data_range);
  const double c2 = (config.k2 * config.data_range) * (config.k2 * config.data_range);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = mxx[i] - mx[i] * mx[i];
    const double vy = myy[i] - my[i] * my[i];
    const double cxy = mxy[i] - mx[i] * my[i];
    total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

ImageScores score(const Tensor& recon, const Tensor& reference, const MetricConfig& config) {
  require_same("score", recon, reference);
  Tensor r = mri::magnitude_of_channels(recon);
  Tensor t = mri::magnitude_of_channels(reference);
  double peak = 0.0;
  for (double v : t.values()) peak = std::max(peak, v);
  if (peak > 0.0) {
    r *= 1.0 / peak;
    t *= 1.0 / peak;
  }
  return {psnr(r, t, config.data_range), ssim(r, t, config)};
}

GenReport gen_report(const ParamSet& params, std::span<const double> train_losses,
                     std::span<const double> test_losses) {
  if (train_losses.empty()) throw ContractError("gen_report: empty training set");
  auto mean = [](std::span<const double> v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  GenReport report;
  report.train_error = mean(train_losses);
  if (!test_losses.empty()) report.test_error = mean(test_losses);
  report.param_count = params.element_count();
  report.sample_count = train_losses.size();
  return report;
}

std::string to_string(const GenReport& r) {
  return fmt::format("L_S={:.6g} L_D={} p={} m={}", r.train_error,
                     r.test_error ? fmt::format("{:.6g}", *r.test_error) : std::string("NA"),
                     r.param_count, r.sample_count);
}

}  // namespace modfed::metrics
