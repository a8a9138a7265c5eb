#include "modfed/mri.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include "json.hpp"

#include "modfed/error.hpp"

namespace modfed::mri {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

ComplexGrid::ComplexGrid(std::size_t height, std::size_t width, std::vector<Complex> values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (values_.size() != height * width) {
    throw ShapeError(fmt::format("complex grid {}x{} given {} values", height, width, values_.size()));
  }
}

double ComplexGrid::norm() const {
  double acc = 0.0;
  for (const auto& v : values_) acc += std::norm(v);
  return std::sqrt(acc);
}

bool ComplexGrid::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](const Complex& v) {
    return std::isfinite(v.real()) && std::isfinite(v.imag());
  });
}

namespace {

void require_same_grid(const char* op, const ComplexGrid& a, const ComplexGrid& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError(fmt::format("{}: {}x{} vs {}x{}", op, a.height(), a.width(), b.height(),
                                 b.width()));
  }
}

void require_mask_shape(const char* op, const ComplexGrid& g, const SamplingMask& mask) {
  if (g.height() != mask.height() || g.width() != mask.width()) {
    throw ShapeError(fmt::format("{}: data {}x{} does not match mask {}x{}", op, g.height(),
                                 g.width(), mask.height(), mask.width()));
  }
}

}  // namespace

Complex inner(const ComplexGrid& a, const ComplexGrid& b) {
  require_same_grid("inner", a, b);
  Complex acc{};
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::conj(a[i]) * b[i];
  return acc;
}

double inner_real(const ComplexGrid& a, const ComplexGrid& b) { return inner(a, b).real(); }

ad::Tensor to_channels(const ComplexGrid& g) {
  ad::Tensor t({2, g.height(), g.width()});
  const std::size_t n = g.size();
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = g[i].real();
    t[n + i] = g[i].imag();
  }
  return t;
}

ComplexImage image_from_channels(const ad::Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 2) {
    throw ShapeError(fmt::format("expected 2 x H x W channels, got {}", ad::shape_string(t.shape())));
  }
  ComplexImage img(t.dim(1), t.dim(2));
  const std::size_t n = img.size();
  for (std::size_t i = 0; i < n; ++i) img[i] = Complex(t[i], t[n + i]);
  return img;
}

ad::Tensor magnitude(const ComplexGrid& g) {
  ad::Tensor t({g.height(), g.width()});
  for (std::size_t i = 0; i < g.size(); ++i) t[i] = std::abs(g[i]);
  return t;
}

ad::Tensor magnitude_of_channels(const ad::Tensor& t) { return magnitude(image_from_channels(t)); }

// ---- FFT ---------------------------------------------------------------------

bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

namespace {

// In-place iterative radix-2 transform over `n` elements spaced by `stride`.
void fft1d(Complex* data, std::size_t n, std::size_t stride, bool inverse,
           const std::vector<Complex>& twiddles, std::vector<Complex>& scratch) {
  scratch.resize(n);
  for (std::size_t i = 0; i < n; ++i) scratch[i] = data[i * stride];
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(scratch[i], scratch[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t step = n / len;
    for (std::size_t start = 0; start < n; start += len) {
      for (std::size_t k = 0; k < half; ++k) {
        Complex w = twiddles[k * step];
        if (inverse) w = std::conj(w);
        const Complex u = scratch[start + k];
        const Complex v = scratch[start + k + half] * w;
        scratch[start + k] = u + v;
        scratch[start + k + half] = u - v;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) data[i * stride] = scratch[i];
}

std::vector<Complex> make_twiddles(std::size_t n) {
  std::vector<Complex> tw(n / 2 + 1);
  for (std::size_t k = 0; k < tw.size(); ++k) {
    tw[k] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n));
  }
  return tw;
}

// Circular shift by half the extent along both axes; fftshift and ifftshift
// coincide for even sizes.
void half_shift(std::vector<Complex>& v, std::size_t h, std::size_t w) {
  std::vector<Complex> out(v.size());
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = (y + h / 2) % h;
    for (std::size_t x = 0; x < w; ++x) out[sy * w + (x + w / 2) % w] = v[y * w + x];
  }
  v.swap(out);
}

std::vector<Complex> centered_transform(std::vector<Complex> v, std::size_t h, std::size_t w,
                                        bool inverse) {
  if (!is_power_of_two(h) || !is_power_of_two(w) || h < 2 || w < 2) {
    throw UnsupportedSizeError(
        fmt::format("centered FFT needs power-of-two sizes >= 2, got {}x{}", h, w));
  }
  half_shift(v, h, w);
  std::vector<Complex> scratch;
  const auto tw_w = make_twiddles(w);
  for (std::size_t y = 0; y < h; ++y) fft1d(v.data() + y * w, w, 1, inverse, tw_w, scratch);
  const auto tw_h = h == w ? tw_w : make_twiddles(h);
  for (std::size_t x = 0; x < w; ++x) fft1d(v.data() + x, h, w, inverse, tw_h, scratch);
  half_shift(v, h, w);
  const double s = 1.0 / std::sqrt(static_cast<double>(h * w));
  for (auto& c : v) c *= s;
  return v;
}

}  // namespace

KSpace fft2c(const ComplexImage& x) {
  return KSpace(ComplexGrid(x.height(), x.width(),
                            centered_transform(x.values(), x.height(), x.width(), false)));
}

ComplexImage ifft2c(const KSpace& y) {
  return ComplexImage(ComplexGrid(y.height(), y.width(),
                                  centered_transform(y.values(), y.height(), y.width(), true)));
}

ad::Tensor fft2c(const ad::Tensor& x) {
  ComplexImage img = image_from_channels(x);
  return to_channels(fft2c(img));
}

ad::Tensor ifft2c(const ad::Tensor& y) {
  KSpace k(image_from_channels(y));
  return to_channels(ifft2c(k));
}

// ---- Masks -------------------------------------------------------------------

const char* to_string(MaskPattern p) noexcept {
  switch (p) {
    case MaskPattern::Random1D: return "1D_RANDOM";
    case MaskPattern::Uniform1D: return "1D_UNIFORM";
    case MaskPattern::Random2D: return "2D_RANDOM";
  }
  return "?";
}

MaskPattern mask_pattern_from_string(const std::string& s) {
  if (s == "1D_RANDOM") return MaskPattern::Random1D;
  if (s == "1D_UNIFORM") return MaskPattern::Uniform1D;
  if (s == "2D_RANDOM") return MaskPattern::Random2D;
  throw ConfigError(fmt::format("unknown mask pattern '{}' (expected 1D_RANDOM, 1D_UNIFORM or 2D_RANDOM)", s));
}

SamplingMask::SamplingMask(MaskSpec spec, std::size_t height, std::size_t width,
                           std::vector<double> grid)
    : spec_(spec), height_(height), width_(width), grid_(std::move(grid)) {
  if (grid_.size() != height * width) throw ShapeError("mask grid size does not match its shape");
  for (double v : grid_) {
    if (v != 0.0 && v != 1.0) throw ContractError("mask entries must be 0 or 1");
  }
}

std::size_t SamplingMask::sampled_count() const {
  return static_cast<std::size_t>(std::count(grid_.begin(), grid_.end(), 1.0));
}

double SamplingMask::sampled_fraction() const {
  return static_cast<double>(sampled_count()) / static_cast<double>(grid_.size());
}

namespace {

// Selects `k` of `candidates` either equispaced from a seeded offset or at random.
std::vector<std::size_t> pick(std::vector<std::size_t> candidates, std::size_t k, bool uniform,
                              std::mt19937_64& rng) {
  k = std::min(k, candidates.size());
  std::vector<std::size_t> chosen;
  if (k == 0) return chosen;
  if (uniform) {
    const double step = static_cast<double>(candidates.size()) / static_cast<double>(k);
    const double offset = std::uniform_real_distribution<double>(0.0, step)(rng);
    for (std::size_t i = 0; i < k; ++i) {
      auto idx = static_cast<std::size_t>(offset + static_cast<double>(i) * step);
      chosen.push_back(candidates[std::min(idx, candidates.size() - 1)]);
    }
  } else {
    std::shuffle(candidates.begin(), candidates.end(), rng);
    chosen.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return chosen;
}

std::pair<std::size_t, std::size_t> centered_range(std::size_t n, std::size_t count) {
  const std::size_t begin = n / 2 - count / 2;
  return {begin, begin + count};
}

}  // namespace

std::shared_ptr<const SamplingMask> full_mask(std::size_t height, std::size_t width) {
  MaskSpec spec;
  spec.acceleration = 1;
  spec.center_fraction = 0.0;
  return std::make_shared<const SamplingMask>(spec, height, width,
                                              std::vector<double>(height * width, 1.0));
}

std::shared_ptr<const SamplingMask> make_mask(const MaskSpec& spec, std::size_t height,
                                              std::size_t width) {
  if (spec.acceleration < 1) throw ConfigError("mask acceleration must be >= 1");
  if (height == 0 || width == 0) throw ShapeError("mask needs a non-empty grid");
  if (spec.acceleration == 1) {
    auto m = full_mask(height, width);
    return std::make_shared<const SamplingMask>(spec, height, width, m->grid());
  }
  if (spec.center_fraction < 0.0 || spec.center_fraction >= 1.0 / spec.acceleration) {
    throw ConfigError(fmt::format(
        "center fraction {} cannot be met at acceleration {} (must be in [0, 1/R))",
        spec.center_fraction, spec.acceleration));
  }

  std::mt19937_64 rng(spec.seed);
  std::vector<double> grid(height * width, 0.0);
  const bool uniform = spec.pattern == MaskPattern::Uniform1D;

  if (spec.pattern == MaskPattern::Random2D) {
    const std::size_t target = static_cast<std::size_t>(
        std::lround(static_cast<double>(height * width) / spec.acceleration));
    const double side = std::sqrt(spec.center_fraction);
    const auto ch = static_cast<std::size_t>(std::lround(side * static_cast<double>(height)));
    const auto cw = static_cast<std::size_t>(std::lround(side * static_cast<double>(width)));
    const auto [y0, y1] = centered_range(height, ch);
    const auto [x0, x1] = centered_range(width, cw);
    std::vector<std::size_t> outer;
    std::size_t kept = 0;
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        if (y >= y0 && y < y1 && x >= x0 && x < x1) {
          grid[y * width + x] = 1.0;
          ++kept;
        } else {
          outer.push_back(y * width + x);
        }
      }
    }
    for (std::size_t idx : pick(std::move(outer), target > kept ? target - kept : 0, false, rng)) {
      grid[idx] = 1.0;
    }
  } else {
    const std::size_t target =
        static_cast<std::size_t>(std::lround(static_cast<double>(width) / spec.acceleration));
    const auto center = std::min(
        target, static_cast<std::size_t>(std::lround(spec.center_fraction * static_cast<double>(width))));
    const auto [c0, c1] = centered_range(width, center);
    std::vector<std::size_t> columns;
    std::vector<std::size_t> outer;
    for (std::size_t x = 0; x < width; ++x) {
      if (x >= c0 && x < c1) {
        columns.push_back(x);
      } else {
        outer.push_back(x);
      }
    }
    for (std::size_t x : pick(std::move(outer), target - center, uniform, rng)) columns.push_back(x);
    for (std::size_t x : columns) {
      for (std::size_t y = 0; y < height; ++y) grid[y * width + x] = 1.0;
    }
  }
  return std::make_shared<const SamplingMask>(spec, height, width, std::move(grid));
}

// ---- Operators -----------------------------------------------------------------

KSpace forward_op(const ComplexImage& m, const std::shared_ptr<const SamplingMask>& mask) {
  if (!mask) throw ContractError("forward_op: mask is required");
  require_mask_shape("forward_op", m, *mask);
  KSpace k = fft2c(m);
  for (std::size_t i = 0; i < k.size(); ++i) k[i] *= (*mask)[i];
  k.mask = mask;
  return k;
}

ComplexImage adjoint_op(const KSpace& b, const std::shared_ptr<const SamplingMask>& mask) {
  if (!mask) throw ContractError("adjoint_op: mask is required");
  require_mask_shape("adjoint_op", b, *mask);
  KSpace masked = b;
  for (std::size_t i = 0; i < masked.size(); ++i) masked[i] *= (*mask)[i];
  return ifft2c(masked);
}

ad::Tensor normal_op(const ad::Tensor& x, const SamplingMask& mask) {
  ComplexImage img = image_from_channels(x);
  require_mask_shape("normal_op", img, mask);
  KSpace k = fft2c(img);
  for (std::size_t i = 0; i < k.size(); ++i) k[i] *= mask[i];
  return to_channels(ifft2c(k));
}

KSpace add_noise(const KSpace& b, double variance, std::uint64_t seed) {
  if (variance < 0.0) throw ContractError("add_noise: variance must be >= 0");
  KSpace out = b;
  if (variance == 0.0) return out;
  if (out.mask) require_mask_shape("add_noise", out, *out.mask);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, std::sqrt(variance / 2.0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out.mask && (*out.mask)[i] == 0.0) continue;
    const double re = normal(rng);
    const double im = normal(rng);
    out[i] += Complex(re, im);
  }
  return out;
}

// ---- CG --------------------------------------------------------------------------

CgResult cg_solve(const ComplexImage& rhs, const SamplingMask& mask, double lambda,
                  const CgOptions& options) {
  if (!(lambda > 0.0)) {
    throw ContractError(fmt::format("cg_solve: lambda must be > 0, got {}", lambda));
  }
  if (!rhs.all_finite()) throw ContractError("cg_solve: right-hand side is not finite");
  require_mask_shape("cg_solve", rhs, mask);

  const auto apply = [&](const ComplexImage& p) {
    KSpace k = fft2c(p);
    for (std::size_t i = 0; i < k.size(); ++i) k[i] *= mask[i];
    ComplexImage q = ifft2c(k);
    for (std::size_t i = 0; i < q.size(); ++i) q[i] += lambda * p[i];
    return q;
  };

  CgResult result;
  result.solution = ComplexImage(rhs.height(), rhs.width());
  const double rhs_norm = rhs.norm();
  if (rhs_norm == 0.0) {
    result.residuals.push_back(0.0);
    result.objective.push_back(0.0);
    return result;
  }

  ComplexImage& x = result.solution;
  ComplexImage r = rhs;
  ComplexImage p = rhs;
  double rr = inner_real(r, r);
  result.residuals.push_back(std::sqrt(rr) / rhs_norm);
  result.objective.push_back(0.0);

  for (int it = 0; it < options.max_iters && result.residuals.back() > options.tol; ++it) {
    ComplexImage q = apply(p);
    const double alpha = rr / inner_real(p, q);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * q[i];
    }
    const double rr_next = inner_real(r, r);
    if (!std::isfinite(rr_next)) {
      throw NumericError(fmt::format("cg_solve: residual became non-finite at iteration {}", it + 1));
    }
    const double beta = rr_next / rr;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = r[i] + beta * p[i];
    rr = rr_next;
    ++result.iterations;
    result.residuals.push_back(std::sqrt(rr) / rhs_norm);
    // With r = rhs - S x: 1/2 x^H S x - Re(x^H rhs) = -1/2 Re(x^H (rhs + r)).
    double obj = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) obj -= 0.5 * (std::conj(x[i]) * (rhs[i] + r[i])).real();
    result.objective.push_back(obj);
  }
  return result;
}

// ---- Phantoms --------------------------------------------------------------------

const char* to_string(PhantomKind k) noexcept {
  return k == PhantomKind::Ellipse ? "ellipse" : "textured";
}

PhantomKind phantom_kind_from_string(const std::string& s) {
  if (s == "ellipse") return PhantomKind::Ellipse;
  if (s == "textured") return PhantomKind::Textured;
  throw ConfigError(fmt::format("unknown phantom kind '{}' (expected ellipse or textured)", s));
}

namespace {

struct Ellipse {
  double cx, cy, a, b, angle;
  int tissue;

  bool contains(double x, double y) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * (x - cx) + s * (y - cy)) / a;
    const double v = (-s * (x - cx) + c * (y - cy)) / b;
    return u * u + v * v <= 1.0;
  }
};

}  // namespace

ComplexImage make_phantom_image(const PhantomSpec& spec, std::uint64_t image_seed) {
  if (spec.size < 2) throw ShapeError("phantom size must be >= 2");
  if (spec.contrast.size() != 4) throw ConfigError("phantom contrast needs 4 tissue intensities");
  std::mt19937_64 rng(image_seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  std::vector<Ellipse> shapes;
  const double oa = uni(0.70, 0.88), ob = uni(0.80, 0.94);
  const double ocx = uni(-0.05, 0.05), ocy = uni(-0.05, 0.05), oang = uni(-0.3, 0.3);
  shapes.push_back({ocx, ocy, oa, ob, oang, 0});
  const double inner_scale = uni(0.84, 0.9);
  shapes.push_back({ocx, ocy, oa * inner_scale, ob * inner_scale, oang, 1});
  const int inclusions = std::uniform_int_distribution<int>(3, 6)(rng);
  for (int i = 0; i < inclusions; ++i) {
    const double r = uni(0.0, 0.45), t = uni(0.0, 2.0 * std::numbers::pi);
    shapes.push_back({ocx + r * std::cos(t), ocy + r * std::sin(t), uni(0.08, 0.28), uni(0.06, 0.22),
                      uni(0.0, std::numbers::pi), 2});
  }
  const int lesions = std::uniform_int_distribution<int>(1, 3)(rng);
  for (int i = 0; i < lesions; ++i) {
    const double r = uni(0.0, 0.5), t = uni(0.0, 2.0 * std::numbers::pi);
    shapes.push_back({ocx + r * std::cos(t), ocy + r * std::sin(t), uni(0.04, 0.1), uni(0.04, 0.1),
                      uni(0.0, std::numbers::pi), 3});
  }

  const double tex_fx = uni(4.0, 10.0), tex_fy = uni(4.0, 10.0), tex_ph = uni(0.0, 6.0);
  const double pa = uni(-1.0, 1.0), pb = uni(-1.0, 1.0), pc = uni(-1.0, 1.0);

  const std::size_t n = spec.size;
  ComplexImage img(n, n);
  double peak = 0.0;
  for (std::size_t iy = 0; iy < n; ++iy) {
    const double y = 2.0 * (static_cast<double>(iy) + 0.5) / static_cast<double>(n) - 1.0;
    for (std::size_t ix = 0; ix < n; ++ix) {
      const double x = 2.0 * (static_cast<double>(ix) + 0.5) / static_cast<double>(n) - 1.0;
      double mag = 0.0;
      bool inside = false;
      for (const auto& e : shapes) {
        if (e.contains(x, y)) {
          mag = spec.contrast[static_cast<std::size_t>(e.tissue)];
          inside = true;
        }
      }
      if (inside && spec.kind == PhantomKind::Textured) {
        mag *= 1.0 + 0.15 * std::sin(tex_fx * x + tex_fy * y + tex_ph);
      }
      const double phase = spec.phase_strength * (pa * x + pb * y + pc * (x * x + y * y));
      img(iy, ix) = std::polar(mag, phase);
      peak = std::max(peak, mag);
    }
  }
  if (peak > 0.0) {
    for (auto& v : img.values()) v /= peak;
  }
  return img;
}

std::vector<PhantomRecord> make_phantoms(const PhantomSpec& spec, std::size_t count,
                                         const std::shared_ptr<const SamplingMask>& mask) {
  if (count < 1) throw ContractError("make_phantoms: count must be >= 1");
  if (!mask) throw ContractError("make_phantoms: mask is required");
  std::vector<PhantomRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    PhantomRecord rec;
    rec.seed = mix_seed(spec.seed, i);
    rec.truth = make_phantom_image(spec, rec.seed);
    rec.kspace = forward_op(rec.truth, mask);
    rec.mask = mask;
    out.push_back(std::move(rec));
  }
  return out;
}

// ---- Dataset container --------------------------------------------------------------

namespace {

constexpr char kDatasetMagic[8] = {'M', 'F', 'P', 'H', 'A', 'N', 'T', '1'};
constexpr std::uint32_t kDatasetVersion = 1;
constexpr std::uint32_t kPlanes = 3;

template <typename T>
void put_le(std::ostream& os, T v) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw IoError("dataset: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

}  // namespace

void write_dataset(const std::string& path, const std::vector<DatasetEntry>& entries) {
  if (entries.empty()) throw ContractError("write_dataset: no records");
  const std::size_t h = entries[0].record.truth.height(), w = entries[0].record.truth.width();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(fmt::format("cannot open '{}' for writing", path));
  os.write(kDatasetMagic, sizeof(kDatasetMagic));
  put_le<std::uint32_t>(os, kDatasetVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(h));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(w));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  put_le<std::uint32_t>(os, kPlanes);

  nlohmann::json sidecar;
  sidecar["format"] = "MFPHANT1";
  sidecar["height"] = h;
  sidecar["width"] = w;
  sidecar["records"] = nlohmann::json::array();
  for (const auto& e : entries) {
    const auto& r = e.record;
    if (r.truth.height() != h || r.truth.width() != w || r.kspace.height() != h ||
        r.kspace.width() != w || !r.mask || r.mask->height() != h || r.mask->width() != w) {
      throw ShapeError("write_dataset: records must share one shape");
    }
    for (const auto& v : r.truth.values()) {
      put_le<double>(os, v.real());
      put_le<double>(os, v.imag());
    }
    for (const auto& v : r.kspace.values()) {
      put_le<double>(os, v.real());
      put_le<double>(os, v.imag());
    }
    for (double v : r.mask->grid()) {
      put_le<double>(os, v);
      put_le<double>(os, 0.0);
    }
    const auto& ms = r.mask->spec();
    sidecar["records"].push_back({{"client", e.client},
                                  {"split", e.split},
                                  {"seed", r.seed},
                                  {"mask", {{"pattern", to_string(ms.pattern)},
                                            {"acceleration", ms.acceleration},
                                            {"center_fraction", ms.center_fraction},
                                            {"seed", ms.seed}}}});
  }
  if (!os) throw IoError(fmt::format("failed writing '{}'", path));
  std::ofstream js(path + ".json");
  if (!js) throw IoError(fmt::format("cannot open '{}.json' for writing", path));
  js << sidecar.dump(2) << '\n';
}

std::vector<DatasetEntry> read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(fmt::format("cannot open '{}'", path));
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kDatasetMagic, sizeof(magic)) != 0) {
    throw IoError(fmt::format("'{}' is not a phantom dataset", path));
  }
  const auto version = get_le<std::uint32_t>(is);
  if (version != kDatasetVersion) throw IoError(fmt::format("unsupported dataset version {}", version));
  const auto h = get_le<std::uint32_t>(is);
  const auto w = get_le<std::uint32_t>(is);
  const auto count = get_le<std::uint32_t>(is);
  const auto planes = get_le<std::uint32_t>(is);
  if (planes != kPlanes) throw IoError("dataset: unexpected plane count");

  std::ifstream js(path + ".json");
  if (!js) throw IoError(fmt::format("missing sidecar '{}.json'", path));
  const nlohmann::json sidecar = nlohmann::json::parse(js);
  const auto& records = sidecar.at("records");
  if (records.size() != count) throw IoError("dataset sidecar record count mismatch");

  auto read_grid = [&](ComplexGrid& g) {
    for (auto& v : g.values()) {
      const double re = get_le<double>(is);
      const double im = get_le<double>(is);
      v = Complex(re, im);
    }
  };

  std::map<std::vector<double>, std::shared_ptr<const SamplingMask>> masks;
  std::vector<DatasetEntry> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    DatasetEntry e;
    e.record.truth = ComplexImage(h, w);
    e.record.kspace = KSpace(h, w);
    read_grid(e.record.truth);
    read_grid(e.record.kspace);
    ComplexGrid mask_plane(h, w);
    read_grid(mask_plane);
    std::vector<double> grid(mask_plane.size());
    for (std::size_t j = 0; j < grid.size(); ++j) grid[j] = mask_plane[j].real();

    const auto& meta = records[i];
    e.client = meta.at("client").get<int>();
    e.split = meta.at("split").get<std::string>();
    e.record.seed = meta.at("seed").get<std::uint64_t>();
    auto& mask = masks[grid];
    if (!mask) {
      MaskSpec spec;
      const auto& m = meta.at("mask");
      spec.pattern = mask_pattern_from_string(m.at("pattern").get<std::string>());
      spec.acceleration = m.at("acceleration").get<int>();
      spec.center_fraction = m.at("center_fraction").get<double>();
      spec.seed = m.at("seed").get<std::uint64_t>();
      mask = std::make_shared<const SamplingMask>(spec, h, w, std::move(grid));
    }
    e.record.mask = mask;
    e.record.kspace.mask = mask;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace modfed::mri
