#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "modfed/tensor.hpp"

namespace modfed::mri {

using Complex = std::complex<double>;

// Row-major H x W grid of complex values.
class ComplexGrid {
 public:
  ComplexGrid() = default;
  ComplexGrid(std::size_t height, std::size_t width)
      : height_(height), width_(width), values_(height * width) {}
  ComplexGrid(std::size_t height, std::size_t width, std::vector<Complex> values);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return values_.size(); }

  Complex& operator()(std::size_t y, std::size_t x) { return values_[y * width_ + x]; }
  const Complex& operator()(std::size_t y, std::size_t x) const { return values_[y * width_ + x]; }
  Complex& operator[](std::size_t i) { return values_[i]; }
  const Complex& operator[](std::size_t i) const { return values_[i]; }

  std::vector<Complex>& values() noexcept { return values_; }
  const std::vector<Complex>& values() const noexcept { return values_; }

  double norm() const;
  bool all_finite() const;

  friend bool operator==(const ComplexGrid&, const ComplexGrid&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<Complex> values_;
};

// Image-space data (m, r, A^H b).
class ComplexImage : public ComplexGrid {
 public:
  using ComplexGrid::ComplexGrid;
  ComplexImage() = default;
  explicit ComplexImage(ComplexGrid g) : ComplexGrid(std::move(g)) {}
};

class SamplingMask;

// Frequency-space data (b). `mask` is null for fully sampled data.
class KSpace : public ComplexGrid {
 public:
  using ComplexGrid::ComplexGrid;
  KSpace() = default;
  explicit KSpace(ComplexGrid g) : ComplexGrid(std::move(g)) {}

  std::shared_ptr<const SamplingMask> mask;
};

double inner_real(const ComplexGrid& a, const ComplexGrid& b);
Complex inner(const ComplexGrid& a, const ComplexGrid& b);

// 2 x H x W view with real parts in channel 0 and imaginary parts in channel 1.
ad::Tensor to_channels(const ComplexGrid& g);
ComplexImage image_from_channels(const ad::Tensor& t);
ad::Tensor magnitude(const ComplexGrid& g);
ad::Tensor magnitude_of_channels(const ad::Tensor& t);

// ---- Fourier transforms -----------------------------------------------------

bool is_power_of_two(std::size_t n) noexcept;

// Centered orthonormal 2-D DFT: fftshift(F(ifftshift(x))) / sqrt(H W).
KSpace fft2c(const ComplexImage& x);
ComplexImage ifft2c(const KSpace& y);
// Same transforms on the stacked 2-channel representation.
ad::Tensor fft2c(const ad::Tensor& x);
ad::Tensor ifft2c(const ad::Tensor& y);

// ---- Sampling masks ---------------------------------------------------------

enum class MaskPattern { Random1D, Uniform1D, Random2D };

const char* to_string(MaskPattern p) noexcept;
MaskPattern mask_pattern_from_string(const std::string& s);

struct MaskSpec {
  MaskPattern pattern = MaskPattern::Random1D;
  int acceleration = 4;
  double center_fraction = 0.08;
  std::uint64_t seed = 0;
};

class SamplingMask {
 public:
  SamplingMask(MaskSpec spec, std::size_t height, std::size_t width, std::vector<double> grid);

  const MaskSpec& spec() const noexcept { return spec_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  const std::vector<double>& grid() const noexcept { return grid_; }
  double operator()(std::size_t y, std::size_t x) const { return grid_[y * width_ + x]; }
  double operator[](std::size_t i) const { return grid_[i]; }

  std::size_t sampled_count() const;
  double sampled_fraction() const;

 private:
  MaskSpec spec_;
  std::size_t height_;
  std::size_t width_;
  std::vector<double> grid_;
};

// 1-D patterns keep whole phase-encode columns (index along width); the 2-D
// pattern keeps individual points. The fully sampled center covers
// center_fraction of the columns (1-D) or of the points (2-D, as a square).
// Exactly round(N / R) columns or points are sampled.
std::shared_ptr<const SamplingMask> make_mask(const MaskSpec& spec, std::size_t height,
                                              std::size_t width);
std::shared_ptr<const SamplingMask> full_mask(std::size_t height, std::size_t width);

// ---- Measurement operators ------------------------------------------------------

// A m = P F m
KSpace forward_op(const ComplexImage& m, const std::shared_ptr<const SamplingMask>& mask);
// A^H b = F^H P b
ComplexImage adjoint_op(const KSpace& b, const std::shared_ptr<const SamplingMask>& mask);
// A^H A on the channel representation; self-adjoint.
ad::Tensor normal_op(const ad::Tensor& x, const SamplingMask& mask);

// Complex white Gaussian noise with E|n|^2 = variance at sampled positions.
KSpace add_noise(const KSpace& b, double variance, std::uint64_t seed);

// ---- Data consistency solve ---------------------------------------------------

struct CgOptions {
  int max_iters = 10;
  double tol = 1e-6;
};

struct CgResult {
  ComplexImage solution;
  int iterations = 0;
  // Relative residual ||(A^H A + lambda I) m - rhs|| / ||rhs|| after each
  // iteration; entry 0 is the initial value (1 for nonzero rhs).
  std::vector<double> residuals;
  // Quadratic objective 1/2 m^H S m - Re(m^H rhs) after each iteration;
  // conjugate gradients decreases it monotonically.
  std::vector<double> objective;
  double final_residual() const { return residuals.empty() ? 0.0 : residuals.back(); }
};

// Solves (A^H A + lambda I) m = rhs by conjugate gradients from m = 0.
CgResult cg_solve(const ComplexImage& rhs, const SamplingMask& mask, double lambda,
                  const CgOptions& options = {});

// ---- Synthetic phantoms -------------------------------------------------------

enum class PhantomKind { Ellipse, Textured };

const char* to_string(PhantomKind k) noexcept;
PhantomKind phantom_kind_from_string(const std::string& s);

struct PhantomSpec {
  PhantomKind kind = PhantomKind::Ellipse;
  std::size_t size = 64;
  // Intensity of each tissue class: [outer shell, interior, inclusions, lesions].
  std::vector<double> contrast{0.6, 0.8, 1.0, 0.2};
  double phase_strength = 0.6;
  std::uint64_t seed = 0;
};

struct PhantomRecord {
  ComplexImage truth;
  KSpace kspace;
  std::shared_ptr<const SamplingMask> mask;
  std::uint64_t seed = 0;
};

// Generates `count` images normalised to max magnitude 1 and their noiseless
// measurements kspace = forward_op(truth, mask).
std::vector<PhantomRecord> make_phantoms(const PhantomSpec& spec, std::size_t count,
                                         const std::shared_ptr<const SamplingMask>& mask);

ComplexImage make_phantom_image(const PhantomSpec& spec, std::uint64_t image_seed);

// ---- Dataset container ----------------------------------------------------------
//
// Binary layout, all integers and doubles little-endian:
//   char[8]  magic "MFPHANT1"
//   u32      version (1)
//   u32      height, width
//   u32      count
//   u32      planes per record (3: truth, kspace, mask)
//   count * planes * height * width * (f64 real, f64 imag)
// The mask plane stores the 0/1 grid with zero imaginary parts. A JSON
// sidecar at `path + ".json"` lists, per record, the client assignment, the
// phantom seed and the mask spec.

struct DatasetEntry {
  PhantomRecord record;
  int client = 0;
  std::string split;  // "s1", "s2" or "test"
};

void write_dataset(const std::string& path, const std::vector<DatasetEntry>& entries);
std::vector<DatasetEntry> read_dataset(const std::string& path);

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept;

}  // namespace modfed::mri
