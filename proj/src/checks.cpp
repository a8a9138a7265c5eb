#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "modfed/fed.hpp"
#include "modfed/graph.hpp"
#include "modfed/harness.hpp"
#include "modfed/metrics.hpp"
#include "modfed/mri.hpp"
#include "modfed/recon.hpp"

namespace modfed::harness {

namespace {

using ad::Graph;
using ad::Tensor;
using ad::Var;

constexpr double kStep = 1e-5;
constexpr std::size_t kMaxProbes = 24;

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

Tensor random_tensor(const ad::Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

double evaluate(const Builder& build, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  return build(g, vars).value().item();
}

// Norm-wise relative error between analytic and central-difference gradients
// over a sample of entries of every input.
double gradient_error(const Builder& build, std::vector<Tensor> inputs, std::mt19937_64& rng) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.leaf(t));
  Var out = build(g, vars);
  g.backward(out);

  double diff2 = 0.0, ref2 = 0.0;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    const Tensor analytic = g.grad(vars[a]);
    std::vector<std::size_t> idx(inputs[a].size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(idx.size(), kMaxProbes));
    for (std::size_t i : idx) {
      const double saved = inputs[a][i];
      inputs[a][i] = saved + kStep;
      const double up = evaluate(build, inputs);
      inputs[a][i] = saved - kStep;
      const double down = evaluate(build, inputs);
      inputs[a][i] = saved;
      const double numeric = (up - down) / (2.0 * kStep);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      ref2 += std::max(analytic[i] * analytic[i], numeric * numeric);
    }
  }
  return ref2 == 0.0 ? std::sqrt(diff2) : std::sqrt(diff2 / ref2);
}

// Reduces an op output to a scalar through a fixed random projection so every
// output entry contributes.
Builder projected(std::function<Var(Graph&, const std::vector<Var>&)> op, std::uint64_t seed) {
  return [op = std::move(op), seed](Graph& g, const std::vector<Var>& v) {
    Var y = op(g, v);
    std::mt19937_64 rng(seed);
    return ad::dot(y, g.constant(random_tensor(y.shape(), rng)));
  };
}

}  // namespace

std::vector<CheckResult> gradcheck(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<CheckResult> out;
  auto check = [&](const std::string& name, std::function<Var(Graph&, const std::vector<Var>&)> op,
                   std::vector<Tensor> inputs, double tol = 1e-4) {
    const double err = gradient_error(projected(std::move(op), rng()), std::move(inputs), rng);
    out.push_back(CheckResult{name, err, tol, err < tol});
  };
  auto r = [&](ad::Shape s, double lo = -1.0, double hi = 1.0) { return random_tensor(s, rng, lo, hi); };
  // Values kept away from the kink of relu and from ties in max pooling.
  auto away = [&](ad::Shape s) {
    Tensor t = r(s, 0.1, 1.0);
    std::bernoulli_distribution flip(0.5);
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (flip(rng)) t[i] = -t[i];
    }
    return t;
  };

  check("add", [](Graph&, const auto& v) { return ad::add(v[0], v[1]); }, {r({2, 3, 4}), r({2, 3, 4})});
  check("sub", [](Graph&, const auto& v) { return ad::sub(v[0], v[1]); }, {r({2, 3, 4}), r({2, 3, 4})});
  check("mul", [](Graph&, const auto& v) { return ad::mul(v[0], v[1]); }, {r({2, 3, 4}), r({2, 3, 4})});
  check("mul_broadcast_channel", [](Graph&, const auto& v) { return ad::mul(v[0], v[1]); },
        {r({3, 4, 4}), r({3, 1, 1})});
  check("mul_broadcast_spatial", [](Graph&, const auto& v) { return ad::mul(v[1], v[0]); },
        {r({3, 4, 4}), r({1, 4, 4})});
  check("scale_const", [](Graph&, const auto& v) { return ad::scale(v[0], -1.7); }, {r({5})});
  check("scale_var", [](Graph&, const auto& v) { return ad::scale(v[0], v[1]); }, {r({2, 5}), r({1})});
  check("divide", [](Graph&, const auto& v) { return ad::divide(v[0], v[1]); }, {r({6}), r({6}, 0.5, 2.0)});
  check("relu", [](Graph&, const auto& v) { return ad::relu(v[0]); }, {away({3, 4, 4})});
  check("sigmoid", [](Graph&, const auto& v) { return ad::sigmoid(v[0]); }, {r({3, 4}, -4.0, 4.0)});
  check("softplus", [](Graph&, const auto& v) { return ad::softplus(v[0]); }, {r({3, 4}, -4.0, 4.0)});
  check("sum", [](Graph&, const auto& v) { return ad::sum(v[0]); }, {r({2, 3, 3})});
  check("dot", [](Graph&, const auto& v) { return ad::dot(v[0], v[1]); }, {r({7}), r({7})});
  check("l2_norm", [](Graph&, const auto& v) { return ad::l2_norm(v[0]); }, {r({2, 4, 4})});
  check("sum_squares", [](Graph&, const auto& v) { return ad::sum_squares(v[0]); }, {r({2, 4, 4})});
  check("conv2d_3x3", [](Graph&, const auto& v) { return ad::conv2d(v[0], v[1], v[2]); },
        {r({3, 6, 5}), r({4, 3, 3, 3}), r({4})});
  check("conv2d_1x1", [](Graph&, const auto& v) { return ad::conv2d(v[0], v[1]); }, {r({3, 4, 4}), r({2, 3, 1, 1})});
  check("conv2d_7x7", [](Graph&, const auto& v) { return ad::conv2d(v[0], v[1], v[2]); },
        {r({2, 8, 8}), r({1, 2, 7, 7}), r({1})});
  check("conv2d_dilated", [](Graph&, const auto& v) { return ad::conv2d(v[0], v[1], v[2], 3); },
        {r({2, 9, 9}), r({2, 2, 3, 3}), r({2})});
  check("conv2d_dilated_on_1x1", [](Graph&, const auto& v) { return ad::conv2d(v[0], v[1], 5); },
        {r({3, 1, 1}), r({3, 3, 3, 3})});
  check("channel_pool_avg", [](Graph&, const auto& v) { return ad::channel_pool(v[0], ad::PoolMode::Avg); },
        {r({4, 3, 3})});
  check("channel_pool_max", [](Graph&, const auto& v) { return ad::channel_pool(v[0], ad::PoolMode::Max); },
        {r({4, 3, 3})});
  check("global_pool_avg", [](Graph&, const auto& v) { return ad::global_pool(v[0], ad::PoolMode::Avg); },
        {r({3, 4, 4})});
  check("global_pool_max", [](Graph&, const auto& v) { return ad::global_pool(v[0], ad::PoolMode::Max); },
        {r({3, 4, 4})});
  check("concat_channels", [](Graph&, const auto& v) { return ad::concat_channels(std::vector<Var>{v[0], v[1]}); },
        {r({2, 3, 3}), r({1, 3, 3})});
  check("fft2c",
        [](Graph&, const auto& v) {
          return ad::linear_map(v[0], [](const Tensor& x) { return mri::fft2c(x); },
                                [](const Tensor& y) { return mri::ifft2c(y); });
        },
        {r({2, 8, 8})});

  const auto mask = mri::make_mask(mri::MaskSpec{mri::MaskPattern::Random1D, 2, 0.25, seed}, 8, 8);
  check("cg_solve",
        [&mask](Graph&, const auto& v) {
          return net::cg_solve(v[0], *mask, ad::softplus(v[1]), mri::CgOptions{8, 1e-6});
        },
        {r({2, 8, 8}), r({1}, -2.0, 0.0)});

  // Model-level checks go through the parameter binding.
  net::ReconConfig rc;
  rc.depth = 2;
  rc.width = 4;
  const ParamSet params = net::make_params(rc, seed);
  auto model_check = [&](const std::string& name, double tol,
                         std::function<Var(const net::ModelVars&, Var)> body) {
    std::vector<Tensor> inputs;
    for (const auto& p : params) inputs.push_back(p.value);
    inputs.push_back(r({2, 8, 8}));
    auto op = [&params, body](Graph&, const std::vector<Var>& v) {
      const net::ModelVars vars = net::bind_vars(params, std::vector<Var>(v.begin(), v.end() - 1));
      return body(vars, v.back());
    };
    const double err = gradient_error(projected(op, rng()), std::move(inputs), rng);
    out.push_back(CheckResult{name, err, tol, err < tol});
  };
  model_check("rslam", 1e-4, [](const net::ModelVars& vars, Var x) { return net::rslam(x, vars.rslam); });
  model_check("unrolled_model_8x8_J2", 1e-3, [mask, rc](const net::ModelVars& vars, Var x) {
    return net::unrolled_forward(x, *mask, vars, rc);
  });
  return out;
}

std::vector<CheckResult> selftest(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  std::vector<CheckResult> out;
  auto add = [&](const std::string& name, double value, double tol) {
    out.push_back(CheckResult{name, value, tol, std::isfinite(value) && value <= tol});
  };
  auto random_image = [&](std::size_t n) {
    mri::ComplexImage x(n, n);
    for (auto& v : x.values()) v = {n01(rng), n01(rng)};
    return x;
  };

  const std::size_t n = 32;
  const auto x = random_image(n);
  const auto y = random_image(n);

  const auto fx = mri::fft2c(x);
  add("fft_norm_preserved", std::abs(fx.norm() - x.norm()) / x.norm(), 1e-12);
  const auto back = mri::ifft2c(fx);
  double err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) err = std::max(err, std::abs(back[i] - x[i]));
  add("fft_roundtrip", err, 1e-12);

  const auto mask = mri::make_mask(mri::MaskSpec{mri::MaskPattern::Random1D, 4, 0.08, seed}, n, n);
  const auto ax = mri::forward_op(x, mask);
  const mri::KSpace ky(mri::fft2c(y));
  const auto aty = mri::adjoint_op(ky, mask);
  add("adjoint_identity", std::abs(mri::inner(ax, ky) - mri::inner(x, aty)) / (ax.norm() * ky.norm()), 1e-12);

  // (A^H A + lambda I) is diagonal in k-space, so its inverse is exact there.
  const double lambda = 0.05;
  const auto cg = mri::cg_solve(x, *mask, lambda, mri::CgOptions{100, 1e-14});
  auto kx = mri::fft2c(x);
  for (std::size_t i = 0; i < kx.size(); ++i) kx.values()[i] /= ((*mask)[i] + lambda);
  const auto exact = mri::ifft2c(kx);
  double num = 0.0;
  for (std::size_t i = 0; i < exact.size(); ++i) num += std::norm(cg.solution[i] - exact[i]);
  add("cg_matches_fourier_inverse", std::sqrt(num) / exact.norm(), 1e-8);

  const std::vector<double> logits{1.0, 2.0, 3.0};
  const auto w = fed::adaptive_weights(logits);
  const double expect[] = {0.0900305731703805, 0.2447284710547976, 0.6652409557748219};
  double werr = 0.0;
  for (std::size_t i = 0; i < 3; ++i) werr = std::max(werr, std::abs(w[i] - expect[i]));
  add("softmax_values", werr, 1e-12);
  const std::vector<std::size_t> counts{10, 30, 60};
  const auto fw = fed::fedavg_weights(counts);
  add("fedavg_weights_sum", std::abs(fw[0] + fw[1] + fw[2] - 1.0), 1e-12);

  ad::Tensor img({n, n});
  std::uniform_real_distribution<double> u(0.0, 0.9);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = u(rng);
  add("ssim_identity", std::abs(metrics::ssim(img, img) - 1.0), 1e-12);
  ad::Tensor shifted = img;
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += 0.1;
  add("psnr_uniform_offset", std::abs(metrics::psnr(shifted, img, 1.0) - 20.0), 1e-9);

  add("mask_sampling_rate", std::abs(mask->sampled_fraction() - 0.25), 0.5 / static_cast<double>(n));
  return out;
}

}  // namespace modfed::harness
