#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "modfed/error.hpp"
#include "modfed/recon.hpp"

using namespace modfed;
using namespace modfed::net;
using ad::Tensor;

namespace {

Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

ParamSet small_params(std::uint64_t seed, int width = 4) {
  ReconConfig cfg;
  cfg.width = width;
  return make_params(cfg, seed);
}

void zero_param(ParamSet& p, const std::string& name) {
  auto& t = p.get(name).value;
  t = Tensor(t.shape());
}

void zero_attention(ParamSet& p) {
  for (auto& q : p) {
    if (q.name.rfind("rslam.slam.", 0) == 0) q.value = Tensor(q.value.shape());
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Center tap of a C_out x C_in x 3 x 3 kernel applied to a 1 x 1 map.
std::vector<double> center_tap(const Tensor& w, const Tensor& b, const std::vector<double>& in) {
  const std::size_t co = w.dim(0), ci = w.dim(1), k = w.dim(2);
  std::vector<double> out(co);
  for (std::size_t o = 0; o < co; ++o) {
    double s = b[o];
    for (std::size_t i = 0; i < ci; ++i) s += w[((o * ci + i) * k + k / 2) * k + k / 2] * in[i];
    out[o] = s;
  }
  return out;
}

std::vector<double> laplacian_oracle(const Tensor& f, const ParamSet& p) {
  const std::size_t c = f.dim(0), hw = f.dim(1) * f.dim(2);
  std::vector<double> avg(c, 0.0), mx(c, -1e300);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < hw; ++i) {
      avg[ch] += f[ch * hw + i];
      mx[ch] = std::max(mx[ch], f[ch * hw + i]);
    }
    avg[ch] /= static_cast<double>(hw);
  }
  auto pyr = [&](const std::vector<double>& g) {
    std::vector<double> cat;
    for (int d : {3, 5, 7}) {
      const std::string stem = "rslam.slam.pyramid.d" + std::to_string(d);
      for (double v : center_tap(p.get(stem + ".weight").value, p.get(stem + ".bias").value, g)) {
        cat.push_back(std::max(v, 0.0));
      }
    }
    return cat;
  };
  const auto a = center_tap(p.get("rslam.slam.fuse_avg.weight").value,
                            p.get("rslam.slam.fuse_avg.bias").value, pyr(avg));
  const auto m = center_tap(p.get("rslam.slam.fuse_max.weight").value,
                            p.get("rslam.slam.fuse_max.bias").value, pyr(mx));
  std::vector<double> out(c);
  for (std::size_t ch = 0; ch < c; ++ch) out[ch] = sigmoid(a[ch] + m[ch]);
  return out;
}

Tensor zero_filled_of(const mri::ComplexImage& truth, const std::shared_ptr<const mri::SamplingMask>& mask) {
  return mri::to_channels(mri::adjoint_op(mri::forward_op(truth, mask), mask));
}

mri::ComplexImage random_image(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  mri::ComplexImage x(n, n);
  for (auto& v : x.values()) v = {g(rng), g(rng)};
  return x;
}

}  // namespace

TEST_CASE("spatial attention with zero weights is 0.5 everywhere") {
  std::mt19937_64 rng(1);
  ParamSet p = small_params(1);
  zero_attention(p);
  ad::Graph g;
  const auto vars = bind(g, p, false);
  ad::Var out = spatial_attention(g.constant(random_tensor({4, 6, 5}, rng)), vars.rslam.slam);
  CHECK(out.shape() == ad::Shape{1, 6, 5});
  for (double v : out.value().values()) CHECK(v == 0.5);
}

TEST_CASE("spatial attention ignores channel order") {
  std::mt19937_64 rng(2);
  const ParamSet p = small_params(2);
  const Tensor f = random_tensor({4, 8, 8}, rng);
  Tensor perm(f.shape());
  const std::array<std::size_t, 4> order{2, 0, 3, 1};
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 64; ++i) perm[c * 64 + i] = f[order[c] * 64 + i];
  }
  ad::Graph g;
  const auto vars = bind(g, p, false);
  const Tensor a = spatial_attention(g.constant(f), vars.rslam.slam).value();
  const Tensor b = spatial_attention(g.constant(perm), vars.rslam.slam).value();
  CHECK(ad::max_abs_diff(a, b) < 1e-15);
}

TEST_CASE("laplacian attention with zero weights is 0.5 per channel") {
  std::mt19937_64 rng(3);
  ParamSet p = small_params(3);
  zero_attention(p);
  ad::Graph g;
  const auto vars = bind(g, p, false);
  const Tensor out = laplacian_attention(g.constant(random_tensor({4, 8, 8}, rng)), vars.rslam.slam).value();
  CHECK(out.shape() == ad::Shape{4, 1, 1});
  for (double v : out.values()) CHECK(v == 0.5);
}

TEST_CASE("laplacian attention matches a loop oracle") {
  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    std::mt19937_64 rng(seed);
    const ParamSet p = small_params(seed);
    const Tensor f = random_tensor({4, 8, 6}, rng);
    ad::Graph g;
    const auto vars = bind(g, p, false);
    const Tensor out = laplacian_attention(g.constant(f), vars.rslam.slam).value();
    const auto want = laplacian_oracle(f, p);
    for (std::size_t c = 0; c < want.size(); ++c) CHECK(std::abs(out[c] - want[c]) < 1e-12);
  }
}

TEST_CASE("constant input feeds both pyramid branches the same descriptor") {
  ParamSet p = small_params(4);
  // Share the fusion weights so equal descriptors mean equal branch outputs.
  p.get("rslam.slam.fuse_max.weight").value = p.get("rslam.slam.fuse_avg.weight").value;
  p.get("rslam.slam.fuse_max.bias").value = p.get("rslam.slam.fuse_avg.bias").value;
  Tensor f({4, 5, 5});
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 25; ++i) f[c * 25 + i] = 0.3 * static_cast<double>(c) - 0.4;
  }
  ad::Graph g;
  const auto vars = bind(g, p, false);
  const Tensor out = laplacian_attention(g.constant(f), vars.rslam.slam).value();
  const Tensor& w = p.get("rslam.slam.fuse_avg.weight").value;
  const Tensor& b = p.get("rslam.slam.fuse_avg.bias").value;
  std::vector<double> desc{-0.4, -0.1, 0.2, 0.5};
  std::vector<double> cat;
  for (int d : {3, 5, 7}) {
    const std::string stem = "rslam.slam.pyramid.d" + std::to_string(d);
    for (double v : center_tap(p.get(stem + ".weight").value, p.get(stem + ".bias").value, desc)) {
      cat.push_back(std::max(v, 0.0));
    }
  }
  const auto branch = center_tap(w, b, cat);
  for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(out[c] - sigmoid(2.0 * branch[c])) < 1e-12);
}

TEST_CASE("attention maps stay strictly inside (0, 1)") {
  for (std::uint64_t seed = 20; seed < 30; ++seed) {
    std::mt19937_64 rng(seed);
    const ParamSet p = small_params(seed);
    ad::Graph g;
    const auto vars = bind(g, p, false);
    ad::Var f = g.constant(random_tensor({4, 8, 8}, rng, -3.0, 3.0));
    for (const ad::Var& a : {spatial_attention(f, vars.rslam.slam), laplacian_attention(f, vars.rslam.slam)}) {
      for (double v : a.value().values()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
      }
    }
  }
}

TEST_CASE("slam with zero attention weights scales by 0.25") {
  std::mt19937_64 rng(5);
  ParamSet p = small_params(5);
  zero_attention(p);
  const Tensor f = random_tensor({4, 8, 8}, rng);
  ad::Graph g;
  const auto vars = bind(g, p, false);
  const Tensor out = slam(g.constant(f), vars.rslam.slam).value();
  for (std::size_t i = 0; i < f.size(); ++i) CHECK(out[i] == 0.25 * f[i]);
}

TEST_CASE("slam of zero is zero") {
  const ParamSet p = small_params(6);
  ad::Graph g;
  const auto vars = bind(g, p, false);
  const Tensor out = slam(g.constant(Tensor({4, 6, 6})), vars.rslam.slam).value();
  for (double v : out.values()) CHECK(v == 0.0);
}

TEST_CASE("slam equals channel gate then spatial gate") {
  std::mt19937_64 rng(7);
  const ParamSet p = small_params(7);
  const Tensor f = random_tensor({4, 8, 8}, rng);
  ad::Graph g;
  const auto vars = bind(g, p, false);
  const Tensor out = slam(g.constant(f), vars.rslam.slam).value();

  const Tensor gate = laplacian_attention(g.constant(f), vars.rslam.slam).value();
  Tensor gated(f.shape());
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 64; ++i) gated[c * 64 + i] = gate[c] * f[c * 64 + i];
  }
  const Tensor spatial = spatial_attention(g.constant(gated), vars.rslam.slam).value();
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 64; ++i) CHECK(out[c * 64 + i] == spatial[i] * gated[c * 64 + i]);
  }
}

TEST_CASE("rslam is the identity when the final conv is zero") {
  std::mt19937_64 rng(8);
  ParamSet p = small_params(8);
  zero_param(p, "rslam.final.weight");
  zero_param(p, "rslam.final.bias");
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{8, 8}, {5, 11}}) {
    const Tensor x = random_tensor({2, h, w}, rng);
    ad::Graph g;
    const auto vars = bind(g, p, false);
    CHECK(rslam(g.constant(x), vars.rslam).value() == x);
  }
}

TEST_CASE("rslam keeps the shape and rejects non 2-channel input") {
  std::mt19937_64 rng(9);
  const ParamSet p = small_params(9);
  ad::Graph g;
  const auto vars = bind(g, p, false);
  CHECK(rslam(g.constant(random_tensor({2, 7, 9}, rng)), vars.rslam).shape() == ad::Shape{2, 7, 9});
  CHECK_THROWS_AS(rslam(g.constant(random_tensor({3, 4, 4}, rng)), vars.rslam), ShapeError);
}

TEST_CASE("fully sampled unroll follows the scalar recursion") {
  const std::size_t n = 8;
  std::mt19937_64 rng(11);
  const auto mask = mri::full_mask(n, n);
  const auto truth = random_image(n, rng);
  const Tensor m_true = mri::to_channels(truth);
  const Tensor x0 = zero_filled_of(truth, mask);
  CHECK(ad::max_abs_diff(x0, m_true) < 1e-12);

  for (double lambda : {0.1, 1.0, 4.0}) {
    ParamSet p = small_params(11);
    zero_param(p, "rslam.final.weight");
    // The bias shifts each channel, so the denoiser is x + c instead of x.
    p.get("rslam.final.bias").value = Tensor({2}, std::vector<double>{0.3, -0.2});
    p.get(kLambdaName).value[0] = raw_from_lambda(lambda);
    ReconConfig cfg;
    cfg.width = 4;
    cfg.depth = 3;
    cfg.cg = {20, 1e-12};
    const Tensor out = reconstruct(p, cfg, x0, *mask);

    Tensor m = x0;
    for (int j = 0; j < cfg.depth; ++j) {
      for (std::size_t i = 0; i < m.size(); ++i) {
        const double shift = i < n * n ? 0.3 : -0.2;
        m[i] = (m_true[i] + lambda * (m[i] + shift)) / (1.0 + lambda);
      }
    }
    CHECK(ad::max_abs_diff(out, m) < 1e-10);
    CHECK(out.shape() == x0.shape());
  }
}

TEST_CASE("identity denoiser on fully sampled data reproduces the truth") {
  const std::size_t n = 8;
  std::mt19937_64 rng(12);
  const auto mask = mri::full_mask(n, n);
  const auto truth = random_image(n, rng);
  ParamSet p = small_params(12);
  zero_param(p, "rslam.final.weight");
  zero_param(p, "rslam.final.bias");
  ReconConfig cfg;
  cfg.width = 4;
  cfg.depth = 4;
  const Tensor out = reconstruct(p, cfg, zero_filled_of(truth, mask), *mask);
  CHECK(ad::max_abs_diff(out, mri::to_channels(truth)) < 1e-12);
}

TEST_CASE("data consistency step with zero prior is the Tikhonov solution") {
  const std::size_t n = 16;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const auto mask = mri::make_mask({mri::MaskPattern::Random1D, 4, 0.08, seed}, n, n);
    const auto truth = random_image(n, rng);
    const Tensor rhs = zero_filled_of(truth, mask);
    const double lambda = 0.05 + 0.5 * static_cast<double>(seed);

    ad::Graph g;
    // m = (A^H A + lambda I)^{-1}(A^H b + lambda * 0)
    const Tensor got =
        cg_solve(g.constant(rhs), *mask, g.constant(Tensor::scalar(lambda)), {60, 1e-13}).value();

    mri::KSpace k = mri::fft2c(mri::image_from_channels(rhs));
    for (std::size_t i = 0; i < k.size(); ++i) k.values()[i] /= ((*mask)[i] + lambda);
    const Tensor want = mri::to_channels(mri::ifft2c(k));
    Tensor diff = got;
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= want[i];
    CHECK(ad::norm2(diff) / ad::norm2(want) < 1e-8);
  }
}

TEST_CASE("distance to the zero-filled input grows with lambda") {
  // lambda weights the denoiser term, so data consistency dominates as it shrinks.
  const std::size_t n = 8;
  std::mt19937_64 rng(13);
  const auto truth = random_image(n, rng);
  for (const auto& mask : {mri::full_mask(n, n), mri::make_mask({mri::MaskPattern::Random1D, 2, 0.1, 3}, n, n)}) {
    const Tensor x0 = zero_filled_of(truth, mask);
    std::vector<double> dist;
    for (double lambda : {0.1, 1.0, 10.0}) {
      ParamSet p = small_params(13);
      p.get(kLambdaName).value[0] = raw_from_lambda(lambda);
      ReconConfig cfg;
      cfg.width = 4;
      cfg.depth = 1;
      cfg.cg = {40, 1e-12};
      Tensor out = reconstruct(p, cfg, x0, *mask);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] -= x0[i];
      dist.push_back(ad::norm2(out));
    }
    CHECK(dist[0] < dist[1]);
    CHECK(dist[1] < dist[2]);
  }
}

TEST_CASE("lambda parameterisation round trips") {
  for (double l : {1e-4, 0.05, 1.0, 10.0, 50.0}) CHECK(std::abs(lambda_from_raw(raw_from_lambda(l)) - l) < 1e-12 * std::max(1.0, l));
  CHECK_THROWS_AS(raw_from_lambda(0.0), ConfigError);
  ReconConfig cfg;
  cfg.lambda_init = 0.05;
  const ParamSet p = make_params(cfg, 1);
  CHECK(std::abs(lambda_from_raw(p.get(kLambdaName).value[0]) - 0.05) < 1e-15);
}

TEST_CASE("partition schemes") {
  ParamSet p = small_params(14);
  const std::size_t total = p.size();

  auto [g_all, l_all] = partition_params(p, {PartitionScheme::AllGlobal, {}});
  CHECK(l_all.empty());
  CHECK(g_all.size() == total);

  auto [g, l] = partition_params(p, {PartitionScheme::SlamLocal, {}});
  CHECK(g.size() + l.size() == total);
  for (const auto& name : l) CHECK((name.rfind("rslam.slam.", 0) == 0 || name.rfind("rslam.final.", 0) == 0));
  CHECK(std::find(g.begin(), g.end(), kLambdaName) != g.end());
  CHECK(p.get("rslam.block1.conva.weight").partition == Partition::GlobalShared);
  CHECK(p.get("rslam.slam.spatial.weight").partition == Partition::LocalPersonalized);

  auto [gc, lc] = partition_params(p, {PartitionScheme::Custom, {"rslam.final"}});
  CHECK(lc == std::vector<std::string>{"rslam.final.weight", "rslam.final.bias"});
  CHECK(gc.size() == total - 2);

  CHECK_THROWS_AS(partition_params(p, {PartitionScheme::Custom, {"rslam.fina"}}), ConfigError);
  CHECK_THROWS_AS(partition_scheme_from_string("SOME_LOCAL"), ConfigError);
  CHECK(partition_scheme_from_string(to_string(PartitionScheme::SlamLocal)) == PartitionScheme::SlamLocal);
}

TEST_CASE("checkpoint round trip keeps values and tags") {
  ParamSet p = small_params(15);
  partition_params(p, {PartitionScheme::SlamLocal, {}});
  const auto dir = std::filesystem::temp_directory_path() / "modfed_test_recon";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "model.ckpt").string();
  save_checkpoint(path, p);
  const ParamSet q = load_checkpoint(path);
  CHECK(q == p);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(q[i].partition == p[i].partition);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("bind_vars rejects a wrong number of vars") {
  const ParamSet p = small_params(16);
  CHECK_THROWS_AS(bind_vars(p, {}), ShapeError);
}
