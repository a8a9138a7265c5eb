#include "modfed/recon.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

#include <fmt/format.h>
#include <zlib.h>

#include "modfed/error.hpp"

namespace modfed::net {

using ad::Graph;
using ad::Tensor;
using ad::Var;

namespace {

std::string conv_stem(int index) {
  return fmt::format("rslam.block{}.conv{}", index / 2 + 1, index % 2 == 0 ? 'a' : 'b');
}

void add_conv(ParamSet& params, std::mt19937_64& rng, const std::string& stem, std::size_t c_out,
              std::size_t c_in, std::size_t k) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(c_in * k * k));
  std::uniform_real_distribution<double> uni(-bound, bound);
  Tensor w({c_out, c_in, k, k});
  for (double& v : w.values()) v = uni(rng);
  Tensor b({c_out});
  for (double& v : b.values()) v = uni(rng);
  params.add(stem + ".weight", std::move(w));
  params.add(stem + ".bias", std::move(b));
}

}  // namespace

double lambda_from_raw(double raw) {
  return raw > 0.0 ? raw + std::log1p(std::exp(-raw)) : std::log1p(std::exp(raw));
}

double raw_from_lambda(double lambda) {
  if (!(lambda > 0.0)) throw ConfigError("lambda must be > 0");
  return lambda > 30.0 ? lambda + std::log(-std::expm1(-lambda)) : std::log(std::expm1(lambda));
}

ParamSet make_params(const ReconConfig& config, std::uint64_t seed) {
  if (config.depth < 1) throw ConfigError("unroll depth must be >= 1");
  if (config.width < 1) throw ConfigError("hidden width must be >= 1");
  const auto c = static_cast<std::size_t>(config.width);
  std::mt19937_64 rng(seed);
  ParamSet params;
  for (int i = 0; i < 2 * kDenoiserBlocks; ++i) {
    const std::size_t c_in = i == 0 ? 2 : c;
    add_conv(params, rng, conv_stem(i), c, c_in, 3);
  }
  add_conv(params, rng, "rslam.slam.spatial", 1, 2, 7);
  for (int d : kPyramidDilations) add_conv(params, rng, fmt::format("rslam.slam.pyramid.d{}", d), c, c, 3);
  add_conv(params, rng, "rslam.slam.fuse_avg", c, 3 * c, 3);
  add_conv(params, rng, "rslam.slam.fuse_max", c, 3 * c, 3);
  add_conv(params, rng, "rslam.final", 2, c, 3);
  params.add(kLambdaName, Tensor::scalar(raw_from_lambda(config.lambda_init)));
  return params;
}

ModelVars bind(Graph& graph, const ParamSet& params, bool trainable) {
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  // Leaves are created in ParamSet order so gradients line up by index.
  for (const auto& p : params) {
    leaves.push_back(trainable ? graph.leaf(p.value) : graph.constant(p.value));
  }
  return bind_vars(params, std::move(leaves));
}

ModelVars bind_vars(const ParamSet& params, std::vector<Var> leaves) {
  if (leaves.size() != params.size()) {
    throw ShapeError(fmt::format("bind_vars: {} vars for {} parameters", leaves.size(), params.size()));
  }
  ModelVars vars;
  vars.leaves = std::move(leaves);
  auto leaf = [&](const std::string& name) {
    auto idx = params.find(name);
    if (!idx) throw ContractError(fmt::format("model is missing parameter '{}'", name));
    return vars.leaves[*idx];
  };
  auto& r = vars.rslam;
  for (int i = 0; i < 2 * kDenoiserBlocks; ++i) {
    r.conv_w[static_cast<std::size_t>(i)] = leaf(conv_stem(i) + ".weight");
    r.conv_b[static_cast<std::size_t>(i)] = leaf(conv_stem(i) + ".bias");
  }
  r.slam.spatial_w = leaf("rslam.slam.spatial.weight");
  r.slam.spatial_b = leaf("rslam.slam.spatial.bias");
  for (std::size_t i = 0; i < kPyramidDilations.size(); ++i) {
    r.slam.pyramid_w[i] = leaf(fmt::format("rslam.slam.pyramid.d{}.weight", kPyramidDilations[i]));
    r.slam.pyramid_b[i] = leaf(fmt::format("rslam.slam.pyramid.d{}.bias", kPyramidDilations[i]));
  }
  r.slam.fuse_avg_w = leaf("rslam.slam.fuse_avg.weight");
  r.slam.fuse_avg_b = leaf("rslam.slam.fuse_avg.bias");
  r.slam.fuse_max_w = leaf("rslam.slam.fuse_max.weight");
  r.slam.fuse_max_b = leaf("rslam.slam.fuse_max.bias");
  r.final_w = leaf("rslam.final.weight");
  r.final_b = leaf("rslam.final.bias");
  vars.lambda_raw = leaf(kLambdaName);
  return vars;
}

Gradients collect_gradients(const Graph& graph, const ModelVars& vars) {
  Gradients g;
  g.reserve(vars.leaves.size());
  for (const Var& v : vars.leaves) g.push_back(graph.grad(v));
  return g;
}

Var spatial_attention(Var features, const SlamVars& p) {
  const std::array<Var, 2> pooled{ad::channel_pool(features, ad::PoolMode::Avg),
                                  ad::channel_pool(features, ad::PoolMode::Max)};
  return ad::sigmoid(ad::conv2d(ad::concat_channels(pooled), p.spatial_w, p.spatial_b));
}

namespace {

Var pyramid(Var descriptor, const SlamVars& p) {
  std::array<Var, 3> scales;
  for (std::size_t i = 0; i < scales.size(); ++i) {
    scales[i] = ad::relu(ad::conv2d(descriptor, p.pyramid_w[i], p.pyramid_b[i], kPyramidDilations[i]));
  }
  return ad::concat_channels(scales);
}

}  // namespace

Var laplacian_attention(Var features, const SlamVars& p) {
  Var avg = pyramid(ad::global_pool(features, ad::PoolMode::Avg), p);
  Var max = pyramid(ad::global_pool(features, ad::PoolMode::Max), p);
  return ad::sigmoid(ad::add(ad::conv2d(avg, p.fuse_avg_w, p.fuse_avg_b),
                             ad::conv2d(max, p.fuse_max_w, p.fuse_max_b)));
}

Var slam(Var features, const SlamVars& p) {
  Var gated = ad::mul(laplacian_attention(features, p), features);
  return ad::mul(spatial_attention(gated, p), gated);
}

Var rslam(Var x, const RslamVars& p) {
  if (x.value().rank() != 3 || x.value().dim(0) != 2) {
    throw ShapeError(fmt::format("rslam expects 2 x H x W input, got {}", ad::shape_string(x.shape())));
  }
  Var h = x;
  for (int b = 0; b < kDenoiserBlocks; ++b) {
    const auto i = static_cast<std::size_t>(2 * b);
    h = ad::conv2d(h, p.conv_w[i], p.conv_b[i]);
    h = ad::relu(ad::conv2d(h, p.conv_w[i + 1], p.conv_b[i + 1]));
  }
  return ad::add(x, ad::conv2d(slam(h, p.slam), p.final_w, p.final_b));
}

Var cg_solve(Var rhs, const mri::SamplingMask& mask, Var lambda, const mri::CgOptions& options) {
  const double rhs_norm = ad::norm2(rhs.value());
  if (rhs_norm == 0.0) return ad::scale(rhs, 0.0);
  if (!(lambda.value().item() > 0.0)) throw ContractError("cg_solve: lambda must be > 0");

  const auto normal = [&mask](const Tensor& t) { return mri::normal_op(t, mask); };
  const auto apply = [&](Var p) {
    return ad::add(ad::linear_map(p, normal, normal), ad::scale(p, lambda));
  };

  Var x;
  Var r = rhs;
  Var p = rhs;
  Var rr = ad::dot(r, r);
  for (int it = 0; it < options.max_iters; ++it) {
    if (std::sqrt(rr.value()[0]) / rhs_norm <= options.tol) break;
    Var q = apply(p);
    Var alpha = ad::divide(rr, ad::dot(p, q));
    Var step = ad::scale(p, alpha);
    x = x.valid() ? ad::add(x, step) : step;
    r = ad::sub(r, ad::scale(q, alpha));
    Var rr_next = ad::dot(r, r);
    if (!std::isfinite(rr_next.value()[0])) {
      throw NumericError(fmt::format("CG residual became non-finite at iteration {}", it + 1));
    }
    if (it + 1 < options.max_iters && std::sqrt(rr_next.value()[0]) / rhs_norm > options.tol) {
      p = ad::add(r, ad::scale(p, ad::divide(rr_next, rr)));
    }
    rr = rr_next;
  }
  return x.valid() ? x : ad::scale(rhs, 0.0);
}

Var unrolled_forward(Var zero_filled, const mri::SamplingMask& mask, const ModelVars& vars,
                     const ReconConfig& config) {
  if (config.depth < 1) throw ConfigError("unroll depth must be >= 1");
  Var lambda = ad::softplus(vars.lambda_raw);
  Var m = zero_filled;
  for (int j = 0; j < config.depth; ++j) {
    Var denoised = rslam(m, vars.rslam);
    Var rhs = ad::add(zero_filled, ad::scale(denoised, lambda));
    try {
      m = cg_solve(rhs, mask, lambda, config.cg);
    } catch (const NumericError& e) {
      throw NumericError(fmt::format("unroll step {}: {}", j + 1, e.what()));
    }
  }
  return m;
}

Tensor reconstruct(const ParamSet& params, const ReconConfig& config, const Tensor& zero_filled,
                   const mri::SamplingMask& mask) {
  Graph graph;
  ModelVars vars = bind(graph, params, false);
  return unrolled_forward(graph.constant(zero_filled), mask, vars, config).value();
}

// ---- Partitioning -------------------------------------------------------------------

const char* to_string(PartitionScheme s) noexcept {
  switch (s) {
    case PartitionScheme::AllGlobal: return "ALL_GLOBAL";
    case PartitionScheme::SlamLocal: return "SLAM_LOCAL";
    case PartitionScheme::Custom: return "CUSTOM";
  }
  return "?";
}

PartitionScheme partition_scheme_from_string(const std::string& s) {
  if (s == "ALL_GLOBAL") return PartitionScheme::AllGlobal;
  if (s == "SLAM_LOCAL") return PartitionScheme::SlamLocal;
  if (s == "CUSTOM") return PartitionScheme::Custom;
  throw ConfigError(fmt::format("unknown partition scheme '{}' (expected ALL_GLOBAL, SLAM_LOCAL or CUSTOM)", s));
}

namespace {

bool matches(const std::string& name, const std::string& pattern) {
  return name == pattern ||
         (name.size() > pattern.size() && name.compare(0, pattern.size(), pattern) == 0 &&
          name[pattern.size()] == '.');
}

}  // namespace

std::pair<std::vector<std::string>, std::vector<std::string>> partition_params(
    ParamSet& params, const PartitionSpec& spec) {
  std::vector<std::string> local_patterns;
  switch (spec.scheme) {
    case PartitionScheme::AllGlobal: break;
    case PartitionScheme::SlamLocal: local_patterns = {"rslam.slam", "rslam.final"}; break;
    case PartitionScheme::Custom:
      local_patterns = spec.local_names;
      for (const auto& pattern : local_patterns) {
        bool found = false;
        for (const auto& p : params) found = found || matches(p.name, pattern);
        if (!found) {
          throw ConfigError(fmt::format("partition: no parameter matches '{}'", pattern));
        }
      }
      break;
  }
  std::pair<std::vector<std::string>, std::vector<std::string>> sets;
  for (auto& p : params) {
    bool local = false;
    for (const auto& pattern : local_patterns) local = local || matches(p.name, pattern);
    p.partition = local ? Partition::LocalPersonalized : Partition::GlobalShared;
    (local ? sets.second : sets.first).push_back(p.name);
  }
  return sets;
}

// ---- Checkpoints -----------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[8] = {'M', 'F', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void append_le(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  buf.append(bytes, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > buf_.size()) throw IoError("checkpoint: truncated archive");
    char bytes[sizeof(T)];
    std::memcpy(bytes, buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
  }

  std::string bytes(std::size_t n) {
    if (pos_ + n > buf_.size()) throw IoError("checkpoint: truncated archive");
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& buf_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const char* data, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamSet& params) {
  std::string buf(kCheckpointMagic, sizeof(kCheckpointMagic));
  append_le<std::uint32_t>(buf, kCheckpointVersion);
  append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(p.name.size()));
    buf += p.name;
    append_le<std::uint8_t>(buf, p.partition == Partition::LocalPersonalized ? 1 : 0);
    append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) append_le<std::uint64_t>(buf, d);
    for (double v : p.value.values()) append_le<double>(buf, v);
  }
  append_le<std::uint32_t>(buf, crc_of(buf.data(), buf.size()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(fmt::format("cannot open '{}' for writing", path));
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError(fmt::format("failed writing '{}'", path));
}

ParamSet load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(fmt::format("cannot open '{}'", path));
  const std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kCheckpointMagic) + 12 ||
      std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw IoError(fmt::format("'{}' is not a checkpoint archive", path));
  }
  Reader tail(buf);
  tail.bytes(buf.size() - 4);
  const auto stored = tail.get<std::uint32_t>();
  if (stored != crc_of(buf.data(), buf.size() - 4)) {
    throw IoError(fmt::format("checkpoint '{}' failed its checksum", path));
  }

  Reader r(buf);
  r.bytes(sizeof(kCheckpointMagic));
  if (r.get<std::uint32_t>() != kCheckpointVersion) throw IoError("unsupported checkpoint version");
  const auto count = r.get<std::uint32_t>();
  ParamSet params;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.get<std::uint32_t>());
    const auto tag = r.get<std::uint8_t>();
    const auto rank = r.get<std::uint32_t>();
    ad::Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    Tensor t(shape);
    for (double& v : t.values()) v = r.get<double>();
    params.add(std::move(name), std::move(t),
               tag == 1 ? Partition::LocalPersonalized : Partition::GlobalShared);
  }
  return params;
}

}  // namespace modfed::net
