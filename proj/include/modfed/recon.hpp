#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "modfed/graph.hpp"
#include "modfed/mri.hpp"
#include "modfed/params.hpp"

namespace modfed::net {

struct ReconConfig {
  int depth = 2;           // number of denoiser / data-consistency alternations
  int width = 16;          // hidden channels in the denoiser
  double lambda_init = 0.05;
  mri::CgOptions cg{};
};

// ---- Parameter layout -----------------------------------------------------------
//
//   rslam.block{1..4}.conv{a,b}.{weight,bias}   conv-conv-relu stack
//   rslam.slam.spatial.{weight,bias}            7x7 conv over [avg, max] maps
//   rslam.slam.pyramid.d{3,5,7}.{weight,bias}   dilated convs on pooled descriptors
//   rslam.slam.fuse_{avg,max}.{weight,bias}     3x3 convs, 3C -> C
//   rslam.final.{weight,bias}                   C -> 2 output conv
//   lambda.raw                                  lambda = softplus(raw)

inline constexpr int kDenoiserBlocks = 4;
inline constexpr std::array<int, 3> kPyramidDilations{3, 5, 7};
inline constexpr const char* kLambdaName = "lambda.raw";

ParamSet make_params(const ReconConfig& config, std::uint64_t seed);
double lambda_from_raw(double raw);
double raw_from_lambda(double lambda);

// Graph handles for one bound copy of the parameters.
struct SlamVars {
  ad::Var spatial_w, spatial_b;
  std::array<ad::Var, 3> pyramid_w, pyramid_b;
  ad::Var fuse_avg_w, fuse_avg_b, fuse_max_w, fuse_max_b;
};

struct RslamVars {
  std::array<ad::Var, 2 * kDenoiserBlocks> conv_w, conv_b;
  SlamVars slam;
  ad::Var final_w, final_b;
};

struct ModelVars {
  RslamVars rslam;
  ad::Var lambda_raw;
  // Leaves in ParamSet order, for reading gradients back.
  std::vector<ad::Var> leaves;
};

// Places every parameter on `graph`, as trainable leaves or as constants.
ModelVars bind(ad::Graph& graph, const ParamSet& params, bool trainable);
// Wires already recorded vars, one per parameter in ParamSet order.
ModelVars bind_vars(const ParamSet& params, std::vector<ad::Var> leaves);
Gradients collect_gradients(const ad::Graph& graph, const ModelVars& vars);

// sigmoid(conv7x7([avg_c(F), max_c(F)])) -> 1 x H x W
ad::Var spatial_attention(ad::Var features, const SlamVars& p);
// sigmoid(fuse_avg(pyr(g_avg)) + fuse_max(pyr(g_max))) -> C x 1 x 1, where
// pyr(g) = [relu(D3 g), relu(D5 g), relu(D7 g)] with shared dilated kernels.
ad::Var laplacian_attention(ad::Var features, const SlamVars& p);
// G = M_L(F) * F;  out = M_S(G) * G
ad::Var slam(ad::Var features, const SlamVars& p);
// x + final(slam(stack(x)))
ad::Var rslam(ad::Var x, const RslamVars& p);

// Conjugate gradients on (A^H A + lambda I) m = rhs recorded op by op, so the
// backward pass differentiates through the executed iterations.
ad::Var cg_solve(ad::Var rhs, const mri::SamplingMask& mask, ad::Var lambda,
                 const mri::CgOptions& options);

// m^0 = A^H b; r^j = rslam(m^j); m^{j+1} = (A^H A + lambda I)^{-1}(A^H b + lambda r^j)
ad::Var unrolled_forward(ad::Var zero_filled, const mri::SamplingMask& mask, const ModelVars& vars,
                         const ReconConfig& config);

// Forward pass without recording gradients; input and output are 2 x H x W.
ad::Tensor reconstruct(const ParamSet& params, const ReconConfig& config,
                       const ad::Tensor& zero_filled, const mri::SamplingMask& mask);

// ---- Partitioning ------------------------------------------------------------------

enum class PartitionScheme { AllGlobal, SlamLocal, Custom };

const char* to_string(PartitionScheme s) noexcept;
PartitionScheme partition_scheme_from_string(const std::string& s);

struct PartitionSpec {
  PartitionScheme scheme = PartitionScheme::SlamLocal;
  // For Custom: exact parameter names, or dotted prefixes such as "rslam.final".
  std::vector<std::string> local_names;
};

// Tags every parameter; returns (global-shared names, local-personalized names).
std::pair<std::vector<std::string>, std::vector<std::string>> partition_params(
    ParamSet& params, const PartitionSpec& spec);

// ---- Checkpoints -------------------------------------------------------------------
//
// Little-endian archive:
//   char[8] "MFCKPT01", u32 version (1), u32 count
//   count x { u32 name length, name bytes, u8 partition (0 global, 1 local),
//             u32 rank, u64 dims[rank], f64 values[prod(dims)] }
//   u32 CRC-32 of every preceding byte

void save_checkpoint(const std::string& path, const ParamSet& params);
ParamSet load_checkpoint(const std::string& path);

}  // namespace modfed::net
