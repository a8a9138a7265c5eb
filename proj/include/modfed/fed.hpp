#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "modfed/adamw.hpp"
#include "modfed/mri.hpp"
#include "modfed/params.hpp"
#include "modfed/recon.hpp"

namespace modfed::fed {

// One training example: network input (A^H b as 2 x H x W), ground truth in
// the same layout, and the mask the input was acquired with.
struct Sample {
  ad::Tensor input;
  ad::Tensor target;
  std::shared_ptr<const mri::SamplingMask> mask;
};

// The model family being federated. Losses are l2 norms ||f(x) - target||.
class Objective {
 public:
  virtual ~Objective() = default;

  virtual ad::Tensor predict(const ParamSet& params, const Sample& sample) const = 0;

  // Returns ||f(params, sample.input) - target||. When `grads` is non-null,
  // adds weight * d(loss)/d(params) into it.
  virtual double loss(const ParamSet& params, const Sample& sample, const ad::Tensor& target,
                      double weight, Gradients* grads) const = 0;

  // Whether predictions are 2-channel images that PSNR/SSIM apply to.
  virtual bool produces_images() const { return false; }
};

class ReconObjective final : public Objective {
 public:
  explicit ReconObjective(net::ReconConfig config) : config_(config) {}

  ad::Tensor predict(const ParamSet& params, const Sample& sample) const override;
  double loss(const ParamSet& params, const Sample& sample, const ad::Tensor& target,
              double weight, Gradients* grads) const override;
  bool produces_images() const override { return true; }

  const net::ReconConfig& config() const noexcept { return config_; }

 private:
  net::ReconConfig config_;
};

enum class Strategy { ModFed, FedAvg, FedProx, SingleSet };
// Literal: gamma * L_C is added to the logged objective only (it does not
// depend on client parameters). Consistency: gamma * mean ||f_k - f_C|| over
// subset 2, which does carry gradient.
enum class ClientLossMode { Literal, Consistency };

const char* to_string(Strategy s) noexcept;
Strategy strategy_from_string(const std::string& s);
const char* to_string(ClientLossMode m) noexcept;
ClientLossMode client_loss_mode_from_string(const std::string& s);

struct FedConfig {
  Strategy strategy = Strategy::ModFed;
  ClientLossMode loss_mode = ClientLossMode::Literal;
  int rounds = 30;        // T
  int local_epochs = 2;   // Z
  std::size_t batch_size = 4;
  double prox_mu = 0.01;
  AdamWConfig optimizer{};
  // Worker threads for the client phase of a round; 1 runs clients in order.
  int threads = 1;
  // PSNR/SSIM of the mixed model on subset 2 each round.
  bool validation_metrics = true;
};

struct ClientData {
  std::vector<Sample> s1;
  std::vector<Sample> s2;
};

struct ClientSetup {
  ClientData data;
  double gamma = 0.1;
  std::uint64_t seed = 0;
};

struct ClientState {
  int id = 0;
  ParamSet model;
  AdamW optimizer;
  ClientData data;
  double gamma = 0.1;
  std::uint64_t seed = 0;
  // Frozen copy of the full server model received this round.
  ParamSet server_copy;
  // Local epochs completed so far; drives the shuffle seed.
  std::uint64_t epochs_done = 0;
};

struct ServerState {
  ParamSet model;
  std::vector<double> alpha;
  int round = 0;
  int total_rounds = 0;
};

// Everything a client sends to the server: named tensors and scalar losses.
struct ClientUpload {
  int client = 0;
  ParamSet params;
  double loss_s1 = 0.0;
  double loss_s2 = 0.0;
  double loss_server = 0.0;
};

struct ClientRound {
  int client = 0;
  double loss_s1 = 0.0;      // mean minibatch data loss during local training
  double loss_s2 = 0.0;      // mixed model on subset 2, before training
  double loss_server = 0.0;  // frozen server model on subset 2
  double alpha = 0.0;
  double psnr_val = 0.0;
  double ssim_val = 0.0;
};

struct RoundReport {
  int round = 0;
  std::vector<ClientRound> clients;
  std::vector<double> alpha;
  double wall_seconds = 0.0;
};

ClientState make_client(int id, const ParamSet& init, ClientSetup setup,
                        const AdamWConfig& optimizer);

// Overwrites the client's GLOBAL_SHARED tensors with the server's and stashes
// the full server model. Tags come from the client's own parameter set.
void client_receive(ClientState& client, const ParamSet& server);

// Global-shared tensors from `server`, local-personalized from `client`.
ParamSet mixed_params(const ParamSet& client, const ParamSet& server);

// Mean over subset 2 of ||f(x; params) - m||; no gradient.
double eval_subset_loss(const Objective& objective, const ParamSet& params,
                        std::span<const Sample> samples);
double eval_server_loss(const Objective& objective, const ClientState& client);
double eval_mixed_loss(const Objective& objective, const ClientState& client,
                       const ParamSet& server);

struct TrainResult {
  double loss_s1 = 0.0;     // mean minibatch data loss
  double objective = 0.0;   // mean minibatch total objective, as logged
  std::size_t steps = 0;
};

// Z local epochs of AdamW over shuffled subset-1 minibatches. `loss_server` is
// L_C for the literal objective; `server_outputs` are f_C on subset 2, used by
// the consistency mode.
TrainResult client_train(const Objective& objective, ClientState& client, double loss_server,
                         const FedConfig& config,
                         std::span<const ad::Tensor> server_outputs = {});

// softmax(losses), max-shifted.
std::vector<double> adaptive_weights(std::span<const double> losses);
// N_k / sum N.
std::vector<double> fedavg_weights(std::span<const std::size_t> counts);

// sum_k alpha_k * params_k, accumulated from zero in client order; tags are
// taken from the first set.
ParamSet aggregate(std::span<const ParamSet> params, std::span<const double> alpha);

struct FederationResult {
  ParamSet server;
  // Final global-shared tensors from the server joined with each client's local ones.
  std::vector<ParamSet> personalized;
  std::vector<RoundReport> reports;
};

using RoundCallback =
    std::function<void(const RoundReport&, const ServerState&, std::span<const ClientState>)>;

// Each round distributes, evaluates L_C and L_Cs2, trains
// locally, uploads and aggregates. `init` carries the partition tags.
FederationResult run_federation(const Objective& objective, const ParamSet& init,
                                std::vector<ClientSetup> clients, const FedConfig& config,
                                const RoundCallback& on_round = {});

struct CentralizedResult {
  ParamSet params;
  std::vector<double> epoch_losses;
};

// Plain training on one data set with the same shuffling and update order a
// single federated client uses: rounds * local_epochs epochs.
CentralizedResult train_centralized(const Objective& objective, const ParamSet& init,
                                    const ClientSetup& setup, const FedConfig& config);

}  // namespace modfed::fed
