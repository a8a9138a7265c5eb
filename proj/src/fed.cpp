#include "modfed/fed.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <random>
#include <thread>

#include <fmt/format.h>

#include "modfed/error.hpp"
#include "modfed/metrics.hpp"

namespace modfed::fed {

using ad::Tensor;

// ---- Objective ----------------------------------------------------------------

Tensor ReconObjective::predict(const ParamSet& params, const Sample& sample) const {
  if (!sample.mask) throw ContractError("sample has no sampling mask");
  return net::reconstruct(params, config_, sample.input, *sample.mask);
}

double ReconObjective::loss(const ParamSet& params, const Sample& sample, const Tensor& target,
                            double weight, Gradients* grads) const {
  if (grads == nullptr) {
    Tensor diff = predict(params, sample);
    if (diff.shape() != target.shape()) throw ShapeError("prediction and target shapes differ");
    for (std::size_t j = 0; j < diff.size(); ++j) diff[j] -= target[j];
    return ad::norm2(diff);
  }
  if (!sample.mask) throw ContractError("sample has no sampling mask");
  if (grads->size() != params.size()) throw ContractError("gradient buffer does not match parameters");
  ad::Graph graph;
  const net::ModelVars vars = net::bind(graph, params, true);
  ad::Var out = net::unrolled_forward(graph.constant(sample.input), *sample.mask, vars, config_);
  ad::Var l = ad::l2_norm(ad::sub(out, graph.constant(target)));
  graph.backward(l);
  for (std::size_t i = 0; i < vars.leaves.size(); ++i) {
    Tensor g = graph.grad(vars.leaves[i]);
    g *= weight;
    (*grads)[i] += g;
  }
  return l.value().item();
}

// ---- Names ----------------------------------------------------------------------

const char* to_string(Strategy s) noexcept {
  switch (s) {
    case Strategy::ModFed: return "MODFED";
    case Strategy::FedAvg: return "FEDAVG";
    case Strategy::FedProx: return "FEDPROX";
    case Strategy::SingleSet: return "SINGLESET";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  for (Strategy v : {Strategy::ModFed, Strategy::FedAvg, Strategy::FedProx, Strategy::SingleSet}) {
    if (s == to_string(v)) return v;
  }
  throw ConfigError(fmt::format("unknown strategy '{}' (MODFED, FEDAVG, FEDPROX, SINGLESET)", s));
}

const char* to_string(ClientLossMode m) noexcept {
  return m == ClientLossMode::Literal ? "LITERAL" : "CONSISTENCY";
}

ClientLossMode client_loss_mode_from_string(const std::string& s) {
  if (s == "LITERAL") return ClientLossMode::Literal;
  if (s == "CONSISTENCY") return ClientLossMode::Consistency;
  throw ConfigError(fmt::format("unknown client loss mode '{}' (LITERAL, CONSISTENCY)", s));
}

// ---- Client side ------------------------------------------------------------------

ClientState make_client(int id, const ParamSet& init, ClientSetup setup,
                        const AdamWConfig& optimizer) {
  if (!(setup.gamma >= 0.0)) throw ConfigError(fmt::format("client {}: gamma must be >= 0", id));
  ClientState c;
  c.id = id;
  c.model = init;
  c.optimizer = AdamW(init, optimizer);
  c.data = std::move(setup.data);
  c.gamma = setup.gamma;
  c.seed = setup.seed;
  return c;
}

namespace {

void require_compatible(const ParamSet& a, const ParamSet& b, const char* what) {
  if (a.size() != b.size()) {
    throw ProtocolError(fmt::format("{}: {} tensors vs {}", what, a.size(), b.size()));
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name) {
      throw ProtocolError(fmt::format("{}: parameter {} is '{}' on one side and '{}' on the other",
                                      what, i, a[i].name, b[i].name));
    }
    if (a[i].value.shape() != b[i].value.shape()) {
      throw ProtocolError(fmt::format("{}: '{}' has shape {} vs {}", what, a[i].name,
                                      ad::shape_string(a[i].value.shape()),
                                      ad::shape_string(b[i].value.shape())));
    }
  }
}

std::vector<Tensor> subset_outputs(const Objective& objective, const ParamSet& params,
                                   std::span<const Sample> samples) {
  std::vector<Tensor> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(objective.predict(params, s));
  return out;
}

double mean_distance(std::span<const Tensor> outputs, std::span<const Sample> samples) {
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Tensor diff = outputs[i];
    const Tensor& t = samples[i].target;
    if (diff.shape() != t.shape()) throw ShapeError("prediction and target shapes differ");
    for (std::size_t j = 0; j < diff.size(); ++j) diff[j] -= t[j];
    total += ad::norm2(diff);
  }
  return total / static_cast<double>(samples.size());
}

void require_s2(const ClientState& client) {
  if (client.data.s2.empty()) {
    throw ConfigError(fmt::format("client {}: training subset 2 is empty", client.id));
  }
}

}  // namespace

void client_receive(ClientState& client, const ParamSet& server) {
  require_compatible(client.model, server, "client_receive");
  for (std::size_t i = 0; i < server.size(); ++i) {
    if (client.model[i].partition == Partition::GlobalShared) {
      client.model[i].value = server[i].value;
    }
  }
  client.server_copy = server;
}

ParamSet mixed_params(const ParamSet& client, const ParamSet& server) {
  require_compatible(client, server, "mixed_params");
  ParamSet out = client;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].partition == Partition::GlobalShared) out[i].value = server[i].value;
  }
  return out;
}

double eval_subset_loss(const Objective& objective, const ParamSet& params,
                        std::span<const Sample> samples) {
  if (samples.empty()) throw ConfigError("cannot evaluate a loss on an empty subset");
  const auto outputs = subset_outputs(objective, params, samples);
  return mean_distance(outputs, samples);
}

double eval_server_loss(const Objective& objective, const ClientState& client) {
  require_s2(client);
  if (client.server_copy.empty()) {
    throw ContractError(fmt::format("client {} has not received a server model", client.id));
  }
  return eval_subset_loss(objective, client.server_copy, client.data.s2);
}

double eval_mixed_loss(const Objective& objective, const ClientState& client,
                       const ParamSet& server) {
  require_s2(client);
  return eval_subset_loss(objective, mixed_params(client.model, server), client.data.s2);
}

TrainResult client_train(const Objective& objective, ClientState& client, double loss_server,
                         const FedConfig& config, std::span<const Tensor> server_outputs) {
  const auto& s1 = client.data.s1;
  const auto& s2 = client.data.s2;
  if (s1.empty()) throw ConfigError(fmt::format("client {}: training subset 1 is empty", client.id));
  if (config.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (config.local_epochs < 1) throw ConfigError("local epochs must be >= 1");

  const bool prox = config.strategy == Strategy::FedProx;
  const bool consistency = !prox && config.loss_mode == ClientLossMode::Consistency &&
                           client.gamma > 0.0;
  if (consistency && (s2.empty() || server_outputs.size() != s2.size())) {
    throw ContractError("consistency loss needs server outputs for every subset-2 sample");
  }
  if (prox && client.server_copy.empty()) {
    throw ContractError("proximal term needs the received server model");
  }

  TrainResult result;
  double data_total = 0.0;
  double objective_total = 0.0;
  std::size_t s2_cursor = 0;
  std::vector<std::size_t> s2_order(s2.size());
  for (int z = 0; z < config.local_epochs; ++z) {
    const std::uint64_t epoch = client.epochs_done++;
    std::vector<std::size_t> order(s1.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mri::mix_seed(client.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    if (consistency) {
      std::iota(s2_order.begin(), s2_order.end(), std::size_t{0});
      std::shuffle(s2_order.begin(), s2_order.end(), rng);
      s2_cursor = 0;
    }

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const double inv = 1.0 / static_cast<double>(end - start);
      Gradients grads = zero_gradients(client.model);
      double data = 0.0;
      for (std::size_t b = start; b < end; ++b) {
        const Sample& s = s1[order[b]];
        data += objective.loss(client.model, s, s.target, inv, &grads) * inv;
      }
      double total = data;
      if (prox) {
        double sq = 0.0;
        for (std::size_t i = 0; i < client.model.size(); ++i) {
          const Tensor& p = client.model[i].value;
          const Tensor& c = client.server_copy[i].value;
          Tensor& g = grads[i];
          for (std::size_t j = 0; j < p.size(); ++j) {
            const double d = p[j] - c[j];
            sq += d * d;
            g[j] += config.prox_mu * d;
          }
        }
        total += 0.5 * config.prox_mu * sq;
      } else if (consistency) {
        const std::size_t n2 = std::min(config.batch_size, s2.size());
        const double w = client.gamma / static_cast<double>(n2);
        double term = 0.0;
        for (std::size_t b = 0; b < n2; ++b) {
          const std::size_t j = s2_order[s2_cursor];
          s2_cursor = (s2_cursor + 1) % s2.size();
          term += objective.loss(client.model, s2[j], server_outputs[j], w, &grads);
        }
        total += client.gamma * term / static_cast<double>(n2);
      } else {
        total += client.gamma * loss_server;
      }
      if (!std::isfinite(total)) throw NumericError("training loss became non-finite");
      client.optimizer.step(client.model, grads);
      data_total += data;
      objective_total += total;
      ++result.steps;
    }
  }
  result.loss_s1 = data_total / static_cast<double>(result.steps);
  result.objective = objective_total / static_cast<double>(result.steps);
  return result;
}

// ---- Server side ------------------------------------------------------------------

std::vector<double> adaptive_weights(std::span<const double> losses) {
  if (losses.empty()) throw ProtocolError("adaptive_weights: no client losses");
  for (std::size_t k = 0; k < losses.size(); ++k) {
    if (!std::isfinite(losses[k])) {
      throw ProtocolError(fmt::format("adaptive_weights: loss of client {} is not finite", k));
    }
  }
  const double peak = *std::max_element(losses.begin(), losses.end());
  std::vector<double> w(losses.size());
  double total = 0.0;
  for (std::size_t k = 0; k < losses.size(); ++k) {
    w[k] = std::exp(losses[k] - peak);
    total += w[k];
  }
  for (double& v : w) v /= total;
  return w;
}

std::vector<double> fedavg_weights(std::span<const std::size_t> counts) {
  if (counts.empty()) throw ConfigError("fedavg_weights: no clients");
  std::size_t total = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] == 0) throw ConfigError(fmt::format("fedavg_weights: client {} has no samples", k));
    total += counts[k];
  }
  std::vector<double> w(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k) {
    w[k] = static_cast<double>(counts[k]) / static_cast<double>(total);
  }
  return w;
}

ParamSet aggregate(std::span<const ParamSet> params, std::span<const double> alpha) {
  if (params.empty()) throw ProtocolError("aggregate: no client models");
  if (alpha.size() != params.size()) {
    throw ProtocolError(fmt::format("aggregate: {} weights for {} clients", alpha.size(), params.size()));
  }
  double sum = 0.0;
  for (double a : alpha) {
    if (!std::isfinite(a)) throw ProtocolError("aggregate: non-finite weight");
    sum += a;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ProtocolError(fmt::format("aggregate: weights sum to {:.17g}, not 1", sum));
  }
  for (std::size_t k = 1; k < params.size(); ++k) require_compatible(params[0], params[k], "aggregate");

  ParamSet out;
  for (std::size_t i = 0; i < params[0].size(); ++i) {
    Tensor acc(params[0][i].value.shape());
    for (std::size_t k = 0; k < params.size(); ++k) {
      const Tensor& v = params[k][i].value;
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += alpha[k] * v[j];
    }
    out.add(params[0][i].name, std::move(acc), params[0][i].partition);
  }
  return out;
}

// ---- Orchestration ----------------------------------------------------------------

namespace {

void validate(const FedConfig& config, std::span<const ClientSetup> clients) {
  if (clients.empty()) throw ConfigError("federation needs at least one client");
  if (config.rounds < 1) throw ConfigError("rounds must be >= 1");
  if (config.local_epochs < 1) throw ConfigError("local epochs must be >= 1");
  if (config.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(config.optimizer.learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(config.prox_mu >= 0.0)) throw ConfigError("proximal mu must be >= 0");
  if (config.threads < 1) throw ConfigError("threads must be >= 1");
  for (std::size_t k = 0; k < clients.size(); ++k) {
    if (clients[k].data.s1.empty()) throw ConfigError(fmt::format("client {}: subset 1 is empty", k));
    if (clients[k].data.s2.empty()) throw ConfigError(fmt::format("client {}: subset 2 is empty", k));
  }
}

ClientRound run_client_round(const Objective& objective, ClientState& client,
                             const ParamSet& server, const FedConfig& config) {
  ClientRound row;
  row.client = client.id;
  const auto& s2 = client.data.s2;

  std::vector<Tensor> server_outputs;
  std::vector<Tensor> mixed_outputs;
  if (config.strategy == Strategy::SingleSet) {
    mixed_outputs = subset_outputs(objective, client.model, s2);
    row.loss_s2 = mean_distance(mixed_outputs, s2);
    row.loss_server = row.loss_s2;
    server_outputs = mixed_outputs;
  } else {
    client_receive(client, server);
    server_outputs = subset_outputs(objective, client.server_copy, s2);
    row.loss_server = mean_distance(server_outputs, s2);
    // After receiving, the client model is the mixed model.
    mixed_outputs = client.model == client.server_copy ? server_outputs
                                                       : subset_outputs(objective, client.model, s2);
    row.loss_s2 = mean_distance(mixed_outputs, s2);
  }
  if (!std::isfinite(row.loss_s2) || !std::isfinite(row.loss_server)) {
    throw NumericError("subset-2 loss is not finite");
  }

  if (config.validation_metrics && objective.produces_images()) {
    double p = 0.0, s = 0.0;
    for (std::size_t i = 0; i < s2.size(); ++i) {
      const auto sc = metrics::score(mixed_outputs[i], s2[i].target);
      p += sc.psnr;
      s += sc.ssim;
    }
    row.psnr_val = p / static_cast<double>(s2.size());
    row.ssim_val = s / static_cast<double>(s2.size());
  } else {
    row.psnr_val = std::nan("");
    row.ssim_val = std::nan("");
  }

  const TrainResult tr = client_train(objective, client, row.loss_server, config, server_outputs);
  row.loss_s1 = tr.loss_s1;
  return row;
}

}  // namespace

FederationResult run_federation(const Objective& objective, const ParamSet& init,
                                std::vector<ClientSetup> setups, const FedConfig& config,
                                const RoundCallback& on_round) {
  validate(config, setups);
  const std::size_t K = setups.size();

  std::vector<std::size_t> counts(K);
  for (std::size_t k = 0; k < K; ++k) counts[k] = setups[k].data.s1.size() + setups[k].data.s2.size();

  ServerState server;
  server.model = init;
  server.alpha = fedavg_weights(counts);
  server.total_rounds = config.rounds;

  std::vector<ClientState> clients;
  clients.reserve(K);
  for (std::size_t k = 0; k < K; ++k) {
    clients.push_back(make_client(static_cast<int>(k), init, std::move(setups[k]), config.optimizer));
  }

  FederationResult result;
  for (int t = 1; t <= config.rounds; ++t) {
    const auto started = std::chrono::steady_clock::now();
    std::vector<ClientRound> rows(K);
    std::vector<std::exception_ptr> failures(K);

    auto work = [&](std::size_t k) {
      try {
        rows[k] = run_client_round(objective, clients[k], server.model, config);
      } catch (const Error& e) {
        try {
          rethrow_with_context(e, fmt::format("round {}, client {}", t, k));
        } catch (...) {
          failures[k] = std::current_exception();
        }
      } catch (...) {
        failures[k] = std::current_exception();
      }
    };
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(config.threads), K);
    if (workers <= 1) {
      for (std::size_t k = 0; k < K; ++k) {
        work(k);
        if (failures[k]) break;
      }
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          for (std::size_t k = w; k < K; k += workers) work(k);
        });
      }
      for (auto& th : pool) th.join();
    }
    for (const auto& f : failures) {
      if (f) std::rethrow_exception(f);
    }

    std::vector<double> alpha;
    switch (config.strategy) {
      case Strategy::ModFed: {
        std::vector<double> losses(K);
        for (std::size_t k = 0; k < K; ++k) losses[k] = rows[k].loss_s2;
        try {
          alpha = adaptive_weights(losses);
        } catch (const Error& e) {
          rethrow_with_context(e, fmt::format("round {}", t));
        }
        break;
      }
      case Strategy::FedAvg:
      case Strategy::FedProx: alpha = fedavg_weights(counts); break;
      case Strategy::SingleSet: alpha = server.alpha; break;
    }

    if (config.strategy != Strategy::SingleSet) {
      // Upload: named tensors and scalar losses only.
      std::vector<ClientUpload> uploads;
      uploads.reserve(K);
      for (std::size_t k = 0; k < K; ++k) {
        uploads.push_back(ClientUpload{static_cast<int>(k), clients[k].model, rows[k].loss_s1,
                                       rows[k].loss_s2, rows[k].loss_server});
      }
      std::vector<ParamSet> sets;
      sets.reserve(K);
      for (auto& u : uploads) sets.push_back(std::move(u.params));
      try {
        server.model = aggregate(sets, alpha);
      } catch (const Error& e) {
        rethrow_with_context(e, fmt::format("round {}", t));
      }
    }
    server.alpha = alpha;
    server.round = t;

    RoundReport report;
    report.round = t;
    report.alpha = alpha;
    for (std::size_t k = 0; k < K; ++k) rows[k].alpha = alpha[k];
    report.clients = std::move(rows);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (on_round) on_round(report, server, clients);
    result.reports.push_back(std::move(report));
  }

  result.server = server.model;
  for (const auto& c : clients) {
    result.personalized.push_back(config.strategy == Strategy::SingleSet
                                      ? c.model
                                      : mixed_params(c.model, server.model));
  }
  return result;
}

CentralizedResult train_centralized(const Objective& objective, const ParamSet& init,
                                    const ClientSetup& setup, const FedConfig& config) {
  if (config.rounds < 1) throw ConfigError("rounds must be >= 1");
  ClientState c = make_client(0, init, setup, config.optimizer);
  FedConfig plain = config;
  plain.strategy = Strategy::FedAvg;
  plain.loss_mode = ClientLossMode::Literal;
  plain.local_epochs = 1;
  c.gamma = 0.0;
  CentralizedResult result;
  for (int e = 0; e < config.rounds * config.local_epochs; ++e) {
    const TrainResult tr = client_train(objective, c, 0.0, plain);
    result.epoch_losses.push_back(tr.loss_s1);
  }
  result.params = c.model;
  return result;
}

}  // namespace modfed::fed
