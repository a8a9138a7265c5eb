#include "modfed/params.hpp"

#include <cmath>

#include <fmt/format.h>

#include "modfed/adamw.hpp"
#include "modfed/error.hpp"

namespace modfed {

const char* to_string(Partition p) noexcept {
  return p == Partition::GlobalShared ? "GLOBAL_SHARED" : "LOCAL_PERSONALIZED";
}

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Contract: return "contract error";
    case ErrorKind::Config: return "config error";
    case ErrorKind::Protocol: return "protocol error";
    case ErrorKind::Numeric: return "numeric error";
    case ErrorKind::UnsupportedSize: return "unsupported size";
    case ErrorKind::Io: return "i/o error";
  }
  return "error";
}

Parameter& ParamSet::add(std::string name, ad::Tensor value, Partition partition) {
  if (find(name)) throw ContractError(fmt::format("duplicate parameter name '{}'", name));
  params_.push_back(Parameter{std::move(name), partition, std::move(value)});
  return params_.back();
}

std::optional<std::size_t> ParamSet::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  return std::nullopt;
}

const Parameter& ParamSet::get(const std::string& name) const {
  auto idx = find(name);
  if (!idx) throw ContractError(fmt::format("no parameter named '{}'", name));
  return params_[*idx];
}

Parameter& ParamSet::get(const std::string& name) {
  auto idx = find(name);
  if (!idx) throw ContractError(fmt::format("no parameter named '{}'", name));
  return params_[*idx];
}

std::size_t ParamSet::element_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

bool ParamSet::compatible_with(const ParamSet& other) const noexcept {
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name != other.params_[i].name ||
        params_[i].value.shape() != other.params_[i].value.shape()) {
      return false;
    }
  }
  return true;
}

bool operator==(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].partition != b[i].partition || !(a[i].value == b[i].value)) {
      return false;
    }
  }
  return true;
}

Gradients zero_gradients(const ParamSet& params) {
  Gradients g;
  g.reserve(params.size());
  for (const auto& p : params) g.emplace_back(p.value.shape());
  return g;
}

AdamW::AdamW(const ParamSet& params, AdamWConfig config) : config_(config) {
  m_ = zero_gradients(params);
  v_ = zero_gradients(params);
}

void AdamW::step(ParamSet& params, const Gradients& grads) {
  if (grads.size() != params.size() || m_.size() != params.size()) {
    throw ContractError("AdamW::step: gradient/parameter count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].value.shape()) {
      throw ShapeError(fmt::format("AdamW::step: gradient for '{}' has shape {}, expected {}",
                                   params[i].name, ad::shape_string(grads[i].shape()),
                                   ad::shape_string(params[i].value.shape())));
    }
    if (!grads[i].all_finite()) {
      throw NumericError(fmt::format("non-finite gradient for parameter '{}'", params[i].name));
    }
  }

  ++step_;
  const auto& c = config_;
  const double t = static_cast<double>(step_);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* p = params[i].value.data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    const double* g = grads[i].data();
    const std::size_t n = params[i].value.size();
    for (std::size_t j = 0; j < n; ++j) {
      p[j] -= c.learning_rate * c.weight_decay * p[j];
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p[j] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

}  // namespace modfed
