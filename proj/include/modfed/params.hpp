#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "modfed/tensor.hpp"

namespace modfed {

enum class Partition { GlobalShared, LocalPersonalized };

const char* to_string(Partition p) noexcept;

struct Parameter {
  std::string name;
  Partition partition = Partition::GlobalShared;
  ad::Tensor value;
};

// Ordered collection of uniquely named parameters. Order is construction
// order and is what aggregation and gradient vectors are aligned to.
class ParamSet {
 public:
  ParamSet() = default;

  Parameter& add(std::string name, ad::Tensor value,
                 Partition partition = Partition::GlobalShared);

  std::size_t size() const noexcept { return params_.size(); }
  bool empty() const noexcept { return params_.empty(); }

  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

  std::optional<std::size_t> find(const std::string& name) const;
  const Parameter& get(const std::string& name) const;
  Parameter& get(const std::string& name);

  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }

  // Total number of scalar entries across all tensors.
  std::size_t element_count() const noexcept;

  // True when both sets have the same names, order, and shapes.
  bool compatible_with(const ParamSet& other) const noexcept;

  friend bool operator==(const ParamSet& a, const ParamSet& b);

 private:
  std::vector<Parameter> params_;
};

// Gradients aligned index-by-index with a ParamSet.
using Gradients = std::vector<ad::Tensor>;

Gradients zero_gradients(const ParamSet& params);

}  // namespace modfed
