#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "modfed/tensor.hpp"

namespace modfed::ad {

class Graph;

// Handle to a node recorded on a Graph. Cheap to copy; only valid while the
// owning Graph is alive.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Records a DAG of tensor operations and runs reverse-mode differentiation
// over it. Nodes are stored in creation order, which is a topological order,
// so backward() is a single reverse sweep. One Graph belongs to one worker.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value);

  // Records an op output. `backward` receives the output gradient and must
  // push contributions into its inputs via accumulate(); it is only invoked
  // when the output actually received a gradient.
  Var record(Tensor value, bool requires_grad, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  void accumulate(Var target, const Tensor& grad);
  void accumulate(Var target, Tensor&& grad);

  // Seeds d loss / d loss = 1 and sweeps every recorded node once in reverse
  // creation order. `loss` must hold exactly one value.
  void backward(Var loss);

  // Gradient of the last backward() w.r.t. `v`; zeros when `v` was not on any
  // path to the loss.
  Tensor grad(Var v) const;

  std::size_t node_count() const noexcept { return nodes_.size(); }
  std::size_t backward_visits() const noexcept { return backward_visits_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
  std::size_t backward_visits_ = 0;
};

enum class PoolMode { Avg, Max };

// Elementwise and broadcasting arithmetic. mul() broadcasts either operand
// along any axis of extent 1 (e.g. C x 1 x 1 or 1 x H x W against C x H x W).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double c);
Var scale(Var x, Var s);
Var divide(Var a, Var b);

Var relu(Var x);
Var sigmoid(Var x);
Var softplus(Var x);

Var sum(Var x);
Var dot(Var a, Var b);
Var l2_norm(Var x);
Var sum_squares(Var x);

// Same-size cross-correlation with zero padding dilation * (k - 1) / 2.
// input C_in x H x W, kernel C_out x C_in x k x k, optional bias C_out.
Var conv2d(Var input, Var kernel, int dilation = 1);
Var conv2d(Var input, Var kernel, Var bias, int dilation = 1);

Var channel_pool(Var x, PoolMode mode);
Var global_pool(Var x, PoolMode mode);
Var concat_channels(std::span<const Var> parts);

// Wraps an arbitrary linear map; backward applies `adjoint`.
Var linear_map(Var x, std::function<Tensor(const Tensor&)> forward,
               std::function<Tensor(const Tensor&)> adjoint);

}  // namespace modfed::ad
