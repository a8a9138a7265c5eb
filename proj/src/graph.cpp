#include "modfed/graph.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numeric>

#include <Eigen/Core>
#include <fmt/format.h>

#include "modfed/error.hpp"

namespace modfed::ad {

const Tensor& Var::value() const { return graph_->value(id_); }
bool Var::requires_grad() const { return graph_->requires_grad(id_); }

Var Graph::constant(Tensor value) { return record(std::move(value), false, nullptr); }

Var Graph::leaf(Tensor value) { return record(std::move(value), true, nullptr); }

Var Graph::record(Tensor value, bool requires_grad, BackwardFn backward) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad,
                        requires_grad ? std::move(backward) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

void Graph::accumulate(Var target, const Tensor& grad) {
  Node& node = nodes_.at(target.id());
  if (!node.requires_grad) return;
  if (node.grad.empty()) {
    node.grad = grad;
  } else {
    node.grad += grad;
  }
}

void Graph::accumulate(Var target, Tensor&& grad) {
  Node& node = nodes_.at(target.id());
  if (!node.requires_grad) return;
  if (node.grad.empty()) {
    node.grad = std::move(grad);
  } else {
    node.grad += grad;
  }
}

void Graph::backward(Var loss) {
  if (loss.value().size() != 1) {
    throw ContractError(fmt::format("backward() needs a scalar loss, got shape {}",
                                    shape_string(loss.shape())));
  }
  for (Node& n : nodes_) n.grad = Tensor{};
  backward_visits_ = 0;
  nodes_.at(loss.id()).grad = Tensor(loss.shape(), 1.0);
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    ++backward_visits_;
    if (!node.backward || node.grad.empty()) continue;
    node.backward(*this, node.grad);
  }
}

Tensor Graph::grad(Var v) const {
  const Node& node = nodes_.at(v.id());
  if (node.grad.empty()) return Tensor(node.value.shape());
  return node.grad;
}

namespace {

bool any_requires_grad(std::initializer_list<Var> vars) {
  return std::any_of(vars.begin(), vars.end(), [](const Var& v) { return v.requires_grad(); });
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, shape_string(a.shape()),
                                 shape_string(b.shape())));
  }
}

void require_scalar(const char* op, Var s) {
  if (s.value().size() != 1) {
    throw ShapeError(fmt::format("{}: expected a scalar, got {}", op, shape_string(s.shape())));
  }
}

void require_chw(const char* op, Var x) {
  if (x.value().rank() != 3) {
    throw ShapeError(fmt::format("{}: expected C x H x W input, got {}", op,
                                 shape_string(x.shape())));
  }
}

// Rank-3 view of a shape with leading unit axes.
std::array<std::size_t, 3> as_rank3(const Shape& s) {
  if (s.size() > 3) throw ShapeError("broadcast supports rank <= 3");
  std::array<std::size_t, 3> out{1, 1, 1};
  std::copy(s.begin(), s.end(), out.begin() + static_cast<std::ptrdiff_t>(3 - s.size()));
  return out;
}

// Sum `grad` (shaped like the broadcast output) down to `target` shape.
Tensor reduce_to(const Tensor& grad, const Shape& target) {
  if (grad.shape() == target) return grad;
  const auto gs = as_rank3(grad.shape());
  const auto ts = as_rank3(target);
  Tensor out(target);
  for (std::size_t c = 0; c < gs[0]; ++c) {
    const std::size_t tc = ts[0] == 1 ? 0 : c;
    for (std::size_t y = 0; y < gs[1]; ++y) {
      const std::size_t ty = ts[1] == 1 ? 0 : y;
      const double* g = grad.data() + (c * gs[1] + y) * gs[2];
      double* o = out.data() + (tc * ts[1] + ty) * ts[2];
      if (ts[2] == 1) {
        double acc = 0.0;
        for (std::size_t x = 0; x < gs[2]; ++x) acc += g[x];
        o[0] += acc;
      } else {
        for (std::size_t x = 0; x < gs[2]; ++x) o[x] += g[x];
      }
    }
  }
  return out;
}

Tensor broadcast_product(const Tensor& a, const Tensor& b) {
  const auto as = as_rank3(a.shape());
  const auto bs = as_rank3(b.shape());
  std::array<std::size_t, 3> os{};
  for (int i = 0; i < 3; ++i) {
    if (as[i] != bs[i] && as[i] != 1 && bs[i] != 1) {
      throw ShapeError(fmt::format("mul: cannot broadcast {} with {}", shape_string(a.shape()),
                                   shape_string(b.shape())));
    }
    os[i] = std::max(as[i], bs[i]);
  }
  const std::size_t rank = std::max(a.rank(), b.rank());
  Shape out_shape(os.begin() + static_cast<std::ptrdiff_t>(3 - rank), os.end());
  Tensor out(out_shape);
  for (std::size_t c = 0; c < os[0]; ++c) {
    const std::size_t ac = as[0] == 1 ? 0 : c, bc = bs[0] == 1 ? 0 : c;
    for (std::size_t y = 0; y < os[1]; ++y) {
      const std::size_t ay = as[1] == 1 ? 0 : y, by = bs[1] == 1 ? 0 : y;
      const double* pa = a.data() + (ac * as[1] + ay) * as[2];
      const double* pb = b.data() + (bc * bs[1] + by) * bs[2];
      double* po = out.data() + (c * os[1] + y) * os[2];
      for (std::size_t x = 0; x < os[2]; ++x) {
        po[x] = pa[as[2] == 1 ? 0 : x] * pb[bs[2] == 1 ? 0 : x];
      }
    }
  }
  return out;
}

template <typename F>
Tensor map(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

struct ConvGeometry {
  std::size_t c_in, c_out, h, w, k;
  int dilation;
  std::ptrdiff_t pad;
};

// Fills `col` with image rows [y0, y1) of the (c_in * k * k) x (h * w)
// column matrix. Work is done in row bands small enough to stay in cache, and
// backward recomputes the columns instead of keeping a copy per conv.
void im2col_band(const Tensor& in, const ConvGeometry& g, std::size_t y0, std::size_t y1,
                 RowMatrix& col) {
  const auto H = static_cast<std::ptrdiff_t>(g.h);
  const auto W = static_cast<std::ptrdiff_t>(g.w);
  const std::size_t n = (y1 - y0) * g.w;
  col.resize(static_cast<Eigen::Index>(g.c_in * g.k * g.k), static_cast<Eigen::Index>(n));
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    const double* plane = in.data() + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) * g.dilation - g.pad;
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) * g.dilation - g.pad;
        double* row = col.data() + ((ci * g.k + ky) * g.k + kx) * n;
        const std::ptrdiff_t x0 = std::clamp<std::ptrdiff_t>(-dx, 0, W);
        const std::ptrdiff_t x1 = std::clamp<std::ptrdiff_t>(W - dx, x0, W);
        for (auto y = static_cast<std::ptrdiff_t>(y0); y < static_cast<std::ptrdiff_t>(y1); ++y) {
          double* dst = row + (y - static_cast<std::ptrdiff_t>(y0)) * W;
          const std::ptrdiff_t sy = y + dy;
          if (sy < 0 || sy >= H) {
            std::fill(dst, dst + W, 0.0);
            continue;
          }
          const double* src = plane + sy * W + dx;
          std::fill(dst, dst + x0, 0.0);
          for (std::ptrdiff_t x = x0; x < x1; ++x) dst[x] = src[x];
          std::fill(dst + x1, dst + W, 0.0);
        }
      }
    }
  }
}

// Eigen picks its vector peeling from operand addresses, so every GEMM
// operand lives in an Eigen-owned (fixed alignment) buffer. Mapping tensor
// storage directly made results depend on where the heap put it.
struct Scratch {
  RowMatrix col, kernel, lhs, product;
};

Scratch& scratch() {
  thread_local Scratch s;
  return s;
}

std::size_t band_rows(const ConvGeometry& g) {
  constexpr std::size_t kBandValues = 1 << 16;
  const std::size_t per_row = g.c_in * g.k * g.k * g.w;
  return std::clamp<std::size_t>(kBandValues / per_row, 1, g.h);
}

// out (c_out x h*w) = kernel (c_out x c_in*k*k) * im2col(in)
void correlate(const Tensor& in, const ConvGeometry& g, const double* kernel, double* out) {
  const auto outs = static_cast<Eigen::Index>(g.c_out);
  Scratch& s = scratch();
  s.kernel = ConstMatrixMap(kernel, outs, static_cast<Eigen::Index>(g.c_in * g.k * g.k));
  const std::size_t step = band_rows(g);
  for (std::size_t y0 = 0; y0 < g.h; y0 += step) {
    const std::size_t y1 = std::min(g.h, y0 + step);
    im2col_band(in, g, y0, y1, s.col);
    s.product.noalias() = s.kernel * s.col;
    const std::size_t n = (y1 - y0) * g.w;
    for (std::size_t co = 0; co < g.c_out; ++co) {
      const double* src = s.product.data() + co * n;
      std::copy(src, src + n, out + co * g.h * g.w + y0 * g.w);
    }
  }
}

// dk (c_out x c_in*k*k) = gout (c_out x h*w) * im2col(in)^T
void kernel_gradient(const Tensor& in, const ConvGeometry& g, const double* gout, double* dk) {
  const auto outs = static_cast<Eigen::Index>(g.c_out);
  Scratch& s = scratch();
  s.product.setZero(outs, static_cast<Eigen::Index>(g.c_in * g.k * g.k));
  const std::size_t step = band_rows(g);
  for (std::size_t y0 = 0; y0 < g.h; y0 += step) {
    const std::size_t y1 = std::min(g.h, y0 + step);
    im2col_band(in, g, y0, y1, s.col);
    const std::size_t n = (y1 - y0) * g.w;
    s.lhs.resize(outs, static_cast<Eigen::Index>(n));
    for (std::size_t co = 0; co < g.c_out; ++co) {
      const double* src = gout + co * g.h * g.w + y0 * g.w;
      std::copy(src, src + n, s.lhs.data() + co * n);
    }
    s.product.noalias() += s.lhs * s.col.transpose();
  }
  std::copy(s.product.data(), s.product.data() + s.product.size(), dk);
}

Var conv2d_impl(Var input, Var kernel, const Var* bias, int dilation) {
  require_chw("conv2d", input);
  const Tensor& in = input.value();
  const Tensor& ker = kernel.value();
  if (ker.rank() != 4 || ker.dim(2) != ker.dim(3)) {
    throw ShapeError(fmt::format("conv2d: kernel must be C_out x C_in x k x k, got {}",
                                 shape_string(ker.shape())));
  }
  if (ker.dim(1) != in.dim(0)) {
    throw ShapeError(fmt::format("conv2d: input has {} channels but kernel expects {}", in.dim(0),
                                 ker.dim(1)));
  }
  if (ker.dim(2) % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
  if (dilation < 1) throw ContractError("conv2d: dilation must be >= 1");
  if (bias != nullptr && (bias->value().size() != ker.dim(0))) {
    throw ShapeError("conv2d: bias length must equal output channels");
  }

  ConvGeometry g{in.dim(0), ker.dim(0), in.dim(1), in.dim(2), ker.dim(2), dilation,
                 static_cast<std::ptrdiff_t>(dilation * (ker.dim(2) - 1) / 2)};
  Tensor out({g.c_out, g.h, g.w});
  correlate(in, g, ker.data(), out.data());
  if (bias != nullptr) {
    const Tensor& b = bias->value();
    const std::size_t pixels = g.h * g.w;
    for (std::size_t co = 0; co < g.c_out; ++co) {
      for (std::size_t i = 0; i < pixels; ++i) out[co * pixels + i] += b[co];
    }
  }

  const bool needs = input.requires_grad() || kernel.requires_grad() ||
                     (bias != nullptr && bias->requires_grad());
  Var b_var = bias != nullptr ? *bias : Var{};
  return input.graph().record(
      std::move(out), needs,
      [input, kernel, b_var, g](Graph& graph, const Tensor& gout) {
        if (kernel.requires_grad()) {
          Tensor dk(kernel.shape());
          kernel_gradient(input.value(), g, gout.data(), dk.data());
          graph.accumulate(kernel, std::move(dk));
        }
        if (b_var.valid() && b_var.requires_grad()) {
          Tensor db(b_var.shape());
          for (std::size_t co = 0; co < g.c_out; ++co) {
            const double* row = gout.data() + co * g.h * g.w;
            db[co] = std::accumulate(row, row + g.h * g.w, 0.0);
          }
          graph.accumulate(b_var, std::move(db));
        }
        if (input.requires_grad()) {
          // Same-size correlation of gout with the flipped, transposed kernel.
          const Tensor& ker = kernel.value();
          const std::size_t k = g.k;
          Tensor flipped({g.c_in, g.c_out, k, k});
          for (std::size_t co = 0; co < g.c_out; ++co) {
            for (std::size_t ci = 0; ci < g.c_in; ++ci) {
              for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                  flipped[((ci * g.c_out + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                      ker[((co * g.c_in + ci) * k + ky) * k + kx];
                }
              }
            }
          }
          const ConvGeometry gt{g.c_out, g.c_in, g.h, g.w, k, g.dilation, g.pad};
          Tensor din({g.c_in, g.h, g.w});
          correlate(gout, gt, flipped.data(), din.data());
          graph.accumulate(input, std::move(din));
        }
      });
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  out += b.value();
  return a.graph().record(std::move(out), any_requires_grad({a, b}),
                          [a, b](Graph& g, const Tensor& gout) {
                            g.accumulate(a, gout);
                            g.accumulate(b, gout);
                          });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.graph().record(std::move(out), any_requires_grad({a, b}),
                          [a, b](Graph& g, const Tensor& gout) {
                            g.accumulate(a, gout);
                            Tensor neg = gout;
                            neg *= -1.0;
                            g.accumulate(b, std::move(neg));
                          });
}

Var mul(Var a, Var b) {
  Tensor out = broadcast_product(a.value(), b.value());
  return a.graph().record(std::move(out), any_requires_grad({a, b}),
                          [a, b](Graph& g, const Tensor& gout) {
                            if (a.requires_grad()) {
                              g.accumulate(a, reduce_to(broadcast_product(gout, b.value()), a.shape()));
                            }
                            if (b.requires_grad()) {
                              g.accumulate(b, reduce_to(broadcast_product(gout, a.value()), b.shape()));
                            }
                          });
}

Var scale(Var x, double c) {
  Tensor out = x.value();
  out *= c;
  return x.graph().record(std::move(out), x.requires_grad(), [x, c](Graph& g, const Tensor& gout) {
    Tensor gx = gout;
    gx *= c;
    g.accumulate(x, std::move(gx));
  });
}

Var scale(Var x, Var s) {
  require_scalar("scale", s);
  Tensor out = x.value();
  out *= s.value()[0];
  return x.graph().record(std::move(out), any_requires_grad({x, s}),
                          [x, s](Graph& g, const Tensor& gout) {
                            if (x.requires_grad()) {
                              Tensor gx = gout;
                              gx *= s.value()[0];
                              g.accumulate(x, std::move(gx));
                            }
                            if (s.requires_grad()) {
                              g.accumulate(s, Tensor(s.shape(), dot(gout, x.value())));
                            }
                          });
}

Var divide(Var a, Var b) {
  require_same_shape("divide", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return a.graph().record(std::move(out), any_requires_grad({a, b}),
                          [a, b](Graph& g, const Tensor& gout) {
                            const Tensor& av = a.value();
                            const Tensor& bv = b.value();
                            if (a.requires_grad()) {
                              Tensor ga(av.shape());
                              for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = gout[i] / bv[i];
                              g.accumulate(a, std::move(ga));
                            }
                            if (b.requires_grad()) {
                              Tensor gb(bv.shape());
                              for (std::size_t i = 0; i < gb.size(); ++i) {
                                gb[i] = -gout[i] * av[i] / (bv[i] * bv[i]);
                              }
                              g.accumulate(b, std::move(gb));
                            }
                          });
}

Var relu(Var x) {
  Tensor out = map(x.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  return x.graph().record(std::move(out), x.requires_grad(), [x](Graph& g, const Tensor& gout) {
    const Tensor& xv = x.value();
    Tensor gx(xv.shape());
    // Subgradient 0 at exactly 0.
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = xv[i] > 0.0 ? gout[i] : 0.0;
    g.accumulate(x, std::move(gx));
  });
}

Var sigmoid(Var x) {
  Tensor out = map(x.value(), stable_sigmoid);
  return x.graph().record(std::move(out), x.requires_grad(), [x](Graph& g, const Tensor& gout) {
    const Tensor& xv = x.value();
    Tensor gx(xv.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double s = stable_sigmoid(xv[i]);
      gx[i] = gout[i] * s * (1.0 - s);
    }
    g.accumulate(x, std::move(gx));
  });
}

Var softplus(Var x) {
  Tensor out = map(x.value(), [](double v) {
    return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  });
  return x.graph().record(std::move(out), x.requires_grad(), [x](Graph& g, const Tensor& gout) {
    const Tensor& xv = x.value();
    Tensor gx(xv.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = gout[i] * stable_sigmoid(xv[i]);
    g.accumulate(x, std::move(gx));
  });
}

Var sum(Var x) {
  double acc = 0.0;
  for (double v : x.value().values()) acc += v;
  return x.graph().record(Tensor::scalar(acc), x.requires_grad(), [x](Graph& g, const Tensor& gout) {
    g.accumulate(x, Tensor(x.shape(), gout[0]));
  });
}

Var dot(Var a, Var b) {
  require_same_shape("dot", a, b);
  const double v = dot(a.value(), b.value());
  return a.graph().record(Tensor::scalar(v), any_requires_grad({a, b}),
                          [a, b](Graph& g, const Tensor& gout) {
                            if (a.requires_grad()) {
                              Tensor ga = b.value();
                              ga *= gout[0];
                              g.accumulate(a, std::move(ga));
                            }
                            if (b.requires_grad()) {
                              Tensor gb = a.value();
                              gb *= gout[0];
                              g.accumulate(b, std::move(gb));
                            }
                          });
}

Var l2_norm(Var x) {
  const double n = norm2(x.value());
  return x.graph().record(Tensor::scalar(n), x.requires_grad(), [x, n](Graph& g, const Tensor& gout) {
    Tensor gx(x.shape());
    if (n > 0.0) {
      gx = x.value();
      gx *= gout[0] / n;
    }
    g.accumulate(x, std::move(gx));
  });
}

Var sum_squares(Var x) {
  const double v = dot(x.value(), x.value());
  return x.graph().record(Tensor::scalar(v), x.requires_grad(), [x](Graph& g, const Tensor& gout) {
    Tensor gx = x.value();
    gx *= 2.0 * gout[0];
    g.accumulate(x, std::move(gx));
  });
}

Var conv2d(Var input, Var kernel, int dilation) {
  return conv2d_impl(input, kernel, nullptr, dilation);
}

Var conv2d(Var input, Var kernel, Var bias, int dilation) {
  return conv2d_impl(input, kernel, &bias, dilation);
}

Var channel_pool(Var x, PoolMode mode) {
  require_chw("channel_pool", x);
  const Tensor& xv = x.value();
  const std::size_t C = xv.dim(0), HW = xv.dim(1) * xv.dim(2);
  if (C == 0) throw ShapeError("channel_pool: need at least one channel");
  Tensor out({1, xv.dim(1), xv.dim(2)});
  std::vector<std::size_t> argmax;
  if (mode == PoolMode::Avg) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < HW; ++i) out[i] += xv[c * HW + i];
    }
    out *= 1.0 / static_cast<double>(C);
  } else {
    argmax.assign(HW, 0);
    for (std::size_t i = 0; i < HW; ++i) out[i] = xv[i];
    for (std::size_t c = 1; c < C; ++c) {
      for (std::size_t i = 0; i < HW; ++i) {
        if (xv[c * HW + i] > out[i]) {
          out[i] = xv[c * HW + i];
          argmax[i] = c;
        }
      }
    }
  }
  return x.graph().record(std::move(out), x.requires_grad(),
                          [x, mode, C, HW, argmax = std::move(argmax)](Graph& g, const Tensor& gout) {
                            Tensor gx(x.shape());
                            if (mode == PoolMode::Avg) {
                              const double inv = 1.0 / static_cast<double>(C);
                              for (std::size_t c = 0; c < C; ++c) {
                                for (std::size_t i = 0; i < HW; ++i) gx[c * HW + i] = gout[i] * inv;
                              }
                            } else {
                              for (std::size_t i = 0; i < HW; ++i) gx[argmax[i] * HW + i] = gout[i];
                            }
                            g.accumulate(x, std::move(gx));
                          });
}

Var global_pool(Var x, PoolMode mode) {
  require_chw("global_pool", x);
  const Tensor& xv = x.value();
  const std::size_t C = xv.dim(0), HW = xv.dim(1) * xv.dim(2);
  if (HW == 0) throw ShapeError("global_pool: empty spatial extent");
  Tensor out({C, 1, 1});
  std::vector<std::size_t> argmax(mode == PoolMode::Max ? C : 0);
  for (std::size_t c = 0; c < C; ++c) {
    const double* p = xv.data() + c * HW;
    if (mode == PoolMode::Avg) {
      double acc = 0.0;
      for (std::size_t i = 0; i < HW; ++i) acc += p[i];
      out[c] = acc / static_cast<double>(HW);
    } else {
      std::size_t best = 0;
      for (std::size_t i = 1; i < HW; ++i) {
        if (p[i] > p[best]) best = i;
      }
      argmax[c] = best;
      out[c] = p[best];
    }
  }
  return x.graph().record(std::move(out), x.requires_grad(),
                          [x, mode, C, HW, argmax = std::move(argmax)](Graph& g, const Tensor& gout) {
                            Tensor gx(x.shape());
                            for (std::size_t c = 0; c < C; ++c) {
                              if (mode == PoolMode::Avg) {
                                const double v = gout[c] / static_cast<double>(HW);
                                for (std::size_t i = 0; i < HW; ++i) gx[c * HW + i] = v;
                              } else {
                                gx[c * HW + argmax[c]] = gout[c];
                              }
                            }
                            g.accumulate(x, std::move(gx));
                          });
}

Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: nothing to concatenate");
  for (const Var& p : parts) require_chw("concat_channels", p);
  const std::size_t H = parts[0].value().dim(1), W = parts[0].value().dim(2);
  std::size_t C = 0;
  bool needs = false;
  for (const Var& p : parts) {
    if (p.value().dim(1) != H || p.value().dim(2) != W) {
      throw ShapeError("concat_channels: spatial extents differ");
    }
    C += p.value().dim(0);
    needs = needs || p.requires_grad();
  }
  Tensor out({C, H, W});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + offset);
    offset += p.value().size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].graph().record(std::move(out), needs,
                                 [inputs = std::move(inputs)](Graph& g, const Tensor& gout) {
                                   std::size_t off = 0;
                                   for (const Var& p : inputs) {
                                     const std::size_t n = p.value().size();
                                     if (p.requires_grad()) {
                                       Tensor gp(p.shape());
                                       std::copy(gout.data() + off, gout.data() + off + n, gp.data());
                                       g.accumulate(p, std::move(gp));
                                     }
                                     off += n;
                                   }
                                 });
}

Var linear_map(Var x, std::function<Tensor(const Tensor&)> forward,
               std::function<Tensor(const Tensor&)> adjoint) {
  Tensor out = forward(x.value());
  return x.graph().record(std::move(out), x.requires_grad(),
                          [x, adjoint = std::move(adjoint)](Graph& g, const Tensor& gout) {
                            g.accumulate(x, adjoint(gout));
                          });
}

}  // namespace modfed::ad
