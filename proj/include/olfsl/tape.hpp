#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "olfsl/errors.hpp"
#include "olfsl/tensor.hpp"

namespace olfsl {

// Reverse-mode gradient tape. Operations append nodes in execution order, so
// the record is topologically sorted by construction; backward() walks it
// once in reverse and sums gradients over fan-out. A tape is consumed by
// backward(): recording or differentiating again afterwards is an error.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a value as a leaf (parameter or input we want gradients for).
  Tensor<T> watch(const Tensor<T>& value) {
    Tensor<T> out = value.detached();
    out.tape = this;
    out.node = new_node({}, out.size(), nullptr);
    return out;
  }

  int record(std::vector<int> inputs, std::int64_t out_size,
             std::function<void(Tape&, int)> backward_fn) {
    return new_node(std::move(inputs), out_size, std::move(backward_fn));
  }

  void backward(const Tensor<T>& loss) {
    if (!loss.attached()) throw LogicError("backward: loss tensor is detached from any tape");
    if (loss.tape != this) throw LogicError("backward: loss belongs to a different tape");
    if (loss.size() != 1) throw LogicError("backward: loss must be a scalar");
    if (consumed_) throw LogicError("backward: tape already consumed");
    grad_acc(loss.node)[0] = T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.touched && n.backward) n.backward(*this, static_cast<int>(i));
    }
    consumed_ = true;
  }

  // Gradient of the differentiated loss w.r.t. an attached tensor; zero for
  // leaves the loss never reached.
  Tensor<T> grad_of(const Tensor<T>& t) const {
    if (t.tape != this) throw LogicError("grad_of: tensor not attached to this tape");
    return Tensor<T>(t.shape, nodes_[static_cast<std::size_t>(t.node)].grad);
  }

  // Convenience: backward() plus gradient extraction for a named set of
  // attached leaves.
  std::map<std::string, Tensor<T>> backward_gradients(
      const Tensor<T>& loss, const std::map<std::string, Tensor<T>>& named_leaves) {
    backward(loss);
    std::map<std::string, Tensor<T>> grads;
    for (const auto& [name, leaf] : named_leaves) grads.emplace(name, grad_of(leaf));
    return grads;
  }

  bool consumed() const { return consumed_; }
  int node_count() const { return static_cast<int>(nodes_.size()); }

  // Accessors for op closures.
  const std::vector<T>& grad_out(int node) const { return nodes_[static_cast<std::size_t>(node)].grad; }

  std::vector<T>& grad_acc(int node) {
    Node& n = nodes_[static_cast<std::size_t>(node)];
    n.touched = true;
    return n.grad;
  }

 private:
  struct Node {
    std::vector<int> inputs;
    std::function<void(Tape&, int)> backward;  // null for leaves
    std::vector<T> grad;
    bool touched = false;
  };

  int new_node(std::vector<int> inputs, std::int64_t size, std::function<void(Tape&, int)> fn) {
    if (consumed_) throw LogicError("tape already consumed; create a fresh tape");
    const int id = static_cast<int>(nodes_.size());
    for (int in : inputs) {
      if (in < 0 || in >= id) throw LogicError("tape: op input does not precede its output");
    }
    Node n;
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
    n.grad.assign(static_cast<std::size_t>(size), T(0));
    nodes_.push_back(std::move(n));
    return id;
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

namespace detail {

template <typename T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> operands) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : operands) {
    if (!t->attached()) continue;
    if (tape == nullptr) {
      tape = t->tape;
    } else if (tape != t->tape) {
      throw LogicError("operands are attached to different tapes");
    }
  }
  return tape;
}

template <typename T>
std::vector<int> attached_inputs(std::initializer_list<const Tensor<T>*> operands) {
  std::vector<int> ids;
  for (const Tensor<T>* t : operands) {
    if (t->attached()) ids.push_back(t->node);
  }
  return ids;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) {
    throw ConfigError("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  Tensor<T> out = a.detached();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  if (Tape<T>* tape = detail::common_tape<T>({&a, &b})) {
    const int an = a.attached() ? a.node : -1;
    const int bn = b.attached() ? b.node : -1;
    out.tape = tape;
    out.node = tape->record(detail::attached_inputs<T>({&a, &b}), out.size(),
                            [an, bn](Tape<T>& tp, int self) {
                              const auto& g = tp.grad_out(self);
                              if (an >= 0) {
                                auto& ga = tp.grad_acc(an);
                                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                              }
                              if (bn >= 0) {
                                auto& gb = tp.grad_acc(bn);
                                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                              }
                            });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) {
    throw ConfigError("mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  Tensor<T> out = a.detached();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
  if (Tape<T>* tape = detail::common_tape<T>({&a, &b})) {
    const int an = a.attached() ? a.node : -1;
    const int bn = b.attached() ? b.node : -1;
    out.tape = tape;
    out.node = tape->record(detail::attached_inputs<T>({&a, &b}), out.size(),
                            [an, bn, av = a.data, bv = b.data](Tape<T>& tp, int self) {
                              const auto& g = tp.grad_out(self);
                              if (an >= 0) {
                                auto& ga = tp.grad_acc(an);
                                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                              }
                              if (bn >= 0) {
                                auto& gb = tp.grad_acc(bn);
                                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                              }
                            });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = x.detached();
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  if (x.attached()) {
    std::vector<unsigned char> mask(x.data.size());
    for (std::size_t i = 0; i < x.data.size(); ++i) mask[i] = x.data[i] > T(0) ? 1 : 0;
    out.tape = x.tape;
    out.node = x.tape->record({x.node}, out.size(),
                              [xn = x.node, mask = std::move(mask)](Tape<T>& tp, int self) {
                                const auto& g = tp.grad_out(self);
                                auto& gx = tp.grad_acc(xn);
                                for (std::size_t i = 0; i < g.size(); ++i) {
                                  if (mask[i]) gx[i] += g[i];
                                }
                              });
  }
  return out;
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out = x.detached();
  for (auto& v : out.data) v = sigmoid_scalar(v);
  if (x.attached()) {
    out.tape = x.tape;
    out.node = x.tape->record({x.node}, out.size(),
                              [xn = x.node, y = out.data](Tape<T>& tp, int self) {
                                const auto& g = tp.grad_out(self);
                                auto& gx = tp.grad_acc(xn);
                                for (std::size_t i = 0; i < g.size(); ++i) {
                                  gx[i] += g[i] * y[i] * (T(1) - y[i]);
                                }
                              });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

// Reinterprets the row-major payload under a new shape. Shares the tape node,
// so gradients accumulate in the original buffer.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel(new_shape) != x.size()) {
    throw ConfigError("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(new_shape));
  }
  Tensor<T> out(std::move(new_shape), x.data);
  out.tape = x.tape;
  out.node = x.node;
  return out;
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 1 || b.rank() != 1) {
    throw ConfigError("concat: expects rank-1 tensors, got " + shape_str(a.shape) + " and " +
                      shape_str(b.shape));
  }
  const int p = a.shape[0];
  const int q = b.shape[0];
  std::vector<T> data(static_cast<std::size_t>(p + q));
  std::copy(a.data.begin(), a.data.end(), data.begin());
  std::copy(b.data.begin(), b.data.end(), data.begin() + p);
  Tensor<T> out({p + q}, std::move(data));
  if (Tape<T>* tape = detail::common_tape<T>({&a, &b})) {
    const int an = a.attached() ? a.node : -1;
    const int bn = b.attached() ? b.node : -1;
    out.tape = tape;
    out.node = tape->record(detail::attached_inputs<T>({&a, &b}), out.size(),
                            [an, bn, p, q](Tape<T>& tp, int self) {
                              const auto& g = tp.grad_out(self);
                              if (an >= 0) {
                                auto& ga = tp.grad_acc(an);
                                for (int i = 0; i < p; ++i) ga[i] += g[i];
                              }
                              if (bn >= 0) {
                                auto& gb = tp.grad_acc(bn);
                                for (int i = 0; i < q; ++i) gb[i] += g[p + i];
                              }
                            });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear layers
// ---------------------------------------------------------------------------

// input [n] -> [m], or row-batched [B,n] -> [B,m]; weight [n,m], bias [m].
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2) throw ConfigError("dense: weight must be rank 2, got " + shape_str(weight.shape));
  const int n = weight.shape[0];
  const int m = weight.shape[1];
  int batch = 1;
  bool batched = false;
  if (x.rank() == 1) {
    if (x.shape[0] != n) {
      throw ConfigError("dense: input " + shape_str(x.shape) + " incompatible with weight " +
                        shape_str(weight.shape));
    }
  } else if (x.rank() == 2) {
    if (x.shape[1] != n) {
      throw ConfigError("dense: input " + shape_str(x.shape) + " incompatible with weight " +
                        shape_str(weight.shape));
    }
    batch = x.shape[0];
    batched = true;
  } else {
    throw ConfigError("dense: input must be rank 1 or 2, got " + shape_str(x.shape));
  }
  if (bias.rank() != 1 || bias.shape[0] != m) {
    throw ConfigError("dense: bias " + shape_str(bias.shape) + " incompatible with weight " +
                      shape_str(weight.shape));
  }

  Tensor<T> out = Tensor<T>::zeros(batched ? Shape{batch, m} : Shape{m});
  {
    const T* xp = x.data.data();
    const T* wp = weight.data.data();
    const T* bp = bias.data.data();
    T* yp = out.data.data();
    for (int bi = 0; bi < batch; ++bi) {
      T* yr = yp + static_cast<std::size_t>(bi) * m;
      for (int j = 0; j < m; ++j) yr[j] = bp[j];
      const T* xr = xp + static_cast<std::size_t>(bi) * n;
      for (int k = 0; k < n; ++k) {
        const T xv = xr[k];
        const T* wr = wp + static_cast<std::size_t>(k) * m;
        for (int j = 0; j < m; ++j) yr[j] += xv * wr[j];
      }
    }
  }

  if (Tape<T>* tape = detail::common_tape<T>({&x, &weight, &bias})) {
    const int xn = x.attached() ? x.node : -1;
    const int wn = weight.attached() ? weight.node : -1;
    const int bn = bias.attached() ? bias.node : -1;
    out.tape = tape;
    out.node = tape->record(
        detail::attached_inputs<T>({&x, &weight, &bias}), out.size(),
        [xn, wn, bn, n, m, batch, xv = x.data, wv = weight.data](Tape<T>& tp, int self) {
          const auto& g = tp.grad_out(self);
          if (xn >= 0) {
            auto& gx = tp.grad_acc(xn);
            for (int bi = 0; bi < batch; ++bi) {
              const T* gr = g.data() + static_cast<std::size_t>(bi) * m;
              T* gxr = gx.data() + static_cast<std::size_t>(bi) * n;
              for (int k = 0; k < n; ++k) {
                const T* wr = wv.data() + static_cast<std::size_t>(k) * m;
                T acc = T(0);
                for (int j = 0; j < m; ++j) acc += gr[j] * wr[j];
                gxr[k] += acc;
              }
            }
          }
          if (wn >= 0) {
            auto& gw = tp.grad_acc(wn);
            for (int bi = 0; bi < batch; ++bi) {
              const T* gr = g.data() + static_cast<std::size_t>(bi) * m;
              const T* xr = xv.data() + static_cast<std::size_t>(bi) * n;
              for (int k = 0; k < n; ++k) {
                const T x_k = xr[k];
                T* gwr = gw.data() + static_cast<std::size_t>(k) * m;
                for (int j = 0; j < m; ++j) gwr[j] += x_k * gr[j];
              }
            }
          }
          if (bn >= 0) {
            auto& gb = tp.grad_acc(bn);
            for (int bi = 0; bi < batch; ++bi) {
              const T* gr = g.data() + static_cast<std::size_t>(bi) * m;
              for (int j = 0; j < m; ++j) gb[j] += gr[j];
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution and pooling (HWC layout)
// ---------------------------------------------------------------------------

inline int conv_out_extent(int in, int k, int stride, int padding) {
  return (in + 2 * padding - k) / stride + 1;
}

// input [H,W,Cin], kernels [k,k,Cin,Cout]; zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels, int stride, int padding) {
  if (x.rank() != 3) throw ConfigError("conv2d: input must be [H,W,C], got " + shape_str(x.shape));
  if (kernels.rank() != 4 || kernels.shape[0] != kernels.shape[1]) {
    throw ConfigError("conv2d: kernels must be [k,k,Cin,Cout], got " + shape_str(kernels.shape));
  }
  const int H = x.shape[0], W = x.shape[1], Cin = x.shape[2];
  const int K = kernels.shape[0], Cout = kernels.shape[3];
  if (kernels.shape[2] != Cin) {
    throw ConfigError("conv2d: input has " + std::to_string(Cin) + " channels but kernels expect " +
                      std::to_string(kernels.shape[2]));
  }
  if (stride < 1 || padding < 0) throw ConfigError("conv2d: invalid stride/padding");
  const int Ho = conv_out_extent(H, K, stride, padding);
  const int Wo = conv_out_extent(W, K, stride, padding);
  if (Ho < 1 || Wo < 1) {
    throw ConfigError("conv2d: kernel " + std::to_string(K) + " does not fit input " + shape_str(x.shape));
  }

  Tensor<T> out = Tensor<T>::zeros({Ho, Wo, Cout});
  {
    const T* xp = x.data.data();
    const T* kp = kernels.data.data();
    T* yp = out.data.data();
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        T* yr = yp + (static_cast<std::size_t>(oy) * Wo + ox) * Cout;
        for (int ky = 0; ky < K; ++ky) {
          const int iy = oy * stride + ky - padding;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < K; ++kx) {
            const int ix = ox * stride + kx - padding;
            if (ix < 0 || ix >= W) continue;
            const T* xr = xp + (static_cast<std::size_t>(iy) * W + ix) * Cin;
            const T* kr = kp + (static_cast<std::size_t>(ky) * K + kx) * Cin * Cout;
            for (int ci = 0; ci < Cin; ++ci) {
              const T xv = xr[ci];
              const T* kc = kr + static_cast<std::size_t>(ci) * Cout;
              for (int co = 0; co < Cout; ++co) yr[co] += xv * kc[co];
            }
          }
        }
      }
    }
  }

  if (Tape<T>* tape = detail::common_tape<T>({&x, &kernels})) {
    const int xn = x.attached() ? x.node : -1;
    const int kn = kernels.attached() ? kernels.node : -1;
    out.tape = tape;
    out.node = tape->record(
        detail::attached_inputs<T>({&x, &kernels}), out.size(),
        [xn, kn, H, W, Cin, K, Cout, Ho, Wo, stride, padding, xv = x.data,
         kv = kernels.data](Tape<T>& tp, int self) {
          const auto& g = tp.grad_out(self);
          std::vector<T>* gx = xn >= 0 ? &tp.grad_acc(xn) : nullptr;
          std::vector<T>* gk = kn >= 0 ? &tp.grad_acc(kn) : nullptr;
          for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
              const T* gr = g.data() + (static_cast<std::size_t>(oy) * Wo + ox) * Cout;
              for (int ky = 0; ky < K; ++ky) {
                const int iy = oy * stride + ky - padding;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < K; ++kx) {
                  const int ix = ox * stride + kx - padding;
                  if (ix < 0 || ix >= W) continue;
                  const std::size_t xoff = (static_cast<std::size_t>(iy) * W + ix) * Cin;
                  const std::size_t koff = (static_cast<std::size_t>(ky) * K + kx) * Cin * Cout;
                  for (int ci = 0; ci < Cin; ++ci) {
                    const T* kc = kv.data() + koff + static_cast<std::size_t>(ci) * Cout;
                    if (gx) {
                      T acc = T(0);
                      for (int co = 0; co < Cout; ++co) acc += gr[co] * kc[co];
                      (*gx)[xoff + static_cast<std::size_t>(ci)] += acc;
                    }
                    if (gk) {
                      const T x_v = xv[xoff + static_cast<std::size_t>(ci)];
                      T* gkc = gk->data() + koff + static_cast<std::size_t>(ci) * Cout;
                      for (int co = 0; co < Cout; ++co) gkc[co] += x_v * gr[co];
                    }
                  }
                }
              }
            }
          }
        });
  }
  return out;
}

// input [H,W,C], per-channel bias [C].
template <typename T>
Tensor<T> bias_add_channels(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 3) throw ConfigError("bias_add_channels: input must be [H,W,C]");
  const int C = x.shape[2];
  if (bias.rank() != 1 || bias.shape[0] != C) {
    throw ConfigError("bias_add_channels: bias " + shape_str(bias.shape) + " does not match channels " +
                      std::to_string(C));
  }
  Tensor<T> out = x.detached();
  const std::size_t plane = out.data.size() / static_cast<std::size_t>(C);
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < C; ++c) out.data[p * C + c] += bias.data[static_cast<std::size_t>(c)];
  }
  if (Tape<T>* tape = detail::common_tape<T>({&x, &bias})) {
    const int xn = x.attached() ? x.node : -1;
    const int bn = bias.attached() ? bias.node : -1;
    out.tape = tape;
    out.node = tape->record(detail::attached_inputs<T>({&x, &bias}), out.size(),
                            [xn, bn, C, plane](Tape<T>& tp, int self) {
                              const auto& g = tp.grad_out(self);
                              if (xn >= 0) {
                                auto& gx = tp.grad_acc(xn);
                                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                              }
                              if (bn >= 0) {
                                auto& gb = tp.grad_acc(bn);
                                for (std::size_t p = 0; p < plane; ++p) {
                                  for (int c = 0; c < C; ++c) gb[static_cast<std::size_t>(c)] += g[p * C + c];
                                }
                              }
                            });
  }
  return out;
}

// Max pooling over [H,W,C]. Gradient routes to the first (row-major) maximal
// cell of each window.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int k, int stride) {
  if (x.rank() != 3) throw ConfigError("max_pool2d: input must be [H,W,C]");
  if (k < 1 || stride < 1) throw ConfigError("max_pool2d: k and stride must be >= 1");
  const int H = x.shape[0], W = x.shape[1], C = x.shape[2];
  if (k > H || k > W) {
    throw ConfigError("max_pool2d: window " + std::to_string(k) + " exceeds input " + shape_str(x.shape));
  }
  const int Ho = (H - k) / stride + 1;
  const int Wo = (W - k) / stride + 1;
  Tensor<T> out = Tensor<T>::zeros({Ho, Wo, C});
  std::vector<int> argmax(out.data.size());
  for (int oy = 0; oy < Ho; ++oy) {
    for (int ox = 0; ox < Wo; ++ox) {
      for (int c = 0; c < C; ++c) {
        T best = x.at(oy * stride, ox * stride, c);
        int best_idx = ((oy * stride) * W + ox * stride) * C + c;
        for (int wy = 0; wy < k; ++wy) {
          for (int wx = 0; wx < k; ++wx) {
            const int iy = oy * stride + wy;
            const int ix = ox * stride + wx;
            const T v = x.at(iy, ix, c);
            if (v > best) {
              best = v;
              best_idx = (iy * W + ix) * C + c;
            }
          }
        }
        const std::size_t o = (static_cast<std::size_t>(oy) * Wo + ox) * C + c;
        out.data[o] = best;
        argmax[o] = best_idx;
      }
    }
  }
  if (x.attached()) {
    out.tape = x.tape;
    out.node = x.tape->record({x.node}, out.size(),
                              [xn = x.node, argmax = std::move(argmax)](Tape<T>& tp, int self) {
                                const auto& g = tp.grad_out(self);
                                auto& gx = tp.grad_acc(xn);
                                for (std::size_t i = 0; i < g.size(); ++i) {
                                  gx[static_cast<std::size_t>(argmax[i])] += g[i];
                                }
                              });
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int k, int stride) {
  if (x.rank() != 3) throw ConfigError("avg_pool2d: input must be [H,W,C]");
  if (k < 1 || stride < 1) throw ConfigError("avg_pool2d: k and stride must be >= 1");
  const int H = x.shape[0], W = x.shape[1], C = x.shape[2];
  if (k > H || k > W) {
    throw ConfigError("avg_pool2d: window " + std::to_string(k) + " exceeds input " + shape_str(x.shape));
  }
  const int Ho = (H - k) / stride + 1;
  const int Wo = (W - k) / stride + 1;
  const T inv = T(1) / static_cast<T>(k * k);
  Tensor<T> out = Tensor<T>::zeros({Ho, Wo, C});
  for (int oy = 0; oy < Ho; ++oy) {
    for (int ox = 0; ox < Wo; ++ox) {
      for (int c = 0; c < C; ++c) {
        T acc = T(0);
        for (int wy = 0; wy < k; ++wy) {
          for (int wx = 0; wx < k; ++wx) acc += x.at(oy * stride + wy, ox * stride + wx, c);
        }
        out.at(oy, ox, c) = acc * inv;
      }
    }
  }
  if (x.attached()) {
    out.tape = x.tape;
    out.node = x.tape->record(
        {x.node}, out.size(), [xn = x.node, H, W, C, Ho, Wo, k, stride, inv](Tape<T>& tp, int self) {
          const auto& g = tp.grad_out(self);
          auto& gx = tp.grad_acc(xn);
          for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
              for (int c = 0; c < C; ++c) {
                const T gv = g[(static_cast<std::size_t>(oy) * Wo + ox) * C + c] * inv;
                for (int wy = 0; wy < k; ++wy) {
                  for (int wx = 0; wx < k; ++wx) {
                    const int iy = oy * stride + wy;
                    const int ix = ox * stride + wx;
                    gx[(static_cast<std::size_t>(iy) * W + ix) * C + c] += gv;
                  }
                }
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and set ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (x.attached()) {
    out.tape = x.tape;
    out.node = x.tape->record({x.node}, 1, [xn = x.node](Tape<T>& tp, int self) {
      const T g = tp.grad_out(self)[0];
      auto& gx = tp.grad_acc(xn);
      for (auto& v : gx) v += g;
    });
  }
  return out;
}

// Column sums of a [R,m] matrix -> [m].
template <typename T>
Tensor<T> sum_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw ConfigError("sum_rows: expects [R,m], got " + shape_str(x.shape));
  const int R = x.shape[0], m = x.shape[1];
  Tensor<T> out = Tensor<T>::zeros({m});
  for (int r = 0; r < R; ++r) {
    const T* row = x.data.data() + static_cast<std::size_t>(r) * m;
    for (int j = 0; j < m; ++j) out.data[static_cast<std::size_t>(j)] += row[j];
  }
  if (x.attached()) {
    out.tape = x.tape;
    out.node = x.tape->record({x.node}, out.size(), [xn = x.node, R, m](Tape<T>& tp, int self) {
      const auto& g = tp.grad_out(self);
      auto& gx = tp.grad_acc(xn);
      for (int r = 0; r < R; ++r) {
        T* row = gx.data() + static_cast<std::size_t>(r) * m;
        for (int j = 0; j < m; ++j) row[j] += g[static_cast<std::size_t>(j)];
      }
    });
  }
  return out;
}

namespace detail {

// Element-wise sum with per-element value-sorted accumulation, so the result
// is bit-identical under any permutation of the input list.
template <typename T>
std::vector<T> permutation_invariant_sum(const std::vector<const Tensor<T>*>& ts) {
  const std::size_t n = ts[0]->data.size();
  std::vector<T> out(n);
  std::vector<T> slot(ts.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < ts.size(); ++k) slot[k] = ts[k]->data[i];
    std::sort(slot.begin(), slot.end());
    T acc = T(0);
    for (T v : slot) acc += v;
    out[i] = acc;
  }
  return out;
}

template <typename T>
std::vector<const Tensor<T>*> check_set(const std::vector<Tensor<T>>& set, const char* op) {
  if (set.empty()) throw ConfigError(std::string(op) + ": empty input list");
  std::vector<const Tensor<T>*> ptrs;
  ptrs.reserve(set.size());
  for (const auto& t : set) {
    if (t.shape != set[0].shape) {
      throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(t.shape) + " vs " +
                        shape_str(set[0].shape));
    }
    ptrs.push_back(&t);
  }
  return ptrs;
}

template <typename T>
Tensor<T> reduce_set(const std::vector<Tensor<T>>& set, const char* op, T scale) {
  auto ptrs = check_set(set, op);
  std::vector<T> data = permutation_invariant_sum(ptrs);
  if (scale != T(1)) {
    for (auto& v : data) v *= scale;
  }
  Tensor<T> out(set[0].shape, std::move(data));
  Tape<T>* tape = nullptr;
  for (const auto& t : set) {
    if (!t.attached()) continue;
    if (tape == nullptr) tape = t.tape;
    else if (tape != t.tape) throw LogicError("operands are attached to different tapes");
  }
  if (tape) {
    std::vector<int> ids;
    for (const auto& t : set) {
      if (t.attached()) ids.push_back(t.node);
    }
    out.tape = tape;
    out.node = tape->record(ids, out.size(), [ids, scale](Tape<T>& tp, int self) {
      const auto& g = tp.grad_out(self);
      for (int id : ids) {
        auto& gi = tp.grad_acc(id);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * scale;
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> sum_over(const std::vector<Tensor<T>>& set) {
  return detail::reduce_set(set, "sum_over", T(1));
}

template <typename T>
Tensor<T> mean_over(const std::vector<Tensor<T>>& set) {
  if (set.empty()) throw ConfigError("mean_over: empty input list");
  return detail::reduce_set(set, "mean_over", T(1) / static_cast<T>(set.size()));
}

// ---------------------------------------------------------------------------
// Pairwise combination (the d^4 hot path, materialized as one matrix)
// ---------------------------------------------------------------------------

enum class CombineRule { all_pairs, same_location };

inline const char* combine_rule_name(CombineRule r) {
  return r == CombineRule::all_pairs ? "all_pairs" : "same_location";
}

// a,b: [R,c] object rows. all_pairs -> [R*R, 2c] with row (i*R + j) =
// [a_i | b_j]; same_location -> [R, 2c] with row i = [a_i | b_i].
template <typename T>
Tensor<T> pair_rows(const Tensor<T>& a, const Tensor<T>& b, CombineRule rule) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape != b.shape) {
    throw ConfigError("pair_rows: expects equal [R,c] inputs, got " + shape_str(a.shape) + " and " +
                      shape_str(b.shape));
  }
  const int R = a.shape[0], c = a.shape[1];
  const int P = rule == CombineRule::all_pairs ? R * R : R;
  Tensor<T> out = Tensor<T>::zeros({P, 2 * c});
  for (int p = 0; p < P; ++p) {
    const int i = rule == CombineRule::all_pairs ? p / R : p;
    const int j = rule == CombineRule::all_pairs ? p % R : p;
    T* row = out.data.data() + static_cast<std::size_t>(p) * 2 * c;
    const T* ar = a.data.data() + static_cast<std::size_t>(i) * c;
    const T* br = b.data.data() + static_cast<std::size_t>(j) * c;
    std::copy(ar, ar + c, row);
    std::copy(br, br + c, row + c);
  }
  if (Tape<T>* tape = detail::common_tape<T>({&a, &b})) {
    const int an = a.attached() ? a.node : -1;
    const int bn = b.attached() ? b.node : -1;
    out.tape = tape;
    out.node = tape->record(detail::attached_inputs<T>({&a, &b}), out.size(),
                            [an, bn, R, c, P, rule](Tape<T>& tp, int self) {
                              const auto& g = tp.grad_out(self);
                              for (int p = 0; p < P; ++p) {
                                const int i = rule == CombineRule::all_pairs ? p / R : p;
                                const int j = rule == CombineRule::all_pairs ? p % R : p;
                                const T* row = g.data() + static_cast<std::size_t>(p) * 2 * c;
                                if (an >= 0) {
                                  T* ga = tp.grad_acc(an).data() + static_cast<std::size_t>(i) * c;
                                  for (int t = 0; t < c; ++t) ga[t] += row[t];
                                }
                                if (bn >= 0) {
                                  T* gb = tp.grad_acc(bn).data() + static_cast<std::size_t>(j) * c;
                                  for (int t = 0; t < c; ++t) gb[t] += row[c + t];
                                }
                              }
                            });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary cross-entropy over labeled score pairs
// ---------------------------------------------------------------------------

template <typename T>
constexpr T bce_clamp_epsilon() {
  // Keeps log() finite when a sigmoid saturates in the working precision.
  if constexpr (sizeof(T) == 4) return T(1e-7);
  return T(1e-12);
}

// Mean binary cross-entropy over (score, label) pairs:
//   -mean[ y*log(s) + (1-y)*log(1-s) ]
// Scores are clamped to [eps, 1-eps] before the logs; the gradient is that of
// the clamped objective, (s-y)/(s(1-s))/n.
template <typename T>
Tensor<T> bce_pairs(const std::vector<Tensor<T>>& scores, const std::vector<int>& labels) {
  if (scores.empty()) throw ConfigError("pairwise_loss: empty score list");
  if (scores.size() != labels.size()) {
    throw ConfigError("pairwise_loss: " + std::to_string(scores.size()) + " scores vs " +
                      std::to_string(labels.size()) + " labels");
  }
  const T eps = bce_clamp_epsilon<T>();
  const std::size_t n = scores.size();
  std::vector<T> clamped(n);
  T acc = T(0);
  Tape<T>* tape = nullptr;
  for (std::size_t i = 0; i < n; ++i) {
    if (scores[i].size() != 1) throw ConfigError("pairwise_loss: scores must be scalars");
    if (labels[i] != 0 && labels[i] != 1) throw ConfigError("pairwise_loss: labels must be 0 or 1");
    T s = scores[i].data[0];
    s = std::min(std::max(s, eps), T(1) - eps);
    clamped[i] = s;
    acc += labels[i] == 1 ? -std::log(s) : -std::log(T(1) - s);
    if (scores[i].attached()) {
      if (tape == nullptr) tape = scores[i].tape;
      else if (tape != scores[i].tape) throw LogicError("operands are attached to different tapes");
    }
  }
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
  if (tape) {
    std::vector<int> ids;
    std::vector<int> owners;  // index into clamped/labels per attached score
    for (std::size_t i = 0; i < n; ++i) {
      if (scores[i].attached()) {
        ids.push_back(scores[i].node);
        owners.push_back(static_cast<int>(i));
      }
    }
    out.tape = tape;
    out.node = tape->record(ids, 1,
                            [ids, owners, clamped = std::move(clamped), labels,
                             inv_n = T(1) / static_cast<T>(n)](Tape<T>& tp, int self) {
                              const T g = tp.grad_out(self)[0];
                              for (std::size_t k = 0; k < ids.size(); ++k) {
                                const int i = owners[k];
                                const T s = clamped[static_cast<std::size_t>(i)];
                                const T y = static_cast<T>(labels[static_cast<std::size_t>(i)]);
                                tp.grad_acc(ids[k])[0] += g * inv_n * (s - y) / (s * (T(1) - s));
                              }
                            });
  }
  return out;
}

}  // namespace olfsl
