// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over BasicTensor.
//
// Nodes are appended in evaluation order, so the tape is topologically sorted
// by construction and backward() is a single reverse sweep that visits each
// node once. Parameters are leaves bound to a BasicParamStore; backward()
// returns a gradient store with the same layout.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vpq/errors.hpp"
#include "vpq/params.hpp"
#include "vpq/tensor.hpp"

namespace vpq {

/// Handle to a node on a Graph tape.
struct Var {
  std::size_t id = 0;
  friend bool operator==(Var, Var) = default;
};

template <typename T>
class Graph {
 public:
  enum class Mode { training, inference };

  Graph() = default;
  explicit Graph(const BasicParamStore<T>& params, Mode mode = Mode::training)
      : params_(&params), mode_(mode) {}

  Mode mode() const noexcept { return mode_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  const BasicParamStore<T>& params() const {
    if (!params_) throw ContractError("graph has no parameter store");
    return *params_;
  }

  const BasicTensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  /// Op-specific side output; attention stores its weights here.
  const BasicTensor<T>& aux(Var v) const { return nodes_.at(v.id).aux; }

  Var param(const std::string& name) {
    const std::size_t index = params().index_of(name);
    if (auto it = param_nodes_.find(index); it != param_nodes_.end()) return Var{it->second};
    Var v = push(params_->entry(index).value, {}, true);
    nodes_[v.id].param_index = static_cast<long>(index);
    param_nodes_.emplace(index, v.id);
    return v;
  }

  Var constant(BasicTensor<T> value) { return push(std::move(value), {}, false); }

  Var matmul(Var a, Var b) {
    Var out = push(vpq::matmul(value(a), value(b)), {a, b});
    on_backward(out, [a, b](Graph& g, std::size_t self) {
      const auto& gy = g.nodes_[self].grad;
      const auto& av = g.value(a);
      const auto& bv = g.value(b);
      const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
      if (g.needs_grad(a)) {
        auto bt = vpq::transpose(bv);
        detail::gemm_accumulate(gy.data().data(), bt.data().data(), g.grad(a).data().data(), m, n, k);
      }
      if (g.needs_grad(b)) {
        detail::gemm_tn_accumulate(av.data().data(), gy.data().data(), g.grad(b).data().data(), m, k, n);
      }
    });
    return out;
  }

  Var add(Var a, Var b) {
    if (value(a).shape() != value(b).shape()) {
      throw DimensionError("add: " + shape_string(value(a).shape()) + " vs " +
                           shape_string(value(b).shape()));
    }
    BasicTensor<T> y = value(a);
    const auto& bv = value(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    Var out = push(std::move(y), {a, b});
    on_backward(out, [a, b](Graph& g, std::size_t self) {
      for (Var in : {a, b}) {
        if (!g.needs_grad(in)) continue;
        auto& gi = g.grad(in);
        const auto& gy = g.nodes_[self].grad;
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += gy[i];
      }
    });
    return out;
  }

  /// x[r, c] + bias[c] for every row.
  Var add_row(Var x, Var bias) {
    const auto& xv = value(x);
    const auto& bv = value(bias);
    if (bv.size() != xv.cols()) throw DimensionError("add_row: bias width mismatch");
    BasicTensor<T> y = xv;
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto row = y.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
    }
    Var out = push(std::move(y), {x, bias});
    on_backward(out, [x, bias](Graph& g, std::size_t self) {
      const auto& gy = g.nodes_[self].grad;
      if (g.needs_grad(x)) {
        auto& gx = g.grad(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
      }
      if (g.needs_grad(bias)) {
        auto& gb = g.grad(bias);
        for (std::size_t r = 0; r < gy.rows(); ++r) {
          auto row = gy.row(r);
          for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
        }
      }
    });
    return out;
  }

  Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

  Var mul(Var a, Var b) {
    if (value(a).shape() != value(b).shape()) throw DimensionError("mul: shape mismatch");
    BasicTensor<T> y = value(a);
    const auto& bv = value(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
    Var out = push(std::move(y), {a, b});
    on_backward(out, [a, b](Graph& g, std::size_t self) {
      const auto& gy = g.nodes_[self].grad;
      if (g.needs_grad(a)) {
        auto& ga = g.grad(a);
        const auto& bv = g.value(b);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bv[i];
      }
      if (g.needs_grad(b)) {
        auto& gb = g.grad(b);
        const auto& av = g.value(a);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * av[i];
      }
    });
    return out;
  }

  Var scale(Var x, T s) {
    BasicTensor<T> y = value(x);
    for (auto& v : y.values()) v *= s;
    Var out = push(std::move(y), {x});
    on_backward(out, [x, s](Graph& g, std::size_t self) {
      auto& gx = g.grad(x);
      const auto& gy = g.nodes_[self].grad;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s * gy[i];
    });
    return out;
  }

  Var sum(Var x) {
    T acc{};
    for (T v : value(x).data()) acc += v;
    Var out = push(BasicTensor<T>({1}, std::vector<T>{acc}), {x});
    on_backward(out, [x](Graph& g, std::size_t self) {
      const T gy = g.nodes_[self].grad[0];
      for (auto& v : g.grad(x).values()) v += gy;
    });
    return out;
  }

  Var gelu(Var x) {
    Var out = push(vpq::gelu(value(x)), {x});
    on_backward(out, [x](Graph& g, std::size_t self) {
      const auto& xv = g.value(x);
      const auto& gy = g.nodes_[self].grad;
      auto& gx = g.grad(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * gelu_derivative(xv[i]);
    });
    return out;
  }

  Var layer_norm(Var x, Var gamma, Var beta, T eps = static_cast<T>(1e-5)) {
    Var out = push(vpq::layer_norm(value(x), value(gamma), value(beta), eps), {x, gamma, beta});
    on_backward(out, [x, gamma, beta, eps](Graph& g, std::size_t self) {
      const auto& xv = g.value(x);
      const auto& gv = g.value(gamma);
      const auto& gy = g.nodes_[self].grad;
      const std::size_t d = xv.cols();
      std::vector<T> xhat(d), dxhat(d);
      const bool want_x = g.needs_grad(x), want_g = g.needs_grad(gamma), want_b = g.needs_grad(beta);
      for (std::size_t r = 0; r < xv.rows(); ++r) {
        auto in = xv.row(r);
        auto dy = gy.row(r);
        T mean{};
        for (T v : in) mean += v;
        mean /= static_cast<T>(d);
        T var{};
        for (T v : in) var += (v - mean) * (v - mean);
        var /= static_cast<T>(d);
        const T denom = var + eps;
        const T rstd = denom > T{0} ? T{1} / std::sqrt(denom) : T{0};
        T mean_dxhat{}, mean_dxhat_xhat{};
        for (std::size_t c = 0; c < d; ++c) {
          xhat[c] = (in[c] - mean) * rstd;
          dxhat[c] = dy[c] * gv[c];
          mean_dxhat += dxhat[c];
          mean_dxhat_xhat += dxhat[c] * xhat[c];
        }
        mean_dxhat /= static_cast<T>(d);
        mean_dxhat_xhat /= static_cast<T>(d);
        if (want_x) {
          auto gx = g.grad(x).row(r);
          for (std::size_t c = 0; c < d; ++c)
            gx[c] += rstd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
        if (want_g) {
          auto& gg = g.grad(gamma);
          for (std::size_t c = 0; c < d; ++c) gg[c] += dy[c] * xhat[c];
        }
        if (want_b) {
          auto& gb = g.grad(beta);
          for (std::size_t c = 0; c < d; ++c) gb[c] += dy[c];
        }
      }
    });
    return out;
  }

  /// Attention over `groups` independent row blocks: group i of q attends only
  /// to group i of k/v. Weights are kept as aux, shape [groups*heads*nq, nk].
  Var attention(Var q, Var k, Var v, std::size_t heads, std::size_t groups = 1) {
    const auto& qv = value(q);
    const auto& kv = value(k);
    const auto& vv = value(v);
    const std::size_t d = qv.cols();
    if (kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows())
      throw DimensionError("attention: q/k/v shapes do not compose");
    if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by heads");
    if (groups == 0 || qv.rows() % groups != 0 || kv.rows() % groups != 0)
      throw DimensionError("attention: rows not divisible into groups");
    const std::size_t nq = qv.rows() / groups, nk = kv.rows() / groups;
    if (nq == 0 || nk == 0) throw ContractError("attention: empty query or key set");

    BasicTensor<T> y({qv.rows(), d});
    BasicTensor<T> probs({groups * heads * nq, nk});
    for (std::size_t gi = 0; gi < groups; ++gi) {
      detail::attention_group(qv.data().data() + gi * nq * d, kv.data().data() + gi * nk * d,
                              vv.data().data() + gi * nk * d, y.data().data() + gi * nq * d,
                              probs.data().data() + gi * heads * nq * nk, nq, nk, d, heads);
    }
    require_finite(y, "attention");
    Var out = push(std::move(y), {q, k, v});
    nodes_[out.id].aux = std::move(probs);
    on_backward(out, [q, k, v, heads, groups, nq, nk, d](Graph& g, std::size_t self) {
      const auto& gy = g.nodes_[self].grad;
      const auto& probs = g.nodes_[self].aux;
      const auto& qv = g.value(q);
      const auto& kv = g.value(k);
      const auto& vv = g.value(v);
      const bool want_q = g.needs_grad(q), want_k = g.needs_grad(k), want_v = g.needs_grad(v);
      T* gq = want_q ? g.grad(q).data().data() : nullptr;
      T* gk = want_k ? g.grad(k).data().data() : nullptr;
      T* gv = want_v ? g.grad(v).data().data() : nullptr;
      const std::size_t dh = d / heads;
      const T scale = T{1} / std::sqrt(static_cast<T>(dh));
      std::vector<T> ds(nk);
      for (std::size_t gi = 0; gi < groups; ++gi) {
        const std::size_t qoff = gi * nq, koff = gi * nk;
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t c0 = h * dh;
          for (std::size_t i = 0; i < nq; ++i) {
            const T* p = probs.data().data() + ((gi * heads + h) * nq + i) * nk;
            const T* dyrow = gy.data().data() + (qoff + i) * d + c0;
            T dot_pdp{};
            for (std::size_t j = 0; j < nk; ++j) {
              const T dp = detail::dot(dyrow, vv.data().data() + (koff + j) * d + c0, dh);
              ds[j] = dp;
              dot_pdp += p[j] * dp;
            }
            for (std::size_t j = 0; j < nk; ++j) ds[j] = p[j] * (ds[j] - dot_pdp) * scale;
            if (gv) {
              for (std::size_t j = 0; j < nk; ++j) {
                T* row = gv + (koff + j) * d + c0;
                for (std::size_t c = 0; c < dh; ++c) row[c] += p[j] * dyrow[c];
              }
            }
            if (gq) {
              T* row = gq + (qoff + i) * d + c0;
              for (std::size_t j = 0; j < nk; ++j) {
                const T* krow = kv.data().data() + (koff + j) * d + c0;
                for (std::size_t c = 0; c < dh; ++c) row[c] += ds[j] * krow[c];
              }
            }
            if (gk) {
              const T* qrow = qv.data().data() + (qoff + i) * d + c0;
              for (std::size_t j = 0; j < nk; ++j) {
                T* row = gk + (koff + j) * d + c0;
                for (std::size_t c = 0; c < dh; ++c) row[c] += ds[j] * qrow[c];
              }
            }
          }
        }
      }
    });
    return out;
  }

  /// Rows [begin, begin + count) of x.
  Var rows(Var x, std::size_t begin, std::size_t count) {
    const auto& xv = value(x);
    if (begin + count > xv.rows()) throw ContractError("rows: range exceeds row count");
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
    return gather_rows(x, std::move(idx));
  }

  Var gather_rows(Var x, std::vector<std::size_t> indices) {
    const auto& xv = value(x);
    const std::size_t c = xv.cols();
    BasicTensor<T> y({indices.size(), c});
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= xv.rows()) throw ContractError("gather_rows: index out of range");
      auto src = xv.row(indices[i]);
      std::copy(src.begin(), src.end(), y.row(i).begin());
    }
    Var out = push(std::move(y), {x});
    on_backward(out, [x, idx = std::move(indices)](Graph& g, std::size_t self) {
      const auto& gy = g.nodes_[self].grad;
      auto& gx = g.grad(x);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        auto src = gy.row(i);
        auto dst = gx.row(idx[i]);
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
      }
    });
    return out;
  }

  /// Stacks `times` copies of x vertically.
  Var tile_rows(Var x, std::size_t times) {
    const auto& xv = value(x);
    const std::size_t n = xv.rows(), c = xv.cols();
    BasicTensor<T> y({n * times, c});
    for (std::size_t t = 0; t < times; ++t)
      std::copy(xv.data().begin(), xv.data().end(), y.data().begin() + t * n * c);
    Var out = push(std::move(y), {x});
    on_backward(out, [x, times, n, c](Graph& g, std::size_t self) {
      const auto& gy = g.nodes_[self].grad;
      auto& gx = g.grad(x);
      for (std::size_t t = 0; t < times; ++t)
        for (std::size_t i = 0; i < n * c; ++i) gx[i] += gy[t * n * c + i];
    });
    return out;
  }

  /// Mean cross-entropy of logits [batch, classes] against integer labels.
  Var cross_entropy(Var logits, std::span<const int> labels) {
    const auto& lv = value(logits);
    const std::size_t b = lv.rows(), c = lv.cols();
    if (labels.size() != b) throw DimensionError("cross_entropy: label count mismatch");
    BasicTensor<T> probs = vpq::softmax(lv);
    T loss{};
    for (std::size_t r = 0; r < b; ++r) {
      if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c)
        throw ContractError("cross_entropy: label out of range");
      auto row = lv.row(r);
      const T mx = *std::max_element(row.begin(), row.end());
      T s{};
      for (T v : row) s += std::exp(v - mx);
      loss += mx + std::log(s) - row[static_cast<std::size_t>(labels[r])];
    }
    loss /= static_cast<T>(b);
    if (!std::isfinite(loss)) throw NumericError("non-finite cross-entropy loss");
    Var out = push(BasicTensor<T>({1}, std::vector<T>{loss}), {logits});
    nodes_[out.id].aux = std::move(probs);
    on_backward(out, [logits, lab = std::vector<int>(labels.begin(), labels.end()), b](
                         Graph& g, std::size_t self) {
      const T gy = g.nodes_[self].grad[0] / static_cast<T>(b);
      const auto& probs = g.nodes_[self].aux;
      auto& gl = g.grad(logits);
      for (std::size_t r = 0; r < b; ++r) {
        auto p = probs.row(r);
        auto dst = gl.row(r);
        for (std::size_t j = 0; j < p.size(); ++j) dst[j] += gy * p[j];
        dst[static_cast<std::size_t>(lab[r])] -= gy;
      }
    });
    return out;
  }

  /// d(loss)/d(param) for every entry of the bound store; unused entries are zero.
  BasicGradStore<T> backward(Var loss) {
    if (mode_ != Mode::training) throw ContractError("backward on an inference graph");
    if (value(loss).size() != 1) throw ContractError("backward needs a scalar loss");
    for (auto& n : nodes_) n.grad = BasicTensor<T>();
    nodes_[loss.id].grad = BasicTensor<T>(value(loss).shape(), T{1});
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      auto& node = nodes_[id];
      if (node.grad.empty() || !node.back) continue;
      node.back(*this, id);
    }
    BasicGradStore<T> grads = params().zeros_like();
    for (const auto& [index, id] : param_nodes_) {
      if (!nodes_[id].grad.empty()) grads.entry(index).value = nodes_[id].grad;
    }
    return grads;
  }

 private:
  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    BasicTensor<T> aux;
    std::function<void(Graph&, std::size_t)> back;
    bool requires_grad = false;
    long param_index = -1;
  };

  Var push(BasicTensor<T> value, std::initializer_list<Var> inputs, bool leaf_requires = false) {
    bool req = leaf_requires;
    for (Var in : inputs) req = req || nodes_[in.id].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, {}, {}, req && mode_ == Mode::training, -1});
    return Var{nodes_.size() - 1};
  }

  template <typename F>
  void on_backward(Var out, F&& fn) {
    if (nodes_[out.id].requires_grad) nodes_[out.id].back = std::forward<F>(fn);
  }

  bool needs_grad(Var v) const { return nodes_[v.id].requires_grad; }

  BasicTensor<T>& grad(Var v) {
    auto& node = nodes_[v.id];
    if (node.grad.empty()) node.grad = BasicTensor<T>(node.value.shape());
    return node.grad;
  }

  const BasicParamStore<T>* params_ = nullptr;
  Mode mode_ = Mode::training;
  std::vector<Node> nodes_;
  std::map<std::size_t, std::size_t> param_nodes_;
};

}  // namespace vpq
