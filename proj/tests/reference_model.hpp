// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Straight-line double-precision reference of the Perceiver forward pass.
// Written with plain nested loops and no library kernels so it can serve as
// an independent oracle for the graph implementation.

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "vpq/config.hpp"
#include "vpq/params.hpp"

namespace vpq::ref {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor& t) {
  const std::size_t r = t.rank() == 1 ? 1 : t.shape()[0];
  const std::size_t c = t.size() / r;
  Mat m(r, std::vector<double>(c));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[i][j] = t[i * c + j];
  return m;
}

inline std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < b.size(); ++p) s += a[i][p] * b[p][j];
      c[i][j] = s;
    }
  return c;
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat c = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) c[i][j] += b[i][j];
  return c;
}

inline std::vector<double> softmax(std::vector<double> x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  double s = 0.0;
  for (double& v : x) s += (v = std::exp(v - mx));
  for (double& v : x) v /= s;
  return x;
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

class Reference {
 public:
  Reference(const ParamStore& p, const ModelConfig& cfg) : p_(p), cfg_(cfg) {}

  Mat param(const std::string& name) const { return to_mat(p_[name]); }

  Mat norm(const std::string& name, const Mat& x) const {
    auto g = to_vec(p_[name + ".gamma"]);
    auto b = to_vec(p_[name + ".beta"]);
    Mat y = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = static_cast<double>(x[i].size());
      double mean = 0.0, var = 0.0;
      for (double v : x[i]) mean += v;
      mean /= d;
      for (double v : x[i]) var += (v - mean) * (v - mean);
      var /= d;
      const double denom = var + cfg_.ln_eps;
      const double rstd = denom > 0 ? 1.0 / std::sqrt(denom) : 0.0;
      for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mean) * rstd * g[j] + b[j];
    }
    return y;
  }

  Mat lin(const std::string& name, const Mat& x) const {
    Mat y = matmul(x, param(name + ".weight"));
    auto b = to_vec(p_[name + ".bias"]);
    for (auto& row : y)
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
    return y;
  }

  /// softmax(Q K^T / sqrt(d_head)) V per head; optionally returns weights.
  static Mat attend(const Mat& q, const Mat& k, const Mat& v, std::size_t heads, Mat* weights = nullptr) {
    const std::size_t d = q[0].size(), dh = d / heads;
    Mat out(q.size(), std::vector<double>(d, 0.0));
    if (weights) weights->clear();
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < q.size(); ++i) {
        std::vector<double> s(k.size());
        for (std::size_t j = 0; j < k.size(); ++j) {
          double dot = 0.0;
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) dot += q[i][c] * k[j][c];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
        }
        auto w = softmax(s);
        if (weights) weights->push_back(w);
        for (std::size_t j = 0; j < k.size(); ++j)
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) out[i][c] += w[j] * v[j][c];
      }
    return out;
  }

  Mat mlp_residual(const std::string& p, const std::string& norm_name, const Mat& y) const {
    Mat h = lin(p + "mlp.fc1", norm(p + norm_name, y));
    for (auto& row : h)
      for (double& v : row) v = gelu(v);
    return add(y, lin(p + "mlp.fc2", h));
  }

  Mat cross_block(const std::string& p, const Mat& latents, const Mat& inputs, Mat* weights = nullptr) const {
    Mat qn = norm(p + "norm_q", latents), kvn = norm(p + "norm_kv", inputs);
    Mat a = attend(lin(p + "attn.q", qn), lin(p + "attn.k", kvn), lin(p + "attn.v", kvn), 1, weights);
    return mlp_residual(p, "norm_mlp", add(latents, lin(p + "attn.out", a)));
  }

  Mat encoder_block(std::size_t l, const Mat& x) const {
    const std::string p = "encoder." + std::to_string(l) + ".";
    Mat xn = norm(p + "norm1", x);
    Mat a = attend(lin(p + "attn.q", xn), lin(p + "attn.k", xn), lin(p + "attn.v", xn), cfg_.n_heads);
    return mlp_residual(p, "norm2", add(x, lin(p + "attn.out", a)));
  }

  std::vector<double> decode_classify(const Mat& latents) const {
    Mat tok = cross_block("decoder.", param("decoder.query"), latents);
    return lin("head", norm("head.norm", tok))[0];
  }

  Mat patchify(const Tensor& image) const {
    const std::size_t c = image.shape()[0], h = image.shape()[1], w = image.shape()[2], p = cfg_.patch_size;
    Mat out;
    for (std::size_t py = 0; py < h / p; ++py)
      for (std::size_t px = 0; px < w / p; ++px) {
        std::vector<double> row;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x) row.push_back(image[(ch * h + py * p + y) * w + px * p + x]);
        out.push_back(row);
      }
    return out;
  }

  Mat embed(const Mat& patches) const {
    return add(lin("patch_embed", patches), param("pos_embed"));
  }

  Mat latents_after_cross(const Tensor& image, const Mat& queries) const {
    return cross_block("cross.", queries, embed(patchify(image)));
  }

  std::vector<double> forward_with(const Tensor& image, const Mat& queries) const {
    Mat x = latents_after_cross(image, queries);
    for (std::size_t l = 0; l < cfg_.n_sa_layers; ++l) x = encoder_block(l, x);
    return decode_classify(x);
  }

  std::vector<double> forward(const Tensor& image, std::size_t k) const {
    Mat q = param("latent_queries");
    q.resize(k);
    return forward_with(image, q);
  }

 private:
  const ParamStore& p_;
  const ModelConfig& cfg_;
};

}  // namespace vpq::ref
