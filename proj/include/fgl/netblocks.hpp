#pragma once

// Per-correspondence network blocks over N x C feature maps: context
// normalization, prior-fused attentive context normalization (BACN), per-pair
// batch normalization, group-structured channel attention and the residual
// hybrid attention (HA) block.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fgl/diff.hpp"
#include "fgl/error.hpp"

namespace fgl {

inline constexpr double kNormVarianceFloor = 1e-3;
inline constexpr double kPriorClamp = 1e-6;
inline constexpr double kBnMomentum = 0.9;

namespace detail {

inline void require_feature_map(const diff::Var& f, const char* op, std::size_t min_rows = 2) {
  const auto& s = f.shape();
  if (s.size() != 2) throw ShapeError(std::string(op) + ": feature map must be N x C");
  if (s[0] < min_rows) throw UsageError(std::string(op) + ": need at least " + std::to_string(min_rows) + " points");
}

}  // namespace detail

// Fused per-channel standardization with point weights w (N x 1, summing to
// one): u = sum_i w_i f_i, v = sum_i w_i (f_i - u)^2 + 1e-3, y = (f - u) / sqrt(v).
// Differentiable in both f and w.
inline diff::Var weighted_standardize(const diff::Var& f, const diff::Var& w) {
  const std::size_t n = f.shape()[0];
  if (w.shape() != diff::Shape{n, 1}) throw ShapeError("weighted_standardize: weights must be N x 1");
  static const auto op = [] {
    auto o = std::make_shared<diff::CustomOp>();
    o->name = "weighted_standardize";
    auto moments = [](const diff::Array& x, const diff::Array& wt, std::vector<double>& u, std::vector<double>& s) {
      const std::size_t rows = x.rows(), cols = x.cols();
      // Mean accumulated around the first row so constant columns stay exact.
      u.assign(cols, 0.0);
      std::vector<double> v(cols, kNormVarianceFloor);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t k = 0; k < cols; ++k) u[k] += wt[i] * (x(i, k) - x(0, k));
      }
      for (std::size_t k = 0; k < cols; ++k) u[k] += x(0, k);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t k = 0; k < cols; ++k) {
          const double d = x(i, k) - u[k];
          v[k] += wt[i] * d * d;
        }
      }
      s.resize(cols);
      for (std::size_t k = 0; k < cols; ++k) s[k] = 1.0 / std::sqrt(v[k]);
    };
    o->forward = [moments](const std::vector<const diff::Array*>& in) {
      const diff::Array& x = *in[0];
      std::vector<double> u, s;
      moments(x, *in[1], u, s);
      diff::Array out(x.shape());
      for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t k = 0; k < x.cols(); ++k) out(i, k) = (x(i, k) - u[k]) * s[k];
      }
      return out;
    };
    o->backward = [moments](const std::vector<const diff::Array*>& in, const diff::Array&, const diff::Array& g) {
      const diff::Array& x = *in[0];
      const diff::Array& wt = *in[1];
      const std::size_t rows = x.rows(), cols = x.cols();
      std::vector<double> u, s;
      moments(x, wt, u, s);
      std::vector<double> a(cols, 0.0), b(cols, 0.0), wd(cols, 0.0);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t k = 0; k < cols; ++k) {
          const double d = x(i, k) - u[k];
          a[k] += g(i, k) * d;
          b[k] += g(i, k);
          wd[k] += wt[i] * d;
        }
      }
      // dv and du are the total derivatives with respect to v and u.
      std::vector<double> dv(cols), du(cols);
      for (std::size_t k = 0; k < cols; ++k) {
        dv[k] = -0.5 * s[k] * s[k] * s[k] * a[k];
        du[k] = -s[k] * b[k] - 2.0 * dv[k] * wd[k];
      }
      diff::Array gx(x.shape());
      diff::Array gw(wt.shape());
      for (std::size_t i = 0; i < rows; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < cols; ++k) {
          const double d = x(i, k) - u[k];
          gx(i, k) = g(i, k) * s[k] + 2.0 * dv[k] * wt[i] * d + du[k] * wt[i];
          acc += dv[k] * d * d + du[k] * x(i, k);
        }
        gw[i] = acc;
      }
      return std::vector<diff::Array>{std::move(gx), std::move(gw)};
    };
    return std::shared_ptr<const diff::CustomOp>(o);
  }();
  return diff::custom(op, {f, w});
}

inline diff::Var uniform_point_weights(diff::Graph& g, std::size_t n) {
  return g.constant(diff::Array({n, 1}, 1.0 / static_cast<double>(n)));
}

// Per channel: (f - mean) / sqrt(var + 1e-3), statistics over the N points.
inline diff::Var context_normalize(const diff::Var& f) {
  detail::require_feature_map(f, "context_normalize");
  return weighted_standardize(f, uniform_point_weights(f.graph(), f.shape()[0]));
}

struct BacnResult {
  diff::Var output;
  diff::Var attention;  // N x 1, sums to one
};

inline diff::Array prior_log_odds(std::span<const double> prior) {
  std::vector<double> v(prior.size());
  for (std::size_t i = 0; i < prior.size(); ++i) {
    const double p = std::clamp(prior[i], kPriorClamp, 1.0 - kPriorClamp);
    v[i] = std::log(p / (1.0 - p));
  }
  return diff::Array::column(std::move(v));
}

// Attention logits a_i = f_i . w_att + logit(prior_i), softmax over points;
// output (f - u) / sigma with the attention-weighted mean u and variance.
inline BacnResult bacn_forward(const diff::Var& f, std::span<const double> prior, const diff::Var& attention_weight) {
  detail::require_feature_map(f, "bacn_forward");
  if (prior.size() != f.shape()[0]) throw ShapeError("bacn_forward: prior length must equal N");
  if (attention_weight.shape() != diff::Shape{f.shape()[1], 1}) {
    throw ShapeError("bacn_forward: attention weight must be C x 1");
  }
  auto& g = f.graph();
  const auto logits = diff::matmul(f, attention_weight) + g.constant(prior_log_odds(prior));
  const auto w = diff::softmax(logits, 0);
  return {weighted_standardize(f, w), w};
}

enum class Mode { train, eval };

struct BnRunningStats {
  std::vector<double> mean;
  std::vector<double> var;

  explicit BnRunningStats(std::size_t channels = 0) : mean(channels, 0.0), var(channels, 1.0) {}
  void update(std::span<const double> batch_mean, std::span<const double> batch_var) {
    for (std::size_t c = 0; c < mean.size(); ++c) {
      mean[c] = kBnMomentum * mean[c] + (1.0 - kBnMomentum) * batch_mean[c];
      var[c] = kBnMomentum * var[c] + (1.0 - kBnMomentum) * batch_var[c];
    }
  }
  friend bool operator==(const BnRunningStats&, const BnRunningStats&) = default;
};

struct BnBatchStats {
  std::vector<double> mean;
  std::vector<double> var;
};

// Batch normalization over the N points of one pair. In eval mode the running
// statistics are used as constants.
inline diff::Var batch_norm(const diff::Var& f, const diff::Var& gamma, const diff::Var& beta, Mode mode,
                            const BnRunningStats* running, BnBatchStats* record = nullptr) {
  detail::require_feature_map(f, "batch_norm");
  auto& g = f.graph();
  const std::size_t c = f.shape()[1];
  if (mode == Mode::eval) {
    if (running == nullptr || running->mean.size() != c) throw UsageError("batch_norm: missing running statistics");
    std::vector<double> scale(c);
    for (std::size_t k = 0; k < c; ++k) scale[k] = 1.0 / std::sqrt(running->var[k] + kNormVarianceFloor);
    const auto mean = g.constant(diff::Array::row(running->mean));
    return (f - mean) * g.constant(diff::Array::row(std::move(scale))) * gamma + beta;
  }
  if (record != nullptr) {
    const auto& x = f.value();
    const double inv_n = 1.0 / static_cast<double>(x.rows());
    record->mean.assign(c, 0.0);
    record->var.assign(c, 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t k = 0; k < c; ++k) record->mean[k] += x(i, k) * inv_n;
    }
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t k = 0; k < c; ++k) {
        const double d = x(i, k) - record->mean[k];
        record->var[k] += d * d * inv_n;
      }
    }
  }
  return weighted_standardize(f, uniform_point_weights(g, f.shape()[0])) * gamma + beta;
}

struct ChannelAttentionDims {
  std::size_t channels = 32;
  std::size_t groups = 4;
  std::size_t reduction = 4;

  std::size_t hidden() const { return channels / reduction; }
  void validate() const {
    if (channels == 0 || groups == 0 || reduction == 0) throw UsageError("channel attention: zero dimension");
    if (channels % groups != 0) throw UsageError("channels must be divisible by the group count");
    if (channels % reduction != 0 || hidden() == 0) throw UsageError("channels must be divisible by the reduction");
    if (hidden() % groups != 0) throw UsageError("reduced channels must be divisible by the group count");
  }
};

// Block-diagonal linear map: group k maps input columns [k*in/g, (k+1)*in/g)
// to output columns [k*out/g, (k+1)*out/g). weight is in x (out / groups), its
// row block k holding the k-th group's matrix.
inline diff::Var group_linear(const diff::Var& f, const diff::Var& weight, const diff::Var& bias, std::size_t groups) {
  const std::size_t in = f.shape()[1];
  if (weight.shape()[0] != in || in % groups != 0) throw ShapeError("group_linear: weight rows must equal input width");
  if (groups == 1) return diff::matmul(f, weight) + bias;
  auto op = std::make_shared<diff::CustomOp>();
  op->name = "group_linear";
  op->forward = [groups](const std::vector<const diff::Array*>& x) {
    const diff::Array& a = *x[0];
    const diff::Array& w = *x[1];
    const std::size_t step = a.cols() / groups, out_step = w.cols();
    diff::Array out({a.rows(), out_step * groups});
    auto am = diff::detail::as_matrix(a);
    auto wm = diff::detail::as_matrix(w);
    auto om = diff::detail::as_matrix(out);
    for (std::size_t k = 0; k < groups; ++k) {
      om.middleCols(k * out_step, out_step).noalias() =
          am.middleCols(k * step, step) * wm.middleRows(k * step, step);
    }
    return out;
  };
  op->backward = [groups](const std::vector<const diff::Array*>& x, const diff::Array&, const diff::Array& g) {
    const diff::Array& a = *x[0];
    const diff::Array& w = *x[1];
    const std::size_t step = a.cols() / groups, out_step = w.cols();
    diff::Array ga(a.shape()), gw(w.shape());
    auto am = diff::detail::as_matrix(a);
    auto wm = diff::detail::as_matrix(w);
    auto gm = diff::detail::as_matrix(g);
    auto gam = diff::detail::as_matrix(ga);
    auto gwm = diff::detail::as_matrix(gw);
    for (std::size_t k = 0; k < groups; ++k) {
      const auto gk = gm.middleCols(k * out_step, out_step);
      gam.middleCols(k * step, step).noalias() = gk * wm.middleRows(k * step, step).transpose();
      gwm.middleRows(k * step, step).noalias() = am.middleCols(k * step, step).transpose() * gk;
    }
    return std::vector<diff::Array>{std::move(ga), std::move(gw)};
  };
  return diff::custom(op, {f, weight}) + bias;
}

struct ChannelAttentionParams {
  diff::Var w1, b1, w2, b2;
};

// Per point: gate = sigmoid(G2 relu(G1 f + b1) + b2); output f * gate.
inline diff::Var channel_attention_forward(const diff::Var& f, const ChannelAttentionParams& p,
                                           const ChannelAttentionDims& dims) {
  detail::require_feature_map(f, "channel_attention", 1);
  dims.validate();
  if (f.shape()[1] != dims.channels) throw ShapeError("channel_attention: width mismatch");
  const auto hidden = diff::relu(group_linear(f, p.w1, p.b1, dims.groups));
  const auto gate = diff::sigmoid(group_linear(hidden, p.w2, p.b2, dims.groups));
  return f * gate;
}

// Indices of one HA block's tensors in a ParameterSet.
struct HaBlockIds {
  std::size_t lin1_w, attention, bn_gamma, bn_beta, lin2_w, lin2_b, ca_w1, ca_b1, ca_w2, ca_b2;
};

inline constexpr std::size_t kHaBlockTensors = 10;

namespace detail {

inline diff::Array uniform_array(diff::Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  diff::Array a(std::move(shape), 0.0);
  for (auto& v : a.values()) v = u(rng);
  return a;
}

inline double fan_in_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace detail

inline HaBlockIds add_ha_block(diff::ParameterSet& params, const std::string& prefix, const ChannelAttentionDims& d,
                               std::mt19937_64& rng) {
  d.validate();
  const std::size_t c = d.channels, h = d.hidden(), g = d.groups;
  const double bc = detail::fan_in_bound(c);
  HaBlockIds id;
  id.lin1_w = params.add(prefix + ".lin1.w", detail::uniform_array({c, c}, bc, rng));
  id.attention = params.add(prefix + ".bacn.w", detail::uniform_array({c, 1}, bc, rng));
  id.bn_gamma = params.add(prefix + ".bn.gamma", diff::Array({1, c}, 1.0));
  id.bn_beta = params.add(prefix + ".bn.beta", diff::Array({1, c}, 0.0));
  id.lin2_w = params.add(prefix + ".lin2.w", detail::uniform_array({c, c}, bc, rng));
  id.lin2_b = params.add(prefix + ".lin2.b", detail::uniform_array({1, c}, bc, rng));
  id.ca_w1 = params.add(prefix + ".ca.w1", detail::uniform_array({c, h / g}, detail::fan_in_bound(c / g), rng));
  id.ca_b1 = params.add(prefix + ".ca.b1", diff::Array({1, h}, 0.0));
  id.ca_w2 = params.add(prefix + ".ca.w2", detail::uniform_array({h, c / g}, detail::fan_in_bound(h / g), rng));
  id.ca_b2 = params.add(prefix + ".ca.b2", diff::Array({1, c}, 0.0));
  return id;
}

struct BlockContext {
  Mode mode = Mode::train;
  const BnRunningStats* running = nullptr;
  BnBatchStats* record = nullptr;
};

// f + CA(lin2(relu(BN(BACN(lin1 f))))).
inline diff::Var ha_block_forward(const diff::Var& f, std::span<const double> prior, const HaBlockIds& id,
                                  const ChannelAttentionDims& dims, const BlockContext& ctx = {}) {
  detail::require_feature_map(f, "ha_block");
  auto& g = f.graph();
  const auto h1 = diff::matmul(f, g.parameter(id.lin1_w));
  const auto normed = bacn_forward(h1, prior, g.parameter(id.attention)).output;
  const auto bn = batch_norm(normed, g.parameter(id.bn_gamma), g.parameter(id.bn_beta), ctx.mode, ctx.running,
                             ctx.record);
  const auto h2 = diff::matmul(diff::relu(bn), g.parameter(id.lin2_w)) + g.parameter(id.lin2_b);
  const ChannelAttentionParams ca{g.parameter(id.ca_w1), g.parameter(id.ca_b1), g.parameter(id.ca_w2),
                                  g.parameter(id.ca_b2)};
  return f + channel_attention_forward(h2, ca, dims);
}

// Eight-point weight w = tanh(relu(L)).
inline diff::Var inlier_weight_head(const diff::Var& logits) { return diff::tanh(diff::relu(logits)); }

// Probability used by the classification losses.
inline diff::Var classification_probability(const diff::Var& logits) { return diff::sigmoid(logits); }

inline double inlier_weight(double logit) { return std::tanh(std::max(logit, 0.0)); }
inline double sigmoid(double logit) { return 1.0 / (1.0 + std::exp(-logit)); }

}  // namespace fgl
