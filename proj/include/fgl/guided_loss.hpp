#pragma once

// Fn-measure guided class weighting. Each forward pass the confusion state and
// per-category average losses of a batch element determine (lambda, mu) such
// that the loss gradient in (X, Y) confusion space is anti-parallel to the
// Fn gradient. The weights are then used as constants in a weighted
// instance-balanced cross entropy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fgl/diff.hpp"
#include "fgl/error.hpp"

namespace fgl {

struct ConfusionState {
  std::int64_t n_pos = 0;
  std::int64_t n_neg = 0;
  std::int64_t x = 0;  // false negatives
  std::int64_t y = 0;  // false positives

  std::int64_t true_positives() const { return n_pos - x; }
  std::int64_t true_negatives() const { return n_neg - y; }
  bool valid() const { return n_pos >= 0 && n_neg >= 0 && x >= 0 && y >= 0 && x <= n_pos && y <= n_neg; }
  void validate() const {
    if (!valid()) throw UsageError("invalid confusion state");
  }
  friend bool operator==(const ConfusionState&, const ConfusionState&) = default;
};

struct FnGuidance {
  double n = 1.0;
  explicit FnGuidance(double value = 1.0) : n(value) {
    if (!(value > 0.0) || !std::isfinite(value)) throw UsageError("Fn guidance must be positive");
  }
};

struct CategoryLosses {
  double l_tp = 0, l_tn = 0, l_fp = 0, l_fn = 0;
  bool empty_tp = false, empty_tn = false, empty_fp = false, empty_fn = false;
};

struct ClassWeights {
  double lambda = 0.5;
  double mu = 0.5;
  bool fallback = false;
};

struct FnPartials {
  double dx = 0.0;
  double dy = 0.0;
  bool degenerate_x = false;
  bool degenerate_y = false;
};

inline constexpr double kEmptyCategoryLoss = 0.69314718055994530942;  // -ln 0.5
inline constexpr double kLossGapFloor = 1e-9;

inline double precision_of(const ConfusionState& s) {
  const double tp = static_cast<double>(s.true_positives());
  return tp > 0 ? tp / (tp + static_cast<double>(s.y)) : 0.0;
}

inline double recall_of(const ConfusionState& s) {
  return s.n_pos > 0 ? static_cast<double>(s.true_positives()) / static_cast<double>(s.n_pos) : 0.0;
}

inline double fn_from_pr(double p, double r, double n) {
  const double n2 = n * n;
  const double den = n2 * p + r;
  return den > 0.0 ? (1.0 + n2) * p * r / den : 0.0;
}

inline double fn_measure(const ConfusionState& s, FnGuidance g) {
  s.validate();
  if (s.true_positives() == 0) return 0.0;
  return fn_from_pr(precision_of(s), recall_of(s), g.n);
}

inline ConfusionState confusion_from_probabilities(std::span<const double> probs, std::span<const std::uint8_t> labels) {
  if (probs.size() != labels.size()) throw UsageError("confusion: length mismatch");
  ConfusionState s;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!(probs[i] >= 0.0 && probs[i] <= 1.0)) throw UsageError("confusion: probability outside [0, 1]");
    const bool predicted = probs[i] > 0.5;
    if (labels[i]) {
      ++s.n_pos;
      if (!predicted) ++s.x;
    } else {
      ++s.n_neg;
      if (predicted) ++s.y;
    }
  }
  return s;
}

inline CategoryLosses category_average_losses(std::span<const double> probs, std::span<const std::uint8_t> labels) {
  if (probs.size() != labels.size()) throw UsageError("category losses: length mismatch");
  double sum[4] = {0, 0, 0, 0};
  std::size_t count[4] = {0, 0, 0, 0};
  enum { tp, tn, fp, fn };
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    const bool predicted = p > 0.5;
    if (labels[i]) {
      const int c = predicted ? tp : fn;
      sum[c] += -std::log(std::max(p, diff::kLogFloor));
      ++count[c];
    } else {
      const int c = predicted ? fp : tn;
      sum[c] += -std::log(std::max(1.0 - p, diff::kLogFloor));
      ++count[c];
    }
  }
  auto avg = [&](int c) { return count[c] ? sum[c] / static_cast<double>(count[c]) : kEmptyCategoryLoss; };
  CategoryLosses l;
  l.l_tp = avg(tp);
  l.l_tn = avg(tn);
  l.l_fp = avg(fp);
  l.l_fn = avg(fn);
  l.empty_tp = count[tp] == 0;
  l.empty_tn = count[tn] == 0;
  l.empty_fp = count[fp] == 0;
  l.empty_fn = count[fn] == 0;
  return l;
}

// Unit-step forward differences F(X+1, Y) - F(X, Y) and F(X, Y+1) - F(X, Y).
inline FnPartials numerical_fn_partials(const ConfusionState& s, FnGuidance g) {
  s.validate();
  FnPartials d;
  const double f = fn_measure(s, g);
  if (s.x + 1 <= s.n_pos && s.true_positives() > 0) {
    d.dx = fn_measure({s.n_pos, s.n_neg, s.x + 1, s.y}, g) - f;
  } else {
    d.degenerate_x = true;
  }
  if (s.y + 1 <= s.n_neg && s.true_positives() > 0) {
    d.dy = fn_measure({s.n_pos, s.n_neg, s.x, s.y + 1}, g) - f;
  } else {
    d.degenerate_y = true;
  }
  return d;
}

inline FnPartials analytic_fn_partials(const ConfusionState& s, FnGuidance g) {
  s.validate();
  if (s.true_positives() == 0) throw NumericError("analytic Fn partials: no true positives");
  const double n2 = g.n * g.n;
  const double p = precision_of(s), r = recall_of(s);
  const double den = n2 * p + r;
  const double df_dp = (1.0 + n2) * r * r / (den * den);
  const double df_dr = n2 * (1.0 + n2) * p * p / (den * den);
  const double tp = static_cast<double>(s.true_positives());
  const double pred = tp + static_cast<double>(s.y);
  const double dp_dx = -static_cast<double>(s.y) / (pred * pred);
  const double dp_dy = -tp / (pred * pred);
  const double dr_dx = -1.0 / static_cast<double>(s.n_pos);
  return {df_dp * dp_dx + df_dr * dr_dx, df_dp * dp_dy, false, false};
}

// Loss sensitivities in confusion space for given weights:
// dl/dX = lambda (l_fn - l_tp) / N_pos, dl/dY = mu (l_fp - l_tn) / N_neg.
inline std::pair<double, double> loss_partials(const ConfusionState& s, const CategoryLosses& l,
                                               const ClassWeights& w) {
  return {w.lambda * (l.l_fn - l.l_tp) / static_cast<double>(s.n_pos),
          w.mu * (l.l_fp - l.l_tn) / static_cast<double>(s.n_neg)};
}

inline ClassWeights solve_class_weights(const ConfusionState& s, const CategoryLosses& l, FnGuidance g) {
  s.validate();
  const ClassWeights fallback{0.5, 0.5, true};
  if (s.n_pos == 0 || s.n_neg == 0) return fallback;
  // Perfect classification: both error categories hold placeholder losses.
  if (s.x == 0 && s.y == 0) return fallback;
  const FnPartials d = numerical_fn_partials(s, g);
  if (d.degenerate_x || d.degenerate_y || d.dx == 0.0 || d.dy == 0.0) return fallback;
  const double gap_pos = l.l_fn - l.l_tp;
  const double gap_neg = l.l_fp - l.l_tn;
  if (!(gap_pos > kLossGapFloor) || !(gap_neg > kLossGapFloor)) return fallback;
  const double k = (d.dx / d.dy) * (static_cast<double>(s.n_pos) / static_cast<double>(s.n_neg)) * gap_neg / gap_pos;
  if (!(k > 0.0) || !std::isfinite(k)) return fallback;
  ClassWeights w;
  w.lambda = k / (1.0 + k);
  w.mu = 1.0 - w.lambda;
  return w;
}

namespace detail {

inline void require_both_classes(std::span<const std::uint8_t> labels, std::size_t& n_pos, std::size_t& n_neg) {
  n_pos = 0;
  for (auto l : labels) n_pos += l ? 1 : 0;
  n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DataError("weighted cross entropy needs both classes in every pair");
}

}  // namespace detail

// -(lambda * mean_pos log y + mu * mean_neg log(1 - y)); probs is N x 1.
inline diff::Var weighted_ib_ce_loss(const diff::Var& probs, std::span<const std::uint8_t> labels,
                                     const ClassWeights& w) {
  const auto& shape = probs.shape();
  if (shape.size() != 2 || shape[1] != 1 || shape[0] != labels.size()) {
    throw ShapeError("weighted_ib_ce_loss: probabilities must be N x 1 matching labels");
  }
  std::size_t n_pos = 0, n_neg = 0;
  detail::require_both_classes(labels, n_pos, n_neg);
  std::vector<double> pos(labels.size()), neg(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    pos[i] = labels[i] ? w.lambda / static_cast<double>(n_pos) : 0.0;
    neg[i] = labels[i] ? 0.0 : w.mu / static_cast<double>(n_neg);
  }
  auto& g = probs.graph();
  const auto pos_c = g.constant(diff::Array::column(std::move(pos)));
  const auto neg_c = g.constant(diff::Array::column(std::move(neg)));
  const auto terms = pos_c * diff::log(probs) + neg_c * diff::log(1.0 - probs);
  return -diff::reduce_sum(terms);
}

enum class LossKind { guided, ib_ce, ce };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::guided: return "guided";
    case LossKind::ib_ce: return "ib_ce";
    case LossKind::ce: return "ce";
  }
  return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "guided") return LossKind::guided;
  if (s == "ib_ce" || s == "ibce") return LossKind::ib_ce;
  if (s == "ce") return LossKind::ce;
  throw UsageError("unknown loss kind '" + s + "' (expected guided, ib_ce or ce)");
}

struct LossStep {
  diff::Var loss;
  ClassWeights weights;
  ConfusionState state;
  CategoryLosses losses;
};

// One weighting-and-loss step on one batch element. Plain CE is the weighted form
// with lambda = N_pos / N; fixed IB-CE uses lambda = 0.5.
inline LossStep classification_loss_step(const diff::Var& probs, std::span<const std::uint8_t> labels,
                                         FnGuidance guidance, LossKind kind = LossKind::guided) {
  const auto& p = probs.value();
  LossStep out;
  out.state = confusion_from_probabilities(p.values(), labels);
  out.losses = category_average_losses(p.values(), labels);
  switch (kind) {
    case LossKind::guided: out.weights = solve_class_weights(out.state, out.losses, guidance); break;
    case LossKind::ib_ce: out.weights = {0.5, 0.5, false}; break;
    case LossKind::ce: {
      const double total = static_cast<double>(out.state.n_pos + out.state.n_neg);
      out.weights.lambda = total > 0 ? static_cast<double>(out.state.n_pos) / total : 0.5;
      out.weights.mu = 1.0 - out.weights.lambda;
      break;
    }
  }
  out.loss = weighted_ib_ce_loss(probs, labels, out.weights);
  return out;
}

inline LossStep guided_loss_step(const diff::Var& probs, std::span<const std::uint8_t> labels, FnGuidance guidance) {
  return classification_loss_step(probs, labels, guidance, LossKind::guided);
}

// ---------------------------------------------------------------------------
// Randomized check of the weighting theory, used by the CLI and tests.

struct TheoryReport {
  std::size_t trials = 0;
  std::size_t directions = 0;
  double max_weight_sum_error = 0.0;
  double max_ratio_residual = 0.0;
  double max_antiparallel_product = -std::numeric_limits<double>::infinity();
  std::size_t sign_violations = 0;
  std::size_t fallbacks = 0;
};

struct TheoryOptions {
  std::size_t trials = 10000;
  std::size_t directions = 1000;
  std::int64_t min_count = 10;
  std::int64_t max_count = 100000;
  std::uint64_t seed = 0;
};

inline TheoryReport verify_theory(const TheoryOptions& opt) {
  std::mt19937_64 rng(opt.seed);
  std::uniform_int_distribution<std::int64_t> count(opt.min_count, opt.max_count);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double guidance_values[] = {0.5, 1.0, 2.0, 2.5, 3.0};
  TheoryReport rep;
  rep.trials = opt.trials;
  rep.directions = opt.directions;
  for (std::size_t t = 0; t < opt.trials; ++t) {
    ConfusionState s;
    s.n_pos = count(rng);
    s.n_neg = count(rng);
    s.x = std::uniform_int_distribution<std::int64_t>(0, s.n_pos - 1)(rng);
    s.y = std::uniform_int_distribution<std::int64_t>(0, s.n_neg - 1)(rng);
    const FnGuidance g(guidance_values[t % 5]);
    CategoryLosses l;
    l.l_tp = 0.7 * unit(rng);
    l.l_tn = 0.7 * unit(rng);
    l.l_fn = l.l_tp + 0.01 + 3.0 * unit(rng);
    l.l_fp = l.l_tn + 0.01 + 3.0 * unit(rng);
    const ClassWeights w = solve_class_weights(s, l, g);
    if (w.fallback) {
      ++rep.fallbacks;
      continue;
    }
    const FnPartials d = numerical_fn_partials(s, g);
    const auto [lx, ly] = loss_partials(s, l, w);
    rep.max_weight_sum_error = std::max(rep.max_weight_sum_error, std::abs(w.lambda + w.mu - 1.0));
    const double fr = d.dx / d.dy;
    rep.max_ratio_residual = std::max(rep.max_ratio_residual, std::abs(fr - lx / ly) / std::abs(fr));
    if (!(lx > 0.0 && ly > 0.0 && d.dx <= 0.0 && d.dy <= 0.0)) ++rep.sign_violations;
    for (std::size_t k = 0; k < opt.directions; ++k) {
      const double ax = gauss(rng), ay = gauss(rng);
      const double prod = (lx * ax + ly * ay) * (d.dx * ax + d.dy * ay);
      rep.max_antiparallel_product = std::max(rep.max_antiparallel_product, prod);
    }
  }
  return rep;
}

}  // namespace fgl
