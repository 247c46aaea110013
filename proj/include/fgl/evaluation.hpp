#pragma once

// Classification metrics, pose-accuracy mAP and the method comparison runner
// with its JSON / CSV reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fgl/cascade.hpp"
#include "fgl/error.hpp"
#include "fgl/geometry.hpp"
#include "fgl/guided_loss.hpp"
#include "fgl/prior.hpp"
#include "fgl/random.hpp"
#include "fgl/synthgen.hpp"

namespace fgl {

struct ClassificationMetrics {
  double precision = 0, recall = 0, f1 = 0, f2 = 0;
};

inline ClassificationMetrics metrics_from_state(const ConfusionState& s) {
  return {precision_of(s), recall_of(s), fn_measure(s, FnGuidance(1.0)), fn_measure(s, FnGuidance(2.0))};
}

inline ClassificationMetrics compute_classification_metrics(std::span<const double> probs,
                                                            std::span<const std::uint8_t> labels) {
  const auto s = confusion_from_probabilities(probs, labels);
  if (s.n_pos == 0 || s.n_neg == 0) throw DataError("classification metrics need both classes");
  return metrics_from_state(s);
}

inline constexpr double kFailureErrorDeg = 180.0;

// 100 * mean over theta = 5, 10, ..., max_threshold of the fraction of
// errors <= theta.
inline double map_at_threshold(std::span<const double> errors, int max_threshold) {
  if (errors.empty()) throw UsageError("map_at_threshold: empty error list");
  if (max_threshold < 5 || max_threshold % 5 != 0) throw UsageError("map_at_threshold: threshold must be 5, 10, 15, ...");
  double sum = 0.0;
  int steps = 0;
  for (int theta = 5; theta <= max_threshold; theta += 5, ++steps) {
    std::size_t hit = 0;
    for (double e : errors) hit += e <= theta ? 1 : 0;
    sum += static_cast<double>(hit) / static_cast<double>(errors.size());
  }
  return 100.0 * sum / steps;
}

// ---------------------------------------------------------------------------
// Comparison runner

inline constexpr double kPostRansacThreshold = 1e-3;
inline constexpr int kPostRansacIterations = 2000;

enum class MethodKind { ransac, oracle, learned };
enum class PostKind { weighted_eight_point, ransac };

inline std::string to_string(PostKind p) { return p == PostKind::weighted_eight_point ? "w8p" : "ransac"; }

inline PostKind post_kind_from_string(const std::string& s) {
  if (s == "w8p" || s == "weighted8") return PostKind::weighted_eight_point;
  if (s == "ransac") return PostKind::ransac;
  throw UsageError("unknown post-processing '" + s + "' (expected w8p or ransac)");
}

struct MethodSpec {
  std::string name;
  MethodKind kind = MethodKind::oracle;
  const CascadeModel* model = nullptr;
  const RatioDensityModel* prior = nullptr;
};

struct PairRecord {
  double precision = 0, recall = 0, f1 = 0, f2 = 0;
  double rotation_deg = kFailureErrorDeg, translation_deg = kFailureErrorDeg;
  bool failed = true;
  double error() const { return std::max(rotation_deg, translation_deg); }
};

struct MethodReport {
  std::string method;
  std::string post;
  double map5 = 0, map10 = 0, map20 = 0;
  double mean_p = 0, mean_r = 0, mean_f1 = 0, mean_f2 = 0;
  std::vector<PairRecord> per_pair;
};

// Per-correspondence inlier probability and eight-point weight of a method.
struct Prediction {
  std::vector<double> probability;
  std::vector<double> weight;
};

inline Prediction predict(const MethodSpec& m, const ScenePair& pair, std::uint64_t seed, std::size_t index) {
  const std::size_t n = pair.size();
  Prediction p;
  p.probability.resize(n);
  p.weight.resize(n);
  switch (m.kind) {
    case MethodKind::oracle:
      for (std::size_t i = 0; i < n; ++i) p.probability[i] = p.weight[i] = pair.labels[i] ? 1.0 : 0.0;
      break;
    case MethodKind::ransac: {
      const auto r = ransac_essential(pair.correspondences, kPostRansacIterations, kPostRansacThreshold,
                                      splitmix64(seed ^ splitmix64(index)));
      for (std::size_t i = 0; i < n; ++i) p.probability[i] = p.weight[i] = r.inliers[i] ? 1.0 : 0.0;
      break;
    }
    case MethodKind::learned: {
      if (m.model == nullptr || m.prior == nullptr) throw UsageError("learned method '" + m.name + "' has no model");
      const auto prior = pair_prior_probabilities(pair.lowe_ratios, *m.prior);
      diff::Graph g(&m.model->params);
      ForwardOptions opt;
      opt.mode = Mode::eval;
      opt.solve_essential = false;
      const auto out = forward_cascade(*m.model, g, pair.correspondences, prior, opt);
      const auto& logits = out.final_logits().value();
      for (std::size_t i = 0; i < n; ++i) {
        p.probability[i] = sigmoid(logits[i]);
        p.weight[i] = inlier_weight(logits[i]);
      }
      break;
    }
  }
  return p;
}

inline PairRecord evaluate_pair(const Prediction& pred, const ScenePair& pair, PostKind post, std::uint64_t seed,
                                std::size_t index) {
  PairRecord rec;
  const auto s = confusion_from_probabilities(pred.probability, pair.labels);
  const auto m = metrics_from_state(s);
  rec.precision = m.precision;
  rec.recall = m.recall;
  rec.f1 = m.f1;
  rec.f2 = m.f2;

  std::vector<Correspondence> predicted;
  for (std::size_t i = 0; i < pair.size(); ++i) {
    if (pred.probability[i] > 0.5) predicted.push_back(pair.correspondences[i]);
  }
  try {
    EssentialMatrix e;
    if (post == PostKind::weighted_eight_point) {
      e = weighted_eight_point(pair.correspondences, pred.weight);
    } else {
      if (predicted.size() < 8) return rec;
      e = ransac_essential(predicted, kPostRansacIterations, kPostRansacThreshold,
                           splitmix64(seed ^ splitmix64(index) ^ 0x9057))
              .essential;
    }
    const auto err = predicted.empty() ? recover_pose_and_angular_errors(e, pair.gt_pose, pair.correspondences)
                                       : recover_pose_and_angular_errors(e, pair.gt_pose, predicted);
    rec.rotation_deg = err.rotation_deg;
    rec.translation_deg = err.translation_deg;
    rec.failed = false;
  } catch (const NumericError&) {
    // scored as failure
  } catch (const UsageError&) {
  }
  return rec;
}

inline MethodReport summarize(std::string method, PostKind post, std::vector<PairRecord> records) {
  MethodReport r;
  r.method = std::move(method);
  r.post = to_string(post);
  std::vector<double> errors;
  for (const auto& p : records) {
    errors.push_back(p.error());
    r.mean_p += p.precision;
    r.mean_r += p.recall;
    r.mean_f1 += p.f1;
    r.mean_f2 += p.f2;
  }
  const double n = static_cast<double>(records.size());
  r.mean_p /= n;
  r.mean_r /= n;
  r.mean_f1 /= n;
  r.mean_f2 /= n;
  r.map5 = map_at_threshold(errors, 5);
  r.map10 = map_at_threshold(errors, 10);
  r.map20 = map_at_threshold(errors, 20);
  r.per_pair = std::move(records);
  return r;
}

// One report per (method, post) in method-major order.
inline std::vector<MethodReport> run_comparison(const std::vector<ScenePair>& pairs,
                                                const std::vector<MethodSpec>& methods,
                                                const std::vector<PostKind>& posts, std::uint64_t seed) {
  if (pairs.empty()) throw DataError("run_comparison: empty dataset");
  std::vector<MethodReport> out;
  for (const auto& m : methods) {
    std::vector<std::vector<PairRecord>> records(posts.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto pred = predict(m, pairs[i], seed, i);
      for (std::size_t k = 0; k < posts.size(); ++k) {
        records[k].push_back(evaluate_pair(pred, pairs[i], posts[k], seed, i));
      }
    }
    for (std::size_t k = 0; k < posts.size(); ++k) out.push_back(summarize(m.name, posts[k], std::move(records[k])));
  }
  return out;
}

inline nlohmann::json to_json(const MethodReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& p : r.per_pair) {
    per.push_back({{"precision", p.precision},
                   {"recall", p.recall},
                   {"f1", p.f1},
                   {"f2", p.f2},
                   {"rotation_deg", p.rotation_deg},
                   {"translation_deg", p.translation_deg},
                   {"failed", p.failed}});
  }
  return {{"method", r.method}, {"post", r.post},     {"map5", r.map5},     {"map10", r.map10},
          {"map20", r.map20},   {"mean_p", r.mean_p}, {"mean_r", r.mean_r}, {"mean_f1", r.mean_f1},
          {"mean_f2", r.mean_f2}, {"per_pair", per}};
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline std::string report_csv(const std::vector<MethodReport>& reports) {
  std::ostringstream os;
  os << "method,post,map5,map10,map20,mean_p,mean_r,mean_f1,mean_f2,pairs\n";
  for (const auto& r : reports) {
    os << r.method << ',' << r.post << ',' << format_number(r.map5) << ',' << format_number(r.map10) << ','
       << format_number(r.map20) << ',' << format_number(r.mean_p) << ',' << format_number(r.mean_r) << ','
       << format_number(r.mean_f1) << ',' << format_number(r.mean_f2) << ',' << r.per_pair.size() << '\n';
  }
  return os.str();
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace detail

// Writes <stem>.json and <stem>.csv. A path ending in .json or .csv is
// treated as the stem plus that extension.
inline void write_reports(const std::filesystem::path& report, const std::vector<MethodReport>& reports) {
  auto stem = report;
  if (stem.extension() == ".json" || stem.extension() == ".csv") stem.replace_extension();
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) j.push_back(to_json(r));
  detail::write_text(std::filesystem::path(stem.string() + ".json"), j.dump(2) + "\n");
  detail::write_text(std::filesystem::path(stem.string() + ".csv"), report_csv(reports));
}

// Training curves (iteration vs validation precision / recall / F2).
struct CurvePoint {
  std::size_t iteration = 0;
  double precision = 0, recall = 0, f2 = 0;
};

inline std::string curve_csv(const std::vector<CurvePoint>& points) {
  std::ostringstream os;
  os << "iteration,precision,recall,f2\n";
  for (const auto& p : points) {
    os << p.iteration << ',' << format_number(p.precision) << ',' << format_number(p.recall) << ','
       << format_number(p.f2) << '\n';
  }
  return os.str();
}

}  // namespace fgl
