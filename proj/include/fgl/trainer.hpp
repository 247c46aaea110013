#pragma once

// Adam training loop for the cascade: stateless per-iteration batch sampling,
// guided class weighting per stage and pair, gradient clipping, periodic
// validation, JSONL logging and resumable checkpoints.

#include <algorithm>
#include <charconv>
#include <exception>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "fgl/cascade.hpp"
#include "fgl/diff.hpp"
#include "fgl/error.hpp"
#include "fgl/evaluation.hpp"
#include "fgl/prior.hpp"
#include "fgl/random.hpp"
#include "fgl/synthgen.hpp"

namespace fgl {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t iterations = 5000;
  std::size_t validation_interval = 50;
  std::size_t validation_pairs = 200;  // taken from the end of the dataset
  double grad_clip = 10.0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;  // pairs of a batch processed concurrently; results do not depend on it

  void validate() const {
    if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be positive");
    if (batch_size == 0) throw UsageError("batch_size must be at least 1");
    if (validation_interval == 0) throw UsageError("validation_interval must be at least 1");
    if (!(grad_clip > 0.0)) throw UsageError("grad_clip must be positive");
    if (threads == 0) throw UsageError("threads must be at least 1");
  }
};

struct RunConfig {
  TrainConfig train;
  CascadeConfig model;
};

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"learning_rate", t.learning_rate},         {"batch_size", t.batch_size},
          {"iterations", t.iterations},               {"validation_interval", t.validation_interval},
          {"validation_pairs", t.validation_pairs},   {"grad_clip", t.grad_clip},
          {"seed", t.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig t;
  t.learning_rate = j.at("learning_rate").get<double>();
  t.batch_size = j.at("batch_size").get<std::size_t>();
  t.iterations = j.at("iterations").get<std::size_t>();
  t.validation_interval = j.at("validation_interval").get<std::size_t>();
  t.validation_pairs = j.at("validation_pairs").get<std::size_t>();
  t.grad_clip = j.at("grad_clip").get<double>();
  t.seed = j.at("seed").get<std::uint64_t>();
  return t;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw UsageError("config: bad value for " + key + ": '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw UsageError("config: bad boolean for " + key + ": '" + v + "'");
}

}  // namespace detail

// Flat "key = value" text; '#' starts a comment. Unknown keys are rejected.
inline RunConfig parse_run_config(const std::string& text) {
  RunConfig rc;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string v = detail::trim(line.substr(eq + 1));
    auto& t = rc.train;
    auto& m = rc.model;
    if (key == "learning_rate") t.learning_rate = detail::parse_number<double>(key, v);
    else if (key == "batch_size") t.batch_size = detail::parse_number<std::size_t>(key, v);
    else if (key == "iterations" || key == "total_iterations") t.iterations = detail::parse_number<std::size_t>(key, v);
    else if (key == "validation_interval") t.validation_interval = detail::parse_number<std::size_t>(key, v);
    else if (key == "validation_pairs") t.validation_pairs = detail::parse_number<std::size_t>(key, v);
    else if (key == "grad_clip") t.grad_clip = detail::parse_number<double>(key, v);
    else if (key == "seed") t.seed = detail::parse_number<std::uint64_t>(key, v);
    else if (key == "threads") t.threads = detail::parse_number<std::size_t>(key, v);
    else if (key == "trunk_depth") m.trunk_depth = detail::parse_number<std::size_t>(key, v);
    else if (key == "refine_depth") m.refine_depth = detail::parse_number<std::size_t>(key, v);
    else if (key == "channels") m.channels = detail::parse_number<std::size_t>(key, v);
    else if (key == "groups") m.groups = detail::parse_number<std::size_t>(key, v);
    else if (key == "reduction") m.reduction = detail::parse_number<std::size_t>(key, v);
    else if (key == "eta1") m.eta1 = detail::parse_number<double>(key, v);
    else if (key == "eta2") m.eta2 = detail::parse_number<double>(key, v);
    else if (key == "eta3") m.eta3 = detail::parse_number<double>(key, v);
    else if (key == "eta3_warmup" || key == "eta3_warmup_iterations") m.eta3_warmup = detail::parse_number<std::size_t>(key, v);
    else if (key == "cascaded") m.cascaded = detail::parse_bool(key, v);
    else if (key == "loss") m.loss = loss_kind_from_string(v);
    else if (key == "stage_guidance") {
      m.stage_guidance.clear();
      std::istringstream parts(v);
      std::string item;
      while (std::getline(parts, item, ',')) m.stage_guidance.push_back(detail::parse_number<double>(key, detail::trim(item)));
    } else {
      throw UsageError("config: unknown key '" + key + "'");
    }
  }
  rc.train.validate();
  rc.model.validate();
  return rc;
}

inline RunConfig read_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<diff::Array> m;
  std::vector<diff::Array> v;
  std::uint64_t step = 0;

  static AdamState zeros(const diff::ParameterSet& params) {
    AdamState s;
    s.m = diff::zero_gradients(params);
    s.v = diff::zero_gradients(params);
    return s;
  }
};

inline constexpr double kAdamBeta1 = 0.9, kAdamBeta2 = 0.999, kAdamEps = 1e-8;

inline void adam_step(diff::ParameterSet& params, const diff::Gradients& grads, AdamState& state, double lr) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: parameter / gradient / state count mismatch");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (grads[p].shape() != params.value(p).shape() || state.m[p].shape() != params.value(p).shape()) {
      throw ShapeError("adam_step: shape mismatch for " + params.name(p));
    }
    if (!grads[p].all_finite()) throw NumericError("adam_step: non-finite gradient for " + params.name(p));
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = params.value(p);
    auto& m = state.m[p];
    auto& v = state.v[p];
    const auto& g = grads[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g[i];
      v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kAdamEps);
    }
  }
}

inline double clip_by_global_norm(diff::Gradients& g, double max_norm) {
  const double norm = diff::global_norm(g);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& a : g) {
      for (auto& v : a.values()) v *= s;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Data

struct TrainingData {
  std::vector<ScenePair> train;
  std::vector<ScenePair> validation;
  std::vector<std::vector<double>> train_prior;
  std::vector<std::vector<double>> validation_prior;
};

inline bool usable_pair(const ScenePair& p) {
  const std::size_t pos = p.inlier_count();
  return p.size() >= kMinPairPoints && pos > 0 && pos < p.size();
}

// Splits off the last validation_pairs pairs and precomputes per-pair priors.
// Pairs below 16 correspondences or with a single class are dropped.
inline TrainingData prepare_training_data(const std::vector<ScenePair>& pairs, const RatioDensityModel& prior,
                                          std::size_t validation_pairs) {
  std::vector<const ScenePair*> usable;
  for (const auto& p : pairs) {
    if (usable_pair(p)) usable.push_back(&p);
  }
  if (usable.size() < 2) throw DataError("training needs at least two usable pairs");
  const std::size_t nval = std::min(validation_pairs, usable.size() - 1);
  TrainingData d;
  for (std::size_t i = 0; i < usable.size(); ++i) {
    const bool val = i >= usable.size() - nval;
    auto& set = val ? d.validation : d.train;
    auto& pri = val ? d.validation_prior : d.train_prior;
    set.push_back(*usable[i]);
    pri.push_back(pair_prior_probabilities(usable[i]->lowe_ratios, prior));
  }
  return d;
}

inline std::vector<std::size_t> sample_batch(std::uint64_t seed, std::size_t iteration, std::size_t batch,
                                             std::size_t population) {
  auto rng = derived_rng(seed, iteration, 0xba7c4);
  std::uniform_int_distribution<std::size_t> pick(0, population - 1);
  std::vector<std::size_t> out(batch);
  for (auto& i : out) i = pick(rng);
  return out;
}

// ---------------------------------------------------------------------------
// Loop

struct LogRecord {
  std::size_t iteration = 0;
  double loss = 0.0;
  std::vector<std::optional<double>> lambda;  // per stage, coarse to final
  std::size_t fallback_count = 0;
  std::optional<ClassificationMetrics> validation;
};

inline nlohmann::json to_json(const LogRecord& r) {
  nlohmann::json j = {{"iteration", r.iteration}, {"loss", r.loss}};
  for (std::size_t s = 0; s < kStages; ++s) {
    const std::string key = "lambda_stage" + std::to_string(s + 1);
    j[key] = s < r.lambda.size() && r.lambda[s] ? nlohmann::json(*r.lambda[s]) : nlohmann::json(nullptr);
  }
  j["weight_fallbacks"] = r.fallback_count;
  if (r.validation) {
    j["val_precision"] = r.validation->precision;
    j["val_recall"] = r.validation->recall;
    j["val_f2"] = r.validation->f2;
    j["val_f1"] = r.validation->f1;
  } else {
    j["val_precision"] = nullptr;
    j["val_recall"] = nullptr;
    j["val_f2"] = nullptr;
    j["val_f1"] = nullptr;
  }
  return j;
}

// Pooled confusion over the validation pairs at threshold 0.5 on the final
// stage, batch norm in eval mode.
inline ClassificationMetrics validate_model(const CascadeModel& m, const std::vector<ScenePair>& pairs,
                                            const std::vector<std::vector<double>>& priors) {
  ConfusionState total;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    diff::Graph g(&m.params);
    ForwardOptions opt;
    opt.mode = Mode::eval;
    opt.solve_essential = false;
    const auto out = forward_cascade(m, g, pairs[i].correspondences, priors[i], opt);
    const auto& logits = out.final_logits().value();
    std::vector<double> p(logits.size());
    for (std::size_t k = 0; k < p.size(); ++k) p[k] = sigmoid(logits[k]);
    const auto s = confusion_from_probabilities(p, pairs[i].labels);
    total.n_pos += s.n_pos;
    total.n_neg += s.n_neg;
    total.x += s.x;
    total.y += s.y;
  }
  return metrics_from_state(total);
}

struct TrainerState {
  CascadeModel model;
  AdamState adam;
  std::size_t next_iteration = 0;
};

inline TrainerState initial_state(const RunConfig& rc) {
  TrainerState s{build_cascade(rc.model, rc.train.seed), {}, 0};
  s.adam = AdamState::zeros(s.model.params);
  return s;
}

struct IterationResult {
  LogRecord record;
  double grad_norm = 0.0;
};

struct PairStep {
  diff::Gradients grads;
  double loss = 0.0;
  std::vector<ClassWeights> weights;
  std::vector<BnBatchStats> bn;
};

inline PairStep pair_step(const CascadeModel& model, const ScenePair& pair, std::span<const double> prior,
                          std::size_t iteration) {
  PairStep out;
  ForwardOptions opt;
  opt.mode = Mode::train;
  opt.solve_essential = model.config.eta3_at(iteration) > 0.0;
  opt.bn_records = &out.bn;
  diff::Graph g(&model.params);
  const auto fwd = forward_cascade(model, g, pair.correspondences, prior, opt);
  const auto loss = total_loss(fwd, pair.labels, pair.gt_essential, model.config, iteration);
  out.grads = g.backpropagate(loss.total);
  out.loss = loss.total.value().item();
  out.weights = loss.stage_weights;
  return out;
}

// Runs fn(k) for k in [0, count) on up to `threads` workers.
inline void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(threads, count);
  if (threads <= 1) {
    for (std::size_t k = 0; k < count; ++k) fn(k);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t k = t; k < count; k += threads) fn(k);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// One optimizer step on the batch for `iteration`. Per-pair gradients are
// summed in batch order so the result does not depend on the thread count.
inline IterationResult train_iteration(TrainerState& st, const RunConfig& rc, const TrainingData& data,
                                       std::size_t iteration) {
  auto& model = st.model;
  const auto batch = sample_batch(rc.train.seed, iteration, rc.train.batch_size, data.train.size());
  std::vector<PairStep> steps(batch.size());
  parallel_for(batch.size(), rc.train.threads, [&](std::size_t k) {
    steps[k] = pair_step(model, data.train[batch[k]], data.train_prior[batch[k]], iteration);
  });

  diff::Gradients grads = diff::zero_gradients(model.params);
  const double scale = 1.0 / static_cast<double>(batch.size());
  const std::size_t stages = model.config.heads();
  std::vector<double> lambda_sum(stages, 0.0);
  IterationResult res;
  res.record.iteration = iteration;
  for (const auto& step : steps) {
    diff::accumulate(grads, step.grads, scale);
    res.record.loss += step.loss * scale;
    for (std::size_t s = 0; s < stages; ++s) {
      lambda_sum[s] += step.weights[s].lambda;
      res.record.fallback_count += step.weights[s].fallback ? 1 : 0;
    }
    for (std::size_t k = 0; k < model.running.size(); ++k) model.running[k].update(step.bn[k].mean, step.bn[k].var);
  }
  res.record.lambda.assign(kStages, std::nullopt);
  for (std::size_t s = 0; s < stages; ++s) {
    // Non-cascaded models only have the final stage.
    const std::size_t slot = stages == kStages ? s : kStages - 1;
    res.record.lambda[slot] = lambda_sum[s] * scale;
  }
  res.grad_norm = clip_by_global_norm(grads, rc.train.grad_clip);
  adam_step(model.params, grads, st.adam, rc.train.learning_rate);
  return res;
}

struct TrainCallbacks {
  std::function<void(const LogRecord&)> on_record;
};

// Runs iterations [st.next_iteration, rc.train.iterations). Validation runs
// after every validation_interval-th iteration and after the last one.
inline std::vector<LogRecord> train(TrainerState& st, const RunConfig& rc, const TrainingData& data,
                                    const TrainCallbacks& cb = {}) {
  rc.train.validate();
  if (data.train.empty()) throw DataError("no training pairs");
  std::vector<LogRecord> log;
  for (std::size_t it = st.next_iteration; it < rc.train.iterations; ++it) {
    auto res = train_iteration(st, rc, data, it);
    const bool last = it + 1 == rc.train.iterations;
    if (!data.validation.empty() && ((it + 1) % rc.train.validation_interval == 0 || last)) {
      res.record.validation = validate_model(st.model, data.validation, data.validation_prior);
    }
    st.next_iteration = it + 1;
    if (cb.on_record) cb.on_record(res.record);
    log.push_back(std::move(res.record));
  }
  return log;
}

inline std::vector<CurvePoint> curve_points(const std::vector<LogRecord>& log) {
  std::vector<CurvePoint> out;
  for (const auto& r : log) {
    if (r.validation) out.push_back({r.iteration, r.validation->precision, r.validation->recall, r.validation->f2});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_training_checkpoint(const std::filesystem::path& path, const TrainerState& st, const RunConfig& rc,
                                     const RatioDensityModel& prior) {
  CheckpointData d;
  d.header = {{"config", to_json(rc.model)},
              {"train", to_json(rc.train)},
              {"iteration", st.next_iteration},
              {"seed", rc.train.seed},
              {"adam_step", st.adam.step},
              {"prior", to_json(prior)}};
  append_model_tensors(st.model, d.tensors);
  for (std::size_t p = 0; p < st.model.params.size(); ++p) {
    d.tensors.push_back({"adam.m." + st.model.params.name(p), st.adam.m[p]});
    d.tensors.push_back({"adam.v." + st.model.params.name(p), st.adam.v[p]});
  }
  write_checkpoint_file(path, std::move(d));
}

struct LoadedCheckpoint {
  RunConfig config;
  TrainerState state;
  RatioDensityModel prior;
};

inline LoadedCheckpoint load_training_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("checkpoint not found: " + path.string());
  const auto d = read_checkpoint_file(path);
  LoadedCheckpoint out;
  try {
    out.config.model = cascade_config_from_json(d.header.at("config"));
    out.config.train = train_config_from_json(d.header.at("train"));
    out.prior = prior_from_json(d.header.at("prior"));
    out.state.model = build_cascade(out.config.model, d.header.at("seed").get<std::uint64_t>());
    out.state.next_iteration = d.header.at("iteration").get<std::size_t>();
    out.state.adam = AdamState::zeros(out.state.model.params);
    out.state.adam.step = d.header.at("adam_step").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const UsageError& e) {
    throw DataError(std::string("invalid checkpoint configuration: ") + e.what());
  }
  std::size_t i = load_model_tensors(out.state.model, d.tensors);
  const auto& params = out.state.model.params;
  if (d.tensors.size() != i + 2 * params.size()) throw DataError("checkpoint: optimizer state missing");
  for (std::size_t p = 0; p < params.size(); ++p) {
    out.state.adam.m[p] = d.tensors[i++].value;
    out.state.adam.v[p] = d.tensors[i++].value;
    if (out.state.adam.m[p].shape() != params.value(p).shape() ||
        out.state.adam.v[p].shape() != params.value(p).shape()) {
      throw DataError("checkpoint: optimizer state shape mismatch");
    }
  }
  return out;
}

}  // namespace fgl
