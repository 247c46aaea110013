#pragma once

// Three-stage coarse-to-fine correspondence classifier. A trunk of HA blocks
// produces stage-1 logits; each refinement module re-runs HA blocks on the
// previous features with the previous stage's eight-point weights as the
// attention prior. The non-cascaded variant stacks the same number of blocks
// and has a single head.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fgl/diff.hpp"
#include "fgl/error.hpp"
#include "fgl/geometry.hpp"
#include "fgl/guided_loss.hpp"
#include "fgl/netblocks.hpp"
#include "fgl/random.hpp"
#include "fgl/synthgen.hpp"

namespace fgl {

inline constexpr double kRefinePriorFloor = 1e-3;
inline constexpr std::size_t kStages = 3;
inline constexpr std::size_t kMinPairPoints = 16;

struct CascadeConfig {
  std::size_t trunk_depth = 6;
  std::size_t refine_depth = 2;
  std::size_t channels = 32;
  std::size_t groups = 4;
  std::size_t reduction = 4;
  std::vector<double> stage_guidance{3.0, 2.5, 2.0};
  double eta1 = 0.1;
  double eta2 = 0.1;
  double eta3 = 0.1;
  std::size_t eta3_warmup = 500;
  bool cascaded = true;
  LossKind loss = LossKind::guided;

  ChannelAttentionDims dims() const { return {channels, groups, reduction}; }
  std::size_t total_blocks() const { return trunk_depth + 2 * refine_depth; }
  std::size_t heads() const { return cascaded ? kStages : 1; }
  double final_guidance() const { return stage_guidance.back(); }

  void validate() const {
    dims().validate();
    if (trunk_depth == 0) throw UsageError("trunk_depth must be at least 1");
    if (stage_guidance.size() != kStages) throw UsageError("stage_guidance needs exactly three values");
    for (std::size_t k = 0; k < kStages; ++k) {
      if (!(stage_guidance[k] > 0.0)) throw UsageError("stage guidance values must be positive");
      if (k > 0 && !(stage_guidance[k] < stage_guidance[k - 1])) {
        throw UsageError("stage guidance must be strictly decreasing");
      }
    }
    if (!(eta1 >= 0.0) || !(eta2 >= 0.0) || !(eta3 >= 0.0)) throw UsageError("loss weights must be nonnegative");
  }

  double eta3_at(std::size_t iteration) const { return iteration < eta3_warmup ? 0.0 : eta3; }
};

// Closed-form tensor count: input lift (w, b), ten tensors per HA block and
// two per head.
inline std::size_t expected_tensor_count(const CascadeConfig& c) {
  return 2 + kHaBlockTensors * c.total_blocks() + 2 * c.heads();
}

struct HeadIds {
  std::size_t w, b;
};

struct CascadeModel {
  CascadeConfig config;
  std::uint64_t seed = 0;
  diff::ParameterSet params;
  std::size_t lift_w = 0, lift_b = 0;
  std::vector<HaBlockIds> blocks;
  std::vector<HeadIds> heads;
  std::vector<BnRunningStats> running;

  // Which blocks belong to which stage: trunk, refinement 1, refinement 2.
  std::pair<std::size_t, std::size_t> stage_blocks(std::size_t stage) const {
    if (!config.cascaded) return stage == 0 ? std::pair{std::size_t{0}, blocks.size()} : std::pair{blocks.size(), blocks.size()};
    const std::size_t t = config.trunk_depth, r = config.refine_depth;
    if (stage == 0) return {0, t};
    if (stage == 1) return {t, t + r};
    return {t + r, t + 2 * r};
  }
};

inline CascadeModel build_cascade(const CascadeConfig& config, std::uint64_t seed) {
  config.validate();
  CascadeModel m;
  m.config = config;
  m.seed = seed;
  auto rng = derived_rng(seed, 0, 0xca5cade);
  const std::size_t c = config.channels;
  m.lift_w = m.params.add("lift.w", detail::uniform_array({4, c}, detail::fan_in_bound(4), rng));
  m.lift_b = m.params.add("lift.b", detail::uniform_array({1, c}, detail::fan_in_bound(4), rng));
  const auto dims = config.dims();
  for (std::size_t k = 0; k < config.total_blocks(); ++k) {
    m.blocks.push_back(add_ha_block(m.params, "block" + std::to_string(k), dims, rng));
    m.running.emplace_back(c);
  }
  for (std::size_t h = 0; h < config.heads(); ++h) {
    const std::string p = "head" + std::to_string(h);
    HeadIds id;
    id.w = m.params.add(p + ".w", detail::uniform_array({c, 1}, detail::fan_in_bound(c), rng));
    id.b = m.params.add(p + ".b", diff::Array({1, 1}, 0.0));
    m.heads.push_back(id);
  }
  return m;
}

inline diff::Array coordinates_array(std::span<const Correspondence> corrs) {
  diff::Array a({corrs.size(), 4});
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    a(i, 0) = corrs[i].x1;
    a(i, 1) = corrs[i].y1;
    a(i, 2) = corrs[i].x2;
    a(i, 3) = corrs[i].y2;
  }
  return a;
}

struct CascadeOutput {
  std::vector<diff::Var> stage_logits;  // three for the cascade, one otherwise
  diff::Var final_weights;
  std::optional<diff::Var> essential_row;  // 1 x 9, absent if the solve failed or was skipped
  std::vector<std::vector<double>> refine_priors;  // attention priors used by the refinement stages

  const diff::Var& final_logits() const { return stage_logits.back(); }
};

struct ForwardOptions {
  Mode mode = Mode::train;
  bool solve_essential = true;
  std::vector<BnBatchStats>* bn_records = nullptr;  // one per block, filled in train mode
  const std::vector<std::vector<double>>* refine_priors = nullptr;  // replaces the computed ones when set
};

inline CascadeOutput forward_cascade(const CascadeModel& m, diff::Graph& g, std::span<const Correspondence> corrs,
                                     std::span<const double> prior, const ForwardOptions& opt = {}) {
  const std::size_t n = corrs.size();
  if (n < kMinPairPoints) throw DataError("pair has fewer than 16 correspondences");
  if (prior.size() != n) throw ShapeError("forward_cascade: prior length must equal N");
  if (opt.bn_records) opt.bn_records->assign(m.blocks.size(), {});
  const auto dims = m.config.dims();

  auto run_blocks = [&](diff::Var f, std::size_t begin, std::size_t end, std::span<const double> p) {
    for (std::size_t k = begin; k < end; ++k) {
      BlockContext ctx{opt.mode, &m.running[k], opt.bn_records ? &(*opt.bn_records)[k] : nullptr};
      f = ha_block_forward(f, p, m.blocks[k], dims, ctx);
    }
    return f;
  };
  auto head = [&](const diff::Var& f, std::size_t h) {
    return diff::matmul(f, g.parameter(m.heads[h].w)) + g.parameter(m.heads[h].b);
  };

  CascadeOutput out;
  diff::Var f = diff::matmul(g.constant(coordinates_array(corrs)), g.parameter(m.lift_w)) + g.parameter(m.lift_b);
  const auto [t0, t1] = m.stage_blocks(0);
  f = run_blocks(f, t0, t1, prior);
  out.stage_logits.push_back(head(f, 0));
  if (m.config.cascaded) {
    for (std::size_t s = 1; s < kStages; ++s) {
      // Previous-stage weights, held constant, steer the attention.
      const auto& prev = out.stage_logits.back().value();
      std::vector<double> refine_prior(n);
      for (std::size_t i = 0; i < n; ++i) refine_prior[i] = inlier_weight(prev[i]) + kRefinePriorFloor;
      if (opt.refine_priors) refine_prior = opt.refine_priors->at(s - 1);
      out.refine_priors.push_back(refine_prior);
      const auto [b0, b1] = m.stage_blocks(s);
      f = run_blocks(f, b0, b1, out.refine_priors.back());
      out.stage_logits.push_back(head(f, s));
    }
  }
  out.final_weights = inlier_weight_head(out.final_logits());
  if (opt.solve_essential) {
    try {
      out.essential_row = weighted_eight_point(out.final_weights, std::vector<Correspondence>(corrs.begin(), corrs.end()));
    } catch (const NumericError&) {
      out.essential_row.reset();
    }
  }
  return out;
}

struct LossBreakdown {
  diff::Var total;
  std::vector<double> stage_loss;  // classification loss per stage, coarse to final
  std::vector<ClassWeights> stage_weights;
  std::vector<ConfusionState> stage_state;
  double regression = 0.0;
  bool regression_used = false;
};

// l_cls + eta1 l_cls1 + eta2 l_cls2 + eta3(iteration) l_reg. The final stage
// uses the last guidance value, stage s < final the s-th.
inline LossBreakdown total_loss(const CascadeOutput& out, std::span<const std::uint8_t> labels,
                                const EssentialMatrix& gt, const CascadeConfig& config, std::size_t iteration) {
  LossBreakdown b;
  const std::size_t stages = out.stage_logits.size();
  const std::vector<double> stage_eta = {config.eta1, config.eta2};
  diff::Var total;
  for (std::size_t s = 0; s < stages; ++s) {
    const bool final_stage = s + 1 == stages;
    const double guidance = final_stage ? config.final_guidance() : config.stage_guidance[s];
    const auto step = classification_loss_step(classification_probability(out.stage_logits[s]), labels,
                                               FnGuidance(guidance), config.loss);
    b.stage_loss.push_back(step.loss.value().item());
    b.stage_weights.push_back(step.weights);
    b.stage_state.push_back(step.state);
    const diff::Var term = final_stage ? step.loss : step.loss * stage_eta.at(s);
    total = total.valid() ? total + term : term;
  }
  const double eta3 = config.eta3_at(iteration);
  if (eta3 > 0.0 && out.essential_row) {
    const auto reg = essential_regression_loss(*out.essential_row, gt);
    b.regression = reg.value().item();
    b.regression_used = true;
    total = total + reg * eta3;
  }
  b.total = total;
  return b;
}

// ---------------------------------------------------------------------------
// Configuration (de)serialization

inline nlohmann::json to_json(const CascadeConfig& c) {
  return {{"trunk_depth", c.trunk_depth}, {"refine_depth", c.refine_depth}, {"channels", c.channels},
          {"groups", c.groups},           {"reduction", c.reduction},       {"stage_guidance", c.stage_guidance},
          {"eta1", c.eta1},               {"eta2", c.eta2},                 {"eta3", c.eta3},
          {"eta3_warmup", c.eta3_warmup}, {"cascaded", c.cascaded},         {"loss", to_string(c.loss)}};
}

inline CascadeConfig cascade_config_from_json(const nlohmann::json& j) {
  CascadeConfig c;
  c.trunk_depth = j.at("trunk_depth").get<std::size_t>();
  c.refine_depth = j.at("refine_depth").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.groups = j.at("groups").get<std::size_t>();
  c.reduction = j.at("reduction").get<std::size_t>();
  c.stage_guidance = j.at("stage_guidance").get<std::vector<double>>();
  c.eta1 = j.at("eta1").get<double>();
  c.eta2 = j.at("eta2").get<double>();
  c.eta3 = j.at("eta3").get<double>();
  c.eta3_warmup = j.at("eta3_warmup").get<std::size_t>();
  c.cascaded = j.at("cascaded").get<bool>();
  c.loss = loss_kind_from_string(j.at("loss").get<std::string>());
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoint container: "FGLCKPT1", u64 header length, JSON header, then the
// float64 payload of every tensor listed in the header, in order.

inline constexpr char kCheckpointMagic[8] = {'F', 'G', 'L', 'C', 'K', 'P', 'T', '1'};
inline constexpr int kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  diff::Array value;
};

struct CheckpointData {
  nlohmann::json header;  // free-form metadata; "tensors" and "payload_checksum" are managed here
  std::vector<NamedTensor> tensors;
};

inline void write_checkpoint_file(const std::filesystem::path& path, CheckpointData data) {
  detail::ByteWriter payload;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& t : data.tensors) {
    table.push_back({{"name", t.name}, {"shape", t.value.shape()}});
    for (double v : t.value.values()) payload.f64(v);
  }
  data.header["format"] = "fgl-checkpoint";
  data.header["version"] = kCheckpointVersion;
  data.header["tensors"] = std::move(table);
  data.header["payload_checksum"] = detail::hex64(detail::fnv1a(payload.buffer()));
  const std::string header = data.header.dump();
  detail::ByteWriter file;
  file.bytes(kCheckpointMagic, 8);
  const std::uint64_t len = header.size();
  for (int i = 0; i < 8; ++i) file.u8(static_cast<std::uint8_t>(len >> (8 * i)));
  file.bytes(header.data(), header.size());
  file.bytes(payload.buffer().data(), payload.buffer().size());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::write_file(path, file.buffer());
}

inline CheckpointData read_checkpoint_file(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw DataError("not a checkpoint file: " + path.string());
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(bytes[8 + i]) << (8 * i);
  if (16 + len > bytes.size()) throw ChecksumError("checkpoint header truncated");
  CheckpointData data;
  try {
    data.header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (data.header.value("version", -1) != kCheckpointVersion) throw VersionError("unsupported checkpoint version");
  const std::vector<std::uint8_t> payload(bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len), bytes.end());
  if (detail::hex64(detail::fnv1a(payload)) != data.header.value("payload_checksum", std::string())) {
    throw ChecksumError("checkpoint payload checksum mismatch");
  }
  detail::ByteReader r(payload);
  try {
    for (const auto& t : data.header.at("tensors")) {
      diff::Array a(t.at("shape").get<diff::Shape>());
      for (auto& v : a.values()) v = r.f64();
      data.tensors.push_back({t.at("name").get<std::string>(), std::move(a)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint tensor table: ") + e.what());
  }
  if (!r.done()) throw ChecksumError("checkpoint payload has trailing bytes");
  return data;
}

// Model tensors: parameters then batch-norm running statistics.
inline void append_model_tensors(const CascadeModel& m, std::vector<NamedTensor>& out) {
  for (std::size_t p = 0; p < m.params.size(); ++p) out.push_back({m.params.name(p), m.params.value(p)});
  for (std::size_t k = 0; k < m.running.size(); ++k) {
    out.push_back({"bn" + std::to_string(k) + ".running_mean", diff::Array::row(m.running[k].mean)});
    out.push_back({"bn" + std::to_string(k) + ".running_var", diff::Array::row(m.running[k].var)});
  }
}

inline std::size_t model_tensor_count(const CascadeModel& m) { return m.params.size() + 2 * m.running.size(); }

// Rebuilds the model described by the header and loads its tensors. Returns
// the index of the first tensor after the model's.
inline std::size_t load_model_tensors(CascadeModel& m, const std::vector<NamedTensor>& tensors) {
  if (tensors.size() < model_tensor_count(m)) throw DataError("checkpoint: missing model tensors");
  std::size_t i = 0;
  for (std::size_t p = 0; p < m.params.size(); ++p, ++i) {
    if (tensors[i].name != m.params.name(p) || tensors[i].value.shape() != m.params.value(p).shape()) {
      throw DataError("checkpoint: tensor '" + tensors[i].name + "' does not match the model layout");
    }
    m.params.value(p) = tensors[i].value;
  }
  for (std::size_t k = 0; k < m.running.size(); ++k) {
    const auto& mean = tensors[i++].value;
    const auto& var = tensors[i++].value;
    if (mean.size() != m.config.channels || var.size() != m.config.channels) {
      throw DataError("checkpoint: batch-norm statistics do not match the model layout");
    }
    m.running[k].mean = mean.vector();
    m.running[k].var = var.vector();
  }
  return i;
}

}  // namespace fgl
