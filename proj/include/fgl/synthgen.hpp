#pragma once

// Synthetic calibrated two-view scenes with labeled outliers and simulated
// Lowe ratios, plus the on-disk dataset container (JSON manifest and one
// little-endian binary record per pair).

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fgl/error.hpp"
#include "fgl/geometry.hpp"
#include "fgl/random.hpp"

namespace fgl {

struct SceneConfig {
  std::size_t num_correspondences = 500;
  // Each pair draws its outlier ratio uniformly from [min, max].
  double outlier_ratio_min = 0.5;
  double outlier_ratio_max = 0.5;
  double noise_std_px = 1.0;
  double rotation_min_deg = 2.0;
  double rotation_max_deg = 20.0;
  double baseline_min = 0.3;
  double baseline_max = 1.0;
  double depth_min = 4.0;
  double depth_max = 10.0;
  double image_width = 640.0;
  double image_height = 480.0;
  CameraIntrinsics intrinsics;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_correspondences < 16) throw UsageError("scene config: need at least 16 correspondences");
    if (!(outlier_ratio_min >= 0.0) || !(outlier_ratio_max <= 0.95) || outlier_ratio_min > outlier_ratio_max) {
      throw UsageError("scene config: outlier ratio must lie in [0, 0.95] with min <= max");
    }
    if (!(noise_std_px >= 0.0)) throw UsageError("scene config: noise must be nonnegative");
    if (!(rotation_min_deg >= 0.0) || rotation_min_deg > rotation_max_deg) {
      throw UsageError("scene config: bad rotation range");
    }
    if (!(baseline_min > 0.0) || baseline_min > baseline_max) throw UsageError("scene config: bad baseline range");
    if (!(depth_min > 0.0) || depth_min > depth_max) throw UsageError("scene config: bad depth range");
    if (!(image_width > 0.0) || !(image_height > 0.0)) throw UsageError("scene config: bad image size");
    intrinsics.validate();
  }
  friend bool operator==(const SceneConfig&, const SceneConfig&) = default;
};

struct ScenePair {
  std::vector<Correspondence> correspondences;
  std::vector<std::uint8_t> labels;  // 1 = inlier
  std::vector<double> lowe_ratios;
  Pose gt_pose;
  EssentialMatrix gt_essential;
  CameraIntrinsics intrinsics;

  std::size_t size() const { return correspondences.size(); }
  std::size_t inlier_count() const { return std::accumulate(labels.begin(), labels.end(), std::size_t{0}); }
  friend bool operator==(const ScenePair&, const ScenePair&) = default;
};

// Beta parameters of the simulated Lowe-ratio densities.
inline constexpr double kInlierRatioBetaA = 2.0, kInlierRatioBetaB = 5.0;
inline constexpr double kOutlierRatioBetaA = 5.0, kOutlierRatioBetaB = 2.0;

inline ScenePair generate_scene_pair(const SceneConfig& config, std::uint64_t pair_index = 0) {
  config.validate();
  auto rng = derived_rng(config.seed, pair_index, 0x5ce9e);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto& k = config.intrinsics;
  const std::size_t n = config.num_correspondences;

  auto random_direction = [&] {
    Eigen::Vector3d d;
    do {
      d = Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng));
    } while (d.norm() < 1e-9);
    return d.normalized();
  };
  auto in_image = [&](double u, double v) {
    return u >= 0.0 && u < config.image_width && v >= 0.0 && v < config.image_height;
  };

  ScenePair pair;
  pair.intrinsics = k;
  std::vector<PixelMatch> pixels;
  constexpr int kPoseAttempts = 64;
  for (int attempt = 0;; ++attempt) {
    if (attempt == kPoseAttempts) throw DataError("generate_scene_pair: visibility failure after bounded retries");
    const double angle =
        (config.rotation_min_deg + unit(rng) * (config.rotation_max_deg - config.rotation_min_deg)) / kRadToDeg;
    pair.gt_pose.rotation = axis_angle(random_direction(), angle);
    const double baseline = config.baseline_min + unit(rng) * (config.baseline_max - config.baseline_min);
    pair.gt_pose.translation = baseline * random_direction();

    pixels.clear();
    const std::size_t budget = 20 * n;
    for (std::size_t tries = 0; tries < budget && pixels.size() < n; ++tries) {
      const double u1 = unit(rng) * config.image_width;
      const double v1 = unit(rng) * config.image_height;
      const double depth = config.depth_min + unit(rng) * (config.depth_max - config.depth_min);
      const Eigen::Vector3d x1(depth * (u1 - k.cx) / k.fx, depth * (v1 - k.cy) / k.fy, depth);
      const Eigen::Vector3d x2 = pair.gt_pose.rotation * x1 + pair.gt_pose.translation;
      if (x2.z() <= 1e-3) continue;
      const double u2 = k.fx * x2.x() / x2.z() + k.cx;
      const double v2 = k.fy * x2.y() / x2.z() + k.cy;
      if (!in_image(u2, v2)) continue;
      pixels.push_back({u1, v1, u2, v2});
    }
    if (pixels.size() == n) break;
  }
  pair.gt_essential = essential_from_pose(pair.gt_pose);

  const double ratio = config.outlier_ratio_min + unit(rng) * (config.outlier_ratio_max - config.outlier_ratio_min);
  const auto outliers = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  pair.labels.assign(n, 1);
  for (std::size_t i = 0; i < outliers; ++i) pair.labels[order[i]] = 0;

  pair.correspondences.resize(n);
  pair.lowe_ratios.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    PixelMatch px = pixels[i];
    px.u1 += config.noise_std_px * gauss(rng);
    px.v1 += config.noise_std_px * gauss(rng);
    if (pair.labels[i]) {
      px.u2 += config.noise_std_px * gauss(rng);
      px.v2 += config.noise_std_px * gauss(rng);
      pair.lowe_ratios[i] = sample_beta(rng, kInlierRatioBetaA, kInlierRatioBetaB);
    } else {
      px.u2 = unit(rng) * config.image_width;
      px.v2 = unit(rng) * config.image_height;
      pair.lowe_ratios[i] = sample_beta(rng, kOutlierRatioBetaA, kOutlierRatioBetaB);
    }
    pair.correspondences[i] = normalize_coordinates(px, k);
  }
  return pair;
}

inline std::vector<ScenePair> generate_dataset(const SceneConfig& config, std::size_t pairs) {
  std::vector<ScenePair> out;
  out.reserve(pairs);
  for (std::size_t i = 0; i < pairs; ++i) out.push_back(generate_scene_pair(config, i));
  return out;
}

// ---------------------------------------------------------------------------
// Dataset container

inline constexpr int kDatasetVersion = 1;
inline constexpr char kDatasetFormat[] = "epf-dataset";
inline constexpr char kRecordMagic[4] = {'E', 'P', 'F', '1'};

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw ChecksumError("record truncated");
  }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    need(1);
    return buf_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_++]) << (8 * i);
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_++]) << (8 * i);
    return std::bit_cast<double>(v);
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_pair(const ScenePair& p) {
  detail::ByteWriter w;
  w.bytes(kRecordMagic, 4);
  w.u32(static_cast<std::uint32_t>(p.size()));
  for (const auto& c : p.correspondences) {
    w.f64(c.x1);
    w.f64(c.y1);
    w.f64(c.x2);
    w.f64(c.y2);
  }
  for (auto l : p.labels) w.u8(l);
  for (double r : p.lowe_ratios) w.f64(r);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) w.f64(p.gt_essential.m(r, c));
  }
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) w.f64(p.gt_pose.rotation(r, c));
  }
  for (int i = 0; i < 3; ++i) w.f64(p.gt_pose.translation(i));
  w.f64(p.intrinsics.fx);
  w.f64(p.intrinsics.fy);
  w.f64(p.intrinsics.cx);
  w.f64(p.intrinsics.cy);
  return w.buffer();
}

inline ScenePair decode_pair(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kRecordMagic, 4) != 0) throw DataError("bad record magic");
  const std::uint32_t n = r.u32();
  ScenePair p;
  p.correspondences.resize(n);
  for (auto& c : p.correspondences) {
    c.x1 = r.f64();
    c.y1 = r.f64();
    c.x2 = r.f64();
    c.y2 = r.f64();
  }
  p.labels.resize(n);
  for (auto& l : p.labels) l = r.u8();
  p.lowe_ratios.resize(n);
  for (auto& v : p.lowe_ratios) v = r.f64();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) p.gt_essential.m(i, j) = r.f64();
  }
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) p.gt_pose.rotation(i, j) = r.f64();
  }
  for (int i = 0; i < 3; ++i) p.gt_pose.translation(i) = r.f64();
  p.intrinsics.fx = r.f64();
  p.intrinsics.fy = r.f64();
  p.intrinsics.cx = r.f64();
  p.intrinsics.cy = r.f64();
  if (!r.done()) throw DataError("trailing bytes in record");
  return p;
}

inline nlohmann::json to_json(const SceneConfig& c) {
  return {{"num_correspondences", c.num_correspondences},
          {"outlier_ratio_min", c.outlier_ratio_min},
          {"outlier_ratio_max", c.outlier_ratio_max},
          {"noise_std_px", c.noise_std_px},
          {"rotation_range_deg", {c.rotation_min_deg, c.rotation_max_deg}},
          {"baseline_range", {c.baseline_min, c.baseline_max}},
          {"depth_range", {c.depth_min, c.depth_max}},
          {"image_size", {c.image_width, c.image_height}},
          {"intrinsics", {c.intrinsics.fx, c.intrinsics.fy, c.intrinsics.cx, c.intrinsics.cy}},
          {"seed", c.seed}};
}

inline SceneConfig scene_config_from_json(const nlohmann::json& j) {
  SceneConfig c;
  c.num_correspondences = j.at("num_correspondences").get<std::size_t>();
  c.outlier_ratio_min = j.at("outlier_ratio_min").get<double>();
  c.outlier_ratio_max = j.at("outlier_ratio_max").get<double>();
  c.noise_std_px = j.at("noise_std_px").get<double>();
  c.rotation_min_deg = j.at("rotation_range_deg").at(0).get<double>();
  c.rotation_max_deg = j.at("rotation_range_deg").at(1).get<double>();
  c.baseline_min = j.at("baseline_range").at(0).get<double>();
  c.baseline_max = j.at("baseline_range").at(1).get<double>();
  c.depth_min = j.at("depth_range").at(0).get<double>();
  c.depth_max = j.at("depth_range").at(1).get<double>();
  c.image_width = j.at("image_size").at(0).get<double>();
  c.image_height = j.at("image_size").at(1).get<double>();
  const auto& k = j.at("intrinsics");
  c.intrinsics = {k.at(0).get<double>(), k.at(1).get<double>(), k.at(2).get<double>(), k.at(3).get<double>()};
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline std::filesystem::path manifest_path(const std::filesystem::path& dir) { return dir / "manifest.json"; }

// Writes <dir>/manifest.json and <dir>/pair_NNNNN.epf. Returns the manifest.
inline nlohmann::json write_dataset(const std::filesystem::path& dir, const std::vector<ScenePair>& pairs,
                                    const SceneConfig& config) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json records = nlohmann::json::array();
  std::size_t total = 0, inliers = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::ostringstream name;
    name << "pair_" << std::setw(5) << std::setfill('0') << i << ".epf";
    const auto bytes = encode_pair(pairs[i]);
    detail::write_file(dir / name.str(), bytes);
    records.push_back({{"file", name.str()},
                       {"num_correspondences", pairs[i].size()},
                       {"num_inliers", pairs[i].inlier_count()},
                       {"bytes", bytes.size()},
                       {"checksum", detail::hex64(detail::fnv1a(bytes))}});
    total += pairs[i].size();
    inliers += pairs[i].inlier_count();
  }
  nlohmann::json manifest = {{"format", kDatasetFormat},
                             {"version", kDatasetVersion},
                             {"config", to_json(config)},
                             {"seed", config.seed},
                             {"counts", {{"pairs", pairs.size()}, {"correspondences", total}, {"inliers", inliers}}},
                             {"records", records}};
  std::ofstream out(manifest_path(dir));
  if (!out) throw DataError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
  return manifest;
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(manifest_path(dir));
  if (!in) throw DataError("missing dataset manifest in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  if (m.value("format", std::string()) != kDatasetFormat) throw DataError("not an epf dataset manifest");
  if (!m.contains("version") || !m["version"].is_number_integer() || m["version"].get<int>() != kDatasetVersion) {
    throw VersionError("unsupported dataset version " + (m.contains("version") ? m["version"].dump() : "<none>"));
  }
  return m;
}

inline std::vector<ScenePair> read_dataset(const std::filesystem::path& dir) {
  const auto manifest = read_manifest(dir);
  std::vector<ScenePair> pairs;
  try {
    for (const auto& rec : manifest.at("records")) {
      const auto bytes = detail::read_file(dir / rec.at("file").get<std::string>());
      if (bytes.size() != rec.at("bytes").get<std::size_t>() ||
          detail::hex64(detail::fnv1a(bytes)) != rec.at("checksum").get<std::string>()) {
        throw ChecksumError("checksum mismatch for " + rec.at("file").get<std::string>());
      }
      pairs.push_back(decode_pair(bytes));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  return pairs;
}

inline SceneConfig read_dataset_config(const std::filesystem::path& dir) {
  try {
    return scene_config_from_json(read_manifest(dir).at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed manifest config: ") + e.what());
  }
}

}  // namespace fgl
