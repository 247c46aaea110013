#pragma once

// Lowe-ratio inlier prior: histogram densities per class, per-pair inlier
// ratio by least-squares mixture fit, and the resulting posterior.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fgl/error.hpp"

namespace fgl {

inline constexpr std::size_t kDefaultRatioBins = 50;
inline constexpr double kHistogramSmoothing = 1e-6;
inline constexpr std::size_t kMinSamplesPerClass = 100;
inline constexpr std::size_t kMinRatiosForAlpha = 32;
inline constexpr double kAlphaMin = 0.01, kAlphaMax = 0.99;

struct RatioDensityModel {
  std::vector<double> bin_edges;  // B+1 increasing values, first 0, last 1
  std::vector<double> f_in;
  std::vector<double> f_out;

  std::size_t bins() const { return f_in.size(); }

  // Bin k covers (edge_k, edge_{k+1}]; r = 0 falls into the first bin.
  std::size_t bin_of(double r) const {
    if (!(r >= 0.0 && r <= 1.0)) throw DataError("ratio outside (0, 1]: " + std::to_string(r));
    const auto it = std::lower_bound(bin_edges.begin() + 1, bin_edges.end(), r);
    return std::min<std::size_t>(static_cast<std::size_t>(it - bin_edges.begin()) - 1, bins() - 1);
  }
  double inlier_density(double r) const { return f_in[bin_of(r)]; }
  double outlier_density(double r) const { return f_out[bin_of(r)]; }

  void validate() const {
    const std::size_t b = f_in.size();
    if (b == 0 || f_out.size() != b || bin_edges.size() != b + 1) throw DataError("prior model: inconsistent sizes");
    for (std::size_t k = 0; k < b; ++k) {
      if (!(bin_edges[k + 1] > bin_edges[k])) throw DataError("prior model: bin edges must increase");
    }
    for (std::size_t k = 0; k < b; ++k) {
      if (!(f_in[k] >= 0.0) || !(f_out[k] >= 0.0)) throw DataError("prior model: negative density");
    }
  }
  friend bool operator==(const RatioDensityModel&, const RatioDensityModel&) = default;
};

inline std::vector<double> uniform_bin_edges(std::size_t bins) {
  std::vector<double> edges(bins + 1);
  for (std::size_t k = 0; k <= bins; ++k) edges[k] = static_cast<double>(k) / static_cast<double>(bins);
  return edges;
}

namespace detail {

inline std::vector<double> histogram_counts(std::span<const double> ratios, const RatioDensityModel& shape) {
  std::vector<double> counts(shape.bins(), 0.0);
  for (double r : ratios) counts[shape.bin_of(r)] += 1.0;
  return counts;
}

// Counts to a density over (0, 1]: sum_k density_k * width_k = 1.
inline std::vector<double> counts_to_density(std::vector<double> counts, const std::vector<double>& edges) {
  double total = 0.0;
  for (double c : counts) total += c;
  for (std::size_t k = 0; k < counts.size(); ++k) counts[k] /= total * (edges[k + 1] - edges[k]);
  return counts;
}

}  // namespace detail

inline RatioDensityModel fit_ratio_densities(std::span<const double> ratios, std::span<const std::uint8_t> labels,
                                             std::size_t bins = kDefaultRatioBins) {
  if (ratios.size() != labels.size()) throw UsageError("fit_ratio_densities: length mismatch");
  if (bins == 0) throw UsageError("fit_ratio_densities: need at least one bin");
  RatioDensityModel model;
  model.bin_edges = uniform_bin_edges(bins);
  model.f_in.assign(bins, 0.0);
  model.f_out.assign(bins, 0.0);
  std::vector<double> in(bins, kHistogramSmoothing), out(bins, kHistogramSmoothing);
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (!(ratios[i] > 0.0 && ratios[i] <= 1.0)) throw DataError("ratio outside (0, 1]: " + std::to_string(ratios[i]));
    const std::size_t k = model.bin_of(ratios[i]);
    if (labels[i]) {
      in[k] += 1.0;
      ++n_in;
    } else {
      out[k] += 1.0;
      ++n_out;
    }
  }
  if (n_in < kMinSamplesPerClass || n_out < kMinSamplesPerClass) {
    throw DataError("fit_ratio_densities: need at least " + std::to_string(kMinSamplesPerClass) +
                    " samples per class (got " + std::to_string(n_in) + " inlier, " + std::to_string(n_out) +
                    " outlier)");
  }
  model.f_in = detail::counts_to_density(std::move(in), model.bin_edges);
  model.f_out = detail::counts_to_density(std::move(out), model.bin_edges);
  return model;
}

// Sum over bins of (hist - mixture)^2 as a function of alpha.
inline double mixture_fit_objective(const std::vector<double>& hist, const RatioDensityModel& model, double alpha) {
  double s = 0.0;
  for (std::size_t k = 0; k < hist.size(); ++k) {
    const double d = hist[k] - (alpha * model.f_in[k] + (1.0 - alpha) * model.f_out[k]);
    s += d * d;
  }
  return s;
}

// Golden-section minimization of the mixture objective on [0, 1], clamped to
// [0.01, 0.99]. Fewer than 32 ratios carry too little shape information; the
// estimate falls back to 0.5.
inline double estimate_inlier_ratio(std::span<const double> ratios, const RatioDensityModel& model,
                                    double tolerance = 1e-4) {
  if (ratios.size() < kMinRatiosForAlpha) return 0.5;
  const auto hist = detail::counts_to_density(detail::histogram_counts(ratios, model), model.bin_edges);
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = 0.0, b = 1.0;
  double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  double fc = mixture_fit_objective(hist, model, c), fd = mixture_fit_objective(hist, model, d);
  while (b - a > tolerance) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = mixture_fit_objective(hist, model, c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = mixture_fit_objective(hist, model, d);
    }
  }
  return std::clamp(0.5 * (a + b), kAlphaMin, kAlphaMax);
}

inline double posterior_from_likelihoods(double f_in, double f_out, double alpha) {
  // f a / (f a + f (1 - a)) does not round back to a.
  if (f_in == f_out) return alpha;
  const double num = f_in * alpha;
  return num / std::max(num + f_out * (1.0 - alpha), 1e-12);
}

inline double posterior_inlier_probability(double r, double alpha, const RatioDensityModel& model) {
  const std::size_t k = model.bin_of(r);
  return posterior_from_likelihoods(model.f_in[k], model.f_out[k], alpha);
}

// Per-correspondence prior for one pair: estimate alpha from the pair's own
// ratios, then apply the posterior to each.
inline std::vector<double> pair_prior_probabilities(std::span<const double> ratios, const RatioDensityModel& model) {
  const double alpha = estimate_inlier_ratio(ratios, model);
  std::vector<double> p(ratios.size());
  for (std::size_t i = 0; i < ratios.size(); ++i) p[i] = posterior_inlier_probability(ratios[i], alpha, model);
  return p;
}

inline constexpr char kPriorFormat[] = "epf-prior";
inline constexpr int kPriorVersion = 1;

inline nlohmann::json to_json(const RatioDensityModel& m) {
  return {{"format", kPriorFormat}, {"version", kPriorVersion}, {"bin_edges", m.bin_edges},
          {"f_in", m.f_in},         {"f_out", m.f_out}};
}

inline RatioDensityModel prior_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != kPriorFormat) throw DataError("not a prior model file");
  if (!j.contains("version") || j["version"] != kPriorVersion) throw VersionError("unsupported prior model version");
  RatioDensityModel m;
  try {
    m.bin_edges = j.at("bin_edges").get<std::vector<double>>();
    m.f_in = j.at("f_in").get<std::vector<double>>();
    m.f_out = j.at("f_out").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed prior model: ") + e.what());
  }
  m.validate();
  return m;
}

inline void write_prior(const std::filesystem::path& path, const RatioDensityModel& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json(m).dump(2) << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

inline RatioDensityModel read_prior(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open prior model " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed prior model: ") + e.what());
  }
  return prior_from_json(j);
}

}  // namespace fgl
