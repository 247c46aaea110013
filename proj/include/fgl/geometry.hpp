#pragma once

// Essential-matrix algebra for calibrated two-view geometry: construction from
// pose, epipolar residuals, the weighted eight-point solve (plain and
// differentiable), pose recovery with a cheirality vote, angular errors and a
// RANSAC baseline.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include "fgl/diff.hpp"
#include "fgl/error.hpp"

namespace fgl {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kRadToDeg = 180.0 / kPi;

struct CameraIntrinsics {
  double fx = 500.0;
  double fy = 500.0;
  double cx = 320.0;
  double cy = 240.0;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0) || !std::isfinite(cx) || !std::isfinite(cy)) {
      throw UsageError("camera intrinsics require positive focal lengths");
    }
  }
  friend bool operator==(const CameraIntrinsics&, const CameraIntrinsics&) = default;
};

struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  friend bool operator==(const Pose& a, const Pose& b) {
    return a.rotation == b.rotation && a.translation == b.translation;
  }
};

// Frobenius-normalized 3x3 essential matrix.
struct EssentialMatrix {
  Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
  friend bool operator==(const EssentialMatrix& a, const EssentialMatrix& b) { return a.m == b.m; }
};

// Intrinsics-normalized coordinates of one putative match.
struct Correspondence {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  friend bool operator==(const Correspondence&, const Correspondence&) = default;
};

struct PixelMatch {
  double u1 = 0, v1 = 0, u2 = 0, v2 = 0;
};

inline Correspondence normalize_coordinates(const PixelMatch& px, const CameraIntrinsics& k) {
  k.validate();
  return {(px.u1 - k.cx) / k.fx, (px.v1 - k.cy) / k.fy, (px.u2 - k.cx) / k.fx, (px.v2 - k.cy) / k.fy};
}

inline std::vector<Correspondence> normalize_coordinates(std::span<const PixelMatch> px, const CameraIntrinsics& k) {
  k.validate();
  std::vector<Correspondence> out;
  out.reserve(px.size());
  for (const auto& p : px) out.push_back(normalize_coordinates(p, k));
  return out;
}

inline Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

inline Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double angle_rad) {
  const Eigen::Vector3d a = axis.normalized();
  const Eigen::Matrix3d k = skew(a);
  return Eigen::Matrix3d::Identity() + std::sin(angle_rad) * k + (1.0 - std::cos(angle_rad)) * k * k;
}

inline EssentialMatrix essential_from_pose(const Pose& pose) {
  const double norm_t = pose.translation.norm();
  if (!(norm_t > 0.0)) throw UsageError("essential_from_pose: zero baseline");
  Eigen::Matrix3d e = skew(pose.translation) * pose.rotation;
  return {e / e.norm()};
}

// Symmetric epipolar distance (squared, normalized units). Returns +inf when
// both epipolar line gradients vanish.
inline double epipolar_residual(const Correspondence& c, const EssentialMatrix& e) {
  const Eigen::Vector3d p1(c.x1, c.y1, 1.0), p2(c.x2, c.y2, 1.0);
  const Eigen::Vector3d l2 = e.m * p1;
  const Eigen::Vector3d l1 = e.m.transpose() * p2;
  const double algebraic = p2.dot(l2);
  const double d2 = l2.x() * l2.x() + l2.y() * l2.y();
  const double d1 = l1.x() * l1.x() + l1.y() * l1.y();
  if (d1 == 0.0 && d2 == 0.0) return std::numeric_limits<double>::infinity();
  const double inv2 = d2 > 0.0 ? 1.0 / d2 : 0.0;
  const double inv1 = d1 > 0.0 ? 1.0 / d1 : 0.0;
  return algebraic * algebraic * (inv1 + inv2);
}

// Row of the eight-point design matrix: coefficients of E (row-major) in x2^T E x1.
inline std::array<double, 9> epipolar_monomials(const Correspondence& c) {
  return {c.x2 * c.x1, c.x2 * c.y1, c.x2, c.y2 * c.x1, c.y2 * c.y1, c.y2, c.x1, c.y1, 1.0};
}

// Closest matrix with singular values (1, 1, 0), then unit Frobenius norm.
inline EssentialMatrix project_to_essential(const Eigen::Matrix3d& m) {
  if (!m.allFinite() || m.norm() == 0.0) throw NumericError("cannot project degenerate matrix to essential manifold");
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
  Eigen::Matrix3d e = u.col(0) * v.col(0).transpose() + u.col(1) * v.col(1).transpose();
  return {e / std::sqrt(2.0)};
}

namespace detail {

// Eigenpairs of the weighted normal matrix, values ascending; vectors[i][k]
// is component i of eigenvector k.
struct NormalEigen {
  std::array<double, 9> values{};
  std::array<std::array<double, 9>, 9> vectors{};
};

struct EightPointSolve {
  std::vector<std::array<double, 9>> rows;
  NormalEigen eigen;
  std::array<double, 9> nullvec{};
  EssentialMatrix projected;
  Eigen::Matrix3d u, v;
  Eigen::Vector3d singular;
};

inline EightPointSolve solve_eight_point(std::span<const Correspondence> corrs, std::span<const double> weights) {
  if (corrs.size() != weights.size()) throw UsageError("weighted_eight_point: weight count mismatch");
  std::size_t active = 0;
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0.0) throw UsageError("weighted_eight_point: weights must be finite and nonnegative");
    if (w > 0.0) ++active;
  }
  if (active < 8) {
    throw RankDeficientError("weighted_eight_point: " + std::to_string(active) + " weighted correspondences, need 8");
  }
  EightPointSolve s;
  s.rows.reserve(corrs.size());
  // SVD of the weighted design matrix rather than an eigen solve of its
  // normal matrix, which would square the condition number.
  Eigen::Matrix<double, Eigen::Dynamic, 9> design(static_cast<Eigen::Index>(active), 9);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    s.rows.push_back(epipolar_monomials(corrs[i]));
    if (weights[i] == 0.0) continue;
    const double sw = std::sqrt(weights[i]);
    for (int c = 0; c < 9; ++c) design(row, c) = sw * s.rows.back()[c];
    ++row;
  }
  if (!design.allFinite()) throw NumericError("weighted_eight_point: non-finite design matrix");
  Eigen::JacobiSVD<Eigen::Matrix<double, Eigen::Dynamic, 9>, Eigen::ColPivHouseholderQRPreconditioner> dsvd(
      design, Eigen::ComputeFullV);
  // Eigenpairs of the normal matrix, ascending; singular values come descending.
  const Eigen::Index rank_cols = std::min<Eigen::Index>(design.rows(), 9);
  for (int k = 0; k < 9; ++k) {
    const Eigen::Index src = 8 - k;
    const double sv = src < rank_cols ? dsvd.singularValues()(src) : 0.0;
    s.eigen.values[k] = sv * sv;
    for (int i = 0; i < 9; ++i) s.eigen.vectors[i][k] = dsvd.matrixV()(i, src);
  }
  const double scale = std::max(std::abs(s.eigen.values[8]), std::numeric_limits<double>::min());
  if (s.eigen.values[1] - s.eigen.values[0] <= 1e-14 * scale) {
    throw RankDeficientError("weighted_eight_point: null space has dimension > 1");
  }
  // Sign convention: largest-magnitude component positive.
  std::size_t big = 0;
  for (std::size_t i = 1; i < 9; ++i) {
    if (std::abs(s.eigen.vectors[i][0]) > std::abs(s.eigen.vectors[big][0])) big = i;
  }
  const double sign = s.eigen.vectors[big][0] < 0.0 ? -1.0 : 1.0;
  for (std::size_t i = 0; i < 9; ++i) s.nullvec[i] = sign * s.eigen.vectors[i][0];

  Eigen::Matrix3d raw;
  raw << s.nullvec[0], s.nullvec[1], s.nullvec[2], s.nullvec[3], s.nullvec[4], s.nullvec[5], s.nullvec[6],
      s.nullvec[7], s.nullvec[8];
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(raw, Eigen::ComputeFullU | Eigen::ComputeFullV);
  s.u = svd.matrixU();
  s.v = svd.matrixV();
  s.singular = svd.singularValues();
  Eigen::Matrix3d e = s.u.col(0) * s.v.col(0).transpose() + s.u.col(1) * s.v.col(1).transpose();
  s.projected = {e / std::sqrt(2.0)};
  return s;
}

// Vector-Jacobian product of the eight-point map weights -> projected E.
inline std::vector<double> eight_point_vjp(const EightPointSolve& s, const Eigen::Matrix3d& grad_e) {
  // Through the (1,1,0) projection and the 1/sqrt(2) normalization.
  const Eigen::Matrix3d h = s.u.transpose() * grad_e * s.v / std::sqrt(2.0);
  const double s1 = s.singular(0), s2 = s.singular(1), s3 = s.singular(2);
  Eigen::Matrix3d q = Eigen::Matrix3d::Zero();
  const double d12 = s1 + s2;
  q(0, 1) += (h(0, 1) - h(1, 0)) / d12;
  q(1, 0) += (h(1, 0) - h(0, 1)) / d12;
  const double d13 = s1 * s1 - s3 * s3;
  q(0, 2) += (h(0, 2) * s1 + h(2, 0) * s3) / d13;
  q(2, 0) += (h(0, 2) * s3 + h(2, 0) * s1) / d13;
  const double d23 = s2 * s2 - s3 * s3;
  q(1, 2) += (h(1, 2) * s2 + h(2, 1) * s3) / d23;
  q(2, 1) += (h(1, 2) * s3 + h(2, 1) * s2) / d23;
  const Eigen::Matrix3d g_raw = s.u * q * s.v.transpose();

  // Through the smallest eigenvector of the weighted normal matrix.
  std::array<double, 9> g{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) g[r * 3 + c] = g_raw(r, c);
  }
  std::array<double, 9> dir{};
  for (int k = 1; k < 9; ++k) {
    double proj = 0.0;
    for (int i = 0; i < 9; ++i) proj += s.eigen.vectors[i][k] * g[i];
    const double coeff = proj / (s.eigen.values[0] - s.eigen.values[k]);
    for (int i = 0; i < 9; ++i) dir[i] += coeff * s.eigen.vectors[i][k];
  }
  std::vector<double> out(s.rows.size());
  for (std::size_t n = 0; n < s.rows.size(); ++n) {
    double ae = 0.0, aq = 0.0;
    for (int i = 0; i < 9; ++i) {
      ae += s.rows[n][i] * s.nullvec[i];
      aq += s.rows[n][i] * dir[i];
    }
    out[n] = ae * aq;
  }
  return out;
}

}  // namespace detail

inline EssentialMatrix weighted_eight_point(std::span<const Correspondence> corrs, std::span<const double> weights) {
  return detail::solve_eight_point(corrs, weights).projected;
}

// Differentiable eight-point: weights is an Nx1 node, the result a 1x9
// row-major node holding the projected, normalized essential matrix.
inline diff::Var weighted_eight_point(const diff::Var& weights, std::vector<Correspondence> corrs) {
  if (weights.shape() != diff::Shape{corrs.size(), 1}) throw ShapeError("weighted_eight_point: weights must be Nx1");
  auto shared = std::make_shared<std::vector<Correspondence>>(std::move(corrs));
  auto op = std::make_shared<diff::CustomOp>();
  op->name = "weighted_eight_point";
  op->forward = [shared](const std::vector<const diff::Array*>& in) {
    const auto s = detail::solve_eight_point(*shared, in[0]->values());
    diff::Array out({1, 9});
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) out[r * 3 + c] = s.projected.m(r, c);
    }
    return out;
  };
  op->backward = [shared](const std::vector<const diff::Array*>& in, const diff::Array&, const diff::Array& grad) {
    const auto s = detail::solve_eight_point(*shared, in[0]->values());
    Eigen::Matrix3d g;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) g(r, c) = grad[r * 3 + c];
    }
    return std::vector<diff::Array>{diff::Array::column(detail::eight_point_vjp(s, g))};
  };
  return diff::custom(op, {weights});
}

inline EssentialMatrix essential_from_row(const diff::Array& row) {
  if (row.size() != 9) throw ShapeError("essential matrix row must hold 9 values");
  EssentialMatrix e;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) e.m(r, c) = row[r * 3 + c];
  }
  return e;
}

inline double essential_regression_loss(const EssentialMatrix& estimate, const EssentialMatrix& truth) {
  return std::min((estimate.m - truth.m).squaredNorm(), (estimate.m + truth.m).squaredNorm());
}

// min(|e - E|^2, |e + E|^2) with the sign chosen on the forward value.
inline diff::Var essential_regression_loss(const diff::Var& estimate_row, const EssentialMatrix& truth) {
  diff::Array gt({1, 9});
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) gt[r * 3 + c] = truth.m(r, c);
  }
  const double minus = essential_regression_loss(essential_from_row(estimate_row.value()), truth);
  const double direct = (essential_from_row(estimate_row.value()).m - truth.m).squaredNorm();
  if (direct > minus) {
    for (double& v : gt.values()) v = -v;
  }
  auto& g = estimate_row.graph();
  return diff::reduce_sum(diff::power(estimate_row - g.constant(std::move(gt)), 2.0));
}

// Four (R, t) candidates in canonical order (R1,t), (R1,-t), (R2,t), (R2,-t).
inline std::array<Pose, 4> decompose_essential(const EssentialMatrix& e) {
  if (!e.m.allFinite() || e.m.norm() == 0.0) throw NumericError("decompose_essential: degenerate matrix");
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(e.m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
  if (svd.singularValues()(1) <= 1e-12 * svd.singularValues()(0)) {
    throw NumericError("decompose_essential: rank below 2");
  }
  if (u.determinant() < 0) u = -u;
  if (v.determinant() < 0) v = -v;
  Eigen::Matrix3d w;
  w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Eigen::Matrix3d r1 = u * w * v.transpose();
  const Eigen::Matrix3d r2 = u * w.transpose() * v.transpose();
  const Eigen::Vector3d t = u.col(2);
  return {Pose{r1, t}, Pose{r1, -t}, Pose{r2, t}, Pose{r2, -t}};
}

// Linear (DLT) triangulation with P1 = [I|0], P2 = [R|t]; returns whether the
// point lies in front of both cameras.
inline bool positive_depth(const Correspondence& c, const Pose& pose) {
  Eigen::Matrix<double, 3, 4> p1 = Eigen::Matrix<double, 3, 4>::Zero();
  p1.leftCols<3>() = Eigen::Matrix3d::Identity();
  Eigen::Matrix<double, 3, 4> p2;
  p2.leftCols<3>() = pose.rotation;
  p2.col(3) = pose.translation;
  Eigen::Matrix4d a;
  a.row(0) = c.x1 * p1.row(2) - p1.row(0);
  a.row(1) = c.y1 * p1.row(2) - p1.row(1);
  a.row(2) = c.x2 * p2.row(2) - p2.row(0);
  a.row(3) = c.y2 * p2.row(2) - p2.row(1);
  Eigen::JacobiSVD<Eigen::Matrix4d> svd(a, Eigen::ComputeFullV);
  const Eigen::Vector4d x = svd.matrixV().col(3);
  if (x(3) == 0.0) return false;
  const Eigen::Vector3d point = x.head<3>() / x(3);
  const double depth2 = (pose.rotation * point + pose.translation).z();
  return point.z() > 0.0 && depth2 > 0.0;
}

inline Pose recover_pose(const EssentialMatrix& e, std::span<const Correspondence> inliers) {
  if (inliers.empty()) throw UsageError("recover_pose: need at least one correspondence");
  const auto candidates = decompose_essential(e);
  std::size_t best = 0;
  int best_votes = -1;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    int votes = 0;
    for (const auto& c : inliers) votes += positive_depth(c, candidates[k]) ? 1 : 0;
    if (votes > best_votes) {
      best_votes = votes;
      best = k;
    }
  }
  return candidates[best];
}

struct AngularErrors {
  double rotation_deg = 0.0;
  double translation_deg = 0.0;
  double max() const { return std::max(rotation_deg, translation_deg); }
};

// Geodesic angle of R_a^T R_b in degrees.
inline double rotation_error_deg(const Eigen::Matrix3d& estimate, const Eigen::Matrix3d& truth) {
  const Eigen::Matrix3d rel = truth.transpose() * estimate;
  const double cos_angle = (rel.trace() - 1.0) / 2.0;
  const Eigen::Vector3d vee(rel(2, 1) - rel(1, 2), rel(0, 2) - rel(2, 0), rel(1, 0) - rel(0, 1));
  return std::atan2(vee.norm() / 2.0, cos_angle) * kRadToDeg;
}

// Sign-invariant angle between translation directions in degrees.
inline double translation_error_deg(const Eigen::Vector3d& estimate, const Eigen::Vector3d& truth) {
  const double cross = estimate.cross(truth).norm();
  const double dot = std::abs(estimate.dot(truth));
  return std::atan2(cross, dot) * kRadToDeg;
}

inline AngularErrors angular_errors(const Pose& estimate, const Pose& truth) {
  return {rotation_error_deg(estimate.rotation, truth.rotation),
          translation_error_deg(estimate.translation, truth.translation)};
}

inline AngularErrors recover_pose_and_angular_errors(const EssentialMatrix& estimate, const Pose& truth,
                                                      std::span<const Correspondence> inliers) {
  return angular_errors(recover_pose(estimate, inliers), truth);
}

struct RansacResult {
  EssentialMatrix essential;
  std::vector<std::uint8_t> inliers;
  std::size_t inlier_count = 0;
};

// Eight-point hypothesize-and-verify. The best hypothesis (by inlier count,
// earliest on ties) is re-fit on its consensus set.
inline RansacResult ransac_essential(std::span<const Correspondence> corrs, int iterations, double threshold,
                                     std::uint64_t seed) {
  if (iterations < 1) throw UsageError("ransac_essential: iterations must be >= 1");
  if (corrs.size() < 8) throw UsageError("ransac_essential: need at least 8 correspondences");
  if (!(threshold > 0.0)) throw UsageError("ransac_essential: threshold must be positive");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> index(corrs.size());
  std::vector<Correspondence> sample(8);
  const std::vector<double> ones(8, 1.0);
  std::vector<std::uint8_t> mask(corrs.size()), best_mask;
  std::size_t best_count = 0;
  EssentialMatrix best_model;
  bool found = false;

  for (int it = 0; it < iterations; ++it) {
    std::iota(index.begin(), index.end(), std::size_t{0});
    for (std::size_t k = 0; k < 8; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, index.size() - 1);
      std::swap(index[k], index[pick(rng)]);
      sample[k] = corrs[index[k]];
    }
    EssentialMatrix model;
    try {
      model = weighted_eight_point(sample, ones);
    } catch (const NumericError&) {
      continue;
    }
    std::size_t count = 0;
    for (std::size_t i = 0; i < corrs.size(); ++i) {
      mask[i] = epipolar_residual(corrs[i], model) < threshold ? 1 : 0;
      count += mask[i];
    }
    if (!found || count > best_count) {
      found = true;
      best_count = count;
      best_mask = mask;
      best_model = model;
    }
  }
  if (!found) throw NumericError("ransac_essential: every sample was degenerate");

  RansacResult result;
  result.inliers = best_mask;
  result.inlier_count = best_count;
  std::vector<double> w(corrs.size());
  for (std::size_t i = 0; i < corrs.size(); ++i) w[i] = best_mask[i];
  try {
    result.essential = weighted_eight_point(corrs, w);
  } catch (const NumericError&) {
    result.essential = best_model;
  }
  return result;
}

}  // namespace fgl
