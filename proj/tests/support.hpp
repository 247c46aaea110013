#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <Eigen/Dense>

#include "fgl/geometry.hpp"

namespace fgl::testing {

// Random rotation of 2..30 degrees and a unit translation with a forward
// component, so points in front of camera 1 mostly stay visible.
inline Pose random_pose(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> ang(2.0, 30.0);
  Eigen::Vector3d axis(n(rng), n(rng), n(rng));
  Pose p;
  p.rotation = axis_angle(axis.normalized(), ang(rng) * kPi / 180.0);
  p.translation = Eigen::Vector3d(n(rng), n(rng), 0.3 * n(rng)).normalized();
  return p;
}

struct NoiselessScene {
  Pose pose;
  std::vector<Correspondence> inliers;
};

// Projections of random 3D points in front of both cameras; X2 = R X1 + t.
inline NoiselessScene noiseless_scene(std::mt19937_64& rng, std::size_t n) {
  NoiselessScene s;
  s.pose = random_pose(rng);
  std::uniform_real_distribution<double> xy(-1.5, 1.5), depth(4.0, 10.0);
  while (s.inliers.size() < n) {
    const Eigen::Vector3d x1(xy(rng), xy(rng), depth(rng));
    const Eigen::Vector3d x2 = s.pose.rotation * x1 + s.pose.translation;
    if (x2.z() <= 0.5) continue;
    s.inliers.push_back({x1.x() / x1.z(), x1.y() / x1.z(), x2.x() / x2.z(), x2.y() / x2.z()});
  }
  return s;
}

inline Correspondence random_outlier(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  return {u(rng), u(rng), u(rng), u(rng)};
}

inline double sign_free_distance(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  return std::min((a - b).norm(), (a + b).norm());
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("fgl_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace fgl::testing
