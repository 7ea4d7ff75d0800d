#pragma once

#include "xspec/featuregrid.hpp"
#include "xspec/geometry.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <random>

namespace xspec::testgen {

// Seeded value generators for property tests.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  double normal(double sigma = 1.0) { return std::normal_distribution<double>(0.0, sigma)(rng_); }
  bool coin() { return std::bernoulli_distribution(0.5)(rng_); }

  Eigen::Vector2d point(int width, int height) {
    return {uniform(0.0, width - 1.0), uniform(0.0, height - 1.0)};
  }

  Eigen::Matrix2Xd points(int n, int width, int height) {
    Eigen::Matrix2Xd p(2, n);
    for (int i = 0; i < n; ++i) p.col(i) = point(width, height);
    return p;
  }

  Eigen::VectorXd vector(int n, double lo = -1.0, double hi = 1.0) {
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = uniform(lo, hi);
    return v;
  }

  Eigen::VectorXd unit(int n) {
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = normal();
    return v / v.norm();
  }

  Homography homography(int width, int height) {
    return sample_homography({}, width, height, std::uniform_int_distribution<std::uint64_t>()(rng_));
  }

  Grid3 grid(int rows, int cols, int channels, double lo, double hi) {
    Grid3 g(rows, cols, channels);
    for (double& x : g.data) x = uniform(lo, hi);
    return g;
  }

  Grid3 unit_grid(int rows, int cols, int channels) {
    Grid3 g(rows, cols, channels);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const Eigen::VectorXd u = unit(channels);
        for (int k = 0; k < channels; ++k) g.at(r, c, k) = u[k];
      }
    return g;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

}  // namespace xspec::testgen
