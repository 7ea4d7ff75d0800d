#include "generators.hpp"

#include "xspec/error.hpp"
#include "xspec/extraction.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace xspec;

namespace {

Heatmap zeros(int w, int h) { return {h, w, std::vector<double>(static_cast<std::size_t>(w) * h, 0.0)}; }

DescriptorMap unit_map(testgen::Gen& g, int w, int h, int c = 8) {
  return DescriptorMap(g.unit_grid(h / 8, w / 8, c));
}

// Greedy NMS over all pixels above threshold, Chebyshev radius.
std::vector<Eigen::Vector2i> nms_oracle(const Heatmap& h, double thr, int radius) {
  std::vector<std::pair<double, int>> cand;
  for (int i = 0; i < h.width * h.height; ++i)
    if (h.values[i] > thr) cand.push_back({h.values[i], i});
  std::stable_sort(cand.begin(), cand.end(), [](auto a, auto b) { return a.first > b.first; });
  std::vector<Eigen::Vector2i> kept;
  for (const auto& [s, i] : cand) {
    const Eigen::Vector2i p(i % h.width, i / h.width);
    bool ok = true;
    for (const auto& k : kept)
      if ((k - p).cwiseAbs().maxCoeff() <= radius) ok = false;
    if (ok) kept.push_back(p);
  }
  return kept;
}

}  // namespace

TEST(Extraction, OneHotWindow) {
  testgen::Gen g(31);
  Heatmap h = zeros(8, 8);
  h.at(5, 3) = 1.0;
  const auto kps = extract_soft(h, unit_map(g, 8, 8), {});
  ASSERT_EQ(kps.size(), 1u);
  EXPECT_NEAR(kps[0].p.x(), 3.0, 1e-12);
  EXPECT_NEAR(kps[0].p.y(), 5.0, 1e-12);
  EXPECT_NEAR(kps[0].score, 1.0, 1e-12);
}

TEST(Extraction, UniformWindowCenter) {
  testgen::Gen g(32);
  Heatmap h = zeros(16, 8);
  for (double& v : h.values) v = 0.3;
  const auto kps = extract_soft(h, unit_map(g, 16, 8), {});
  ASSERT_EQ(kps.size(), 2u);
  EXPECT_NEAR(kps[0].p.x(), 3.5, 1e-12);
  EXPECT_NEAR(kps[0].p.y(), 3.5, 1e-12);
  EXPECT_NEAR(kps[1].p.x(), 11.5, 1e-12);
}

TEST(Extraction, TwoEqualPeaksSymmetric) {
  testgen::Gen g(33);
  Heatmap h = zeros(8, 8);
  h.at(0, 0) = h.at(7, 7) = 1.0;
  const auto kps = extract_soft(h, unit_map(g, 8, 8), {8, 1e-4});
  EXPECT_NEAR(kps[0].p.x(), 3.5, 1e-9);
  EXPECT_NEAR(kps[0].p.y(), 3.5, 1e-9);
}

TEST(Extraction, SoftArgmaxMatchesOracle) {
  testgen::Gen g(34);
  Heatmap h = zeros(8, 8);
  for (double& v : h.values) v = g.uniform(0, 0.05);
  std::vector<double> w;
  const Eigen::Vector2d p = soft_argmax_window(h, 0, 0, 8, 0.01, &w);
  double z = 0.0;
  Eigen::Vector2d acc(0, 0);
  for (int k = 0; k < 64; ++k) z += std::exp(h.values[k] / 0.01);
  for (int k = 0; k < 64; ++k) {
    const double a = std::exp(h.values[k] / 0.01) / z;
    EXPECT_NEAR(w[k], a, 1e-14);
    acc += a * Eigen::Vector2d(k % 8, k / 8);
  }
  EXPECT_LT((p - acc).norm(), 1e-12);
}

TEST(Extraction, SoftKeypointsStayInTheirWindows) {
  testgen::Gen g(35);
  Heatmap h = zeros(32, 24);
  for (double& v : h.values) v = g.uniform(0, 1);
  const auto kps = extract_soft(h, unit_map(g, 32, 24), {});
  ASSERT_EQ(kps.size(), 12u);
  for (std::size_t i = 0; i < kps.size(); ++i) {
    const int wx = static_cast<int>(i % 4), wy = static_cast<int>(i / 4);
    EXPECT_GE(kps[i].p.x(), 8 * wx);
    EXPECT_LE(kps[i].p.x(), 8 * wx + 7);
    EXPECT_GE(kps[i].p.y(), 8 * wy);
    EXPECT_LE(kps[i].p.y(), 8 * wy + 7);
    EXPECT_NEAR(kps[i].desc.norm(), 1.0, 1e-6);
  }
}

TEST(Extraction, SoftShapeMismatch) {
  testgen::Gen g(36);
  const Heatmap h = zeros(12, 8);
  SoftExtractConfig cfg;
  EXPECT_THROW(extract_soft(h, g.unit_grid(1, 1, 8), cfg), Error);
}

TEST(Extraction, ClassicalBelowThresholdIsEmpty) {
  testgen::Gen g(37);
  Heatmap h = zeros(16, 16);
  for (double& v : h.values) v = 0.01;
  EXPECT_TRUE(extract_classical(h, unit_map(g, 16, 16), {}).empty());
}

TEST(Extraction, ClassicalSinglePeak) {
  testgen::Gen g(38);
  Heatmap h = zeros(16, 16);
  h.at(9, 4) = 0.5;
  const auto kps = extract_classical(h, unit_map(g, 16, 16), {});
  ASSERT_EQ(kps.size(), 1u);
  EXPECT_EQ(kps[0].p, Eigen::Vector2d(4, 9));
  EXPECT_DOUBLE_EQ(kps[0].score, 0.5);
}

TEST(Extraction, ClassicalSuppressesWeakerNeighbour) {
  testgen::Gen g(39);
  Heatmap h = zeros(16, 16);
  h.at(5, 5) = 0.9;
  h.at(5, 8) = 0.8;
  const auto kps = extract_classical(h, unit_map(g, 16, 16), {0.015, 4, 0});
  ASSERT_EQ(kps.size(), 1u);
  EXPECT_EQ(kps[0].p, Eigen::Vector2d(5, 5));
}

TEST(Extraction, ClassicalMatchesNmsOracle) {
  testgen::Gen g(40);
  for (int t = 0; t < 20; ++t) {
    Heatmap h = zeros(32, 24);
    for (double& v : h.values) v = g.uniform(0, 1) < 0.05 ? g.uniform(0, 1) : 0.0;
    const DescriptorMap d = unit_map(g, 32, 24);
    const ClassicalExtractConfig cfg{0.1, g.integer(1, 5), 0};
    const auto kps = extract_classical(h, d, cfg);
    const auto oracle = nms_oracle(h, cfg.detection_threshold, cfg.nms_radius);
    ASSERT_EQ(kps.size(), oracle.size());
    for (std::size_t i = 0; i < kps.size(); ++i)
      EXPECT_EQ(kps[i].p, oracle[i].cast<double>());
    for (std::size_t i = 0; i < kps.size(); ++i)
      for (std::size_t j = i + 1; j < kps.size(); ++j)
        EXPECT_GT((kps[i].p - kps[j].p).cwiseAbs().maxCoeff(), cfg.nms_radius);
  }
}

TEST(Extraction, ClassicalThresholdMonotone) {
  testgen::Gen g(41);
  Heatmap h = zeros(32, 32);
  for (double& v : h.values) v = g.uniform(0, 1);
  const DescriptorMap d = unit_map(g, 32, 32);
  std::size_t prev = 0;
  for (double thr : {0.95, 0.8, 0.6, 0.4, 0.2, 0.05}) {
    const std::size_t n = extract_classical(h, d, {thr, 2, 0}).size();
    EXPECT_GE(n, prev);
    prev = n;
  }
}

TEST(Extraction, ClassicalTopK) {
  testgen::Gen g(42);
  Heatmap h = zeros(32, 32);
  for (double& v : h.values) v = g.uniform(0, 1);
  const auto kps = extract_classical(h, unit_map(g, 32, 32), {0.015, 1, 5});
  ASSERT_EQ(kps.size(), 5u);
  for (std::size_t i = 1; i < kps.size(); ++i) EXPECT_GE(kps[i - 1].score, kps[i].score);
}

TEST(Extraction, ConfigValidation) {
  EXPECT_THROW((SoftExtractConfig{8, 0.0}.validate()), Error);
  EXPECT_THROW((ClassicalExtractConfig{1.5, 4, 0}.validate()), Error);
  EXPECT_THROW((ClassicalExtractConfig{0.1, 0, 0}.validate()), Error);
}
