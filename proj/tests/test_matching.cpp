#include "generators.hpp"

#include "xspec/error.hpp"
#include "xspec/matching.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace xspec;

namespace {

// Textbook ZNCC: mean-removed, divided by standard deviations and length.
double zncc_oracle(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double n = static_cast<double>(a.size());
  const Eigen::ArrayXd da = a.array() - a.mean(), db = b.array() - b.mean();
  const double sa = std::sqrt((da * da).sum() / n), sb = std::sqrt((db * db).sum() / n);
  return (da * db).sum() / (n * sa * sb);
}

Keypoint kp(double u, double v, const Eigen::VectorXd& d, double score = 1.0) {
  Keypoint k;
  k.p = {u, v};
  k.score = score;
  k.desc = d;
  return k;
}

Heatmap flat_heatmap(int w, int h, double v) {
  return {h, w, std::vector<double>(static_cast<std::size_t>(w) * h, v)};
}

}  // namespace

TEST(Matching, ZnccHandValues) {
  Eigen::VectorXd a(4), b(4);
  a << 1, 0, 0, 0;
  b << 0, 1, 0, 0;
  EXPECT_NEAR(zncc(a, b), -1.0 / 3.0, 1e-9);
  EXPECT_NEAR(match_score(a, b), 1.0 / 3.0, 1e-9);
  EXPECT_NEAR(zncc(a, a), 1.0, 1e-15);
  EXPECT_NEAR(zncc(a, -a), -1.0, 1e-15);
  EXPECT_NEAR(match_score(a, a), 1.0, 1e-15);
  EXPECT_NEAR(match_score(a, -a), 0.0, 1e-15);
}

TEST(Matching, ZnccMatchesOracleAndIsSymmetric) {
  testgen::Gen g(51);
  for (int t = 0; t < 300; ++t) {
    const Eigen::VectorXd a = g.vector(16), b = g.vector(16);
    const double z = zncc(a, b);
    EXPECT_NEAR(z, zncc_oracle(a, b), 1e-12);
    EXPECT_NEAR(z, zncc(b, a), 1e-12);
    EXPECT_GE(z, -1.0);
    EXPECT_LE(z, 1.0);
    const double s = match_score(a, b);
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(Matching, ZnccZeroVariance) {
  const Eigen::VectorXd c = Eigen::VectorXd::Constant(8, 0.5), d = Eigen::VectorXd::LinSpaced(8, 0, 1);
  try {
    zncc(c, d);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroVariance);
  }
}

TEST(Matching, SingleTargetIsCopied) {
  testgen::Gen g(52);
  const Grid3 grid = g.unit_grid(2, 2, 8);
  const Heatmap heat = flat_heatmap(16, 16, 0.25);
  const std::vector<Keypoint> tgt{kp(5.25, 9.5, g.unit(8))};
  std::vector<Keypoint> src;
  for (int i = 0; i < 5; ++i) src.push_back(kp(g.uniform(0, 15), g.uniform(0, 15), g.unit(8)));
  const auto m = soft_match(src, tgt, heat, grid, {});
  ASSERT_EQ(m.size(), 5u);
  for (const Match& x : m) {
    EXPECT_EQ(x.pseudo_tgt.p, tgt[0].p);
    EXPECT_NEAR(x.pseudo_tgt.score, 0.25, 1e-15);
    EXPECT_NEAR(x.pseudo_tgt.desc.norm(), 1.0, 1e-12);
    EXPECT_NEAR(x.score_m, match_score(x.src.desc, x.pseudo_tgt.desc), 1e-12);
    EXPECT_EQ(x.score_in, 0.0);
    EXPECT_EQ(x.weight, 0.0);
  }
}

TEST(Matching, EqualSimilarityGivesMidpoint) {
  testgen::Gen g(53);
  const Eigen::VectorXd d = g.unit(8);
  const std::vector<Keypoint> tgt{kp(2, 3, d), kp(10, 13, d)};
  const auto m = soft_match({kp(1, 1, g.unit(8))}, tgt, flat_heatmap(16, 16, 0.1), g.unit_grid(2, 2, 8), {});
  EXPECT_NEAR(m[0].pseudo_tgt.p.x(), 6.0, 1e-12);
  EXPECT_NEAR(m[0].pseudo_tgt.p.y(), 8.0, 1e-12);
}

TEST(Matching, SharpSoftmaxPicksBest) {
  // Build descriptors with zncc 0.9 and 0.1 against the source.
  Eigen::VectorXd s(4), e1(4), e2(4);
  s << 1, -1, 1, -1;
  s = (s.array() - s.mean()).matrix().normalized();
  e1 << 1, 1, -1, -1;
  e1 = (e1.array() - e1.mean()).matrix().normalized();
  auto mix = [&](double z) { return Eigen::VectorXd(z * s + std::sqrt(1 - z * z) * e1); };
  const Eigen::VectorXd a = mix(0.9), b = mix(0.1);
  ASSERT_NEAR(zncc(s, a), 0.9, 1e-12);
  ASSERT_NEAR(zncc(s, b), 0.1, 1e-12);
  testgen::Gen g(54);
  const auto m = soft_match({kp(0, 0, s)}, {kp(3, 4, a), kp(12, 1, b)}, flat_heatmap(16, 16, 0.1),
                            g.unit_grid(2, 2, 4), {0.01});
  const double w = std::exp(-80.0) / (1.0 + std::exp(-80.0));
  EXPECT_NEAR(m[0].pseudo_tgt.p.x(), 3.0 + w * 9.0, 1e-10);
  EXPECT_NEAR(m[0].pseudo_tgt.p.x(), 3.0, 1e-10);
  EXPECT_NEAR(m[0].pseudo_tgt.p.y(), 4.0, 1e-10);
}

TEST(Matching, PseudoTargetsInsideTargetHull) {
  testgen::Gen g(55);
  std::vector<Keypoint> src, tgt;
  for (int i = 0; i < 30; ++i) src.push_back(kp(g.uniform(0, 31), g.uniform(0, 23), g.unit(16)));
  for (int i = 0; i < 25; ++i) tgt.push_back(kp(g.uniform(8, 20), g.uniform(4, 12), g.unit(16)));
  const auto m = soft_match(src, tgt, flat_heatmap(32, 24, 0.2), g.unit_grid(3, 4, 16), {0.5});
  for (const Match& x : m) {
    EXPECT_GE(x.pseudo_tgt.p.x(), 8.0);
    EXPECT_LE(x.pseudo_tgt.p.x(), 20.0);
    EXPECT_GE(x.pseudo_tgt.p.y(), 4.0);
    EXPECT_LE(x.pseudo_tgt.p.y(), 12.0);
    EXPECT_GE(x.score_m, 0.0);
    EXPECT_LE(x.score_m, 1.0);
  }
}

TEST(Matching, EmptyTargetSet) {
  testgen::Gen g(56);
  try {
    soft_match({kp(0, 0, g.unit(8))}, {}, flat_heatmap(8, 8, 0.1), g.unit_grid(1, 1, 8), {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyTargetSet);
  }
}

TEST(Matching, MutualNnIdentity) {
  testgen::Gen g(57);
  std::vector<Keypoint> a;
  for (int i = 0; i < 12; ++i) a.push_back(kp(i, i, g.unit(32)));
  for (Similarity sim : {Similarity::Dot, Similarity::Zncc}) {
    const auto m = mutual_nn(a, a, sim);
    ASSERT_EQ(m.size(), a.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
      EXPECT_EQ(m[i].src, static_cast<int>(i));
      EXPECT_EQ(m[i].tgt, static_cast<int>(i));
    }
  }
  EXPECT_TRUE(mutual_nn({}, a, Similarity::Dot).empty());
}

TEST(Matching, MutualNnMatchesDoubleArgmaxOracle) {
  testgen::Gen g(58);
  for (int t = 0; t < 100; ++t) {
    const int ns = g.integer(1, 6), nt = g.integer(1, 6);
    std::vector<Keypoint> s, d;
    for (int i = 0; i < ns; ++i) s.push_back(kp(0, 0, g.unit(4)));
    for (int j = 0; j < nt; ++j) d.push_back(kp(0, 0, g.unit(4)));
    const Eigen::MatrixXd sim = similarity_matrix(s, d, Similarity::Dot);
    std::vector<std::pair<int, int>> expected;
    for (int i = 0; i < ns; ++i) {
      int bj = 0;
      for (int j = 1; j < nt; ++j)
        if (sim(i, j) > sim(i, bj)) bj = j;
      int bi = 0;
      for (int k = 1; k < ns; ++k)
        if (sim(k, bj) > sim(bi, bj)) bi = k;
      if (bi == i) expected.push_back({i, bj});
    }
    const auto m = mutual_nn(s, d, Similarity::Dot);
    ASSERT_EQ(m.size(), expected.size());
    for (std::size_t k = 0; k < m.size(); ++k) {
      EXPECT_EQ(m[k].src, expected[k].first);
      EXPECT_EQ(m[k].tgt, expected[k].second);
      EXPECT_DOUBLE_EQ(m[k].similarity, sim(m[k].src, m[k].tgt));
    }
  }
}

TEST(Matching, MutualNnExcludesOneSidedBest) {
  // sim table: src0 prefers tgt0, but tgt0 prefers src1.
  Eigen::VectorXd t0(2), s0(2), s1(2);
  t0 << 1, 0;
  s0 << std::cos(0.5), std::sin(0.5);
  s1 << std::cos(0.1), std::sin(0.1);
  const auto m = mutual_nn({kp(0, 0, s0), kp(0, 0, s1)}, {kp(0, 0, t0)}, Similarity::Dot);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0].src, 1);
}
