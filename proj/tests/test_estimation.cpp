#include "generators.hpp"

#include "xspec/error.hpp"
#include "xspec/estimation.hpp"
#include "xspec/metrics.hpp"
#include "xspec/mock.hpp"
#include "xspec/parallel.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace xspec;

namespace {

const Frame kPix = Frame::pixel(320, 240);

Eigen::Matrix2Xd warp(const Homography& h, const Eigen::Matrix2Xd& p) {
  return transform_points(h, {p, h.frame()}).coords;
}

ErrorCode code_of(const auto& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::IoError;
}

Match make_match(double s_src, double s_tgt, double s_m) {
  Match m;
  m.src.score = s_src;
  m.pseudo_tgt.score = s_tgt;
  m.score_m = s_m;
  return m;
}

}  // namespace

TEST(Estimation, InlierScoreValues) {
  const InlierConfig cfg{50.0, 5.0};
  EXPECT_DOUBLE_EQ(inlier_score(50.0, cfg), 0.5);
  EXPECT_NEAR(inlier_score(0.0, cfg), 1.0 / (1.0 + std::exp(-5.0)), 1e-15);
  EXPECT_NEAR(inlier_score(0.0, cfg), 0.993307, 1e-6);
  EXPECT_NEAR(inlier_score(100.0, cfg), 0.006693, 1e-6);
}

TEST(Estimation, InlierScoreMonotone) {
  const InlierConfig cfg;
  double prev = 1.0;
  for (double x = 0.0; x < 300.0; x += 0.5) {
    const double s = inlier_score(x, cfg);
    EXPECT_LT(s, prev);
    EXPECT_GT(s, 0.0);
    prev = s;
  }
}

TEST(Estimation, InlierThresholdScalesWithDiagonal) {
  EXPECT_NEAR(InlierConfig::for_image(320, 240).threshold, 50.0, 1e-12);
  EXPECT_NEAR(InlierConfig::for_image(640, 480).threshold, 100.0, 1e-12);
}

TEST(Estimation, ScoreInliersFromGroundTruth) {
  const Homography h = Homography::translation(2, 0, kPix);
  std::vector<Match> ms{make_match(1, 1, 1), make_match(1, 1, 1), make_match(0.5, 0.8, 0.0)};
  ms[0].src.p = {10, 10};
  ms[0].pseudo_tgt.p = {12, 10};
  ms[1].src.p = {10, 10};
  ms[1].pseudo_tgt.p = {62, 10};
  ms[2].src.p = {3, 3};
  ms[2].pseudo_tgt.p = {5, 3};
  const auto out = score_inliers_gt(ms, h, InlierConfig{50, 5});
  EXPECT_NEAR(out[0].score_in, 0.993307, 1e-6);
  EXPECT_NEAR(out[0].weight, out[0].score_in, 1e-15);
  EXPECT_DOUBLE_EQ(out[1].score_in, 0.5);
  EXPECT_DOUBLE_EQ(out[1].weight, 0.5);
  EXPECT_EQ(out[2].weight, 0.0);
  for (const Match& m : out) EXPECT_NEAR(m.weight, match_weight(m), 1e-15);
  EXPECT_EQ(code_of([&] { score_inliers_gt(ms, normalize_homography(h), {}); }), ErrorCode::FrameMismatch);
}

TEST(Estimation, FourPointDltReprojects) {
  testgen::Gen g(61);
  for (int t = 0; t < 200; ++t) {
    const Homography h = g.homography(320, 240);
    const Eigen::Matrix2Xd src = g.points(4, 320, 240);
    const Eigen::Matrix2Xd tgt = warp(h, src);
    const Homography est = weighted_dlt(src, tgt, Eigen::VectorXd::Ones(4), kPix);
    EXPECT_LT(reprojection_errors(est.matrix(), src, tgt).maxCoeff(), 1e-6);
  }
}

TEST(Estimation, DltWeightScaleInvariance) {
  testgen::Gen g(62);
  const Homography h = g.homography(320, 240);
  const Eigen::Matrix2Xd src = g.points(12, 320, 240);
  Eigen::Matrix2Xd tgt = warp(h, src);
  for (int i = 0; i < 12; ++i) tgt.col(i) += Eigen::Vector2d(g.normal(), g.normal());
  const Eigen::VectorXd w = g.vector(12, 0.1, 1.0);
  const Eigen::Matrix3d a = weighted_dlt(src, tgt, w, kPix).scale_fixed();
  const Eigen::Matrix3d b = weighted_dlt(src, tgt, 10.0 * w, kPix).scale_fixed();
  EXPECT_LT((a - b).norm(), 1e-9 * a.norm());
}

TEST(Estimation, DltZeroWeightExclusion) {
  testgen::Gen g(63);
  for (int t = 0; t < 50; ++t) {
    const Homography h = g.homography(320, 240);
    Eigen::Matrix2Xd src = g.points(5, 320, 240);
    Eigen::Matrix2Xd tgt = warp(h, src);
    tgt.col(4) += Eigen::Vector2d(80, -60);
    Eigen::VectorXd w = Eigen::VectorXd::Ones(5);
    w[4] = 0.0;
    const Eigen::Matrix3d five = weighted_dlt(src, tgt, w, kPix).scale_fixed();
    const Eigen::Matrix3d four =
        weighted_dlt(src.leftCols(4), tgt.leftCols(4), Eigen::VectorXd::Ones(4), kPix).scale_fixed();
    EXPECT_LT((five - four).cwiseAbs().maxCoeff(), 1e-9 * four.cwiseAbs().maxCoeff());
  }
}

TEST(Estimation, DltDegenerateInputs) {
  Eigen::Matrix2Xd line(2, 5), same(2, 4);
  line << 0, 1, 2, 3, 4, 0, 1, 2, 3, 4;
  same.setConstant(3.0);
  EXPECT_EQ(code_of([&] { weighted_dlt(line, line, Eigen::VectorXd::Ones(5), kPix); }), ErrorCode::RankDeficient);
  EXPECT_EQ(code_of([&] { weighted_dlt(same, same, Eigen::VectorXd::Ones(4), kPix); }), ErrorCode::RankDeficient);
  EXPECT_EQ(code_of([&] { weighted_dlt(line.leftCols(3), line.leftCols(3), Eigen::VectorXd::Ones(3), kPix); }),
            ErrorCode::InsufficientPoints);
  Eigen::VectorXd w = Eigen::VectorXd::Ones(5);
  w[0] = w[1] = 0.0;
  EXPECT_EQ(code_of([&] { weighted_dlt(line, line, w, kPix); }), ErrorCode::InsufficientPoints);
}

TEST(Estimation, RansacExactCorrespondences) {
  testgen::Gen g(64);
  const Homography h = g.homography(320, 240);
  const Eigen::Matrix2Xd src = g.points(20, 320, 240);
  const RansacResult r = ransac(src, warp(h, src), kPix, {.seed = 3});
  EXPECT_EQ(r.inliers.size(), 20u);
  EXPECT_LT(ace(h, r.h), 1e-6);
}

TEST(Estimation, RansacWithHalfOutliers) {
  int good = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    testgen::Gen g(1000 + s);
    const Homography h = g.homography(320, 240);
    const Eigen::Matrix2Xd src = g.points(20, 320, 240);
    Eigen::Matrix2Xd tgt = warp(h, src);
    for (int i = 10; i < 20; ++i) tgt.col(i) = g.point(320, 240);
    const RansacResult r = ransac(src, tgt, kPix, {.seed = s});
    int true_inliers = 0;
    for (int i : r.inliers) true_inliers += i < 10;
    EXPECT_GE(true_inliers, 10);
    good += ace(h, r.h) < 1.0;
  }
  EXPECT_GE(good, 99);
}

TEST(Estimation, RansacDeterministicAcrossThreads) {
  testgen::Gen g(65);
  const Homography h = g.homography(320, 240);
  const Eigen::Matrix2Xd src = g.points(60, 320, 240);
  Eigen::Matrix2Xd tgt = warp(h, src);
  for (int i = 0; i < 30; ++i) tgt.col(i) = g.point(320, 240);
  const Eigen::VectorXd w = g.vector(60, 0.1, 1.0);
  RansacConfig cfg{.iterations = 500, .seed = 9, .weighted_sampling = true, .threads = 1};
  const RansacResult a = ransac(src, tgt, kPix, cfg, w);
  cfg.threads = 4;
  const RansacResult b = ransac(src, tgt, kPix, cfg, w);
  EXPECT_EQ(a.h.matrix(), b.h.matrix());
  EXPECT_EQ(a.inliers, b.inliers);
  EXPECT_EQ(a.best_iteration, b.best_iteration);
}

TEST(Estimation, RansacZeroWeightNeverSampled) {
  // Correspondence 0 is an outlier with zero weight; if it were ever sampled,
  // a hypothesis through it could not win, so check the weighted run equals
  // one with that match removed from the sampling pool by construction.
  testgen::Gen g(66);
  const Homography h = g.homography(320, 240);
  Eigen::Matrix2Xd src = g.points(8, 320, 240);
  Eigen::Matrix2Xd tgt = warp(h, src);
  tgt.col(0) += Eigen::Vector2d(40, 40);
  Eigen::VectorXd w = Eigen::VectorXd::Ones(8);
  w[0] = 0.0;
  const RansacResult r = ransac(src, tgt, kPix, {.iterations = 300, .seed = 2, .weighted_sampling = true}, w);
  EXPECT_EQ(r.inliers, (std::vector<int>{1, 2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(r.best_iteration, 0);  // every sample is all-inlier
}

TEST(Estimation, RansacErrors) {
  const Eigen::Matrix2Xd p = Eigen::Matrix2Xd::Random(2, 3) * 100;
  EXPECT_EQ(code_of([&] { ransac(p, p, kPix, {}); }), ErrorCode::InsufficientPoints);
  testgen::Gen g(67);
  // Collinear points make every minimal sample degenerate.
  Eigen::Matrix2Xd src(2, 12);
  for (int i = 0; i < 12; ++i) src.col(i) << g.uniform(0, 300), 0.0;
  src.row(1) = 0.5 * src.row(0);
  const Eigen::Matrix2Xd tgt = src.array() + 3.0;
  EXPECT_EQ(code_of([&] { ransac(src, tgt, kPix, {.iterations = 50}); }),
            ErrorCode::NoConsensus);
}

TEST(Estimation, RefineKeepsExactSolution) {
  testgen::Gen g(68);
  const Homography h = g.homography(320, 240);
  const Eigen::Matrix2Xd src = g.points(20, 320, 240);
  const RefineResult r = refine_dls(h, src, warp(h, src));
  EXPECT_LT((r.h.scale_fixed() - h.scale_fixed()).norm(), 1e-10 * h.scale_fixed().norm());
}

TEST(Estimation, RefineNeverWorseThanDlt) {
  testgen::Gen g(69);
  for (int t = 0; t < 30; ++t) {
    const Homography h = g.homography(320, 240);
    const Eigen::Matrix2Xd src = g.points(20, 320, 240);
    Eigen::Matrix2Xd tgt = warp(h, src);
    for (int i = 0; i < 20; ++i) tgt.col(i) += Eigen::Vector2d(g.normal(0.5), g.normal(0.5));
    const Homography h0 = dlt(src, tgt, kPix);
    const RefineResult r = refine_dls(h0, src, tgt);
    EXPECT_LE(r.final_cost, reprojection_cost(h0.matrix(), src, tgt) + 1e-12);
    EXPECT_LE(r.final_cost, r.initial_cost);
  }
}

TEST(Estimation, RefineDegenerate) {
  const Eigen::Matrix2Xd same = Eigen::Matrix2Xd::Constant(2, 6, 5.0);
  EXPECT_EQ(code_of([&] { refine_dls(Homography::identity(kPix), same, same); }),
            ErrorCode::SingularNormalEquations);
}

TEST(Estimation, PipelinesOnIdealMockFeatures) {
  MockFeatureConfig cfg;
  cfg.width = 320;
  cfg.height = 240;
  cfg.keypoints = 80;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const Homography h = sample_homography({}, 320, 240, substream_seed(s, 0));
    const MockFeatures m = generate_mock_features(h, cfg, substream_seed(s, 1));
    const RegistrationResult w =
        run_weighted_pipeline(m.src_det, m.src_desc, m.tgt_det, m.tgt_desc, {});
    EXPECT_LT(ace(h, w.h_est), 1e-3);
    // Classical detections sit on integer pixels.
    const RegistrationResult c =
        run_classical_pipeline(m.src_det, m.src_desc, m.tgt_det, m.tgt_desc, {});
    EXPECT_LT(ace(h, c.h_est), 2.0);
    EXPECT_GE(c.diagnostics.inlier_count, 70);
  }
}

TEST(Estimation, PipelinesSelfRegistration) {
  MockFeatureConfig cfg;
  cfg.width = 320;
  cfg.height = 240;
  cfg.keypoints = 60;
  const Homography id = Homography::identity(kPix);
  const MockFeatures m = generate_mock_features(id, cfg, 4);
  EXPECT_LT(ace(id, run_weighted_pipeline(m.src_det, m.src_desc, m.src_det, m.src_desc, {}).h_est), 0.1);
  EXPECT_LT(ace(id, run_classical_pipeline(m.src_det, m.src_desc, m.src_det, m.src_desc, {}).h_est), 0.1);
}

TEST(Estimation, PipelineNeedsFourKeypoints) {
  MockFeatureConfig cfg;
  cfg.width = 320;
  cfg.height = 240;
  cfg.keypoints = 3;
  const Homography id = Homography::identity(kPix);
  const MockFeatures m = generate_mock_features(id, cfg, 5);
  EXPECT_EQ(code_of([&] { run_classical_pipeline(m.src_det, m.src_desc, m.tgt_det, m.tgt_desc, {}); }),
            ErrorCode::InsufficientPoints);
  std::vector<Keypoint> three(3);
  EXPECT_EQ(code_of([&] { run_classical_pipeline(three, three, 320, 240, {}); }),
            ErrorCode::InsufficientPoints);
}

TEST(Estimation, WeightedPipelineWeightsAreScoreProducts) {
  MockFeatureConfig cfg;
  cfg.width = 320;
  cfg.height = 240;
  cfg.keypoints = 50;
  const Homography h = sample_homography({}, 320, 240, 77);
  const MockFeatures m = generate_mock_features(h, cfg, 78);
  const RegistrationResult r = run_weighted_pipeline(m.src_det, m.src_desc, m.tgt_det, m.tgt_desc, {});
  const std::set<int> inl(r.inliers.begin(), r.inliers.end());
  for (std::size_t i = 0; i < r.matches.size(); ++i) {
    const Match& x = r.matches[i];
    EXPECT_EQ(x.score_in, inl.count(static_cast<int>(i)) ? 1.0 : 0.0);
    EXPECT_NEAR(x.weight, x.src.score * x.pseudo_tgt.score * x.score_m * x.score_in, 1e-9);
  }
}
