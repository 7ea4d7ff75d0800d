#include "generators.hpp"

#include "xspec/error.hpp"
#include "xspec/gradients.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace xspec;

namespace {

ToyConfig small_toy() {
  ToyConfig tc;
  tc.width = 40;
  tc.height = 32;
  tc.descriptor_length = 16;
  tc.max_translation = 6;
  tc.init_logit_noise = 0.3;
  tc.init_descriptor_noise = 0.2;
  return tc;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& x) {
  const Eigen::ArrayXd e = (x.array() - x.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

LossWeights only(double c, double f, double t, double d, double k) { return {c, f, t, d, k}; }

}  // namespace

TEST(Gradients, FiniteDiffBasics) {
  const auto sq = [](const Eigen::VectorXd& x) { return x.squaredNorm(); };
  const Eigen::VectorXd g = finite_diff(sq, Eigen::Vector2d(1, 2), 1e-5);
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 4.0, 1e-8);
  const auto lin = [](const Eigen::VectorXd& x) { return 3.0 * x[0] - 2.0 * x[1]; };
  for (double h : {1e-3, 0.5, 7.0}) {
    const Eigen::VectorXd l = finite_diff(lin, Eigen::Vector2d(0.3, -4), h);
    EXPECT_NEAR(l[0], 3.0, 1e-9);
    EXPECT_NEAR(l[1], -2.0, 1e-9);
  }
  const auto w = [](const Eigen::VectorXd& x) { return welsch(x[0], 0.1); };
  const double d = finite_diff(w, Eigen::VectorXd::Constant(1, 0.1), 1e-5)[0];
  EXPECT_NEAR(d, 10.0 * std::exp(-0.5), 1e-5);
  EXPECT_NEAR(d, 6.06531, 1e-5);
}

TEST(Gradients, RelativeError) {
  EXPECT_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_NEAR(relative_error(1.0, 1.1), 0.1 / 1.1, 1e-15);
  EXPECT_NEAR(relative_error(0.0, 1e-9, 1e-6), 1e-3, 1e-15);
}

TEST(Gradients, SoftmaxBackward) {
  testgen::Gen g(81);
  const Eigen::VectorXd x = g.vector(7, -2, 2), c = g.vector(7);
  const Eigen::VectorXd a = softmax_backward(softmax(x), c);
  const Eigen::VectorXd n = finite_diff([&](const Eigen::VectorXd& y) { return c.dot(softmax(y)); }, x);
  EXPECT_LT((a - n).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Gradients, SoftArgmaxBackward) {
  testgen::Gen g(82);
  const double t = 0.01;
  Eigen::Matrix2Xd coords(2, 64);
  for (int k = 0; k < 64; ++k) coords.col(k) << k % 8, k / 8;
  const Eigen::VectorXd h = g.vector(64, 0.0, 0.04);
  const Eigen::Vector2d gp(0.7, -0.4);
  const Eigen::VectorXd a = softmax(h / t);
  const Eigen::VectorXd an = soft_argmax_backward(coords, a, coords * a, t, gp);
  const Eigen::VectorXd n = finite_diff(
      [&](const Eigen::VectorXd& y) { return gp.dot(coords * softmax(y / t)); }, h, 1e-7);
  for (int k = 0; k < 64; ++k) EXPECT_LT(relative_error(an[k], n[k], 1e-5), 1e-5) << k;
}

TEST(Gradients, ZnccBackward) {
  testgen::Gen g(83);
  const Eigen::VectorXd a = g.vector(12), b = g.vector(12);
  Eigen::VectorXd ga, gb;
  zncc_backward(a, b, 1.0, ga, gb);
  const Eigen::VectorXd na = finite_diff([&](const Eigen::VectorXd& y) { return zncc(y, b); }, a);
  const Eigen::VectorXd nb = finite_diff([&](const Eigen::VectorXd& y) { return zncc(a, y); }, b);
  EXPECT_LT((ga - na).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((gb - nb).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Gradients, NormalizeBackward) {
  testgen::Gen g(84);
  const Eigen::VectorXd x = g.vector(9), c = g.vector(9);
  const Eigen::VectorXd a = normalize_backward(x, c);
  const Eigen::VectorXd n = finite_diff([&](const Eigen::VectorXd& y) { return c.dot(y / y.norm()); }, x);
  EXPECT_LT((a - n).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Gradients, BilinearBackward) {
  testgen::Gen g(85);
  Heatmap h{8, 8, {}};
  for (int i = 0; i < 64; ++i) h.values.push_back(g.uniform(0, 1));
  const Eigen::Vector2d p(3.3, 5.8);
  Heatmap gh{8, 8, std::vector<double>(64, 0.0)};
  const Eigen::Vector2d gp = bilinear_scalar_backward(h, p, 1.0, gh);
  const Eigen::VectorXd np = finite_diff([&](const Eigen::VectorXd& y) { return bilinear_sample_scalar(h, y); }, p);
  EXPECT_LT((gp - np).cwiseAbs().maxCoeff(), 1e-9);
  double wsum = 0.0;
  for (double v : gh.values) wsum += v;
  EXPECT_NEAR(wsum, 1.0, 1e-14);

  const Grid3 grid = g.grid(3, 3, 5, -1, 1);
  const Eigen::VectorXd c = g.vector(5);
  Grid3 gg(3, 3, 5);
  const Eigen::Vector2d q(9.1, 14.2);
  const Eigen::Vector2d gq = bilinear_descriptor_backward(grid, q, c, gg);
  const Eigen::VectorXd nq = finite_diff(
      [&](const Eigen::VectorXd& y) { return c.dot(interpolate_descriptor(grid, y)); }, q);
  EXPECT_LT((gq - nq).cwiseAbs().maxCoeff(), 1e-9);
  // Outside the cell-center hull the position has no influence.
  Grid3 unused(3, 3, 5);
  const Eigen::Vector2d edge = bilinear_descriptor_backward(grid, {1.0, 10.0}, c, unused);
  EXPECT_EQ(edge.x(), 0.0);
}

TEST(Gradients, DecodeBackward) {
  testgen::Gen g(86);
  const Grid3 logits = g.grid(1, 2, kDetectorChannels, -2, 2);
  Heatmap gh{8, 16, {}};
  for (int i = 0; i < 128; ++i) gh.values.push_back(g.uniform(-1, 1));
  Grid3 prob(1, 2, kDetectorChannels);
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd x(kDetectorChannels);
    for (int k = 0; k < kDetectorChannels; ++k) x[k] = logits.at(0, c, k);
    const Eigen::VectorXd p = softmax(x);
    for (int k = 0; k < kDetectorChannels; ++k) prob.at(0, c, k) = p[k];
  }
  Grid3 gl(1, 2, kDetectorChannels);
  decode_backward(prob, gh, gl);
  const auto f = [&](const Grid3& l) {
    const Heatmap h = decode_heatmap(l);
    double s = 0.0;
    for (int i = 0; i < 128; ++i) s += gh.values[i] * h.values[i];
    return s;
  };
  for (std::size_t i = 0; i < logits.data.size(); ++i) {
    Grid3 a = logits, b = logits;
    a.data[i] += 1e-6;
    b.data[i] -= 1e-6;
    EXPECT_NEAR(gl.data[i], (f(a) - f(b)) / 2e-6, 1e-8);
  }
}

TEST(Gradients, ReplayIsBitIdentical) {
  const ToyConfig tc = small_toy();
  const ToyProblem toy = make_toy_problem(tc, 3);
  const LossWeights w = only(1, 1, 1, 1, 1);
  const PipelineTape tape = record_forward(toy.init, toy.problem, tc.pipeline, w);
  EXPECT_EQ(replay(tape), tape.total);
  EXPECT_EQ(replay(tape), record_forward(toy.init, toy.problem, tc.pipeline, w).total);
}

TEST(Gradients, ZeroWeightsGiveZeroGradients) {
  const ToyConfig tc = small_toy();
  const ToyProblem toy = make_toy_problem(tc, 4);
  const LossWeights w = only(0, 0, 0, 0, 0);
  const PipelineGradients g = grad_total_loss(record_forward(toy.init, toy.problem, tc.pipeline, w), w);
  for (std::size_t i = 0; i < g.size(); ++i) ASSERT_EQ(g[i], 0.0);
}

TEST(Gradients, PipelineGradientMatchesFd) {
  const ToyConfig tc = small_toy();
  for (int inst = 0; inst < 5; ++inst) {
    const ToyProblem toy = make_toy_problem(tc, 200 + inst);
    const LossWeights w = only(0, 0, 1, 1, 1);
    const PipelineGradients g = grad_total_loss(record_forward(toy.init, toy.problem, tc.pipeline, w), w);
    testgen::Gen gen(300 + inst);
    for (int k = 0; k < 20; ++k) {
      const std::size_t i = static_cast<std::size_t>(gen.integer(0, static_cast<int>(toy.init.size()) - 1));
      PipelineParams p = toy.init;
      const double x0 = p[i];
      p[i] = x0 + 1e-5;
      const double fp = record_forward(p, toy.problem, tc.pipeline, w).total;
      p[i] = x0 - 1e-5;
      const double fm = record_forward(p, toy.problem, tc.pipeline, w).total;
      EXPECT_LT(relative_error(g[i], (fp - fm) / 2e-5, 1e-5), 1e-4) << "instance " << inst << " coord " << i;
    }
  }
}

TEST(Gradients, HomographyTermGradientMatchesFd) {
  // Corner and Frobenius terms go through a numerically differentiated DLT,
  // so the comparison is looser.
  const ToyConfig tc = small_toy();
  const ToyProblem toy = make_toy_problem(tc, 17);
  const LossWeights w = only(1, 1, 0, 0, 0);
  const PipelineGradients g = grad_total_loss(record_forward(toy.init, toy.problem, tc.pipeline, w), w);
  testgen::Gen gen(18);
  for (int k = 0; k < 20; ++k) {
    const std::size_t i = static_cast<std::size_t>(gen.integer(0, static_cast<int>(toy.init.size()) - 1));
    PipelineParams p = toy.init;
    const double x0 = p[i];
    p[i] = x0 + 1e-5;
    const double fp = record_forward(p, toy.problem, tc.pipeline, w).total;
    p[i] = x0 - 1e-5;
    const double fm = record_forward(p, toy.problem, tc.pipeline, w).total;
    EXPECT_LT(relative_error(g[i], (fp - fm) / 2e-5, 1e-4), 1e-3) << "coord " << i;
  }
}

TEST(Gradients, DeadPathDescriptorHasNoGradient) {
  ToyConfig tc = small_toy();
  tc.width = 96;
  tc.height = 72;
  tc.pipeline.transfer_margin = 16.0;
  const ToyProblem toy = make_toy_problem(tc, 5);
  const LossWeights w = only(0, 0, 1, 0, 0);
  const PipelineTape tape = record_forward(toy.init, toy.problem, tc.pipeline, w);
  const PipelineGradients g = grad_total_loss(tape, w);
  const int rows = toy.init.src_desc.rows, cols = toy.init.src_desc.cols;
  std::set<std::pair<int, int>> live;
  for (int k : tape.transfer_set) {
    const BilinearStencil s = descriptor_stencil(tape.src.points.col(k), cols, rows);
    for (int v : {s.v0, s.v1})
      for (int u : {s.u0, s.u1}) live.insert({v, u});
  }
  int dead = 0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      if (live.count({r, c})) continue;
      ++dead;
      for (int k = 0; k < toy.init.src_desc.channels; ++k) EXPECT_LT(std::abs(g.src_desc.at(r, c, k)), 1e-10);
      // Perturbing a dead descriptor leaves the loss unchanged.
      PipelineParams p = toy.init;
      p.src_desc.at(r, c, 0) += 1e-3;
      EXPECT_NEAR(record_forward(p, toy.problem, tc.pipeline, w).total, tape.total, 1e-12);
    }
  EXPECT_GT(dead, 0);
}

TEST(Gradients, ToyTrainingDeterministicAndLrZero) {
  const ToyConfig tc;
  const ToyProblem toy = make_toy_problem(tc, 2);
  const LossWeights w = only(0, 0, 1, 0, 0);
  const TrainState frozen = toy_train(toy, tc, w, 3, 0.0);
  ASSERT_EQ(frozen.history.size(), 4u);
  for (const LossCurveRow& r : frozen.history) EXPECT_EQ(r.total, frozen.history[0].total);
  const TrainState a = toy_train(toy, tc, w, 20, 300.0);
  const TrainState b = toy_train(toy, tc, w, 20, 300.0);
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].total, b.history[i].total);
  EXPECT_LT(a.history.back().total, a.history.front().total);
  for (int r = 0; r < a.params.src_desc.rows; ++r)
    for (int c = 0; c < a.params.src_desc.cols; ++c) {
      double n = 0.0;
      for (int k = 0; k < a.params.src_desc.channels; ++k) n += a.params.src_desc.at(r, c, k) * a.params.src_desc.at(r, c, k);
      EXPECT_NEAR(n, 1.0, 1e-12);
    }
}

TEST(Gradients, LossCurveCsv) {
  std::ostringstream out;
  write_loss_curve_csv(out, {LossCurveRow{0, {1, 2, 3, 4, 5}, 15, 0.5}});
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "step,L_C,L_F,L_T,L_D,L_K,total");
}

TEST(Gradients, AveragingPerfectInitialization) {
  AveragingConfig cfg;
  cfg.perturbation = 0.0;
  const Homography h = sample_homography({}, cfg.width, cfg.height, 4);
  for (auto obj : {AveragingObjective::Corner, AveragingObjective::Transfer}) {
    const AveragingReport r = averaging_effect_demo(20, h, 4, obj, cfg);
    EXPECT_LT(r.corner_loss_final, 1e-20);
    EXPECT_LT(r.mean_transfer_error_final, 1e-9);
    EXPECT_EQ(r.iterations, 0);
  }
  EXPECT_THROW(averaging_effect_demo(7, h, 4, AveragingObjective::Corner, cfg), Error);
}
