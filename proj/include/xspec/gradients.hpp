#pragma once

#include "xspec/estimation.hpp"
#include "xspec/extraction.hpp"
#include "xspec/featuregrid.hpp"
#include "xspec/geometry.hpp"
#include "xspec/losses.hpp"
#include "xspec/matching.hpp"
#include "xspec/mock.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <ostream>
#include <vector>

namespace xspec {

/// Free parameters of the soft pipeline for one image pair.
struct PipelineParams {
  Grid3 src_logits;
  Grid3 tgt_logits;
  Grid3 src_desc;
  Grid3 tgt_desc;

  /// Number of scalar parameters, ordered src_logits, tgt_logits, src_desc, tgt_desc.
  std::size_t size() const;
  double& operator[](std::size_t i);
  double operator[](std::size_t i) const;
};

/// Ground truth for one pair.
struct PipelineProblem {
  Homography h_gt;  // pixel frame, source to target
  DetectorTarget src_labels;
  DetectorTarget tgt_labels;
};

struct SoftPipelineConfig {
  SoftExtractConfig extract;
  MatcherConfig match;
  InlierConfig inlier;
  RobustConfig robust;
  DescriptorLossConfig descriptor;
  DetectorLossWeights detector = DetectorLossWeights::defaults();
  /// Restrict the transfer loss to matches whose source keypoint, warped by
  /// the ground truth, lands inside the target image.
  bool transfer_visible_only = false;
  /// Border (px) the warped source keypoint must keep from the target image edge.
  double transfer_margin = 0.0;
  /// Central-difference step for the weighted-DLT stage of the corner and
  /// Frobenius losses (pixel units for positions).
  double dlt_fd_step = 1e-5;
};

/// Intermediates of one soft-pipeline forward pass.
struct PipelineTape {
  PipelineParams params;
  PipelineProblem problem;
  SoftPipelineConfig cfg;
  LossWeights weights;

  struct Side {
    Grid3 prob;  // cell softmax including the dustbin
    Heatmap heat;
    std::vector<int> window_top, window_left;
    std::vector<std::vector<double>> window_weights;
    Eigen::Matrix2Xd points;
    Eigen::VectorXd scores;
    Eigen::MatrixXd raw;       // interpolated descriptors, one row per keypoint
    Eigen::VectorXd raw_norm;
    Eigen::MatrixXd desc;      // unit descriptors
    Eigen::MatrixXd centered;  // desc minus its mean
    Eigen::VectorXd centered_norm;
    Eigen::MatrixXd zn;        // zero-normalized descriptors
  };
  Side src{}, tgt{};

  Eigen::MatrixXd pi{};  // N_src x N_tgt matching softmax
  Eigen::Matrix2Xd pseudo{};
  Eigen::VectorXd pseudo_scores{};
  Eigen::MatrixXd pseudo_raw{};
  Eigen::VectorXd pseudo_raw_norm{};
  Eigen::MatrixXd pseudo_desc{};
  Eigen::VectorXd match_scores{};  // (zncc(d_src, d_pseudo) + 1) / 2
  Eigen::VectorXd reproj{};        // |H p_s - p_pseudo|, pixels
  Eigen::VectorXd inlier_scores{};
  Eigen::VectorXd match_weights{};
  std::vector<int> transfer_set{};  // matches entering the transfer loss
  Eigen::MatrixXd correspondence{};

  LossTerms terms{};
  double total = 0.0;
};

/// Runs the soft pipeline forward and records every intermediate.
PipelineTape record_forward(const PipelineParams& params, const PipelineProblem& problem,
                            const SoftPipelineConfig& cfg, const LossWeights& weights);

/// Recomputes the total loss from the tape's inputs.
double replay(const PipelineTape& tape);

struct PipelineGradients {
  Grid3 src_logits;
  Grid3 tgt_logits;
  Grid3 src_desc;
  Grid3 tgt_desc;

  double operator[](std::size_t i) const;
  std::size_t size() const;
};

/// Reverse pass of the weighted total loss. Transfer, descriptor and
/// detector terms are analytic; corner and Frobenius terms difference the
/// weighted DLT numerically over its inputs. Throws NonFiniteGradient.
PipelineGradients grad_total_loss(const PipelineTape& tape, const LossWeights& weights);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h.
Eigen::VectorXd finite_diff(const std::function<double(const Eigen::VectorXd&)>& f,
                            const Eigen::VectorXd& x, double h = 1e-5);

/// |a - f| / max(|a|, |f|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

// Per-stage backward passes. Each returns the gradient with respect to the
// stage input given the gradient with respect to its output.

/// y = softmax(x).
Eigen::VectorXd softmax_backward(const Eigen::VectorXd& y, const Eigen::VectorXd& grad_y);
/// p = sum_k a_k x_k with a = softmax(h / T); returns d/dh.
Eigen::VectorXd soft_argmax_backward(const Eigen::Matrix2Xd& coords, const Eigen::VectorXd& a,
                                     const Eigen::Vector2d& p, double temperature,
                                     const Eigen::Vector2d& grad_p);
/// z = zncc(a, b) without clamping; writes d/da and d/db.
void zncc_backward(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double grad_z,
                   Eigen::VectorXd& grad_a, Eigen::VectorXd& grad_b);
/// y = x / |x|.
Eigen::VectorXd normalize_backward(const Eigen::VectorXd& x, const Eigen::VectorXd& grad_y);
/// s = bilinear heatmap sample at p: accumulates d/dheat into grad_heat and
/// returns d/dp.
Eigen::Vector2d bilinear_scalar_backward(const Heatmap& h, const Eigen::Vector2d& p, double grad_s,
                                         Heatmap& grad_heat);
/// d = interpolated (unnormalized) descriptor at p: accumulates d/dgrid and
/// returns d/dp.
Eigen::Vector2d bilinear_descriptor_backward(const Grid3& grid, const Eigen::Vector2d& p,
                                             const Eigen::VectorXd& grad_d, Grid3& grad_grid);
/// Heatmap gradient to cell-logit gradient through the decode softmax.
void decode_backward(const Grid3& prob, const Heatmap& grad_heat, Grid3& grad_logits);

struct LossCurveRow {
  int step = 0;
  LossTerms terms;
  double total = 0.0;
  double mean_reprojection = 0.0;  // pixels, over the transfer set
};

struct TrainState {
  PipelineParams params;
  int step = 0;
  std::vector<LossCurveRow> history;
};

struct ToyConfig {
  int width = 128;
  int height = 96;
  int descriptor_length = 32;
  int max_translation = 12;  // integer pixels per axis
  double init_jitter = 6.0;       // px, target locations
  double init_logit_noise = 0.05;
  /// Planted cells start as a Gaussian heatmap bump over a constant floor.
  double init_floor = 0.001;
  double init_amplitude = 0.03;
  double init_sigma = 1.8;  // px
  double init_descriptor_noise = 0.05;
  /// Descriptor step = lr * descriptor_lr_scale.
  double descriptor_lr_scale = 0.01;
  SoftPipelineConfig pipeline;

  ToyConfig() {
    pipeline.transfer_visible_only = true;
    pipeline.transfer_margin = kCellSize;
  }
};

struct ToyProblem {
  PipelineParams init;
  PipelineProblem problem;
};

/// Single synthetic pair under an integer translation with every cell planted
/// at a common intra-cell offset, then corrupted for initialization.
ToyProblem make_toy_problem(const ToyConfig& cfg, std::uint64_t seed);

/// Plain gradient descent on the direct parameters; descriptor cells are
/// renormalized after every step. history has steps + 1 rows (before each
/// update and after the last). Throws DivergenceDetected.
TrainState toy_train(const ToyProblem& toy, const ToyConfig& cfg, const LossWeights& weights,
                     int steps, double lr);

void write_loss_curve_csv(std::ostream& out, const std::vector<LossCurveRow>& rows);

struct AveragingConfig {
  int width = 320;
  int height = 240;
  double perturbation = 10.0;  // px, applied with random sign per coordinate
  int max_iterations = 3000;
  double fd_step = 1e-6;
  double alpha = 0.1;
};

struct AveragingReport {
  double corner_loss_initial = 0.0;
  double corner_loss_final = 0.0;
  double mean_transfer_error_initial = 0.0;  // pixels
  double mean_transfer_error_final = 0.0;
  int iterations = 0;
};

enum class AveragingObjective { Corner, Transfer };

/// Free pseudo-target locations optimized through a ground-truth-scored
/// weighted DLT (corner objective) or directly (transfer objective).
AveragingReport averaging_effect_demo(int n_matches, const Homography& h_gt, std::uint64_t seed,
                                      AveragingObjective objective, const AveragingConfig& cfg = {});

}  // namespace xspec
