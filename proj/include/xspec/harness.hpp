#pragma once

#include "xspec/estimation.hpp"
#include "xspec/geometry.hpp"
#include "xspec/gradients.hpp"
#include "xspec/image.hpp"
#include "xspec/metrics.hpp"
#include "xspec/mock.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace xspec {

enum class PipelineKind { Classical, Weighted };
enum class FeatureSource { Mock, Files, Keypoints };

std::string_view to_string(PipelineKind k);
std::string_view to_string(FeatureSource s);
PipelineKind parse_pipeline(std::string_view s);
FeatureSource parse_feature_source(std::string_view s);

/// Everything an evaluation run depends on. Pair i draws all of its
/// randomness from substream i of `seed`.
struct ExperimentSpec {
  std::string method = "mock";
  PipelineKind pipeline = PipelineKind::Weighted;
  FeatureSource source = FeatureSource::Mock;
  int pairs = 10;  // mock: number generated; files/keypoints: cap, 0 = all found
  std::uint64_t seed = 0;
  MockFeatureConfig mock;
  HomographySamplerConfig sampler;
  WeightedPipelineConfig weighted;
  ClassicalPipelineConfig classical;
  MetricsConfig metrics;
  /// Compute repeatability, M-score, MMA, mAP and N_K alongside ACE.
  bool feature_metrics = true;
  std::filesystem::path data_dir;
  unsigned threads = 0;  // 0 = default_thread_count()

  void validate() const;
};

/// Missing keys keep their defaults; unknown keys throw InvalidConfig.
ExperimentSpec experiment_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentSpec& spec);
ExperimentSpec load_experiment_spec(const std::filesystem::path& path);

/// Per-pair result with enough data to recompute its metrics offline.
struct PairRecord {
  int index = 0;
  std::string id;
  Homography h_gt = Homography::identity(Frame::pixel(1, 1));
  std::optional<Homography> h_est;
  std::string error;  // empty on success
  PairEvaluation eval;
  Eigen::Matrix2Xd src_keypoints;  // feature-metric detections
  Eigen::Matrix2Xd tgt_keypoints;
  std::vector<IndexMatch> matches;  // mutual nearest neighbours over the detections
  int match_count = 0;             // correspondences seen by the estimator
  RegistrationDiagnostics diagnostics;
};

struct ExperimentResult {
  MetricsReport report;
  std::vector<PairRecord> pairs;  // in pair order
};

/// Runs the selected pipeline on every pair. Pipeline errors are recorded as
/// failures (ACE = +inf); the run never aborts on them.
ExperimentResult run_experiment(const ExperimentSpec& spec);

void write_pair_records_jsonl(std::ostream& out, const std::vector<PairRecord>& pairs);
/// Writes metrics.csv and pairs.jsonl into `dir` (created if needed).
void write_experiment_outputs(const std::filesystem::path& dir, const ExperimentSpec& spec,
                              const ExperimentResult& result);

nlohmann::json homography_to_json(const Homography& h);
Homography homography_from_json(const nlohmann::json& j);
nlohmann::json registration_result_to_json(const RegistrationResult& r);

/// One keypoint per line: {"u", "v", "score", "desc": [...]}.
std::vector<Keypoint> load_keypoints_jsonl(const std::filesystem::path& path);
void save_keypoints_jsonl(const std::filesystem::path& path, const std::vector<Keypoint>& kps);

/// Registers a pair from feature-map files.
RegistrationResult register_pair(const std::filesystem::path& src_det,
                                 const std::filesystem::path& src_desc,
                                 const std::filesystem::path& tgt_det,
                                 const std::filesystem::path& tgt_desc, PipelineKind pipeline,
                                 const WeightedPipelineConfig& weighted = {},
                                 const ClassicalPipelineConfig& classical = {});

struct SynthConfig {
  int pairs = 10;
  std::uint64_t seed = 0;
  MockFeatureConfig mock;
  HomographySamplerConfig sampler;
  /// Also write an image pair per index, warped from a procedural reference.
  bool images = false;
  PhotometricConfig photometric;
  std::filesystem::path image;  // optional source image instead of the reference

  void validate() const;
};

SynthConfig synth_config_from_json(const nlohmann::json& j);

/// Writes NNN_src_det.xsfm, NNN_src_desc.xsfm, NNN_tgt_det.xsfm,
/// NNN_tgt_desc.xsfm and NNN_h.json per pair, plus NNN_optical.png and
/// NNN_thermal.png when cfg.images is set. Mock pair i matches pair i of an
/// experiment with the same seed, sampler and mock settings.
void synthesize_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir);

/// Ground truth and mock features of experiment pair `index`.
MockFeatures mock_pair(const ExperimentSpec& spec, int index);

struct GradcheckConfig {
  int trials = 5;
  int coordinates = 20;
  std::uint64_t seed = 1;
  double tolerance = 1e-4;
  double floor = 1e-5;  // relative-error denominator floor
  double step = 1e-5;
};

struct GradcheckEntry {
  std::string check;
  int trial = 0;
  std::size_t coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double worst = 0.0;
  bool passed = true;
};

/// Full-pipeline check with transfer, descriptor and detector weights at 1
/// on small perturbed toy problems, plus per-stage checks of softmax,
/// soft-argmax, ZNCC and bilinear sampling.
GradcheckReport run_gradcheck(const GradcheckConfig& cfg);

struct AveragingRun {
  std::uint64_t seed = 0;
  AveragingReport corner;
  AveragingReport transfer;
};

struct AveragingSummary {
  std::vector<AveragingRun> runs;
  /// Corner objective converged (loss < 1e-4) with mean transfer error > 5 px.
  int corner_converged_displaced = 0;
  /// Transfer objective reached mean transfer error < 0.5 px.
  int transfer_converged = 0;
};

/// Seeds 1..seeds, each with its own sampled ground truth; both objectives
/// start from the same perturbed targets.
AveragingSummary run_averaging_demo(int matches, int seeds, const AveragingConfig& cfg = {});
nlohmann::json to_json(const AveragingSummary& s);

}  // namespace xspec
