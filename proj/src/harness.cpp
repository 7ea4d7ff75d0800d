#include "xspec/harness.hpp"

#include "xspec/error.hpp"
#include "xspec/featuregrid.hpp"
#include "xspec/grid_io.hpp"
#include "xspec/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>

namespace xspec {

using nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(PipelineKind k) {
  return k == PipelineKind::Classical ? "classical" : "weighted";
}

std::string_view to_string(FeatureSource s) {
  switch (s) {
    case FeatureSource::Mock: return "mock";
    case FeatureSource::Files: return "files";
    case FeatureSource::Keypoints: return "keypoints";
  }
  return "mock";
}

PipelineKind parse_pipeline(std::string_view s) {
  if (s == "classical") return PipelineKind::Classical;
  if (s == "weighted") return PipelineKind::Weighted;
  throw Error(ErrorCode::InvalidConfig, "unknown pipeline '" + std::string(s) + "'");
}

FeatureSource parse_feature_source(std::string_view s) {
  if (s == "mock") return FeatureSource::Mock;
  if (s == "files") return FeatureSource::Files;
  if (s == "keypoints") return FeatureSource::Keypoints;
  throw Error(ErrorCode::InvalidConfig, "unknown feature source '" + std::string(s) + "'");
}

namespace {

// Reads known keys of a JSON object and rejects the rest.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw Error(ErrorCode::InvalidConfig, where_ + " must be an object");
  }

  template <class T>
  Reader& operator()(const char* key, T& out) {
    seen_.insert(key);
    if (auto it = j_.find(key); it != j_.end()) {
      try {
        out = it->template get<T>();
      } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, where_ + "." + key + ": " + e.what());
      }
    }
    return *this;
  }

  template <class F>
  Reader& sub(const char* key, F&& fn) {
    seen_.insert(key);
    if (auto it = j_.find(key); it != j_.end()) fn(*it, where_ + "." + key);
    return *this;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw Error(ErrorCode::InvalidConfig, "unknown key " + where_ + "." + k);
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void read(const json& j, const std::string& where, MockFeatureConfig& c) {
  Reader r(j, where);
  r("width", c.width)("height", c.height)("keypoints", c.keypoints)(
      "descriptor_length", c.descriptor_length)("temperature", c.temperature)("peak", c.peak)(
      "floor", c.floor)("center_tolerance", c.center_tolerance)(
      "placement_attempts", c.placement_attempts)("jitter_sigma", c.jitter_sigma)(
      "descriptor_noise", c.descriptor_noise)("outlier_fraction", c.outlier_fraction);
  r.finish();
}

json to_json(const MockFeatureConfig& c) {
  return {{"width", c.width},
          {"height", c.height},
          {"keypoints", c.keypoints},
          {"descriptor_length", c.descriptor_length},
          {"temperature", c.temperature},
          {"peak", c.peak},
          {"floor", c.floor},
          {"center_tolerance", c.center_tolerance},
          {"placement_attempts", c.placement_attempts},
          {"jitter_sigma", c.jitter_sigma},
          {"descriptor_noise", c.descriptor_noise},
          {"outlier_fraction", c.outlier_fraction}};
}

void read(const json& j, const std::string& where, HomographySamplerConfig& c) {
  Reader r(j, where);
  r("max_translation_frac", c.max_translation_frac)("max_rotation_rad", c.max_rotation_rad)(
      "scale_min", c.scale_min)("scale_max", c.scale_max)("max_perspective", c.max_perspective);
  r.finish();
}

json to_json(const HomographySamplerConfig& c) {
  return {{"max_translation_frac", c.max_translation_frac},
          {"max_rotation_rad", c.max_rotation_rad},
          {"scale_min", c.scale_min},
          {"scale_max", c.scale_max},
          {"max_perspective", c.max_perspective}};
}

void read(const json& j, const std::string& where, RansacConfig& c) {
  Reader r(j, where);
  r("iterations", c.iterations)("inlier_threshold", c.inlier_threshold)(
      "weighted_sampling", c.weighted_sampling);
  r.finish();
}

json to_json(const RansacConfig& c) {
  return {{"iterations", c.iterations},
          {"inlier_threshold", c.inlier_threshold},
          {"weighted_sampling", c.weighted_sampling}};
}

void read(const json& j, const std::string& where, WeightedPipelineConfig& c) {
  Reader r(j, where);
  r("window", c.extract.window)("extract_temperature", c.extract.temperature)(
      "match_temperature", c.match.temperature);
  r.sub("ransac", [&](const json& s, const std::string& w) { read(s, w, c.ransac); });
  r.finish();
}

json to_json(const WeightedPipelineConfig& c) {
  return {{"window", c.extract.window},
          {"extract_temperature", c.extract.temperature},
          {"match_temperature", c.match.temperature},
          {"ransac", to_json(c.ransac)}};
}

void read(const json& j, const std::string& where, ClassicalPipelineConfig& c) {
  Reader r(j, where);
  std::string sim = c.similarity == Similarity::Dot ? "dot" : "zncc";
  r("detection_threshold", c.extract.detection_threshold)("nms_radius", c.extract.nms_radius)(
      "max_keypoints", c.extract.max_keypoints)("similarity", sim)(
      "refine_iterations", c.refine.max_iterations)("refine_tolerance", c.refine.step_tolerance);
  r.sub("ransac", [&](const json& s, const std::string& w) { read(s, w, c.ransac); });
  r.finish();
  if (sim == "dot")
    c.similarity = Similarity::Dot;
  else if (sim == "zncc")
    c.similarity = Similarity::Zncc;
  else
    throw Error(ErrorCode::InvalidConfig, where + ".similarity must be dot or zncc");
}

json to_json(const ClassicalPipelineConfig& c) {
  return {{"detection_threshold", c.extract.detection_threshold},
          {"nms_radius", c.extract.nms_radius},
          {"max_keypoints", c.extract.max_keypoints},
          {"similarity", c.similarity == Similarity::Dot ? "dot" : "zncc"},
          {"refine_iterations", c.refine.max_iterations},
          {"refine_tolerance", c.refine.step_tolerance},
          {"ransac", to_json(c.ransac)}};
}

void read(const json& j, const std::string& where, MetricsConfig& c) {
  Reader r(j, where);
  r("ace_thresholds", c.ace_thresholds)("correct_dist", c.correct_dist);
  r.finish();
}

json to_json(const MetricsConfig& c) {
  return {{"ace_thresholds", c.ace_thresholds}, {"correct_dist", c.correct_dist}};
}

void read(const json& j, const std::string& where, PhotometricConfig& c) {
  Reader r(j, where);
  r("enabled", c.enabled)("brightness", c.brightness)("contrast_min", c.contrast_min)(
      "contrast_max", c.contrast_max)("noise_sigma", c.noise_sigma)("gamma_min", c.gamma_min)(
      "gamma_max", c.gamma_max);
  r.finish();
}

json points_json(const Eigen::Matrix2Xd& p) {
  json a = json::array();
  for (Eigen::Index i = 0; i < p.cols(); ++i) a.push_back({p(0, i), p(1, i)});
  return a;
}

Eigen::Matrix2Xd keypoint_matrix(const std::vector<Keypoint>& kps) {
  Eigen::Matrix2Xd m(2, kps.size());
  for (std::size_t i = 0; i < kps.size(); ++i) m.col(i) = kps[i].p;
  return m;
}

std::string pair_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", index);
  return buf;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

struct PairMaps {
  DetectionResponse src_det;
  DescriptorMap src_desc;
  DetectionResponse tgt_det;
  DescriptorMap tgt_desc;
};

struct PairInput {
  std::string id;
  Homography h_gt;
  std::optional<PairMaps> maps;
  std::vector<Keypoint> src_kps, tgt_kps;  // keypoint source only
};

// Pair ids in data_dir: every <id>_h.json, sorted.
std::vector<std::string> discover_pairs(const fs::path& dir, int cap) {
  if (!fs::is_directory(dir))
    throw Error(ErrorCode::IoError, "data_dir " + dir.string() + " is not a directory");
  std::vector<std::string> ids;
  const std::string suffix = "_h.json";
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.size() > suffix.size() && name.ends_with(suffix))
      ids.push_back(name.substr(0, name.size() - suffix.size()));
  }
  std::sort(ids.begin(), ids.end());
  if (cap > 0 && static_cast<int>(ids.size()) > cap) ids.resize(cap);
  return ids;
}

PairInput load_pair(const ExperimentSpec& spec, int index, const std::vector<std::string>& ids) {
  if (spec.source == FeatureSource::Mock) {
    MockFeatures m = mock_pair(spec, index);
    return {pair_id(index), m.h_gt,
            PairMaps{std::move(m.src_det), std::move(m.src_desc), std::move(m.tgt_det),
                     std::move(m.tgt_desc)},
            {}, {}};
  }
  const std::string& id = ids[index];
  const fs::path base = spec.data_dir / id;
  const Homography h = homography_from_json(read_json_file(base.string() + "_h.json"));
  if (spec.source == FeatureSource::Files)
    return {id, h,
            PairMaps{load_detection_response(base.string() + "_src_det.xsfm"),
                     load_descriptor_map(base.string() + "_src_desc.xsfm"),
                     load_detection_response(base.string() + "_tgt_det.xsfm"),
                     load_descriptor_map(base.string() + "_tgt_desc.xsfm")},
            {}, {}};
  return {id, h, std::nullopt, load_keypoints_jsonl(base.string() + "_src_kp.jsonl"),
          load_keypoints_jsonl(base.string() + "_tgt_kp.jsonl")};
}

void evaluate_pair(const ExperimentSpec& spec, int index, const std::vector<std::string>& ids,
                   PairRecord& rec) {
  rec.index = index;
  rec.eval.ace = std::numeric_limits<double>::infinity();
  rec.eval.failed = true;
  const std::uint64_t ransac_seed = substream_seed(substream_seed(spec.seed, index), 2);

  std::optional<PairInput> in;
  try {
    in = load_pair(spec, index, ids);
  } catch (const std::exception& e) {
    rec.id = spec.source == FeatureSource::Mock ? pair_id(index) : ids[index];
    rec.error = e.what();
    return;
  }
  rec.id = in->id;
  rec.h_gt = in->h_gt;
  const int width = in->h_gt.frame().width, height = in->h_gt.frame().height;

  std::vector<Keypoint> src_kps, tgt_kps;
  try {
    if (in->maps) {
      src_kps = extract_classical(decode_heatmap(in->maps->src_det), in->maps->src_desc,
                                  spec.classical.extract);
      tgt_kps = extract_classical(decode_heatmap(in->maps->tgt_det), in->maps->tgt_desc,
                                  spec.classical.extract);
    } else {
      src_kps = std::move(in->src_kps);
      tgt_kps = std::move(in->tgt_kps);
    }

    RegistrationResult r = [&] {
      if (spec.pipeline == PipelineKind::Weighted) {
        WeightedPipelineConfig cfg = spec.weighted;
        cfg.ransac.seed = ransac_seed;
        cfg.ransac.threads = 1;
        return run_weighted_pipeline(in->maps->src_det, in->maps->src_desc, in->maps->tgt_det,
                                     in->maps->tgt_desc, cfg);
      }
      ClassicalPipelineConfig cfg = spec.classical;
      cfg.ransac.seed = ransac_seed;
      cfg.ransac.threads = 1;
      return run_classical_pipeline(src_kps, tgt_kps, width, height, cfg);
    }();
    rec.match_count = static_cast<int>(r.matches.size());
    rec.diagnostics = r.diagnostics;
    rec.eval.ace = ace(in->h_gt, r.h_est);
    rec.h_est = r.h_est;
    rec.eval.failed = !std::isfinite(rec.eval.ace);
    if (rec.eval.failed) rec.eval.ace = std::numeric_limits<double>::infinity();
  } catch (const std::exception& e) {
    rec.error = e.what();
  }

  if (!spec.feature_metrics) return;
  try {
    const double dist = spec.metrics.correct_dist;
    rec.src_keypoints = keypoint_matrix(src_kps);
    rec.tgt_keypoints = keypoint_matrix(tgt_kps);
    const Similarity sim =
        spec.pipeline == PipelineKind::Classical ? spec.classical.similarity : Similarity::Zncc;
    rec.matches = mutual_nn(src_kps, tgt_kps, sim);
    Eigen::Matrix2Xd ms(2, rec.matches.size()), mt(2, rec.matches.size());
    for (std::size_t i = 0; i < rec.matches.size(); ++i) {
      const IndexMatch& m = rec.matches[i];
      ms.col(i) = src_kps[m.src].p;
      mt.col(i) = tgt_kps[m.tgt].p;
      rec.eval.candidates.push_back({m.similarity, is_correct_match(in->h_gt, ms.col(i), mt.col(i), dist)});
    }
    rec.eval.repeatability = repeatability(rec.src_keypoints, rec.tgt_keypoints, in->h_gt, dist);
    rec.eval.mscore =
        matching_score(rec.src_keypoints, rec.tgt_keypoints, rec.matches, in->h_gt, dist);
    rec.eval.mma = mma(ms, mt, in->h_gt, dist);
    rec.eval.detections = 0.5 * static_cast<double>(src_kps.size() + tgt_kps.size());
  } catch (const std::exception& e) {
    rec.eval.repeatability.reset();
    rec.eval.mscore.reset();
    rec.eval.mma.reset();
    rec.eval.detections.reset();
    rec.eval.candidates.clear();
    if (!rec.error.empty()) rec.error += "; ";
    rec.error += std::string("feature metrics: ") + e.what();
  }
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

void ExperimentSpec::validate() const {
  if (pairs < 0) throw Error(ErrorCode::InvalidConfig, "pairs must be non-negative");
  if (method.empty() || method.find_first_of(",\n\"") != std::string::npos)
    throw Error(ErrorCode::InvalidConfig, "method label must be non-empty without commas or quotes");
  sampler.validate();
  metrics.validate();
  weighted.extract.validate();
  weighted.match.validate();
  weighted.ransac.validate();
  classical.extract.validate();
  classical.ransac.validate();
  if (source == FeatureSource::Mock) mock.validate();
  if (source != FeatureSource::Mock && !fs::is_directory(data_dir))
    throw Error(ErrorCode::InvalidConfig, "data_dir '" + data_dir.string() + "' does not exist");
  if (source == FeatureSource::Keypoints && pipeline == PipelineKind::Weighted)
    throw Error(ErrorCode::InvalidConfig, "the weighted pipeline needs feature maps, not keypoint lists");
}

ExperimentSpec experiment_spec_from_json(const json& j) {
  ExperimentSpec s;
  Reader r(j, "spec");
  std::string pipeline(to_string(s.pipeline)), source(to_string(s.source)), data_dir;
  r("method", s.method)("pipeline", pipeline)("feature_source", source)("pairs", s.pairs)(
      "seed", s.seed)("feature_metrics", s.feature_metrics)("data_dir", data_dir)(
      "threads", s.threads);
  r.sub("mock", [&](const json& x, const std::string& w) { read(x, w, s.mock); });
  r.sub("sampler", [&](const json& x, const std::string& w) { read(x, w, s.sampler); });
  r.sub("weighted", [&](const json& x, const std::string& w) { read(x, w, s.weighted); });
  r.sub("classical", [&](const json& x, const std::string& w) { read(x, w, s.classical); });
  r.sub("metrics", [&](const json& x, const std::string& w) { read(x, w, s.metrics); });
  r.finish();
  s.pipeline = parse_pipeline(pipeline);
  s.source = parse_feature_source(source);
  s.data_dir = data_dir;
  s.metrics.eval_width = s.mock.width;
  s.metrics.eval_height = s.mock.height;
  return s;
}

json to_json(const ExperimentSpec& s) {
  return {{"method", s.method},
          {"pipeline", to_string(s.pipeline)},
          {"feature_source", to_string(s.source)},
          {"pairs", s.pairs},
          {"seed", s.seed},
          {"feature_metrics", s.feature_metrics},
          {"data_dir", s.data_dir.string()},
          {"threads", s.threads},
          {"mock", to_json(s.mock)},
          {"sampler", to_json(s.sampler)},
          {"weighted", to_json(s.weighted)},
          {"classical", to_json(s.classical)},
          {"metrics", to_json(s.metrics)}};
}

ExperimentSpec load_experiment_spec(const fs::path& path) {
  ExperimentSpec s = experiment_spec_from_json(read_json_file(path));
  if (s.data_dir.is_relative() && !s.data_dir.empty()) s.data_dir = path.parent_path() / s.data_dir;
  return s;
}

MockFeatures mock_pair(const ExperimentSpec& spec, int index) {
  const std::uint64_t seed = substream_seed(spec.seed, index);
  const Homography h = sample_homography(spec.sampler, spec.mock.width, spec.mock.height,
                                         substream_seed(seed, 0));
  return generate_mock_features(h, spec.mock, substream_seed(seed, 1));
}

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  std::vector<std::string> ids;
  int n = spec.pairs;
  if (spec.source != FeatureSource::Mock) {
    ids = discover_pairs(spec.data_dir, spec.pairs);
    n = static_cast<int>(ids.size());
  }
  ExperimentResult result;
  result.pairs.resize(n);
  const unsigned threads = spec.threads > 0 ? spec.threads : default_thread_count();
  parallel_for(n, threads, [&](std::size_t i) {
    evaluate_pair(spec, static_cast<int>(i), ids, result.pairs[i]);
  });
  std::vector<PairEvaluation> evals;
  evals.reserve(n);
  for (const PairRecord& p : result.pairs) evals.push_back(p.eval);
  result.report = aggregate(evals, spec.metrics);
  return result;
}

json homography_to_json(const Homography& h) {
  json m = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m.push_back(h.matrix()(r, c));
  return {{"h", m},
          {"frame", h.frame().is_pixel() ? "pixel" : "normalized"},
          {"width", h.frame().width},
          {"height", h.frame().height}};
}

Homography homography_from_json(const json& j) {
  try {
    const auto v = j.at("h").get<std::vector<double>>();
    if (v.size() != 9) throw Error(ErrorCode::ShapeMismatch, "homography needs 9 entries");
    Eigen::Matrix3d m;
    for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = v[i];
    const std::string frame = j.value("frame", "pixel");
    const int w = j.at("width").get<int>(), h = j.at("height").get<int>();
    if (frame == "pixel") return Homography(m, Frame::pixel(w, h));
    if (frame == "normalized") return Homography(m, Frame::normalized(w, h));
    throw Error(ErrorCode::InvalidConfig, "unknown frame '" + frame + "'");
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("homography json: ") + e.what());
  }
}

json registration_result_to_json(const RegistrationResult& r) {
  json matches = json::array();
  for (const Match& m : r.matches)
    matches.push_back({{"src", {m.src.p.x(), m.src.p.y()}},
                       {"tgt", {m.pseudo_tgt.p.x(), m.pseudo_tgt.p.y()}},
                       {"score_src", m.src.score},
                       {"score_tgt", m.pseudo_tgt.score},
                       {"score_m", m.score_m},
                       {"score_in", m.score_in},
                       {"weight", m.weight},
                       {"src_index", m.src_index},
                       {"tgt_index", m.tgt_index}});
  const RegistrationDiagnostics& d = r.diagnostics;
  return {{"homography", homography_to_json(r.h_est)},
          {"inliers", r.inliers},
          {"matches", matches},
          {"diagnostics",
           {{"ransac_iterations", d.ransac_iterations},
            {"ransac_best_iteration", d.ransac_best_iteration},
            {"inlier_count", d.inlier_count},
            {"refine_iterations", d.refine_iterations},
            {"initial_cost", d.initial_cost},
            {"final_cost", d.final_cost}}}};
}

void write_pair_records_jsonl(std::ostream& out, const std::vector<PairRecord>& pairs) {
  for (const PairRecord& p : pairs) {
    json matches = json::array();
    for (const IndexMatch& m : p.matches) matches.push_back({m.src, m.tgt, m.similarity});
    json rec = {{"index", p.index},
                {"id", p.id},
                {"h_gt", homography_to_json(p.h_gt)},
                {"h_est", p.h_est ? homography_to_json(*p.h_est) : json(nullptr)},
                {"failed", p.eval.failed},
                {"error", p.error},
                {"ace", p.eval.failed ? json(nullptr) : json(p.eval.ace)},
                {"rep", optional_json(p.eval.repeatability)},
                {"ms", optional_json(p.eval.mscore)},
                {"mma", optional_json(p.eval.mma)},
                {"n_k", optional_json(p.eval.detections)},
                {"match_count", p.match_count},
                {"inlier_count", p.diagnostics.inlier_count},
                {"src_keypoints", points_json(p.src_keypoints)},
                {"tgt_keypoints", points_json(p.tgt_keypoints)},
                {"matches", matches}};
    out << rec.dump() << '\n';
  }
}

void write_experiment_outputs(const fs::path& dir, const ExperimentSpec& spec,
                              const ExperimentResult& result) {
  fs::create_directories(dir);
  std::ofstream csv(dir / "metrics.csv");
  std::ofstream jsonl(dir / "pairs.jsonl");
  if (!csv || !jsonl) throw Error(ErrorCode::IoError, "cannot write outputs in " + dir.string());
  write_metrics_csv(csv, {spec.method}, {std::string(to_string(spec.pipeline))}, {result.report});
  write_pair_records_jsonl(jsonl, result.pairs);
}

std::vector<Keypoint> load_keypoints_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<Keypoint> kps;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      Keypoint k;
      k.p = {j.at("u").get<double>(), j.at("v").get<double>()};
      k.score = j.value("score", 1.0);
      const auto d = j.at("desc").get<std::vector<double>>();
      k.desc = Eigen::Map<const Eigen::VectorXd>(d.data(), d.size());
      const double norm = k.desc.norm();
      if (!(norm > 0.0)) throw Error(ErrorCode::InvalidConfig, "zero descriptor");
      k.desc /= norm;
      if (!kps.empty() && kps.front().desc.size() != k.desc.size())
        throw Error(ErrorCode::ShapeMismatch, "descriptor length differs from the first keypoint");
      kps.push_back(std::move(k));
    } catch (const std::exception& e) {
      throw Error(ErrorCode::IoError, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return kps;
}

void save_keypoints_jsonl(const fs::path& path, const std::vector<Keypoint>& kps) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  for (const Keypoint& k : kps)
    out << json{{"u", k.p.x()},
                {"v", k.p.y()},
                {"score", k.score},
                {"desc", std::vector<double>(k.desc.data(), k.desc.data() + k.desc.size())}}
               .dump()
        << '\n';
}

RegistrationResult register_pair(const fs::path& src_det, const fs::path& src_desc,
                                 const fs::path& tgt_det, const fs::path& tgt_desc,
                                 PipelineKind pipeline, const WeightedPipelineConfig& weighted,
                                 const ClassicalPipelineConfig& classical) {
  const DetectionResponse sd = load_detection_response(src_det);
  const DescriptorMap sx = load_descriptor_map(src_desc);
  const DetectionResponse td = load_detection_response(tgt_det);
  const DescriptorMap tx = load_descriptor_map(tgt_desc);
  if (pipeline == PipelineKind::Weighted) return run_weighted_pipeline(sd, sx, td, tx, weighted);
  return run_classical_pipeline(sd, sx, td, tx, classical);
}

void SynthConfig::validate() const {
  if (pairs < 0) throw Error(ErrorCode::InvalidConfig, "pairs must be non-negative");
  mock.validate();
  sampler.validate();
  if (images) photometric.validate();
}

SynthConfig synth_config_from_json(const json& j) {
  SynthConfig c;
  Reader r(j, "synth");
  std::string image;
  r("pairs", c.pairs)("seed", c.seed)("images", c.images)("image", image);
  r.sub("mock", [&](const json& x, const std::string& w) { read(x, w, c.mock); });
  r.sub("sampler", [&](const json& x, const std::string& w) { read(x, w, c.sampler); });
  r.sub("photometric", [&](const json& x, const std::string& w) { read(x, w, c.photometric); });
  r.finish();
  c.image = image;
  return c;
}

void synthesize_dataset(const SynthConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  ExperimentSpec spec;
  spec.seed = cfg.seed;
  spec.mock = cfg.mock;
  spec.sampler = cfg.sampler;
  std::optional<Image> base;
  if (cfg.images)
    base = cfg.image.empty() ? reference_image(cfg.mock.width, cfg.mock.height, cfg.seed)
                             : load_image(cfg.image);
  for (int i = 0; i < cfg.pairs; ++i) {
    const std::string prefix = (out_dir / pair_id(i)).string();
    const MockFeatures m = mock_pair(spec, i);
    save_grid(prefix + "_src_det.xsfm", m.src_det.logits());
    save_grid(prefix + "_src_desc.xsfm", m.src_desc.grid());
    save_grid(prefix + "_tgt_det.xsfm", m.tgt_det.logits());
    save_grid(prefix + "_tgt_desc.xsfm", m.tgt_desc.grid());
    write_json_file(prefix + "_h.json", homography_to_json(m.h_gt));
    if (base) {
      const SyntheticPair pair = make_pair(
          *base, {cfg.mock.width, cfg.mock.height, cfg.sampler, cfg.photometric},
          substream_seed(cfg.seed, i));
      save_image(prefix + "_optical.png", pair.source);
      save_image(prefix + "_thermal.png", pair.target);
    }
  }
}

namespace {

void record(GradcheckReport& rep, const GradcheckConfig& cfg, std::string check, int trial,
            std::size_t coord, double analytic, double numeric) {
  const double e = relative_error(analytic, numeric, cfg.floor);
  const bool ok = e < cfg.tolerance;
  rep.entries.push_back({std::move(check), trial, coord, analytic, numeric, e, ok});
  rep.worst = std::max(rep.worst, e);
  rep.passed = rep.passed && ok;
}

Eigen::VectorXd random_vector(int n, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

Eigen::VectorXd softmax_of(const Eigen::VectorXd& x) {
  const Eigen::ArrayXd e = (x.array() - x.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

void check_pipeline(GradcheckReport& rep, const GradcheckConfig& cfg, int trial) {
  ToyConfig tc;
  tc.width = 40;
  tc.height = 32;
  tc.descriptor_length = 16;
  tc.max_translation = 6;
  tc.init_logit_noise = 0.3;
  tc.init_descriptor_noise = 0.2;
  const std::uint64_t seed = substream_seed(cfg.seed, trial);
  const ToyProblem toy = make_toy_problem(tc, seed);
  LossWeights w;
  w.transfer = w.descriptor = w.detector = 1.0;
  const PipelineTape tape = record_forward(toy.init, toy.problem, tc.pipeline, w);
  const PipelineGradients g = grad_total_loss(tape, w);
  std::mt19937_64 rng(substream_seed(seed, 1));
  std::uniform_int_distribution<std::size_t> pick(0, toy.init.size() - 1);
  for (int k = 0; k < cfg.coordinates; ++k) {
    const std::size_t i = pick(rng);
    PipelineParams p = toy.init;
    const double x0 = p[i];
    p[i] = x0 + cfg.step;
    const double fp = record_forward(p, toy.problem, tc.pipeline, w).total;
    p[i] = x0 - cfg.step;
    const double fm = record_forward(p, toy.problem, tc.pipeline, w).total;
    record(rep, cfg, "pipeline", trial, i, g[i], (fp - fm) / (2.0 * cfg.step));
  }
}

void check_stages(GradcheckReport& rep, const GradcheckConfig& cfg, int trial) {
  std::mt19937_64 rng(substream_seed(substream_seed(cfg.seed, trial), 2));
  const double h = cfg.step;

  {  // softmax against a random linear readout
    const Eigen::VectorXd x = random_vector(10, -2.0, 2.0, rng), c = random_vector(10, -1.0, 1.0, rng);
    const Eigen::VectorXd a = softmax_backward(softmax_of(x), c);
    const Eigen::VectorXd n = finite_diff([&](const Eigen::VectorXd& y) { return c.dot(softmax_of(y)); }, x, h);
    for (Eigen::Index i = 0; i < x.size(); ++i) record(rep, cfg, "softmax", trial, i, a[i], n[i]);
  }
  {  // soft-argmax over an 8 x 8 window at T = 0.01
    const double t = 0.01;
    Eigen::Matrix2Xd coords(2, kCellPixels);
    for (int k = 0; k < kCellPixels; ++k) coords.col(k) << k % kCellSize, k / kCellSize;
    const Eigen::VectorXd heat = random_vector(kCellPixels, 0.0, 0.03, rng);
    const Eigen::Vector2d gp = random_vector(2, -1.0, 1.0, rng);
    const Eigen::VectorXd a = softmax_of(heat / t);
    const Eigen::VectorXd an = soft_argmax_backward(coords, a, coords * a, t, gp);
    const Eigen::VectorXd n = finite_diff(
        [&](const Eigen::VectorXd& y) { return gp.dot(coords * softmax_of(y / t)); }, heat, h * 1e-2);
    for (Eigen::Index i = 0; i < heat.size(); ++i) record(rep, cfg, "soft_argmax", trial, i, an[i], n[i]);
  }
  {  // ZNCC in both arguments
    const Eigen::VectorXd a = random_vector(16, -1.0, 1.0, rng), b = random_vector(16, -1.0, 1.0, rng);
    Eigen::VectorXd ga, gb;
    zncc_backward(a, b, 1.0, ga, gb);
    const Eigen::VectorXd na = finite_diff([&](const Eigen::VectorXd& y) { return zncc(y, b); }, a, h);
    const Eigen::VectorXd nb = finite_diff([&](const Eigen::VectorXd& y) { return zncc(a, y); }, b, h);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      record(rep, cfg, "zncc", trial, i, ga[i], na[i]);
      record(rep, cfg, "zncc", trial, a.size() + i, gb[i], nb[i]);
    }
  }
  {  // bilinear heatmap sample in position and values
    Heatmap hm{16, 16, {}};
    const Eigen::VectorXd vals = random_vector(256, 0.0, 1.0, rng);
    hm.values.assign(vals.data(), vals.data() + vals.size());
    const Eigen::Vector2d p = random_vector(2, 1.2, 13.8, rng);
    Heatmap gh{16, 16, std::vector<double>(256, 0.0)};
    const Eigen::Vector2d gp = bilinear_scalar_backward(hm, p, 1.0, gh);
    const Eigen::VectorXd np = finite_diff(
        [&](const Eigen::VectorXd& y) { return bilinear_sample_scalar(hm, y); }, p, h);
    for (int i = 0; i < 2; ++i) record(rep, cfg, "bilinear_scalar", trial, i, gp[i], np[i]);
    const int u0 = static_cast<int>(std::floor(p.x())), v0 = static_cast<int>(std::floor(p.y()));
    for (int dv = 0; dv < 2; ++dv)
      for (int du = 0; du < 2; ++du) {
        const std::size_t idx = static_cast<std::size_t>(v0 + dv) * 16 + u0 + du;
        Heatmap hp = hm, hn = hm;
        hp.values[idx] += h;
        hn.values[idx] -= h;
        record(rep, cfg, "bilinear_scalar", trial, 2 + idx, gh.values[idx],
               (bilinear_sample_scalar(hp, p) - bilinear_sample_scalar(hn, p)) / (2.0 * h));
      }
  }
  {  // bilinear descriptor interpolation in position and grid values
    Grid3 grid(4, 4, 8);
    const Eigen::VectorXd vals = random_vector(static_cast<int>(grid.data.size()), -1.0, 1.0, rng);
    grid.data.assign(vals.data(), vals.data() + vals.size());
    const Eigen::Vector2d p = random_vector(2, 4.1, 26.9, rng);
    const Eigen::VectorXd c = random_vector(8, -1.0, 1.0, rng);
    Grid3 gg(4, 4, 8);
    const Eigen::Vector2d gp = bilinear_descriptor_backward(grid, p, c, gg);
    const Eigen::VectorXd np = finite_diff(
        [&](const Eigen::VectorXd& y) { return c.dot(interpolate_descriptor(grid, y)); }, p, h);
    for (int i = 0; i < 2; ++i) record(rep, cfg, "bilinear_descriptor", trial, i, gp[i], np[i]);
    for (std::size_t idx = 0; idx < grid.data.size(); idx += 7) {
      Grid3 gp2 = grid, gn = grid;
      gp2.data[idx] += h;
      gn.data[idx] -= h;
      record(rep, cfg, "bilinear_descriptor", trial, 2 + idx, gg.data[idx],
             (c.dot(interpolate_descriptor(gp2, p)) - c.dot(interpolate_descriptor(gn, p))) / (2.0 * h));
    }
  }
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckConfig& cfg) {
  if (cfg.trials < 1 || cfg.coordinates < 1 || !(cfg.tolerance > 0.0) || !(cfg.step > 0.0))
    throw Error(ErrorCode::InvalidConfig, "gradcheck needs positive trials, coordinates, tolerance and step");
  GradcheckReport rep;
  for (int t = 0; t < cfg.trials; ++t) {
    check_pipeline(rep, cfg, t);
    check_stages(rep, cfg, t);
  }
  return rep;
}

AveragingSummary run_averaging_demo(int matches, int seeds, const AveragingConfig& cfg) {
  if (seeds < 1) throw Error(ErrorCode::InvalidConfig, "averaging demo needs at least one seed");
  AveragingSummary s;
  for (int k = 1; k <= seeds; ++k) {
    const std::uint64_t seed = static_cast<std::uint64_t>(k);
    const Homography h = sample_homography({}, cfg.width, cfg.height, substream_seed(seed, 0));
    AveragingRun run{seed, averaging_effect_demo(matches, h, seed, AveragingObjective::Corner, cfg),
                     averaging_effect_demo(matches, h, seed, AveragingObjective::Transfer, cfg)};
    if (run.corner.corner_loss_final < 1e-4 && run.corner.mean_transfer_error_final > 5.0)
      ++s.corner_converged_displaced;
    if (run.transfer.mean_transfer_error_final < 0.5) ++s.transfer_converged;
    s.runs.push_back(run);
  }
  return s;
}

json to_json(const AveragingSummary& s) {
  auto report = [](const AveragingReport& r) {
    return json{{"corner_loss_initial", r.corner_loss_initial},
                {"corner_loss_final", r.corner_loss_final},
                {"mean_transfer_error_initial", r.mean_transfer_error_initial},
                {"mean_transfer_error_final", r.mean_transfer_error_final},
                {"iterations", r.iterations}};
  };
  json runs = json::array();
  for (const AveragingRun& r : s.runs)
    runs.push_back({{"seed", r.seed}, {"corner", report(r.corner)}, {"transfer", report(r.transfer)}});
  return {{"seeds", s.runs.size()},
          {"corner_converged_displaced", s.corner_converged_displaced},
          {"transfer_converged", s.transfer_converged},
          {"runs", runs}};
}

}  // namespace xspec
