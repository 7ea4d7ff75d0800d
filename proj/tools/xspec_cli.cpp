#include "xspec/error.hpp"
#include "xspec/gradients.hpp"
#include "xspec/harness.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

namespace {

using nlohmann::json;
using namespace xspec;

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << text;
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, path + ": " + e.what());
  }
}

LossWeights loss_weights(const std::string& loss) {
  LossWeights w;
  w.transfer = w.descriptor = w.detector = 0.0;
  if (loss == "transfer") {
    w.transfer = 1.0;
  } else if (loss == "corner") {
    w.corner = 1.0;
  } else if (loss == "frobenius") {
    w.frobenius = 1.0;
  } else {
    w.corner = w.frobenius = w.transfer = w.descriptor = w.detector = 1.0;
  }
  return w;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable cross-spectral homography registration tools"};
  app.require_subcommand(1);

  std::string src_det, src_desc, tgt_det, tgt_desc, pipeline = "weighted", out;
  auto* reg = app.add_subcommand("register", "Register one pair of feature-map files");
  reg->add_option("--source-det", src_det, "Source detection response (.xsfm)")->required();
  reg->add_option("--source-desc", src_desc, "Source descriptor map (.xsfm)")->required();
  reg->add_option("--target-det", tgt_det, "Target detection response (.xsfm)")->required();
  reg->add_option("--target-desc", tgt_desc, "Target descriptor map (.xsfm)")->required();
  reg->add_option("--pipeline", pipeline)->check(CLI::IsMember({"classical", "weighted"}));
  reg->add_option("--out", out, "Result JSON")->required();

  std::string spec_path, out_dir;
  auto* eval = app.add_subcommand("eval", "Run an experiment spec");
  eval->add_option("--spec", spec_path, "Experiment spec JSON")->required()->check(CLI::ExistingFile);
  eval->add_option("--out-dir", out_dir)->required();

  GradcheckConfig gc;
  auto* grad = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  grad->add_option("--trials", gc.trials)->check(CLI::PositiveNumber);
  grad->add_option("--seed", gc.seed);
  grad->add_option("--coordinates", gc.coordinates)->check(CLI::PositiveNumber);
  grad->add_option("--tolerance", gc.tolerance);
  bool verbose = false;
  grad->add_flag("--verbose", verbose, "Print every entry");

  std::string loss = "transfer";
  int steps = 500;
  double lr = 300.0;
  std::uint64_t seed = 1;
  auto* toy = app.add_subcommand("traintoy", "Optimize direct parameters on a toy pair");
  toy->add_option("--loss", loss)->check(CLI::IsMember({"transfer", "corner", "frobenius", "combo"}));
  toy->add_option("--steps", steps)->check(CLI::NonNegativeNumber);
  toy->add_option("--lr", lr)->check(CLI::PositiveNumber);
  toy->add_option("--seed", seed);
  toy->add_option("--out", out, "Loss curve CSV")->required();

  int matches = 50, seeds = 20;
  auto* avg = app.add_subcommand("demo-averaging", "Corner-loss versus transfer-loss optimization of match positions");
  avg->add_option("--matches", matches)->check(CLI::Range(8, 100000));
  avg->add_option("--seeds", seeds)->check(CLI::PositiveNumber);
  avg->add_option("--out", out, "Report JSON")->required();

  std::string config_path;
  auto* synth = app.add_subcommand("synth", "Write mock feature maps and ground truth");
  synth->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
  synth->add_option("--out-dir", out_dir)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*reg) {
      const RegistrationResult r =
          register_pair(src_det, src_desc, tgt_det, tgt_desc, parse_pipeline(pipeline));
      write_text(out, registration_result_to_json(r).dump(2) + "\n");
      std::printf("%d matches, %d inliers\n", static_cast<int>(r.matches.size()),
                  r.diagnostics.inlier_count);
    } else if (*eval) {
      const ExperimentSpec spec = load_experiment_spec(spec_path);
      const ExperimentResult result = run_experiment(spec);
      write_experiment_outputs(out_dir, spec, result);
      std::printf("%d pairs, %d failures\n", result.report.pairs, result.report.failures);
      for (std::size_t i = 0; i < result.report.thresholds.size(); ++i)
        std::printf("ACE < %g px: %.4f\n", result.report.thresholds[i], result.report.success[i]);
    } else if (*grad) {
      const GradcheckReport rep = run_gradcheck(gc);
      std::map<std::string, std::pair<double, int>> worst;  // check -> (worst, failures)
      for (const GradcheckEntry& e : rep.entries) {
        auto& w = worst[e.check];
        w.first = std::max(w.first, e.rel_error);
        w.second += e.passed ? 0 : 1;
        if (verbose || !e.passed)
          std::printf("%s trial %d coord %zu analytic %.10g numeric %.10g rel %.3g%s\n",
                      e.check.c_str(), e.trial, e.coordinate, e.analytic, e.numeric, e.rel_error,
                      e.passed ? "" : "  FAIL");
      }
      for (const auto& [name, w] : worst)
        std::printf("%-20s worst %.3g  failures %d\n", name.c_str(), w.first, w.second);
      std::printf("%s (%zu checks, tolerance %g)\n", rep.passed ? "PASS" : "FAIL",
                  rep.entries.size(), gc.tolerance);
      return rep.passed ? 0 : 1;
    } else if (*toy) {
      const ToyConfig cfg;
      const ToyProblem problem = make_toy_problem(cfg, seed);
      const TrainState st = toy_train(problem, cfg, loss_weights(loss), steps, lr);
      std::ofstream csv(out);
      if (!csv) throw Error(ErrorCode::IoError, "cannot write " + out);
      write_loss_curve_csv(csv, st.history);
      const LossCurveRow& first = st.history.front();
      const LossCurveRow& last = st.history.back();
      std::printf("total %.6g -> %.6g, mean reprojection %.3f -> %.3f px\n", first.total,
                  last.total, first.mean_reprojection, last.mean_reprojection);
    } else if (*avg) {
      const AveragingSummary s = run_averaging_demo(matches, seeds);
      write_text(out, to_json(s).dump(2) + "\n");
      std::printf("corner: %d/%d converged with mean transfer error > 5 px\n",
                  s.corner_converged_displaced, seeds);
      std::printf("transfer: %d/%d reached mean transfer error < 0.5 px\n", s.transfer_converged,
                  seeds);
    } else if (*synth) {
      const SynthConfig cfg = synth_config_from_json(read_json(config_path));
      synthesize_dataset(cfg, out_dir);
      std::printf("wrote %d pairs to %s\n", cfg.pairs, out_dir.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
