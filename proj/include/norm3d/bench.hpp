#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "norm3d/datapipe.hpp"
#include "norm3d/net.hpp"
#include "norm3d/trainer.hpp"

namespace norm3d {

/// One comparison grid: the method list, shared network/training settings,
/// the dataset manifest, and the seeds replicated per method.
struct ExperimentPlan {
  std::vector<NormMethod> methods;
  UNetSpec net;          // norm field is overwritten per method entry
  TrainConfig train;     // seed field is overwritten per repetition
  DatasetManifest dataset;
  std::vector<std::uint64_t> seeds{1};
  bool serial = true;
  std::string checkpoint_dir;  // empty: no checkpoints written
};

enum class RunStatus { Ok, Skipped, Failed };

struct SeedOutcome {
  std::uint64_t seed = 0;
  double dice = 0.0;
  bool diverged = false;
  double epoch_seconds = 0.0;    // mean over completed epochs
  double predict_seconds = 0.0;  // total prediction wall time
};

/// One table row: a method aggregated over its seeds.
struct RunReport {
  std::string method;  // none | batch | group | instance
  std::string groups;  // "-" or the group count
  RunStatus status = RunStatus::Ok;
  std::string note;  // skip/failure reason
  std::vector<SeedOutcome> outcomes;
  double epoch_seconds = 0.0;    // median across non-diverged seeds
  double predict_seconds = 0.0;  // median across non-diverged seeds
  double dice_median = 0.0;      // median across non-diverged seeds
  bool any_diverged = false;
};

/// Plain key=value plan file with [dataset], [net], [train] and [methods]
/// sections; see the repository README for the format.
ExperimentPlan parse_plan(const std::string& text);
ExperimentPlan load_plan(const std::string& path);

/// Runs every (method, seed) cell. Timing covers the train and predict
/// phases only; dataset generation happens once up front. A failing run
/// marks its row failed without aborting the plan.
std::vector<RunReport> run_plan(const ExperimentPlan& plan);

enum class ReportFormat { Csv, Markdown };

/// Stable 7-column report: method, groups, epoch_seconds, predict_seconds,
/// dice_median, dice_per_seed, diverged. Markdown renders the timing and
/// accuracy tables separately.
std::string emit_report(const std::vector<RunReport>& reports,
                        ReportFormat format);

}  // namespace norm3d
