#include "norm3d/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "norm3d/bench.hpp"
#include "norm3d/datapipe.hpp"
#include "norm3d/errors.hpp"
#include "norm3d/gradcheck.hpp"
#include "norm3d/objective.hpp"
#include "norm3d/tensor_io.hpp"
#include "norm3d/trainer.hpp"

namespace norm3d {

namespace {

namespace fs = std::filesystem;

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << text;
}

Volume load_volume(const std::string& path) {
  if (path.size() >= 5 && path.substr(path.size() - 5) == ".nrrd") {
    return read_nrrd(path);
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open volume " + path);
  Volume vol;
  vol.intensities = tensor_to_grid(read_tensor<double>(in));
  vol.mask = Grid3(vol.intensities.slices, vol.intensities.height,
                   vol.intensities.width);
  return vol;
}

int run_bench(const std::string& plan_path, const std::string& out_path,
              const std::string& csv_path, bool parallel,
              const std::string& checkpoint_dir) {
  ExperimentPlan plan = load_plan(plan_path);
  plan.serial = !parallel;
  plan.checkpoint_dir = checkpoint_dir;
  if (!checkpoint_dir.empty()) fs::create_directories(checkpoint_dir);

  const std::vector<RunReport> reports = run_plan(plan);
  const std::string markdown = emit_report(reports, ReportFormat::Markdown);
  if (out_path.empty()) {
    std::cout << markdown;
  } else {
    write_text_file(out_path, markdown);
    std::cout << "report written to " << out_path << "\n";
  }
  if (!csv_path.empty()) {
    write_text_file(csv_path, emit_report(reports, ReportFormat::Csv));
  }
  for (const RunReport& r : reports) {
    if (r.status == RunStatus::Failed) {
      std::cerr << r.method << ": " << r.note << "\n";
      return 1;
    }
  }
  return 0;
}

int run_gradcheck() {
  bool all_pass = true;
  for (const GradCheckResult& r : run_gradcheck_suites()) {
    std::cout << r.suite << ": max_rel_err=" << r.max_rel_err
              << " tol=" << r.tolerance << " " << (r.pass ? "PASS" : "FAIL")
              << "\n";
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 1;
}

int run_synth(const std::string& manifest_path, const std::string& out_dir,
              std::uint64_t seed, bool seed_set, std::size_t count,
              bool count_set) {
  DatasetManifest manifest;
  if (!manifest_path.empty()) manifest = load_manifest(manifest_path);
  if (seed_set) manifest.proto.seed = seed;
  if (count_set) manifest.volumes = count;

  fs::create_directories(out_dir);
  write_text_file(out_dir + "/dataset.manifest", manifest_to_text(manifest));
  const std::vector<Volume> volumes = generate_dataset(manifest);
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    char tag[16];
    std::snprintf(tag, sizeof(tag), "vol_%03zu", i);
    {
      std::ofstream out(out_dir + "/" + tag + ".img.t5b", std::ios::binary);
      write_tensor(out, grid_to_tensor(volumes[i].intensities));
    }
    {
      std::ofstream out(out_dir + "/" + tag + ".msk.t5b", std::ios::binary);
      write_tensor(out, grid_to_tensor(volumes[i].mask));
    }
  }
  std::cout << "wrote " << volumes.size() << " volumes to " << out_dir << "\n";
  return 0;
}

int run_predict(const std::string& checkpoint_path,
                const std::string& volume_path, const std::string& mask_path,
                const std::string& out_dir, std::size_t levels,
                std::size_t base_filters, const std::string& norm_name,
                std::size_t groups) {
  NormMethod method;
  if (norm_name == "none") method = NormMethod::none();
  else if (norm_name == "batch") method = NormMethod::batch();
  else if (norm_name == "group") method = NormMethod::group(groups);
  else if (norm_name == "instance") method = NormMethod::instance();
  else throw ConfigError("predict: unknown norm '" + norm_name + "'");

  UNetSpec spec;
  spec.levels = levels;
  spec.base_filters = base_filters;
  spec.norm = method;
  UNet net(spec, /*seed=*/0);
  load_checkpoint(checkpoint_path, net.params(), method);

  const Volume vol = load_volume(volume_path);
  const std::vector<SlabBatch> slabs = slice_slabs(vol);
  std::vector<Tensor5> preds;
  preds.reserve(slabs.size());
  for (const SlabBatch& slab : slabs) preds.push_back(net.infer(slab.data));
  const Grid3 mask = compose_prediction(slabs, preds);

  fs::create_directories(out_dir);
  {
    std::ofstream out(out_dir + "/prediction.msk.t5b", std::ios::binary);
    write_tensor(out, grid_to_tensor(mask));
  }
  for (std::size_t s = 0; s < mask.slices; ++s) {
    char tag[24];
    std::snprintf(tag, sizeof(tag), "slice_%03zu.pgm", s);
    write_slice_pgm(mask, s, out_dir + "/" + tag);
  }
  std::cout << "prediction written to " << out_dir << "\n";

  if (!mask_path.empty()) {
    Volume ref = load_volume(mask_path);
    // A reference mask file stores the labels in its intensity grid.
    Grid3 ref_mask = ref.intensities;
    for (double& v : ref_mask.values) v = v >= 0.5 ? 1.0 : 0.0;
    const double dice =
        dice_hard(grid_to_tensor(mask), grid_to_tensor(ref_mask));
    std::cout << "dice " << dice << "\n";
  }
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Normalization-method comparison bench for 3D segmentation"};
  app.require_subcommand(1);

  // bench
  std::string plan_path, out_path, csv_path, checkpoint_dir;
  bool parallel = false;
  bool serial = false;
  CLI::App* bench = app.add_subcommand("bench", "run an experiment plan");
  bench->add_option("--plan", plan_path, "plan file")->required();
  bench->add_option("--out", out_path, "markdown report path");
  bench->add_option("--csv", csv_path, "CSV report path");
  bench->add_flag("--parallel", parallel, "run methods on worker threads");
  bench->add_flag("--serial", serial, "force serial execution (default)");
  bench->add_option("--checkpoint-dir", checkpoint_dir,
                    "write per-run checkpoints here");

  // gradcheck
  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "run the finite-difference suites");

  // synth
  std::string manifest_path, synth_out = "synth_data";
  std::uint64_t seed = 0;
  std::size_t count = 0;
  CLI::App* synth = app.add_subcommand("synth", "emit a synthetic dataset");
  synth->add_option("--manifest", manifest_path, "dataset manifest");
  synth->add_option("--out-dir", synth_out, "output directory");
  CLI::Option* seed_opt = synth->add_option("--seed", seed, "base seed");
  CLI::Option* count_opt = synth->add_option("--count", count, "volume count");

  // predict
  std::string checkpoint_path, volume_path, mask_path, predict_out = "prediction";
  std::size_t levels = 2, base_filters = 8, groups = 2;
  std::string norm_name = "instance";
  CLI::App* predict =
      app.add_subcommand("predict", "segment a volume with a checkpoint");
  predict->add_option("--checkpoint", checkpoint_path, "checkpoint file")
      ->required();
  predict->add_option("--volume", volume_path, "input volume (.nrrd or .t5b)")
      ->required();
  predict->add_option("--mask", mask_path, "reference mask for a Dice report");
  predict->add_option("--out-dir", predict_out, "output directory");
  predict->add_option("--levels", levels, "network levels");
  predict->add_option("--base-filters", base_filters, "network base filters");
  predict->add_option("--norm", norm_name, "none|batch|group|instance");
  predict->add_option("--groups", groups, "group count for group norm");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (bench->parsed()) {
      return run_bench(plan_path, out_path, csv_path, parallel && !serial,
                       checkpoint_dir);
    }
    if (gradcheck->parsed()) return run_gradcheck();
    if (synth->parsed()) {
      return run_synth(manifest_path, synth_out, seed, seed_opt->count() > 0,
                       count, count_opt->count() > 0);
    }
    if (predict->parsed()) {
      return run_predict(checkpoint_path, volume_path, mask_path, predict_out,
                         levels, base_filters, norm_name, groups);
    }
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace norm3d
