#include "norm3d/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>

#include "norm3d/errors.hpp"

namespace norm3d {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

NormMethod parse_method(const std::string& text) {
  const std::string t = trim(text);
  if (t == "none") return NormMethod::none();
  if (t == "batch") return NormMethod::batch();
  if (t == "instance") return NormMethod::instance();
  const auto colon = t.find(':');
  if (t.rfind("group", 0) == 0 && colon != std::string::npos) {
    return NormMethod::group(std::stoull(t.substr(colon + 1)));
  }
  throw ConfigError("plan: unknown method '" + t + "'");
}

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  if (values.size() % 2 == 1) return values[mid];
  return 0.5 * (values[mid - 1] + values[mid]);
}

std::string format_double(double v, int precision) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(precision) << v;
  return out.str();
}

}  // namespace

ExperimentPlan parse_plan(const std::string& text) {
  ExperimentPlan plan;
  plan.methods.clear();
  std::string section;
  std::istringstream in(text);
  std::string line;
  std::map<std::string, std::string> dataset_kv;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("plan: expected key=value, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));

    if (section == "dataset") {
      if (key == "manifest") {
        plan.dataset = load_manifest(value);
      } else {
        dataset_kv[key] = value;
      }
    } else if (section == "net") {
      if (key == "levels") plan.net.levels = std::stoull(value);
      else if (key == "base_filters") plan.net.base_filters = std::stoull(value);
      else if (key == "epsilon") plan.net.norm.epsilon = std::stod(value);
      else if (key == "momentum") plan.net.bn_momentum = std::stod(value);
      else if (key == "deterministic") plan.net.deterministic = (value == "true" || value == "1");
      else throw ConfigError("plan: unknown [net] key '" + key + "'");
    } else if (section == "train") {
      if (key == "epochs") plan.train.epochs = std::stoull(value);
      else if (key == "learning_rate") plan.train.learning_rate = std::stod(value);
      else if (key == "batch_size") plan.train.batch_size = std::stoull(value);
      else if (key == "divergence_threshold") plan.train.divergence_threshold = std::stod(value);
      else if (key == "optimizer") {
        if (value == "adam") plan.train.optimizer = OptimizerKind::Adam;
        else if (value.rfind("sgd", 0) == 0) {
          plan.train.optimizer = OptimizerKind::Sgd;
          const auto colon = value.find(':');
          if (colon != std::string::npos) {
            plan.train.sgd_momentum = std::stod(value.substr(colon + 1));
          }
        } else throw ConfigError("plan: unknown optimizer '" + value + "'");
      } else if (key == "seeds") {
        plan.seeds.clear();
        std::istringstream vs(value);
        std::string item;
        while (std::getline(vs, item, ',')) {
          plan.seeds.push_back(std::stoull(trim(item)));
        }
        if (plan.seeds.empty()) throw ConfigError("plan: empty seed list");
      } else throw ConfigError("plan: unknown [train] key '" + key + "'");
    } else if (section == "methods") {
      if (key == "method") plan.methods.push_back(parse_method(value));
      else throw ConfigError("plan: unknown [methods] key '" + key + "'");
    } else {
      throw ConfigError("plan: key '" + key + "' outside a known section");
    }
  }
  if (!dataset_kv.empty()) {
    // Inline [dataset] keys override the loaded manifest (or the defaults).
    std::ostringstream merged;
    merged << manifest_to_text(plan.dataset);
    for (const auto& [k, v] : dataset_kv) merged << k << " = " << v << "\n";
    plan.dataset = parse_manifest(merged.str());
  }
  if (plan.methods.empty()) {
    throw ConfigError("plan: [methods] section lists no methods");
  }
  return plan;
}

ExperimentPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("plan: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_plan(buf.str());
}

namespace {

SeedOutcome run_one(const ExperimentPlan& plan, const NormMethod& method,
                    std::uint64_t seed, const std::vector<Volume>& dataset) {
  UNetSpec net_spec = plan.net;
  net_spec.norm = method;
  net_spec.norm.epsilon = plan.net.norm.epsilon;
  UNet net(net_spec, seed);

  TrainConfig config = plan.train;
  config.seed = seed;
  const std::vector<EpochRecord> records = train(net, dataset, config);

  SeedOutcome outcome;
  outcome.seed = seed;
  outcome.diverged = !records.empty() && records.back().diverged;

  double epoch_total = 0.0;
  std::size_t full_epochs = 0;
  for (const EpochRecord& r : records) {
    if (r.diverged) continue;  // partial epoch, not a clean timing sample
    epoch_total += r.seconds;
    ++full_epochs;
  }
  outcome.epoch_seconds =
      full_epochs > 0 ? epoch_total / static_cast<double>(full_epochs) : 0.0;

  if (!outcome.diverged) {
    const EvalResult eval_result = evaluate(net, dataset);
    outcome.dice = eval_result.mean_dice;
    outcome.predict_seconds = eval_result.seconds;
    if (!plan.checkpoint_dir.empty()) {
      const std::string path = plan.checkpoint_dir + "/" +
                               net_spec.norm.label() + "_seed" +
                               std::to_string(seed) + ".ckpt";
      save_checkpoint(net.params(), net_spec.norm, path);
    }
  }
  return outcome;
}

}  // namespace

std::vector<RunReport> run_plan(const ExperimentPlan& plan) {
  if (plan.methods.empty()) throw ConfigError("run_plan: no methods");
  const std::vector<Volume> dataset = generate_dataset(plan.dataset);
  if (dataset.empty()) throw ConfigError("run_plan: dataset is empty");

  const std::vector<std::size_t> site_channels =
      UNet::norm_site_channels(plan.net.levels, plan.net.base_filters);

  std::vector<RunReport> reports(plan.methods.size());
  for (std::size_t mi = 0; mi < plan.methods.size(); ++mi) {
    const NormMethod& method = plan.methods[mi];
    RunReport& report = reports[mi];
    switch (method.kind) {
      case NormKind::None: report.method = "none"; report.groups = "-"; break;
      case NormKind::Batch: report.method = "batch"; report.groups = "-"; break;
      case NormKind::Group:
        report.method = "group";
        report.groups = std::to_string(method.groups);
        break;
      case NormKind::Instance:
        report.method = "instance";
        report.groups = "-";
        break;
    }
    const bool compatible =
        std::all_of(site_channels.begin(), site_channels.end(),
                    [&](std::size_t c) { return method.compatible_with(c); });
    if (!compatible) {
      report.status = RunStatus::Skipped;
      report.note = "skipped: incompatible G";
    }
  }

  auto run_method = [&](std::size_t mi) {
    RunReport& report = reports[mi];
    if (report.status == RunStatus::Skipped) return;
    for (std::uint64_t seed : plan.seeds) {
      try {
        report.outcomes.push_back(
            run_one(plan, plan.methods[mi], seed, dataset));
      } catch (const std::exception& err) {
        report.status = RunStatus::Failed;
        report.note = std::string("failed: ") + err.what();
        return;
      }
    }
    std::vector<double> dices, epoch_secs, predict_secs;
    for (const SeedOutcome& o : report.outcomes) {
      report.any_diverged = report.any_diverged || o.diverged;
      if (o.diverged) continue;
      dices.push_back(o.dice);
      epoch_secs.push_back(o.epoch_seconds);
      predict_secs.push_back(o.predict_seconds);
    }
    report.dice_median = median(dices);
    report.epoch_seconds = median(epoch_secs);
    report.predict_seconds = median(predict_secs);
  };

  if (plan.serial) {
    for (std::size_t mi = 0; mi < plan.methods.size(); ++mi) run_method(mi);
  } else {
    // Parallel mode trades clean clocks for wall time; each run owns its
    // parameters and RNG so results are unchanged.
    std::vector<std::thread> workers;
    workers.reserve(plan.methods.size());
    for (std::size_t mi = 0; mi < plan.methods.size(); ++mi) {
      workers.emplace_back(run_method, mi);
    }
    for (std::thread& t : workers) t.join();
  }
  return reports;
}

namespace {

std::string dice_cell(const RunReport& r) {
  if (r.status == RunStatus::Skipped) return r.note;
  if (r.status == RunStatus::Failed) return r.note;
  bool all_diverged = !r.outcomes.empty();
  for (const SeedOutcome& o : r.outcomes) all_diverged = all_diverged && o.diverged;
  if (all_diverged) return "div.";
  return format_double(r.dice_median, 4);
}

std::string dice_per_seed_cell(const RunReport& r) {
  if (r.status != RunStatus::Ok) return "-";
  std::string out;
  for (std::size_t i = 0; i < r.outcomes.size(); ++i) {
    if (i > 0) out += ";";
    out += r.outcomes[i].diverged ? "div."
                                  : format_double(r.outcomes[i].dice, 4);
  }
  return out;
}

std::string seconds_cell(const RunReport& r, double value) {
  if (r.status != RunStatus::Ok) return "-";
  return format_double(value, 3);
}

}  // namespace

std::string emit_report(const std::vector<RunReport>& reports,
                        ReportFormat format) {
  if (reports.empty()) throw UsageError("emit_report: no reports");

  if (format == ReportFormat::Csv) {
    std::ostringstream out;
    out << "method,groups,epoch_seconds,predict_seconds,dice_median,"
           "dice_per_seed,diverged\n";
    for (const RunReport& r : reports) {
      out << r.method << "," << r.groups << ","
          << seconds_cell(r, r.epoch_seconds) << ","
          << seconds_cell(r, r.predict_seconds) << "," << dice_cell(r) << ","
          << dice_per_seed_cell(r) << ","
          << (r.status == RunStatus::Skipped ? "skipped"
              : r.status == RunStatus::Failed ? "failed"
              : r.any_diverged ? "true"
                               : "false")
          << "\n";
    }
    return out.str();
  }

  std::ostringstream out;
  out << "## Timing\n\n";
  out << "| Method [groups] | Time per epoch [s] | Prediction time [s] |\n";
  out << "|---|---|---|\n";
  for (const RunReport& r : reports) {
    std::string label = r.method;
    if (r.groups != "-") label += " [G=" + r.groups + "]";
    out << "| " << label << " | " << seconds_cell(r, r.epoch_seconds) << " | "
        << seconds_cell(r, r.predict_seconds) << " |\n";
  }
  out << "\n## Accuracy\n\n";
  out << "| Method | Group size | Dice coef. | Dice per seed | Diverged |\n";
  out << "|---|---|---|---|---|\n";
  for (const RunReport& r : reports) {
    out << "| " << r.method << " | " << r.groups << " | " << dice_cell(r)
        << " | " << dice_per_seed_cell(r) << " | "
        << (r.status == RunStatus::Skipped ? "-"
            : r.status == RunStatus::Failed ? "-"
            : r.any_diverged ? "true"
                             : "false")
        << " |\n";
  }
  return out.str();
}

}  // namespace norm3d
