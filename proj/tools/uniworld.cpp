// Command-line driver: gen-data, run, report, eval.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "uniworld/errors.hpp"
#include "uniworld/experiment.hpp"

namespace fs = std::filesystem;
using namespace uniworld;

namespace {

struct CommonFlags
{
  std::string config_file;
  std::vector<std::uint64_t> seeds;
  int n_sources = -1;
  double overlap = -1.0;
  double novel_fraction = -1.0;
  int epochs = -1;
};

void add_common(CLI::App * cmd, CommonFlags & f)
{
  cmd->add_option("-c,--config", f.config_file, "experiment config JSON");
  cmd->add_option("--seeds", f.seeds, "seed list (overrides the config)");
  cmd->add_option("--n-sources", f.n_sources, "number of training sources");
  cmd->add_option("--overlap", f.overlap, "pairwise label-space overlap");
  cmd->add_option("--novel-fraction", f.novel_fraction, "held-out category fraction");
  cmd->add_option("--epochs", f.epochs, "training epochs");
}

ExperimentConfig resolve(const CommonFlags & f)
{
  ExperimentConfig cfg;
  if (!f.config_file.empty()) {
    std::ifstream is(f.config_file);
    if (!is) {
      throw ConfigError("cannot read config " + f.config_file);
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception & e) {
      throw ConfigError(f.config_file + ": " + e.what());
    }
    cfg = experiment_config_from_json(j);
  }
  if (!f.seeds.empty()) {
    cfg.seeds = f.seeds;
  }
  if (auto env = seeds_from_env()) {
    cfg.seeds = *env;
  }
  if (f.n_sources >= 0) {
    cfg.benchmark.n_sources = f.n_sources;
  }
  if (f.overlap >= 0.0) {
    cfg.benchmark.overlap = f.overlap;
  }
  if (f.novel_fraction >= 0.0) {
    cfg.benchmark.novel_fraction = f.novel_fraction;
  }
  if (f.epochs >= 0) {
    cfg.train.epochs = f.epochs;
  }
  cfg.validate();
  return cfg;
}

void write_json(const fs::path & file, const nlohmann::json & j)
{
  fs::create_directories(file.parent_path());
  std::ofstream os(file);
  os << j.dump(2) << "\n";
}

bool non_empty_dir(const fs::path & p)
{
  return fs::is_directory(p) && fs::directory_iterator(p) != fs::directory_iterator();
}

int cmd_gen_data(const CommonFlags & f, const std::string & out, bool force)
{
  const ExperimentConfig cfg = resolve(f);
  const fs::path root(out);
  if (non_empty_dir(root)) {
    if (!force) {
      throw ConfigError("output directory " + out + " is not empty (use --force)");
    }
    fs::remove_all(root);
  }
  for (auto seed : cfg.seeds) {
    WorldSpec w = cfg.world;
    w.seed = seed;
    const Benchmark bm = make_benchmark(w, cfg.benchmark);
    write_benchmark(root / ("seed" + std::to_string(seed)), bm, w, cfg.benchmark);
    std::cerr << "gen-data: seed " << seed << " -> " << (root / ("seed" + std::to_string(seed))).string()
              << "\n";
  }
  write_json(root / "config.json", to_json(cfg));
  return 0;
}

int cmd_run(const CommonFlags & f, std::vector<std::string> arm_names, std::string out,
            const std::string & data_dir, bool save_detections)
{
  ExperimentConfig cfg = resolve(f);
  if (!out.empty()) {
    cfg.output_dir = out;
  }
  cfg.save_detections = cfg.save_detections || save_detections;
  if (arm_names.empty()) {
    arm_names = {"structure", "decouple", "cln", "calibration"};
  }
  std::vector<Arm> arms;
  for (const auto & a : arm_names) {
    arms.push_back(arm_from_string(a));
  }
  const fs::path root(cfg.output_dir);
  write_json(root / "config.json", to_json(cfg));

  std::vector<RunRow> rows;
  for (auto seed : cfg.seeds) {
    std::string stage = "data";
    try {
      Benchmark bm;
      if (!data_dir.empty()) {
        bm = read_benchmark(fs::path(data_dir) / ("seed" + std::to_string(seed)));
      } else {
        bm = benchmark_for_seed(cfg, seed);
      }
      stage = "train/infer/evaluate";
      auto r = run_seed(cfg, arms, bm, seed, root / ("seed" + std::to_string(seed)),
                        [](const std::string & msg) { std::cerr << msg << "\n"; });
      rows.insert(rows.end(), r.begin(), r.end());
    } catch (const std::exception & e) {
      std::cerr << "run: seed " << seed << " failed during " << stage << ": " << e.what() << "\n";
      std::ofstream(root / "PARTIAL") << "seed " << seed << " failed during " << stage << "\n";
      return 1;
    }
  }
  for (Arm a : arms) {
    std::vector<RunRow> sub;
    for (const auto & r : rows) {
      if (r.arm == to_string(a)) {
        sub.push_back(r);
      }
    }
    write_metrics_csv(root / to_string(a) / "metrics.csv", sub);
    std::ofstream(root / to_string(a) / "summary.md") << summary_markdown(medians(sub));
    std::cout << "## " << to_string(a) << "\n" << summary_markdown(medians(sub)) << "\n";
  }
  return 0;
}

int cmd_eval(const std::string & detections, const std::string & data_dir, const std::string & out)
{
  const Benchmark bm = read_benchmark(data_dir);
  const auto by_id = read_detections_jsonl(detections);
  std::vector<std::vector<ScoredDetection>> dets;
  for (const auto & img : bm.test.images) {
    auto it = by_id.find(img.image_id);
    dets.push_back(it == by_id.end() ? std::vector<ScoredDetection>{} : it->second);
  }
  const auto groups = make_groups(bm.test_space, bm.train, bm.base, bm.novel);
  const auto result = evaluate(dets, bm.test, bm.test_space, groups);
  const auto j = to_json(result);
  if (!out.empty()) {
    write_json(out, j);
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char ** argv)
{
  CLI::App app{"Open-world detection on a synthetic multi-source benchmark"};
  app.require_subcommand(1);

  CommonFlags gen_flags;
  std::string gen_out = "data";
  bool force = false;
  auto * gen = app.add_subcommand("gen-data", "generate benchmark datasets, one directory per seed");
  add_common(gen, gen_flags);
  gen->add_option("-o,--out", gen_out, "output directory");
  gen->add_flag("--force", force, "replace a non-empty output directory");

  CommonFlags run_flags;
  std::vector<std::string> arms;
  std::string run_out, run_data;
  bool save_det = false;
  auto * run = app.add_subcommand("run", "train, infer and evaluate ablation arms");
  add_common(run, run_flags);
  run->add_option("-a,--arm", arms, "structure, decouple, cln or calibration (repeatable)");
  run->add_option("-o,--out", run_out, "run directory (overrides output_dir)");
  run->add_option("-d,--data", run_data, "directory written by gen-data");
  run->add_flag("--save-detections", save_det, "write detection JSONL files");

  std::vector<std::string> report_dirs;
  std::string report_out = "report";
  auto * report = app.add_subcommand("report", "aggregate run directories into report.md and SVG charts");
  report->add_option("runs", report_dirs, "run directories")->required();
  report->add_option("-o,--out", report_out, "report directory");

  std::string eval_det, eval_data, eval_out;
  auto * ev = app.add_subcommand("eval", "evaluate a detection JSONL file against a benchmark");
  ev->add_option("detections", eval_det, "detections JSONL")->required();
  ev->add_option("-d,--data", eval_data, "benchmark directory (one seed)")->required();
  ev->add_option("-o,--out", eval_out, "write the result JSON here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      return cmd_gen_data(gen_flags, gen_out, force);
    }
    if (*run) {
      return cmd_run(run_flags, arms, run_out, run_data, save_det);
    }
    if (*report) {
      std::vector<fs::path> dirs(report_dirs.begin(), report_dirs.end());
      write_report(dirs, report_out);
      std::cerr << "report: wrote " << (fs::path(report_out) / "report.md").string() << "\n";
      return 0;
    }
    if (*ev) {
      return cmd_eval(eval_det, eval_data, eval_out);
    }
  } catch (const ConfigError & e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception & e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
