#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "uniworld/evaluation.hpp"
#include "uniworld/inference.hpp"
#include "uniworld/synthworld.hpp"
#include "uniworld/training.hpp"

namespace uniworld {

struct ExperimentConfig
{
  WorldSpec world;
  BenchmarkSpec benchmark;
  TrainConfig train;
  InferenceConfig inference;
  FrequencyThresholds eval;
  std::string output_dir = "runs/default";
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  bool save_detections = false;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig & c);
/// Missing fields keep their defaults.
ExperimentConfig experiment_config_from_json(const nlohmann::json & j);

/// Parses UNIWORLD_SEED ("3" or "0,1,2"); nullopt when unset or empty.
std::optional<std::vector<std::uint64_t>> seeds_from_env();

enum class Arm
{
  structure,
  decouple,
  cln,
  calibration,
};

std::string to_string(Arm a);
Arm arm_from_string(const std::string & s);

/// One evaluated variant of an arm for one seed.
struct RunRow
{
  std::string arm;
  std::string variant;
  std::uint64_t seed = 0;
  EvalResult eval;
};

/// Benchmark for one seed: world and benchmark specs with the world seed replaced.
Benchmark benchmark_for_seed(const ExperimentConfig & cfg, std::uint64_t seed);

/// Progress callback receiving short status lines.
using Progress = std::function<void(const std::string &)>;

/// Trains and evaluates every variant of `arms` for one seed on `bm`. Systems needed by several
/// arms are trained once. When `seed_dir` is given, checkpoints, training logs, priors,
/// evaluations and (optionally) detections are written below it.
std::vector<RunRow> run_seed(const ExperimentConfig & cfg, const std::vector<Arm> & arms,
                             const Benchmark & bm, std::uint64_t seed,
                             const std::optional<std::filesystem::path> & seed_dir = std::nullopt,
                             const Progress & progress = {});

/// metrics.csv: arm,variant,seed followed by eval_csv_header().
void write_metrics_csv(const std::filesystem::path & file, const std::vector<RunRow> & rows);
std::vector<RunRow> read_metrics_csv(const std::filesystem::path & file);

/// Median of each metric over seeds, per (arm, variant), in first-appearance order.
struct MedianRow
{
  std::string arm;
  std::string variant;
  int n_seeds = 0;
  std::vector<double> values;  ///< aligned with eval_csv_header()
};

std::vector<MedianRow> medians(const std::vector<RunRow> & rows);
double median(std::vector<double> v);

/// Markdown comparison table of medians.
std::string summary_markdown(const std::vector<MedianRow> & rows);

/// Grouped bar chart (base vs novel AP per variant) as a standalone SVG document.
std::string bar_chart_svg(const std::string & title, const std::vector<MedianRow> & rows);

/// Writes report.md and one SVG per arm into `out_dir` from completed run directories.
/// Throws ConfigError when the runs were made on different benchmarks and FormatError naming
/// the file when a metrics file is missing.
void write_report(const std::vector<std::filesystem::path> & run_dirs,
                  const std::filesystem::path & out_dir);

}  // namespace uniworld
