#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>

#include "uniworld/errors.hpp"
#include "uniworld/experiment.hpp"

using namespace uniworld;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config()
{
  ExperimentConfig c;
  c.world.n_categories = 12;
  c.benchmark.train_images_per_source = 16;
  c.benchmark.test_images = 8;
  c.train.epochs = 1;
  c.seeds = {0};
  return c;
}

fs::path scratch(const std::string & name)
{
  const auto p = fs::temp_directory_path() / ("uniworld_experiment_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunRow synthetic_row(const std::string & arm, const std::string & variant, std::uint64_t seed,
                     std::mt19937_64 & rng)
{
  std::uniform_int_distribution<int> u(0, 1000);
  RunRow r{arm, variant, seed, {}};
  r.eval.ap = u(rng) / 1000.0;
  r.eval.ap50 = u(rng) / 1000.0;
  r.eval.ap_rare = u(rng) / 1000.0;
  r.eval.ap_common = u(rng) / 1000.0;
  r.eval.ap_frequent = u(rng) / 1000.0;
  r.eval.ap_base = u(rng) / 1000.0;
  r.eval.ap_novel = u(rng) / 1000.0;
  r.eval.ar = {{1, u(rng) / 1000.0}, {10, u(rng) / 1000.0}, {100, u(rng) / 1000.0}};
  return r;
}

void write_run_dir(const fs::path & dir, const ExperimentConfig & cfg, const std::vector<RunRow> & rows)
{
  fs::create_directories(dir / "structure");
  std::ofstream(dir / "config.json") << to_json(cfg).dump(1);
  write_metrics_csv(dir / "structure" / "metrics.csv", rows);
}

}  // namespace

TEST_CASE("experiment config json round trip and validation")
{
  auto c = tiny_config();
  c.seeds = {4, 7};
  c.train.structure = Structure::unified;
  c.inference.gamma = 0.9;
  c.eval.rare_max = 3;
  const auto back = experiment_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  // Missing fields keep their defaults.
  const auto d = experiment_config_from_json(nlohmann::json{{"seeds", {9}}});
  CHECK(d.seeds == std::vector<std::uint64_t>{9});
  CHECK(d.world.n_categories == WorldSpec{}.n_categories);

  auto bad = tiny_config();
  bad.benchmark.overlap = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.seeds.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(arm_from_string("cln") == Arm::cln);
  CHECK_THROWS_AS(arm_from_string("mosaic"), ConfigError);
}

TEST_CASE("seeds from the environment")
{
  unsetenv("UNIWORLD_SEED");
  CHECK_FALSE(seeds_from_env().has_value());
  setenv("UNIWORLD_SEED", "3", 1);
  CHECK(*seeds_from_env() == std::vector<std::uint64_t>{3});
  setenv("UNIWORLD_SEED", "0,1,2", 1);
  CHECK(*seeds_from_env() == std::vector<std::uint64_t>{0, 1, 2});
  setenv("UNIWORLD_SEED", "1,x", 1);
  CHECK_THROWS_AS(seeds_from_env(), ConfigError);
  unsetenv("UNIWORLD_SEED");
}

TEST_CASE("median examples")
{
  CHECK(median({3.0}) == 3.0);
  CHECK(median({5.0, 1.0, 3.0}) == 3.0);
  CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
  CHECK_THROWS(median({}));
}

TEST_CASE("medians over five seeds match a recomputation from the CSV")
{
  std::mt19937_64 rng(1);
  std::vector<RunRow> rows;
  for (std::uint64_t s = 0; s < 5; ++s) {
    for (const char * v : {"separate", "unified", "partitioned"}) rows.push_back(synthetic_row("structure", v, s, rng));
  }
  const auto dir = scratch("medians");
  write_metrics_csv(dir / "metrics.csv", rows);

  // Oracle: parse the raw file and take the middle of each sorted column.
  std::ifstream in(dir / "metrics.csv");
  std::string line;
  std::getline(in, line);
  std::map<std::string, std::vector<std::vector<double>>> cols;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell, variant;
    std::getline(ss, cell, ',');
    std::getline(ss, variant, ',');
    std::getline(ss, cell, ',');
    std::vector<double> vals;
    while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
    auto & c = cols[variant];
    c.resize(vals.size());
    for (std::size_t k = 0; k < vals.size(); ++k) c[k].push_back(vals[k]);
  }
  const auto med = medians(read_metrics_csv(dir / "metrics.csv"));
  REQUIRE(med.size() == 3);
  CHECK(med[0].variant == "separate");
  CHECK(med[2].variant == "partitioned");
  for (const auto & m : med) {
    CHECK(m.n_seeds == 5);
    auto & c = cols.at(m.variant);
    REQUIRE(c.size() == m.values.size());
    for (std::size_t k = 0; k < c.size(); ++k) {
      std::sort(c[k].begin(), c[k].end());
      CHECK(m.values[k] == c[k][2]);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("metrics csv round trip and errors")
{
  std::mt19937_64 rng(2);
  std::vector<RunRow> rows{synthetic_row("cln", "cln", 3, rng), synthetic_row("cln", "objectness", 3, rng)};
  const auto dir = scratch("csv");
  write_metrics_csv(dir / "m.csv", rows);
  const auto back = read_metrics_csv(dir / "m.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[1].variant == "objectness");
  CHECK(back[1].seed == 3);
  CHECK(eval_csv_values(back[0].eval) == eval_csv_values(rows[0].eval));
  CHECK_THROWS_AS(read_metrics_csv(dir / "absent.csv"), FormatError);
  std::ofstream(dir / "short.csv") << "arm,variant,seed\ncln,cln,1,0.5\n";
  CHECK_THROWS_AS(read_metrics_csv(dir / "short.csv"), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("report from one run, a missing file and mixed benchmarks")
{
  std::mt19937_64 rng(3);
  const auto root = scratch("report");
  const auto cfg = tiny_config();
  write_run_dir(root / "a", cfg, {synthetic_row("structure", "unified", 0, rng)});
  write_report({root / "a"}, root / "out");
  std::ifstream md(root / "out" / "report.md");
  std::stringstream ss;
  ss << md.rdbuf();
  const std::string text = ss.str();
  CHECK(text.find("| structure | unified | 1 |") != std::string::npos);
  CHECK(fs::exists(root / "out" / "structure.svg"));

  fs::create_directories(root / "empty");
  std::ofstream(root / "empty" / "config.json") << to_json(cfg).dump();
  try {
    write_report({root / "empty"}, root / "out2");
    FAIL("expected FormatError");
  } catch (const FormatError & e) {
    CHECK(std::string(e.what()).find("empty") != std::string::npos);
  }

  auto other = cfg;
  other.benchmark.overlap = 0.0;
  write_run_dir(root / "b", other, {synthetic_row("structure", "unified", 1, rng)});
  CHECK_THROWS_AS(write_report({root / "a", root / "b"}, root / "out3"), ConfigError);

  // A different world seed is the same benchmark family.
  auto seeded = cfg;
  seeded.world.seed = 42;
  write_run_dir(root / "c", seeded, {synthetic_row("structure", "unified", 2, rng)});
  CHECK_NOTHROW(write_report({root / "a", root / "c"}, root / "out4"));
  fs::remove_all(root);
}

TEST_CASE("svg chart is a standalone document")
{
  std::mt19937_64 rng(4);
  const auto med = medians({synthetic_row("cln", "cln", 0, rng), synthetic_row("cln", "objectness", 0, rng)});
  const auto svg = bar_chart_svg("cln", med);
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(svg.find("objectness") != std::string::npos);
}

TEST_CASE("run_seed produces the arm variants on shared data")
{
  const auto cfg = tiny_config();
  const Benchmark bm = benchmark_for_seed(cfg, 0);
  const auto dir = scratch("run_seed");
  const auto rows = run_seed(cfg, {Arm::calibration, Arm::structure, Arm::cln}, bm, 0, dir);
  std::vector<std::string> names;
  for (const auto & r : rows) names.push_back(r.arm + "/" + r.variant);
  CHECK(names == std::vector<std::string>{"calibration/calibrated", "calibration/uncalibrated",
                                          "structure/separate", "structure/unified", "structure/partitioned",
                                          "cln/objectness", "cln/localization", "cln/cln"});
  // The partitioned decoupled system is trained once and shared by three arms.
  CHECK(fs::exists(dir / "systems" / "partitioned" / "checkpoint_partitioned.json"));
  CHECK(fs::exists(dir / "calibration" / "prior.json"));
  CHECK(rows[4].eval.ap == rows[7].eval.ap);
  for (const auto & r : rows) {
    CHECK(r.eval.ap >= 0.0);
    CHECK(r.eval.ap <= 1.0);
  }
  // Same seed, same numbers.
  const auto again = run_seed(cfg, {Arm::calibration}, bm, 0);
  CHECK(again[0].eval.ap == rows[0].eval.ap);
  CHECK(again[1].eval.ap == rows[1].eval.ap);
  fs::remove_all(dir);
}
