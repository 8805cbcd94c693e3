#include "uniworld/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "uniworld/errors.hpp"

namespace uniworld {

using nlohmann::json;
namespace fs = std::filesystem;

void ExperimentConfig::validate() const
{
  world.validate();
  benchmark.validate();
  plan_split(world.n_categories, benchmark);
  train.validate();
  inference.validate();
  if (seeds.empty()) {
    throw ConfigError("experiment: seeds must be non-empty");
  }
  if (eval.rare_max < 0 || eval.common_max < eval.rare_max) {
    throw ConfigError("experiment: need 0 <= rare_max <= common_max");
  }
}

json to_json(const ExperimentConfig & c)
{
  return json{{"world", to_json(c.world)},
              {"benchmark", to_json(c.benchmark)},
              {"train", to_json(c.train)},
              {"inference", to_json(c.inference)},
              {"eval", {{"rare_max", c.eval.rare_max}, {"common_max", c.eval.common_max}}},
              {"output_dir", c.output_dir},
              {"seeds", c.seeds},
              {"save_detections", c.save_detections}};
}

ExperimentConfig experiment_config_from_json(const json & j)
{
  try {
    ExperimentConfig c;
    if (j.contains("world")) {
      c.world = world_spec_from_json(j.at("world"));
    }
    if (j.contains("benchmark")) {
      c.benchmark = benchmark_spec_from_json(j.at("benchmark"));
    }
    if (j.contains("train")) {
      c.train = train_config_from_json(j.at("train"));
    }
    if (j.contains("inference")) {
      c.inference = inference_config_from_json(j.at("inference"));
    }
    if (j.contains("eval")) {
      c.eval.rare_max = j.at("eval").value("rare_max", c.eval.rare_max);
      c.eval.common_max = j.at("eval").value("common_max", c.eval.common_max);
    }
    c.output_dir = j.value("output_dir", c.output_dir);
    c.seeds = j.value("seeds", c.seeds);
    c.save_detections = j.value("save_detections", c.save_detections);
    return c;
  } catch (const json::exception & e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
}

std::optional<std::vector<std::uint64_t>> seeds_from_env()
{
  const char * raw = std::getenv("UNIWORLD_SEED");
  if (raw == nullptr || *raw == '\0') {
    return std::nullopt;
  }
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(raw);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(tok, &used));
      if (used != tok.size()) {
        throw std::invalid_argument(tok);
      }
    } catch (const std::exception &) {
      throw ConfigError("UNIWORLD_SEED: '" + tok + "' is not an unsigned integer");
    }
  }
  return seeds;
}

std::string to_string(Arm a)
{
  switch (a) {
    case Arm::structure:
      return "structure";
    case Arm::decouple:
      return "decouple";
    case Arm::cln:
      return "cln";
    case Arm::calibration:
      return "calibration";
  }
  return "structure";
}

Arm arm_from_string(const std::string & s)
{
  for (Arm a : {Arm::structure, Arm::decouple, Arm::cln, Arm::calibration}) {
    if (to_string(a) == s) {
      return a;
    }
  }
  throw ConfigError("unknown arm '" + s + "' (expected structure, decouple, cln or calibration)");
}

Benchmark benchmark_for_seed(const ExperimentConfig & cfg, std::uint64_t seed)
{
  WorldSpec w = cfg.world;
  w.seed = seed;
  return make_benchmark(w, cfg.benchmark);
}

namespace {

void write_text(const fs::path & file, const std::string & text)
{
  fs::create_directories(file.parent_path());
  std::ofstream os(file, std::ios::binary);
  if (!os) {
    throw std::runtime_error("cannot write " + file.string());
  }
  os << text;
}

std::string format_double(double v)
{
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string train_log_csv(const std::vector<EpochLog> & history)
{
  std::string out = "stage,epoch,objectness,box_delta,locquality,binarycls,roi\n";
  for (const auto & h : history) {
    out += h.stage + "," + std::to_string(h.epoch) + "," + format_double(h.objectness) + "," +
           format_double(h.box_delta) + "," + format_double(h.locquality) + "," +
           format_double(h.binarycls) + "," + format_double(h.roi) + "\n";
  }
  return out;
}

/// Trains each system configuration at most once per seed.
class SystemCache
{
public:
  SystemCache(const ExperimentConfig & cfg, const Benchmark & bm, std::uint64_t seed,
              const std::optional<fs::path> & dir, const Progress & progress)
    : cfg_(cfg), bm_(bm), seed_(seed), dir_(dir), progress_(progress)
  {
  }

  const std::vector<TrainedSystem> & get(Structure structure, bool decouple)
  {
    const std::string key = to_string(structure) + (decouple ? "" : "_joint");
    auto it = cache_.find(key);
    if (it != cache_.end()) {
      return it->second;
    }
    TrainConfig tc = cfg_.train;
    tc.seed = seed_;
    tc.structure = structure;
    tc.decouple = decouple;
    if (progress_) {
      progress_("seed " + std::to_string(seed_) + ": training " + key);
    }
    auto systems = build_structure(bm_.train, tc, bm_.table);
    if (dir_) {
      for (const auto & s : systems) {
        const fs::path d = *dir_ / "systems" / key;
        write_text(d / ("checkpoint_" + s.name + ".json"), checkpoint_json(s).dump(1) + "\n");
        write_text(d / ("train_log_" + s.name + ".csv"), train_log_csv(s.history));
      }
    }
    return cache_.emplace(key, std::move(systems)).first->second;
  }

private:
  const ExperimentConfig & cfg_;
  const Benchmark & bm_;
  std::uint64_t seed_;
  std::optional<fs::path> dir_;
  Progress progress_;
  std::map<std::string, std::vector<TrainedSystem>> cache_;
};

}  // namespace

std::vector<RunRow> run_seed(const ExperimentConfig & cfg, const std::vector<Arm> & arms,
                             const Benchmark & bm, std::uint64_t seed,
                             const std::optional<fs::path> & seed_dir, const Progress & progress)
{
  cfg.validate();
  SystemCache cache(cfg, bm, seed, seed_dir, progress);
  const EvalGroups groups = make_groups(bm.test_space, bm.train, bm.base, bm.novel, cfg.eval);
  std::vector<std::string> ids;
  for (const auto & img : bm.test.images) {
    ids.push_back(img.image_id);
  }

  std::vector<RunRow> rows;
  auto record = [&](Arm arm, const std::string & variant,
                    const std::vector<std::vector<ScoredDetection>> & dets) {
    RunRow row{to_string(arm), variant, seed, evaluate(dets, bm.test, bm.test_space, groups)};
    if (seed_dir) {
      const fs::path base = *seed_dir / to_string(arm);
      write_text(base / (variant + ".eval.json"), to_json(row.eval).dump(1) + "\n");
      if (cfg.save_detections) {
        write_detections_jsonl(base / (variant + ".detections.jsonl"), ids, dets);
      }
    }
    rows.push_back(std::move(row));
  };
  auto open_world = [&](const std::vector<TrainedSystem> & systems, const InferenceConfig & ic) {
    return run_open_world(systems, bm.test, bm.test_space, bm.table, ic, &bm.train);
  };

  for (Arm arm : arms) {
    if (progress) {
      progress("seed " + std::to_string(seed) + ": arm " + to_string(arm));
    }
    switch (arm) {
      case Arm::calibration: {
        const auto & sys = cache.get(Structure::partitioned, true).front();
        InferenceConfig ic = cfg.inference;
        const RawDetections raw = detect_raw(sys, bm.test.images, bm.test_space, bm.table, ic);
        const PriorTable prior = ic.prior_source == PriorSource::train_counts
                                   ? estimate_prior(bm.train, bm.test_space, ic)
                                   : estimate_prior(raw, ic);
        if (seed_dir) {
          write_text(*seed_dir / "calibration" / "prior.json", to_json(prior).dump(1) + "\n");
        }
        ic.calibrate = true;
        record(arm, "calibrated", postprocess(raw, &prior, ic));
        ic.calibrate = false;
        record(arm, "uncalibrated", postprocess(raw, nullptr, ic));
        break;
      }
      case Arm::structure:
        for (Structure s : {Structure::separate, Structure::unified, Structure::partitioned}) {
          record(arm, to_string(s), open_world(cache.get(s, true), cfg.inference));
        }
        break;
      case Arm::decouple: {
        record(arm, "decoupled", open_world(cache.get(Structure::partitioned, true), cfg.inference));
        const auto & joint = cache.get(Structure::partitioned, false);
        record(arm, "joint", open_world(joint, cfg.inference));
        InferenceConfig plain = cfg.inference;
        plain.calibrate = false;
        record(arm, "joint_uncalibrated", open_world(joint, plain));
        break;
      }
      case Arm::cln:
        for (EtaMode m : {EtaMode::objectness, EtaMode::localization, EtaMode::cln}) {
          InferenceConfig ic = cfg.inference;
          ic.eta_mode = m;
          record(arm, to_string(m), open_world(cache.get(Structure::partitioned, true), ic));
        }
        break;
    }
  }
  return rows;
}

void write_metrics_csv(const fs::path & file, const std::vector<RunRow> & rows)
{
  std::string out = "arm,variant,seed";
  for (const auto & h : eval_csv_header()) {
    out += "," + h;
  }
  out += "\n";
  for (const auto & r : rows) {
    out += r.arm + "," + r.variant + "," + std::to_string(r.seed);
    for (double v : eval_csv_values(r.eval)) {
      out += "," + format_double(v);
    }
    out += "\n";
  }
  write_text(file, out);
}

std::vector<RunRow> read_metrics_csv(const fs::path & file)
{
  std::ifstream is(file);
  if (!is) {
    throw FormatError("missing metrics file " + file.string());
  }
  const auto header = eval_csv_header();
  std::string line;
  std::getline(is, line);
  std::vector<RunRow> rows;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      cells.push_back(cell);
    }
    if (cells.size() != 3 + header.size()) {
      throw FormatError(file.string() + ":" + std::to_string(line_no) + ": wrong column count");
    }
    RunRow r;
    r.arm = cells[0];
    r.variant = cells[1];
    try {
      r.seed = std::stoull(cells[2]);
      std::vector<double> v;
      for (std::size_t k = 3; k < cells.size(); ++k) {
        v.push_back(std::stod(cells[k]));
      }
      r.eval.ap = v[0];
      r.eval.ap50 = v[1];
      r.eval.ap_rare = v[2];
      r.eval.ap_common = v[3];
      r.eval.ap_frequent = v[4];
      r.eval.ap_base = v[5];
      r.eval.ap_novel = v[6];
      r.eval.ar = {{1, v[7]}, {10, v[8]}, {100, v[9]}};
    } catch (const std::exception &) {
      throw FormatError(file.string() + ":" + std::to_string(line_no) + ": bad number");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

double median(std::vector<double> v)
{
  if (v.empty()) {
    throw std::invalid_argument("median of an empty set");
  }
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<MedianRow> medians(const std::vector<RunRow> & rows)
{
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, std::vector<std::vector<double>>> groups;
  for (const auto & r : rows) {
    const auto key = std::make_pair(r.arm, r.variant);
    if (!groups.count(key)) {
      order.push_back(key);
    }
    groups[key].push_back(eval_csv_values(r.eval));
  }
  std::vector<MedianRow> out;
  for (const auto & key : order) {
    const auto & vals = groups[key];
    MedianRow m{key.first, key.second, static_cast<int>(vals.size()), {}};
    for (std::size_t c = 0; c < vals.front().size(); ++c) {
      std::vector<double> col;
      for (const auto & v : vals) {
        col.push_back(v[c]);
      }
      m.values.push_back(median(col));
    }
    out.push_back(std::move(m));
  }
  return out;
}

std::string summary_markdown(const std::vector<MedianRow> & rows)
{
  const auto header = eval_csv_header();
  std::string out = "| arm | variant | seeds |";
  std::string rule = "|---|---|---|";
  for (const auto & h : header) {
    out += " " + h + " |";
    rule += "---|";
  }
  out += "\n" + rule + "\n";
  for (const auto & r : rows) {
    out += "| " + r.arm + " | " + r.variant + " | " + std::to_string(r.n_seeds) + " |";
    for (double v : r.values) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), " %.2f |", 100.0 * v);
      out += buf;
    }
    out += "\n";
  }
  out += "\nMedians over seeds, AP and AR in points.\n";
  return out;
}

std::string bar_chart_svg(const std::string & title, const std::vector<MedianRow> & rows)
{
  constexpr int kBar = 26, kGap = 34, kLeft = 50, kTop = 40, kPlot = 220;
  const int width = kLeft + static_cast<int>(rows.size()) * (2 * kBar + kGap) + 20;
  const int height = kTop + kPlot + 70;
  double top = 0.0;
  for (const auto & r : rows) {
    top = std::max({top, r.values[5], r.values[6]});
  }
  top = top > 0.0 ? top * 1.1 : 1.0;

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kLeft << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n"
     << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + kPlot << "\" x2=\"" << width - 10 << "\" y2=\""
     << kTop + kPlot << "\" stroke=\"black\"/>\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int x = kLeft + 10 + static_cast<int>(i) * (2 * kBar + kGap);
    const double vals[2] = {rows[i].values[5], rows[i].values[6]};
    const char * colors[2] = {"#4e79a7", "#f28e2b"};
    for (int b = 0; b < 2; ++b) {
      const int h = static_cast<int>(kPlot * vals[b] / top);
      os << "<rect x=\"" << x + b * kBar << "\" y=\"" << kTop + kPlot - h << "\" width=\"" << kBar - 2
         << "\" height=\"" << h << "\" fill=\"" << colors[b] << "\"/>\n";
      char label[16];
      std::snprintf(label, sizeof(label), "%.1f", 100.0 * vals[b]);
      os << "<text x=\"" << x + b * kBar << "\" y=\"" << kTop + kPlot - h - 3 << "\">" << label
         << "</text>\n";
    }
    os << "<text x=\"" << x << "\" y=\"" << kTop + kPlot + 16 << "\">" << rows[i].variant
       << "</text>\n";
  }
  os << "<rect x=\"" << kLeft << "\" y=\"" << height - 22 << "\" width=\"10\" height=\"10\" fill=\"#4e79a7\"/>"
     << "<text x=\"" << kLeft + 14 << "\" y=\"" << height - 13 << "\">base AP</text>\n"
     << "<rect x=\"" << kLeft + 80 << "\" y=\"" << height - 22
     << "\" width=\"10\" height=\"10\" fill=\"#f28e2b\"/>"
     << "<text x=\"" << kLeft + 94 << "\" y=\"" << height - 13 << "\">novel AP</text>\n"
     << "</svg>\n";
  return os.str();
}

void write_report(const std::vector<fs::path> & run_dirs, const fs::path & out_dir)
{
  if (run_dirs.empty()) {
    throw ConfigError("report: no run directories given");
  }
  std::optional<json> identity;
  fs::path identity_dir;
  std::vector<RunRow> rows;
  for (const auto & dir : run_dirs) {
    const fs::path cfg_file = dir / "config.json";
    std::ifstream is(cfg_file);
    if (!is) {
      throw FormatError("missing config file " + cfg_file.string());
    }
    json cfg = json::parse(is);
    json id = {{"world", cfg.at("world")}, {"benchmark", cfg.at("benchmark")}};
    id["world"].erase("seed");
    if (!identity) {
      identity = id;
      identity_dir = dir;
    } else if (*identity != id) {
      throw ConfigError("report: " + dir.string() + " was run on a different benchmark than " +
                        identity_dir.string());
    }
    bool any = false;
    for (Arm a : {Arm::structure, Arm::decouple, Arm::cln, Arm::calibration}) {
      const fs::path m = dir / to_string(a) / "metrics.csv";
      if (fs::exists(m)) {
        auto r = read_metrics_csv(m);
        rows.insert(rows.end(), r.begin(), r.end());
        any = true;
      }
    }
    if (!any) {
      throw FormatError("missing metrics file: no <arm>/metrics.csv under " + dir.string());
    }
  }

  const auto med = medians(rows);
  std::string md = "# Open-world ablation report\n\n";
  std::vector<std::string> arms;
  for (const auto & m : med) {
    if (std::find(arms.begin(), arms.end(), m.arm) == arms.end()) {
      arms.push_back(m.arm);
    }
  }
  for (const auto & arm : arms) {
    std::vector<MedianRow> sub;
    for (const auto & m : med) {
      if (m.arm == arm) {
        sub.push_back(m);
      }
    }
    write_text(out_dir / (arm + ".svg"), bar_chart_svg(arm + ": median AP", sub));
    md += "## " + arm + "\n\n" + summary_markdown(sub) + "\n![" + arm + "](" + arm + ".svg)\n\n";
  }
  write_text(out_dir / "report.md", md);
}

}  // namespace uniworld
