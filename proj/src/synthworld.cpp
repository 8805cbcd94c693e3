#include "uniworld/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "uniworld/errors.hpp"

namespace uniworld {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kStreamCategories = 1;
constexpr std::uint64_t kStreamSplit = 2;
constexpr std::uint64_t kStreamTest = 99;
constexpr std::uint64_t kStreamSourceBase = 100;
constexpr std::uint64_t kStreamNoisy = 200;

std::string category_key(int i, int n)
{
  int width = 2;
  for (int v = n - 1; v >= 100; v /= 10) {
    ++width;
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "c%0*d", width, i);
  return buf;
}

std::string image_name(const char * prefix, int i)
{
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04d", prefix, i);
  return buf;
}

bool is_whole(double v) { return std::abs(v - std::round(v)) < 1e-6; }

json read_json_file(const fs::path & file)
{
  std::ifstream in(file);
  if (!in) {
    throw FormatError("cannot open " + file.string());
  }
  try {
    return json::parse(in);
  } catch (const json::exception & e) {
    throw FormatError(file.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path & file, const json & j)
{
  std::ofstream out(file);
  if (!out) {
    throw std::runtime_error("cannot write " + file.string());
  }
  out << j.dump(2) << '\n';
}

json objects_to_json(const std::vector<SceneObject> & objects)
{
  json arr = json::array();
  for (const auto & o : objects) {
    arr.push_back({{"box", to_json(o.box)}, {"category", o.category}});
  }
  return arr;
}

std::vector<SceneObject> objects_from_json(const json & arr)
{
  std::vector<SceneObject> out;
  for (const auto & o : arr) {
    out.push_back(SceneObject{box_from_json(o.at("box")), o.at("category").get<std::string>()});
  }
  return out;
}

}  // namespace

Rng make_rng(std::uint64_t seed, std::uint64_t stream)
{
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

void WorldSpec::validate() const
{
  if (image_size < 8) {
    throw ConfigError("world: image_size must be >= 8");
  }
  if (dim < 1) {
    throw ConfigError("world: dim must be >= 1");
  }
  if (n_categories < 2) {
    throw ConfigError("world: n_categories must be >= 2");
  }
  if (!(noise_sigma >= 0.0)) {
    throw ConfigError("world: noise_sigma must be >= 0");
  }
  if (!(shared_component >= 0.0 && shared_component < 1.0)) {
    throw ConfigError("world: shared_component must lie in [0, 1)");
  }
  if (min_objects < 0 || max_objects < min_objects) {
    throw ConfigError("world: need 0 <= min_objects <= max_objects");
  }
  if (min_box_side < 2 || max_box_side < min_box_side || max_box_side > image_size) {
    throw ConfigError("world: need 2 <= min_box_side <= max_box_side <= image_size");
  }
  if (!(max_layout_iou >= 0.0 && max_layout_iou <= 1.0)) {
    throw ConfigError("world: max_layout_iou must lie in [0, 1]");
  }
}

void BenchmarkSpec::validate() const
{
  if (n_sources < 1) {
    throw ConfigError("benchmark: n_sources must be >= 1");
  }
  if (!(overlap >= 0.0 && overlap <= 1.0)) {
    throw ConfigError("benchmark: overlap must lie in [0, 1]");
  }
  if (!(novel_fraction >= 0.0 && novel_fraction < 1.0)) {
    throw ConfigError("benchmark: novel_fraction must lie in [0, 1)");
  }
  if (train_images_per_source < 1 || test_images < 1) {
    throw ConfigError("benchmark: image counts must be >= 1");
  }
  if (noisy_source >= n_sources) {
    throw ConfigError("benchmark: noisy_source index out of range");
  }
  if (!(noisy_drop_rate >= 0.0 && noisy_drop_rate <= 1.0)) {
    throw ConfigError("benchmark: noisy_drop_rate must lie in [0, 1]");
  }
}

SplitPlan plan_split(int n_categories, const BenchmarkSpec & bench)
{
  bench.validate();
  SplitPlan plan;
  const double novel = bench.novel_fraction * n_categories;
  if (!is_whole(novel)) {
    throw ConfigError("benchmark: novel_fraction * n_categories = " + std::to_string(novel) +
                      " is not a whole number of categories");
  }
  plan.n_novel = static_cast<int>(std::lround(novel));
  plan.n_base = n_categories - plan.n_novel;
  if (plan.n_base < 1) {
    throw ConfigError("benchmark: no base categories left after the novel split");
  }
  const double s = bench.n_sources;
  const double per_source = plan.n_base / (bench.overlap + s * (1.0 - bench.overlap));
  const double shared = bench.overlap * per_source;
  if (!is_whole(per_source) || !is_whole(shared)) {
    throw ConfigError("benchmark: overlap " + std::to_string(bench.overlap) + " with " +
                      std::to_string(bench.n_sources) + " sources cannot split " +
                      std::to_string(plan.n_base) +
                      " base categories into whole per-source label spaces");
  }
  plan.per_source = static_cast<int>(std::lround(per_source));
  plan.shared = static_cast<int>(std::lround(shared));
  plan.exclusive = plan.per_source - plan.shared;
  if (plan.per_source < 1) {
    throw ConfigError("benchmark: per-source label spaces would be empty");
  }
  return plan;
}

std::pair<std::vector<Category>, EmbeddingTable> make_categories(const WorldSpec & spec)
{
  if (spec.n_categories < 1 || spec.dim < 1) {
    throw ConfigError("world: need at least one category and one dimension");
  }
  Rng rng = make_rng(spec.seed, kStreamCategories);
  std::normal_distribution<double> normal(0.0, 1.0);

  auto draw_unit = [&]() {
    Eigen::VectorXd v(spec.dim);
    do {
      for (int d = 0; d < spec.dim; ++d) {
        v[d] = normal(rng);
      }
    } while (v.norm() < 1e-8);
    return Eigen::VectorXd(v / v.norm());
  };

  // Optional direction shared by every category: v = sqrt(a) m + sqrt(1 - a) u, u orthogonal to m.
  const double a = spec.shared_component;
  Eigen::VectorXd common;
  if (a > 0.0) {
    common = draw_unit();
  }
  auto draw_category = [&]() {
    Eigen::VectorXd u = draw_unit();
    if (a <= 0.0) {
      return u;
    }
    while (true) {
      u -= u.dot(common) * common;
      if (u.norm() > 1e-8 || spec.dim == 1) {
        break;
      }
      u = draw_unit();
    }
    if (spec.dim == 1) {
      return common;
    }
    Eigen::VectorXd v = std::sqrt(a) * common + std::sqrt(1.0 - a) * (u / u.norm());
    return Eigen::VectorXd(v / v.norm());
  };

  std::vector<Category> cats;
  EmbeddingTable table(spec.dim);
  for (int i = 0; i < spec.n_categories; ++i) {
    Eigen::VectorXd v = draw_category();
    // Resample near-collinear pairs; bounded so tiny dimensions cannot spin forever.
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const bool collides = std::any_of(cats.begin(), cats.end(), [&v](const Category & c) {
        return std::abs(c.semantic_vector.dot(v)) >= 0.95;
      });
      if (!collides) {
        break;
      }
      v = draw_category();
    }
    const std::string key = category_key(i, spec.n_categories);
    cats.push_back(Category{key, "category_" + key.substr(1), v});
    table.add(key, v);
  }
  return {std::move(cats), std::move(table)};
}

SyntheticImage render_scene(const WorldSpec & spec, const std::vector<SceneObject> & objects,
                            const EmbeddingTable & table, Rng & rng, std::string image_id)
{
  const int n = spec.image_size;
  const int dim = spec.dim;
  SyntheticImage img;
  img.image_id = std::move(image_id);
  img.size = n;
  img.dim = dim;
  img.full_truth = objects;
  img.features.assign(static_cast<std::size_t>(n) * n * dim, 0.0f);

  // Owner of every cell: index of the last object whose box contains the cell center.
  std::vector<int> owner(static_cast<std::size_t>(n) * n, -1);
  for (std::size_t k = 0; k < objects.size(); ++k) {
    const Box & b = objects[k].box;
    for (int y = 0; y < n; ++y) {
      const double cy = y + 0.5;
      if (cy < b.y1 || cy >= b.y2) {
        continue;
      }
      for (int x = 0; x < n; ++x) {
        const double cx = x + 0.5;
        if (cx >= b.x1 && cx < b.x2) {
          owner[static_cast<std::size_t>(y) * n + x] = static_cast<int>(k);
        }
      }
    }
  }

  std::vector<const Eigen::VectorXd *> protos;
  protos.reserve(objects.size());
  for (const auto & o : objects) {
    protos.push_back(&table.at(o.category));
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      float * c = img.cell(x, y);
      const int who = owner[static_cast<std::size_t>(y) * n + x];
      for (int d = 0; d < dim; ++d) {
        double v = spec.noise_sigma * noise(rng);
        if (who >= 0) {
          v += (*protos[static_cast<std::size_t>(who)])[d];
        }
        c[d] = static_cast<float>(v);
      }
    }
  }
  return img;
}

std::vector<SceneObject> sample_layout(const WorldSpec & spec,
                                       const std::vector<std::string> & categories,
                                       const std::vector<double> & weights, Rng & rng)
{
  if (categories.empty() || categories.size() != weights.size()) {
    throw std::invalid_argument("sample_layout: categories and weights must be non-empty and aligned");
  }
  std::uniform_int_distribution<int> count_dist(spec.min_objects, spec.max_objects);
  std::uniform_int_distribution<int> side_dist(spec.min_box_side, spec.max_box_side);
  std::discrete_distribution<std::size_t> cat_dist(weights.begin(), weights.end());

  const int target = count_dist(rng);
  std::vector<SceneObject> objects;
  for (int placed = 0, attempts = 0; placed < target && attempts < 50 * (target + 1); ++attempts) {
    const int w = side_dist(rng);
    const int h = side_dist(rng);
    std::uniform_int_distribution<int> xd(0, spec.image_size - w);
    std::uniform_int_distribution<int> yd(0, spec.image_size - h);
    const int x = xd(rng);
    const int y = yd(rng);
    const Box box{double(x), double(y), double(x + w), double(y + h)};
    const bool crowded = std::any_of(objects.begin(), objects.end(), [&](const SceneObject & o) {
      return iou(o.box, box) > spec.max_layout_iou;
    });
    if (crowded) {
      continue;
    }
    objects.push_back(SceneObject{box, categories[cat_dist(rng)]});
    ++placed;
  }
  return objects;
}

Benchmark make_benchmark(const WorldSpec & spec, const BenchmarkSpec & bench)
{
  spec.validate();
  const SplitPlan plan = plan_split(spec.n_categories, bench);

  Benchmark bm;
  std::tie(bm.categories, bm.table) = make_categories(spec);
  std::vector<std::string> all_keys;
  for (const auto & c : bm.categories) {
    all_keys.push_back(c.key);
  }
  bm.test_space = LabelSpace(all_keys);

  // Category roles and frequency ranks come from one shuffled order each.
  Rng split_rng = make_rng(spec.seed, kStreamSplit);
  std::vector<std::size_t> role(all_keys.size());
  std::iota(role.begin(), role.end(), std::size_t{0});
  std::shuffle(role.begin(), role.end(), split_rng);
  std::vector<std::size_t> rank(all_keys.size());
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  std::shuffle(rank.begin(), rank.end(), split_rng);

  auto sorted_keys = [&](std::vector<std::size_t> idx) {
    std::sort(idx.begin(), idx.end());
    std::vector<std::string> keys;
    for (auto i : idx) {
      keys.push_back(all_keys[i]);
    }
    return keys;
  };

  std::vector<std::size_t> novel_idx(role.begin(), role.begin() + plan.n_novel);
  std::vector<std::size_t> base_idx(role.begin() + plan.n_novel, role.end());
  bm.novel = LabelSpace(sorted_keys(novel_idx));
  bm.base = LabelSpace(sorted_keys(base_idx));

  std::vector<std::size_t> shared(base_idx.begin(), base_idx.begin() + plan.shared);
  std::vector<LabelSpace> source_spaces;
  for (int s = 0; s < bench.n_sources; ++s) {
    std::vector<std::size_t> own = shared;
    const auto first = base_idx.begin() + plan.shared + static_cast<std::ptrdiff_t>(s) * plan.exclusive;
    own.insert(own.end(), first, first + plan.exclusive);
    source_spaces.emplace_back(sorted_keys(own));
  }

  std::vector<double> train_w(all_keys.size());
  std::vector<double> test_w(all_keys.size());
  for (std::size_t i = 0; i < all_keys.size(); ++i) {
    const double r = static_cast<double>(rank[i] + 1);
    train_w[i] = std::pow(r, -spec.frequency_exponent);
    test_w[i] = std::pow(r, -spec.test_frequency_exponent);
  }
  bm.train_weights = train_w;

  for (int s = 0; s < bench.n_sources; ++s) {
    DetDataset ds;
    ds.name = "source" + std::to_string(s);
    ds.label_space = source_spaces[static_cast<std::size_t>(s)];
    Rng rng = make_rng(spec.seed, kStreamSourceBase + static_cast<std::uint64_t>(s));
    Rng drop_rng = make_rng(spec.seed, kStreamNoisy + static_cast<std::uint64_t>(s));
    std::bernoulli_distribution drop(bench.noisy_drop_rate);
    const std::string prefix = "s" + std::to_string(s);
    for (int i = 0; i < bench.train_images_per_source; ++i) {
      auto layout = sample_layout(spec, all_keys, train_w, rng);
      auto img = render_scene(spec, layout, bm.table, rng, image_name(prefix.c_str(), i));
      std::vector<SceneObject> vis;
      for (const auto & o : img.full_truth) {
        if (!ds.label_space.contains(o.category)) {
          continue;
        }
        if (s == bench.noisy_source && drop(drop_rng)) {
          continue;
        }
        vis.push_back(o);
      }
      ds.images.push_back(std::move(img));
      ds.visible.push_back(std::move(vis));
    }
    bm.train.push_back(std::move(ds));
  }

  bm.test.name = "test";
  bm.test.label_space = bm.test_space;
  Rng test_rng = make_rng(spec.seed, kStreamTest);
  for (int i = 0; i < bench.test_images; ++i) {
    auto layout = sample_layout(spec, all_keys, test_w, test_rng);
    auto img = render_scene(spec, layout, bm.table, test_rng, image_name("test", i));
    bm.test.visible.push_back(img.full_truth);
    bm.test.images.push_back(std::move(img));
  }
  return bm;
}

std::map<std::string, int> train_instance_counts(const std::vector<DetDataset> & train)
{
  std::map<std::string, int> counts;
  for (const auto & ds : train) {
    for (const auto & objs : ds.visible) {
      for (const auto & o : objs) {
        ++counts[o.category];
      }
    }
  }
  return counts;
}

json to_json(const WorldSpec & s)
{
  return json{{"image_size", s.image_size},
              {"dim", s.dim},
              {"noise_sigma", s.noise_sigma},
              {"n_categories", s.n_categories},
              {"min_objects", s.min_objects},
              {"max_objects", s.max_objects},
              {"min_box_side", s.min_box_side},
              {"max_box_side", s.max_box_side},
              {"max_layout_iou", s.max_layout_iou},
              {"shared_component", s.shared_component},
              {"frequency_exponent", s.frequency_exponent},
              {"test_frequency_exponent", s.test_frequency_exponent},
              {"seed", s.seed}};
}

WorldSpec world_spec_from_json(const json & j)
{
  WorldSpec s;
  s.image_size = j.value("image_size", s.image_size);
  s.dim = j.value("dim", s.dim);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.n_categories = j.value("n_categories", s.n_categories);
  s.min_objects = j.value("min_objects", s.min_objects);
  s.max_objects = j.value("max_objects", s.max_objects);
  s.min_box_side = j.value("min_box_side", s.min_box_side);
  s.max_box_side = j.value("max_box_side", s.max_box_side);
  s.max_layout_iou = j.value("max_layout_iou", s.max_layout_iou);
  s.shared_component = j.value("shared_component", s.shared_component);
  s.frequency_exponent = j.value("frequency_exponent", s.frequency_exponent);
  s.test_frequency_exponent = j.value("test_frequency_exponent", s.test_frequency_exponent);
  s.seed = j.value("seed", s.seed);
  return s;
}

json to_json(const BenchmarkSpec & b)
{
  return json{{"n_sources", b.n_sources},
              {"overlap", b.overlap},
              {"novel_fraction", b.novel_fraction},
              {"train_images_per_source", b.train_images_per_source},
              {"test_images", b.test_images},
              {"noisy_source", b.noisy_source},
              {"noisy_drop_rate", b.noisy_drop_rate}};
}

BenchmarkSpec benchmark_spec_from_json(const json & j)
{
  BenchmarkSpec b;
  b.n_sources = j.value("n_sources", b.n_sources);
  b.overlap = j.value("overlap", b.overlap);
  b.novel_fraction = j.value("novel_fraction", b.novel_fraction);
  b.train_images_per_source = j.value("train_images_per_source", b.train_images_per_source);
  b.test_images = j.value("test_images", b.test_images);
  b.noisy_source = j.value("noisy_source", b.noisy_source);
  b.noisy_drop_rate = j.value("noisy_drop_rate", b.noisy_drop_rate);
  return b;
}

void write_image_binary(const fs::path & file, const SyntheticImage & image)
{
  std::ofstream out(file, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot write " + file.string());
  }
  const std::uint32_t header[2] = {static_cast<std::uint32_t>(image.size),
                                   static_cast<std::uint32_t>(image.dim)};
  out.write(reinterpret_cast<const char *>(header), sizeof(header));
  out.write(reinterpret_cast<const char *>(image.features.data()),
            static_cast<std::streamsize>(image.features.size() * sizeof(float)));
}

SyntheticImage read_image_binary(const fs::path & file, std::string image_id)
{
  std::ifstream in(file, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open " + file.string());
  }
  std::uint32_t header[2] = {0, 0};
  in.read(reinterpret_cast<char *>(header), sizeof(header));
  if (!in || header[0] == 0 || header[1] == 0 || header[0] > 4096 || header[1] > 4096) {
    throw FormatError(file.string() + ": bad image header");
  }
  SyntheticImage img;
  img.image_id = std::move(image_id);
  img.size = static_cast<int>(header[0]);
  img.dim = static_cast<int>(header[1]);
  img.features.resize(static_cast<std::size_t>(img.size) * img.size * img.dim);
  in.read(reinterpret_cast<char *>(img.features.data()),
          static_cast<std::streamsize>(img.features.size() * sizeof(float)));
  if (!in) {
    throw FormatError(file.string() + ": truncated feature grid");
  }
  return img;
}

void write_dataset(const fs::path & dir, const DetDataset & dataset, const WorldSpec & spec)
{
  fs::create_directories(dir / "images");
  json ids = json::array();
  json ann = json::array();
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    const auto & img = dataset.images[i];
    ids.push_back(img.image_id);
    write_image_binary(dir / "images" / (img.image_id + ".bin"), img);
    ann.push_back({{"image_id", img.image_id},
                   {"full_truth", objects_to_json(img.full_truth)},
                   {"visible", objects_to_json(dataset.visible[i])}});
  }
  write_json_file(dir / "manifest.json", json{{"name", dataset.name},
                                              {"spec", to_json(spec)},
                                              {"label_space", to_json(dataset.label_space)},
                                              {"images", ids}});
  write_json_file(dir / "annotations.json", json{{"images", ann}});
}

DetDataset read_dataset(const fs::path & dir)
{
  const json manifest = read_json_file(dir / "manifest.json");
  const json ann = read_json_file(dir / "annotations.json");
  DetDataset ds;
  try {
    ds.name = manifest.at("name").get<std::string>();
    ds.label_space = label_space_from_json(manifest.at("label_space"));
    const auto & records = ann.at("images");
    const auto ids = manifest.at("images").get<std::vector<std::string>>();
    if (records.size() != ids.size()) {
      throw FormatError(dir.string() + ": annotations do not match the manifest image list");
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto & rec = records[i];
      if (rec.at("image_id").get<std::string>() != ids[i]) {
        throw FormatError(dir.string() + ": annotation order differs from manifest");
      }
      auto img = read_image_binary(dir / "images" / (ids[i] + ".bin"), ids[i]);
      img.full_truth = objects_from_json(rec.at("full_truth"));
      ds.visible.push_back(objects_from_json(rec.at("visible")));
      ds.images.push_back(std::move(img));
    }
  } catch (const json::exception & e) {
    throw FormatError(dir.string() + ": " + e.what());
  }
  return ds;
}

void write_benchmark(const fs::path & root, const Benchmark & bm, const WorldSpec & spec,
                     const BenchmarkSpec & bench)
{
  fs::create_directories(root);
  json train_names = json::array();
  for (const auto & ds : bm.train) {
    train_names.push_back(ds.name);
    write_dataset(root / ds.name, ds, spec);
  }
  write_dataset(root / "test", bm.test, spec);
  write_json_file(root / "manifest.json", json{{"world", to_json(spec)},
                                               {"benchmark", to_json(bench)},
                                               {"test_space", to_json(bm.test_space)},
                                               {"base", to_json(bm.base)},
                                               {"novel", to_json(bm.novel)},
                                               {"train", train_names},
                                               {"test", "test"},
                                               {"train_weights", bm.train_weights},
                                               {"embeddings", to_json(bm.table)}});
}

Benchmark read_benchmark(const fs::path & root)
{
  const json manifest = read_json_file(root / "manifest.json");
  Benchmark bm;
  try {
    bm.table = embedding_table_from_json(manifest.at("embeddings"));
    bm.test_space = label_space_from_json(manifest.at("test_space"));
    bm.base = label_space_from_json(manifest.at("base"));
    bm.novel = label_space_from_json(manifest.at("novel"));
    bm.train_weights = manifest.at("train_weights").get<std::vector<double>>();
    for (const auto & key : bm.test_space.keys()) {
      bm.categories.push_back(Category{key, "category_" + key.substr(1), bm.table.at(key)});
    }
    for (const auto & name : manifest.at("train")) {
      bm.train.push_back(read_dataset(root / name.get<std::string>()));
    }
    bm.test = read_dataset(root / manifest.at("test").get<std::string>());
  } catch (const json::exception & e) {
    throw FormatError(root.string() + ": " + e.what());
  }
  return bm;
}

}  // namespace uniworld
