#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "uniworld/geometry.hpp"
#include "uniworld/labelspace.hpp"

namespace uniworld {

using Rng = std::mt19937_64;

/// Independent, reproducible generator stream for (seed, stream id).
Rng make_rng(std::uint64_t seed, std::uint64_t stream);

/// Parameters of the procedural detection world.
struct WorldSpec
{
  int image_size = 32;
  int dim = 16;  ///< feature dimension == embedding dimension
  double noise_sigma = 0.3;
  int n_categories = 40;
  int min_objects = 1;
  int max_objects = 4;
  int min_box_side = 4;
  int max_box_side = 12;
  double max_layout_iou = 0.3;
  /// Squared cosine between every category vector and one common direction; 0 draws isotropic
  /// vectors.
  double shared_component = 0.5;
  /// Power-law exponent of training-image category frequencies (weight ~ rank^-s).
  double frequency_exponent = 1.5;
  /// Same for test images; 0 samples test categories uniformly.
  double test_frequency_exponent = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SceneObject
{
  Box box;
  std::string category;

  bool operator==(const SceneObject &) const = default;
};

/// Feature-grid image: image_size x image_size cells of `dim` floats, row-major (y, x, d).
struct SyntheticImage
{
  std::string image_id;
  int size = 0;
  int dim = 0;
  std::vector<float> features;
  std::vector<SceneObject> full_truth;

  const float * cell(int x, int y) const
  {
    return features.data() + (static_cast<std::size_t>(y) * size + x) * dim;
  }
  float * cell(int x, int y)
  {
    return features.data() + (static_cast<std::size_t>(y) * size + x) * dim;
  }
};

/// One training (or test) source: images plus the annotations visible under its label space.
struct DetDataset
{
  std::string name;
  LabelSpace label_space;
  std::vector<SyntheticImage> images;
  std::vector<std::vector<SceneObject>> visible;  ///< parallel to images
};

/// Creates `n_categories` categories with seeded random unit vectors. Pairs whose |cos|
/// reaches 0.95 are resampled.
std::pair<std::vector<Category>, EmbeddingTable> make_categories(const WorldSpec & spec);

/// Renders objects into a feature grid. Every cell receives N(0, sigma^2) noise per
/// dimension; cells whose centers lie in an object's box add that category's vector, later
/// objects occluding earlier ones. The noise draw does not depend on the objects.
SyntheticImage render_scene(const WorldSpec & spec, const std::vector<SceneObject> & objects,
                            const EmbeddingTable & table, Rng & rng, std::string image_id = {});

/// Samples a non-crowded layout: 1..max objects with integer boxes, pairwise IoU at most
/// spec.max_layout_iou. Categories are drawn from `categories` with the given weights.
std::vector<SceneObject> sample_layout(const WorldSpec & spec,
                                       const std::vector<std::string> & categories,
                                       const std::vector<double> & weights, Rng & rng);

struct BenchmarkSpec
{
  int n_sources = 2;
  double overlap = 0.5;
  double novel_fraction = 0.25;
  int train_images_per_source = 300;
  int test_images = 100;
  /// Index of a source whose visible annotations are each dropped with `noisy_drop_rate`;
  /// -1 disables the mode.
  int noisy_source = -1;
  double noisy_drop_rate = 0.3;

  void validate() const;
};

/// Sizes of the per-source label spaces produced by the splitting rule.
struct SplitPlan
{
  int n_novel = 0;
  int n_base = 0;
  int shared = 0;     ///< categories common to every source
  int exclusive = 0;  ///< categories owned by exactly one source
  int per_source = 0;
};

/// Validates the fractions and returns the split sizes. Every source owns `shared` common
/// keys plus `exclusive` private ones; overlap = shared / per_source. Throws ConfigError
/// when the counts are not whole numbers or the novel set is empty/complete when it must not be.
SplitPlan plan_split(int n_categories, const BenchmarkSpec & bench);

struct Benchmark
{
  std::vector<Category> categories;
  EmbeddingTable table;
  std::vector<DetDataset> train;
  DetDataset test;
  LabelSpace test_space;
  LabelSpace novel;  ///< held-out keys, in no train space
  LabelSpace base;
  std::vector<double> train_weights;  ///< per category, aligned with test_space
};

Benchmark make_benchmark(const WorldSpec & spec, const BenchmarkSpec & bench);

/// Number of visible annotations per category key over all training sources.
std::map<std::string, int> train_instance_counts(const std::vector<DetDataset> & train);

nlohmann::json to_json(const WorldSpec & spec);
WorldSpec world_spec_from_json(const nlohmann::json & j);
nlohmann::json to_json(const BenchmarkSpec & spec);
BenchmarkSpec benchmark_spec_from_json(const nlohmann::json & j);

/// Dataset directory: manifest.json, images/<id>.bin (uint32 size, uint32 dim, float32 grid),
/// annotations.json.
void write_dataset(const std::filesystem::path & dir, const DetDataset & dataset,
                   const WorldSpec & spec);
DetDataset read_dataset(const std::filesystem::path & dir);

void write_image_binary(const std::filesystem::path & file, const SyntheticImage & image);
SyntheticImage read_image_binary(const std::filesystem::path & file, std::string image_id);

/// Benchmark root: manifest.json with spaces and embeddings, one dataset directory per
/// source plus test/.
void write_benchmark(const std::filesystem::path & root, const Benchmark & bm,
                     const WorldSpec & spec, const BenchmarkSpec & bench);
Benchmark read_benchmark(const std::filesystem::path & root);

}  // namespace uniworld
