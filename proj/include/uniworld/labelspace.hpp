#pragma once

#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace uniworld {

/// A category of the synthetic world. `semantic_vector` doubles as the category's
/// language embedding and as its visual prototype.
struct Category
{
  std::string key;
  std::string name;
  Eigen::VectorXd semantic_vector;
};

/// Ordered vocabulary of category keys. Identity is the key; indices are local views.
class LabelSpace
{
public:
  LabelSpace() = default;
  explicit LabelSpace(std::vector<std::string> keys);

  const std::vector<std::string> & keys() const noexcept { return keys_; }
  std::size_t size() const noexcept { return keys_.size(); }
  bool empty() const noexcept { return keys_.empty(); }
  bool contains(const std::string & key) const { return index_.count(key) != 0; }

  /// Position of `key`, throws std::out_of_range when absent.
  std::size_t index_of(const std::string & key) const;

  const std::string & operator[](std::size_t i) const { return keys_[i]; }

  bool operator==(const LabelSpace & other) const { return keys_ == other.keys_; }

private:
  std::vector<std::string> keys_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Deduplicated union, first occurrence wins the position.
LabelSpace union_spaces(std::span<const LabelSpace> spaces);

struct SpaceSplit
{
  LabelSpace base;
  LabelSpace novel;
};

/// Splits `test` into keys seen by some training space and keys seen by none.
SpaceSplit novel_split(const LabelSpace & test, std::span<const LabelSpace> train_spaces);

/// Unit-norm category embeddings keyed by category.
class EmbeddingTable
{
public:
  explicit EmbeddingTable(int dim = 0) : dim_(dim) {}

  int dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return vectors_.size(); }
  bool contains(const std::string & key) const { return vectors_.count(key) != 0; }

  /// Registers `vec` under `key`. The vector must have the table's dimension and unit norm
  /// within 1e-6.
  void add(const std::string & key, const Eigen::VectorXd & vec);

  /// Throws MissingEmbeddingError naming the key when it is not registered.
  const Eigen::VectorXd & at(const std::string & key) const;

  const std::map<std::string, Eigen::VectorXd> & vectors() const noexcept { return vectors_; }

private:
  int dim_;
  std::map<std::string, Eigen::VectorXd> vectors_;
};

/// |space| x E matrix, row i holding the embedding of space[i].
Eigen::MatrixXd embedding_matrix(const LabelSpace & space, const EmbeddingTable & table);

nlohmann::json to_json(const LabelSpace & space);
LabelSpace label_space_from_json(const nlohmann::json & j);

nlohmann::json to_json(const EmbeddingTable & table);
EmbeddingTable embedding_table_from_json(const nlohmann::json & j);

}  // namespace uniworld
