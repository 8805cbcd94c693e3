#include "uniworld/labelspace.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "uniworld/errors.hpp"

namespace uniworld {

LabelSpace::LabelSpace(std::vector<std::string> keys) : keys_(std::move(keys))
{
  for (std::size_t i = 0; i < keys_.size(); ++i) {
    if (keys_[i].empty()) {
      throw std::invalid_argument("label space keys must be non-empty");
    }
    if (!index_.emplace(keys_[i], i).second) {
      throw std::invalid_argument("duplicate key in label space: " + keys_[i]);
    }
  }
}

std::size_t LabelSpace::index_of(const std::string & key) const
{
  auto it = index_.find(key);
  if (it == index_.end()) {
    throw std::out_of_range("category not in label space: " + key);
  }
  return it->second;
}

LabelSpace union_spaces(std::span<const LabelSpace> spaces)
{
  std::vector<std::string> keys;
  std::unordered_set<std::string> seen;
  for (const auto & s : spaces) {
    for (const auto & k : s.keys()) {
      if (seen.insert(k).second) {
        keys.push_back(k);
      }
    }
  }
  return LabelSpace(std::move(keys));
}

SpaceSplit novel_split(const LabelSpace & test, std::span<const LabelSpace> train_spaces)
{
  const LabelSpace seen = union_spaces(train_spaces);
  std::vector<std::string> base;
  std::vector<std::string> novel;
  for (const auto & k : test.keys()) {
    (seen.contains(k) ? base : novel).push_back(k);
  }
  return SpaceSplit{LabelSpace(std::move(base)), LabelSpace(std::move(novel))};
}

void EmbeddingTable::add(const std::string & key, const Eigen::VectorXd & vec)
{
  if (key.empty()) {
    throw std::invalid_argument("embedding key must be non-empty");
  }
  if (vec.size() != dim_) {
    throw std::invalid_argument("embedding for '" + key + "' has dimension " +
                                std::to_string(vec.size()) + ", table expects " +
                                std::to_string(dim_));
  }
  if (!vec.allFinite() || std::abs(vec.norm() - 1.0) > 1e-6) {
    throw std::invalid_argument("embedding for '" + key + "' is not unit-norm");
  }
  vectors_[key] = vec;
}

const Eigen::VectorXd & EmbeddingTable::at(const std::string & key) const
{
  auto it = vectors_.find(key);
  if (it == vectors_.end()) {
    throw MissingEmbeddingError(key);
  }
  return it->second;
}

Eigen::MatrixXd embedding_matrix(const LabelSpace & space, const EmbeddingTable & table)
{
  Eigen::MatrixXd m(static_cast<Eigen::Index>(space.size()), table.dim());
  for (std::size_t i = 0; i < space.size(); ++i) {
    m.row(static_cast<Eigen::Index>(i)) = table.at(space[i]).transpose();
  }
  return m;
}

nlohmann::json to_json(const LabelSpace & space)
{
  return nlohmann::json{{"keys", space.keys()}};
}

LabelSpace label_space_from_json(const nlohmann::json & j)
{
  try {
    return LabelSpace(j.at("keys").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception & e) {
    throw FormatError(std::string("label space: ") + e.what());
  } catch (const std::invalid_argument & e) {
    throw FormatError(std::string("label space: ") + e.what());
  }
}

nlohmann::json to_json(const EmbeddingTable & table)
{
  nlohmann::json vectors = nlohmann::json::object();
  for (const auto & [key, vec] : table.vectors()) {
    vectors[key] = std::vector<double>(vec.data(), vec.data() + vec.size());
  }
  return nlohmann::json{{"dim", table.dim()}, {"vectors", vectors}};
}

EmbeddingTable embedding_table_from_json(const nlohmann::json & j)
{
  try {
    EmbeddingTable table(j.at("dim").get<int>());
    for (const auto & [key, arr] : j.at("vectors").items()) {
      const auto values = arr.get<std::vector<double>>();
      table.add(key, Eigen::Map<const Eigen::VectorXd>(values.data(),
                                                       static_cast<Eigen::Index>(values.size())));
    }
    return table;
  } catch (const nlohmann::json::exception & e) {
    throw FormatError(std::string("embedding table: ") + e.what());
  } catch (const std::invalid_argument & e) {
    throw FormatError(std::string("embedding table: ") + e.what());
  }
}

}  // namespace uniworld
