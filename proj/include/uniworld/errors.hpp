#pragma once

#include <stdexcept>
#include <string>

namespace uniworld {

/// Invalid or infeasible configuration (benchmark splits, training knobs, CLI input).
class ConfigError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

/// A category key was looked up in an embedding table that does not register it.
class MissingEmbeddingError : public std::runtime_error
{
public:
  explicit MissingEmbeddingError(const std::string & key)
    : std::runtime_error("missing embedding for category '" + key + "'"), key_(key)
  {
  }

  const std::string & key() const noexcept { return key_; }

private:
  std::string key_;
};

/// Malformed file on disk (dataset manifests, checkpoints, detection files).
class FormatError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

}  // namespace uniworld
