#pragma once

// Checkpoint files: a magic line, one line of JSON metadata, then the tensors
// as row-major little-endian float64 in the order the metadata lists them.
//
//   F2DCKPT
//   {"format_version":1,"kind":"encoder","metadata":{...},"tensors":[...]}
//   <binary payload>

#include "f2d/nn.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace f2d {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  std::string kind;
  int format_version = kCheckpointFormatVersion;
  nlohmann::json metadata;
  std::vector<std::pair<std::string, Eigen::MatrixXd>> tensors;

  const Eigen::MatrixXd& tensor(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const std::string& kind,
                      const nlohmann::json& metadata, const nn::NamedParameters& params);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies tensors into parameters by name; every parameter must be present
/// with a matching shape.
void load_parameters(const Checkpoint& ckpt, const nn::NamedParameters& params);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_hex(std::string_view bytes);

}  // namespace f2d
