#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "roe/tensor.hpp"

namespace roe {

struct RoeModel;

/// Container: a text manifest
///   ROE-CHECKPOINT 1
///   meta <key> <value...>
///   tensor <name> f64 <rank> <dims...>
///   data
/// followed by every tensor's values as little-endian IEEE doubles, in
/// manifest order.
struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const std::string* find_meta(const std::string& key) const;
  const std::string& meta_or_throw(const std::string& key) const;
  const Tensor* find_tensor(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Model parameters in module order, with the model config under meta "model_config".
Checkpoint model_checkpoint(RoeModel& model);
/// Copies every parameter from `ckpt`. Missing names or shape differences
/// raise CheckpointError naming the parameter.
void load_parameters(RoeModel& model, const Checkpoint& ckpt);
RoeModel model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace roe
