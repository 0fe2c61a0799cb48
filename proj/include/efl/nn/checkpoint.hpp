#pragma once

#include "efl/nn/layers.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>

namespace efl::nn {

inline constexpr int kCheckpointFormatVersion = 1;

// Binary layout: 8-byte magic "EFLCKPT\0", u32 format version, u64 header
// length, UTF-8 JSON header {format_version, kind, config, params[]}, then
// every parameter as little-endian float64 in manifest order.
struct Checkpoint {
  int format_version = kCheckpointFormatVersion;
  std::string kind;
  nlohmann::json config;
  std::map<std::string, Tensor> tensors;
  std::vector<std::string> order;
};

std::string encode_checkpoint(const std::string& kind, const nlohmann::json& config, const ParamList& params);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& config,
                     const ParamList& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies tensors into matching parameters; names and shapes must agree.
void restore_params(const Checkpoint& ckpt, const ParamList& params, const std::string& prefix = "");

}  // namespace efl::nn
