#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "aqt/model.hpp"
#include "aqt/serialize.hpp"

// Checkpoint layout: magic "AQTCKPT1", u32 version, network kind, model config
// as key = value text, u64 parameter count, then (name, tensor) pairs.
namespace aqt::model {

inline constexpr std::string_view kCheckpointMagic = "AQTCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
  std::string kind;
  AqtConfig config;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const QNetwork<T>& net);

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

/// Loads parameters into `net`. Throws ConfigError when the stored kind or
/// config differs from the network's, IoError on malformed files.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, QNetwork<T>& net);

/// Builds a network from the stored header and loads its parameters.
template <typename T>
std::unique_ptr<QNetwork<T>> load_network(const std::filesystem::path& path);

/// Configs compare equal after resolving the hidden_dim default.
bool same_architecture(const AqtConfig& a, const AqtConfig& b);

}  // namespace aqt::model
