#include "aqt/checkpoint.hpp"

#include <fstream>

namespace aqt::model {

namespace {

AqtConfig resolved(AqtConfig config) {
  config.hidden_dim = config.model_dim();
  return config;
}

CheckpointHeader read_header(std::istream& in, const std::filesystem::path& path) {
  std::string magic(kCheckpointMagic.size(), '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kCheckpointMagic) throw IoError(path.string() + ": not a checkpoint file");
  const auto version = read_u32(in);
  if (version != kCheckpointVersion) {
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  CheckpointHeader header;
  header.kind = read_string(in);
  header.config = AqtConfig::from_key_values(parse_key_values(read_string(in)));
  return header;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

}  // namespace

bool same_architecture(const AqtConfig& a, const AqtConfig& b) { return resolved(a) == resolved(b); }

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const QNetwork<T>& net) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
  write_u32(out, kCheckpointVersion);
  write_string(out, net.kind());
  write_string(out, format_key_values(resolved(net.config()).to_key_values()));
  const auto params = net.parameters();
  write_u64(out, params.size());
  for (const auto& [name, tensor] : params) {
    write_string(out, name);
    write_tensor(out, tensor);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  auto in = open_input(path);
  return read_header(in, path);
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, QNetwork<T>& net) {
  auto in = open_input(path);
  const auto header = read_header(in, path);
  if (header.kind != net.kind()) {
    throw ConfigError(path.string() + ": checkpoint holds a '" + header.kind + "' network, expected '" + net.kind() +
                      "'");
  }
  if (!same_architecture(header.config, net.config())) {
    throw ConfigError(path.string() + ": checkpoint config does not match the network config");
  }
  auto params = net.parameters();
  const auto count = read_u64(in);
  if (count != params.size()) throw IoError(path.string() + ": parameter count mismatch");
  for (auto& [name, tensor] : params) {
    const auto stored_name = read_string(in);
    if (stored_name != name) throw IoError(path.string() + ": expected parameter " + name + ", found " + stored_name);
    const auto stored = read_tensor(in);
    if (stored.shape() != tensor.shape()) throw IoError(path.string() + ": shape mismatch for " + name);
    auto dst = tensor.data_mut();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(stored.data()[i]);
  }
}

template <typename T>
std::unique_ptr<QNetwork<T>> load_network(const std::filesystem::path& path) {
  const auto header = read_checkpoint_header(path);
  nn::Rng scratch(0);
  auto net = make_network<T>(header.kind, header.config, scratch);
  load_checkpoint(path, *net);
  return net;
}

template void save_checkpoint<float>(const std::filesystem::path&, const QNetwork<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const QNetwork<double>&);
template void load_checkpoint<float>(const std::filesystem::path&, QNetwork<float>&);
template void load_checkpoint<double>(const std::filesystem::path&, QNetwork<double>&);
template std::unique_ptr<QNetwork<float>> load_network<float>(const std::filesystem::path&);
template std::unique_ptr<QNetwork<double>> load_network<double>(const std::filesystem::path&);

}  // namespace aqt::model
