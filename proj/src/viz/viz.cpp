#include "aqt/viz.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <tuple>

#include "aqt/keyvalue.hpp"
#include "aqt/serialize.hpp"

namespace aqt::viz {

namespace {

constexpr const char* kEncoderReduction = "mean over heads and query rows of the final encoder layer";
constexpr const char* kActionReduction = "mean over heads of the final decoder layer, one query row per action";

void check_record(const model::AttentionRecord<float>& record) {
  if (record.encoder_self.dim() != 4 || record.decoder_cross.dim() != 4) {
    throw DimensionError("attention record needs [layers, heads, rows, L] tensors");
  }
  const std::size_t tokens = record.grid_height * record.grid_width;
  if (record.encoder_self.shape()[3] != tokens || record.decoder_cross.shape()[3] != tokens) {
    throw DimensionError("attention width does not match the patch grid");
  }
}

// Row-averaged attention of the final layer, per head: [heads, L].
std::vector<double> final_layer_rows(const Tensor& attention, std::size_t row_begin, std::size_t row_end) {
  const auto& s = attention.shape();
  const std::size_t heads = s[1];
  const std::size_t rows = s[2];
  const std::size_t tokens = s[3];
  const float* last = attention.data().data() + (s[0] - 1) * heads * rows * tokens;
  std::vector<double> out(heads * tokens, 0.0);
  const double count = static_cast<double>(row_end - row_begin);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t r = row_begin; r < row_end; ++r)
      for (std::size_t l = 0; l < tokens; ++l) out[h * tokens + l] += last[(h * rows + r) * tokens + l] / count;
  return out;
}

Tensor head_mean(const std::vector<double>& per_head, std::size_t heads, std::size_t gh, std::size_t gw) {
  const std::size_t tokens = gh * gw;
  std::vector<float> out(tokens);
  for (std::size_t l = 0; l < tokens; ++l) {
    double acc = 0;
    for (std::size_t h = 0; h < heads; ++h) acc += per_head[h * tokens + l];
    out[l] = static_cast<float>(acc / static_cast<double>(heads));
  }
  return Tensor({gh, gw}, std::move(out));
}

Tensor as_heads(const std::vector<double>& per_head, std::size_t heads, std::size_t gh, std::size_t gw) {
  return Tensor({heads, gh, gw}, std::vector<float>(per_head.begin(), per_head.end()));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

Tensor encoder_map(const model::AttentionRecord<float>& record) {
  check_record(record);
  const auto& s = record.encoder_self.shape();
  return head_mean(final_layer_rows(record.encoder_self, 0, s[2]), s[1], record.grid_height, record.grid_width);
}

Tensor encoder_head_maps(const model::AttentionRecord<float>& record) {
  check_record(record);
  const auto& s = record.encoder_self.shape();
  return as_heads(final_layer_rows(record.encoder_self, 0, s[2]), s[1], record.grid_height, record.grid_width);
}

Tensor action_map(const model::AttentionRecord<float>& record, std::size_t action) {
  check_record(record);
  const auto& s = record.decoder_cross.shape();
  if (action >= s[2]) throw ContractError("action index outside the decoder rows");
  return head_mean(final_layer_rows(record.decoder_cross, action, action + 1), s[1], record.grid_height,
                   record.grid_width);
}

Tensor action_head_maps(const model::AttentionRecord<float>& record, std::size_t action) {
  check_record(record);
  const auto& s = record.decoder_cross.shape();
  if (action >= s[2]) throw ContractError("action index outside the decoder rows");
  return as_heads(final_layer_rows(record.decoder_cross, action, action + 1), s[1], record.grid_height,
                  record.grid_width);
}

Tensor bilinear_resize(const Tensor& map, std::size_t height, std::size_t width) {
  if (map.dim() != 2 || map.numel() == 0) throw DimensionError("bilinear_resize takes a non-empty [h, w] map");
  if (height == 0 || width == 0) throw DimensionError("target size must be positive");
  const std::size_t h = map.shape()[0];
  const std::size_t w = map.shape()[1];
  const auto src = map.data();
  auto coord = [](std::size_t i, std::size_t in, std::size_t out) {
    const double x = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    const double clamped = std::clamp(x, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(clamped));
    const std::size_t hi = std::min(lo + 1, in - 1);
    return std::tuple{lo, hi, clamped - static_cast<double>(lo)};
  };
  std::vector<float> out(height * width);
  for (std::size_t y = 0; y < height; ++y) {
    const auto [y0, y1, fy] = coord(y, h, height);
    for (std::size_t x = 0; x < width; ++x) {
      const auto [x0, x1, fx] = coord(x, w, width);
      const double top = (1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
      const double bottom = (1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
      out[y * width + x] = static_cast<float>((1 - fy) * top + fy * bottom);
    }
  }
  return Tensor({height, width}, std::move(out));
}

Tensor normalize_min_max(const Tensor& map) {
  const auto values = map.data();
  if (values.empty()) return map.detach();
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const float low = *lo;
  const float range = *hi - *lo;
  std::vector<float> out(values.begin(), values.end());
  if (range > 0) {
    for (auto& v : out) v = (v - low) / range;
  }
  return Tensor(map.shape(), std::move(out));
}

Tensor upsample(const Tensor& patch_map, std::size_t height, std::size_t width) {
  return normalize_min_max(bilinear_resize(patch_map, height, width));
}

std::string format_q(double q_value) {
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), "%.3f", q_value);
  std::string text = buffer;
  return text == "-0.000" ? "0.000" : text;
}

std::string format_caption(const std::string& action_name, double q_value, bool selected) {
  return action_name + " Q=" + format_q(q_value) + (selected ? " [selected]" : "");
}

std::string caption_filename(const std::string& caption) {
  std::string name;
  for (const char c : caption) {
    if (c == ' ') name += '_';
    else if (c != '[' && c != ']' && c != '/') name += c;
  }
  return name;
}

FrameVisualization visualize_frame(model::AqtNetwork<float>& net, const env::Observation& obs,
                                   const std::vector<std::string>& action_names) {
  const std::size_t actions = net.config().num_actions;
  if (action_names.size() != actions) throw ContractError("one action name per network action is required");
  const auto out = net.evaluate(obs.to_tensor<float>(), nn::Mode::Eval);
  const auto& base = *obs.frames.back();

  FrameVisualization frame;
  frame.action_names = action_names;
  frame.q_values.assign(out.q_values.data().begin(), out.q_values.data().end());
  frame.state_value = out.state_value;
  frame.selected = out.greedy_action();

  auto make = [&](Tensor raw, Tensor heads) {
    HeatmapExport e;
    e.base = base;
    e.overlay = upsample(raw, base.height, base.width);
    e.raw = std::move(raw);
    e.raw_heads = std::move(heads);
    return e;
  };
  frame.encoder = make(encoder_map(out.attention), encoder_head_maps(out.attention));
  frame.encoder.caption = "State value V=" + format_q(out.state_value);
  frame.encoder.q_value = out.state_value;
  for (std::size_t k = 0; k < actions; ++k) {
    auto e = make(action_map(out.attention, k), action_head_maps(out.attention, k));
    e.q_value = frame.q_values[k];
    e.selected = static_cast<int>(k) == frame.selected;
    e.caption = format_caption(action_names[k], e.q_value, e.selected);
    frame.actions.push_back(std::move(e));
  }
  return frame;
}

void write_ppm(const std::filesystem::path& path, const env::Frame& base, const Tensor& overlay,
               const std::string& comment) {
  if (overlay.shape() != Shape{base.height, base.width}) throw DimensionError("overlay must match the base frame");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n# " << comment << "\n" << base.width << " " << base.height << "\n255\n";
  const auto heat = overlay.data();
  for (std::size_t i = 0; i < base.pixels.size(); ++i) {
    const double grey = 0.5 * base.pixels[i];
    const double a = std::clamp(static_cast<double>(heat[i]), 0.0, 1.0);
    const unsigned char rgb[3] = {static_cast<unsigned char>(std::lround(grey + 127.5 * a)),
                                  static_cast<unsigned char>(std::lround(grey)),
                                  static_cast<unsigned char>(std::lround(grey * (1.0 - a)))};
    out.write(reinterpret_cast<const char*>(rgb), 3);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void render(const HeatmapExport& heatmap, const std::filesystem::path& stem) {
  const auto with = [&](const std::string& suffix) { return stem.parent_path() / (stem.filename().string() + suffix); };
  write_ppm(with(".ppm"), heatmap.base, heatmap.overlay, heatmap.caption);
  save_tensor(with(".tensor"), heatmap.raw);
  save_tensor(with("_overlay.tensor"), heatmap.overlay);
  save_tensor(with("_heads.tensor"), heatmap.raw_heads);
  write_text(with(".txt"), heatmap.caption + "\n");
}

void write_frame(const FrameVisualization& frame, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  render(frame.encoder, dir / "encoder");
  KeyValues meta{
      {"actions", std::to_string(frame.actions.size())},
      {"selected", std::to_string(frame.selected)},
      {"state_value", format_q(frame.state_value)},
      {"grid", std::to_string(frame.encoder.raw.shape()[0]) + "x" + std::to_string(frame.encoder.raw.shape()[1])},
      {"encoder.reduction", kEncoderReduction},
      {"action.reduction", kActionReduction},
      {"display", "bilinear upsample, then per-map min-max scaling; raw maps in <name>.tensor"},
  };
  for (std::size_t k = 0; k < frame.actions.size(); ++k) {
    const auto& e = frame.actions[k];
    render(e, dir / ("action_" + std::to_string(k)));
    const std::string prefix = "action_" + std::to_string(k) + ".";
    meta.emplace_back(prefix + "name", frame.action_names[k]);
    meta.emplace_back(prefix + "q", format_q(e.q_value));
    meta.emplace_back(prefix + "selected", e.selected ? "true" : "false");
    meta.emplace_back(prefix + "caption", e.caption);
  }
  write_text(dir / "meta.txt", format_key_values(meta));

  const auto captioned = dir / "captioned";
  std::filesystem::remove_all(captioned, ec);
  std::filesystem::create_directories(captioned, ec);
  if (ec) throw IoError("cannot create " + captioned.string() + ": " + ec.message());
  const auto link = [&](const HeatmapExport& e, const std::string& stem) {
    const auto target = captioned / (caption_filename(e.caption) + ".ppm");
    std::filesystem::create_symlink(std::filesystem::path("..") / (stem + ".ppm"), target, ec);
    if (ec) std::filesystem::copy_file(dir / (stem + ".ppm"), target, ec);
    if (ec) throw IoError("cannot write " + target.string() + ": " + ec.message());
  };
  link(frame.encoder, "encoder");
  for (std::size_t k = 0; k < frame.actions.size(); ++k) link(frame.actions[k], "action_" + std::to_string(k));
}

}  // namespace aqt::viz
