#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "aqt/env.hpp"
#include "aqt/model.hpp"

namespace aqt::viz {

/// Final encoder layer's self-attention averaged over heads and query rows,
/// reshaped to the patch grid [gh, gw].
Tensor encoder_map(const model::AttentionRecord<float>& record);
/// Same reduction per head: [heads, gh, gw].
Tensor encoder_head_maps(const model::AttentionRecord<float>& record);
/// Final decoder layer's cross-attention row for `action`, averaged over heads: [gh, gw].
Tensor action_map(const model::AttentionRecord<float>& record, std::size_t action);
/// Per-head cross-attention rows for `action`: [heads, gh, gw].
Tensor action_head_maps(const model::AttentionRecord<float>& record, std::size_t action);

/// Bilinear resize of a [h, w] map with half-pixel centres and clamped edges.
Tensor bilinear_resize(const Tensor& map, std::size_t height, std::size_t width);
/// Min-max scaling to [0, 1]; a constant map is returned unchanged.
Tensor normalize_min_max(const Tensor& map);
/// bilinear_resize followed by normalize_min_max.
Tensor upsample(const Tensor& patch_map, std::size_t height, std::size_t width);

/// "<name> Q=<q to 3 decimals>" with " [selected]" appended for the greedy action.
std::string format_caption(const std::string& action_name, double q_value, bool selected);
// "Left Q=0.532 [selected]" -> "Left_Q=0.532_selected".
std::string caption_filename(const std::string& caption);
std::string format_q(double q_value);

struct HeatmapExport {
  env::Frame base;      // newest frame of the observation stack
  Tensor overlay;       // [H, W] in [0, 1]
  Tensor raw;           // [gh, gw] attention as captured, before normalisation
  Tensor raw_heads;     // [heads, gh, gw]
  std::string caption;
  double q_value = 0;   // state value for the encoder map
  bool selected = false;
};

struct FrameVisualization {
  HeatmapExport encoder;
  std::vector<HeatmapExport> actions;
  std::vector<std::string> action_names;
  std::vector<float> q_values;
  float state_value = 0;
  int selected = 0;
};

/// One eval-mode forward pass on `obs`; builds the encoder map and one
/// captioned map per action.
FrameVisualization visualize_frame(model::AqtNetwork<float>& net, const env::Observation& obs,
                                   const std::vector<std::string>& action_names);

/// Writes <stem>.ppm (frame blended with the overlay, caption as a header
/// comment), <stem>.tensor (raw patch map), <stem>_overlay.tensor,
/// <stem>_heads.tensor and <stem>.txt (caption).
void render(const HeatmapExport& heatmap, const std::filesystem::path& stem);

/// Writes encoder.*, action_<k>.* and meta.txt into `dir`.
void write_frame(const FrameVisualization& frame, const std::filesystem::path& dir);

/// Binary P6 image: grey base in all channels with the overlay added to red.
void write_ppm(const std::filesystem::path& path, const env::Frame& base, const Tensor& overlay,
               const std::string& comment);

}  // namespace aqt::viz
