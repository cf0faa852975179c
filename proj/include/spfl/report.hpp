#pragma once

#include <string>
#include <vector>

#include "spfl/attacks.hpp"
#include "spfl/net.hpp"
#include "spfl/sim.hpp"

namespace spfl {

// metrics.csv: header round,ma,asr,ba plus optional per-client columns,
// one row per round, 6 decimal places.
void write_metrics_csv(const std::string& path,
                       const std::vector<RoundRecord>& records);
std::vector<RoundRecord> read_metrics_csv(const std::string& path);

// One polyline per series over rounds, rendered as a standalone SVG.
struct ChartSeries {
  std::string label;
  std::vector<double> values;
};
void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::string& y_label,
                          const std::vector<ChartSeries>& series);

// Binary portable images.
void write_pgm(const std::string& path, const std::vector<float>& gray, int h,
               int w);
void write_ppm(const std::string& path, const std::vector<float>& rgb, int h,
               int w);

// Bilinearly upsample a map to (h, w).
std::vector<float> upsample_bilinear(const float* src, int sh, int sw, int h,
                                     int w);

// Input image with the normalized attention map overlaid at 50% alpha.
std::vector<float> overlay_heatmap(const float* image, int channels, int h,
                                   int w, const float* map, int mh, int mw);

struct AttentionReport {
  double mean_distance = 0;           // mean L2 clean-vs-triggered distance
  std::vector<std::string> images;    // written files
};

// Grad-CAM maps at the default attention layer for clean and triggered
// copies of the given samples, heatmap overlays for the first `image_count`
// of them, and the mean clean-vs-triggered map distance. The map class is
// the model's own prediction for each input.
AttentionReport attention_report(const Engine<float>& engine,
                                 const Params<float>& params,
                                 const Tensor<float>& inputs,
                                 const TriggerSpec& trigger,
                                 const std::string& out_dir, int image_count);

}  // namespace spfl
