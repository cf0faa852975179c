#include "spfl/report.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "spfl/errors.hpp"
#include "spfl/losses.hpp"

namespace spfl {

void write_metrics_csv(const std::string& path,
                       const std::vector<RoundRecord>& records) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os << "round,ma,asr,ba";
  size_t per_client = records.empty() ? 0 : records[0].client_ma.size();
  if (per_client > 1)
    for (size_t i = 0; i < per_client; ++i)
      os << ",ma_c" << i << ",asr_c" << i;
  os << '\n';
  os << std::fixed << std::setprecision(6);
  for (const auto& r : records) {
    os << r.round << ',' << r.ma << ',' << r.asr << ',' << r.ba;
    if (per_client > 1)
      for (size_t i = 0; i < per_client; ++i)
        os << ',' << r.client_ma[i] << ',' << r.client_asr[i];
    os << '\n';
  }
  if (!os) throw FormatError("short write to " + path);
}

std::vector<RoundRecord> read_metrics_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open metrics file " + path);
  std::string line;
  if (!std::getline(is, line) || line.rfind("round,ma,asr,ba", 0) != 0)
    throw FormatError(path + ": missing metrics header");
  std::vector<RoundRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() < 4) throw FormatError(path + ": short metrics row");
    RoundRecord r;
    r.round = std::stoi(cells[0]);
    r.ma = std::stod(cells[1]);
    r.asr = std::stod(cells[2]);
    r.ba = std::stod(cells[3]);
    for (size_t i = 4; i + 1 < cells.size(); i += 2) {
      r.client_ma.push_back(std::stod(cells[i]));
      r.client_asr.push_back(std::stod(cells[i + 1]));
    }
    out.push_back(std::move(r));
  }
  if (out.empty()) throw FormatError(path + ": no metric rows");
  return out;
}

namespace {

const char* kSeriesColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                               "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

}  // namespace

void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::string& y_label,
                          const std::vector<ChartSeries>& series) {
  if (series.empty() || series[0].values.empty())
    throw FormatError("no data to plot for " + path);
  const int W = 640, H = 420;
  const int L = 60, R = 20, T = 40, B = 50;
  const double pw = W - L - R, ph = H - T - B;
  size_t rounds = 0;
  for (const auto& s : series) rounds = std::max(rounds, s.values.size());

  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='"
     << H << "' viewBox='0 0 " << W << ' ' << H << "'>\n";
  os << "<rect width='" << W << "' height='" << H << "' fill='white'/>\n";
  os << "<text x='" << W / 2 << "' y='22' text-anchor='middle' "
     << "font-family='sans-serif' font-size='15'>" << title << "</text>\n";
  // axes and grid: y fixed to [0,1] (all metrics are rates)
  for (int i = 0; i <= 5; ++i) {
    double v = i / 5.0;
    double y = T + ph * (1.0 - v);
    os << "<line x1='" << L << "' y1='" << y << "' x2='" << W - R << "' y2='"
       << y << "' stroke='#dddddd'/>\n";
    os << "<text x='" << L - 8 << "' y='" << y + 4
       << "' text-anchor='end' font-family='sans-serif' font-size='11'>"
       << std::fixed << std::setprecision(1) << v << "</text>\n";
  }
  int xticks = std::min<int>(10, static_cast<int>(rounds));
  for (int i = 0; i <= xticks; ++i) {
    double frac = xticks == 0 ? 0.0 : static_cast<double>(i) / xticks;
    int round_idx = static_cast<int>(std::lround(frac * (rounds - 1)));
    double x = L + pw * (rounds > 1 ? static_cast<double>(round_idx) /
                                          static_cast<double>(rounds - 1)
                                    : 0.0);
    os << "<text x='" << x << "' y='" << H - B + 18
       << "' text-anchor='middle' font-family='sans-serif' font-size='11'>"
       << round_idx << "</text>\n";
  }
  os << "<text x='" << W / 2 << "' y='" << H - 12
     << "' text-anchor='middle' font-family='sans-serif' font-size='12'>"
     << "round</text>\n";
  os << "<text x='16' y='" << T + ph / 2
     << "' text-anchor='middle' font-family='sans-serif' font-size='12' "
     << "transform='rotate(-90 16 " << T + ph / 2 << ")'>" << y_label
     << "</text>\n";
  os << "<rect x='" << L << "' y='" << T << "' width='" << pw << "' height='"
     << ph << "' fill='none' stroke='#333333'/>\n";

  for (size_t s = 0; s < series.size(); ++s) {
    const auto& sr = series[s];
    const char* color = kSeriesColors[s % 8];
    os << "<polyline fill='none' stroke='" << color
       << "' stroke-width='1.8' points='";
    for (size_t i = 0; i < sr.values.size(); ++i) {
      double x = L + pw * (sr.values.size() > 1
                               ? static_cast<double>(i) /
                                     static_cast<double>(sr.values.size() - 1)
                               : 0.0);
      double v = std::min(std::max(sr.values[i], 0.0), 1.0);
      double y = T + ph * (1.0 - v);
      os << x << ',' << y << ' ';
    }
    os << "'/>\n";
    double ly = T + 16 + 16 * static_cast<double>(s);
    os << "<line x1='" << L + 10 << "' y1='" << ly << "' x2='" << L + 34
       << "' y2='" << ly << "' stroke='" << color << "' stroke-width='2'/>\n";
    os << "<text x='" << L + 40 << "' y='" << ly + 4
       << "' font-family='sans-serif' font-size='11'>" << sr.label
       << "</text>\n";
  }
  os << "</svg>\n";
  if (!os) throw FormatError("short write to " + path);
}

void write_pgm(const std::string& path, const std::vector<float>& gray, int h,
               int w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os << "P5\n" << w << ' ' << h << "\n255\n";
  for (float v : gray)
    os.put(static_cast<char>(
        std::lround(std::min(std::max(v, 0.0f), 1.0f) * 255.0f)));
  if (!os) throw FormatError("short write to " + path);
}

void write_ppm(const std::string& path, const std::vector<float>& rgb, int h,
               int w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os << "P6\n" << w << ' ' << h << "\n255\n";
  for (float v : rgb)
    os.put(static_cast<char>(
        std::lround(std::min(std::max(v, 0.0f), 1.0f) * 255.0f)));
  if (!os) throw FormatError("short write to " + path);
}

std::vector<float> upsample_bilinear(const float* src, int sh, int sw, int h,
                                     int w) {
  std::vector<float> out(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    float fy = sh > 1 ? static_cast<float>(y) * (sh - 1) / (h - 1) : 0.0f;
    int y0 = static_cast<int>(fy);
    int y1 = std::min(y0 + 1, sh - 1);
    float wy = fy - static_cast<float>(y0);
    for (int x = 0; x < w; ++x) {
      float fx = sw > 1 ? static_cast<float>(x) * (sw - 1) / (w - 1) : 0.0f;
      int x0 = static_cast<int>(fx);
      int x1 = std::min(x0 + 1, sw - 1);
      float wx = fx - static_cast<float>(x0);
      float a = src[y0 * sw + x0] * (1 - wx) + src[y0 * sw + x1] * wx;
      float b = src[y1 * sw + x0] * (1 - wx) + src[y1 * sw + x1] * wx;
      out[static_cast<size_t>(y) * w + x] = a * (1 - wy) + b * wy;
    }
  }
  return out;
}

namespace {

// piecewise blue->cyan->yellow->red
void colormap(float v, float* r, float* g, float* b) {
  v = std::min(std::max(v, 0.0f), 1.0f);
  *r = std::min(std::max(1.5f - std::abs(4.0f * v - 3.0f), 0.0f), 1.0f);
  *g = std::min(std::max(1.5f - std::abs(4.0f * v - 2.0f), 0.0f), 1.0f);
  *b = std::min(std::max(1.5f - std::abs(4.0f * v - 1.0f), 0.0f), 1.0f);
}

}  // namespace

std::vector<float> overlay_heatmap(const float* image, int channels, int h,
                                   int w, const float* map, int mh, int mw) {
  std::vector<float> up = upsample_bilinear(map, mh, mw, h, w);
  float peak = 0.0f;
  for (float v : up) peak = std::max(peak, v);
  if (peak > 0.0f)
    for (float& v : up) v /= peak;
  std::vector<float> out(static_cast<size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      size_t p = static_cast<size_t>(y) * w + x;
      float r, g, b;
      colormap(up[p], &r, &g, &b);
      float ir, ig, ib;
      if (channels == 1) {
        ir = ig = ib = image[p];
      } else {
        ir = image[p];
        ig = image[static_cast<size_t>(h) * w + p];
        ib = image[2 * static_cast<size_t>(h) * w + p];
      }
      out[p * 3 + 0] = 0.5f * ir + 0.5f * r;
      out[p * 3 + 1] = 0.5f * ig + 0.5f * g;
      out[p * 3 + 2] = 0.5f * ib + 0.5f * b;
    }
  return out;
}

AttentionReport attention_report(const Engine<float>& engine,
                                 const Params<float>& params,
                                 const Tensor<float>& inputs,
                                 const TriggerSpec& trigger,
                                 const std::string& out_dir, int image_count) {
  std::filesystem::create_directories(out_dir);
  const int n = inputs.dim(0);
  const int c = inputs.dim(1), h = inputs.dim(2), w = inputs.dim(3);
  std::vector<int> layers = engine.attention_layers();
  if (layers.empty()) throw ConfigError("network has no spatial layer");
  int layer = layers.back();

  Tensor<float> triggered = inputs;
  stamp_trigger(trigger, triggered);

  // visualization-time class: the model's own prediction per input
  auto predict = [&](const Tensor<float>& x) {
    Mat<float> z = engine.forward(params, x, nullptr);
    std::vector<int> cls(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
      cls[static_cast<size_t>(i)] = argmax_lowest(
          z.ptr() + static_cast<size_t>(i) * engine.spec().num_classes,
          engine.spec().num_classes);
    return cls;
  };
  std::vector<int> clean_cls = predict(inputs);
  std::vector<int> trig_cls = predict(triggered);

  Tensor<float> clean_maps =
      attention_map(engine, params, inputs, clean_cls, layer);
  Tensor<float> trig_maps =
      attention_map(engine, params, triggered, trig_cls, layer);

  AttentionReport report;
  report.mean_distance =
      static_cast<double>(attention_distance(clean_maps, trig_maps));

  const int mh = clean_maps.dim(1), mw = clean_maps.dim(2);
  const size_t px = static_cast<size_t>(c) * h * w;
  const size_t mpx = static_cast<size_t>(mh) * mw;
  for (int i = 0; i < std::min(image_count, n); ++i) {
    auto clean_img = overlay_heatmap(inputs.ptr() + static_cast<size_t>(i) * px,
                                     c, h, w,
                                     clean_maps.ptr() + static_cast<size_t>(i) * mpx,
                                     mh, mw);
    auto trig_img = overlay_heatmap(
        triggered.ptr() + static_cast<size_t>(i) * px, c, h, w,
        trig_maps.ptr() + static_cast<size_t>(i) * mpx, mh, mw);
    std::string base = out_dir + "/sample" + std::to_string(i);
    write_ppm(base + "_clean.ppm", clean_img, h, w);
    write_ppm(base + "_triggered.ppm", trig_img, h, w);
    report.images.push_back(base + "_clean.ppm");
    report.images.push_back(base + "_triggered.ppm");
  }
  return report;
}

}  // namespace spfl
