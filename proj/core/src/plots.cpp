#include "f2d/plots.hpp"

#include "f2d/errors.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace f2d::plots {

namespace {

using Rgb = std::array<double, 3>;

constexpr Rgb kWhite{1.0, 1.0, 1.0};
constexpr Rgb kAxis{0.15, 0.15, 0.15};
constexpr Rgb kGrid{0.88, 0.88, 0.88};
constexpr Rgb kSame{0.20, 0.55, 0.25};
constexpr Rgb kDiff{0.80, 0.25, 0.20};
constexpr Rgb kLine{0.15, 0.35, 0.75};

class Canvas {
 public:
  Canvas(int width, int height) : image_(width, height, 3, 1.0) {}

  void blend(int x, int y, const Rgb& c, double alpha = 1.0) {
    if (x < 0 || y < 0 || x >= image_.width() || y >= image_.height()) return;
    for (int k = 0; k < 3; ++k) {
      double& v = image_.at(y, x, k);
      v = (1.0 - alpha) * v + alpha * c[static_cast<std::size_t>(k)];
    }
  }

  void fill(int x0, int y0, int x1, int y1, const Rgb& c, double alpha = 1.0) {
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y) {
      for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) blend(x, y, c, alpha);
    }
  }

  void line(int x0, int y0, int x1, int y1, const Rgb& c) {
    const int steps = std::max({std::abs(x1 - x0), std::abs(y1 - y0), 1});
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      blend(static_cast<int>(std::lround(x0 + t * (x1 - x0))),
            static_cast<int>(std::lround(y0 + t * (y1 - y0))), c);
    }
  }

  const Image& image() const { return image_; }

 private:
  Image image_;
};

struct Frame {
  int left = 36;
  int right = 12;
  int top = 12;
  int bottom = 28;
  int width = 360;
  int height = 240;

  int plot_w() const { return width - left - right; }
  int plot_h() const { return height - top - bottom; }
  int px(double fx) const { return left + static_cast<int>(std::lround(fx * plot_w())); }
  int py(double fy) const { return top + plot_h() - static_cast<int>(std::lround(fy * plot_h())); }
};

void draw_axes(Canvas& c, const Frame& f, int gridlines) {
  for (int g = 1; g <= gridlines; ++g) {
    const int y = f.py(static_cast<double>(g) / gridlines);
    c.line(f.left, y, f.left + f.plot_w(), y, kGrid);
  }
  c.line(f.left, f.top, f.left, f.top + f.plot_h(), kAxis);
  c.line(f.left, f.top + f.plot_h(), f.left + f.plot_w(), f.top + f.plot_h(), kAxis);
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string layer_stem(int layer) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "similarity_layer_%02d", layer);
  return buf;
}

}  // namespace

Histogram histogram(const std::vector<double>& values, int bins, double lo, double hi) {
  if (bins < 1 || !(hi > lo)) throw ConfigError("invalid histogram range");
  Histogram h{lo, hi, std::vector<int>(static_cast<std::size_t>(bins), 0)};
  for (double v : values) {
    int b = static_cast<int>(std::floor((v - lo) / (hi - lo) * bins));
    b = std::clamp(b, 0, bins - 1);
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

std::vector<std::filesystem::path> emit_plots(const PlotSummary& summary,
                                              const std::filesystem::path& dir,
                                              const std::function<void(const std::string&)>& warn) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  auto skip = [&](const std::string& msg) {
    if (warn) warn(msg);
  };

  constexpr int kBins = 40;
  for (const identity::SimilarityDistribution& d : summary.distributions) {
    if (d.same_scores.empty() || d.diff_scores.empty()) {
      skip("skipping histogram for layer " + std::to_string(d.layer) + ": empty series");
      continue;
    }
    const Histogram same = histogram(d.same_scores, kBins);
    const Histogram diff = histogram(d.diff_scores, kBins);
    const int peak = std::max(*std::max_element(same.counts.begin(), same.counts.end()),
                              *std::max_element(diff.counts.begin(), diff.counts.end()));
    Frame f;
    Canvas canvas(f.width, f.height);
    draw_axes(canvas, f, 4);
    for (int b = 0; b < kBins; ++b) {
      const int x0 = f.px(static_cast<double>(b) / kBins) + 1;
      const int x1 = f.px(static_cast<double>(b + 1) / kBins) - 1;
      const auto bi = static_cast<std::size_t>(b);
      if (same.counts[bi] > 0) {
        canvas.fill(x0, f.py(0.0) - 1, x1, f.py(static_cast<double>(same.counts[bi]) / peak), kSame, 0.6);
      }
      if (diff.counts[bi] > 0) {
        canvas.fill(x0, f.py(0.0) - 1, x1, f.py(static_cast<double>(diff.counts[bi]) / peak), kDiff, 0.6);
      }
    }
    const std::filesystem::path png = dir / (layer_stem(d.layer) + ".png");
    save_png(png, canvas.image());

    nlohmann::json side = {{"kind", "similarity_histogram"},
                           {"layer", d.layer},
                           {"range", {same.lo, same.hi}},
                           {"bins", kBins},
                           {"same_counts", same.counts},
                           {"diff_counts", diff.counts},
                           {"auc", identity::roc_auc(d)},
                           {"provenance", summary.provenance}};
    write_json(dir / (layer_stem(d.layer) + ".json"), side);
    written.push_back(png);
  }

  if (summary.curve) {
    const auto& pts = summary.curve->points;
    if (pts.empty()) {
      skip("skipping upper-bound plot: empty curve");
    } else {
      Frame f;
      Canvas canvas(f.width, f.height);
      draw_axes(canvas, f, 5);
      // x is log2(N) spread over the frame; y spans [0, 1].
      const double xmax = std::max(1.0, std::log2(static_cast<double>(pts.back().first)));
      const double xmin = std::log2(static_cast<double>(pts.front().first));
      auto fx = [&](int n) {
        return xmax == xmin ? 0.5 : (std::log2(static_cast<double>(n)) - xmin) / (xmax - xmin);
      };
      nlohmann::json markers = nlohmann::json::array();
      for (std::size_t i = 0; i < pts.size(); ++i) {
        const int x = f.px(fx(pts[i].first));
        const int y = f.py(std::clamp(pts[i].second, 0.0, 1.0));
        if (i > 0) {
          canvas.line(f.px(fx(pts[i - 1].first)), f.py(std::clamp(pts[i - 1].second, 0.0, 1.0)), x,
                      y, kLine);
        }
        canvas.fill(x - 2, y - 2, x + 2, y + 2, kLine);
        markers.push_back({{"n", pts[i].first}, {"best_hmean", pts[i].second}});
      }
      const std::filesystem::path png = dir / "upper_bound.png";
      save_png(png, canvas.image());
      write_json(dir / "upper_bound.json", {{"kind", "upper_bound_curve"},
                                            {"markers", markers},
                                            {"provenance", summary.provenance}});
      written.push_back(png);
    }
  }
  return written;
}

}  // namespace f2d::plots
