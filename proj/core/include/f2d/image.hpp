#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <vector>

namespace f2d {

/// Interleaved HWC image with intensities in [0, 1].
class Image {
 public:
  Image() = default;
  Image(int width, int height, int channels, double fill = 0.0);

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  bool empty() const { return data_.empty(); }

  double& at(int y, int x, int c = 0) { return data_[index(y, x, c)]; }
  double at(int y, int x, int c = 0) const { return data_[index(y, x, c)]; }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  Image flipped_horizontally() const;
  /// Clamps every value into [0, 1].
  void clamp();
  /// Mean over pixels of the first channel.
  double mean() const;
  double stddev() const;

  /// Non-overlapping patches, one row per patch in raster order, each row
  /// holding the patch pixels in (y, x, c) order.
  Eigen::MatrixXd patches(int patch_size) const;

  /// Average-pools to (height/factor, width/factor); sizes must divide.
  Image downsampled(int factor) const;

  bool operator==(const Image& other) const = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

/// 8-bit PNG read/write (gray or RGB). Values are quantized on write.
Image load_png(const std::filesystem::path& path);
void save_png(const std::filesystem::path& path, const Image& image);

/// Binary mask helpers: a PNG whose nonzero pixels are foreground.
Eigen::MatrixXd load_mask_png(const std::filesystem::path& path);
void save_mask_png(const std::filesystem::path& path, const Eigen::MatrixXd& mask);

}  // namespace f2d
