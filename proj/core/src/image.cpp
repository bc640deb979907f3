#include "f2d/image.hpp"

#include "f2d/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace f2d {

Image::Image(int width, int height, int channels, double fill)
    : width_(width), height_(height), channels_(channels) {
  if (width <= 0 || height <= 0 || channels <= 0) {
    throw ShapeError("image dimensions must be positive");
  }
  data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
}

Image Image::flipped_horizontally() const {
  Image out(width_, height_, channels_);
  for (int y = 0; y < height_; ++y) {
    for (int x = 0; x < width_; ++x) {
      for (int c = 0; c < channels_; ++c) out.at(y, x, c) = at(y, width_ - 1 - x, c);
    }
  }
  return out;
}

void Image::clamp() {
  for (auto& v : data_) v = std::clamp(v, 0.0, 1.0);
}

double Image::mean() const {
  double s = 0.0;
  for (int y = 0; y < height_; ++y) {
    for (int x = 0; x < width_; ++x) s += at(y, x, 0);
  }
  return s / (static_cast<double>(width_) * height_);
}

double Image::stddev() const {
  const double mu = mean();
  double s = 0.0;
  for (int y = 0; y < height_; ++y) {
    for (int x = 0; x < width_; ++x) s += (at(y, x, 0) - mu) * (at(y, x, 0) - mu);
  }
  return std::sqrt(s / (static_cast<double>(width_) * height_));
}

Eigen::MatrixXd Image::patches(int patch_size) const {
  if (patch_size <= 0 || width_ % patch_size != 0 || height_ % patch_size != 0) {
    throw ShapeError("patch size must divide the image size");
  }
  const int px = width_ / patch_size, py = height_ / patch_size;
  Eigen::MatrixXd out(px * py, patch_size * patch_size * channels_);
  for (int by = 0; by < py; ++by) {
    for (int bx = 0; bx < px; ++bx) {
      Eigen::Index col = 0;
      for (int y = 0; y < patch_size; ++y) {
        for (int x = 0; x < patch_size; ++x) {
          for (int c = 0; c < channels_; ++c) {
            out(by * px + bx, col++) = at(by * patch_size + y, bx * patch_size + x, c);
          }
        }
      }
    }
  }
  return out;
}

Image Image::downsampled(int factor) const {
  if (factor <= 0 || width_ % factor != 0 || height_ % factor != 0) {
    throw ShapeError("downsample factor must divide the image size");
  }
  Image out(width_ / factor, height_ / factor, channels_);
  const double area = static_cast<double>(factor) * factor;
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      for (int c = 0; c < channels_; ++c) {
        double s = 0.0;
        for (int dy = 0; dy < factor; ++dy) {
          for (int dx = 0; dx < factor; ++dx) s += at(y * factor + dy, x * factor + dx, c);
        }
        out.at(y, x, c) = s / area;
      }
    }
  }
  return out;
}

namespace {

struct PngImageDeleter {
  void operator()(png_image* img) const {
    png_image_free(img);
    delete img;
  }
};

}  // namespace

Image load_png(const std::filesystem::path& path) {
  std::unique_ptr<png_image, PngImageDeleter> img(new png_image{});
  img->version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(img.get(), path.string().c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + img->message);
  }
  const bool gray = (img->format & PNG_FORMAT_FLAG_COLOR) == 0;
  img->format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const int channels = gray ? 1 : 3;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(*img));
  if (!png_image_finish_read(img.get(), nullptr, buffer.data(), 0, nullptr)) {
    throw IoError("cannot decode PNG " + path.string() + ": " + img->message);
  }
  Image out(static_cast<int>(img->width), static_cast<int>(img->height), channels);
  for (std::size_t i = 0; i < buffer.size(); ++i) out.data()[i] = buffer[i] / 255.0;
  return out;
}

void save_png(const std::filesystem::path& path, const Image& image) {
  if (image.channels() != 1 && image.channels() != 3) {
    throw ShapeError("PNG output supports 1 or 3 channels");
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width());
  img.height = static_cast<png_uint_32>(image.height());
  img.format = image.channels() == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(image.data().size());
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    buffer[i] = static_cast<png_byte>(std::lround(std::clamp(image.data()[i], 0.0, 1.0) * 255.0));
  }
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buffer.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot write PNG " + path.string() + ": " + msg);
  }
}

Eigen::MatrixXd load_mask_png(const std::filesystem::path& path) {
  const Image img = load_png(path);
  Eigen::MatrixXd mask(img.height(), img.width());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const double v = img.at(y, x, 0);
      if (v != 0.0 && v != 1.0) {
        throw ParseError("mask " + path.string() + " is not binary", 0);
      }
      mask(y, x) = v;
    }
  }
  return mask;
}

void save_mask_png(const std::filesystem::path& path, const Eigen::MatrixXd& mask) {
  Image img(static_cast<int>(mask.cols()), static_cast<int>(mask.rows()), 1);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) img.at(y, x) = mask(y, x) != 0.0 ? 1.0 : 0.0;
  }
  save_png(path, img);
}

}  // namespace f2d
