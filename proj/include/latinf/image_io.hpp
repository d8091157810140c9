#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "latinf/tensor.hpp"

namespace latinf {

// Rank-4 [batch, channels, height, width] batch of unit-interval pixels.
class ImageBatch {
 public:
  ImageBatch() = default;
  explicit ImageBatch(Tensor pixels);
  static ImageBatch empty(std::int64_t channels, std::int64_t height, std::int64_t width);

  std::int64_t size() const { return pixels_.dim(0); }
  std::int64_t channels() const { return pixels_.dim(1); }
  std::int64_t height() const { return pixels_.dim(2); }
  std::int64_t width() const { return pixels_.dim(3); }

  const Tensor& tensor() const { return pixels_; }
  Tensor& tensor() { return pixels_; }

  ImageBatch slice(std::int64_t begin, std::int64_t end) const { return ImageBatch(pixels_.slice_rows(begin, end)); }
  // Single image as [C, H, W].
  Tensor image(std::int64_t i) const;
  bool in_unit_interval(double tol = 0.0) const;

 private:
  Tensor pixels_{Shape{0, 0, 0, 0}};
};

ImageBatch stack_images(std::span<const Tensor> chw_images);

// Binary netpbm (P5 grayscale / P6 RGB, maxval <= 255 or 65535) to [C, H, W] in [0, 1].
Tensor read_netpbm(const std::filesystem::path& path);
// Writes [C, H, W] (C = 1 or 3) as 8-bit P5/P6, rounding to the nearest level.
void write_netpbm(const std::filesystem::path& path, const Tensor& chw);

// Bilinear resampling of [C, H, W] with half-pixel centers.
Tensor resize_bilinear(const Tensor& chw, std::int64_t height, std::int64_t width);

// Loads and (if needed) resizes every image to [channels, height, width].
// Grayscale files are replicated across channels when channels == 3.
ImageBatch load_images(std::span<const std::filesystem::path> paths, std::int64_t channels, std::int64_t height,
                       std::int64_t width);

}  // namespace latinf
