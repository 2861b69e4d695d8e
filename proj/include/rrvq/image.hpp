#pragma once

#include <cstdint>
#include <vector>

#include "rrvq/tensor.hpp"

namespace rrvq {

/// 8-bit image, channel-major (CHW).
struct Image {
  int channels = 3;
  int side = 0;
  std::vector<std::uint8_t> levels;

  std::size_t subpixels() const { return levels.size(); }
};

struct ImageBatch {
  int n = 0;
  int channels = 3;
  int side = 0;
  std::vector<std::uint8_t> levels;  // NCHW

  static ImageBatch of(const std::vector<Image>& images, std::size_t begin, std::size_t count) {
    ImageBatch b;
    b.n = static_cast<int>(count);
    b.channels = images[begin].channels;
    b.side = images[begin].side;
    b.levels.reserve(count * images[begin].subpixels());
    for (std::size_t i = begin; i < begin + count; ++i) {
      if (images[i].channels != b.channels || images[i].side != b.side)
        throw Error("ImageBatch: images differ in shape");
      b.levels.insert(b.levels.end(), images[i].levels.begin(), images[i].levels.end());
    }
    return b;
  }

  static ImageBatch of(const std::vector<Image>& images) { return of(images, 0, images.size()); }

  /// Pixels scaled to [0,1], shape [N,C,side,side].
  Tensor unit_tensor() const {
    std::vector<double> d(levels.size());
    for (std::size_t i = 0; i < levels.size(); ++i) d[i] = levels[i] / 255.0;
    return Tensor::from({n, channels, side, side}, std::move(d));
  }

  Image image(int i) const {
    Image img;
    img.channels = channels;
    img.side = side;
    std::size_t sz = static_cast<std::size_t>(channels) * side * side;
    img.levels.assign(levels.begin() + i * sz, levels.begin() + (i + 1) * sz);
    return img;
  }
};

/// Quantizes unit-interval values back to 8-bit levels.
inline Image image_from_unit(const std::vector<double>& unit, int channels, int side) {
  Image img;
  img.channels = channels;
  img.side = side;
  img.levels.resize(unit.size());
  for (std::size_t i = 0; i < unit.size(); ++i) {
    double v = unit[i] * 255.0 + 0.5;
    img.levels[i] = static_cast<std::uint8_t>(v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v));
  }
  return img;
}

}  // namespace rrvq
