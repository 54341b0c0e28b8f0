#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "olfsl/errors.hpp"
#include "olfsl/tensor.hpp"

namespace olfsl {

// 8-bit interleaved image, 1 (gray) or 3 (RGB) channels.
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved

  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

ImageU8 read_png(const std::string& path);
void write_png_gray(const std::string& path, const ImageU8& image);

// Decoded image as [H,W,C] in [0,1], converted to `want_channels`
// (gray<->RGB), resized with bilinear interpolation when needed. The
// arithmetic runs in double and is cast once at the end, so float32 and
// float64 pipelines see identically-rounded pixels.
template <typename T>
Tensor<T> image_to_tensor(const ImageU8& img, int target_size, int want_channels) {
  if (img.channels != 1 && img.channels != 3) {
    throw DataError("image: unsupported channel count " + std::to_string(img.channels));
  }
  if (want_channels != 1 && want_channels != 3) {
    throw ConfigError("image: model channels must be 1 or 3");
  }

  // Channel conversion at native resolution, scaled to [0,1].
  std::vector<double> plane(static_cast<std::size_t>(img.width) * img.height * want_channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double rgb[3];
      if (img.channels == 3) {
        for (int c = 0; c < 3; ++c) rgb[c] = img.at(y, x, c) / 255.0;
      } else {
        rgb[0] = rgb[1] = rgb[2] = img.at(y, x, 0) / 255.0;
      }
      double* dst = plane.data() + (static_cast<std::size_t>(y) * img.width + x) * want_channels;
      if (want_channels == 3) {
        dst[0] = rgb[0];
        dst[1] = rgb[1];
        dst[2] = rgb[2];
      } else {
        dst[0] = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
      }
    }
  }

  const int W = target_size, H = target_size;
  std::vector<T> out(static_cast<std::size_t>(W) * H * want_channels);
  if (img.width == W && img.height == H) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(plane[i]);
  } else {
    const double sx = static_cast<double>(img.width) / W;
    const double sy = static_cast<double>(img.height) / H;
    for (int y = 0; y < H; ++y) {
      const double fy = (y + 0.5) * sy - 0.5;
      const int y0 = std::max(0, std::min(img.height - 1, static_cast<int>(std::floor(fy))));
      const int y1 = std::min(img.height - 1, y0 + 1);
      const double wy = std::max(0.0, std::min(1.0, fy - y0));
      for (int x = 0; x < W; ++x) {
        const double fx = (x + 0.5) * sx - 0.5;
        const int x0 = std::max(0, std::min(img.width - 1, static_cast<int>(std::floor(fx))));
        const int x1 = std::min(img.width - 1, x0 + 1);
        const double wx = std::max(0.0, std::min(1.0, fx - x0));
        for (int c = 0; c < want_channels; ++c) {
          auto src = [&](int yy, int xx) {
            return plane[(static_cast<std::size_t>(yy) * img.width + xx) * want_channels + c];
          };
          const double top = src(y0, x0) * (1.0 - wx) + src(y0, x1) * wx;
          const double bot = src(y1, x0) * (1.0 - wx) + src(y1, x1) * wx;
          out[(static_cast<std::size_t>(y) * W + x) * want_channels + c] =
              static_cast<T>(top * (1.0 - wy) + bot * wy);
        }
      }
    }
  }
  return Tensor<T>({H, W, want_channels}, std::move(out));
}

// Pixel-exact counter-clockwise quarter turns on a square [H,W,C] tensor.
template <typename T>
Tensor<T> rotate90(const Tensor<T>& image, int quarter_turns) {
  if (image.rank() != 3) throw ConfigError("rotate90: expects [H,W,C]");
  int q = ((quarter_turns % 4) + 4) % 4;
  if (q == 0) return image.detached();
  const int H = image.shape[0], W = image.shape[1];
  if (H != W) throw ConfigError("rotate90: nonzero rotation requires a square image, got " +
                                shape_str(image.shape));
  const int C = image.shape[2];
  Tensor<T> cur = image.detached();
  for (; q > 0; --q) {
    Tensor<T> next = Tensor<T>::zeros({H, W, C});
    // One CCW quarter turn: out[r][k] = in[k][W-1-r].
    for (int r = 0; r < H; ++r) {
      for (int k = 0; k < W; ++k) {
        for (int c = 0; c < C; ++c) next.at(r, k, c) = cur.at(k, W - 1 - r, c);
      }
    }
    cur = std::move(next);
  }
  return cur;
}

}  // namespace olfsl
