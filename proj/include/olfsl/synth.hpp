#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "olfsl/errors.hpp"
#include "olfsl/image.hpp"
#include "olfsl/rng.hpp"

namespace olfsl {

struct SynthClass {
  std::string name;
  std::vector<ImageU8> images;
};

struct SynthData {
  int size = 0;
  std::vector<SynthClass> classes;
};

namespace detail {

using Canvas = std::vector<double>;  // size*size grayscale in [0,1]

inline void draw_segment(Canvas& canvas, int size, int r0, int c0, int r1, int c1) {
  const int steps = std::max(std::abs(r1 - r0), std::abs(c1 - c0));
  for (int s = 0; s <= steps; ++s) {
    const double t = steps == 0 ? 0.0 : static_cast<double>(s) / steps;
    const int r = static_cast<int>(std::lround(r0 + t * (r1 - r0)));
    const int c = static_cast<int>(std::lround(c0 + t * (c1 - c0)));
    canvas[static_cast<std::size_t>(r) * size + c] = 1.0;
  }
}

inline Canvas rotate_canvas_ccw(const Canvas& in, int size) {
  Canvas out(in.size());
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      out[static_cast<std::size_t>(r) * size + c] = in[static_cast<std::size_t>(c) * size + (size - 1 - r)];
    }
  }
  return out;
}

inline double canvas_distance(const Canvas& a, const Canvas& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

inline Canvas random_glyph(int size, Rng& rng) {
  Canvas canvas(static_cast<std::size_t>(size) * size, 0.0);
  const int strokes = 3;
  for (int s = 0; s < strokes; ++s) {
    const int r0 = 1 + static_cast<int>(rng.bounded(static_cast<std::uint64_t>(size - 2)));
    const int c0 = 1 + static_cast<int>(rng.bounded(static_cast<std::uint64_t>(size - 2)));
    const int r1 = 1 + static_cast<int>(rng.bounded(static_cast<std::uint64_t>(size - 2)));
    const int c1 = 1 + static_cast<int>(rng.bounded(static_cast<std::uint64_t>(size - 2)));
    draw_segment(canvas, size, r0, c0, r1, c1);
  }
  return canvas;
}

inline Canvas shift_canvas(const Canvas& in, int size, int dy, int dx) {
  Canvas out(in.size(), 0.0);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const int sr = r - dy;
      const int sc = c - dx;
      if (sr >= 0 && sr < size && sc >= 0 && sc < size) {
        out[static_cast<std::size_t>(r) * size + c] = in[static_cast<std::size_t>(sr) * size + sc];
      }
    }
  }
  return out;
}

}  // namespace detail

// Procedural glyph dataset: each class is a distinct random stroke pattern;
// each image is the class glyph at a jittered position with additive noise.
// Glyph candidates are rejected until they differ from every existing class
// under all four 90-degree rotations (and from their own rotations), so the
// classes stay separable even when rotation augmentation expands them.
// Deterministic per seed.
inline SynthData generate_synthetic(int n_classes, int images_per_class, int size,
                                    std::uint64_t seed) {
  if (size < 16) throw ConfigError("generate_synthetic: size must be >= 16");
  if (n_classes < 1 || images_per_class < 1) {
    throw ConfigError("generate_synthetic: class and image counts must be positive");
  }

  const double min_distance = 0.09;  // mean abs pixel difference between glyphs
  SynthData data;
  data.size = size;

  std::vector<detail::Canvas> accepted;  // every accepted glyph in every rotation
  Rng glyph_rng(mix_seed(seed, 0x617C));
  for (int k = 0; k < n_classes; ++k) {
    detail::Canvas glyph;
    bool ok = false;
    for (int attempt = 0; attempt < 500 && !ok; ++attempt) {
      glyph = detail::random_glyph(size, glyph_rng);
      std::vector<detail::Canvas> rotations{glyph};
      for (int r = 1; r < 4; ++r) rotations.push_back(detail::rotate_canvas_ccw(rotations.back(), size));
      ok = true;
      for (int r = 1; r < 4 && ok; ++r) {
        if (detail::canvas_distance(rotations[0], rotations[static_cast<std::size_t>(r)]) < min_distance) {
          ok = false;
        }
      }
      for (const auto& prev : accepted) {
        if (!ok) break;
        for (const auto& rot : rotations) {
          if (detail::canvas_distance(prev, rot) < min_distance) {
            ok = false;
            break;
          }
        }
      }
      if (ok) {
        for (auto& rot : rotations) accepted.push_back(std::move(rot));
      }
    }
    if (!ok) throw NumericError("generate_synthetic: could not find a distinct glyph for class " +
                                std::to_string(k));

    SynthClass cls;
    {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "class%03d", k);
      cls.name = buf;
    }
    for (int i = 0; i < images_per_class; ++i) {
      Rng img_rng(mix_seed(seed, 0x100000ULL * static_cast<std::uint64_t>(k) + 0x515 +
                                     static_cast<std::uint64_t>(i)));
      const int dy = static_cast<int>(img_rng.bounded(3)) - 1;
      const int dx = static_cast<int>(img_rng.bounded(3)) - 1;
      detail::Canvas canvas = detail::shift_canvas(glyph, size, dy, dx);
      ImageU8 img;
      img.width = size;
      img.height = size;
      img.channels = 1;
      img.pixels.resize(canvas.size());
      for (std::size_t p = 0; p < canvas.size(); ++p) {
        const double v = std::clamp(canvas[p] + 0.08 * img_rng.normal(), 0.0, 1.0);
        img.pixels[p] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
      cls.images.push_back(std::move(img));
    }
    data.classes.push_back(std::move(cls));
  }
  return data;
}

// Materializes the dataset to `root/<class>/img_<i>.png` plus a split
// manifest assigning the first `counts[0]` classes to train, the next
// `counts[1]` to val and the rest to test.
inline void write_synthetic(const SynthData& data, const std::string& root,
                            const std::array<int, 3>& split_counts,
                            const std::string& manifest_path) {
  namespace fs = std::filesystem;
  if (split_counts[0] + split_counts[1] + split_counts[2] != static_cast<int>(data.classes.size())) {
    throw ConfigError("write_synthetic: split counts do not sum to the class count");
  }
  fs::create_directories(root);
  std::ofstream manifest(manifest_path);
  if (!manifest) throw DataError("cannot create manifest: " + manifest_path);
  for (std::size_t k = 0; k < data.classes.size(); ++k) {
    const SynthClass& cls = data.classes[k];
    const fs::path dir = fs::path(root) / cls.name;
    fs::create_directories(dir);
    for (std::size_t i = 0; i < cls.images.size(); ++i) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "img_%03d.png", static_cast<int>(i));
      write_png_gray((dir / buf).string(), cls.images[i]);
    }
    const char* split = static_cast<int>(k) < split_counts[0] ? "train"
                        : static_cast<int>(k) < split_counts[0] + split_counts[1] ? "val"
                                                                                  : "test";
    manifest << cls.name << '\t' << split << '\n';
  }
}

}  // namespace olfsl
