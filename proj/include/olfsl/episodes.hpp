#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "olfsl/errors.hpp"
#include "olfsl/image.hpp"
#include "olfsl/rng.hpp"
#include "olfsl/tensor.hpp"

namespace olfsl {

// Data augmentation policy. Every rotation listed becomes its own class
// variant at load time (the usual few-shot protocol); {0} disables the
// expansion.
struct AugmentationSpec {
  std::vector<int> rotations = {0};
  bool channel_standardize = false;
};

inline void validate_augmentation(const AugmentationSpec& aug) {
  if (aug.rotations.empty()) throw ConfigError("augmentation: rotations must not be empty");
  for (int r : aug.rotations) {
    if (r != 0 && r != 90 && r != 180 && r != 270) {
      throw ConfigError("augmentation: rotation " + std::to_string(r) +
                        " not a multiple of 90 in [0,270]");
    }
  }
}

// Rotated copy of a square image; 90-degree steps are index permutations,
// never interpolation.
template <typename T>
Tensor<T> augment(const Tensor<T>& image, const AugmentationSpec& spec, int rotation_degrees) {
  validate_augmentation(spec);
  if (std::find(spec.rotations.begin(), spec.rotations.end(), rotation_degrees) ==
      spec.rotations.end()) {
    throw ConfigError("augment: rotation " + std::to_string(rotation_degrees) +
                      " not enabled in the augmentation spec");
  }
  return rotate90(image, rotation_degrees / 90);
}

template <typename T>
struct ClassRecord {
  std::string name;
  std::vector<Tensor<T>> images;
};

template <typename T>
struct SplitData {
  std::vector<ClassRecord<T>> classes;

  std::int64_t image_count() const {
    std::int64_t n = 0;
    for (const auto& c : classes) n += static_cast<std::int64_t>(c.images.size());
    return n;
  }
};

template <typename T>
struct Dataset {
  SplitData<T> train;
  SplitData<T> val;
  SplitData<T> test;
  // Per-channel statistics computed over the training split (empty when
  // standardization is off); persisted in checkpoints so inference applies
  // the same transform.
  std::vector<double> standardize_mean;
  std::vector<double> standardize_std;
};

template <typename T>
struct EpisodeItem {
  Tensor<T> image;
  int label = 0;        // 0..n_way-1, relabeled fresh per episode
  std::string uid;      // "<class>/<image index>" identity for disjointness checks
};

// One N-way K-shot task: support and query sets over freshly relabeled
// classes, with disjoint image identities.
template <typename T>
struct Episode {
  int n_way = 0;
  int k_shot = 0;
  int q_queries = 0;
  std::vector<EpisodeItem<T>> support;  // n_way * k_shot, class-major
  std::vector<EpisodeItem<T>> query;    // n_way * q_queries, class-major
  std::vector<std::string> class_names; // index -> original class name
};

// ---------------------------------------------------------------------------
// Manifest + directory loading
// ---------------------------------------------------------------------------

// Plain-text manifest: one "<class_name>\t<train|val|test>" line per class.
inline std::map<std::string, std::string> read_split_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open split manifest: " + path);
  std::map<std::string, std::string> assignment;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError("manifest " + path + ":" + std::to_string(line_no) + ": expected <class>\\t<split>");
    }
    const std::string name = line.substr(0, tab);
    const std::string split = line.substr(tab + 1);
    if (split != "train" && split != "val" && split != "test") {
      throw DataError("manifest " + path + ":" + std::to_string(line_no) + ": unknown split '" + split +
                      "' for class '" + name + "'");
    }
    if (!assignment.emplace(name, split).second) {
      throw DataError("manifest: class '" + name + "' assigned to more than one split");
    }
  }
  if (assignment.empty()) throw DataError("manifest " + path + " assigns no classes");
  return assignment;
}

template <typename T>
void standardize_image(Tensor<T>& image, const std::vector<double>& mean,
                       const std::vector<double>& stddev) {
  if (mean.empty()) return;
  const int channels = static_cast<int>(mean.size());
  const std::size_t pixels = image.data.size() / static_cast<std::size_t>(channels);
  for (std::size_t p = 0; p < pixels; ++p) {
    for (int c = 0; c < channels; ++c) {
      auto& v = image.data[p * channels + c];
      v = static_cast<T>((static_cast<double>(v) - mean[static_cast<std::size_t>(c)]) /
                         stddev[static_cast<std::size_t>(c)]);
    }
  }
}

// Loads `root/<class>/<*.png>` according to the manifest. Images are decoded,
// resized to input_size, scaled to [0,1], expanded per rotation, and
// standardized with training-split statistics when configured.
template <typename T>
Dataset<T> load_dataset(const std::string& root, const std::string& manifest_path, int input_size,
                        int channels, const AugmentationSpec& aug) {
  namespace fs = std::filesystem;
  validate_augmentation(aug);
  auto assignment = read_split_manifest(manifest_path);

  if (!fs::is_directory(root)) throw DataError("dataset root is not a directory: " + root);
  std::vector<std::string> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path().filename().string());
  }
  std::sort(class_dirs.begin(), class_dirs.end());

  for (const auto& [name, split] : assignment) {
    if (std::find(class_dirs.begin(), class_dirs.end(), name) == class_dirs.end()) {
      throw DataError("manifest names unknown class '" + name + "' (no such directory under " + root +
                      ")");
    }
  }

  std::vector<int> rotations = aug.rotations;
  std::sort(rotations.begin(), rotations.end());

  Dataset<T> ds;
  for (const auto& dir_name : class_dirs) {
    const auto ait = assignment.find(dir_name);
    if (ait == assignment.end()) {
      throw DataError("class directory '" + dir_name + "' is missing from the manifest");
    }
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(fs::path(root) / dir_name)) {
      if (entry.is_regular_file()) files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("class '" + dir_name + "' has no images");

    std::vector<Tensor<T>> base;
    base.reserve(files.size());
    for (const auto& f : files) base.push_back(image_to_tensor<T>(read_png(f), input_size, channels));

    SplitData<T>& split = ait->second == "train" ? ds.train : ait->second == "val" ? ds.val : ds.test;
    for (int r : rotations) {
      ClassRecord<T> rec;
      rec.name = r == 0 ? dir_name : dir_name + "@r" + std::to_string(r);
      rec.images.reserve(base.size());
      for (const auto& img : base) rec.images.push_back(rotate90(img, r / 90));
      split.classes.push_back(std::move(rec));
    }
  }

  if (aug.channel_standardize) {
    if (ds.train.classes.empty()) throw DataError("standardization requires a non-empty train split");
    std::vector<double> mean(static_cast<std::size_t>(channels), 0.0);
    std::vector<double> sq(static_cast<std::size_t>(channels), 0.0);
    std::int64_t count = 0;
    for (const auto& cls : ds.train.classes) {
      for (const auto& img : cls.images) {
        const std::size_t pixels = img.data.size() / static_cast<std::size_t>(channels);
        for (std::size_t p = 0; p < pixels; ++p) {
          for (int c = 0; c < channels; ++c) {
            const double v = static_cast<double>(img.data[p * channels + c]);
            mean[static_cast<std::size_t>(c)] += v;
            sq[static_cast<std::size_t>(c)] += v * v;
          }
        }
        count += static_cast<std::int64_t>(pixels);
      }
    }
    std::vector<double> stddev(static_cast<std::size_t>(channels));
    for (int c = 0; c < channels; ++c) {
      mean[c] /= static_cast<double>(count);
      const double var = sq[c] / static_cast<double>(count) - mean[c] * mean[c];
      stddev[c] = std::sqrt(std::max(var, 1e-12));
    }
    ds.standardize_mean = mean;
    ds.standardize_std = stddev;
    for (SplitData<T>* split : {&ds.train, &ds.val, &ds.test}) {
      for (auto& cls : split->classes) {
        for (auto& img : cls.images) standardize_image(img, mean, stddev);
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Episode sampling
// ---------------------------------------------------------------------------

// Uniform sampling without replacement: n_way classes, then k_shot + q_queries
// images per class. Class indices 0..N-1 are a fresh relabeling in sampled
// order. Deterministic per seed.
template <typename T>
Episode<T> sample_episode(const SplitData<T>& split, int n_way, int k_shot, int q_queries,
                          std::uint64_t seed) {
  if (n_way < 1 || k_shot < 1 || q_queries < 0) throw ConfigError("sample_episode: invalid episode shape");
  const int available = static_cast<int>(split.classes.size());
  if (available < n_way) {
    throw DataError("sample_episode: need " + std::to_string(n_way) + " classes but split has " +
                    std::to_string(available));
  }
  Rng rng(seed);
  const std::vector<int> class_sel = rng.sample_indices(available, n_way);

  Episode<T> ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.q_queries = q_queries;
  for (int label = 0; label < n_way; ++label) {
    const ClassRecord<T>& cls = split.classes[static_cast<std::size_t>(class_sel[label])];
    const int have = static_cast<int>(cls.images.size());
    if (have < k_shot + q_queries) {
      throw DataError("sample_episode: class '" + cls.name + "' has " + std::to_string(have) +
                      " images but the episode needs " + std::to_string(k_shot + q_queries));
    }
    ep.class_names.push_back(cls.name);
    const std::vector<int> img_sel = rng.sample_indices(have, k_shot + q_queries);
    for (int i = 0; i < k_shot; ++i) {
      const int idx = img_sel[static_cast<std::size_t>(i)];
      ep.support.push_back({cls.images[static_cast<std::size_t>(idx)], label,
                            cls.name + "/" + std::to_string(idx)});
    }
    for (int i = 0; i < q_queries; ++i) {
      const int idx = img_sel[static_cast<std::size_t>(k_shot + i)];
      ep.query.push_back({cls.images[static_cast<std::size_t>(idx)], label,
                          cls.name + "/" + std::to_string(idx)});
    }
  }
  return ep;
}

}  // namespace olfsl
