#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "olfsl/errors.hpp"
#include "olfsl/rng.hpp"
#include "olfsl/tape.hpp"
#include "olfsl/tensor.hpp"

namespace olfsl {

// ---------------------------------------------------------------------------
// Feature-extractor stack description
// ---------------------------------------------------------------------------

// conv: 3x3, stride 1, pad 1, per-channel bias, ReLU after.
// max_pool / avg_pool: window k, stride s.
struct LayerSpec {
  enum class Kind { conv, max_pool, avg_pool };
  Kind kind = Kind::conv;
  int channels = 0;  // conv only
  int k = 0;         // pools only
  int stride = 0;    // pools only
};

inline std::string format_feature_stack(const std::vector<LayerSpec>& stack) {
  std::ostringstream os;
  for (std::size_t i = 0; i < stack.size(); ++i) {
    if (i) os << ',';
    const LayerSpec& l = stack[i];
    switch (l.kind) {
      case LayerSpec::Kind::conv: os << "conv:" << l.channels; break;
      case LayerSpec::Kind::max_pool: os << "maxpool:" << l.k << ':' << l.stride; break;
      case LayerSpec::Kind::avg_pool: os << "avgpool:" << l.k << ':' << l.stride; break;
    }
  }
  return os.str();
}

// Parses "conv:8,maxpool:2:2,conv:8,avgpool:4:1".
inline std::vector<LayerSpec> parse_feature_stack(const std::string& text) {
  std::vector<LayerSpec> stack;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    if (item.empty()) continue;
    std::istringstream fields(item);
    std::string name;
    std::getline(fields, name, ':');
    LayerSpec l;
    auto next_int = [&fields, &item]() {
      std::string f;
      if (!std::getline(fields, f, ':')) throw ConfigError("feature_stack: missing field in '" + item + "'");
      try {
        return std::stoi(f);
      } catch (const std::exception&) {
        throw ConfigError("feature_stack: bad integer in '" + item + "'");
      }
    };
    if (name == "conv") {
      l.kind = LayerSpec::Kind::conv;
      l.channels = next_int();
      if (l.channels < 1) throw ConfigError("feature_stack: conv channels must be positive");
    } else if (name == "maxpool" || name == "avgpool") {
      l.kind = name == "maxpool" ? LayerSpec::Kind::max_pool : LayerSpec::Kind::avg_pool;
      l.k = next_int();
      l.stride = next_int();
      if (l.k < 1 || l.stride < 1) throw ConfigError("feature_stack: pool k/stride must be positive");
    } else {
      throw ConfigError("feature_stack: unknown layer '" + name + "'");
    }
    stack.push_back(l);
  }
  if (stack.empty()) throw ConfigError("feature_stack: empty stack");
  return stack;
}

// Builds a conv/max-pool stack that maps a square input of `input_size` down
// to a d x d grid with `c` channels by repeated halving. Requires
// input_size / d to be a power of two.
inline std::vector<LayerSpec> derive_feature_stack(int input_size, int d, int c) {
  if (d < 1 || input_size < d) {
    throw ConfigError("feature_stack auto: cannot reach d=" + std::to_string(d) + " from input " +
                      std::to_string(input_size));
  }
  int size = input_size;
  std::vector<LayerSpec> stack;
  stack.push_back({LayerSpec::Kind::conv, c, 0, 0});
  while (size > d) {
    if (size % 2 != 0) {
      throw ConfigError("feature_stack auto: input " + std::to_string(input_size) +
                        " cannot be halved down to d=" + std::to_string(d));
    }
    stack.push_back({LayerSpec::Kind::max_pool, 0, 2, 2});
    size /= 2;
    if (size > d) stack.push_back({LayerSpec::Kind::conv, c, 0, 0});
  }
  if (size != d) {
    throw ConfigError("feature_stack auto: input " + std::to_string(input_size) +
                      " does not reduce to d=" + std::to_string(d));
  }
  return stack;
}

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  int input_size = 16;  // square images
  int channels = 1;
  int d = 4;  // objects per spatial axis
  int c = 8;  // channels per object
  std::vector<LayerSpec> feature_stack;
  // relation vectors default to 256 wide; desk-scale runs narrow them
  std::vector<int> relation_hidden = {256, 256};
  int relation_out = 256;
  std::vector<int> similarity_hidden = {256};
  CombineRule combine_rule = CombineRule::all_pairs;

  bool operator==(const ModelConfig& o) const {
    return input_size == o.input_size && channels == o.channels && d == o.d && c == o.c &&
           format_feature_stack(feature_stack) == format_feature_stack(o.feature_stack) &&
           relation_hidden == o.relation_hidden && relation_out == o.relation_out &&
           similarity_hidden == o.similarity_hidden && combine_rule == o.combine_rule;
  }
};

// Shape arithmetic for the stack: (size, channels) after every layer.
inline std::pair<int, int> feature_output_shape(const ModelConfig& cfg) {
  int size = cfg.input_size;
  int channels = cfg.channels;
  for (const LayerSpec& l : cfg.feature_stack) {
    switch (l.kind) {
      case LayerSpec::Kind::conv:
        // 3x3, stride 1, pad 1: spatial size preserved.
        channels = l.channels;
        break;
      case LayerSpec::Kind::max_pool:
      case LayerSpec::Kind::avg_pool:
        if (l.k > size) {
          throw ConfigError("feature_stack: pool window " + std::to_string(l.k) +
                            " exceeds feature map size " + std::to_string(size));
        }
        size = (size - l.k) / l.stride + 1;
        break;
    }
  }
  return {size, channels};
}

// Fatal configuration check, run at model construction time.
inline void validate_model_config(const ModelConfig& cfg) {
  if (cfg.input_size < 1 || cfg.channels < 1) throw ConfigError("model: invalid input size/channels");
  if (cfg.d < 1 || cfg.c < 1) throw ConfigError("model: d and c must be >= 1");
  if (cfg.relation_out < 1) throw ConfigError("model: relation_out must be >= 1");
  if (cfg.feature_stack.empty()) throw ConfigError("model: feature stack is empty");
  const auto [size, channels] = feature_output_shape(cfg);
  if (size != cfg.d || channels != cfg.c) {
    throw ConfigError("model: feature stack yields " + std::to_string(size) + "x" +
                      std::to_string(size) + "x" + std::to_string(channels) + " but config expects " +
                      std::to_string(cfg.d) + "x" + std::to_string(cfg.d) + "x" + std::to_string(cfg.c));
  }
  for (int h : cfg.relation_hidden) {
    if (h < 1) throw ConfigError("model: relation hidden widths must be >= 1");
  }
  for (int h : cfg.similarity_hidden) {
    if (h < 1) throw ConfigError("model: similarity hidden widths must be >= 1");
  }
}

inline std::string format_int_list(const std::vector<int>& xs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) os << ',';
    os << xs[i];
  }
  return os.str();
}

inline std::vector<int> parse_int_list(const std::string& text, const char* what) {
  std::vector<int> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + ": bad integer '" + item + "'");
    }
  }
  return out;
}

inline CombineRule parse_combine_rule(const std::string& text) {
  if (text == "all_pairs") return CombineRule::all_pairs;
  if (text == "same_location") return CombineRule::same_location;
  throw ConfigError("combination rule must be all_pairs or same_location, got '" + text + "'");
}

// key=value text block; the same keys the run config uses under "model.".
inline std::string serialize_model_config(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "input_size=" << cfg.input_size << '\n'
     << "channels=" << cfg.channels << '\n'
     << "d=" << cfg.d << '\n'
     << "c=" << cfg.c << '\n'
     << "feature_stack=" << format_feature_stack(cfg.feature_stack) << '\n'
     << "relation_hidden=" << format_int_list(cfg.relation_hidden) << '\n'
     << "relation_out=" << cfg.relation_out << '\n'
     << "similarity_hidden=" << format_int_list(cfg.similarity_hidden) << '\n'
     << "combination=" << combine_rule_name(cfg.combine_rule) << '\n';
  return os.str();
}

inline ModelConfig parse_model_config_text(const std::string& text) {
  ModelConfig cfg;
  cfg.feature_stack.clear();
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("model config: expected key=value, got '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    try {
      if (key == "input_size") cfg.input_size = std::stoi(value);
      else if (key == "channels") cfg.channels = std::stoi(value);
      else if (key == "d") cfg.d = std::stoi(value);
      else if (key == "c") cfg.c = std::stoi(value);
      else if (key == "feature_stack") cfg.feature_stack = parse_feature_stack(value);
      else if (key == "relation_hidden") cfg.relation_hidden = parse_int_list(value, "relation_hidden");
      else if (key == "relation_out") cfg.relation_out = std::stoi(value);
      else if (key == "similarity_hidden") cfg.similarity_hidden = parse_int_list(value, "similarity_hidden");
      else if (key == "combination") cfg.combine_rule = parse_combine_rule(value);
      else throw ConfigError("model config: unknown key '" + key + "'");
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("model config: bad value for '" + key + "'");
    }
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Object grid
// ---------------------------------------------------------------------------

// The d x d x c decomposition of one image into d^2 object vectors, row-major
// over spatial positions.
template <typename T>
struct ObjectGrid {
  int d = 0;
  int c = 0;
  Tensor<T> grid;  // [d,d,c]

  ObjectGrid() = default;
  ObjectGrid(int d_, int c_, Tensor<T> g) : d(d_), c(c_), grid(std::move(g)) {
    if (grid.shape != Shape{d, d, c}) {
      throw LogicError("ObjectGrid: grid shape " + shape_str(grid.shape) + " != [d,d,c]");
    }
  }

  int object_count() const { return d * d; }

  // i-th object vector (detached copy), i in 0..d*d-1 row-major.
  Tensor<T> object(int i) const {
    if (i < 0 || i >= d * d) throw LogicError("ObjectGrid::object: index out of range");
    std::vector<T> v(static_cast<std::size_t>(c));
    const T* src = grid.data.data() + static_cast<std::size_t>(i) * c;
    std::copy(src, src + c, v.begin());
    return Tensor<T>({c}, std::move(v));
  }

  // [d*d, c] view over the same tape node.
  Tensor<T> rows() const { return reshape(grid, {d * d, c}); }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

// The full parameter set, split into the three trained groups: the conv
// feature extractor, the pairwise relation MLP, and the similarity head.
template <typename T>
struct ModelParams {
  NamedTensors<T> feature;
  NamedTensors<T> relation;
  NamedTensors<T> similarity;

  NamedTensors<T> flat() const {
    NamedTensors<T> all;
    for (const auto& [k, v] : feature) all.emplace("feature." + k, v);
    for (const auto& [k, v] : relation) all.emplace("relation." + k, v);
    for (const auto& [k, v] : similarity) all.emplace("similarity." + k, v);
    return all;
  }

  void assign_flat(const NamedTensors<T>& all) {
    feature.clear();
    relation.clear();
    similarity.clear();
    for (const auto& [k, v] : all) {
      const auto dot = k.find('.');
      if (dot == std::string::npos) throw LogicError("ModelParams: unscoped parameter '" + k + "'");
      const std::string group = k.substr(0, dot);
      const std::string rest = k.substr(dot + 1);
      if (group == "feature") feature.emplace(rest, v);
      else if (group == "relation") relation.emplace(rest, v);
      else if (group == "similarity") similarity.emplace(rest, v);
      else throw LogicError("ModelParams: unknown group '" + group + "'");
    }
  }
};

namespace detail {

template <typename T>
Tensor<T> uniform_init(Shape shape, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

inline std::string layer_key(const char* base, int index) { return std::string(base) + std::to_string(index); }

}  // namespace detail

// Fan-in-scaled uniform weights, zero biases.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  validate_model_config(cfg);
  Rng rng(mix_seed(seed, 0x1217));
  ModelParams<T> params;

  int channels = cfg.channels;
  int conv_index = 0;
  for (const LayerSpec& l : cfg.feature_stack) {
    if (l.kind != LayerSpec::Kind::conv) continue;
    const int fan_in = 3 * 3 * channels;
    params.feature.emplace(detail::layer_key("conv", conv_index) + ".weight",
                           detail::uniform_init<T>({3, 3, channels, l.channels}, fan_in, rng));
    params.feature.emplace(detail::layer_key("conv", conv_index) + ".bias",
                           Tensor<T>::zeros({l.channels}));
    channels = l.channels;
    ++conv_index;
  }

  std::vector<int> rel_dims;
  rel_dims.push_back(2 * cfg.c);
  for (int h : cfg.relation_hidden) rel_dims.push_back(h);
  rel_dims.push_back(cfg.relation_out);
  for (std::size_t i = 0; i + 1 < rel_dims.size(); ++i) {
    params.relation.emplace(detail::layer_key("fc", static_cast<int>(i)) + ".weight",
                            detail::uniform_init<T>({rel_dims[i], rel_dims[i + 1]}, rel_dims[i], rng));
    params.relation.emplace(detail::layer_key("fc", static_cast<int>(i)) + ".bias",
                            Tensor<T>::zeros({rel_dims[i + 1]}));
  }

  std::vector<int> sim_dims;
  sim_dims.push_back(cfg.relation_out);
  for (int h : cfg.similarity_hidden) sim_dims.push_back(h);
  sim_dims.push_back(1);
  for (std::size_t i = 0; i + 1 < sim_dims.size(); ++i) {
    params.similarity.emplace(detail::layer_key("fc", static_cast<int>(i)) + ".weight",
                              detail::uniform_init<T>({sim_dims[i], sim_dims[i + 1]}, sim_dims[i], rng));
    params.similarity.emplace(detail::layer_key("fc", static_cast<int>(i)) + ".bias",
                              Tensor<T>::zeros({sim_dims[i + 1]}));
  }
  return params;
}

// Attached copy of every parameter on `tape`; forward passes through the
// result are differentiable w.r.t. the originals.
template <typename T>
ModelParams<T> watch_params(Tape<T>& tape, const ModelParams<T>& params) {
  ModelParams<T> watched;
  for (const auto& [k, v] : params.feature) watched.feature.emplace(k, tape.watch(v));
  for (const auto& [k, v] : params.relation) watched.relation.emplace(k, tape.watch(v));
  for (const auto& [k, v] : params.similarity) watched.similarity.emplace(k, tape.watch(v));
  return watched;
}

// FNV-1a over the raw parameter bytes; used to assert that inference never
// mutates the model.
template <typename T>
std::uint64_t checksum_params(const ModelParams<T>& params) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto mix = [&h](const NamedTensors<T>& group) {
    for (const auto& [name, t] : group) {
      for (unsigned char ch : name) {
        h = (h ^ ch) * 0x100000001B3ULL;
      }
      const auto* bytes = reinterpret_cast<const unsigned char*>(t.data.data());
      for (std::size_t i = 0; i < t.data.size() * sizeof(T); ++i) {
        h = (h ^ bytes[i]) * 0x100000001B3ULL;
      }
    }
  };
  mix(params.feature);
  mix(params.relation);
  mix(params.similarity);
  return h;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

// Runs the conv stack and decomposes the final feature map into objects.
template <typename T>
ObjectGrid<T> extract_objects(const Tensor<T>& image, const NamedTensors<T>& feature_params,
                              const ModelConfig& cfg) {
  if (image.shape != Shape{cfg.input_size, cfg.input_size, cfg.channels}) {
    throw ConfigError("extract_objects: image " + shape_str(image.shape) + " does not match config " +
                      std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size) + "x" +
                      std::to_string(cfg.channels));
  }
  Tensor<T> x = image;
  int conv_index = 0;
  for (const LayerSpec& l : cfg.feature_stack) {
    switch (l.kind) {
      case LayerSpec::Kind::conv: {
        const auto wit = feature_params.find(detail::layer_key("conv", conv_index) + ".weight");
        const auto bit = feature_params.find(detail::layer_key("conv", conv_index) + ".bias");
        if (wit == feature_params.end() || bit == feature_params.end()) {
          throw ConfigError("extract_objects: missing parameters for conv" + std::to_string(conv_index));
        }
        x = relu(bias_add_channels(conv2d(x, wit->second, 1, 1), bit->second));
        ++conv_index;
        break;
      }
      case LayerSpec::Kind::max_pool:
        x = max_pool2d(x, l.k, l.stride);
        break;
      case LayerSpec::Kind::avg_pool:
        x = avg_pool2d(x, l.k, l.stride);
        break;
    }
  }
  if (x.shape != Shape{cfg.d, cfg.d, cfg.c}) {
    throw ConfigError("extract_objects: stack produced " + shape_str(x.shape) + ", config expects [" +
                      std::to_string(cfg.d) + "," + std::to_string(cfg.d) + "," + std::to_string(cfg.c) +
                      "]");
  }
  return ObjectGrid<T>(cfg.d, cfg.c, std::move(x));
}

// Pairwise object combination. all_pairs: d^4 rows, row (i,j) =
// [obj(a,i) | obj(b,j)] ordered row-major by (i,j); same_location: d^2 rows.
template <typename T>
Tensor<T> combine(const ObjectGrid<T>& a, const ObjectGrid<T>& b, CombineRule rule) {
  if (a.d != b.d || a.c != b.c) {
    throw ConfigError("combine: grid mismatch " + std::to_string(a.d) + "x" + std::to_string(a.d) + "x" +
                      std::to_string(a.c) + " vs " + std::to_string(b.d) + "x" + std::to_string(b.d) +
                      "x" + std::to_string(b.c));
  }
  return pair_rows(a.rows(), b.rows(), rule);
}

namespace detail {

template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& input, const NamedTensors<T>& params, int layer_count,
                      const char* what) {
  Tensor<T> x = input;
  for (int i = 0; i < layer_count; ++i) {
    const auto wit = params.find(layer_key("fc", i) + ".weight");
    const auto bit = params.find(layer_key("fc", i) + ".bias");
    if (wit == params.end() || bit == params.end()) {
      throw ConfigError(std::string(what) + ": missing parameters for fc" + std::to_string(i));
    }
    x = dense(x, wit->second, bit->second);
    if (i + 1 < layer_count) x = relu(x);
  }
  return x;
}

}  // namespace detail

// The relation MLP applied independently to every combined pair; rows in,
// rows out.
template <typename T>
Tensor<T> relate(const Tensor<T>& pairs, const NamedTensors<T>& relation_params, const ModelConfig& cfg) {
  if (pairs.rank() != 2 || pairs.shape[1] != 2 * cfg.c) {
    throw ConfigError("relate: expects [P," + std::to_string(2 * cfg.c) + "] pair rows, got " +
                      shape_str(pairs.shape));
  }
  const int layers = static_cast<int>(cfg.relation_hidden.size()) + 1;
  return detail::mlp_forward(pairs, relation_params, layers, "relate");
}

// Element-wise sum of all relation vectors (batched form).
template <typename T>
Tensor<T> aggregate(const Tensor<T>& relations) {
  return sum_rows(relations);
}

// List form; order-independent by construction.
template <typename T>
Tensor<T> aggregate(const std::vector<Tensor<T>>& relations) {
  return sum_over(relations);
}

// Similarity head: MLP + sigmoid, scalar in (0,1).
template <typename T>
Tensor<T> similarity(const Tensor<T>& m_ab, const NamedTensors<T>& similarity_params,
                     const ModelConfig& cfg) {
  if (m_ab.size() != cfg.relation_out) {
    throw ConfigError("similarity: expects a " + std::to_string(cfg.relation_out) + "-vector, got " +
                      shape_str(m_ab.shape));
  }
  const int layers = static_cast<int>(cfg.similarity_hidden.size()) + 1;
  Tensor<T> logit = detail::mlp_forward(reshape(m_ab, {static_cast<int>(m_ab.size())}),
                                        similarity_params, layers, "similarity");
  return sigmoid(logit);
}

// Element-wise mean of K support grids (the class representative).
template <typename T>
ObjectGrid<T> average_support(const std::vector<ObjectGrid<T>>& grids) {
  if (grids.empty()) throw ConfigError("average_support: empty grid list");
  for (const auto& g : grids) {
    if (g.d != grids[0].d || g.c != grids[0].c) {
      throw ConfigError("average_support: grids have mismatched shapes");
    }
  }
  if (grids.size() == 1) return grids[0];
  std::vector<Tensor<T>> tensors;
  tensors.reserve(grids.size());
  for (const auto& g : grids) tensors.push_back(g.grid);
  return ObjectGrid<T>(grids[0].d, grids[0].c, mean_over(tensors));
}

// combine -> relate -> aggregate -> similarity. Support is the first
// argument; the pairing is not symmetric under all_pairs.
template <typename T>
Tensor<T> score_pair(const ObjectGrid<T>& support, const ObjectGrid<T>& query,
                     const ModelParams<T>& params, const ModelConfig& cfg) {
  Tensor<T> pairs = combine(support, query, cfg.combine_rule);
  Tensor<T> relations = relate(pairs, params.relation, cfg);
  Tensor<T> m_ab = aggregate(relations);
  return similarity(m_ab, params.similarity, cfg);
}

}  // namespace olfsl
