#include "olfsl/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace olfsl {

namespace {

int to_int(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for '" + key + "': '" + value + "'");
  }
}

std::int64_t to_int64(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for '" + key + "': '" + value + "'");
  }
}

std::uint64_t to_uint64(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for '" + key + "': '" + value + "'");
  }
}

double to_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for '" + key + "': '" + value + "'");
  }
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config: bad boolean for '" + key + "': '" + value + "'");
}

std::string format_bool(bool v) { return v ? "true" : "false"; }

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void apply_config_entry(RunConfig& rc, const std::string& key, const std::string& value) {
  if (key == "dtype") {
    if (value != "float32" && value != "float64") {
      throw ConfigError("config: dtype must be float32 or float64, got '" + value + "'");
    }
    rc.dtype = value;
  } else if (key == "data.root") {
    rc.data_root = value;
  } else if (key == "data.manifest") {
    rc.data_manifest = value;
  } else if (key == "aug.rotations") {
    rc.aug.rotations = parse_int_list(value, "aug.rotations");
    validate_augmentation(rc.aug);
  } else if (key == "aug.standardize") {
    rc.aug.channel_standardize = to_bool(key, value);
  } else if (key == "model.input_size") {
    rc.model.input_size = to_int(key, value);
  } else if (key == "model.channels") {
    rc.model.channels = to_int(key, value);
  } else if (key == "model.d") {
    rc.model.d = to_int(key, value);
  } else if (key == "model.c") {
    rc.model.c = to_int(key, value);
  } else if (key == "model.feature_stack") {
    if (value != "auto") parse_feature_stack(value);  // validate eagerly
    rc.feature_stack_text = value;
  } else if (key == "model.relation_hidden") {
    rc.model.relation_hidden = parse_int_list(value, key.c_str());
  } else if (key == "model.relation_out") {
    rc.model.relation_out = to_int(key, value);
  } else if (key == "model.similarity_hidden") {
    rc.model.similarity_hidden = parse_int_list(value, key.c_str());
  } else if (key == "model.combination") {
    rc.model.combine_rule = parse_combine_rule(value);
  } else if (key == "train.n_way") {
    rc.train.n_way = to_int(key, value);
  } else if (key == "train.k_shot") {
    rc.train.k_shot = to_int(key, value);
  } else if (key == "train.q_queries") {
    rc.train.q_queries = to_int(key, value);
  } else if (key == "train.episodes") {
    rc.train.episodes_total = to_int64(key, value);
  } else if (key == "train.lr") {
    rc.train.lr = to_double(key, value);
  } else if (key == "train.beta1") {
    rc.train.beta1 = to_double(key, value);
  } else if (key == "train.beta2") {
    rc.train.beta2 = to_double(key, value);
  } else if (key == "train.epsilon") {
    rc.train.epsilon = to_double(key, value);
  } else if (key == "train.eval_every") {
    rc.train.eval_every = to_int64(key, value);
  } else if (key == "train.val_episodes") {
    rc.train.val_episodes = to_int64(key, value);
  } else if (key == "eval.n_way") {
    rc.eval.n_way = to_int(key, value);
  } else if (key == "eval.k_shot") {
    rc.eval.k_shot = to_int(key, value);
  } else if (key == "eval.q_queries") {
    rc.eval.q_queries = to_int(key, value);
  } else if (key == "eval.episodes") {
    rc.eval.episodes = to_int64(key, value);
  } else if (key == "eval.kshot_mode") {
    if (value == "representation_average") rc.eval.kshot_mode = KShotMode::representation_average;
    else if (value == "score_average") rc.eval.kshot_mode = KShotMode::score_average;
    else throw ConfigError("config: eval.kshot_mode must be representation_average or score_average");
  } else if (key == "synth.classes") {
    rc.synth.classes = to_int(key, value);
  } else if (key == "synth.images_per_class") {
    rc.synth.images_per_class = to_int(key, value);
  } else if (key == "synth.size") {
    rc.synth.size = to_int(key, value);
  } else if (key == "synth.split") {
    const auto parts = parse_int_list(value, "synth.split");
    if (parts.size() != 3) throw ConfigError("config: synth.split needs three counts, got '" + value + "'");
    rc.synth.split = {parts[0], parts[1], parts[2]};
  } else if (key == "seed") {
    rc.seed = to_uint64(key, value);
    rc.train.seed = rc.seed;
  } else if (key == "threads") {
    rc.threads = to_int(key, value);
    rc.train.threads = rc.threads;
  } else if (key == "out") {
    rc.out = value;
  } else {
    throw ConfigError("config: unknown key '" + key + "'");
  }
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  RunConfig rc;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    // strip trailing CR and surrounding whitespace
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) {
      line.pop_back();
    }
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    if (line[start] == '#') continue;
    const auto eq = line.find('=', start);
    if (eq == std::string::npos) {
      throw ConfigError("config " + path + ":" + std::to_string(line_no) + ": expected key=value");
    }
    apply_config_entry(rc, line.substr(start, eq - start), line.substr(eq + 1));
  }
  return rc;
}

std::string serialize_run_config(const RunConfig& rc) {
  std::ostringstream os;
  os << "dtype=" << rc.dtype << '\n';
  os << "data.root=" << rc.data_root << '\n';
  os << "data.manifest=" << rc.data_manifest << '\n';
  os << "aug.rotations=" << format_int_list(rc.aug.rotations) << '\n';
  os << "aug.standardize=" << format_bool(rc.aug.channel_standardize) << '\n';
  os << "model.input_size=" << rc.model.input_size << '\n';
  os << "model.channels=" << rc.model.channels << '\n';
  os << "model.d=" << rc.model.d << '\n';
  os << "model.c=" << rc.model.c << '\n';
  os << "model.feature_stack=" << rc.feature_stack_text << '\n';
  os << "model.relation_hidden=" << format_int_list(rc.model.relation_hidden) << '\n';
  os << "model.relation_out=" << rc.model.relation_out << '\n';
  os << "model.similarity_hidden=" << format_int_list(rc.model.similarity_hidden) << '\n';
  os << "model.combination=" << combine_rule_name(rc.model.combine_rule) << '\n';
  os << "train.n_way=" << rc.train.n_way << '\n';
  os << "train.k_shot=" << rc.train.k_shot << '\n';
  os << "train.q_queries=" << rc.train.q_queries << '\n';
  os << "train.episodes=" << rc.train.episodes_total << '\n';
  os << "train.lr=" << format_double(rc.train.lr) << '\n';
  os << "train.beta1=" << format_double(rc.train.beta1) << '\n';
  os << "train.beta2=" << format_double(rc.train.beta2) << '\n';
  os << "train.epsilon=" << format_double(rc.train.epsilon) << '\n';
  os << "train.eval_every=" << rc.train.eval_every << '\n';
  os << "train.val_episodes=" << rc.train.val_episodes << '\n';
  os << "eval.n_way=" << rc.eval.n_way << '\n';
  os << "eval.k_shot=" << rc.eval.k_shot << '\n';
  os << "eval.q_queries=" << rc.eval.q_queries << '\n';
  os << "eval.episodes=" << rc.eval.episodes << '\n';
  os << "eval.kshot_mode="
     << (rc.eval.kshot_mode == KShotMode::representation_average ? "representation_average"
                                                                 : "score_average")
     << '\n';
  os << "synth.classes=" << rc.synth.classes << '\n';
  os << "synth.images_per_class=" << rc.synth.images_per_class << '\n';
  os << "synth.size=" << rc.synth.size << '\n';
  os << "synth.split=" << rc.synth.split[0] << ',' << rc.synth.split[1] << ',' << rc.synth.split[2]
     << '\n';
  os << "seed=" << rc.seed << '\n';
  os << "threads=" << rc.threads << '\n';
  os << "out=" << rc.out << '\n';
  return os.str();
}

ModelConfig resolve_model_config(const RunConfig& rc) {
  ModelConfig mc = rc.model;
  if (rc.feature_stack_text == "auto") {
    mc.feature_stack = derive_feature_stack(mc.input_size, mc.d, mc.c);
  } else {
    mc.feature_stack = parse_feature_stack(rc.feature_stack_text);
  }
  validate_model_config(mc);
  return mc;
}

}  // namespace olfsl
