#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "olfsl/checkpoint.hpp"
#include "olfsl/config.hpp"
#include "olfsl/episodes.hpp"
#include "olfsl/eval.hpp"
#include "olfsl/gradcheck.hpp"
#include "olfsl/model.hpp"
#include "olfsl/synth.hpp"
#include "olfsl/train.hpp"

namespace olfsl {

namespace cli_detail {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename Body>
int guarded(std::ostream& err, Body&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return 1;
  }
}

inline void require_data_paths(const RunConfig& rc) {
  namespace fs = std::filesystem;
  if (rc.data_root.empty()) throw ConfigError("data.root is not set");
  if (rc.data_manifest.empty()) throw ConfigError("data.manifest is not set");
  if (!fs::exists(rc.data_root)) throw ConfigError("data.root does not exist: " + rc.data_root);
  if (!fs::exists(rc.data_manifest)) {
    throw ConfigError("data.manifest does not exist: " + rc.data_manifest);
  }
}

inline void echo_config(const RunConfig& rc) {
  namespace fs = std::filesystem;
  fs::create_directories(rc.out);
  std::ofstream echo(fs::path(rc.out) / "resolved.cfg");
  echo << serialize_run_config(rc);
}

// Writes the human-readable metrics line and mirrors it into the CSV.
class FileMetricsSink : public MetricsSink {
 public:
  FileMetricsSink(std::ostream& out, const std::string& csv_path, bool append)
      : out_(out), csv_(csv_path, append ? std::ios::app : std::ios::trunc) {
    if (!csv_) throw DataError("cannot open metrics csv: " + csv_path);
    if (!append) csv_ << "episode,loss,val_acc,val_ci\n";
  }

  void row(const MetricsRow& r) override {
    out_ << "episode=" << r.episode << " loss=" << fmt(r.loss);
    csv_ << r.episode << ',' << fmt(r.loss) << ',';
    if (r.has_val) {
      out_ << " val_acc=" << fmt(r.val_acc) << " val_ci=" << fmt(r.val_ci);
      csv_ << fmt(r.val_acc) << ',' << fmt(r.val_ci);
    } else {
      csv_ << ',';
    }
    out_ << '\n';
    csv_ << '\n';
  }

  void flush() { csv_.flush(); }

 private:
  std::ostream& out_;
  std::ofstream csv_;
};

// Keeps only the rows at or before `episode` so a resumed run continues the
// log without repeating any episode.
inline void trim_metrics_csv(const std::string& path, std::uint64_t episode) {
  std::ifstream in(path);
  if (!in) throw DataError("resume: cannot open metrics csv: " + path);
  std::vector<std::string> keep;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      keep.push_back(line);
      header = false;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    std::uint64_t ep = 0;
    try {
      ep = std::stoull(line.substr(0, comma));
    } catch (const std::exception&) {
      throw DataError("resume: malformed metrics csv row: " + line);
    }
    if (ep <= episode) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

template <typename T>
Dataset<T> load_configured_dataset(const RunConfig& rc) {
  return load_dataset<T>(rc.data_root, rc.data_manifest, rc.model.input_size, rc.model.channels,
                         rc.aug);
}

template <typename T>
int run_train(const RunConfig& rc, bool resume, std::ostream& out) {
  namespace fs = std::filesystem;
  require_data_paths(rc);
  const ModelConfig mc = resolve_model_config(rc);
  TrainConfig tc = rc.train;
  tc.seed = rc.seed;
  tc.threads = rc.threads;
  tc.checkpoint_dir = rc.out;

  echo_config(rc);
  Dataset<T> data = load_configured_dataset<T>(rc);

  const std::string metrics_path = (fs::path(rc.out) / "metrics.csv").string();
  const std::string latest_path = (fs::path(rc.out) / "latest.ckpt").string();

  Checkpoint<T> start;
  bool appending = false;
  if (resume) {
    if (!fs::exists(latest_path)) throw DataError("resume: no checkpoint at " + latest_path);
    start = load_checkpoint<T>(latest_path, &mc);
    trim_metrics_csv(metrics_path, start.episode);
    appending = true;
    out << "resuming from episode " << start.episode << '\n';
  } else {
    start = make_initial_checkpoint<T>(mc, tc, data.standardize_mean, data.standardize_std);
  }

  FileMetricsSink sink(out, metrics_path, appending);
  Checkpoint<T> final_cp = train_loop(mc, tc, data, std::move(start), &sink);
  sink.flush();
  out << "trained to episode " << final_cp.episode << " best_val_acc=" << fmt(final_cp.best_val_acc)
      << '\n';
  return kExitOk;
}

template <typename T>
int run_eval(const RunConfig& rc, const std::string& checkpoint_path, std::ostream& out) {
  namespace fs = std::filesystem;
  require_data_paths(rc);
  const ModelConfig mc = resolve_model_config(rc);
  Checkpoint<T> cp = load_checkpoint<T>(checkpoint_path, &mc);

  AugmentationSpec aug = rc.aug;
  aug.channel_standardize = false;  // the checkpoint's statistics apply instead
  Dataset<T> data = load_dataset<T>(rc.data_root, rc.data_manifest, mc.input_size, mc.channels, aug);
  if (!cp.standardize_mean.empty()) {
    for (SplitData<T>* split : {&data.train, &data.val, &data.test}) {
      for (auto& cls : split->classes) {
        for (auto& img : cls.images) standardize_image(img, cp.standardize_mean, cp.standardize_std);
      }
    }
  }

  const EvalReport report =
      evaluate(data.test, cp.params, mc, rc.eval.n_way, rc.eval.k_shot, rc.eval.q_queries,
               rc.eval.episodes, rc.seed, rc.threads,
               static_cast<const Scorer<T>*>(nullptr), rc.eval.kshot_mode);

  fs::create_directories(rc.out);
  std::ofstream csv(fs::path(rc.out) / "eval.csv");
  csv << eval_report_csv(report);

  char line[128];
  std::snprintf(line, sizeof(line), "acc=%.6f ci95=%.6f episodes=%lld\n", report.mean_accuracy,
                report.ci95_halfwidth, static_cast<long long>(report.episode_count));
  out << line;
  return kExitOk;
}

template <typename T>
int run_predict(const RunConfig& rc, const std::string& checkpoint_path,
                const std::string& support_dir, const std::vector<std::string>& query_paths,
                std::ostream& out) {
  namespace fs = std::filesystem;
  const ModelConfig mc = resolve_model_config(rc);
  Checkpoint<T> cp = load_checkpoint<T>(checkpoint_path, &mc);

  auto load_image = [&](const std::string& path) {
    Tensor<T> img = image_to_tensor<T>(read_png(path), mc.input_size, mc.channels);
    standardize_image(img, cp.standardize_mean, cp.standardize_std);
    return img;
  };

  if (!fs::is_directory(support_dir)) throw DataError("support dir not found: " + support_dir);
  std::vector<std::string> class_names;
  for (const auto& entry : fs::directory_iterator(support_dir)) {
    if (entry.is_directory()) class_names.push_back(entry.path().filename().string());
  }
  std::sort(class_names.begin(), class_names.end());
  if (class_names.empty()) throw DataError("support dir has no class subdirectories: " + support_dir);

  std::vector<std::vector<ObjectGrid<T>>> class_grids;
  int expected_k = -1;
  for (const auto& name : class_names) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(fs::path(support_dir) / name)) {
      if (entry.is_regular_file()) files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    if (expected_k < 0) expected_k = static_cast<int>(files.size());
    if (static_cast<int>(files.size()) != expected_k || files.empty()) {
      throw DataError("support class '" + name + "' has " + std::to_string(files.size()) +
                      " images, expected " + std::to_string(expected_k < 1 ? 1 : expected_k));
    }
    std::vector<ObjectGrid<T>> grids;
    for (const auto& f : files) grids.push_back(extract_objects(load_image(f), cp.params.feature, mc));
    class_grids.push_back(std::move(grids));
  }

  std::vector<std::pair<int, ObjectGrid<T>>> reps;
  for (std::size_t cls = 0; cls < class_grids.size(); ++cls) {
    reps.emplace_back(static_cast<int>(cls), average_support(class_grids[cls]));
  }

  const auto scorer = default_scorer<T>();
  for (const auto& qpath : query_paths) {
    const ObjectGrid<T> qgrid = extract_objects(load_image(qpath), cp.params.feature, mc);
    int predicted;
    std::vector<T> scores;
    if (rc.eval.kshot_mode == KShotMode::representation_average) {
      std::tie(predicted, scores) = classify_query(reps, qgrid, cp.params, mc, scorer);
    } else {
      scores.resize(class_grids.size());
      predicted = 0;
      for (std::size_t cls = 0; cls < class_grids.size(); ++cls) {
        T acc = T(0);
        for (const auto& g : class_grids[cls]) acc += scorer(g, qgrid, cp.params, mc);
        scores[cls] = acc / static_cast<T>(class_grids[cls].size());
        if (scores[cls] > scores[static_cast<std::size_t>(predicted)]) predicted = static_cast<int>(cls);
      }
    }
    out << qpath << ' ' << class_names[static_cast<std::size_t>(predicted)];
    for (T s : scores) out << ' ' << fmt(static_cast<double>(s));
    out << '\n';
  }
  return kExitOk;
}

template <typename T>
int run_sweep_d(const RunConfig& rc, const std::vector<int>& d_values, std::ostream& out,
                std::ostream& err) {
  namespace fs = std::filesystem;
  require_data_paths(rc);
  echo_config(rc);
  fs::create_directories(rc.out);
  std::ofstream csv(fs::path(rc.out) / "sweep.csv");
  csv << "d,accuracy,ci95,status\n";

  for (int d : d_values) {
    RunConfig sub = rc;
    sub.model.d = d;
    sub.feature_stack_text = "auto";
    ModelConfig mc;
    try {
      mc = resolve_model_config(sub);
    } catch (const ConfigError& e) {
      err << "sweep: skipping d=" << d << ": " << e.what() << '\n';
      csv << d << ",,,skipped\n";
      continue;
    }

    Dataset<T> data = load_configured_dataset<T>(sub);
    TrainConfig tc = sub.train;
    tc.seed = sub.seed;
    tc.threads = sub.threads;
    tc.checkpoint_dir = (fs::path(rc.out) / ("d" + std::to_string(d))).string();
    Checkpoint<T> cp =
        train_loop(mc, tc, data, make_initial_checkpoint<T>(mc, tc, data.standardize_mean,
                                                            data.standardize_std));
    const EvalReport report =
        evaluate(data.test, cp.params, mc, rc.eval.n_way, rc.eval.k_shot, rc.eval.q_queries,
                 rc.eval.episodes, rc.seed, rc.threads,
               static_cast<const Scorer<T>*>(nullptr), rc.eval.kshot_mode);
    out << "d=" << d << " acc=" << fmt(report.mean_accuracy) << " ci95=" << fmt(report.ci95_halfwidth)
        << '\n';
    csv << d << ',' << fmt(report.mean_accuracy) << ',' << fmt(report.ci95_halfwidth) << ",ok\n";
    csv.flush();
  }
  return kExitOk;
}

// The fixed float64 micro model exercised by `gradcheck`.
inline ModelConfig gradcheck_model_config() {
  ModelConfig mc;
  mc.input_size = 16;
  mc.channels = 1;
  mc.d = 2;
  mc.c = 8;
  mc.feature_stack = parse_feature_stack("conv:8,maxpool:2:2,conv:8,maxpool:2:2,conv:8,maxpool:2:2");
  mc.relation_hidden = {8};
  mc.relation_out = 8;
  mc.similarity_hidden = {8};
  return mc;
}

// Builds a deterministic 2-way 1-shot micro episode from synthetic glyphs.
// Quantized glyphs carry many exactly-equal pixels, which put pool windows on
// tie boundaries where finite differences are meaningless; a small dither
// moves the probe to a point where the loss is differentiable.
inline Episode<double> gradcheck_episode(const ModelConfig& mc, std::uint64_t seed) {
  const SynthData synth = generate_synthetic(2, 2, mc.input_size, seed);
  Rng dither(mix_seed(seed, 0xD17));
  auto prepare = [&](const ImageU8& raw) {
    Tensor<double> img = image_to_tensor<double>(raw, mc.input_size, mc.channels);
    for (auto& v : img.data) v += dither.uniform(1e-4, 1e-3);
    return img;
  };
  Episode<double> ep;
  ep.n_way = 2;
  ep.k_shot = 1;
  ep.q_queries = 1;
  for (int cls = 0; cls < 2; ++cls) {
    const auto& images = synth.classes[static_cast<std::size_t>(cls)].images;
    ep.support.push_back(
        {prepare(images[0]), cls, synth.classes[static_cast<std::size_t>(cls)].name + "/0"});
    ep.query.push_back(
        {prepare(images[1]), cls, synth.classes[static_cast<std::size_t>(cls)].name + "/1"});
    ep.class_names.push_back(synth.classes[static_cast<std::size_t>(cls)].name);
  }
  return ep;
}

// Finite-difference verification of the full training gradient on the micro
// model. `inject_backward_fault` corrupts one analytic gradient before the
// comparison (a test fixture proving the check can fail).
inline int run_gradcheck(const RunConfig& rc, bool inject_backward_fault, std::ostream& out) {
  const ModelConfig mc = gradcheck_model_config();
  ModelParams<double> params = init_params<double>(mc, rc.seed);
  const Episode<double> episode = gradcheck_episode(mc, mix_seed(rc.seed, 0x6C));

  Tape<double> tape;
  ModelParams<double> watched = watch_params(tape, params);
  EpisodeLoss<double> result = episode_loss(watched, episode, mc);
  NamedTensors<double> grads = tape.backward_gradients(result.loss, watched.flat());

  if (inject_backward_fault) {
    grads.begin()->second.data[0] += 1e-2;
  }

  const double tolerance = 1e-4;
  bool failed = false;
  for (const char* group : {"feature", "relation", "similarity"}) {
    NamedTensors<double> group_params;
    NamedTensors<double> group_grads;
    for (const auto& [name, t] : params.flat()) {
      if (name.rfind(std::string(group) + ".", 0) == 0) {
        group_params.emplace(name, t);
        group_grads.emplace(name, grads.at(name));
      }
    }
    auto report = finite_diff_check<double>(
        group_params,
        [&](const NamedTensors<double>& p) {
          ModelParams<double> probe = params;
          for (const auto& [name, t] : p) {
            NamedTensors<double> flat = probe.flat();
            flat.at(name) = t;
            probe.assign_flat(flat);
          }
          return static_cast<double>(episode_loss(probe, episode, mc).loss.item());
        },
        group_grads, 1e-5);
    out << "group=" << group << " max_rel_err=" << cli_detail::fmt(report.max_rel_error)
        << " worst=" << report.worst_param << '\n';
    if (report.max_rel_error >= tolerance) failed = true;
  }
  out << (failed ? "gradcheck: FAIL" : "gradcheck: PASS") << '\n';
  return failed ? kExitVerification : kExitOk;
}

}  // namespace cli_detail

// ---------------------------------------------------------------------------
// Subcommands: exit code 0 on success; 2 config, 3 data, 4 numeric,
// 5 verification failure.
// ---------------------------------------------------------------------------

inline int cmd_train(const RunConfig& rc, bool resume, std::ostream& out, std::ostream& err) {
  return cli_detail::guarded(err, [&] {
    return rc.dtype == "float64" ? cli_detail::run_train<double>(rc, resume, out)
                                 : cli_detail::run_train<float>(rc, resume, out);
  });
}

inline int cmd_eval(const RunConfig& rc, const std::string& checkpoint_path, std::ostream& out,
                    std::ostream& err) {
  return cli_detail::guarded(err, [&] {
    if (checkpoint_path.empty()) throw ConfigError("eval: --checkpoint is required");
    const CheckpointDType dtype = peek_checkpoint_dtype(checkpoint_path);
    return dtype == CheckpointDType::f64 ? cli_detail::run_eval<double>(rc, checkpoint_path, out)
                                         : cli_detail::run_eval<float>(rc, checkpoint_path, out);
  });
}

inline int cmd_predict(const RunConfig& rc, const std::string& checkpoint_path,
                       const std::string& support_dir, const std::vector<std::string>& query_paths,
                       std::ostream& out, std::ostream& err) {
  return cli_detail::guarded(err, [&] {
    if (checkpoint_path.empty()) throw ConfigError("predict: --checkpoint is required");
    const CheckpointDType dtype = peek_checkpoint_dtype(checkpoint_path);
    return dtype == CheckpointDType::f64
               ? cli_detail::run_predict<double>(rc, checkpoint_path, support_dir, query_paths, out)
               : cli_detail::run_predict<float>(rc, checkpoint_path, support_dir, query_paths, out);
  });
}

inline int cmd_sweep_d(const RunConfig& rc, const std::vector<int>& d_values, std::ostream& out,
                       std::ostream& err) {
  return cli_detail::guarded(err, [&] {
    if (d_values.empty()) throw ConfigError("sweep-d: --d-values is required");
    return rc.dtype == "float64" ? cli_detail::run_sweep_d<double>(rc, d_values, out, err)
                                 : cli_detail::run_sweep_d<float>(rc, d_values, out, err);
  });
}

inline int cmd_gradcheck(const RunConfig& rc, bool inject_backward_fault, std::ostream& out,
                         std::ostream& err) {
  return cli_detail::guarded(err,
                             [&] { return cli_detail::run_gradcheck(rc, inject_backward_fault, out); });
}

inline int cmd_synth(const RunConfig& rc, bool force, std::ostream& out, std::ostream& err) {
  return cli_detail::guarded(err, [&] {
    namespace fs = std::filesystem;
    if (rc.data_root.empty()) throw ConfigError("data.root is not set");
    if (rc.data_manifest.empty()) throw ConfigError("data.manifest is not set");
    if (fs::exists(rc.data_root) && !fs::is_empty(rc.data_root) && !force) {
      throw DataError("synth: target directory " + rc.data_root +
                      " is not empty (use --force to overwrite)");
    }
    const SynthData data =
        generate_synthetic(rc.synth.classes, rc.synth.images_per_class, rc.synth.size, rc.seed);
    write_synthetic(data, rc.data_root, rc.synth.split, rc.data_manifest);
    out << "wrote " << data.classes.size() << " classes x " << rc.synth.images_per_class
        << " images to " << rc.data_root << '\n';
    return static_cast<int>(kExitOk);
  });
}

}  // namespace olfsl
