#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "olfsl/adam.hpp"
#include "olfsl/checkpoint.hpp"
#include "olfsl/episodes.hpp"
#include "olfsl/errors.hpp"
#include "olfsl/eval.hpp"
#include "olfsl/model.hpp"
#include "olfsl/rng.hpp"
#include "olfsl/tape.hpp"

namespace olfsl {

struct TrainConfig {
  int n_way = 5;
  int k_shot = 1;
  int q_queries = 3;  // queries per class during training episodes
  std::int64_t episodes_total = 2000;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t eval_every = 200;
  std::uint64_t seed = 1;
  std::string checkpoint_dir;  // empty: keep checkpoints in memory only
  // validation pass at each eval point
  std::int64_t val_episodes = 40;
  int threads = 1;
};

inline void validate_train_config(const TrainConfig& cfg) {
  if (cfg.lr <= 0) throw ConfigError("train: lr must be positive");
  if (cfg.episodes_total < 0) throw ConfigError("train: episodes_total must be >= 0");
  if (cfg.n_way < 2) throw ConfigError("train: n_way must be >= 2");
  if (cfg.k_shot < 1 || cfg.q_queries < 1) throw ConfigError("train: k_shot and q_queries must be >= 1");
  if (cfg.eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
}

// Mean binary cross-entropy over labeled similarity scores (the training
// objective; y=1 for same-class pairs).
template <typename T>
Tensor<T> pairwise_loss(const std::vector<Tensor<T>>& scores, const std::vector<int>& labels) {
  return bce_pairs(scores, labels);
}

template <typename T>
struct EpisodeLoss {
  Tensor<T> loss;
  int pair_count = 0;
  T score_min = T(0);
  T score_max = T(0);
};

// The per-episode objective: the K support grids of each class are averaged
// into a representative, every query is scored against every class
// representative (N labeled pairs per query, y=1 for the true class), and the
// result is the mean BCE over all N*|query| pairs. Differentiable when
// `params` are tape-attached; a plain forward evaluation otherwise.
template <typename T>
EpisodeLoss<T> episode_loss(const ModelParams<T>& params, const Episode<T>& episode,
                            const ModelConfig& cfg) {
  std::vector<std::vector<ObjectGrid<T>>> class_grids(static_cast<std::size_t>(episode.n_way));
  for (const auto& item : episode.support) {
    class_grids[static_cast<std::size_t>(item.label)].push_back(
        extract_objects(item.image, params.feature, cfg));
  }
  std::vector<ObjectGrid<T>> reps;
  reps.reserve(class_grids.size());
  for (auto& grids : class_grids) {
    if (grids.empty()) throw ConfigError("episode_loss: episode has a class with no support images");
    reps.push_back(average_support(grids));
  }

  std::vector<Tensor<T>> scores;
  std::vector<int> labels;
  scores.reserve(episode.query.size() * static_cast<std::size_t>(episode.n_way));
  for (const auto& item : episode.query) {
    const ObjectGrid<T> qgrid = extract_objects(item.image, params.feature, cfg);
    for (int cls = 0; cls < episode.n_way; ++cls) {
      scores.push_back(score_pair(reps[static_cast<std::size_t>(cls)], qgrid, params, cfg));
      labels.push_back(cls == item.label ? 1 : 0);
    }
  }

  EpisodeLoss<T> out;
  out.loss = pairwise_loss(scores, labels);
  out.pair_count = static_cast<int>(scores.size());
  out.score_min = scores[0].data[0];
  out.score_max = scores[0].data[0];
  for (const auto& s : scores) {
    out.score_min = std::min(out.score_min, s.data[0]);
    out.score_max = std::max(out.score_max, s.data[0]);
  }
  return out;
}

struct StepResult {
  double loss = 0.0;
  int pair_count = 0;
};

// One training step on one episode: episode_loss, backward, one Adam update.
template <typename T>
StepResult train_step(ModelParams<T>& params, AdamState<T>& adam, const Episode<T>& episode,
                      const ModelConfig& cfg) {
  Tape<T> tape;
  ModelParams<T> watched = watch_params(tape, params);
  EpisodeLoss<T> result = episode_loss(watched, episode, cfg);

  const double loss_value = static_cast<double>(result.loss.item());
  if (!std::isfinite(loss_value)) {
    throw NumericError("train_step: non-finite loss; score range [" +
                       std::to_string(result.score_min) + ", " + std::to_string(result.score_max) +
                       "]");
  }

  NamedTensors<T> flat = params.flat();
  NamedTensors<T> grads = tape.backward_gradients(result.loss, watched.flat());
  adam_step(flat, grads, adam);
  params.assign_flat(flat);

  return {loss_value, result.pair_count};
}

// One metrics record per training step.
struct MetricsRow {
  std::int64_t episode = 0;
  double loss = 0.0;
  bool has_val = false;
  double val_acc = 0.0;
  double val_ci = 0.0;
};

class MetricsSink {
 public:
  virtual ~MetricsSink() = default;
  virtual void row(const MetricsRow& r) = 0;
};

template <typename T>
Checkpoint<T> make_initial_checkpoint(const ModelConfig& mc, const TrainConfig& tc,
                                      const std::vector<double>& std_mean,
                                      const std::vector<double>& std_std) {
  validate_model_config(mc);
  validate_train_config(tc);
  Checkpoint<T> cp;
  cp.model = mc;
  cp.params = init_params<T>(mc, tc.seed);
  AdamHyper hyper{tc.lr, tc.beta1, tc.beta2, tc.epsilon};
  cp.adam = adam_init(cp.params.flat(), hyper);
  cp.episode = 0;
  cp.best_val_acc = -1.0;
  Rng rng(mix_seed(tc.seed, 0x7EA1));
  cp.rng_state = rng.save_state();
  cp.standardize_mean = std_mean;
  cp.standardize_std = std_std;
  return cp;
}

// Episodic training (resumable). Starts from `start` — freshly initialized or
// loaded from disk — and runs until episode counter == episodes_total,
// evaluating on the val split every eval_every episodes. Keeps latest.ckpt
// and the best-validation best.ckpt in checkpoint_dir when set.
template <typename T>
Checkpoint<T> train_loop(const ModelConfig& mc, const TrainConfig& tc, const Dataset<T>& data,
                         Checkpoint<T> start, MetricsSink* sink = nullptr) {
  validate_model_config(mc);
  validate_train_config(tc);
  if (!(start.model == mc)) {
    throw ConfigError("train_loop: checkpoint model config does not match the run config");
  }
  namespace fs = std::filesystem;
  const bool persist = !tc.checkpoint_dir.empty();
  if (persist) fs::create_directories(tc.checkpoint_dir);

  Checkpoint<T> cp = std::move(start);
  Rng rng;
  rng.load_state(cp.rng_state);

  const auto save = [&](const Checkpoint<T>& c, const char* name) {
    if (persist) save_checkpoint(c, (fs::path(tc.checkpoint_dir) / name).string());
  };

  if (cp.episode >= static_cast<std::uint64_t>(tc.episodes_total)) {
    save(cp, "latest.ckpt");
    return cp;
  }

  for (std::int64_t ep = static_cast<std::int64_t>(cp.episode) + 1; ep <= tc.episodes_total; ++ep) {
    const std::uint64_t episode_seed = rng.next();
    Episode<T> episode = sample_episode(data.train, tc.n_way, tc.k_shot, tc.q_queries, episode_seed);
    const StepResult step = train_step(cp.params, cp.adam, episode, mc);
    cp.episode = static_cast<std::uint64_t>(ep);

    MetricsRow row;
    row.episode = ep;
    row.loss = step.loss;

    if (ep % tc.eval_every == 0 || ep == tc.episodes_total) {
      if (!data.val.classes.empty() && tc.val_episodes > 0) {
        const EvalReport val =
            evaluate(data.val, cp.params, mc, tc.n_way, tc.k_shot, tc.q_queries, tc.val_episodes,
                     mix_seed(tc.seed, 0xA11D + static_cast<std::uint64_t>(ep)), tc.threads);
        row.has_val = true;
        row.val_acc = val.mean_accuracy;
        row.val_ci = val.ci95_halfwidth;
        if (val.mean_accuracy > cp.best_val_acc) {
          cp.best_val_acc = val.mean_accuracy;
          cp.rng_state = rng.save_state();
          save(cp, "best.ckpt");
        }
      }
      cp.rng_state = rng.save_state();
      save(cp, "latest.ckpt");
    }
    if (sink) sink->row(row);
  }
  cp.rng_state = rng.save_state();
  save(cp, "latest.ckpt");
  return cp;
}

}  // namespace olfsl
