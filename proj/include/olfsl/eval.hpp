#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "olfsl/episodes.hpp"
#include "olfsl/errors.hpp"
#include "olfsl/model.hpp"

namespace olfsl {

// Per-episode accuracies plus the aggregate mean and 95% confidence interval.
struct EvalReport {
  int n_way = 0;
  int k_shot = 0;
  int q_queries = 0;
  std::int64_t episode_count = 0;
  std::vector<double> per_episode_accuracy;
  double mean_accuracy = 0.0;
  double ci95_halfwidth = 0.0;
  bool ci_degenerate = false;  // single episode: no spread estimate
  double wall_time_sec = 0.0;
};

// Normal-approximation CI: sample standard deviation (n-1), z = 1.96.
inline std::pair<double, double> confidence_interval(const std::vector<double>& accuracies) {
  if (accuracies.empty()) throw ConfigError("confidence_interval: empty accuracy list");
  const double n = static_cast<double>(accuracies.size());
  double mean = 0.0;
  for (double a : accuracies) mean += a;
  mean /= n;
  if (accuracies.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double a : accuracies) ss += (a - mean) * (a - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  return {mean, 1.96 * sd / std::sqrt(n)};
}

// How K support examples per class become class scores.
enum class KShotMode {
  representation_average,  // average the K feature grids, score once
  score_average,           // score all K grids, average the K scores
};

template <typename T>
using Scorer = std::function<T(const ObjectGrid<T>&, const ObjectGrid<T>&, const ModelParams<T>&,
                               const ModelConfig&)>;

template <typename T>
Scorer<T> default_scorer() {
  return [](const ObjectGrid<T>& support, const ObjectGrid<T>& query, const ModelParams<T>& params,
            const ModelConfig& cfg) { return score_pair(support, query, params, cfg).item(); };
}

// Scores the query against each class representative and predicts the argmax;
// ties go to the lowest class index.
template <typename T>
std::pair<int, std::vector<T>> classify_query(
    const std::vector<std::pair<int, ObjectGrid<T>>>& support_reps, const ObjectGrid<T>& query_grid,
    const ModelParams<T>& params, const ModelConfig& cfg, const Scorer<T>& scorer) {
  if (support_reps.empty()) throw ConfigError("classify_query: empty support set");
  std::vector<T> scores;
  scores.reserve(support_reps.size());
  for (const auto& [cls, grid] : support_reps) {
    scores.push_back(scorer(grid, query_grid, params, cfg));
  }
  int best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const bool better = scores[i] > scores[static_cast<std::size_t>(best)];
    const bool tie_lower = scores[i] == scores[static_cast<std::size_t>(best)] &&
                           support_reps[i].first < support_reps[static_cast<std::size_t>(best)].first;
    if (better || tie_lower) best = static_cast<int>(i);
  }
  return {support_reps[static_cast<std::size_t>(best)].first, scores};
}

namespace detail {

// Fraction of queries classified correctly in one sampled episode.
template <typename T>
double evaluate_one_episode(const SplitData<T>& split, const ModelParams<T>& params,
                            const ModelConfig& cfg, int n_way, int k_shot, int q_queries,
                            std::uint64_t seed, const Scorer<T>& scorer, KShotMode mode) {
  Episode<T> ep = sample_episode(split, n_way, k_shot, q_queries, seed);

  // group the support grids by class label
  std::vector<std::vector<ObjectGrid<T>>> grids(static_cast<std::size_t>(n_way));
  for (const auto& item : ep.support) {
    grids[static_cast<std::size_t>(item.label)].push_back(
        extract_objects(item.image, params.feature, cfg));
  }

  std::vector<std::pair<int, ObjectGrid<T>>> reps;
  if (mode == KShotMode::representation_average) {
    for (int cls = 0; cls < n_way; ++cls) {
      reps.emplace_back(cls, average_support(grids[static_cast<std::size_t>(cls)]));
    }
  }

  int correct = 0;
  for (const auto& item : ep.query) {
    const ObjectGrid<T> qgrid = extract_objects(item.image, params.feature, cfg);
    int predicted;
    if (mode == KShotMode::representation_average) {
      predicted = classify_query(reps, qgrid, params, cfg, scorer).first;
    } else {
      // score every support grid, average per class, argmax with the same
      // lowest-index tie break
      int best = -1;
      T best_score = T(0);
      for (int cls = 0; cls < n_way; ++cls) {
        T acc = T(0);
        for (const auto& g : grids[static_cast<std::size_t>(cls)]) acc += scorer(g, qgrid, params, cfg);
        acc /= static_cast<T>(grids[static_cast<std::size_t>(cls)].size());
        if (best < 0 || acc > best_score) {
          best = cls;
          best_score = acc;
        }
      }
      predicted = best;
    }
    if (predicted == item.label) ++correct;
  }
  return ep.query.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(ep.query.size());
}

}  // namespace detail

// Samples `episode_count` episodes and aggregates per-episode accuracy.
// Episodes are independent read-only tasks keyed by seed, so the report is
// identical for any thread count; results merge in episode-index order.
// Never mutates params (checked by checksum).
template <typename T>
EvalReport evaluate(const SplitData<T>& split, const ModelParams<T>& params, const ModelConfig& cfg,
                    int n_way, int k_shot, int q_queries, std::int64_t episode_count,
                    std::uint64_t seed, int threads = 1,
                    const Scorer<T>* scorer_override = nullptr,
                    KShotMode mode = KShotMode::representation_average) {
  if (episode_count < 1) throw ConfigError("evaluate: episode_count must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t before = checksum_params(params);
  const Scorer<T> scorer = scorer_override ? *scorer_override : default_scorer<T>();

  std::vector<double> acc(static_cast<std::size_t>(episode_count), 0.0);
  auto run_range = [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      acc[static_cast<std::size_t>(i)] = detail::evaluate_one_episode(
          split, params, cfg, n_way, k_shot, q_queries,
          mix_seed(seed, 0xE7A1u + static_cast<std::uint64_t>(i)), scorer, mode);
    }
  };

  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(episode_count)));
  if (workers == 1) {
    run_range(0, episode_count);
  } else {
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mutex;
    const std::int64_t chunk = (episode_count + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      const std::int64_t lo = w * chunk;
      const std::int64_t hi = std::min<std::int64_t>(episode_count, lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back([&, lo, hi] {
        try {
          run_range(lo, hi);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  }

  if (checksum_params(params) != before) {
    throw LogicError("evaluate: parameters changed during evaluation");
  }

  EvalReport report;
  report.n_way = n_way;
  report.k_shot = k_shot;
  report.q_queries = q_queries;
  report.episode_count = episode_count;
  report.per_episode_accuracy = std::move(acc);
  const auto [mean, hw] = confidence_interval(report.per_episode_accuracy);
  report.mean_accuracy = mean;
  report.ci95_halfwidth = hw;
  report.ci_degenerate = episode_count == 1;
  report.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// One row per episode plus a trailing summary comment.
inline std::string eval_report_csv(const EvalReport& report) {
  std::string out = "episode,accuracy\n";
  char buf[96];
  for (std::size_t i = 0; i < report.per_episode_accuracy.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, report.per_episode_accuracy[i]);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "# acc=%.6f ci95=%.6f episodes=%lld\n", report.mean_accuracy,
                report.ci95_halfwidth, static_cast<long long>(report.episode_count));
  out += buf;
  return out;
}

}  // namespace olfsl
