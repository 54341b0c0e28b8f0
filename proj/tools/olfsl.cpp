// Command-line front end: train | eval | predict | sweep-d | gradcheck | synth.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "olfsl/cli.hpp"
#include "olfsl/config.hpp"
#include "olfsl/errors.hpp"

using namespace olfsl;

namespace {

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  int threads = 0;
  std::string out;
  std::string checkpoint;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
  CLI::Option* out_opt = nullptr;
};

void add_common_flags(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "key=value config file");
  cmd->add_option("--set", flags.sets, "override one config key, e.g. --set train.lr=0.01")
      ->take_all();
  flags.seed_opt = cmd->add_option("--seed", flags.seed, "RNG seed (overrides config)");
  flags.threads_opt = cmd->add_option("--threads", flags.threads, "evaluation thread cap");
  flags.out_opt = cmd->add_option("--out", flags.out, "output directory");
}

RunConfig build_run_config(const CommonFlags& flags) {
  RunConfig rc = flags.config_path.empty() ? RunConfig{} : load_run_config(flags.config_path);
  for (const std::string& kv : flags.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_config_entry(rc, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (flags.seed_opt && flags.seed_opt->count()) {
    rc.seed = flags.seed;
    rc.train.seed = flags.seed;
  }
  if (flags.threads_opt && flags.threads_opt->count()) {
    rc.threads = flags.threads;
    rc.train.threads = flags.threads;
  }
  if (flags.out_opt && flags.out_opt->count()) rc.out = flags.out;
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"object-level few-shot image classification"};
  app.require_subcommand(1);

  CommonFlags train_flags, eval_flags, predict_flags, sweep_flags, grad_flags, synth_flags;

  auto* train_cmd = app.add_subcommand("train", "episodic training on the configured dataset");
  add_common_flags(train_cmd, train_flags);
  bool resume = false;
  train_cmd->add_flag("--resume", resume, "continue from <out>/latest.ckpt");

  auto* eval_cmd = app.add_subcommand("eval", "N-way K-shot evaluation of a checkpoint");
  add_common_flags(eval_cmd, eval_flags);
  eval_cmd->add_option("--checkpoint", eval_flags.checkpoint, "checkpoint file")->required();

  auto* predict_cmd = app.add_subcommand("predict", "classify query images against a support set");
  add_common_flags(predict_cmd, predict_flags);
  predict_cmd->add_option("--checkpoint", predict_flags.checkpoint, "checkpoint file")->required();
  std::string support_dir;
  predict_cmd->add_option("--support", support_dir, "directory with one subdirectory per class")
      ->required();
  std::vector<std::string> query_paths;
  predict_cmd->add_option("queries", query_paths, "query image files");

  auto* sweep_cmd = app.add_subcommand("sweep-d", "train and evaluate across object-grid sizes");
  add_common_flags(sweep_cmd, sweep_flags);
  std::string d_values_csv;
  sweep_cmd->add_option("--d-values", d_values_csv, "comma-separated d values, e.g. 1,2,4")
      ->required();

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  add_common_flags(grad_cmd, grad_flags);
  bool inject_fault = false;
  grad_cmd
      ->add_flag("--inject-backward-fault", inject_fault,
                 "corrupt one gradient before checking (self-test of the harness)")
      ->group("");  // hidden

  auto* synth_cmd = app.add_subcommand("synth", "materialize the synthetic glyph dataset");
  add_common_flags(synth_cmd, synth_flags);
  bool force = false;
  synth_cmd->add_flag("--force", force, "overwrite a non-empty target directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (train_cmd->parsed()) {
      return cmd_train(build_run_config(train_flags), resume, std::cout, std::cerr);
    }
    if (eval_cmd->parsed()) {
      return cmd_eval(build_run_config(eval_flags), eval_flags.checkpoint, std::cout, std::cerr);
    }
    if (predict_cmd->parsed()) {
      return cmd_predict(build_run_config(predict_flags), predict_flags.checkpoint, support_dir,
                         query_paths, std::cout, std::cerr);
    }
    if (sweep_cmd->parsed()) {
      return cmd_sweep_d(build_run_config(sweep_flags), parse_int_list(d_values_csv, "--d-values"),
                         std::cout, std::cerr);
    }
    if (grad_cmd->parsed()) {
      return cmd_gradcheck(build_run_config(grad_flags), inject_fault, std::cout, std::cerr);
    }
    if (synth_cmd->parsed()) {
      return cmd_synth(build_run_config(synth_flags), force, std::cout, std::cerr);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitConfig;
}
