#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "s4d/commands.hpp"

// Single binary, one subcommand per pipeline stage. Flags override config
// file entries, which override compiled defaults. S4D_THREADS caps worker
// threads for machines where the run shares cores.

namespace {

struct CliState {
  s4d::RunConfig cfg;
  std::string config_file;
  std::vector<std::string> overrides;       // key=value pairs from --set
  std::vector<std::string> flag_overrides;  // key=value pairs minted by dedicated flags
};

void finalize(CliState& st) {
  if (!st.config_file.empty()) s4d::apply_config_file(st.cfg, st.config_file);
  for (const auto& kv : st.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("--set expects key=value, got: " + kv);
    s4d::set_config_key(st.cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  for (const auto& kv : st.flag_overrides) {
    const auto eq = kv.find('=');
    s4d::set_config_key(st.cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (const char* cap = std::getenv("S4D_THREADS")) {
    const int limit = std::max(1, std::atoi(cap));
    st.cfg.threads = std::min(st.cfg.threads, limit);
  }
  if (st.cfg.threads < 1) st.cfg.threads = 1;
}

// Dedicated flags queue their value and are applied after the config file,
// so an explicit flag always wins over a file entry for the same key.
void add_keyed_option(CLI::App& app, CliState& st, const std::string& flag, const std::string& key,
                      const std::string& help) {
  app.add_option_function<std::string>(
         flag, [&st, key](const std::string& v) { st.flag_overrides.push_back(key + "=" + v); },
         help)
      ->type_name("TEXT");
}

void add_keyed_flag(CLI::App& app, CliState& st, const std::string& flag, const std::string& key,
                    const std::string& help) {
  app.add_flag_callback(
      flag, [&st, key]() { st.flag_overrides.push_back(key + "=true"); }, help);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-modal masked pre-training and joint fine-tuning pipeline"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags remain valid after the subcommand name

  CliState st;
  app.add_option("--config", st.config_file, "key=value config file applied before flags");
  app.add_option("--set", st.overrides, "extra key=value override, repeatable");
  add_keyed_option(app, st, "--seed", "run.seed", "run seed");
  add_keyed_option(app, st, "--data-dir", "run.data_dir", "dataset directory");
  add_keyed_option(app, st, "--out-dir", "run.out_dir", "run output directory");
  add_keyed_option(app, st, "--checkpoint", "run.checkpoint", "checkpoint to load");
  add_keyed_option(app, st, "--threads", "run.threads", "worker threads for evaluation");
  add_keyed_option(app, st, "--moae-pos", "model.moae_pos",
                   "expert layer placement: early|middle|later|alternate");
  add_keyed_option(app, st, "--moae-layers", "model.moae_layers", "number of expert layers");
  add_keyed_option(app, st, "--experts", "model.experts", "experts per layer");
  add_keyed_option(app, st, "--sfer-prop", "finetune.sfer_prop",
                   "image-task fraction sampled per epoch");
  add_keyed_flag(app, st, "--no-pretrain", "run.no_pretrain",
                 "fine-tune from random initialization");
  add_keyed_flag(app, st, "--baseline-mtl", "run.baseline_mtl",
                 "drop expert layers (plain joint baseline)");
  add_keyed_flag(app, st, "--conflict", "data.conflict",
                 "generate the label-conflict dataset pair");

  auto* synth = app.add_subcommand("synth", "generate the synthetic image and clip corpora");
  auto* pretrain = app.add_subcommand("pretrain", "masked-reconstruction pre-training");
  auto* finetune = app.add_subcommand("finetune", "joint supervised fine-tuning");
  auto* eval = app.add_subcommand("eval", "score a checkpoint on the test splits");
  auto* analyze = app.add_subcommand("analyze", "embedding, routing, and attention diagnostics");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference audit of every operation");

  CLI11_PARSE(app, argc, argv);

  try {
    finalize(st);
    if (gradcheck->parsed()) return s4d::cmd_gradcheck();
    if (synth->parsed()) s4d::cmd_synth(st.cfg);
    if (pretrain->parsed()) s4d::cmd_pretrain(st.cfg);
    if (finetune->parsed()) s4d::cmd_finetune(st.cfg);
    if (eval->parsed()) s4d::cmd_eval(st.cfg);
    if (analyze->parsed()) s4d::cmd_analyze(st.cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
