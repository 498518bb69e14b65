#include <string>

#include <CLI11.hpp>

#include "tcil/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"TCIL class-incremental learning experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir, log_path, map_path, ckpt_path, out_path;
  bool resume = false;

  CLI::App* train = app.add_subcommand("train", "run an incremental experiment");
  train->add_option("--config", config_path, "experiment config (JSON)")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_flag("--resume", resume, "continue from the last completed step");

  CLI::App* analyze = app.add_subcommand("analyze", "error taxonomy from a prediction log");
  analyze->add_option("--log", log_path, "prediction log CSV")->required();
  analyze->add_option("--map", map_path, "class/task map CSV")->required();
  analyze->add_option("--out", out_dir, "output directory")->required();

  CLI::App* prune = app.add_subcommand("prune", "compact a checkpoint by filter pruning");
  prune->add_option("--ckpt", ckpt_path, "input checkpoint")->required();
  prune->add_option("--config", config_path, "prune config (JSON)")->required();
  prune->add_option("--out", out_path, "output checkpoint")->required();

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) return tcil::cmd_train(config_path, out_dir, resume);
  if (analyze->parsed()) return tcil::cmd_analyze(log_path, map_path, out_dir);
  return tcil::cmd_prune(ckpt_path, config_path, out_path);
}
