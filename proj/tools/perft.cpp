#include <cstdint>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "perft/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"PEFT strategies for sparse Mixture-of-Experts layers"};
  app.require_subcommand(1);

  std::string config, out, checkpoint;
  std::uint64_t seed = 0;
  std::size_t layer = 0;

  auto* train = app.add_subcommand("train", "train one configuration and write its artifacts");
  train->add_option("--config", config, "experiment config (JSON)")->required();
  train->add_option("--out", out, "output directory (overrides output_dir)");
  train->add_option("--seed", seed, "override train.seed");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or a fresh model");
  eval->add_option("--config", config, "experiment config (JSON)");
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory");
  eval->add_option("--seed", seed, "override train.seed (fresh model only)");

  auto* count = app.add_subcommand("count", "print the parameter report without building tensors");
  count->add_option("--config", config, "experiment config (JSON)")->required();

  auto* analyze = app.add_subcommand("analyze", "export key/expert vectors and their PCA");
  analyze->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  analyze->add_option("--layer", layer, "layer index")->default_val(0);
  analyze->add_option("--out", out, "output directory")->required();

  auto* sweep = app.add_subcommand("sweep", "run a grid of strategies and write frontier.csv");
  sweep->add_option("--config", config, "grid config (JSON)")->required();
  sweep->add_option("--out", out, "output directory (overrides the grid's output_dir)");
  sweep->add_option("--seed", seed, "override train.seed for every cell");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : perft::cli::kConfigError;
  }

  auto overrides = [&](CLI::App* cmd) {
    perft::cli::Overrides o;
    if (cmd->count("--out") > 0) o.output_dir = out;
    if (cmd->count("--seed") > 0) o.seed = seed;
    return o;
  };

  if (train->parsed()) return perft::cli::cmd_train(config, overrides(train));
  if (eval->parsed()) {
    if (config.empty() && checkpoint.empty()) {
      std::cerr << "eval: need --config and/or --checkpoint\n";
      return perft::cli::kConfigError;
    }
    return perft::cli::cmd_eval(config,
                                checkpoint.empty() ? std::nullopt : std::optional<std::string>(checkpoint),
                                overrides(eval));
  }
  if (count->parsed()) return perft::cli::cmd_count(config);
  if (analyze->parsed()) return perft::cli::cmd_analyze(checkpoint, layer, out);
  if (sweep->parsed()) return perft::cli::cmd_sweep(config, overrides(sweep));
  return perft::cli::kConfigError;
}
