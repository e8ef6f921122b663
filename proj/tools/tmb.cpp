#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "tmblock/cli/commands.hpp"

using namespace tmb;

namespace {

// Flags shared by every command that trains or reads data.
struct RunFlags {
  std::string config;
  std::string data;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  bool no_block = false;

  void attach(CLI::App* app, bool training) {
    app->add_option("--config", config, "Run configuration file (as echoed by a previous run)");
    app->add_option("--data", data, "'synth' or a CIFAR-10 binary directory (TMB_DATA_DIR overrides the path)");
    if (training) {
      app->add_option("--seed", seed, "Training seed (initialization, shuffling, augmentation)");
      app->add_option("--epochs", epochs, "Override the number of epochs");
      app->add_flag("--no-block", no_block, "Train the baseline without the template block");
    }
  }

  train::RunConfig resolve() const {
    auto rc = config.empty() ? train::RunConfig::defaults(true) : cli::read_run_config(config);
    cli::apply_data_flag(rc, data);
    if (seed) rc.train.seed = *seed;
    if (epochs) rc.train.epochs = *epochs;
    if (no_block) {
      rc.net.insert_block.reset();
      rc.net.lambda = 0.0;
      rc.train.lambda = 0.0;
    }
    return rc;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tmb: residual networks with template-matching blocks"};
  app.require_subcommand(1);

  auto* check = app.add_subcommand("check", "Run the solver oracles and gradient checks");
  std::string suite = "all";
  checks::SuiteOptions suite_opts;
  check->add_option("--suite", suite, "solvers, grads or all")->check(CLI::IsMember({"solvers", "grads", "all"}));
  check->add_option("--seed", suite_opts.seed, "Instance generator seed");

  auto* train_cmd = app.add_subcommand("train", "Train a network and write history.csv, best.ckpt, config.txt");
  RunFlags train_flags;
  std::string out = "tmb_out";
  train_flags.attach(train_cmd, true);
  train_cmd->add_option("--out", out, "Output directory");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  RunFlags eval_flags;
  std::string checkpoint, split = "test";
  eval_flags.attach(eval_cmd, false);
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  auto* bnrelu = app.add_subcommand("ablate-bnrelu", "Replace BN-ReLU in the residual units and train");
  RunFlags bnrelu_flags;
  cli::BnReluAblation ablation;
  std::string variant = "margin_softmax";
  std::size_t budget_mb = 1024;
  bnrelu_flags.attach(bnrelu, true);
  bnrelu->add_option("--out", out, "Output directory");
  bnrelu->add_option("--variant", variant, "bn_relu, margin_softmax or perturbed")
      ->check(CLI::IsMember({"bn_relu", "margin_softmax", "perturbed"}));
  bnrelu->add_option("--mu", ablation.params.mu, "Margin");
  bnrelu->add_option("--eta", ablation.params.eta, "Output scale");
  bnrelu->add_option("--eps", ablation.params.eps, "Temperature");
  bnrelu->add_option("--samples", ablation.params.samples, "Monte-Carlo samples of the perturbed variant");
  bnrelu->add_option("--memory-budget-mb", budget_mb, "Refuse perturbed runs needing more than this");

  auto* lambda_cmd = app.add_subcommand("ablate-lambda", "Train once per auxiliary-loss weight");
  RunFlags lambda_flags;
  std::string grid = "0,0.1,...,1";
  lambda_flags.attach(lambda_cmd, true);
  lambda_cmd->add_option("--out", out, "Output directory");
  lambda_cmd->add_option("--grid", grid, "Comma-separated lambdas; 'a,b,...,c' expands a progression");

  auto* analyze_cmd = app.add_subcommand("analyze", "Export patch scores, k-means centers and nearest patches");
  RunFlags analyze_flags;
  cli::AnalyzeOptions analyze_opts;
  bool no_crops = false;
  analyze_flags.attach(analyze_cmd, false);
  analyze_cmd->add_option("--checkpoint", checkpoint, "Checkpoint of a network with a template block")->required();
  analyze_cmd->add_option("--out", out, "Output directory");
  analyze_cmd->add_option("--kmeans", analyze_opts.kmeans, "Number of centers");
  analyze_cmd->add_option("--per-class", analyze_opts.per_class, "Images per class");
  analyze_cmd->add_option("--top-n", analyze_opts.top_n, "Nearest patches per center");
  analyze_cmd->add_option("--seed", analyze_opts.seed, "Image selection and k-means seed");
  analyze_cmd->add_flag("--no-crops", no_crops, "Skip the PPM crops");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kExitOk : cli::kExitUsage;
  }

  try {
    if (check->parsed()) return cli::cmd_check(suite, std::cout, {}, suite_opts);
    if (train_cmd->parsed()) {
      cli::cmd_train(train_flags.resolve(), out, std::cout);
    } else if (eval_cmd->parsed()) {
      cli::cmd_eval(checkpoint, eval_flags.resolve(), split, std::cout);
    } else if (bnrelu->parsed()) {
      ablation.variant = blocks::parse_mixing(variant);
      ablation.memory_budget_bytes = budget_mb * 1024 * 1024;
      cli::cmd_ablate_bnrelu(bnrelu_flags.resolve(), ablation, out, std::cout);
    } else if (lambda_cmd->parsed()) {
      cli::cmd_ablate_lambda(lambda_flags.resolve(), cli::parse_grid(grid), out, std::cout);
    } else if (analyze_cmd->parsed()) {
      analyze_opts.crops = !no_crops;
      cli::cmd_analyze(checkpoint, analyze_flags.resolve(), analyze_opts, out, std::cout);
    }
  } catch (...) {
    std::cout.flush();
    return cli::exit_code_for_current_exception(std::cerr);
  }
  return cli::kExitOk;
}
