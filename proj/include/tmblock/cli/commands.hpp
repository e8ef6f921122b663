#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmblock/analyze/analyze.hpp"
#include "tmblock/checks/checks.hpp"
#include "tmblock/train/train.hpp"

// The commands behind the `tmb` executable. Each one echoes its resolved
// configuration to `log` before doing any work and writes its artifacts under
// the output directory with fixed file names.
namespace tmb::cli {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2, kExitIo = 3 };

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Maps the exception currently being handled to an exit code and prints a
/// one-line message to `err`. Call from inside a catch block.
int exit_code_for_current_exception(std::ostream& err);

/// Reads a run configuration file; I/O failures throw train::IoError.
train::RunConfig read_run_config(const std::filesystem::path& path);

/// "synth" selects the synthetic set; anything else is a CIFAR-10 directory.
void apply_data_flag(train::RunConfig& rc, const std::string& data);

/// Comma-separated values; a "..." element continues the arithmetic
/// progression set by the two values before it up to the value after it.
std::vector<double> parse_grid(const std::string& text);

// ---------------------------------------------------------------------------

/// `suite` is solvers, grads or all. Returns kExitOk iff every check passed.
int cmd_check(const std::string& suite, std::ostream& log, const checks::Solvers& solvers = {},
              const checks::SuiteOptions& options = {});

struct TrainReport {
  train::History history;
  double test_acc = 0.0;
  std::filesystem::path out_dir;
};

/// Writes config.txt, history.csv and best.ckpt under `out`.
TrainReport cmd_train(const train::RunConfig& rc, const std::filesystem::path& out, std::ostream& log);

/// Accuracy of a checkpoint on the chosen split (train, val or test) of the
/// data described by `rc`.
double cmd_eval(const std::filesystem::path& checkpoint, const train::RunConfig& rc,
                const std::string& split, std::ostream& log);

/// Bytes the perturbed activation keeps alive for one training batch summed
/// over every residual unit.
std::size_t perturbed_activation_bytes(const net::NetConfig& cfg, std::size_t batch,
                                       std::size_t height, std::size_t width, std::size_t samples);

struct BnReluAblation {
  blocks::Mixing variant = blocks::Mixing::bn_relu;
  blocks::MixingParams params;
  std::size_t memory_budget_bytes = std::size_t{1} << 30;
};

/// Trains `rc` with the residual-unit activation replaced by the chosen
/// variant. The perturbed variant is refused when its noise bookkeeping
/// would exceed the memory budget.
TrainReport cmd_ablate_bnrelu(train::RunConfig rc, const BnReluAblation& ablation,
                              const std::filesystem::path& out, std::ostream& log);

struct LambdaRow {
  double lambda = 0.0;
  std::size_t best_epoch = 0;
  double best_val_acc = 0.0;
  double final_val_acc = 0.0;
  double final_aux_loss = 0.0;
  double test_acc = 0.0;
};

/// One run per lambda under out/lambda_<value>/ plus out/summary.csv.
std::vector<LambdaRow> cmd_ablate_lambda(const train::RunConfig& rc, const std::vector<double>& grid,
                                         const std::filesystem::path& out, std::ostream& log);
std::string lambda_summary_csv(const std::vector<LambdaRow>& rows);

struct AnalyzeOptions {
  std::size_t kmeans = 100;
  std::size_t per_class = 80;
  std::size_t top_n = 10;
  std::uint64_t seed = 0;
  /// Also write PPM crops of the nearest patches under out/crops/.
  bool crops = true;
};

struct AnalyzeReport {
  std::vector<analyze::PatchRecord> records;
  analyze::KMeansResult kmeans;
};

/// Writes patches.csv, centers.csv and nearest.csv under `out`. Patches come
/// from the test split of the data described by `rc`.
AnalyzeReport cmd_analyze(const std::filesystem::path& checkpoint, const train::RunConfig& rc,
                          const AnalyzeOptions& options, const std::filesystem::path& out,
                          std::ostream& log);

}  // namespace tmb::cli
