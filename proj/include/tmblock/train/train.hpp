#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmblock/net/network.hpp"
#include "tmblock/train/data.hpp"

namespace tmb::train {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  double lambda = 0.5;
  std::array<double, 3> splits = {0.65, 0.15, 0.20};
  bool augment = false;
  /// Reload the best-validation weights into the network after training.
  bool restore_best = true;
  std::size_t eval_batch_size = 250;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double main_loss = 0.0;
  /// NaN for networks without a template block.
  double aux_loss = 0.0;
  double val_acc = 0.0;
  /// Running accuracy of the training batches (train-mode BN).
  double train_acc = 0.0;
};

struct History {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_acc = -1.0;
  std::size_t steps = 0;
};

/// Header "epoch,train_loss,main_loss,aux_loss,val_acc", one row per epoch,
/// shortest round-trip decimals.
std::string history_csv(const History& h);
void write_text_file(const std::filesystem::path& path, const std::string& text);

struct EvalSummary {
  double accuracy = 0.0;
  double main_loss = 0.0;
};

/// Eval-mode pass over the whole dataset in fixed order.
EvalSummary evaluate(net::Network& net, const Dataset& ds, std::size_t batch_size = 250);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam on the combined loss with a seeded shuffle per epoch. With a
/// non-empty `out_dir`, history.csv is rewritten after every epoch and
/// best.ckpt whenever validation accuracy improves (ties keep the earlier
/// epoch). A non-finite loss throws DivergenceError and leaves the last
/// checkpoint in place.
History train_loop(net::Network& net, const Dataset& train, const Dataset& val,
                   const TrainConfig& cfg, const std::filesystem::path& out_dir = {},
                   const EpochCallback& on_epoch = {});

// ---------------------------------------------------------------------------
// Run configuration shared by the command line tool and the Python module.

struct DataConfig {
  std::string source = "synth";  // synth | cifar10
  std::string dir;               // cifar10 directory; TMB_DATA_DIR overrides
  /// Generation seed of the synthetic sets and of the pooled split; kept
  /// apart from the training seed so seeds can vary over one dataset.
  std::uint64_t seed = 7;
  std::size_t synth_classes = 4;
  std::size_t synth_size = 16;
  std::size_t synth_train = 2000;
  std::size_t synth_val = 500;
  std::size_t synth_test = 500;
  std::size_t cifar_train_per_class = 500;
  std::size_t cifar_val_per_class = 100;
  std::size_t cifar_test_per_class = 100;
  /// Pool everything and split with TrainConfig::splits instead of using
  /// the separate sizes above.
  bool use_splits = false;
};

struct RunConfig {
  net::NetConfig net;
  TrainConfig train;
  DataConfig data;

  /// Net keys plus [train] and [data] sections. lambda is read from the
  /// top-level net key and mirrored into train.lambda.
  static RunConfig parse(const std::string& text);
  std::string to_text() const;
  /// Desk-scale synthetic defaults.
  static RunConfig defaults(bool with_block = true);
};

/// Builds the train/val/test sets described by `cfg`.
Splits load_data(const DataConfig& data, const TrainConfig& train);
std::string resolve_data_dir(const DataConfig& data);

}  // namespace tmb::train
