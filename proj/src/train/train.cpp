#include "tmblock/train/train.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "tmblock/autodiff/ops.hpp"
#include "tmblock/rng.hpp"
#include "tmblock/train/checkpoint.hpp"
#include "tmblock/train/optim.hpp"

namespace tmb::train {

void TrainConfig::validate() const {
  if (epochs == 0) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (eval_batch_size == 0) throw std::invalid_argument("eval_batch_size must be >= 1");
  if (!(lr >= 0.0)) throw std::invalid_argument("lr must be non-negative");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be non-negative");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0,1]");
  const double total = splits[0] + splits[1] + splits[2];
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split fractions must sum to 1");
}

std::string history_csv(const History& h) {
  std::ostringstream out;
  out << "epoch,train_loss,main_loss,aux_loss,val_acc\n";
  for (const auto& e : h.epochs) {
    out << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.main_loss) << ','
        << format_double(e.aux_loss) << ',' << format_double(e.val_acc) << '\n';
  }
  return out.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

EvalSummary evaluate(net::Network& net, const Dataset& ds, std::size_t batch_size) {
  EvalSummary s;
  if (ds.size() == 0) return s;
  double correct = 0.0, loss = 0.0;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t end = std::min(ds.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    std::span<const int> labels(ds.labels.data() + start, end - start);
    const auto r = net::forward_eval(net, to_input(ds, idx), labels);
    correct += r.top1 * static_cast<double>(idx.size());
    ad::NoGradGuard guard;
    loss += ad::cross_entropy(r.result.main_logits, labels).item() * static_cast<double>(idx.size());
  }
  s.accuracy = correct / static_cast<double>(ds.size());
  s.main_loss = loss / static_cast<double>(ds.size());
  return s;
}

History train_loop(net::Network& net, const Dataset& train, const Dataset& val,
                   const TrainConfig& cfg, const std::filesystem::path& out_dir,
                   const EpochCallback& on_epoch) {
  cfg.validate();
  train.validate();
  if (train.size() == 0) throw std::invalid_argument("train_loop: empty training set");
  if (train.channels != net.config().stem.in_channels) {
    throw std::invalid_argument("train_loop: dataset has " + std::to_string(train.channels) +
                                " channels, network expects " +
                                std::to_string(net.config().stem.in_channels));
  }
  const bool write = !out_dir.empty();
  if (write) std::filesystem::create_directories(out_dir);

  Adam opt(net.parameters(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  History hist;
  NetworkState best_state;
  std::vector<std::size_t> order(train.size());
  const std::size_t bytes = train.image_bytes();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    net.set_mode(ad::NormMode::train);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(combine_keys(cfg.seed, epoch));
    shuffle_rng.shuffle(order);

    double sum_total = 0.0, sum_main = 0.0, sum_aux = 0.0, sum_correct = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::size_t count = end - start;
      std::vector<std::uint8_t> images;
      std::vector<int> labels;
      images.reserve(count * bytes);
      for (std::size_t k = start; k < end; ++k) {
        const auto img = train.image(order[k]);
        images.insert(images.end(), img.begin(), img.end());
        labels.push_back(train.labels[order[k]]);
      }
      if (cfg.augment) {
        augment(images, count, train.channels, train.height, train.width, cfg.seed, epoch, batch_index);
      }
      const auto input = to_input(images, count, train.channels, train.height, train.width);
      const auto result = net.forward(input);
      const auto parts = net::loss_parts(result, labels, net.has_block() ? cfg.lambda : 0.0);
      const double total = parts.total.item();
      if (!std::isfinite(total)) {
        throw DivergenceError("loss became " + format_double(total) + " at epoch " +
                              std::to_string(epoch) + ", batch " + std::to_string(batch_index) +
                              (write ? "; last checkpoint kept at " + (out_dir / "best.ckpt").string()
                                     : std::string()));
      }
      parts.total.backward();
      opt.step();
      opt.zero_grad();
      ++hist.steps;

      const double w = static_cast<double>(count);
      sum_total += total * w;
      sum_main += parts.main.item() * w;
      sum_aux += parts.aux.defined() ? parts.aux.item() * w : 0.0;
      sum_correct += net::top1_accuracy(result.main_logits, labels) * w;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    const double n = static_cast<double>(train.size());
    rec.train_loss = sum_total / n;
    rec.main_loss = sum_main / n;
    rec.aux_loss = net.has_block() ? sum_aux / n : std::numeric_limits<double>::quiet_NaN();
    rec.train_acc = sum_correct / n;
    rec.val_acc = val.size() > 0 ? evaluate(net, val, cfg.eval_batch_size).accuracy
                                 : std::numeric_limits<double>::quiet_NaN();
    hist.epochs.push_back(rec);

    const bool improved = val.size() > 0 ? rec.val_acc > hist.best_val_acc : true;
    if (improved) {
      hist.best_val_acc = rec.val_acc;
      hist.best_epoch = epoch;
      if (cfg.restore_best) best_state = capture_state(net);
      if (write) save_checkpoint(net, out_dir / "best.ckpt");
    }
    if (write) write_text_file(out_dir / "history.csv", history_csv(hist));
    if (on_epoch) on_epoch(rec);
  }
  if (cfg.restore_best && !best_state.params.empty()) restore_state(net, best_state);
  net.set_mode(ad::NormMode::train);
  return hist;
}

// ---------------------------------------------------------------------------
// Run configuration

RunConfig RunConfig::defaults(bool with_block) {
  RunConfig rc;
  rc.net = net::NetConfig::desk(4, with_block);
  rc.train.lambda = rc.net.lambda;
  return rc;
}

RunConfig RunConfig::parse(const std::string& text) {
  const auto sections = parse_config_text(text);
  RunConfig rc;
  bool seen_train = false, seen_data = false;
  for (const auto& sec : sections) {
    if (sec.name == "train" || sec.name == "data") {
      bool& seen = sec.name == "train" ? seen_train : seen_data;
      if (seen) throw ConfigError("line " + std::to_string(sec.line) + ": duplicate section [" + sec.name + "]");
      seen = true;
    }
    if (sec.name == "train") {
      for (const auto& e : sec.entries) {
        if (e.key == "lr") rc.train.lr = config_double(e);
        else if (e.key == "weight_decay") rc.train.weight_decay = config_double(e);
        else if (e.key == "batch_size") rc.train.batch_size = config_size(e);
        else if (e.key == "epochs") rc.train.epochs = config_size(e);
        else if (e.key == "seed") rc.train.seed = config_u64(e);
        else if (e.key == "augment") rc.train.augment = config_bool(e);
        else if (e.key == "restore_best") rc.train.restore_best = config_bool(e);
        else if (e.key == "eval_batch_size") rc.train.eval_batch_size = config_size(e);
        else if (e.key == "splits") {
          std::istringstream in(e.value);
          std::string part;
          std::size_t i = 0;
          while (std::getline(in, part, ',')) {
            if (i >= 3) throw ConfigError("line " + std::to_string(e.line) + ": splits needs 3 values");
            rc.train.splits[i++] = config_double({e.key, part, e.line});
          }
          if (i != 3) throw ConfigError("line " + std::to_string(e.line) + ": splits needs 3 values");
        } else config_unknown_key(e, sec.name);
      }
    } else if (sec.name == "data") {
      for (const auto& e : sec.entries) {
        if (e.key == "source") {
          if (e.value != "synth" && e.value != "cifar10") {
            throw ConfigError("line " + std::to_string(e.line) + ": source must be synth or cifar10");
          }
          rc.data.source = e.value;
        } else if (e.key == "dir") rc.data.dir = e.value;
        else if (e.key == "seed") rc.data.seed = config_u64(e);
        else if (e.key == "synth_classes") rc.data.synth_classes = config_size(e);
        else if (e.key == "synth_size") rc.data.synth_size = config_size(e);
        else if (e.key == "synth_train") rc.data.synth_train = config_size(e);
        else if (e.key == "synth_val") rc.data.synth_val = config_size(e);
        else if (e.key == "synth_test") rc.data.synth_test = config_size(e);
        else if (e.key == "cifar_train_per_class") rc.data.cifar_train_per_class = config_size(e);
        else if (e.key == "cifar_val_per_class") rc.data.cifar_val_per_class = config_size(e);
        else if (e.key == "cifar_test_per_class") rc.data.cifar_test_per_class = config_size(e);
        else if (e.key == "use_splits") rc.data.use_splits = config_bool(e);
        else config_unknown_key(e, sec.name);
      }
    } else if (!sec.name.empty() && sec.name != "stem" && sec.name != "stage" &&
               sec.name != "insert_block") {
      throw ConfigError("line " + std::to_string(sec.line) + ": unknown section [" + sec.name + "]");
    }
  }
  bool has_stage = false;
  for (const auto& sec : sections) has_stage = has_stage || sec.name == "stage";
  if (!has_stage) throw ConfigError("config must describe the network with [stem] and [stage] sections");
  rc.net = net::NetConfig::from_sections(sections);
  rc.train.lambda = rc.net.lambda;
  rc.train.validate();
  return rc;
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  out << net.to_text();
  out << "\n[train]\n";
  out << "lr = " << format_double(train.lr) << "\n";
  out << "weight_decay = " << format_double(train.weight_decay) << "\n";
  out << "batch_size = " << train.batch_size << "\n";
  out << "epochs = " << train.epochs << "\n";
  out << "seed = " << train.seed << "\n";
  out << "splits = " << format_double(train.splits[0]) << "," << format_double(train.splits[1])
      << "," << format_double(train.splits[2]) << "\n";
  out << "augment = " << (train.augment ? "true" : "false") << "\n";
  out << "restore_best = " << (train.restore_best ? "true" : "false") << "\n";
  out << "eval_batch_size = " << train.eval_batch_size << "\n";
  out << "\n[data]\n";
  out << "source = " << data.source << "\n";
  if (!data.dir.empty()) out << "dir = " << data.dir << "\n";
  out << "seed = " << data.seed << "\n";
  out << "synth_classes = " << data.synth_classes << "\n";
  out << "synth_size = " << data.synth_size << "\n";
  out << "synth_train = " << data.synth_train << "\n";
  out << "synth_val = " << data.synth_val << "\n";
  out << "synth_test = " << data.synth_test << "\n";
  out << "cifar_train_per_class = " << data.cifar_train_per_class << "\n";
  out << "cifar_val_per_class = " << data.cifar_val_per_class << "\n";
  out << "cifar_test_per_class = " << data.cifar_test_per_class << "\n";
  out << "use_splits = " << (data.use_splits ? "true" : "false") << "\n";
  return out.str();
}

std::string resolve_data_dir(const DataConfig& data) {
  if (const char* env = std::getenv("TMB_DATA_DIR"); env != nullptr && *env != '\0') return env;
  return data.dir;
}

Splits load_data(const DataConfig& data, const TrainConfig& train) {
  if (data.source == "synth") {
    const std::size_t c = data.synth_classes;
    auto make = [&](std::size_t samples, std::uint64_t stream) {
      return synth_dataset({c, samples, data.synth_size, data.synth_size, combine_keys(data.seed, stream)});
    };
    if (data.use_splits) {
      return split(make(data.synth_train + data.synth_val + data.synth_test, 0), train.splits, data.seed);
    }
    return {make(data.synth_train, 1), make(data.synth_val, 2), make(data.synth_test, 3)};
  }
  if (data.source == "cifar10") {
    const std::string dir = resolve_data_dir(data);
    if (dir.empty()) throw DataError("cifar10 needs a data directory (config dir or TMB_DATA_DIR)");
    const auto pool = load_cifar10(dir, CifarPart::train);
    if (data.use_splits) {
      return split(balanced_subset(pool, data.cifar_train_per_class + data.cifar_val_per_class +
                                             data.cifar_test_per_class),
                   train.splits, data.seed);
    }
    const std::size_t tr = data.cifar_train_per_class, va = data.cifar_val_per_class;
    const auto head = balanced_subset(pool, tr + va);
    const double f = static_cast<double>(tr) / static_cast<double>(tr + va);
    auto s = split(head, {f, 1.0 - f, 0.0}, data.seed);
    s.test = balanced_subset(load_cifar10(dir, CifarPart::test), data.cifar_test_per_class);
    return s;
  }
  throw DataError("unknown data source '" + data.source + "'");
}

}  // namespace tmb::train
