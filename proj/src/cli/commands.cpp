#include "tmblock/cli/commands.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "tmblock/autodiff/ops.hpp"
#include "tmblock/matchers/layers.hpp"
#include "tmblock/train/checkpoint.hpp"

namespace tmb::cli {

namespace fs = std::filesystem;

namespace {

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw train::IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void echo(std::ostream& log, const std::string& command, const std::vector<std::string>& flags,
          const train::RunConfig* rc) {
  log << "# command = " << command << "\n";
  for (const auto& f : flags) log << "# " << f << "\n";
  if (rc != nullptr) log << rc->to_text();
  log << "# ---\n";
  log.flush();
}

void check_classes(const train::Dataset& ds, std::size_t expected, const char* what) {
  if (ds.num_classes() != expected) {
    throw UsageError(std::string(what) + " has " + std::to_string(expected) + " classes but the data has " +
                     std::to_string(ds.num_classes()));
  }
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

double parse_number(const std::string& text) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size() || !std::isfinite(v)) {
    throw UsageError("not a number: '" + text + "'");
  }
  return v;
}

void write_ppm(const fs::path& path, const analyze::Crop& crop) {
  const std::size_t h = crop.y1 - crop.y0, w = crop.x1 - crop.x0;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw train::IoError("cannot write " + path.string());
  const bool rgb = crop.channels == 3;
  out << (rgb ? "P6" : "P5") << "\n" << w << " " << h << "\n255\n";
  const std::size_t plane = h * w;
  for (std::size_t i = 0; i < plane; ++i) {
    if (rgb) {
      for (std::size_t c = 0; c < 3; ++c) out.put(static_cast<char>(crop.pixels[c * plane + i]));
    } else {
      out.put(static_cast<char>(crop.pixels[i]));
    }
  }
  if (!out) throw train::IoError("write failed for " + path.string());
}

const train::Dataset& pick_split(const train::Splits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw UsageError("unknown split '" + name + "' (expected train, val or test)");
}

}  // namespace

int exit_code_for_current_exception(std::ostream& err) {
  try {
    throw;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const train::IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const train::DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitIo;
  } catch (const train::CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    err << "invalid argument: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

train::RunConfig read_run_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw train::IoError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return train::RunConfig::parse(text.str());
}

void apply_data_flag(train::RunConfig& rc, const std::string& data) {
  if (data.empty()) return;
  if (data == "synth") {
    rc.data.source = "synth";
    rc.data.dir.clear();
  } else {
    rc.data.source = "cifar10";
    rc.data.dir = data;
  }
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) parts.push_back(trim(part));
  std::vector<double> out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i] != "...") {
      out.push_back(parse_number(parts[i]));
      continue;
    }
    if (out.size() < 2 || i + 1 >= parts.size() || parts[i + 1] == "...") {
      throw UsageError("'...' needs two values before it and one after it");
    }
    const double a = out[out.size() - 2], b = out.back();
    const double step = b - a;
    const double end = parse_number(parts[i + 1]);
    if (!(step > 0.0) || end < b) throw UsageError("'...' needs an increasing progression");
    // Rounded to 12 decimals so 0,0.1,...,1 yields 0.3 and not 0.30000000000000004.
    for (std::size_t k = 2;; ++k) {
      const double v = std::round((a + static_cast<double>(k) * step) * 1e12) / 1e12;
      if (v >= end - 1e-9 * step) break;
      out.push_back(v);
    }
  }
  if (out.empty()) throw UsageError("empty grid");
  return out;
}

// ---------------------------------------------------------------------------

int cmd_check(const std::string& suite, std::ostream& log, const checks::Solvers& solvers,
              const checks::SuiteOptions& options) {
  if (suite != "solvers" && suite != "grads" && suite != "all") {
    throw UsageError("unknown suite '" + suite + "' (expected solvers, grads or all)");
  }
  echo(log, "check",
       {"suite = " + suite, "seed = " + std::to_string(options.seed),
        "oracle_instances = " + std::to_string(options.oracle_instances),
        "perturbed_samples = " + std::to_string(options.perturbed_samples),
        "grad_instances = " + std::to_string(options.grad_instances)},
       nullptr);
  std::vector<checks::CheckResult> results;
  if (suite != "grads") {
    auto r = checks::run_solver_suite(solvers, options);
    results.insert(results.end(), r.begin(), r.end());
  }
  if (suite != "solvers") {
    auto r = checks::run_grad_suite(options);
    results.insert(results.end(), r.begin(), r.end());
  }
  const checks::CheckResult* first_failure = nullptr;
  for (const auto& r : results) {
    log << checks::summary_line(r) << "\n";
    if (!r.passed && first_failure == nullptr) first_failure = &r;
  }
  if (first_failure != nullptr) {
    log << "first_failure=" << first_failure->name << ": " << first_failure->detail << "\n";
    log << "result=FAIL checks=" << results.size() << "\n";
    return kExitFailure;
  }
  log << "result=pass checks=" << results.size() << "\n";
  return kExitOk;
}

TrainReport cmd_train(const train::RunConfig& rc, const fs::path& out, std::ostream& log) {
  rc.net.validate();
  rc.train.validate();
  echo(log, "train", {"out = " + out.string()}, &rc);
  make_dir(out);
  train::write_text_file(out / "config.txt", rc.to_text());

  const auto data = train::load_data(rc.data, rc.train);
  check_classes(data.train, rc.net.num_classes, "network");
  auto net = net::Network::build(rc.net, rc.train.seed);
  log << "parameters=" << net.parameter_count() << " train=" << data.train.size()
      << " val=" << data.val.size() << " test=" << data.test.size() << "\n";
  TrainReport report;
  report.out_dir = out;
  report.history = train::train_loop(net, data.train, data.val, rc.train, out, [&](const train::EpochRecord& e) {
    log << "epoch=" << e.epoch << " train_loss=" << format_double(e.train_loss)
        << " main_loss=" << format_double(e.main_loss) << " aux_loss=" << format_double(e.aux_loss)
        << " train_acc=" << format_double(e.train_acc) << " val_acc=" << format_double(e.val_acc) << "\n";
    log.flush();
  });
  report.test_acc = train::evaluate(net, data.test, rc.train.eval_batch_size).accuracy;
  log << "best_epoch=" << report.history.best_epoch
      << " best_val_acc=" << format_double(report.history.best_val_acc)
      << " test_acc=" << format_double(report.test_acc) << "\n";
  return report;
}

double cmd_eval(const fs::path& checkpoint, const train::RunConfig& rc, const std::string& split,
                std::ostream& log) {
  echo(log, "eval", {"checkpoint = " + checkpoint.string(), "split = " + split}, &rc);
  auto net = train::load_checkpoint(checkpoint);
  const auto data = train::load_data(rc.data, rc.train);
  const auto& ds = pick_split(data, split);
  check_classes(ds, net.config().num_classes, "checkpoint");
  const auto s = train::evaluate(net, ds, rc.train.eval_batch_size);
  log << "split=" << split << " images=" << ds.size() << " accuracy=" << format_double(s.accuracy)
      << " main_loss=" << format_double(s.main_loss) << "\n";
  return s.accuracy;
}

std::size_t perturbed_activation_bytes(const net::NetConfig& cfg, std::size_t batch, std::size_t height,
                                       std::size_t width, std::size_t samples) {
  std::size_t pixels = 0, h = height, w = width;
  for (const auto& s : cfg.stages) {
    h = ad::conv_output_extent(h, 3, s.reduction, ad::Padding::same);
    w = ad::conv_output_extent(w, 3, s.reduction, ad::Padding::same);
    pixels += s.blocks * batch * h * w;
  }
  return match::perturbed_layer_bytes(pixels, samples);
}

TrainReport cmd_ablate_bnrelu(train::RunConfig rc, const BnReluAblation& ablation, const fs::path& out,
                              std::ostream& log) {
  const auto& p = ablation.params;
  if (!(p.eps > 0.0)) throw UsageError("--eps must be positive");
  if (!(p.eta > 0.0)) throw UsageError("--eta must be positive");
  if (p.samples == 0) throw UsageError("--samples must be at least 1");
  rc.net.activation = ablation.variant;
  rc.net.activation_params = p;
  if (ablation.variant == blocks::Mixing::perturbed) {
    const std::size_t side = rc.data.source == "synth" ? rc.data.synth_size : 32;
    const std::size_t need = perturbed_activation_bytes(rc.net, rc.train.batch_size, side, side, p.samples);
    if (need > ablation.memory_budget_bytes) {
      std::ostringstream msg;
      msg << "perturbed variant with samples=" << p.samples << " needs about " << need / (1024 * 1024)
          << " MiB (" << need << " bytes) per batch, over the budget of "
          << ablation.memory_budget_bytes / (1024 * 1024) << " MiB; lower --samples or raise --memory-budget-mb";
      throw UsageError(msg.str());
    }
    log << "# perturbed noise bookkeeping: " << need << " bytes per batch\n";
  }
  return cmd_train(rc, out, log);
}

std::vector<LambdaRow> cmd_ablate_lambda(const train::RunConfig& rc, const std::vector<double>& grid,
                                         const fs::path& out, std::ostream& log) {
  if (grid.empty()) throw UsageError("empty lambda grid");
  for (double l : grid) {
    if (!(l >= 0.0 && l <= 1.0)) throw UsageError("lambda " + format_double(l) + " is outside [0, 1]");
    if (l > 0.0 && !rc.net.insert_block) throw UsageError("lambda > 0 needs a network with a template block");
  }
  std::string grid_text;
  for (double l : grid) grid_text += (grid_text.empty() ? "" : ",") + format_double(l);
  echo(log, "ablate-lambda", {"grid = " + grid_text, "out = " + out.string()}, &rc);
  make_dir(out);
  std::vector<LambdaRow> rows;
  for (double l : grid) {
    auto run = rc;
    run.net.lambda = l;
    run.train.lambda = l;
    const auto rep = cmd_train(run, out / ("lambda_" + format_double(l)), log);
    LambdaRow row;
    row.lambda = l;
    row.best_epoch = rep.history.best_epoch;
    row.best_val_acc = rep.history.best_val_acc;
    row.final_val_acc = rep.history.epochs.back().val_acc;
    row.final_aux_loss = rep.history.epochs.back().aux_loss;
    row.test_acc = rep.test_acc;
    rows.push_back(row);
    train::write_text_file(out / "summary.csv", lambda_summary_csv(rows));
  }
  const auto best = std::max_element(rows.begin(), rows.end(), [](const LambdaRow& a, const LambdaRow& b) {
    return a.best_val_acc < b.best_val_acc;
  });
  log << "best_lambda=" << format_double(best->lambda) << " best_val_acc=" << format_double(best->best_val_acc)
      << " (reference optimum: lambda=0.5, equal weighting of the two losses)\n";
  return rows;
}

std::string lambda_summary_csv(const std::vector<LambdaRow>& rows) {
  std::ostringstream out;
  out << "lambda,best_epoch,best_val_acc,final_val_acc,final_aux_loss,test_acc\n";
  for (const auto& r : rows) {
    out << format_double(r.lambda) << ',' << r.best_epoch << ',' << format_double(r.best_val_acc) << ','
        << format_double(r.final_val_acc) << ',' << format_double(r.final_aux_loss) << ','
        << format_double(r.test_acc) << '\n';
  }
  return out.str();
}

AnalyzeReport cmd_analyze(const fs::path& checkpoint, const train::RunConfig& rc, const AnalyzeOptions& options,
                          const fs::path& out, std::ostream& log) {
  if (options.kmeans == 0) throw UsageError("--kmeans must be at least 1");
  if (options.per_class == 0) throw UsageError("--per-class must be at least 1");
  echo(log, "analyze",
       {"checkpoint = " + checkpoint.string(), "kmeans = " + std::to_string(options.kmeans),
        "per_class = " + std::to_string(options.per_class), "top_n = " + std::to_string(options.top_n),
        "seed = " + std::to_string(options.seed), "out = " + out.string()},
       &rc);
  auto net = train::load_checkpoint(checkpoint);
  if (!net.has_block()) {
    throw UsageError("checkpoint " + checkpoint.string() + " is a baseline network without a template block");
  }
  const auto data = train::load_data(rc.data, rc.train);
  check_classes(data.test, net.config().num_classes, "checkpoint");
  make_dir(out);

  AnalyzeReport rep;
  rep.records = analyze::export_patches(net, data.test, options.per_class, options.seed);
  train::write_text_file(out / "patches.csv", analyze::patches_csv(rep.records));
  rep.kmeans = analyze::kmeans(analyze::score_matrix(rep.records), options.kmeans, options.seed);
  if (!rep.kmeans.monotone()) throw std::runtime_error("k-means inertia increased between iterations");
  train::write_text_file(out / "centers.csv", analyze::centers_csv(rep.kmeans));

  const auto nearest = analyze::nearest_patches(rep.records, rep.kmeans.centers, options.top_n);
  const auto geom = analyze::CropGeometry::for_network(net.config(), data.test.height, data.test.width);
  train::write_text_file(out / "nearest.csv", analyze::nearest_csv(rep.records, rep.kmeans, nearest, geom));
  if (options.crops) {
    make_dir(out / "crops");
    for (std::size_t c = 0; c < nearest.size(); ++c) {
      for (std::size_t r = 0; r < nearest[c].size(); ++r) {
        const auto& rec = rep.records[nearest[c][r]];
        const auto crop = analyze::crop_patch(data.test, rec.image_index, rec.y, rec.x, geom);
        write_ppm(out / "crops" / ("center" + std::to_string(c) + "_rank" + std::to_string(r) + ".ppm"), crop);
      }
    }
  }
  log << "records=" << rep.records.size() << " centers=" << rep.kmeans.centers.rows()
      << " iterations=" << rep.kmeans.iterations << " inertia=" << format_double(rep.kmeans.inertia)
      << " converged=" << (rep.kmeans.converged ? "true" : "false") << "\n";
  return rep;
}

}  // namespace tmb::cli
