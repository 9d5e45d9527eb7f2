// SPDX-License-Identifier: Apache-2.0
//
// smp: command-line front end (gen-data, train, sweep, analyze, compact).
#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <thread>

#include "smp/analyzer.hpp"
#include "smp/error.hpp"
#include "smp/experiment.hpp"
#include "smp/mask_io.hpp"
#include "smp/training.hpp"

namespace fs = std::filesystem;
using namespace smp;

namespace {

// Flag values collected before the config file is known; flags win.
struct Overrides {
  std::string config;
  std::optional<std::string> method, mask_fn, teacher, out;
  std::optional<double> remaining, lambda_r, lr, weight_lr, tau;
  std::optional<std::size_t> epochs, ramp_steps, batch_size;
  std::optional<std::uint64_t> seed;
  bool kd = false;
  std::vector<std::string> sets;  // --set key=value
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "key=value experiment file");
  app->add_option("--method", o.method, "smp | magnitude | movement");
  app->add_option("--mask-fn", o.mask_fn, "local | global | smp | threshold");
  app->add_option("--tau", o.tau, "threshold for --mask-fn threshold");
  app->add_option("--remaining", o.remaining, "final remaining ratio in (0, 1]");
  app->add_option("--lambda-r", o.lambda_r, "regularizer strength (default 400)");
  app->add_option("--lr", o.lr, "score learning rate (default 2e-2)");
  app->add_option("--weight-lr", o.weight_lr, "weight learning rate for the baselines");
  app->add_option("--epochs", o.epochs, "training epochs");
  app->add_option("--ramp-steps", o.ramp_steps, "cubic schedule length in steps");
  app->add_option("--batch-size", o.batch_size, "examples per step");
  app->add_flag("--kd", o.kd, "add distillation loss against --teacher");
  app->add_option("--teacher", o.teacher, "teacher checkpoint");
  app->add_option("--seed", o.seed, "run seed");
  app->add_option("--out", o.out, "output directory");
  app->add_option("--set", o.sets, "extra key=value config setting");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_experiment(o.config);
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) fail(ErrorKind::Config, "--set expects key=value, got '" + kv + "'");
    apply_setting(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.method) apply_setting(c, "method", *o.method);
  if (o.mask_fn) apply_setting(c, "mask_fn", *o.mask_fn);
  if (o.tau) apply_setting(c, "tau", num(*o.tau));
  if (o.remaining) apply_setting(c, "remaining", num(*o.remaining));
  if (o.lambda_r) apply_setting(c, "lambda_r", num(*o.lambda_r));
  if (o.lr) apply_setting(c, "lr", num(*o.lr));
  if (o.weight_lr) apply_setting(c, "weight_lr", num(*o.weight_lr));
  if (o.epochs) apply_setting(c, "epochs", std::to_string(*o.epochs));
  if (o.ramp_steps) apply_setting(c, "ramp_steps", std::to_string(*o.ramp_steps));
  if (o.batch_size) apply_setting(c, "batch_size", std::to_string(*o.batch_size));
  if (o.kd) apply_setting(c, "kd", "true");
  if (o.teacher) apply_setting(c, "teacher", *o.teacher);
  if (o.seed) apply_setting(c, "seed", std::to_string(*o.seed));
  if (o.out) apply_setting(c, "out", *o.out);
  return c;
}

fs::path require_out(const ExperimentConfig& c) {
  if (c.out_dir.empty()) fail(ErrorKind::Config, "an output directory is required (--out or out=)");
  std::error_code ec;
  fs::create_directories(c.out_dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create '" + c.out_dir.string() + "': " + ec.message());
  return c.out_dir;
}

std::optional<EncoderModel> load_teacher(const TrainConfig& t) {
  if (!t.kd) return std::nullopt;
  return load_checkpoint(read_file(t.teacher_path));
}

void write_run(const fs::path& dir, const ExperimentConfig& c, const TrainResult& r) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create '" + dir.string() + "': " + ec.message());
  write_text_atomic(dir / "report.csv", report_csv(r.report));
  write_file_atomic(dir / "masks.smpm", serialize(r.artifact));
  write_file_atomic(dir / "model.smpc", save_checkpoint(r.model));
  write_text_atomic(dir / "config.txt", to_text(c));
  export_analysis(r.report.layer_densities, dir / "layer_density.csv");
  export_analysis(r.report.head_densities, dir / "head_density.csv");
}

int cmd_gen_data(const Overrides& o) {
  ExperimentConfig c = resolve(o);
  const fs::path out = require_out(c);
  if (c.dataset.source != DatasetSpec::Source::Synthetic) fail(ErrorKind::Config, "gen-data needs dataset=synthetic");
  const Dataset ds = generate_synthetic(c.dataset.synthetic);
  write_tsv(ds.train, out / "train.tsv");
  write_tsv(ds.dev, out / "dev.tsv");
  std::cout << "train=" << (out / "train.tsv").string() << " (" << ds.train.size() << ")\n"
            << "dev=" << (out / "dev.tsv").string() << " (" << ds.dev.size() << ")\n";
  return 0;
}

int cmd_train(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  validate(c);
  const fs::path out = require_out(c);
  const Dataset ds = load_dataset(c.dataset);
  const auto teacher = load_teacher(c.train);
  TrainResult r;
  try {
    r = train_run(c.train, c.model, ds, teacher ? &*teacher : nullptr);
  } catch (const TrainingAborted& e) {
    write_text_atomic(out / "report.csv", report_csv(e.partial()));
    throw;
  }
  write_run(out, c, r);
  std::size_t kept = 0, total = 0;
  for (const auto& rec : r.artifact.records) {
    kept += static_cast<std::size_t>(std::count(rec.bits.begin(), rec.bits.end(), 1));
    total += rec.bits.size();
  }
  std::printf("method=%s\nsteps=%zu\ndensity=%.6f\nfinal_dev_accuracy=%.6f\ntrainable_parameters=%zu\nout=%s\n",
              std::string(to_string(c.train.method)).c_str(), r.report.total_steps,
              static_cast<double>(kept) / static_cast<double>(total), r.report.final_dev_accuracy,
              r.report.trainable_parameters, out.string().c_str());
  return 0;
}

std::size_t worker_count() {
  const char* env = std::getenv("SMP_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const unsigned long n = std::strtoul(env, &end, 10);
  if (*end != '\0' || n == 0) fail(ErrorKind::Config, std::string("SMP_THREADS must be a positive integer, got '") + env + "'");
  return n;
}

int cmd_sweep(const Overrides& o, const std::vector<double>& ratios, const std::vector<std::string>& methods) {
  const ExperimentConfig base = resolve(o);
  {
    // smp cells drop weight_lr themselves; every cell is validated below
    ExperimentConfig check = base;
    check.train.weight_lr.reset();
    validate(check);
  }
  const fs::path out = require_out(base);
  const Dataset ds = load_dataset(base.dataset);
  const auto teacher = load_teacher(base.train);

  struct Cell {
    ExperimentConfig config;
    std::string method;
    double remaining = 0.0;
    std::optional<double> accuracy;
  };
  std::vector<Cell> cells;
  for (const auto& m : methods)
    for (double r : ratios) {
      Cell cell{base, m, r, std::nullopt};
      cell.config.train.method = parse_method(m);
      cell.config.train.remaining = r;
      if (cell.config.train.method == Method::Smp) cell.config.train.weight_lr.reset();
      cell.config.train.validate();
      cells.push_back(std::move(cell));
    }

  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      Cell& cell = cells[i];
      char dir[64];
      std::snprintf(dir, sizeof dir, "%s_r%.4f", cell.method.c_str(), cell.remaining);
      try {
        const TrainResult r = train_run(cell.config.train, cell.config.model, ds, teacher ? &*teacher : nullptr);
        write_run(out / dir, cell.config, r);
        cell.accuracy = r.report.final_dev_accuracy;
      } catch (const Error& e) {
        std::lock_guard lock(log_mutex);
        std::cerr << "sweep cell " << dir << " failed: " << e.what() << "\n";
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t n = std::min(worker_count(), cells.size());
  for (std::size_t i = 1; i < n; ++i) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  std::string csv = "method,remaining,accuracy\n";
  char buf[128];
  for (const auto& cell : cells) {
    if (cell.accuracy) std::snprintf(buf, sizeof buf, "%s,%.4f,%.6f\n", cell.method.c_str(), cell.remaining, *cell.accuracy);
    else std::snprintf(buf, sizeof buf, "%s,%.4f,NA\n", cell.method.c_str(), cell.remaining);
    csv += buf;
  }
  write_text_atomic(out / "sweep.csv", csv);
  std::cout << csv;
  return 0;
}

// Layer count and extents come from the artifact itself; the head count
// (not recoverable from mask shapes) from the config.
ModelConfig infer_config(const MaskArtifact& a, ModelConfig base) {
  std::size_t layers = 0;
  for (const auto& r : a.records) {
    const auto id = parse_matrix_name(r.name);
    if (!id) fail(ErrorKind::Shape, "unrecognised matrix name '" + r.name + "'");
    layers = std::max(layers, id->layer + 1);
    if (id->type == MatrixType::Q) base.hidden_dim = r.rows;
    if (id->type == MatrixType::U) base.ffn_dim = r.rows;
  }
  base.num_layers = layers;
  return base;
}

int cmd_analyze(const Overrides& o, const std::string& artifact_path) {
  const ExperimentConfig c = resolve(o);
  const fs::path out = require_out(c);
  const MaskArtifact a = deserialize_unchecked(read_file(artifact_path));
  const ModelConfig mc = infer_config(a, c.model);
  if (config_fingerprint(mc) != a.fingerprint) {
    std::cerr << "note: artifact fingerprint does not match the inferred config; vocabulary or sequence length may differ\n";
  }
  const DensityTable layers = layer_distribution(a.records, mc);
  const DensityTable heads = head_distribution(a.records, mc);
  export_analysis(layers, out / "layer_density.csv");
  export_analysis(heads, out / "head_density.csv");
  std::cout << to_csv(layers);
  std::printf("head_density_stddev=%.6f\n", head_density_stddev(heads));
  return 0;
}

int cmd_compact(const Overrides& o, const std::string& artifact_path, const std::string& checkpoint_path,
                std::size_t k) {
  const ExperimentConfig c = resolve(o);
  const fs::path out = require_out(c);
  const Bytes ckpt = read_file(checkpoint_path);
  EncoderModel model = load_checkpoint(ckpt);
  const MaskArtifact a = deserialize(read_file(artifact_path), model.config);
  apply_artifact(model, a);
  const CompactionResult r = compact(model, a, k);
  write_file_atomic(out / "compacted.smpc", save_compacted(r.model));
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "min_row_weights=%zu\noriginal_parameters=%zu\ncompacted_parameters=%zu\nremoved_units=%zu\n"
                "removed_heads=%zu\nprobes=%zu\nmax_deviation=%.3e\n",
                r.report.min_row_weights, r.report.original_parameters, r.report.compacted_parameters,
                r.report.removed_units, r.report.removed_heads, r.report.probe_count, r.report.max_deviation);
  write_text_atomic(out / "compaction.txt", buf);
  std::cout << buf;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Static model pruning: train importance-score masks over frozen encoder weights"};
  app.require_subcommand(1);

  Overrides o;
  std::vector<double> ratios{0.03, 0.10, 0.50, 0.80};
  std::vector<std::string> methods{"smp", "magnitude", "movement"};
  std::string artifact, checkpoint;
  std::size_t k = 0;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic train/dev corpus as TSV");
  add_common(gen, o);
  auto* train = app.add_subcommand("train", "train one configuration");
  add_common(train, o);
  auto* sweep = app.add_subcommand("sweep", "train every (method, remaining) pair");
  add_common(sweep, o);
  sweep->add_option("--ratios", ratios, "remaining ratios")->delimiter(',');
  sweep->add_option("--methods", methods, "methods")->delimiter(',');
  auto* analyze = app.add_subcommand("analyze", "density tables of a mask artifact");
  add_common(analyze, o);
  analyze->add_option("--artifact", artifact, "mask artifact (.smpm)")->required();
  auto* compact_cmd = app.add_subcommand("compact", "drop dead rows/heads and check equivalence");
  add_common(compact_cmd, o);
  compact_cmd->add_option("--artifact", artifact, "mask artifact (.smpm)")->required();
  compact_cmd->add_option("--checkpoint", checkpoint, "model checkpoint (.smpc)")->required();
  compact_cmd->add_option("--k", k, "minimum kept weights per FFN row");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code(ErrorKind::Config);
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*train) return cmd_train(o);
    if (*sweep) return cmd_sweep(o, ratios, methods);
    if (*analyze) return cmd_analyze(o, artifact);
    if (*compact_cmd) return cmd_compact(o, artifact, checkpoint, k);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: io: " << e.what() << "\n";
    return exit_code(ErrorKind::Io);
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
