// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion.
//
// Exit status is the number of failing criteria that were not listed with
// --known-failures, so a documented, unattainable criterion still prints
// FAIL without breaking the build.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "smp/analyzer.hpp"
#include "smp/experiment.hpp"
#include "smp/mask_io.hpp"
#include "smp/pruning.hpp"
#include "smp/random.hpp"
#include "smp/training.hpp"
#include "support/golden.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace smp;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::size_t popcount(const Mask& m) {
  std::size_t n = 0;
  for (auto b : m) n += b;
  return n;
}

// ---------------------------------------------------------------------------

Outcome gradient_check() {
  const auto start = Clock::now();
  Rng rng(2024);
  double worst = 0.0;
  std::size_t entries = 0;
  const int graphs = 200;
  for (int i = 0; i < graphs; ++i) {
    auto g = testing::random_graph(rng);
    const auto r = testing::check_gradients(g);
    worst = std::max(worst, r.max_error);
    entries += r.entries;
  }
  const double t = seconds_since(start);
  return {worst < 1e-4 && t < 10.0,
          fmt("%d graphs, %zu entries, max rel err %.2e, %.2fs", graphs, entries, worst, t)};
}

Outcome ste_contract() {
  Rng rng(31);
  std::size_t checked = 0, kept = 0, mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 6), k = 1 + uniform_index(rng, 6), b = 1 + uniform_index(rng, 4);
    auto w = testing::random_leaf(rng, {n, k});
    w.set_requires_grad(false);
    auto s = testing::random_leaf(rng, {n, k});
    Mask mask(n * k);
    for (auto& m : mask) m = static_cast<std::uint8_t>(uniform_index(rng, 2));
    auto x = testing::random_leaf(rng, {b, k});
    x.set_requires_grad(false);
    auto up = testing::random_leaf(rng, {b, n});
    up.set_requires_grad(false);

    backward(sum(multiply(gelu(linear(x, ste_mask_apply(w, mask, s), Tensor())), up)));

    // the same loss with W' as a free leaf gives dL/dW'
    std::vector<double> wm(n * k);
    for (std::size_t i = 0; i < wm.size(); ++i) wm[i] = w.data()[i] * mask[i];
    auto wprime = Tensor::from({n, k}, wm, true);
    backward(sum(multiply(gelu(linear(x, wprime, Tensor())), up)));

    for (std::size_t i = 0; i < n * k; ++i) {
      if (s.grad()[i] != wprime.grad()[i] * w.data()[i]) ++mismatches;
      kept += mask[i];
      ++checked;
    }
  }
  return {mismatches == 0 && kept > 0 && kept < checked,
          fmt("%zu entries (%zu kept, %zu pruned), %zu inexact", checked, kept, checked - kept, mismatches)};
}

Outcome scheduler() {
  double worst_mid = 0.0;
  bool ends = true, mono = true;
  for (double vf : {0.2, 0.5, 0.9, 0.97}) {
    for (std::size_t n : {2, 10, 100, 1000, 2304}) {
      SparsitySchedule s;
      s.target = vf;
      s.ramp_steps = n;
      ends = ends && schedule_sparsity(s, 0) == 0.0 && schedule_sparsity(s, n) == vf &&
             schedule_sparsity(s, n + 1) == vf && schedule_sparsity(s, 10 * n) == vf;
      for (std::size_t t = 1; t <= n + 2; ++t) mono = mono && schedule_sparsity(s, t) >= schedule_sparsity(s, t - 1);
      worst_mid = std::max(worst_mid, std::fabs(schedule_sparsity(s, n / 2) - 0.875 * vf));
    }
  }
  return {ends && mono && worst_mid <= 1e-12,
          fmt("endpoints %s, monotone %s, midpoint err %.1e", ends ? "ok" : "BAD", mono ? "ok" : "BAD", worst_mid)};
}

Outcome masking_oracles() {
  Rng rng(4242);
  std::size_t sets = 0, mism = 0, count_off = 0, matrices = 0;
  for (; sets < 1000; ++sets) {
    std::vector<std::vector<double>> scores;
    std::vector<MatrixType> types;
    const bool coarse = uniform_index(rng, 3) == 0;  // forces ties
    const std::size_t layers = 1 + uniform_index(rng, 3);
    for (std::size_t l = 0; l < layers; ++l)
      for (MatrixType t : kMatrixTypes) {
        const std::size_t n = (1 + uniform_index(rng, 8)) * (1 + uniform_index(rng, 8));
        std::vector<double> v(n);
        for (auto& x : v) x = coarse ? static_cast<double>(uniform_index(rng, 5)) - 2.0 : uniform(rng, -4.0, 4.0);
        scores.push_back(std::move(v));
        types.push_back(t);
      }
    matrices += scores.size();
    const auto views = testing::views_of(scores, types);

    // a scheduled ratio somewhere on the cubic ramp
    SparsitySchedule sched;
    sched.target = uniform(rng, 0.5, 0.99);
    sched.ramp_steps = 100;
    const double r = 1.0 - schedule_sparsity(sched, uniform_index(rng, 120));

    const auto local = mask_local(views, r);
    const auto global = mask_global(views, r);
    const auto smpm = mask_smp(views, r);
    mism += local != testing::oracle_local(scores, r);
    mism += global != testing::oracle_global(scores, r);
    mism += smpm != testing::oracle_smp(scores, types, r);

    std::size_t kept = 0, total = 0;
    const auto ratios = smp_keep_ratios(views, r);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const double n = static_cast<double>(scores[i].size());
      count_off += std::fabs(static_cast<double>(popcount(local[i])) - r * n) > 1.0;
      count_off += std::fabs(static_cast<double>(popcount(smpm[i])) - std::max(ratios[i] * n, 1.0)) > 1.0;
      kept += popcount(global[i]);
      total += scores[i].size();
    }
    count_off += std::fabs(static_cast<double>(kept) - r * static_cast<double>(total)) > 1.0;
  }
  return {mism == 0 && count_off == 0,
          fmt("%zu score sets, %zu matrices, %zu oracle mismatches, %zu counts off by >1", sets, matrices, mism, count_off)};
}

Outcome conservation() {
  // 1:9 sigmoid-mass construction at r = 0.8: the heavy matrix clamps to 1.
  std::vector<std::vector<double>> clamp{std::vector<double>(2, 0.0), std::vector<double>(18, 0.0)};
  const std::vector<ScoreView> cv{{0, MatrixType::Q, clamp[0]}, {1, MatrixType::Q, clamp[1]}};
  const auto cr = smp_keep_ratios(cv, 0.8);
  double worst = std::fabs((cr[0] + cr[1]) / 2.0 - 0.8);
  const bool clamped = cr[1] == 1.0;

  Rng rng(55);
  std::size_t trials = 0, clamped_cases = 0;
  for (; trials < 1000; ++trials) {
    std::vector<std::vector<double>> scores;
    std::vector<MatrixType> types;
    const std::size_t layers = 2 + uniform_index(rng, 4);
    for (std::size_t l = 0; l < layers; ++l)
      for (MatrixType t : kMatrixTypes) {
        std::vector<double> v(1 + uniform_index(rng, 40));
        const double shift = uniform(rng, -6.0, 6.0);
        for (auto& x : v) x = shift + uniform(rng, -2.0, 2.0);
        scores.push_back(std::move(v));
        types.push_back(t);
      }
    const double r = uniform(rng, 0.01, 1.0);
    const auto ratios = smp_keep_ratios(testing::views_of(scores, types), r);
    bool any_clamp = false;
    for (MatrixType t : kMatrixTypes) {
      double sum_r = 0.0, n = 0.0;
      for (std::size_t i = 0; i < ratios.size(); ++i)
        if (types[i] == t) {
          sum_r += ratios[i];
          n += 1.0;
          any_clamp = any_clamp || ratios[i] == 1.0;
        }
      worst = std::max(worst, std::fabs(sum_r / n - r));
    }
    clamped_cases += any_clamp;
  }
  return {clamped && worst <= 1e-12,
          fmt("1:9 case ratios %.3f/%.3f; %zu random sets (%zu with clamping), max |mean - r| %.1e", cr[0], cr[1],
              trials, clamped_cases, worst)};
}

Outcome format_checks() {
  Rng rng(10000);
  std::size_t failures = 0;
  for (int i = 0; i < 10000; ++i) {
    MaskArtifact a;
    a.fingerprint = rng();
    a.compressed = uniform_index(rng, 2) == 1;
    const double density = uniform01(rng);
    const std::size_t n = uniform_index(rng, 7);
    for (std::size_t j = 0; j < n; ++j) {
      MaskRecord rec{"layer" + std::to_string(j / 6) + ".q", static_cast<std::uint32_t>(uniform_index(rng, 24)),
                     static_cast<std::uint32_t>(uniform_index(rng, 24)), {}};
      for (std::size_t b = 0; b < std::size_t{rec.rows} * rec.cols; ++b) rec.bits.push_back(uniform01(rng) < density);
      a.records.push_back(std::move(rec));
    }
    const Bytes bytes = serialize(a);
    const MaskArtifact back = deserialize_unchecked(bytes);
    bool same = back.fingerprint == a.fingerprint && back.compressed == a.compressed &&
                back.records.size() == a.records.size() && serialize(back) == bytes;
    for (std::size_t j = 0; same && j < a.records.size(); ++j)
      same = back.records[j].name == a.records[j].name && back.records[j].bits == a.records[j].bits;
    failures += !same;

    Mask bits;
    for (std::size_t b = 0, len = uniform_index(rng, 600); b < len; ++b) bits.push_back(uniform01(rng) < density);
    failures += rle_decode(rle_encode(bits), bits.size()) != bits;
  }

  bool golden = true;
  for (bool compressed : {false, true}) {
    const Bytes want =
        read_file(std::filesystem::path(SMP_GOLDEN_DIR) / (compressed ? "masks_rle.smpm" : "masks_plain.smpm"));
    golden = golden && serialize(testing::golden_artifact(compressed)) == want;
  }

  // 3% density at the default model size
  MaskArtifact sparse = make_artifact(build_model(ModelConfig{}, 1), true);
  std::size_t payload = 0;
  for (auto& r : sparse.records) {
    std::fill(r.bits.begin(), r.bits.end(), 0);
    for (std::size_t i = 0; i < keep_count(0.03, r.bits.size()); ++i) r.bits[uniform_index(rng, r.bits.size())] = 1;
    payload += (r.bits.size() + 7) / 8;
  }
  const std::size_t rle = serialize(sparse).size() - (uncompressed_size(sparse) - payload);
  const double ratio = static_cast<double>(rle) / static_cast<double>(payload);
  return {failures == 0 && golden && ratio < 0.5,
          fmt("10000 round-trips (%zu failed), golden bytes %s, 3%% payload %zu -> %zu bytes (%.1f%%)", failures,
              golden ? "stable" : "CHANGED", payload, rle, 100.0 * ratio)};
}

Outcome analyzer_identities() {
  Rng rng(12);
  ModelConfig c;
  c.num_layers = 3;
  c.hidden_dim = 12;
  c.num_heads = 3;
  c.ffn_dim = 20;
  std::size_t bad = 0;
  const int trials = 200;
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<MaskRecord> masks;
    for (std::size_t l = 0; l < c.num_layers; ++l)
      for (MatrixType t : kMatrixTypes) {
        const auto [rows, cols] = c.matrix_shape(t);
        MaskRecord r{matrix_name(l, t), static_cast<std::uint32_t>(rows), static_cast<std::uint32_t>(cols), {}};
        const double p = uniform01(rng);
        for (std::size_t i = 0; i < rows * cols; ++i) r.bits.push_back(uniform01(rng) < p);
        masks.push_back(std::move(r));
      }
    std::size_t grand = 0;
    std::map<std::string, std::size_t> per_matrix;
    for (const auto& m : masks) {
      grand += popcount(m.bits);
      per_matrix[m.name] = popcount(m.bits);
    }
    const auto layers = layer_distribution(masks, c);
    std::size_t from_types = 0, from_all = 0;
    for (const auto& row : layers.rows) {
      if (row.type == "all") from_all += row.kept;
      else {
        from_types += row.kept;
        bad += per_matrix[matrix_name(row.layer, *parse_matrix_type(row.type))] != row.kept;
      }
    }
    bad += from_types != grand || from_all != grand;

    const auto heads = head_distribution(masks, c);
    std::map<std::string, std::size_t> head_sum;
    for (const auto& row : heads.rows) head_sum[matrix_name(row.layer, *parse_matrix_type(row.type))] += row.kept;
    for (const auto& [name, kept] : head_sum) bad += per_matrix[name] != kept;
    bad += head_sum.size() != 3 * c.num_layers;
  }
  return {bad == 0, fmt("%d random mask sets, %zu identity violations", trials, bad)};
}

// ---------------------------------------------------------------------------
// Desk-scale runs, shared by several criteria.

struct Runs {
  ExperimentConfig base;
  Dataset data;
  std::map<std::string, TrainResult> results;
  std::map<std::string, double> seconds;
  std::map<std::string, std::string> errors;

  const TrainResult* get(const std::string& name, Method method, double remaining, double lambda_r) {
    if (auto it = results.find(name); it != results.end()) return &it->second;
    if (errors.count(name)) return nullptr;
    TrainConfig t = base.train;
    t.method = method;
    t.remaining = remaining;
    t.lambda_r = lambda_r;
    std::fprintf(stderr, "[acceptance] training %s (%zu epochs)...\n", name.c_str(), t.epochs);
    const auto start = Clock::now();
    try {
      auto r = train_run(t, base.model, data);
      seconds[name] = seconds_since(start);
      std::fprintf(stderr, "[acceptance]   %s: dev %.4f in %.1fs\n", name.c_str(), r.report.final_dev_accuracy,
                   seconds[name]);
      return &results.emplace(name, std::move(r)).first->second;
    } catch (const Error& e) {
      errors[name] = e.what();
      std::fprintf(stderr, "[acceptance]   %s failed: %s\n", name.c_str(), e.what());
      return nullptr;
    }
  }

  const TrainResult* dense() { return get("dense", Method::Magnitude, 1.0, base.train.lambda_r); }
  const TrainResult* smp(double r) { return get(fmt("smp_%.2f", r), Method::Smp, r, base.train.lambda_r); }
  const TrainResult* smp_no_reg(double r) { return get(fmt("smp_%.2f_noR", r), Method::Smp, r, 0.0); }
};

Outcome freeze_contract(Runs& runs) {
  const TrainResult* r = runs.smp(0.5);
  if (!r) return {false, "run failed: " + runs.errors["smp_0.50"]};
  const ModelConfig& c = runs.base.model;
  const std::size_t weights = c.num_layers * (4 * c.hidden_dim * c.hidden_dim + 2 * c.hidden_dim * c.ffn_dim);
  const std::size_t movement = trainable_parameter_count(r->model, Method::Movement);
  const bool ok = r->report.checksum_pre == r->report.checksum_post && r->report.steps.size() >= 2000 &&
                  r->report.trainable_parameters == weights && movement == 2 * weights;
  return {ok, fmt("%zu steps, checksum %016llx -> %016llx, trainable smp=%zu movement=%zu (expected %zu / %zu)",
                  r->report.steps.size(), static_cast<unsigned long long>(r->report.checksum_pre),
                  static_cast<unsigned long long>(r->report.checksum_post), r->report.trainable_parameters, movement,
                  weights, 2 * weights)};
}

Outcome convergence(Runs& runs) {
  const TrainResult* d = runs.dense();
  const TrainResult* s = runs.smp(0.5);
  if (!d || !s) return {false, "a run failed"};
  const double gap = 100.0 * (d->report.final_dev_accuracy - s->report.final_dev_accuracy);
  const double t = runs.seconds["dense"] + runs.seconds["smp_0.50"];
  return {gap <= 2.0 && t < 600.0, fmt("dense %.2f%%, smp@0.5 %.2f%%, gap %.2f points, %.0fs for both runs",
                                      100.0 * d->report.final_dev_accuracy, 100.0 * s->report.final_dev_accuracy, gap, t)};
}

Outcome regularizer_ablation(Runs& runs) {
  const TrainResult* with = runs.smp(0.03);
  const TrainResult* without = runs.smp_no_reg(0.03);
  if (!with || !without) return {false, "a run failed"};
  return {with->report.final_dev_accuracy >= without->report.final_dev_accuracy,
          fmt("with R %.2f%%, without R %.2f%%", 100.0 * with->report.final_dev_accuracy,
              100.0 * without->report.final_dev_accuracy)};
}

Outcome sweep_shape(Runs& runs) {
  std::string detail;
  bool ok = true;
  double prev = 2.0;
  for (double r : {0.80, 0.50, 0.10, 0.03}) {
    const TrainResult* res = runs.smp(r);
    if (!res) return {false, fmt("run at %.2f failed", r)};
    const double acc = res->report.final_dev_accuracy;
    if (acc > prev + 0.01) ok = false;
    prev = acc;
    detail += fmt("%s%.2f:%.2f%%", detail.empty() ? "" : ", ", r, 100.0 * acc);
  }
  return {ok, detail};
}

Outcome compaction(Runs& runs) {
  std::string detail;
  bool ok = true;
  double worst = 0.0;
  for (double r : {0.5, 0.03}) {
    const TrainResult* res = runs.smp(r);
    if (!res) return {false, fmt("run at %.2f failed", r)};
    const auto c = compact(res->model, res->artifact, 0, 1024);
    worst = std::max(worst, c.report.max_deviation);
    ok = ok && c.report.probe_count == 1024 && c.report.max_deviation <= 1e-10;
    if (r == 0.03) {
      ok = ok && c.report.compacted_parameters < c.report.original_parameters;
      detail = fmt("3%%: %zu -> %zu parameters (%zu units, %zu heads dropped); ", c.report.original_parameters,
                   c.report.compacted_parameters, c.report.removed_units, c.report.removed_heads);
    }
  }
  return {ok, detail + fmt("max deviation %.2e over 1024 probes", worst)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::size_t epochs = 30;
  std::vector<int> known;
  std::vector<int> only;
  app.add_option("--epochs", epochs, "epochs for the desk-scale runs");
  app.add_option("--known-failures", known, "criteria documented as unattainable")->delimiter(',');
  app.add_option("--only", only, "run a subset of criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  Runs runs;
  runs.base = parse_experiment("");
  runs.base.train.epochs = epochs;
  runs.data = load_dataset(runs.base.dataset);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradient_check},
      {"straight-through contract", ste_contract},
      {"cubic scheduler", scheduler},
      {"masking oracles", masking_oracles},
      {"keep-ratio conservation", conservation},
      {"freeze contract", [&] { return freeze_contract(runs); }},
      {"desk-scale convergence", [&] { return convergence(runs); }},
      {"regularizer ablation", [&] { return regularizer_ablation(runs); }},
      {"sweep shape", [&] { return sweep_shape(runs); }},
      {"mask format", format_checks},
      {"compaction", [&] { return compaction(runs); }},
      {"analyzer identities", analyzer_identities},
  };

  const std::set<int> known_set(known.begin(), known.end());
  const std::set<int> only_set(only.begin(), only.end());
  int unexpected = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only_set.empty() && !only_set.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const bool expected = known_set.count(id) > 0;
    std::printf("%s %2d %s: %s%s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), o.detail.c_str(),
                !o.pass && expected ? " [known failure]" : "");
    std::fflush(stdout);
    if (!o.pass && !expected) ++unexpected;
  }
  return unexpected;
}
