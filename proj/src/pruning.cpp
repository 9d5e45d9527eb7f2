// SPDX-License-Identifier: Apache-2.0
#include "smp/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "smp/error.hpp"

namespace smp {

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_remaining(std::string_view op, double remaining) {
  if (!(remaining > 0.0 && remaining <= 1.0)) {
    fail(ErrorKind::Domain, std::string(op) + ": remaining ratio must lie in (0, 1], got " + std::to_string(remaining));
  }
}

}  // namespace

std::vector<ScoreView> score_views(const EncoderModel& model) {
  std::vector<ScoreView> out;
  for (const MaskedLinear* lin : model.prunable()) out.push_back({lin->layer, lin->type, lin->scores.data()});
  return out;
}

std::string_view to_string(MaskingFunction::Kind kind) {
  switch (kind) {
    case MaskingFunction::Kind::Local: return "local";
    case MaskingFunction::Kind::Global: return "global";
    case MaskingFunction::Kind::Smp: return "smp";
    case MaskingFunction::Kind::Threshold: return "threshold";
  }
  return "?";
}

MaskingFunction::Kind parse_masking_kind(std::string_view name) {
  for (auto kind : {MaskingFunction::Kind::Local, MaskingFunction::Kind::Global, MaskingFunction::Kind::Smp,
                    MaskingFunction::Kind::Threshold}) {
    if (to_string(kind) == name) return kind;
  }
  fail(ErrorKind::Config, "unknown masking function '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Schedules

void SparsitySchedule::validate() const {
  if (!(target >= 0.0 && target < 1.0)) fail(ErrorKind::Config, "schedule: target sparsity must lie in [0, 1)");
  if (ramp_steps < 1) fail(ErrorKind::Config, "schedule: ramp steps must be >= 1");
  if (variant == Variant::Background) {
    if (!(initial >= 0.0 && initial <= target)) {
      fail(ErrorKind::Config, "schedule: initial sparsity must lie in [0, target]");
    }
    if (frequency < 1) fail(ErrorKind::Config, "schedule: pruning frequency must be >= 1");
  }
}

double schedule_sparsity(const SparsitySchedule& schedule, std::size_t step) {
  const double vf = schedule.target;
  if (schedule.variant == SparsitySchedule::Variant::WarmupFree) {
    if (step >= schedule.ramp_steps) return vf;
    const double remaining = 1.0 - static_cast<double>(step) / static_cast<double>(schedule.ramp_steps);
    return vf - vf * remaining * remaining * remaining;
  }
  // Automated gradual pruning: sparsity moves only every Δt steps.
  if (step <= schedule.start_step) return schedule.initial;
  const std::size_t span = schedule.ramp_steps * schedule.frequency;
  const std::size_t elapsed = step - schedule.start_step;
  if (elapsed >= span) return vf;
  const std::size_t quantized = elapsed / schedule.frequency * schedule.frequency;
  const double remaining = 1.0 - static_cast<double>(quantized) / static_cast<double>(span);
  return schedule.initial + (vf - schedule.initial) * (1.0 - remaining * remaining * remaining);
}

// ---------------------------------------------------------------------------
// Masking functions

std::size_t keep_count(double remaining, std::size_t n) {
  check_remaining("keep_count", remaining);
  const double exact = remaining * static_cast<double>(n);
  const auto k = static_cast<std::size_t>(std::ceil(exact * (1.0 - 1e-9)));
  return std::clamp<std::size_t>(k, 1, n);
}

Mask top_k_mask(std::span<const double> scores, std::size_t k) {
  Mask mask(scores.size(), 0);
  k = std::min(k, scores.size());
  if (k == scores.size()) {
    std::fill(mask.begin(), mask.end(), 1);
    return mask;
  }
  std::vector<std::uint32_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0u);
  auto before = [&](std::uint32_t a, std::uint32_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), before);
  for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 1;
  return mask;
}

MaskSet mask_local(std::span<const ScoreView> scores, double remaining) {
  check_remaining("mask_local", remaining);
  MaskSet out;
  out.reserve(scores.size());
  for (const auto& s : scores) out.push_back(top_k_mask(s.values, keep_count(remaining, s.values.size())));
  return out;
}

MaskSet mask_global(std::span<const ScoreView> scores, double remaining) {
  check_remaining("mask_global", remaining);
  struct Entry {
    double score;
    std::uint32_t matrix;
    std::uint32_t index;
  };
  std::vector<Entry> all;
  for (std::uint32_t m = 0; m < scores.size(); ++m)
    for (std::uint32_t i = 0; i < scores[m].values.size(); ++i) all.push_back({scores[m].values[i], m, i});

  MaskSet out;
  for (const auto& s : scores) out.emplace_back(s.values.size(), 0);
  const std::size_t k = keep_count(remaining, all.size());
  // Equivalent to keeping every score >= the k-th largest whenever that
  // value is unique; ties at the threshold go to earlier entries.
  auto before = [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.matrix != b.matrix) return a.matrix < b.matrix;
    return a.index < b.index;
  };
  if (k < all.size()) std::nth_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), before);
  for (std::size_t i = 0; i < k; ++i) out[all[i].matrix][all[i].index] = 1;
  return out;
}

double sigmoid_mass(std::span<const double> scores) {
  double total = 0.0;
  for (double s : scores) total += sigmoid(s);
  return total;
}

std::vector<double> smp_keep_ratios(std::span<const ScoreView> scores, double remaining) {
  check_remaining("mask_smp", remaining);
  std::vector<double> ratios(scores.size(), 0.0);
  std::vector<double> mass(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) mass[i] = sigmoid_mass(scores[i].values);

  for (MatrixType type : kMatrixTypes) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (scores[i].type == type) members.push_back(i);
    if (members.empty()) continue;

    const double layers = static_cast<double>(members.size());
    std::vector<bool> clamped(members.size(), false);
    std::size_t clamped_count = 0;
    for (;;) {
      const double budget = remaining * layers - static_cast<double>(clamped_count);
      double free_mass = 0.0;
      for (std::size_t j = 0; j < members.size(); ++j)
        if (!clamped[j]) free_mass += mass[members[j]];
      bool changed = false;
      for (std::size_t j = 0; j < members.size(); ++j) {
        if (clamped[j]) continue;
        const double v = mass[members[j]] * budget / free_mass;
        if (v > 1.0) {
          clamped[j] = true;
          ++clamped_count;
          changed = true;
        }
        ratios[members[j]] = std::min(v, 1.0);
      }
      if (!changed || clamped_count == members.size()) break;
    }
    for (std::size_t j = 0; j < members.size(); ++j)
      if (clamped[j]) ratios[members[j]] = 1.0;
  }
  return ratios;
}

MaskSet mask_smp(std::span<const ScoreView> scores, double remaining) {
  const auto ratios = smp_keep_ratios(scores, remaining);
  MaskSet out;
  out.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double r = std::clamp(ratios[i], 1e-300, 1.0);
    out.push_back(top_k_mask(scores[i].values, keep_count(r, scores[i].values.size())));
  }
  return out;
}

MaskSet mask_threshold(std::span<const ScoreView> scores, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) fail(ErrorKind::Domain, "mask_threshold: tau must lie in (0, 1)");
  MaskSet out;
  out.reserve(scores.size());
  for (const auto& s : scores) {
    Mask m(s.values.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = sigmoid(s.values[i]) > tau ? 1 : 0;
    out.push_back(std::move(m));
  }
  return out;
}

MaskSet compute_masks(const MaskingFunction& fn, std::span<const ScoreView> scores, double remaining) {
  switch (fn.kind) {
    case MaskingFunction::Kind::Local: return mask_local(scores, remaining);
    case MaskingFunction::Kind::Global: return mask_global(scores, remaining);
    case MaskingFunction::Kind::Smp: return mask_smp(scores, remaining);
    case MaskingFunction::Kind::Threshold: return mask_threshold(scores, fn.threshold);
  }
  fail(ErrorKind::Contract, "compute_masks: unknown masking function");
}

RegularizerTerm regularizer(std::span<const double> scores, double lambda_r, double sparsity, double target_sparsity) {
  if (!(target_sparsity > 0.0)) fail(ErrorKind::Domain, "regularizer: target sparsity must be positive");
  const double factor = lambda_r * sparsity / target_sparsity;
  RegularizerTerm term;
  term.gradient.resize(scores.size());
  double mass = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double s = sigmoid(scores[i]);
    mass += s;
    term.gradient[i] = factor * s * (1.0 - s);
  }
  term.value = factor * mass;
  return term;
}

// ---------------------------------------------------------------------------
// Optimizers and score updates

Optimizer Optimizer::sgd(double lr) {
  Optimizer opt;
  opt.kind_ = Kind::Sgd;
  opt.config_.lr = lr;
  return opt;
}

Optimizer Optimizer::adam(const AdamConfig& config) {
  Optimizer opt;
  opt.kind_ = Kind::Adam;
  opt.config_ = config;
  return opt;
}

void Optimizer::step(std::size_t slot, std::span<double> params, std::span<const double> grad) {
  if (params.size() != grad.size()) fail(ErrorKind::Shape, "optimizer: parameter and gradient sizes differ");
  if (kind_ == Kind::Sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= config_.lr * grad[i];
    return;
  }
  if (moments_.size() <= slot) moments_.resize(slot + 1);
  Moments& mo = moments_[slot];
  if (mo.m.empty()) {
    mo.m.assign(params.size(), 0.0);
    mo.v.assign(params.size(), 0.0);
  }
  if (mo.m.size() != params.size()) fail(ErrorKind::Shape, "optimizer: slot reused with a different size");
  ++mo.t;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(mo.t));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(mo.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    mo.m[i] = config_.beta1 * mo.m[i] + (1.0 - config_.beta1) * grad[i];
    mo.v[i] = config_.beta2 * mo.v[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
    const double mhat = mo.m[i] / c1;
    const double vhat = mo.v[i] / c2;
    params[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
  }
}

void update_scores_smp(Tensor& scores, std::span<const double> regularizer_grad, Optimizer& optimizer,
                       std::size_t slot) {
  if (!scores.has_grad()) fail(ErrorKind::Contract, "update_scores_smp: scores carry no gradient for this step");
  const auto g = scores.grad();
  if (regularizer_grad.empty()) {
    optimizer.step(slot, scores.mutable_data(), g);
    return;
  }
  if (regularizer_grad.size() != g.size()) fail(ErrorKind::Shape, "update_scores_smp: regularizer gradient size");
  std::vector<double> total(g.size());
  for (std::size_t i = 0; i < total.size(); ++i) total[i] = g[i] + regularizer_grad[i];
  optimizer.step(slot, scores.mutable_data(), total);
}

std::vector<double> compute_scores_magnitude(std::span<const double> weight) {
  std::vector<double> out(weight.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(weight[i]);
  return out;
}

void update_scores_movement(std::span<double> scores, std::span<const double> grad, std::span<const double> weight,
                            double lr) {
  if (scores.size() != grad.size() || scores.size() != weight.size()) {
    fail(ErrorKind::Shape, "update_scores_movement: size mismatch");
  }
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] -= lr * grad[i] * weight[i];
}

}  // namespace smp
