// SPDX-License-Identifier: Apache-2.0
//
// Importance scores, masking functions, sparsity schedules and the score
// regularizer.
//
// Bookkeeping convention: a *sparsity* s is the fraction of weights removed,
// the *remaining ratio* r = 1 - s is the fraction kept. Schedules produce
// sparsities; masking functions take remaining ratios.
#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "smp/model.hpp"

namespace smp {

using Mask = std::vector<std::uint8_t>;
using MaskSet = std::vector<Mask>;

/// Read-only view of one score matrix and where it sits in the model.
struct ScoreView {
  std::size_t layer = 0;
  MatrixType type = MatrixType::Q;
  std::span<const double> values;
};

/// Score views over the model's prunable matrices, in prunable() order.
std::vector<ScoreView> score_views(const EncoderModel& model);

struct MaskingFunction {
  enum class Kind { Local, Global, Smp, Threshold };
  Kind kind = Kind::Smp;
  double threshold = 0.5;  // τ, Threshold only
};

std::string_view to_string(MaskingFunction::Kind kind);
MaskingFunction::Kind parse_masking_kind(std::string_view name);

struct SparsitySchedule {
  enum class Variant { WarmupFree, Background };
  Variant variant = Variant::WarmupFree;
  double target = 0.9;         // v_f, final sparsity
  std::size_t ramp_steps = 1;  // N
  // Background variant only.
  double initial = 0.0;        // v_0
  std::size_t start_step = 0;  // t_0
  std::size_t frequency = 1;   // Δt

  void validate() const;
};

/// Target sparsity at step t.
double schedule_sparsity(const SparsitySchedule& schedule, std::size_t step);

/// ⌈r·n⌉ clamped to [1, n]. A relative slack of 1e-9 absorbs binary
/// rounding of r (0.1·30 must give 3, not 4).
std::size_t keep_count(double remaining, std::size_t n);

/// Keeps the k largest entries; ties go to the lower flat index.
Mask top_k_mask(std::span<const double> scores, std::size_t k);

MaskSet mask_local(std::span<const ScoreView> scores, double remaining);
MaskSet mask_global(std::span<const ScoreView> scores, double remaining);
MaskSet mask_smp(std::span<const ScoreView> scores, double remaining);
MaskSet mask_threshold(std::span<const ScoreView> scores, double tau);

/// Per-matrix keep ratios from sigmoid score mass, allocated per matrix
/// type across layers. Ratios above 1 are clamped and the excess is
/// redistributed over the remaining layers of that type until no ratio
/// exceeds 1; the per-type mean stays equal to `remaining`.
std::vector<double> smp_keep_ratios(std::span<const ScoreView> scores, double remaining);

/// Dispatches on the masking function. `remaining` is ignored by Threshold.
MaskSet compute_masks(const MaskingFunction& fn, std::span<const ScoreView> scores, double remaining);

/// R(S) = Σ σ(S_ij).
double sigmoid_mass(std::span<const double> scores);

struct RegularizerTerm {
  double value = 0.0;
  std::vector<double> gradient;
};

/// λ_R · (s_t / v_f) · Σ σ(S_ij) and its gradient λ_R · (s_t / v_f) · σ′(S_ij).
RegularizerTerm regularizer(std::span<const double> scores, double lambda_r, double sparsity, double target_sparsity);

// ---------------------------------------------------------------------------
// Optimizers for score (and baseline weight) tensors.

struct AdamConfig {
  double lr = 2e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Optimizer {
 public:
  enum class Kind { Sgd, Adam };

  static Optimizer sgd(double lr);
  static Optimizer adam(const AdamConfig& config);

  Kind kind() const { return kind_; }
  double lr() const { return config_.lr; }
  void set_lr(double lr) { config_.lr = lr; }

  /// One update of `params` against `grad`. Each parameter slot keeps its
  /// own moment estimates; `slot` identifies it across steps.
  void step(std::size_t slot, std::span<double> params, std::span<const double> grad);

 private:
  struct Moments {
    std::vector<double> m, v;
    std::uint64_t t = 0;
  };

  Kind kind_ = Kind::Sgd;
  AdamConfig config_;
  std::vector<Moments> moments_;
};

/// Steps S on g = (∂L/∂W′) ⊙ W (the straight-through grad already stored in
/// scores.grad) plus the regularizer gradient. Throws Contract if the score
/// tensor carries no gradient.
void update_scores_smp(Tensor& scores, std::span<const double> regularizer_grad, Optimizer& optimizer,
                       std::size_t slot);

/// S = |W|.
std::vector<double> compute_scores_magnitude(std::span<const double> weight);

/// S ← S − α_s · (∂L/∂W) ⊙ W.
void update_scores_movement(std::span<double> scores, std::span<const double> grad, std::span<const double> weight,
                            double lr);

}  // namespace smp
