// SPDX-License-Identifier: Apache-2.0
//
// Training loops. SMP keeps every weight frozen and learns only importance
// scores; the magnitude and movement baselines fine-tune the prunable
// weights as well. A dense fine-tune is the magnitude method at remaining
// ratio 1 (the mask never drops anything).
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "smp/analyzer.hpp"
#include "smp/dataset.hpp"
#include "smp/error.hpp"
#include "smp/mask_io.hpp"
#include "smp/model.hpp"
#include "smp/pruning.hpp"

namespace smp {

enum class Method { Smp, Magnitude, Movement };

std::string_view to_string(Method method);
Method parse_method(std::string_view name);

struct TrainConfig {
  Method method = Method::Smp;
  MaskingFunction masking;
  double remaining = 0.1;  // final remaining ratio r_f = 1 - v_f
  /// Steps of the cubic ramp; 0 selects 60% of the total step count.
  std::size_t ramp_steps = 0;
  double lambda_r = 400.0;
  /// Sum: λ·Σσ(S) over every score, as written. Mean: each matrix
  /// contributes its mean σ(S), averaged over matrices, which keeps the
  /// penalty on the same scale as the task loss.
  enum class RegNorm { Sum, Mean };
  RegNorm reg_norm = RegNorm::Mean;
  double score_lr = 2e-2;
  std::optional<double> weight_lr;  // baselines only
  Optimizer::Kind score_optimizer = Optimizer::Kind::Adam;
  /// Linear: learning rates decay to zero over the run.
  enum class LrDecay { Constant, Linear };
  LrDecay lr_decay = LrDecay::Linear;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  bool kd = false;
  std::string teacher_path;
  std::uint64_t seed = 1;
  std::vector<std::uint32_t> label_token_ids;  // empty: default label words

  static constexpr double kDefaultWeightLr = 1e-3;

  void validate() const;
  double target_sparsity() const { return 1.0 - remaining; }
  double effective_weight_lr() const { return weight_lr.value_or(kDefaultWeightLr); }
  SparsitySchedule schedule(std::size_t total_steps) const;
  /// key=value lines echoing every field.
  std::vector<std::pair<std::string, std::string>> echo() const;
};

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double ce = 0.0;
  double kd = 0.0;
  double regularizer = 0.0;
  double sparsity = 0.0;
  double accuracy = 0.0;  // on the training batch
  std::size_t mask_flips = 0;
};

struct RunReport {
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<StepMetrics> steps;
  std::vector<double> epoch_dev_accuracy;
  double final_dev_accuracy = 0.0;
  std::size_t total_steps = 0;
  std::size_t ramp_steps = 0;
  std::size_t trainable_parameters = 0;
  std::uint64_t checksum_pre = 0;
  std::uint64_t checksum_post = 0;
  std::size_t mask_flips_after_ramp = 0;
  bool aborted = false;
  std::string abort_reason;
  DensityTable layer_densities;
  DensityTable head_densities;
  std::vector<std::string> notes;
};

/// step,loss,sparsity,accuracy rows followed by "# key=value" summary lines.
std::string report_csv(const RunReport& report);

/// Raised when a run aborts; carries the report up to the failing step.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const Error& cause, RunReport partial)
      : Error(cause.kind(), cause.what()), partial_(std::move(partial)) {}
  const RunReport& partial() const { return partial_; }

 private:
  RunReport partial_;
};

/// KL(p_student ‖ p_teacher) between softmaxed logit rows; the teacher side
/// is treated as a constant.
Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits);

/// Trainable-parameter count for a method (scores and/or prunable weights).
std::size_t trainable_parameter_count(const EncoderModel& model, Method method);

/// Fraction of examples whose argmax logit matches the label.
double evaluate(const EncoderModel& model, std::span<const Example> examples);

/// Owns the optimizer state of one run. The model and teacher must outlive it.
class Trainer {
 public:
  Trainer(EncoderModel& model, const TrainConfig& config, std::size_t total_steps,
          const EncoderModel* teacher = nullptr);

  /// One optimisation step at schedule step t: refresh masks at s_t, forward
  /// the batch, assemble CE (+ KD) (+ regularizer), backpropagate, update.
  StepMetrics train_step(std::span<const Example> batch, std::size_t step);

  /// Masks at the schedule's sparsity for `step`.
  void refresh_masks(std::size_t step);

  const SparsitySchedule& schedule() const { return schedule_; }

 private:
  EncoderModel& model_;
  TrainConfig config_;
  SparsitySchedule schedule_;
  const EncoderModel* teacher_;
  std::size_t total_steps_;
  Optimizer score_opt_;
  Optimizer weight_opt_;
};

struct TrainResult {
  RunReport report;
  MaskArtifact artifact;
  EncoderModel model;
};

/// Full run: builds the model from `model_config` and the seed, trains for
/// config.epochs, evaluates on the dev split once per epoch.
TrainResult train_run(const TrainConfig& config, const ModelConfig& model_config, const Dataset& dataset,
                      const EncoderModel* teacher = nullptr);

}  // namespace smp
