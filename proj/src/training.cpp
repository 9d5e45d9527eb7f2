// SPDX-License-Identifier: Apache-2.0
#include "smp/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "smp/random.hpp"

namespace smp {

std::string_view to_string(Method method) {
  switch (method) {
    case Method::Smp: return "smp";
    case Method::Magnitude: return "magnitude";
    case Method::Movement: return "movement";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::Smp, Method::Magnitude, Method::Movement})
    if (to_string(m) == name) return m;
  fail(ErrorKind::Config, "unknown method '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::Config, what);
  };
  require(remaining > 0.0 && remaining <= 1.0, "remaining ratio must lie in (0, 1]");
  require(!(method == Method::Smp && weight_lr), "smp runs keep weights frozen; weight learning rate must be unset");
  require(!kd || !teacher_path.empty(), "knowledge distillation requires a teacher checkpoint path");
  require(batch_size >= 1, "batch size must be >= 1");
  require(epochs >= 1, "epochs must be >= 1");
  require(lambda_r >= 0.0, "lambda_r must be non-negative");
  require(score_lr > 0.0, "score learning rate must be positive");
  require(!weight_lr || *weight_lr > 0.0, "weight learning rate must be positive");
  require(masking.kind != MaskingFunction::Kind::Threshold || (masking.threshold > 0.0 && masking.threshold < 1.0),
          "threshold tau must lie in (0, 1)");
}

SparsitySchedule TrainConfig::schedule(std::size_t total_steps) const {
  SparsitySchedule s;
  s.variant = SparsitySchedule::Variant::WarmupFree;
  s.target = target_sparsity();
  s.ramp_steps = ramp_steps ? ramp_steps
                            : std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.6 * static_cast<double>(total_steps))));
  s.validate();
  return s;
}

std::vector<std::pair<std::string, std::string>> TrainConfig::echo() const {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::string labels;
  for (std::size_t i = 0; i < label_token_ids.size(); ++i) labels += (i ? "," : "") + std::to_string(label_token_ids[i]);
  return {{"method", std::string(to_string(method))},
          {"mask_fn", std::string(to_string(masking.kind))},
          {"tau", num(masking.threshold)},
          {"remaining", num(remaining)},
          {"ramp_steps", std::to_string(ramp_steps)},
          {"lambda_r", num(lambda_r)},
          {"reg_norm", reg_norm == RegNorm::Mean ? "mean" : "sum"},
          {"score_lr", num(score_lr)},
          {"weight_lr", weight_lr ? num(*weight_lr) : "none"},
          {"score_optimizer", score_optimizer == Optimizer::Kind::Adam ? "adam" : "sgd"},
          {"lr_decay", lr_decay == LrDecay::Linear ? "linear" : "constant"},
          {"batch_size", std::to_string(batch_size)},
          {"epochs", std::to_string(epochs)},
          {"kd", kd ? "true" : "false"},
          {"teacher", teacher_path},
          {"seed", std::to_string(seed)},
          {"label_tokens", labels}};
}

std::string report_csv(const RunReport& report) {
  std::string out = "step,loss,sparsity,accuracy\n";
  char buf[128];
  for (const auto& s : report.steps) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f\n", s.step, s.loss, s.sparsity, s.accuracy);
    out += buf;
  }
  auto line = [&](const std::string& k, const std::string& v) { out += "# " + k + "=" + v + "\n"; };
  out += "# summary\n";
  for (const auto& [k, v] : report.config) line(k, v);
  line("total_steps", std::to_string(report.total_steps));
  line("ramp_steps_effective", std::to_string(report.ramp_steps));
  line("trainable_parameters", std::to_string(report.trainable_parameters));
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(report.checksum_pre));
  line("checksum_pre", buf);
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(report.checksum_post));
  line("checksum_post", buf);
  std::string accs;
  for (std::size_t i = 0; i < report.epoch_dev_accuracy.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s%.6f", i ? ";" : "", report.epoch_dev_accuracy[i]);
    accs += buf;
  }
  line("epoch_dev_accuracy", accs);
  std::snprintf(buf, sizeof buf, "%.6f", report.final_dev_accuracy);
  line("final_dev_accuracy", buf);
  line("mask_flips_after_ramp", std::to_string(report.mask_flips_after_ramp));
  line("aborted", report.aborted ? "true" : "false");
  if (report.aborted) line("abort_reason", report.abort_reason);
  for (const auto& note : report.notes) line("note", note);
  return out;
}

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits) {
  if (student_logits.cols() != teacher_logits.cols()) {
    fail(ErrorKind::Shape, "kd_loss: student has " + std::to_string(student_logits.cols()) +
                               " labels, teacher has " + std::to_string(teacher_logits.cols()));
  }
  const Tensor teacher = Tensor::from(teacher_logits.shape(), {teacher_logits.data().begin(), teacher_logits.data().end()});
  return kl_divergence(softmax(student_logits), softmax(teacher));
}

std::size_t trainable_parameter_count(const EncoderModel& model, Method method) {
  std::size_t weights = 0;
  for (const MaskedLinear* lin : model.prunable()) weights += lin->size();
  switch (method) {
    case Method::Smp: return weights;  // one score per weight
    case Method::Magnitude: return weights;
    case Method::Movement: return 2 * weights;
  }
  return 0;
}

namespace {

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

GradMode grad_mode(Method method) {
  switch (method) {
    case Method::Smp: return GradMode::Scores;
    case Method::Magnitude: return GradMode::Weights;
    case Method::Movement: return GradMode::WeightsAndScores;
  }
  return GradMode::None;
}

std::string score_stats(const EncoderModel& model) {
  double lo = INFINITY, hi = -INFINITY, total = 0.0;
  std::size_t n = 0;
  for (const MaskedLinear* lin : model.prunable())
    for (double s : lin->scores.data()) {
      lo = std::min(lo, s);
      hi = std::max(hi, s);
      total += s;
      ++n;
    }
  char buf[160];
  std::snprintf(buf, sizeof buf, "scores min=%.6g max=%.6g mean=%.6g", lo, hi, n ? total / static_cast<double>(n) : 0.0);
  return buf;
}

}  // namespace

double evaluate(const EncoderModel& model, std::span<const Example> examples) {
  if (examples.empty()) return 0.0;
  const auto weights = effective_weights(model, GradMode::None);
  std::size_t correct = 0;
  for (const auto& ex : examples) {
    const Tensor logits = forward(model, weights, ex.tokens);
    correct += argmax(logits.data()) == ex.label;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

Trainer::Trainer(EncoderModel& model, const TrainConfig& config, std::size_t total_steps, const EncoderModel* teacher)
    : model_(model),
      config_(config),
      schedule_(config.schedule(total_steps)),
      teacher_(teacher),
      total_steps_(total_steps),
      score_opt_(config.score_optimizer == Optimizer::Kind::Adam ? Optimizer::adam({.lr = config.score_lr})
                                                                  : Optimizer::sgd(config.score_lr)),
      weight_opt_(Optimizer::adam({.lr = config.effective_weight_lr()})) {
  config_.validate();
  if (config_.kd && !teacher_) fail(ErrorKind::Config, "knowledge distillation requires a loaded teacher model");
  if (teacher_ && teacher_->config.num_labels != model_.config.num_labels) {
    fail(ErrorKind::Config, "teacher and student disagree on the number of labels");
  }
  const bool train_weights = config_.method != Method::Smp;
  const bool train_scores = config_.method != Method::Magnitude;
  for (MaskedLinear* lin : model_.prunable()) {
    lin->weight.set_requires_grad(train_weights);
    lin->scores.set_requires_grad(train_scores);
  }
}

void Trainer::refresh_masks(std::size_t step) {
  const double remaining = 1.0 - schedule_sparsity(schedule_, step);
  auto prunable = model_.prunable();
  MaskSet masks;
  if (config_.method == Method::Magnitude) {
    std::vector<std::vector<double>> magnitudes;
    for (const MaskedLinear* lin : prunable) magnitudes.push_back(compute_scores_magnitude(lin->weight.data()));
    std::vector<ScoreView> views;
    for (std::size_t i = 0; i < prunable.size(); ++i) views.push_back({prunable[i]->layer, prunable[i]->type, magnitudes[i]});
    masks = compute_masks(config_.masking, views, remaining);
  } else {
    const auto views = score_views(model_);
    masks = compute_masks(config_.masking, views, remaining);
  }
  for (std::size_t i = 0; i < prunable.size(); ++i) prunable[i]->mask = std::move(masks[i]);
}

StepMetrics Trainer::train_step(std::span<const Example> batch, std::size_t step) {
  if (batch.empty()) fail(ErrorKind::Contract, "train_step: empty batch");
  StepMetrics metrics;
  metrics.step = step;
  metrics.sparsity = schedule_sparsity(schedule_, step);

  auto prunable = model_.prunable();
  std::vector<Mask> previous;
  for (const MaskedLinear* lin : prunable) previous.push_back(lin->mask);
  refresh_masks(step);
  for (std::size_t i = 0; i < prunable.size(); ++i)
    for (std::size_t j = 0; j < previous[i].size(); ++j) metrics.mask_flips += previous[i][j] != prunable[i]->mask[j];

  const auto weights = effective_weights(model_, grad_mode(config_.method));
  std::vector<Tensor> rows;
  std::vector<std::uint32_t> labels;
  rows.reserve(batch.size());
  std::size_t correct = 0;
  for (const auto& ex : batch) {
    rows.push_back(forward(model_, weights, ex.tokens));
    labels.push_back(ex.label);
    correct += argmax(rows.back().data()) == ex.label;
  }
  metrics.accuracy = static_cast<double>(correct) / static_cast<double>(batch.size());
  const Tensor logits = stack_rows(rows);

  auto abort_numerical = [&](const std::string& what) {
    char buf[96];
    std::snprintf(buf, sizeof buf, " at step %zu (score lr %.3g, weight lr %.3g); ", step, config_.score_lr,
                  config_.effective_weight_lr());
    fail(ErrorKind::Numerical, what + buf + score_stats(model_));
  };
  for (double z : logits.data())
    if (!std::isfinite(z)) abort_numerical("non-finite logits");

  const Tensor ce = cross_entropy(logits, labels);
  metrics.ce = ce.item();
  Tensor loss = ce;
  if (config_.kd) {
    std::vector<Tensor> teacher_rows;
    for (const auto& ex : batch) {
      const auto t = forward(*teacher_, ex.tokens);
      teacher_rows.push_back(Tensor::from({t.size()}, t));
    }
    const Tensor kd = kd_loss(logits, stack_rows(teacher_rows));
    metrics.kd = kd.item();
    loss = add(loss, kd);
  }
  backward(loss);
  metrics.loss = loss.item();

  std::vector<RegularizerTerm> reg(prunable.size());
  const double vf = schedule_.target;
  if (config_.method == Method::Smp && config_.lambda_r > 0.0 && vf > 0.0) {
    for (std::size_t i = 0; i < prunable.size(); ++i) {
      double lambda = config_.lambda_r;
      if (config_.reg_norm == TrainConfig::RegNorm::Mean)
        lambda /= static_cast<double>(prunable[i]->size() * prunable.size());
      reg[i] = regularizer(prunable[i]->scores.data(), lambda, metrics.sparsity, vf);
      metrics.regularizer += reg[i].value;
    }
  }
  metrics.loss += metrics.regularizer;
  if (!std::isfinite(metrics.loss)) abort_numerical("non-finite loss");

  double decay = 1.0;
  if (config_.lr_decay == TrainConfig::LrDecay::Linear && total_steps_ > 0)
    decay = std::max(0.0, 1.0 - static_cast<double>(step) / static_cast<double>(total_steps_));
  score_opt_.set_lr(config_.score_lr * decay);
  weight_opt_.set_lr(config_.effective_weight_lr() * decay);
  for (std::size_t i = 0; i < prunable.size(); ++i) {
    MaskedLinear& lin = *prunable[i];
    switch (config_.method) {
      case Method::Smp: update_scores_smp(lin.scores, reg[i].gradient, score_opt_, i); break;
      case Method::Magnitude:
        weight_opt_.step(i, lin.weight.mutable_data(), lin.weight.grad());
        break;
      case Method::Movement:
        weight_opt_.step(i, lin.weight.mutable_data(), lin.weight.grad());
        score_opt_.step(i, lin.scores.mutable_data(), lin.scores.grad());
        break;
    }
    lin.weight.clear_grad();
    lin.scores.clear_grad();
  }
  return metrics;
}

TrainResult train_run(const TrainConfig& config, const ModelConfig& model_config, const Dataset& dataset,
                      const EncoderModel* teacher) {
  config.validate();
  model_config.validate();
  if (dataset.num_labels != model_config.num_labels) {
    fail(ErrorKind::Config, "dataset has " + std::to_string(dataset.num_labels) + " labels, model expects " +
                                std::to_string(model_config.num_labels));
  }
  if (dataset.train.empty()) fail(ErrorKind::Dataset, "training split is empty");
  for (const auto* split : {&dataset.train, &dataset.dev})
    for (const auto& ex : *split) {
      if (ex.tokens.size() > model_config.max_seq_len) fail(ErrorKind::Dataset, "example longer than max_seq_len");
      for (auto t : ex.tokens)
        if (t >= model_config.vocab_size) fail(ErrorKind::Dataset, "example token outside the model vocabulary");
    }

  TrainResult result;
  result.model = build_model(model_config, config.seed);
  EncoderModel& model = result.model;
  if (!config.label_token_ids.empty()) init_head_from_label_words(model, config.label_token_ids);

  RunReport& report = result.report;
  report.config = config.echo();
  report.notes = {"activation=gelu (tanh approximation)",
                  "init=uniform(+-sqrt(3/fan_in)) weights; uniform(+-sqrt(3/d)) embeddings; zero biases; unit layer norms",
                  "scores_init=0", "kd_temperature=1"};
  const std::size_t per_epoch = (dataset.train.size() + config.batch_size - 1) / config.batch_size;
  report.total_steps = per_epoch * config.epochs;
  report.trainable_parameters = trainable_parameter_count(model, config.method);
  report.checksum_pre = frozen_checksum(model);

  Trainer trainer(model, config, report.total_steps, teacher);
  report.ramp_steps = trainer.schedule().ramp_steps;

  std::vector<std::size_t> order(dataset.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Example> batch;
  std::size_t step = 0;
  try {
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      Rng rng(config.seed * 0x9E3779B97F4A7C15ULL + epoch + 1);
      shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        batch.clear();
        for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i)
          batch.push_back(dataset.train[order[i]]);
        const StepMetrics m = trainer.train_step(batch, step);
        if (step > report.ramp_steps) report.mask_flips_after_ramp += m.mask_flips;
        report.steps.push_back(m);
        ++step;
      }
      report.epoch_dev_accuracy.push_back(evaluate(model, dataset.dev));
    }
  } catch (const Error& e) {
    report.aborted = true;
    report.abort_reason = e.what();
    report.checksum_post = frozen_checksum(model);
    throw TrainingAborted(e, report);
  }

  trainer.refresh_masks(report.total_steps);
  report.final_dev_accuracy = evaluate(model, dataset.dev);
  report.checksum_post = frozen_checksum(model);
  for (MaskedLinear* lin : model.prunable()) {
    lin->weight.set_requires_grad(false);
    lin->scores.set_requires_grad(false);
  }
  result.artifact = make_artifact(model);
  report.layer_densities = layer_distribution(result.artifact.records, model_config);
  report.head_densities = head_distribution(result.artifact.records, model_config);
  return result;
}

}  // namespace smp
