// SPDX-License-Identifier: Apache-2.0
#include "smp/experiment.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "smp/error.hpp"

namespace smp {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  fail(ErrorKind::Config, "bad value '" + value + "' for key '" + key + "'");
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(key, v);
  return out;
}

double to_f64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) bad_value(key, v);
    return out;
  } catch (const std::logic_error&) {
    bad_value(key, v);
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v);
}

}  // namespace

void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& v) {
  using Setter = std::function<void()>;
  TrainConfig& t = c.train;
  ModelConfig& m = c.model;
  DatasetSpec& d = c.dataset;
  const std::map<std::string, Setter> table = {
      {"method", [&] { t.method = parse_method(v); }},
      {"mask_fn", [&] { t.masking.kind = parse_masking_kind(v); }},
      {"tau", [&] { t.masking.threshold = to_f64(key, v); }},
      {"remaining", [&] { t.remaining = to_f64(key, v); }},
      {"ramp_steps", [&] { t.ramp_steps = to_u64(key, v); }},
      {"lambda_r", [&] { t.lambda_r = to_f64(key, v); }},
      {"reg_norm", [&] {
         if (v == "mean") t.reg_norm = TrainConfig::RegNorm::Mean;
         else if (v == "sum") t.reg_norm = TrainConfig::RegNorm::Sum;
         else bad_value(key, v);
       }},
      {"lr", [&] { t.score_lr = to_f64(key, v); }},
      {"weight_lr", [&] {
         if (v == "none") t.weight_lr.reset();
         else t.weight_lr = to_f64(key, v);
       }},
      {"score_optimizer", [&] {
         if (v == "adam") t.score_optimizer = Optimizer::Kind::Adam;
         else if (v == "sgd") t.score_optimizer = Optimizer::Kind::Sgd;
         else bad_value(key, v);
       }},
      {"lr_decay", [&] {
         if (v == "linear") t.lr_decay = TrainConfig::LrDecay::Linear;
         else if (v == "constant") t.lr_decay = TrainConfig::LrDecay::Constant;
         else bad_value(key, v);
       }},
      {"batch_size", [&] { t.batch_size = to_u64(key, v); }},
      {"epochs", [&] { t.epochs = to_u64(key, v); }},
      {"kd", [&] { t.kd = to_bool(key, v); }},
      {"teacher", [&] { t.teacher_path = v; }},
      {"seed", [&] { t.seed = to_u64(key, v); }},
      {"label_tokens", [&] {
         t.label_token_ids.clear();
         std::stringstream ss(v);
         std::string part;
         while (std::getline(ss, part, ',')) t.label_token_ids.push_back(static_cast<std::uint32_t>(to_u64(key, trim(part))));
       }},
      {"num_layers", [&] { m.num_layers = to_u64(key, v); }},
      {"hidden_dim", [&] { m.hidden_dim = to_u64(key, v); }},
      {"num_heads", [&] { m.num_heads = to_u64(key, v); }},
      {"ffn_dim", [&] { m.ffn_dim = to_u64(key, v); }},
      {"vocab_size", [&] {
         m.vocab_size = d.vocab_size = d.synthetic.vocab_size = to_u64(key, v);
       }},
      {"max_seq_len", [&] { m.max_seq_len = to_u64(key, v); }},
      {"num_labels", [&] {
         m.num_labels = d.num_labels = d.synthetic.num_labels = to_u64(key, v);
       }},
      {"dataset", [&] {
         if (v == "synthetic") d.source = DatasetSpec::Source::Synthetic;
         else if (v == "tsv") d.source = DatasetSpec::Source::Tsv;
         else bad_value(key, v);
       }},
      {"train_path", [&] { d.train_path = v; }},
      {"dev_path", [&] { d.dev_path = v; }},
      {"tokens_column", [&] { d.tokens_column = to_u64(key, v); }},
      {"label_column", [&] { d.label_column = to_u64(key, v); }},
      {"seq_len", [&] { d.synthetic.seq_len = to_u64(key, v); }},
      {"rule_seed", [&] { d.synthetic.rule_seed = to_u64(key, v); }},
      {"train_samples", [&] { d.synthetic.train_samples = to_u64(key, v); }},
      {"dev_samples", [&] { d.synthetic.dev_samples = to_u64(key, v); }},
      {"out", [&] { c.out_dir = v; }},
  };
  const auto it = table.find(key);
  if (it == table.end()) fail(ErrorKind::Config, "unknown config key '" + key + "'");
  it->second();
}

ExperimentConfig parse_experiment(const std::string& text) {
  ExperimentConfig config;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::Config, "config line " + std::to_string(line_no) + ": expected key=value");
    }
    apply_setting(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return config;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open config '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_experiment(buf.str());
}

std::string to_text(const ExperimentConfig& c) {
  std::string out;
  auto put = [&](const std::string& k, const std::string& v) { out += k + "=" + v + "\n"; };
  for (const auto& [k, v] : c.train.echo()) {
    put(k == "score_lr" ? "lr" : k, v);
  }
  const ModelConfig& m = c.model;
  put("num_layers", std::to_string(m.num_layers));
  put("hidden_dim", std::to_string(m.hidden_dim));
  put("num_heads", std::to_string(m.num_heads));
  put("ffn_dim", std::to_string(m.ffn_dim));
  put("vocab_size", std::to_string(m.vocab_size));
  put("max_seq_len", std::to_string(m.max_seq_len));
  put("num_labels", std::to_string(m.num_labels));
  const DatasetSpec& d = c.dataset;
  put("dataset", d.source == DatasetSpec::Source::Synthetic ? "synthetic" : "tsv");
  put("train_path", d.train_path.string());
  put("dev_path", d.dev_path.string());
  put("tokens_column", std::to_string(d.tokens_column));
  put("label_column", std::to_string(d.label_column));
  put("seq_len", std::to_string(d.synthetic.seq_len));
  put("rule_seed", std::to_string(d.synthetic.rule_seed));
  put("train_samples", std::to_string(d.synthetic.train_samples));
  put("dev_samples", std::to_string(d.synthetic.dev_samples));
  put("out", c.out_dir.string());
  return out;
}

void validate(const ExperimentConfig& c) {
  c.train.validate();
  c.model.validate();
  const DatasetSpec& d = c.dataset;
  if (d.source == DatasetSpec::Source::Tsv && (d.train_path.empty() || d.dev_path.empty())) {
    fail(ErrorKind::Config, "tsv datasets need train_path and dev_path");
  }
  if (d.source == DatasetSpec::Source::Synthetic) {
    d.synthetic.validate();
    if (d.synthetic.seq_len > c.model.max_seq_len) fail(ErrorKind::Config, "seq_len exceeds max_seq_len");
  }
}

}  // namespace smp
