// SPDX-License-Identifier: Apache-2.0
#include "smp/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "smp/error.hpp"
#include "smp/hash.hpp"
#include "smp/random.hpp"

namespace smp {

std::string_view matrix_type_name(MatrixType type) {
  switch (type) {
    case MatrixType::Q: return "q";
    case MatrixType::K: return "k";
    case MatrixType::V: return "v";
    case MatrixType::O: return "o";
    case MatrixType::U: return "u";
    case MatrixType::D: return "d";
  }
  return "?";
}

std::optional<MatrixType> parse_matrix_type(std::string_view name) {
  for (MatrixType t : kMatrixTypes) {
    if (matrix_type_name(t) == name) return t;
  }
  return std::nullopt;
}

std::string matrix_name(std::size_t layer, MatrixType type) {
  return "layer" + std::to_string(layer) + "." + std::string(matrix_type_name(type));
}

std::optional<MatrixId> parse_matrix_name(std::string_view name) {
  constexpr std::string_view prefix = "layer";
  if (name.substr(0, prefix.size()) != prefix) return std::nullopt;
  const auto dot = name.find('.');
  if (dot == std::string_view::npos || dot == prefix.size()) return std::nullopt;
  std::size_t layer = 0;
  for (char c : name.substr(prefix.size(), dot - prefix.size())) {
    if (c < '0' || c > '9') return std::nullopt;
    layer = layer * 10 + static_cast<std::size_t>(c - '0');
  }
  const auto type = parse_matrix_type(name.substr(dot + 1));
  if (!type) return std::nullopt;
  return MatrixId{layer, *type};
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::Config, "model config: " + what);
  };
  require(num_layers >= 1, "num_layers must be >= 1");
  require(hidden_dim >= 1, "hidden_dim must be >= 1");
  require(num_heads >= 1, "num_heads must be >= 1");
  require(ffn_dim >= 1, "ffn_dim must be >= 1");
  require(max_seq_len >= 1, "max_seq_len must be >= 1");
  require(num_labels >= 1, "num_labels must be >= 1");
  require(hidden_dim % num_heads == 0, "hidden_dim " + std::to_string(hidden_dim) +
                                           " not divisible by num_heads " + std::to_string(num_heads));
  require(vocab_size >= kFirstLabelTokenId + num_labels,
          "vocab_size must hold CLS, padding and one label word per label");
}

std::pair<std::size_t, std::size_t> ModelConfig::matrix_shape(MatrixType type) const {
  switch (type) {
    case MatrixType::U: return {ffn_dim, hidden_dim};
    case MatrixType::D: return {hidden_dim, ffn_dim};
    default: return {hidden_dim, hidden_dim};
  }
}

std::size_t ModelConfig::prunable_count() const { return num_layers * kMatrixTypes.size(); }

std::vector<std::uint32_t> default_label_token_ids(const ModelConfig& config) {
  std::vector<std::uint32_t> ids(config.num_labels);
  std::iota(ids.begin(), ids.end(), kFirstLabelTokenId);
  return ids;
}

std::size_t MaskedLinear::kept() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

namespace {

Tensor copy_tensor(const Tensor& t) {
  if (!t.defined()) return {};
  return Tensor::from(t.shape(), {t.data().begin(), t.data().end()}, t.requires_grad());
}

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = uniform(rng, -bound, bound);
  return Tensor::from(std::move(shape), std::move(values));
}

Tensor filled(std::size_t n, double value) { return Tensor::from({n}, std::vector<double>(n, value)); }

}  // namespace

EncoderModel EncoderModel::clone() const {
  EncoderModel out;
  out.config = config;
  out.token_embedding = copy_tensor(token_embedding);
  out.position_embedding = copy_tensor(position_embedding);
  out.ln_embed_gamma = copy_tensor(ln_embed_gamma);
  out.ln_embed_beta = copy_tensor(ln_embed_beta);
  for (const auto& layer : layers) {
    EncoderLayer copy;
    for (std::size_t i = 0; i < layer.linears.size(); ++i) {
      const auto& src = layer.linears[i];
      auto& dst = copy.linears[i];
      dst.name = src.name;
      dst.layer = src.layer;
      dst.type = src.type;
      dst.weight = copy_tensor(src.weight);
      dst.bias = copy_tensor(src.bias);
      dst.scores = copy_tensor(src.scores);
      dst.mask = src.mask;
    }
    copy.ln_attn_gamma = copy_tensor(layer.ln_attn_gamma);
    copy.ln_attn_beta = copy_tensor(layer.ln_attn_beta);
    copy.ln_ffn_gamma = copy_tensor(layer.ln_ffn_gamma);
    copy.ln_ffn_beta = copy_tensor(layer.ln_ffn_beta);
    out.layers.push_back(std::move(copy));
  }
  out.head.label_token_ids = head.label_token_ids;
  out.head.label_embeddings = copy_tensor(head.label_embeddings);
  return out;
}

std::vector<MaskedLinear*> EncoderModel::prunable() {
  std::vector<MaskedLinear*> out;
  for (auto& layer : layers)
    for (auto& lin : layer.linears) out.push_back(&lin);
  return out;
}

std::vector<const MaskedLinear*> EncoderModel::prunable() const {
  std::vector<const MaskedLinear*> out;
  for (const auto& layer : layers)
    for (const auto& lin : layer.linears) out.push_back(&lin);
  return out;
}

std::vector<NamedTensor> EncoderModel::named_parameters() const {
  std::vector<NamedTensor> out{{"embed.token", token_embedding},
                               {"embed.position", position_embedding},
                               {"embed.ln.gamma", ln_embed_gamma},
                               {"embed.ln.beta", ln_embed_beta}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    for (const auto& lin : layer.linears) {
      out.push_back({lin.name + ".weight", lin.weight});
      out.push_back({lin.name + ".bias", lin.bias});
    }
    const std::string prefix = "layer" + std::to_string(l);
    out.push_back({prefix + ".ln_attn.gamma", layer.ln_attn_gamma});
    out.push_back({prefix + ".ln_attn.beta", layer.ln_attn_beta});
    out.push_back({prefix + ".ln_ffn.gamma", layer.ln_ffn_gamma});
    out.push_back({prefix + ".ln_ffn.beta", layer.ln_ffn_beta});
  }
  out.push_back({"head.label_embeddings", head.label_embeddings});
  return out;
}

EncoderModel build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t d = config.hidden_dim;
  // Unit-variance-preserving uniform init: bound sqrt(3 / fan_in).
  const double embed_bound = std::sqrt(3.0 / static_cast<double>(d));

  EncoderModel model;
  model.config = config;
  model.token_embedding = uniform_tensor({config.vocab_size, d}, embed_bound, rng);
  model.position_embedding = uniform_tensor({config.max_seq_len, d}, embed_bound, rng);
  model.ln_embed_gamma = filled(d, 1.0);
  model.ln_embed_beta = filled(d, 0.0);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    EncoderLayer layer;
    for (MatrixType type : kMatrixTypes) {
      auto [rows, cols] = config.matrix_shape(type);
      auto& lin = layer.at(type);
      lin.name = matrix_name(l, type);
      lin.layer = l;
      lin.type = type;
      lin.weight = uniform_tensor({rows, cols}, std::sqrt(3.0 / static_cast<double>(cols)), rng);
      lin.bias = filled(rows, 0.0);
      lin.scores = Tensor::zeros({rows, cols});
      lin.mask.assign(rows * cols, 1);
    }
    layer.ln_attn_gamma = filled(d, 1.0);
    layer.ln_attn_beta = filled(d, 0.0);
    layer.ln_ffn_gamma = filled(d, 1.0);
    layer.ln_ffn_beta = filled(d, 0.0);
    model.layers.push_back(std::move(layer));
  }
  const auto ids = default_label_token_ids(config);
  init_head_from_label_words(model, ids);
  return model;
}

ClassifierHead init_head_from_label_words(EncoderModel& model, std::span<const std::uint32_t> label_token_ids) {
  const auto& cfg = model.config;
  if (label_token_ids.size() != cfg.num_labels) {
    fail(ErrorKind::Config, "label words: expected " + std::to_string(cfg.num_labels) + " ids, got " +
                                std::to_string(label_token_ids.size()));
  }
  std::set<std::uint32_t> seen;
  for (auto id : label_token_ids) {
    if (id >= cfg.vocab_size) fail(ErrorKind::Config, "label words: id " + std::to_string(id) + " out of vocabulary");
    if (!seen.insert(id).second) fail(ErrorKind::Config, "label words: duplicate id " + std::to_string(id));
  }
  const std::size_t d = cfg.hidden_dim;
  std::vector<double> rows;
  rows.reserve(label_token_ids.size() * d);
  const auto table = model.token_embedding.data();
  for (auto id : label_token_ids) rows.insert(rows.end(), table.begin() + id * d, table.begin() + (id + 1) * d);
  model.head.label_token_ids.assign(label_token_ids.begin(), label_token_ids.end());
  model.head.label_embeddings = Tensor::from({label_token_ids.size(), d}, std::move(rows));
  return model.head;
}

std::vector<Tensor> effective_weights(const EncoderModel& model, GradMode mode) {
  std::vector<Tensor> out;
  for (const MaskedLinear* lin : model.prunable()) {
    switch (mode) {
      case GradMode::None:
      case GradMode::Weights: out.push_back(masked_weight(lin->weight, lin->mask, Tensor())); break;
      case GradMode::Scores: out.push_back(ste_mask_apply(lin->weight, lin->mask, lin->scores)); break;
      case GradMode::WeightsAndScores: out.push_back(masked_weight(lin->weight, lin->mask, lin->scores)); break;
    }
  }
  return out;
}

Tensor encode(const EncoderModel& model, std::span<const Tensor> weights, std::span<const std::uint32_t> token_ids) {
  const auto& cfg = model.config;
  if (token_ids.empty()) fail(ErrorKind::Domain, "forward: empty sequence");
  if (token_ids.size() > cfg.max_seq_len) {
    fail(ErrorKind::Domain, "forward: sequence of " + std::to_string(token_ids.size()) + " exceeds max_seq_len " +
                                std::to_string(cfg.max_seq_len));
  }
  if (token_ids[0] != kClsTokenId) fail(ErrorKind::Domain, "forward: sequence must start with the CLS token");
  if (weights.size() != cfg.prunable_count()) {
    fail(ErrorKind::Shape, "forward: expected " + std::to_string(cfg.prunable_count()) + " weight matrices, got " +
                               std::to_string(weights.size()));
  }

  std::vector<std::uint32_t> positions(token_ids.size());
  std::iota(positions.begin(), positions.end(), 0u);
  Tensor x = add(embedding_lookup(model.token_embedding, token_ids),
                 embedding_lookup(model.position_embedding, positions));
  x = layer_norm(x, model.ln_embed_gamma, model.ln_embed_beta);

  const std::size_t heads = cfg.num_heads, dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    auto w = [&](MatrixType t) -> const Tensor& { return weights[l * kMatrixTypes.size() + static_cast<std::size_t>(t)]; };
    auto b = [&](MatrixType t) -> const Tensor& { return layer.at(t).bias; };

    const Tensor q = linear(x, w(MatrixType::Q), b(MatrixType::Q));
    const Tensor k = linear(x, w(MatrixType::K), b(MatrixType::K));
    const Tensor v = linear(x, w(MatrixType::V), b(MatrixType::V));
    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor qh = slice_cols(q, h * dh, dh);
      const Tensor kh = slice_cols(k, h * dh, dh);
      const Tensor vh = slice_cols(v, h * dh, dh);
      const Tensor attn = softmax(scale(matmul_nt(qh, kh), inv_sqrt_dh));
      head_out.push_back(matmul(attn, vh));
    }
    const Tensor attended = linear(concat_cols(head_out), w(MatrixType::O), b(MatrixType::O));
    x = layer_norm(add(x, attended), layer.ln_attn_gamma, layer.ln_attn_beta);

    const Tensor hidden = gelu(linear(x, w(MatrixType::U), b(MatrixType::U)));
    const Tensor ffn = linear(hidden, w(MatrixType::D), b(MatrixType::D));
    x = layer_norm(add(x, ffn), layer.ln_ffn_gamma, layer.ln_ffn_beta);
  }
  return x;
}

Tensor head_logits(const ClassifierHead& head, const Tensor& cls_hidden) {
  return linear(cls_hidden, head.label_embeddings, Tensor());
}

Tensor forward(const EncoderModel& model, std::span<const Tensor> weights, std::span<const std::uint32_t> token_ids) {
  const Tensor hidden = encode(model, weights, token_ids);
  return head_logits(model.head, select_row(hidden, 0));
}

std::vector<double> forward(const EncoderModel& model, std::span<const std::uint32_t> token_ids) {
  const auto weights = effective_weights(model, GradMode::None);
  const Tensor logits = forward(model, weights, token_ids);
  return {logits.data().begin(), logits.data().end()};
}

std::uint64_t frozen_checksum(const EncoderModel& model) {
  Fnv1a h;
  for (const auto& [name, tensor] : model.named_parameters()) {
    h.text(name);
    for (double v : tensor.data()) h.f64(v);
  }
  return h.digest();
}

}  // namespace smp
