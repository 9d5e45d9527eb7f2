// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale post-LN transformer encoder. Each layer owns six prunable
// matrices (Q, K, V, O, U, D) stored as (out × in) so that y = x · Wᵀ + b.
// Embeddings, biases, layer norms and the label-word head are frozen.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smp/tensor.hpp"

namespace smp {

enum class MatrixType : std::uint8_t { Q, K, V, O, U, D };

inline constexpr std::array<MatrixType, 6> kMatrixTypes = {MatrixType::Q, MatrixType::K, MatrixType::V,
                                                           MatrixType::O, MatrixType::U, MatrixType::D};

std::string_view matrix_type_name(MatrixType type);
std::optional<MatrixType> parse_matrix_type(std::string_view name);

/// "layer{l}.{q|k|v|o|u|d}"
std::string matrix_name(std::size_t layer, MatrixType type);

struct MatrixId {
  std::size_t layer = 0;
  MatrixType type = MatrixType::Q;
};
std::optional<MatrixId> parse_matrix_name(std::string_view name);

/// Token id every input sequence starts with.
inline constexpr std::uint32_t kClsTokenId = 0;
/// Default label words are ids 2, 3, ... (one per label).
inline constexpr std::uint32_t kFirstLabelTokenId = 2;

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t hidden_dim = 32;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 32;
  std::size_t num_labels = 2;

  /// Throws Error(Config) on zero extents or indivisible head split.
  void validate() const;
  std::size_t head_dim() const { return hidden_dim / num_heads; }
  /// (rows, cols) of a prunable matrix.
  std::pair<std::size_t, std::size_t> matrix_shape(MatrixType type) const;
  std::size_t prunable_count() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::vector<std::uint32_t> default_label_token_ids(const ModelConfig& config);

/// Frozen weight, learnable importance scores and the current binary mask.
struct MaskedLinear {
  std::string name;
  std::size_t layer = 0;
  MatrixType type = MatrixType::Q;
  Tensor weight;
  Tensor bias;
  Tensor scores;
  std::vector<std::uint8_t> mask;

  std::size_t rows() const { return weight.shape()[0]; }
  std::size_t cols() const { return weight.shape()[1]; }
  std::size_t size() const { return weight.numel(); }
  std::size_t kept() const;
};

struct EncoderLayer {
  std::array<MaskedLinear, 6> linears;
  Tensor ln_attn_gamma, ln_attn_beta;
  Tensor ln_ffn_gamma, ln_ffn_beta;

  MaskedLinear& at(MatrixType type) { return linears[static_cast<std::size_t>(type)]; }
  const MaskedLinear& at(MatrixType type) const { return linears[static_cast<std::size_t>(type)]; }
};

struct ClassifierHead {
  std::vector<std::uint32_t> label_token_ids;
  Tensor label_embeddings;  // num_labels × d, frozen
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class EncoderModel {
 public:
  EncoderModel() = default;
  EncoderModel(EncoderModel&&) = default;
  EncoderModel& operator=(EncoderModel&&) = default;
  EncoderModel(const EncoderModel&) = delete;
  EncoderModel& operator=(const EncoderModel&) = delete;

  /// Deep copy; the clone shares no tensor storage with this model.
  EncoderModel clone() const;

  ModelConfig config;
  Tensor token_embedding;     // vocab × d
  Tensor position_embedding;  // max_seq_len × d
  Tensor ln_embed_gamma, ln_embed_beta;
  std::vector<EncoderLayer> layers;
  ClassifierHead head;

  /// Prunable matrices in layer-major order (Q, K, V, O, U, D per layer).
  std::vector<MaskedLinear*> prunable();
  std::vector<const MaskedLinear*> prunable() const;

  /// Every non-score parameter, in a fixed order (checkpoint order).
  std::vector<NamedTensor> named_parameters() const;
};

EncoderModel build_model(const ModelConfig& config, std::uint64_t seed);

/// Rebuilds the head from label-word embedding rows and freezes it.
ClassifierHead init_head_from_label_words(EncoderModel& model, std::span<const std::uint32_t> label_token_ids);

/// How masked weights take part in differentiation.
enum class GradMode {
  None,              // plain W ⊙ M
  Scores,            // SMP: straight-through to scores, W frozen
  Weights,           // magnitude baseline: W fine-tuned
  WeightsAndScores,  // movement baseline
};

/// W′ for every prunable matrix, in prunable() order.
std::vector<Tensor> effective_weights(const EncoderModel& model, GradMode mode);

/// Final hidden states (seq × d).
Tensor encode(const EncoderModel& model, std::span<const Tensor> weights, std::span<const std::uint32_t> token_ids);

/// h_CLS · E_labelᵀ for a (d) hidden vector.
Tensor head_logits(const ClassifierHead& head, const Tensor& cls_hidden);

/// Logits per label (rank 1).
Tensor forward(const EncoderModel& model, std::span<const Tensor> weights, std::span<const std::uint32_t> token_ids);
std::vector<double> forward(const EncoderModel& model, std::span<const std::uint32_t> token_ids);

/// FNV-1a over every non-score parameter.
std::uint64_t frozen_checksum(const EncoderModel& model);

}  // namespace smp
