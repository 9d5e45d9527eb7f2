// SPDX-License-Identifier: Apache-2.0
//
// The "SMPM" mask container, the "SMPC" checkpoint container, and
// structural compaction of masked models.
//
// SMPM layout (all integers little-endian):
//   magic "SMPM" | version u16 | flags u8 | fingerprint u64 | record count u32
//   per record: name length u16 | name bytes | rows u32 | cols u32 |
//               payload (absent when compressed)
//   trailing RLE block (compressed only)
// Payload bits are packed LSB-first in row-major order and zero-padded to a
// byte boundary. The RLE block encodes the concatenated bits of all records
// as alternating run lengths (0-run first) in unsigned LEB128.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "smp/model.hpp"
#include "smp/pruning.hpp"

namespace smp {

inline constexpr std::array<std::uint8_t, 4> kMaskMagic = {'S', 'M', 'P', 'M'};
inline constexpr std::array<std::uint8_t, 4> kCheckpointMagic = {'S', 'M', 'P', 'C'};
inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::uint8_t kFlagCompressed = 0x01;
inline constexpr std::size_t kMaskHeaderSize = 19;

using Bytes = std::vector<std::uint8_t>;

/// Canonical little-endian encoding of every ModelConfig field.
Bytes canonical_encoding(const ModelConfig& config);
/// FNV-1a 64 of canonical_encoding().
std::uint64_t config_fingerprint(const ModelConfig& config);

struct MaskRecord {
  std::string name;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  Mask bits;  // rows·cols entries, each 0 or 1
};

struct MaskArtifact {
  std::uint64_t fingerprint = 0;
  bool compressed = false;
  std::vector<MaskRecord> records;
};

/// Snapshot of the model's current masks.
MaskArtifact make_artifact(const EncoderModel& model, bool compressed = false);
/// Installs the artifact's masks into the model. Names and shapes must match.
void apply_artifact(EncoderModel& model, const MaskArtifact& artifact);

Bytes pack_bits(std::span<const std::uint8_t> bits);
Mask unpack_bits(std::span<const std::uint8_t> bytes, std::size_t bit_count);

Bytes rle_encode(std::span<const std::uint8_t> bits);
/// Decodes exactly `bit_count` bits; `consumed` receives the bytes read.
Mask rle_decode(std::span<const std::uint8_t> bytes, std::size_t bit_count, std::size_t* consumed = nullptr);

Bytes serialize(const MaskArtifact& artifact);
/// Verifies magic, version and that the fingerprint matches `config`.
MaskArtifact deserialize(std::span<const std::uint8_t> bytes, const ModelConfig& config);
/// Decodes without checking the fingerprint against a config.
MaskArtifact deserialize_unchecked(std::span<const std::uint8_t> bytes);

/// Size of the uncompressed encoding: header + Σ (10 + name + ⌈rows·cols/8⌉).
std::size_t uncompressed_size(const MaskArtifact& artifact);

// ---------------------------------------------------------------------------
// Files

Bytes read_file(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

// ---------------------------------------------------------------------------
// Checkpoints

Bytes save_checkpoint(const EncoderModel& model);
EncoderModel load_checkpoint(std::span<const std::uint8_t> bytes);
std::uint64_t checkpoint_fingerprint(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Compaction

struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct CompactedLayer {
  std::vector<std::uint32_t> kept_heads;  // original head indices
  std::vector<std::uint32_t> kept_units;  // original FFN hidden indices
  DenseMatrix q, k, v, o, u, d;
  std::vector<double> bq, bk, bv, bo, bu, bd;
  std::vector<double> ln_attn_gamma, ln_attn_beta, ln_ffn_gamma, ln_ffn_beta;
};

struct CompactedModel {
  ModelConfig config;
  std::vector<std::uint32_t> label_token_ids;
  DenseMatrix token_embedding, position_embedding, head;
  std::vector<double> ln_embed_gamma, ln_embed_beta;
  std::vector<CompactedLayer> layers;

  /// Weights and biases of the six matrix types across layers.
  std::size_t parameter_count() const;
  std::vector<double> forward(std::span<const std::uint32_t> token_ids) const;
};

struct CompactionReport {
  std::size_t min_row_weights = 0;
  std::size_t original_parameters = 0;
  std::size_t compacted_parameters = 0;
  std::size_t removed_units = 0;
  std::size_t removed_heads = 0;
  std::size_t probe_count = 0;
  double max_deviation = 0.0;
};

struct CompactionResult {
  CompactedModel model;
  CompactionReport report;
};

/// Parameter count of the six matrix types (weights + biases) before compaction.
std::size_t prunable_parameter_count(const ModelConfig& config);

/// Drops FFN units whose W_U row keeps fewer than max(k, 1) weights (their
/// constant activation is folded into the W_D bias) or whose W_D column is
/// empty, and heads whose Q/K/V rows and O columns are all pruned. The
/// deviation against the masked model is measured on `probe_count` random
/// sequences.
CompactionResult compact(const EncoderModel& model, const MaskArtifact& masks, std::size_t min_row_weights,
                         std::size_t probe_count = 1024, std::uint64_t probe_seed = 0x5eed);

Bytes save_compacted(const CompactedModel& model);
CompactedModel load_compacted(std::span<const std::uint8_t> bytes);

}  // namespace smp
