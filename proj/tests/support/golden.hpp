// SPDX-License-Identifier: Apache-2.0
// The artifact that tests/golden/*.smpm encode (see make_golden.py there).
#pragma once

#include "smp/mask_io.hpp"

namespace smp::testing {

inline ModelConfig golden_config() {
  ModelConfig c;
  c.num_layers = 1;
  c.hidden_dim = 4;
  c.num_heads = 2;
  c.ffn_dim = 8;
  c.vocab_size = 16;
  c.max_seq_len = 8;
  c.num_labels = 2;
  return c;
}

inline MaskArtifact golden_artifact(bool compressed) {
  const ModelConfig c = golden_config();
  MaskArtifact a;
  a.fingerprint = config_fingerprint(c);
  a.compressed = compressed;
  std::size_t r = 0;
  for (MatrixType t : kMatrixTypes) {
    const auto [rows, cols] = c.matrix_shape(t);
    MaskRecord rec{matrix_name(0, t), static_cast<std::uint32_t>(rows), static_cast<std::uint32_t>(cols), {}};
    for (std::size_t i = 0; i < rows * cols; ++i) rec.bits.push_back((i * 7 + r * 3) % 5 < 2 ? 1 : 0);
    a.records.push_back(std::move(rec));
    ++r;
  }
  return a;
}

}  // namespace smp::testing
