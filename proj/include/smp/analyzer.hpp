// SPDX-License-Identifier: Apache-2.0
//
// Remaining-weight distributions over mask artifacts: per (layer, matrix
// type), per layer overall, and per attention head.
#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smp/mask_io.hpp"
#include "smp/model.hpp"

namespace smp {

struct DensityRow {
  std::size_t layer = 0;
  std::string type;  // q,k,v,o,u,d or "all" for a layer's overall density
  std::optional<std::size_t> head;
  double density = 0.0;
  std::size_t kept = 0;
  std::size_t total = 0;
};

struct DensityTable {
  std::vector<DensityRow> rows;
};

/// One row per (layer, type) plus one "all" row per layer.
DensityTable layer_distribution(std::span<const MaskRecord> masks, const ModelConfig& config);

/// Q/K/V split into num_heads blocks along the output dimension. With the
/// (out × in) layout each head owns a contiguous block of d/h rows.
DensityTable head_distribution(std::span<const MaskRecord> masks, const ModelConfig& config);

/// Population standard deviation of the head densities, optionally
/// restricted to one matrix type.
double head_density_stddev(const DensityTable& heads, std::optional<std::string> type = std::nullopt);

/// CSV with columns layer,type,head,density. Matrix-level rows leave head
/// empty; densities carry six decimals.
std::string to_csv(const DensityTable& table);
DensityTable parse_csv(const std::string& text);
void export_analysis(const DensityTable& table, const std::filesystem::path& path);

}  // namespace smp
