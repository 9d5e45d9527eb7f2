// SPDX-License-Identifier: Apache-2.0
#include "smp/analyzer.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "smp/error.hpp"

namespace smp {

namespace {

using Grid = std::map<std::pair<std::size_t, MatrixType>, const MaskRecord*>;

// Indexes records by (layer, type) and checks them against the config.
Grid index_masks(std::span<const MaskRecord> masks, const ModelConfig& config) {
  Grid grid;
  for (const auto& r : masks) {
    const auto id = parse_matrix_name(r.name);
    if (!id) fail(ErrorKind::Shape, "analyzer: unrecognised matrix name '" + r.name + "'");
    if (id->layer >= config.num_layers) fail(ErrorKind::Shape, "analyzer: '" + r.name + "' beyond the configured layers");
    const auto [rows, cols] = config.matrix_shape(id->type);
    if (r.rows != rows || r.cols != cols || r.bits.size() != rows * cols) {
      fail(ErrorKind::Shape, "analyzer: '" + r.name + "' is " + std::to_string(r.rows) + "x" + std::to_string(r.cols) +
                                 ", config expects " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    if (!grid.emplace(std::pair{id->layer, id->type}, &r).second) {
      fail(ErrorKind::Shape, "analyzer: duplicate matrix '" + r.name + "'");
    }
  }
  if (grid.size() != config.prunable_count()) fail(ErrorKind::Shape, "analyzer: masks do not cover every matrix");
  return grid;
}

std::size_t popcount(std::span<const std::uint8_t> bits) {
  std::size_t n = 0;
  for (auto b : bits) n += b;
  return n;
}

DensityRow make_row(std::size_t layer, std::string type, std::optional<std::size_t> head, std::size_t kept,
                    std::size_t total) {
  return {layer, std::move(type), head, static_cast<double>(kept) / static_cast<double>(total), kept, total};
}

}  // namespace

DensityTable layer_distribution(std::span<const MaskRecord> masks, const ModelConfig& config) {
  const Grid grid = index_masks(masks, config);
  DensityTable table;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    std::size_t layer_kept = 0, layer_total = 0;
    for (MatrixType t : kMatrixTypes) {
      const MaskRecord& r = *grid.at({l, t});
      const std::size_t kept = popcount(r.bits);
      layer_kept += kept;
      layer_total += r.bits.size();
      table.rows.push_back(make_row(l, std::string(matrix_type_name(t)), std::nullopt, kept, r.bits.size()));
    }
    table.rows.push_back(make_row(l, "all", std::nullopt, layer_kept, layer_total));
  }
  return table;
}

DensityTable head_distribution(std::span<const MaskRecord> masks, const ModelConfig& config) {
  if (config.num_heads == 0 || config.hidden_dim % config.num_heads != 0) {
    fail(ErrorKind::Shape, "analyzer: hidden_dim not divisible by num_heads");
  }
  const Grid grid = index_masks(masks, config);
  const std::size_t d = config.hidden_dim, dh = config.head_dim();
  DensityTable table;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    for (MatrixType t : {MatrixType::Q, MatrixType::K, MatrixType::V}) {
      const MaskRecord& r = *grid.at({l, t});
      for (std::size_t h = 0; h < config.num_heads; ++h) {
        const auto block = std::span(r.bits).subspan(h * dh * d, dh * d);
        table.rows.push_back(make_row(l, std::string(matrix_type_name(t)), h, popcount(block), block.size()));
      }
    }
  }
  return table;
}

double head_density_stddev(const DensityTable& heads, std::optional<std::string> type) {
  // Welford's single-pass update.
  double mean = 0.0, m2 = 0.0;
  std::size_t n = 0;
  for (const auto& row : heads.rows) {
    if (!row.head) continue;
    if (type && row.type != *type) continue;
    ++n;
    const double delta = row.density - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (row.density - mean);
  }
  return n == 0 ? 0.0 : std::sqrt(m2 / static_cast<double>(n));
}

std::string to_csv(const DensityTable& table) {
  std::string out = "layer,type,head,density\n";
  char buf[64];
  for (const auto& row : table.rows) {
    out += std::to_string(row.layer);
    out += ',';
    out += row.type;
    out += ',';
    if (row.head) out += std::to_string(*row.head);
    std::snprintf(buf, sizeof buf, ",%.6f\n", row.density);
    out += buf;
  }
  return out;
}

DensityTable parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "layer,type,head,density") {
    fail(ErrorKind::Corrupt, "density csv: missing header");
  }
  DensityTable table;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 4) fail(ErrorKind::Corrupt, "density csv: expected 4 columns in '" + line + "'");
    DensityRow row;
    try {
      row.layer = std::stoul(cells[0]);
      row.type = cells[1];
      if (!cells[2].empty()) row.head = std::stoul(cells[2]);
      row.density = std::stod(cells[3]);
    } catch (const std::exception&) {
      fail(ErrorKind::Corrupt, "density csv: malformed row '" + line + "'");
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

void export_analysis(const DensityTable& table, const std::filesystem::path& path) {
  write_text_atomic(path, to_csv(table));
}

}  // namespace smp
