// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "smp/analyzer.hpp"
#include "smp/error.hpp"
#include "smp/random.hpp"

using namespace smp;

namespace {

ModelConfig cfg() {
  ModelConfig c;
  c.num_layers = 3;
  c.hidden_dim = 12;
  c.num_heads = 3;
  c.ffn_dim = 20;
  return c;
}

std::vector<MaskRecord> random_masks(const ModelConfig& c, Rng& rng) {
  std::vector<MaskRecord> out;
  for (std::size_t l = 0; l < c.num_layers; ++l)
    for (MatrixType t : kMatrixTypes) {
      const auto [rows, cols] = c.matrix_shape(t);
      MaskRecord r{matrix_name(l, t), static_cast<std::uint32_t>(rows), static_cast<std::uint32_t>(cols), {}};
      const double p = uniform01(rng);
      for (std::size_t i = 0; i < rows * cols; ++i) r.bits.push_back(uniform01(rng) < p);
      out.push_back(std::move(r));
    }
  return out;
}

std::size_t popcount(const Mask& m) {
  std::size_t n = 0;
  for (auto b : m) n += b;
  return n;
}

}  // namespace

TEST_CASE("layer table conserves popcounts") {
  Rng rng(1);
  const auto c = cfg();
  for (int trial = 0; trial < 50; ++trial) {
    const auto masks = random_masks(c, rng);
    const auto table = layer_distribution(masks, c);
    REQUIRE(table.rows.size() == c.num_layers * 7);
    std::size_t grand = 0;
    for (const auto& m : masks) grand += popcount(m.bits);
    std::size_t from_rows = 0, from_all = 0;
    for (const auto& row : table.rows) {
      CHECK(row.density == static_cast<double>(row.kept) / static_cast<double>(row.total));
      if (row.type == "all") from_all += row.kept;
      else from_rows += row.kept;
    }
    CHECK(from_rows == grand);
    CHECK(from_all == grand);
    for (std::size_t i = 0; i < masks.size(); ++i) {
      const auto& row = table.rows[(i / 6) * 7 + i % 6];
      CHECK(row.kept == popcount(masks[i].bits));
      CHECK(row.total == masks[i].bits.size());
    }
  }
}

TEST_CASE("head rows aggregate to their matrix") {
  Rng rng(2);
  const auto c = cfg();
  for (int trial = 0; trial < 50; ++trial) {
    const auto masks = random_masks(c, rng);
    const auto heads = head_distribution(masks, c);
    REQUIRE(heads.rows.size() == c.num_layers * 3 * c.num_heads);
    std::map<std::pair<std::size_t, std::string>, std::size_t> kept, total;
    for (const auto& row : heads.rows) {
      REQUIRE(row.head);
      kept[{row.layer, row.type}] += row.kept;
      total[{row.layer, row.type}] += row.total;
    }
    for (const auto& m : masks) {
      const auto id = *parse_matrix_name(m.name);
      if (id.type != MatrixType::Q && id.type != MatrixType::K && id.type != MatrixType::V) continue;
      const std::pair key{id.layer, std::string(matrix_type_name(id.type))};
      CHECK(kept[key] == popcount(m.bits));
      CHECK(total[key] == m.bits.size());
      // Mean of the equal-sized head densities is the matrix density.
      double mean = 0.0;
      for (const auto& row : heads.rows)
        if (row.layer == id.layer && row.type == key.second) mean += row.density / static_cast<double>(c.num_heads);
      CHECK(mean == doctest::Approx(static_cast<double>(popcount(m.bits)) / m.bits.size()).epsilon(1e-14));
    }
  }
}

TEST_CASE("head blocks are contiguous output rows") {
  auto c = cfg();
  c.num_layers = 1;
  Rng rng(3);
  auto masks = random_masks(c, rng);
  for (auto& m : masks) std::fill(m.bits.begin(), m.bits.end(), 0);
  // Rows 4..7 of Q belong to head 1 (head_dim 4).
  for (std::size_t i = 4 * 12; i < 8 * 12; ++i) masks[0].bits[i] = 1;
  const auto heads = head_distribution(masks, c);
  CHECK(heads.rows[0].density == 0.0);
  CHECK(heads.rows[1].density == 1.0);
  CHECK(heads.rows[2].density == 0.0);
}

TEST_CASE("all-ones masks give unit densities") {
  const auto c = cfg();
  Rng rng(4);
  auto masks = random_masks(c, rng);
  for (auto& m : masks) std::fill(m.bits.begin(), m.bits.end(), 1);
  for (const auto& row : layer_distribution(masks, c).rows) CHECK(row.density == 1.0);
  const auto heads = head_distribution(masks, c);
  for (const auto& row : heads.rows) CHECK(row.density == 1.0);
  CHECK(head_density_stddev(heads) == 0.0);
}

TEST_CASE("head stddev matches a two-pass computation") {
  Rng rng(5);
  const auto c = cfg();
  const auto heads = head_distribution(random_masks(c, rng), c);
  for (std::optional<std::string> type : {std::optional<std::string>{}, std::optional<std::string>{"k"}}) {
    std::vector<double> xs;
    for (const auto& row : heads.rows)
      if (!type || row.type == *type) xs.push_back(row.density);
    double mean = 0.0, var = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    for (double x : xs) var += (x - mean) * (x - mean);
    CHECK(head_density_stddev(heads, type) == doctest::Approx(std::sqrt(var / xs.size())).epsilon(1e-12));
  }
}

TEST_CASE("csv round-trip") {
  Rng rng(6);
  const auto c = cfg();
  const auto masks = random_masks(c, rng);
  for (const auto& table : {layer_distribution(masks, c), head_distribution(masks, c)}) {
    const std::string csv = to_csv(table);
    CHECK(csv.rfind("layer,type,head,density\n", 0) == 0);
    const auto back = parse_csv(csv);
    REQUIRE(back.rows.size() == table.rows.size());
    for (std::size_t i = 0; i < back.rows.size(); ++i) {
      CHECK(back.rows[i].layer == table.rows[i].layer);
      CHECK(back.rows[i].type == table.rows[i].type);
      CHECK(back.rows[i].head == table.rows[i].head);
      CHECK(std::fabs(back.rows[i].density - table.rows[i].density) <= 5e-7);
    }
  }
  CHECK_THROWS_AS(parse_csv("nope\n"), Error);
  CHECK_THROWS_AS(parse_csv("layer,type,head,density\n0,q\n"), Error);
}

TEST_CASE("shape checks") {
  Rng rng(7);
  const auto c = cfg();
  auto masks = random_masks(c, rng);
  auto missing = masks;
  missing.pop_back();
  CHECK_THROWS_AS(layer_distribution(missing, c), Error);
  auto resized = masks;
  resized[0].rows = 5;
  CHECK_THROWS_AS(layer_distribution(resized, c), Error);
  auto dup = masks;
  dup[1].name = dup[0].name;
  CHECK_THROWS_AS(head_distribution(dup, c), Error);
}
