// SPDX-License-Identifier: Apache-2.0
//
// Brute-force references for the masking functions: full sorts instead of
// selection, and a plain water-filling loop for the per-type allocation.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "smp/pruning.hpp"

namespace smp::testing {

// ceil(r·n) with the same 1e-9 relative slack, clamped to [1, n].
inline std::size_t oracle_keep(double r, std::size_t n) {
  long double exact = static_cast<long double>(r) * static_cast<long double>(n);
  auto k = static_cast<std::size_t>(std::ceil(exact - exact * 1e-9L));
  return std::clamp<std::size_t>(k, 1, n);
}

inline Mask oracle_top_k(const std::vector<double>& s, std::size_t k) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  Mask m(s.size(), 0);
  for (std::size_t i = 0; i < std::min(k, s.size()); ++i) m[order[i]] = 1;
  return m;
}

inline MaskSet oracle_local(const std::vector<std::vector<double>>& scores, double r) {
  MaskSet out;
  for (const auto& s : scores) out.push_back(oracle_top_k(s, oracle_keep(r, s.size())));
  return out;
}

inline MaskSet oracle_global(const std::vector<std::vector<double>>& scores, double r) {
  std::vector<double> flat;
  for (const auto& s : scores) flat.insert(flat.end(), s.begin(), s.end());
  const Mask all = oracle_top_k(flat, oracle_keep(r, flat.size()));
  MaskSet out;
  std::size_t at = 0;
  for (const auto& s : scores) {
    out.emplace_back(all.begin() + static_cast<std::ptrdiff_t>(at),
                     all.begin() + static_cast<std::ptrdiff_t>(at + s.size()));
    at += s.size();
  }
  return out;
}

// types[i] names the matrix type of scores[i].
inline std::vector<double> oracle_smp_ratios(const std::vector<std::vector<double>>& scores,
                                             const std::vector<MatrixType>& types, double r) {
  std::vector<double> ratios(scores.size(), 0.0);
  for (MatrixType t : kMatrixTypes) {
    std::vector<std::size_t> group;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (types[i] == t) group.push_back(i);
    if (group.empty()) continue;
    std::vector<double> mass;
    for (auto i : group) {
      double m = 0.0;
      for (double x : scores[i]) m += 1.0 / (1.0 + std::exp(-x));
      mass.push_back(m);
    }
    std::vector<bool> full(group.size(), false);
    for (bool again = true; again;) {
      again = false;
      double budget = r * static_cast<double>(group.size());
      double free_mass = 0.0;
      for (std::size_t j = 0; j < group.size(); ++j) {
        if (full[j]) budget -= 1.0;
        else free_mass += mass[j];
      }
      for (std::size_t j = 0; j < group.size(); ++j) {
        if (full[j]) {
          ratios[group[j]] = 1.0;
          continue;
        }
        ratios[group[j]] = budget * mass[j] / free_mass;
        if (ratios[group[j]] > 1.0) {
          full[j] = true;
          again = true;
        }
      }
    }
  }
  return ratios;
}

inline MaskSet oracle_smp(const std::vector<std::vector<double>>& scores, const std::vector<MatrixType>& types,
                          double r) {
  const auto ratios = oracle_smp_ratios(scores, types, r);
  MaskSet out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out.push_back(oracle_top_k(scores[i], oracle_keep(std::clamp(ratios[i], 1e-300, 1.0), scores[i].size())));
  }
  return out;
}

inline std::vector<ScoreView> views_of(const std::vector<std::vector<double>>& scores,
                                       const std::vector<MatrixType>& types) {
  std::vector<ScoreView> v;
  for (std::size_t i = 0; i < scores.size(); ++i) v.push_back({i / kMatrixTypes.size(), types[i], scores[i]});
  return v;
}

}  // namespace smp::testing
