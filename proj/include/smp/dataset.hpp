// SPDX-License-Identifier: Apache-2.0
//
// Classification corpora: a seeded synthetic generator and TSV ingestion.
// TSV rows are "<space-separated token ids>\t<label id>".
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace smp {

struct Example {
  std::vector<std::uint32_t> tokens;  // starts with the CLS id
  std::uint32_t label = 0;
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> dev;
  std::size_t num_labels = 0;
  std::size_t vocab_size = 0;
};

/// Every content token belongs to one label class (seeded, balanced
/// assignment). A sample's label is the class holding the most of its
/// tokens; samples with a tied count are redrawn.
struct SyntheticSpec {
  std::size_t vocab_size = 64;
  std::size_t seq_len = 16;  // including CLS
  std::size_t num_labels = 2;
  std::uint64_t rule_seed = 7;
  std::size_t train_samples = 4096;
  std::size_t dev_samples = 1024;

  void validate() const;
  /// First token id eligible as content (after CLS, padding and label words).
  std::uint32_t first_content_token() const;
};

struct DatasetSpec {
  enum class Source { Synthetic, Tsv };
  Source source = Source::Synthetic;
  SyntheticSpec synthetic;
  std::filesystem::path train_path;
  std::filesystem::path dev_path;
  std::size_t tokens_column = 0;
  std::size_t label_column = 1;
  std::size_t num_labels = 2;
  std::size_t vocab_size = 64;
};

/// Class of every vocabulary id under the synthetic rule; non-content ids
/// map to num_labels.
std::vector<std::uint32_t> synthetic_token_classes(const SyntheticSpec& spec);

Dataset generate_synthetic(const SyntheticSpec& spec);

std::string to_tsv(std::span<const Example> examples);
void write_tsv(std::span<const Example> examples, const std::filesystem::path& path);
std::vector<Example> parse_tsv(const std::string& text, std::size_t tokens_column, std::size_t label_column,
                               std::size_t vocab_size, std::size_t num_labels);

Dataset load_dataset(const DatasetSpec& spec);

}  // namespace smp
