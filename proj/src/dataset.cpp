// SPDX-License-Identifier: Apache-2.0
#include "smp/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "smp/error.hpp"
#include "smp/mask_io.hpp"
#include "smp/model.hpp"
#include "smp/random.hpp"

namespace smp {

void SyntheticSpec::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::Config, "synthetic dataset: " + what);
  };
  require(num_labels >= 2, "num_labels must be >= 2");
  require(seq_len >= 2, "seq_len must leave room for content tokens");
  require(vocab_size >= first_content_token() + num_labels, "vocab_size too small for one content token per label");
  require(train_samples >= num_labels && dev_samples >= num_labels, "need at least one sample per label");
}

std::uint32_t SyntheticSpec::first_content_token() const {
  return kFirstLabelTokenId + static_cast<std::uint32_t>(num_labels);
}

std::vector<std::uint32_t> synthetic_token_classes(const SyntheticSpec& spec) {
  const std::uint32_t first = spec.first_content_token();
  std::vector<std::uint32_t> content(spec.vocab_size - first);
  for (std::uint32_t i = 0; i < content.size(); ++i) content[i] = first + i;
  Rng rng(spec.rule_seed);
  shuffle(content.begin(), content.end(), rng);
  std::vector<std::uint32_t> classes(spec.vocab_size, static_cast<std::uint32_t>(spec.num_labels));
  for (std::size_t i = 0; i < content.size(); ++i) classes[content[i]] = static_cast<std::uint32_t>(i % spec.num_labels);
  return classes;
}

namespace {

std::vector<Example> draw_balanced(const SyntheticSpec& spec, const std::vector<std::uint32_t>& classes,
                                   std::size_t count, Rng& rng) {
  const std::uint32_t first = spec.first_content_token();
  const std::size_t content_vocab = spec.vocab_size - first;
  std::vector<std::size_t> quota(spec.num_labels, count / spec.num_labels);
  for (std::size_t i = 0; i < count % spec.num_labels; ++i) ++quota[i];

  std::vector<Example> out;
  out.reserve(count);
  std::vector<std::size_t> tally(spec.num_labels);
  while (out.size() < count) {
    Example ex;
    ex.tokens.push_back(kClsTokenId);
    std::fill(tally.begin(), tally.end(), 0);
    for (std::size_t i = 1; i < spec.seq_len; ++i) {
      const auto tok = first + static_cast<std::uint32_t>(uniform_index(rng, content_vocab));
      ex.tokens.push_back(tok);
      ++tally[classes[tok]];
    }
    const auto best = std::max_element(tally.begin(), tally.end());
    if (std::count(tally.begin(), tally.end(), *best) > 1) continue;
    ex.label = static_cast<std::uint32_t>(best - tally.begin());
    if (quota[ex.label] == 0) continue;
    --quota[ex.label];
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const auto classes = synthetic_token_classes(spec);
  Rng rng(spec.rule_seed * 0x9E3779B97F4A7C15ULL + 1);
  Dataset ds;
  ds.num_labels = spec.num_labels;
  ds.vocab_size = spec.vocab_size;
  ds.train = draw_balanced(spec, classes, spec.train_samples, rng);
  ds.dev = draw_balanced(spec, classes, spec.dev_samples, rng);
  return ds;
}

std::string to_tsv(std::span<const Example> examples) {
  std::string out;
  for (const auto& ex : examples) {
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(ex.tokens[i]);
    }
    out += '\t';
    out += std::to_string(ex.label);
    out += '\n';
  }
  return out;
}

void write_tsv(std::span<const Example> examples, const std::filesystem::path& path) {
  write_text_atomic(path, to_tsv(examples));
}

std::vector<Example> parse_tsv(const std::string& text, std::size_t tokens_column, std::size_t label_column,
                               std::size_t vocab_size, std::size_t num_labels) {
  std::vector<Example> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto bad = [&](const std::string& what) {
    fail(ErrorKind::Dataset, "tsv line " + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (tokens_column >= cols.size() || label_column >= cols.size()) bad("missing column");
    Example ex;
    std::istringstream toks(cols[tokens_column]);
    std::string tok;
    while (toks >> tok) {
      unsigned long id = 0;
      try {
        std::size_t used = 0;
        id = std::stoul(tok, &used);
        if (used != tok.size()) bad("malformed token '" + tok + "'");
      } catch (const std::logic_error&) {
        bad("malformed token '" + tok + "'");
      }
      if (id >= vocab_size) bad("token id " + tok + " outside vocabulary of " + std::to_string(vocab_size));
      ex.tokens.push_back(static_cast<std::uint32_t>(id));
    }
    if (ex.tokens.empty()) bad("empty token sequence");
    if (ex.tokens.front() != kClsTokenId) ex.tokens.insert(ex.tokens.begin(), kClsTokenId);
    try {
      std::size_t used = 0;
      const unsigned long label = std::stoul(cols[label_column], &used);
      if (used != cols[label_column].size()) bad("malformed label");
      if (label >= num_labels) bad("label " + cols[label_column] + " outside [0, " + std::to_string(num_labels) + ")");
      ex.label = static_cast<std::uint32_t>(label);
    } catch (const std::logic_error&) {
      bad("malformed label '" + cols[label_column] + "'");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

Dataset load_dataset(const DatasetSpec& spec) {
  if (spec.source == DatasetSpec::Source::Synthetic) return generate_synthetic(spec.synthetic);
  auto load = [&](const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Dataset, "cannot open dataset file '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_tsv(buf.str(), spec.tokens_column, spec.label_column, spec.vocab_size, spec.num_labels);
  };
  Dataset ds;
  ds.num_labels = spec.num_labels;
  ds.vocab_size = spec.vocab_size;
  ds.train = load(spec.train_path);
  ds.dev = load(spec.dev_path);
  if (ds.train.empty()) fail(ErrorKind::Dataset, "training split is empty");
  return ds;
}

}  // namespace smp
