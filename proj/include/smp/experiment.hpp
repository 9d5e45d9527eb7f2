// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value experiment files. Blank lines and '#' comments are skipped;
// unknown keys are rejected. Every key has a default except the dataset
// paths (tsv source) and the output directory.
#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "smp/dataset.hpp"
#include "smp/model.hpp"
#include "smp/training.hpp"

namespace smp {

struct ExperimentConfig {
  TrainConfig train;
  ModelConfig model;
  DatasetSpec dataset;
  std::filesystem::path out_dir;
};

/// Applies one key. Throws Config on unknown keys or unparsable values.
void apply_setting(ExperimentConfig& config, const std::string& key, const std::string& value);

ExperimentConfig parse_experiment(const std::string& text);
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// key=value text that parses back to an equal configuration.
std::string to_text(const ExperimentConfig& config);

/// Cross-field checks (label count, vocabulary, sequence length).
void validate(const ExperimentConfig& config);

}  // namespace smp
