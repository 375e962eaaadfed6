#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "egn/dataset.hpp"
#include "egn/extractor.hpp"
#include "egn/index.hpp"
#include "egn/model.hpp"

namespace egn {

struct DataConfig {
  std::string bundle;             // existing bundle manifest; empty means <output_dir>/data
  std::string external_manifest;  // when set, gen-data ingests this instead of generating
  std::uint64_t seed = 7;
  std::size_t n_patients = 6;
  std::size_t windows_per_patient = 60;
  std::size_t slides_per_patient = 2;
  std::size_t image_size = 32;
  std::size_t num_genes = 16;
  double skew_fraction = 0.3;
  std::size_t n_folds = 3;

  SynthConfig synth() const;
};

struct RetrievalConfig {
  std::string metric = "l2";
  std::size_t num_exemplars = 4;
};

struct TrainingConfig {
  double lr = 5e-4;
  double weight_decay = 1e-4;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  std::string scheduler = "cosine";  // cosine | constant
  std::string variant = "full";
  std::string run_name;              // empty means the variant name
  std::vector<std::size_t> folds;    // empty means every fold
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "egn_run";
  DataConfig data;
  ExtractorConfig extractor;
  RetrievalConfig retrieval;
  ModelConfig model;  // architecture only; see model_config()
  TrainingConfig training;

  /// Every violated constraint, each prefixed with its dotted key.
  std::vector<std::string> validate() const;

  ExtractorConfig extractor_config() const;
  /// Architecture plus window size, k, M and D from the other sections.
  ModelConfig model_config() const;
  Metric metric() const { return parse_metric(retrieval.metric); }
  Variant variant() const { return parse_variant(training.variant); }
  std::string run_name() const { return training.run_name.empty() ? training.variant : training.run_name; }
  std::vector<std::size_t> folds() const;
};

/// Canonical JSON text (two-space indent, trailing newline).
std::string dump_run_config(const RunConfig& config);

/// Parses JSON text after applying `overrides` ("a.b=value"; the value is read
/// as JSON when it parses, otherwise as a string). Unknown keys, type errors,
/// bad overrides and failed validation are all reported together in one
/// ConfigError.
RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides = {});
/// Reads the file, then as parse_run_config. A missing file is a ConfigError.
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

}  // namespace egn
