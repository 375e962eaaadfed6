#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "egn/matrix.hpp"

namespace egn {

struct WindowRecord {
  std::uint64_t id = 0;
  std::uint64_t patient_id = 0;
  std::uint64_t slide_id = 0;
};

// One planted visual motif and the genes whose expression it drives.
struct MotifSpec {
  std::string shape;  // disc | square | ring | cross
  std::array<double, 3> color{};
  double radius = 0.0;
  double rate = 0.0;  // Poisson mean of instances per window
  std::vector<std::size_t> genes;
  std::vector<double> weights;
};

// Window-level tissue context: background appearance plus a per-motif scale
// on the Poisson rates.
struct TissueSpec {
  std::array<double, 3> background{};
  double texture = 0.0;
  std::vector<double> rate_scale;  // one per motif
};

struct GenerationInfo {
  std::uint64_t seed = 0;
  double skew_fraction = 0.0;
  double noise_floor = 0.0;
  double noise_sigma = 0.0;
  double skew_gain = 0.0;
  std::vector<MotifSpec> motifs;
  std::vector<TissueSpec> tissues;
  std::vector<std::size_t> skewed_genes;
};

// Per-window generator internals; kept in memory only, never persisted.
struct GenerationTrace {
  Matrix motif_counts;  // N x motifs
  Matrix noise;         // N x M
  std::vector<std::size_t> tissue;  // per window
};

// Patients -> slides -> windows, each window an RGB image (3 x S x S, values in
// [0,1]) paired with a raw, nonnegative expression vector.
struct DatasetBundle {
  std::size_t image_size = 0;
  std::vector<std::string> gene_names;
  std::vector<WindowRecord> windows;
  std::vector<double> images;  // N x 3 x S x S
  Matrix raw_expression;       // N x M
  std::optional<GenerationInfo> generation;
  std::optional<GenerationTrace> trace;

  std::size_t size() const { return windows.size(); }
  std::size_t num_genes() const { return raw_expression.cols; }
  std::size_t pixels_per_window() const { return 3 * image_size * image_size; }
  std::span<const double> image(std::size_t index) const;
  std::vector<std::uint64_t> patients() const;

  /// Checks the structural invariants; throws DataError.
  void validate() const;
};

struct SynthConfig {
  std::uint64_t seed = 7;
  std::size_t n_patients = 6;
  std::size_t windows_per_patient = 60;
  std::size_t num_genes = 16;
  std::size_t image_size = 32;
  double skew_fraction = 0.3;
  std::size_t slides_per_patient = 2;
};

/// Synthetic bundle with motif-count driven expression. Throws ConfigError.
DatasetBundle generate(const SynthConfig& config);

/// Expression of one gene given motif counts and the sampled noise term.
double planted_expression(const GenerationInfo& info, std::size_t gene, std::span<const double> motif_counts,
                          double noise);

/// Writes manifest.json and bundle.egnd into `directory`; returns the manifest path.
std::filesystem::path save_bundle(const DatasetBundle& bundle, const std::filesystem::path& directory);
/// Loads a bundle written by save_bundle.
DatasetBundle load_bundle(const std::filesystem::path& manifest_path);

/// Indices of the `count` columns with the largest mean, in column order.
std::vector<std::size_t> select_top_genes(const Matrix& expression, std::size_t count);

/// Reads an external manifest referencing PNG windows and a CSV expression
/// table, keeps the `num_genes` genes with the largest mean, and resizes each
/// window to `image_size` square. Throws DataError naming the bad record.
DatasetBundle ingest_external(const std::filesystem::path& manifest_path, std::size_t num_genes,
                              std::size_t image_size);

/// True if the manifest describes a bundle backed by an EGND blob.
bool manifest_has_blob(const std::filesystem::path& manifest_path);

}  // namespace egn
