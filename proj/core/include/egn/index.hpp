#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "egn/dataset.hpp"
#include "egn/extractor.hpp"
#include "egn/matrix.hpp"

namespace egn {

enum class Metric { kL2, kL1, kCosine };

/// "l2" | "l1" | "cosine"; throws ConfigError otherwise.
Metric parse_metric(std::string_view name);
std::string metric_name(Metric metric);

/// l2: Euclidean norm of a-b; l1: sum |a-b|; cosine: max(0, 1 - a.b/(|a||b|)).
/// Sums run in index order. Throws DimensionError on length mismatch and
/// DegenerateInputError for a zero vector under cosine.
double distance(std::span<const double> a, std::span<const double> b, Metric metric);

// k nearest cross-patient entries, sorted by (distance, window_id).
struct ExemplarSet {
  std::uint64_t query_window_id = 0;
  std::vector<std::size_t> rows;  // positions in the index
  std::vector<std::uint64_t> window_ids;
  std::vector<std::uint64_t> patient_ids;
  std::vector<double> distances;

  std::size_t size() const { return rows.size(); }
};

// Flat store of (window_id, patient_id, e_j, y_j) entries with y_j already
// normalized. Immutable once built; queries are read-only.
class ExemplarIndex {
 public:
  ExemplarIndex(std::size_t view_dim, std::size_t num_genes);

  void add(std::uint64_t window_id, std::uint64_t patient_id, std::span<const double> view,
           std::span<const double> expression);

  std::size_t size() const { return window_ids_.size(); }
  std::size_t view_dim() const { return view_dim_; }
  std::size_t num_genes() const { return num_genes_; }
  std::uint64_t window_id(std::size_t row) const { return window_ids_[row]; }
  std::uint64_t patient_id(std::size_t row) const { return patient_ids_[row]; }
  std::span<const double> view(std::size_t row) const;
  std::span<const double> expression(std::size_t row) const;
  /// Row holding `window_id`, if present.
  std::optional<std::size_t> find(std::uint64_t window_id) const;

  /// Exact scan over entries whose patient differs from `query_patient` and
  /// whose window differs from `query_window`. Throws
  /// InsufficientExemplarsError when fewer than k entries are eligible.
  ExemplarSet query(std::span<const double> view, std::uint64_t query_patient, std::size_t k, Metric metric,
                    std::optional<std::uint64_t> query_window = std::nullopt) const;

  void save(const std::filesystem::path& path) const;
  static ExemplarIndex load(const std::filesystem::path& path);

  bool operator==(const ExemplarIndex&) const = default;

 private:
  std::size_t view_dim_;
  std::size_t num_genes_;
  std::vector<std::uint64_t> window_ids_;
  std::vector<std::uint64_t> patient_ids_;
  std::vector<double> views_;
  std::vector<double> expressions_;
};

/// One entry per listed window (all when empty), views from `extractor`,
/// expressions from the matching rows of `normalized_targets`.
ExemplarIndex build_index(const DatasetBundle& bundle, const Extractor& extractor, const Matrix& normalized_targets,
                          std::span<const std::size_t> windows = {});

/// Same, from precomputed views (N x D, one row per bundle window).
ExemplarIndex build_index(const DatasetBundle& bundle, const Matrix& views, const Matrix& normalized_targets,
                          std::span<const std::size_t> windows = {});

}  // namespace egn
