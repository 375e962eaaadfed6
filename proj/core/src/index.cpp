#include "egn/index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "egn/checkpoint.hpp"
#include "egn/error.hpp"

namespace egn {

namespace {

constexpr std::uint32_t kIndexVersion = 1;
constexpr std::size_t kBlock = 256;

struct Candidate {
  double distance;
  std::uint64_t window_id;
  std::size_t row;
};

bool closer(const Candidate& a, const Candidate& b) {
  return a.distance < b.distance || (a.distance == b.distance && a.window_id < b.window_id);
}

double norm(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

}  // namespace

Metric parse_metric(std::string_view name) {
  if (name == "l2") return Metric::kL2;
  if (name == "l1") return Metric::kL1;
  if (name == "cosine") return Metric::kCosine;
  throw ConfigError("unknown metric '" + std::string(name) + "' (expected l2, l1 or cosine)");
}

std::string metric_name(Metric metric) {
  switch (metric) {
    case Metric::kL2:
      return "l2";
    case Metric::kL1:
      return "l1";
    case Metric::kCosine:
      return "cosine";
  }
  return "?";
}

double distance(std::span<const double> a, std::span<const double> b, Metric metric) {
  if (a.size() != b.size()) {
    throw DimensionError("distance: vector lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()) +
                         " differ");
  }
  switch (metric) {
    case Metric::kL2: {
      double s = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
      return std::sqrt(s);
    }
    case Metric::kL1: {
      double s = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
      return s;
    }
    case Metric::kCosine: {
      const double na = norm(a), nb = norm(b);
      if (na == 0.0 || nb == 0.0) throw DegenerateInputError("cosine distance is undefined for a zero vector");
      double dot = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
      return std::max(0.0, 1.0 - dot / (na * nb));
    }
  }
  return 0.0;
}

ExemplarIndex::ExemplarIndex(std::size_t view_dim, std::size_t num_genes) : view_dim_(view_dim), num_genes_(num_genes) {
  if (view_dim == 0 || num_genes == 0) throw DimensionError("index dimensions must be positive");
}

void ExemplarIndex::add(std::uint64_t window_id, std::uint64_t patient_id, std::span<const double> view,
                        std::span<const double> expression) {
  if (view.size() != view_dim_ || expression.size() != num_genes_) {
    throw DimensionError("index entry for window " + std::to_string(window_id) + " has view length " +
                         std::to_string(view.size()) + " and expression length " + std::to_string(expression.size()) +
                         "; index expects " + std::to_string(view_dim_) + " and " + std::to_string(num_genes_));
  }
  window_ids_.push_back(window_id);
  patient_ids_.push_back(patient_id);
  views_.insert(views_.end(), view.begin(), view.end());
  expressions_.insert(expressions_.end(), expression.begin(), expression.end());
}

std::span<const double> ExemplarIndex::view(std::size_t row) const {
  return {views_.data() + row * view_dim_, view_dim_};
}

std::span<const double> ExemplarIndex::expression(std::size_t row) const {
  return {expressions_.data() + row * num_genes_, num_genes_};
}

std::optional<std::size_t> ExemplarIndex::find(std::uint64_t window_id) const {
  const auto it = std::find(window_ids_.begin(), window_ids_.end(), window_id);
  if (it == window_ids_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - window_ids_.begin());
}

ExemplarSet ExemplarIndex::query(std::span<const double> view, std::uint64_t query_patient, std::size_t k,
                                 Metric metric, std::optional<std::uint64_t> query_window) const {
  if (k == 0) throw ContractError("query: k must be at least 1");
  if (view.size() != view_dim_) {
    throw DimensionError("query view has length " + std::to_string(view.size()) + ", index expects " +
                         std::to_string(view_dim_));
  }
  // Max-heap of the best k seen so far; the root is the worst kept candidate.
  std::vector<Candidate> heap;
  heap.reserve(k + 1);
  std::size_t eligible = 0;
  for (std::size_t start = 0; start < size(); start += kBlock) {
    const std::size_t stop = std::min(size(), start + kBlock);
    for (std::size_t row = start; row < stop; ++row) {
      if (patient_ids_[row] == query_patient) continue;
      if (query_window && window_ids_[row] == *query_window) continue;
      ++eligible;
      const Candidate c{distance(view, this->view(row), metric), window_ids_[row], row};
      if (heap.size() < k) {
        heap.push_back(c);
        std::push_heap(heap.begin(), heap.end(), closer);
      } else if (closer(c, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), closer);
        heap.back() = c;
        std::push_heap(heap.begin(), heap.end(), closer);
      }
    }
  }
  if (eligible < k) {
    throw InsufficientExemplarsError("query for patient " + std::to_string(query_patient) + " needs " +
                                         std::to_string(k) + " exemplars but only " + std::to_string(eligible) +
                                         " cross-patient entries are eligible",
                                     eligible);
  }
  std::sort_heap(heap.begin(), heap.end(), closer);
  ExemplarSet out;
  out.query_window_id = query_window.value_or(0);
  for (const auto& c : heap) {
    out.rows.push_back(c.row);
    out.window_ids.push_back(c.window_id);
    out.patient_ids.push_back(patient_ids_[c.row]);
    out.distances.push_back(c.distance);
  }
  return out;
}

void ExemplarIndex::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot open " + path.string() + " for writing");
  BinaryWriter w(out);
  w.magic("EGNI");
  w.u32(kIndexVersion);
  w.u64(view_dim_);
  w.u64(num_genes_);
  w.u64(size());
  for (std::size_t row = 0; row < size(); ++row) {
    w.u64(window_ids_[row]);
    w.u64(patient_ids_[row]);
    w.f64s(view(row));
    w.f64s(expression(row));
  }
  if (!out) throw ArtifactError("failed writing " + path.string());
}

ExemplarIndex ExemplarIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open index " + path.string());
  BinaryReader r(in, path.string());
  r.expect_magic("EGNI");
  if (const auto v = r.u32(); v != kIndexVersion) {
    throw DataError(path.string() + ": unsupported index version " + std::to_string(v));
  }
  const std::size_t d = r.u64();
  const std::size_t m = r.u64();
  const std::size_t count = r.u64();
  ExemplarIndex index(d, m);
  std::vector<double> view(d), expr(m);
  for (std::size_t row = 0; row < count; ++row) {
    const std::uint64_t wid = r.u64();
    const std::uint64_t pid = r.u64();
    r.f64s(view);
    r.f64s(expr);
    index.add(wid, pid, view, expr);
  }
  if (!r.at_end()) throw DataError(path.string() + ": trailing bytes after " + std::to_string(count) + " entries");
  return index;
}

ExemplarIndex build_index(const DatasetBundle& bundle, const Matrix& views, const Matrix& normalized_targets,
                          std::span<const std::size_t> windows) {
  if (views.rows != bundle.size() || normalized_targets.rows != bundle.size()) {
    throw DimensionError("build_index: bundle has " + std::to_string(bundle.size()) + " windows but " +
                         std::to_string(views.rows) + " views and " + std::to_string(normalized_targets.rows) +
                         " target rows");
  }
  ExemplarIndex index(views.cols, normalized_targets.cols);
  auto add_row = [&](std::size_t i) {
    index.add(bundle.windows[i].id, bundle.windows[i].patient_id, views.row(i), normalized_targets.row(i));
  };
  if (windows.empty()) {
    for (std::size_t i = 0; i < bundle.size(); ++i) add_row(i);
  } else {
    for (std::size_t i : windows) add_row(i);
  }
  return index;
}

ExemplarIndex build_index(const DatasetBundle& bundle, const Extractor& extractor, const Matrix& normalized_targets,
                          std::span<const std::size_t> windows) {
  return build_index(bundle, encode_bundle(extractor, bundle), normalized_targets, windows);
}

}  // namespace egn
