#pragma once

// End-to-end stages behind the command-line tool. Every command reads and
// writes artifacts under RunConfig::output_dir only.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "egn/config.hpp"
#include "egn/dataset.hpp"
#include "egn/gradcheck.hpp"
#include "egn/index.hpp"
#include "egn/model.hpp"
#include "egn/objectives.hpp"

namespace egn {

class ArtifactPaths {
 public:
  explicit ArtifactPaths(const RunConfig& config);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path data_dir() const { return root_ / "data"; }
  /// data.bundle when set, otherwise the bundle gen-data writes.
  std::filesystem::path data_manifest() const;
  std::filesystem::path extractor() const { return root_ / "extractor" / "extractor.egnx"; }
  std::filesystem::path extractor_log() const { return root_ / "extractor" / "extractor_log.csv"; }
  std::filesystem::path index() const { return root_ / "index" / "index.egni"; }
  std::filesystem::path run_dir() const { return root_ / "runs" / run_name_; }
  std::filesystem::path fold_dir(std::size_t fold) const { return run_dir() / ("fold" + std::to_string(fold)); }
  std::filesystem::path model(std::size_t fold) const { return fold_dir(fold) / "model.egnm"; }
  std::filesystem::path lock() const { return root_ / ".lock"; }

 private:
  std::filesystem::path root_;
  std::filesystem::path bundle_;
  std::string run_name_;
};

// Exclusive ownership of an output directory for one command. A second
// holder gets ArtifactError naming the lock file.
class RunLock {
 public:
  explicit RunLock(const ArtifactPaths& paths);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Independent stream of a seed (splitmix64 of seed and stream id).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Worker cap from EGN_THREADS (default: hardware concurrency). ConfigError
/// on a value that is not a positive integer.
std::size_t worker_count();

struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
  std::uint64_t validation_patient = 0;
};

/// Test windows are the fold's patients; the training patient with the
/// largest id is held out for model selection.
FoldSplit split_fold(const DatasetBundle& bundle, const FoldAssignment& folds, std::size_t fold);

// Everything a fold needs to assemble batches: targets normalized with
// training-fold statistics, and each window's k cross-patient exemplars drawn
// from training-fold entries only.
struct FoldData {
  std::size_t fold = 0;
  FoldSplit split;
  NormalizationParams normalization;
  Matrix targets;  // N x M, every bundle window
  Matrix views;    // N x D
  ExemplarIndex index;
  std::vector<std::vector<std::size_t>> exemplars;  // per window, rows of `index`
};

FoldData prepare_fold(const RunConfig& config, const DatasetBundle& bundle, const Matrix& views,
                      const FoldAssignment& folds, std::size_t fold);

ModelInput make_batch(const DatasetBundle& bundle, const FoldData& data, std::span<const std::size_t> windows);
/// Normalized-scale predictions for the listed windows.
Matrix predict(const EgnModel& model, const DatasetBundle& bundle, const FoldData& data,
               std::span<const std::size_t> windows, std::size_t batch_size);
/// Rows of data.targets for the listed windows.
Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_pcc_m = 0.0;
};

struct FoldTraining {
  EgnModel model;  // parameters of the best validation epoch
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};

/// AdamW with a per-epoch learning-rate schedule; keeps the epoch with the
/// lowest validation loss. Model and batch order are seeded from `seed`.
FoldTraining train_fold(const RunConfig& config, const DatasetBundle& bundle, const FoldData& data, Variant variant,
                        std::uint64_t seed);
std::string loss_curve_csv(const std::vector<EpochRecord>& history);

/// Metrics of `model` on the fold's test windows.
MetricReport evaluate_fold(const EgnModel& model, const DatasetBundle& bundle, const FoldData& data,
                           std::size_t batch_size);

/// Global views of every bundle window read back from the saved index.
Matrix views_from_index(const ExemplarIndex& index, const DatasetBundle& bundle);

// Commands. Each writes a short progress log to `log` and throws an egn::Error
// on failure; missing inputs raise ArtifactError naming the command that
// produces them.
std::filesystem::path cmd_gen_data(const RunConfig& config, std::ostream& log);
void cmd_train_extractor(const RunConfig& config, std::ostream& log);
void cmd_build_index(const RunConfig& config, std::ostream& log);
ExemplarSet cmd_retrieve(const RunConfig& config, std::uint64_t window_id, std::ostream& out);
void cmd_train(const RunConfig& config, std::ostream& log);
MetricReport cmd_eval(const RunConfig& config, std::ostream& log);
/// Finite-difference check of the configured variant at a toy size.
GradcheckReport cmd_gradcheck(const RunConfig& config, std::size_t coordinates, std::ostream& log);

}  // namespace egn
