#include "egn/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

#include "egn/error.hpp"
#include "egn/extractor.hpp"
#include "egn/optim.hpp"
#include "egn/rng.hpp"

namespace egn {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kStreamModel = 1;
constexpr std::uint64_t kStreamOrder = 2;

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << text;
}

void require_artifact(const fs::path& path, const std::string& what, const std::string& command) {
  if (!fs::exists(path)) {
    throw ArtifactError(what + " not found at " + path.string() + "; run `egn " + command +
                        "` with the same config first");
  }
}

DatasetBundle require_bundle(const ArtifactPaths& paths) {
  require_artifact(paths.data_manifest(), "dataset bundle", "gen-data");
  return load_bundle(paths.data_manifest());
}

template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> failures(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        failures[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }
}

std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

}  // namespace

ArtifactPaths::ArtifactPaths(const RunConfig& config)
    : root_(config.output_dir), bundle_(config.data.bundle), run_name_(config.run_name()) {}

fs::path ArtifactPaths::data_manifest() const {
  return bundle_.empty() ? data_dir() / "manifest.json" : bundle_;
}

RunLock::RunLock(const ArtifactPaths& paths) : path_(paths.lock()) {
  fs::create_directories(path_.parent_path());
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f) {
    throw ArtifactError("output directory is in use by another command (lock file " + path_.string() +
                        "); remove it if no command is running");
  }
  std::fclose(f);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::size_t worker_count() {
  if (const char* env = std::getenv("EGN_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v <= 0) throw ConfigError("EGN_THREADS must be a positive integer, got '" + std::string(env) + "'");
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

FoldSplit split_fold(const DatasetBundle& bundle, const FoldAssignment& folds, std::size_t fold) {
  if (fold >= folds.n_folds) throw ConfigError("fold " + std::to_string(fold) + " does not exist");
  FoldSplit split;
  split.test = folds.windows_in(fold);
  const std::vector<std::size_t> outside = folds.windows_outside(fold);
  std::uint64_t held_out = 0;
  std::size_t patients = 0;
  std::map<std::uint64_t, bool> seen;
  for (std::size_t i : outside) {
    if (!seen[bundle.windows[i].patient_id]) ++patients;
    seen[bundle.windows[i].patient_id] = true;
  }
  if (patients < 2) {
    throw ConfigError("fold " + std::to_string(fold) + " leaves " + std::to_string(patients) +
                      " training patient(s); a validation patient needs at least 2");
  }
  held_out = seen.rbegin()->first;
  split.validation_patient = held_out;
  for (std::size_t i : outside) (bundle.windows[i].patient_id == held_out ? split.validation : split.train).push_back(i);
  return split;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols);
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy_n(m.row(rows[r]).begin(), m.cols, out.row(r).begin());
  return out;
}

FoldData prepare_fold(const RunConfig& config, const DatasetBundle& bundle, const Matrix& views,
                      const FoldAssignment& folds, std::size_t fold) {
  if (views.rows != bundle.size()) throw DimensionError("views must have one row per bundle window");
  FoldSplit split = split_fold(bundle, folds, fold);
  std::vector<std::size_t> fit_rows = split.train;
  fit_rows.insert(fit_rows.end(), split.validation.begin(), split.validation.end());
  std::sort(fit_rows.begin(), fit_rows.end());

  NormalizationParams norm = fit_normalization(bundle.raw_expression, fit_rows);
  Matrix targets = normalize_targets(bundle.raw_expression, norm);
  ExemplarIndex index = build_index(bundle, views, targets, fit_rows);

  const std::size_t k = config.retrieval.num_exemplars;
  const Metric metric = config.metric();
  std::vector<std::vector<std::size_t>> exemplars(bundle.size());
  parallel_for(bundle.size(), [&](std::size_t i) {
    const auto& w = bundle.windows[i];
    exemplars[i] = index.query(views.row(i), w.patient_id, k, metric, w.id).rows;
  });
  return FoldData{fold,           std::move(split), std::move(norm), std::move(targets),
                  views,          std::move(index), std::move(exemplars)};
}

ModelInput make_batch(const DatasetBundle& bundle, const FoldData& data, std::span<const std::size_t> windows) {
  const std::size_t d = data.views.cols, m = data.targets.cols;
  const std::size_t k = windows.empty() ? 0 : data.exemplars[windows[0]].size();
  std::vector<double> query(windows.size() * d), ev(windows.size() * k * d), ey(windows.size() * k * m);
  for (std::size_t b = 0; b < windows.size(); ++b) {
    const std::size_t w = windows[b];
    std::copy_n(data.views.row(w).begin(), d, query.begin() + b * d);
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t row = data.exemplars[w][j];
      std::copy_n(data.index.view(row).begin(), d, ev.begin() + (b * k + j) * d);
      std::copy_n(data.index.expression(row).begin(), m, ey.begin() + (b * k + j) * m);
    }
  }
  ModelInput in;
  in.images = window_batch(bundle, windows);
  in.query_views = Tensor::from({windows.size(), d}, std::move(query));
  in.exemplar_views = Tensor::from({windows.size() * k, d}, std::move(ev));
  in.exemplar_targets = Tensor::from({windows.size() * k, m}, std::move(ey));
  return in;
}

Matrix predict(const EgnModel& model, const DatasetBundle& bundle, const FoldData& data,
               std::span<const std::size_t> windows, std::size_t batch_size) {
  const std::size_t m = model.config().num_genes;
  Matrix out(windows.size(), m);
  NoGradScope ng;
  for (std::size_t start = 0; start < windows.size(); start += batch_size) {
    const auto chunk = windows.subspan(start, std::min(batch_size, windows.size() - start));
    const Tensor y = model.forward(make_batch(bundle, data, chunk));
    std::copy(y.data().begin(), y.data().end(), out.values.begin() + static_cast<std::ptrdiff_t>(start * m));
  }
  return out;
}

namespace {

double batch_loss(const Matrix& pred, const Matrix& target) {
  NoGradScope ng;
  return loss_total(Tensor::from({pred.rows, pred.cols}, pred.values),
                    Tensor::from({target.rows, target.cols}, target.values))
      .item();
}

// Consecutive batches; a trailing singleton joins the previous batch because
// the correlation loss needs at least two rows.
std::vector<std::span<const std::size_t>> make_batches(std::span<const std::size_t> order, std::size_t size) {
  std::vector<std::span<const std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += size) {
    std::size_t len = std::min(size, order.size() - start);
    if (order.size() - start - len == 1) ++len;
    batches.push_back(order.subspan(start, len));
    if (len > size) break;
  }
  return batches;
}

}  // namespace

FoldTraining train_fold(const RunConfig& config, const DatasetBundle& bundle, const FoldData& data, Variant variant,
                        std::uint64_t seed) {
  const TrainingConfig& tc = config.training;
  if (data.split.train.size() < 2 || data.split.validation.size() < 2) {
    throw DataError("fold " + std::to_string(data.fold) + " needs at least two training and two validation windows");
  }
  EgnModel model(config.model_config(), variant, derive_seed(seed, kStreamModel));
  AdamW opt(model.parameters().entries(), AdamOptions{.lr = tc.lr, .weight_decay = tc.weight_decay});
  Rng order_rng(derive_seed(seed, kStreamOrder));
  const Matrix val_targets = gather_rows(data.targets, data.split.validation);

  std::vector<EpochRecord> history;
  std::vector<std::vector<double>> best;
  std::size_t best_epoch = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order = data.split.train;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = tc.scheduler == "cosine" ? cosine_lr(tc.lr, epoch, tc.epochs) : tc.lr;
    opt.set_lr(lr);
    order_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t rows = 0;
    for (const auto batch : make_batches(order, tc.batch_size)) {
      const ModelInput in = make_batch(bundle, data, batch);
      const Matrix target = gather_rows(data.targets, batch);
      opt.zero_grad();
      Tape tape;
      double value = 0.0;
      {
        TapeScope scope(tape);
        const Tensor loss = loss_total(model.forward(in), Tensor::from({target.rows, target.cols}, target.values));
        value = loss.item();
        if (!std::isfinite(value)) {
          throw NumericError("training loss became non-finite in fold " + std::to_string(data.fold) + ", epoch " +
                             std::to_string(epoch));
        }
        backward(loss);
      }
      opt.step();
      loss_sum += value * static_cast<double>(batch.size());
      rows += batch.size();
    }
    const Matrix val_pred = predict(model, bundle, data, data.split.validation, tc.batch_size);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(rows);
    rec.val_loss = batch_loss(val_pred, val_targets);
    rec.val_pcc_m = evaluate(val_pred, val_targets).pcc_at_m;
    history.push_back(rec);
    if (rec.val_loss < best_loss) {
      best_loss = rec.val_loss;
      best_epoch = epoch;
      best.clear();
      for (const auto& p : model.parameters().entries()) best.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    }
  }
  auto& entries = model.parameters().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    std::copy(best[i].begin(), best[i].end(), entries[i].tensor.mutable_data().begin());
  }
  return FoldTraining{std::move(model), std::move(history), best_epoch};
}

std::string loss_curve_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream s;
  s << "epoch,lr,train_loss,val_loss,val_pcc_m\n";
  for (const auto& r : history) {
    s << r.epoch << ',' << format_double(r.lr) << ',' << format_double(r.train_loss) << ','
      << format_double(r.val_loss) << ',' << format_double(r.val_pcc_m) << '\n';
  }
  return s.str();
}

MetricReport evaluate_fold(const EgnModel& model, const DatasetBundle& bundle, const FoldData& data,
                           std::size_t batch_size) {
  const Matrix pred = predict(model, bundle, data, data.split.test, batch_size);
  return evaluate(pred, gather_rows(data.targets, data.split.test));
}

Matrix views_from_index(const ExemplarIndex& index, const DatasetBundle& bundle) {
  Matrix views(bundle.size(), index.view_dim());
  for (std::size_t i = 0; i < bundle.size(); ++i) {
    const auto row = index.find(bundle.windows[i].id);
    if (!row) {
      throw DataError("window " + std::to_string(bundle.windows[i].id) +
                      " is missing from the index; rebuild it with `egn build-index`");
    }
    std::copy_n(index.view(*row).begin(), views.cols, views.row(i).begin());
  }
  return views;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fs::path cmd_gen_data(const RunConfig& config, std::ostream& log) {
  const ArtifactPaths paths(config);
  RunLock lock(paths);
  DatasetBundle bundle;
  if (!config.data.external_manifest.empty()) {
    bundle = ingest_external(config.data.external_manifest, config.data.num_genes, config.data.image_size);
    log << "ingested " << bundle.size() << " windows from " << config.data.external_manifest << "\n";
  } else {
    bundle = generate(config.data.synth());
    log << "generated " << bundle.size() << " windows over " << bundle.patients().size() << " patients\n";
  }
  const fs::path manifest = save_bundle(bundle, paths.data_dir());
  log << "wrote " << manifest.string() << "\n";
  return manifest;
}

void cmd_train_extractor(const RunConfig& config, std::ostream& log) {
  const ArtifactPaths paths(config);
  RunLock lock(paths);
  const DatasetBundle bundle = require_bundle(paths);
  if (bundle.image_size != config.data.image_size) {
    throw ConfigError("bundle windows are " + std::to_string(bundle.image_size) + " px but data.image_size is " +
                      std::to_string(config.data.image_size));
  }
  Extractor extractor(config.extractor_config(), config.seed);
  const auto rows = train_extractor(extractor, bundle, {}, config.seed);
  std::ostringstream csv;
  csv << "epoch,l1,generator,discriminator\n";
  for (const auto& r : rows) {
    csv << r.epoch << ',' << format_double(r.l1) << ',' << format_double(r.generator) << ','
        << format_double(r.discriminator) << '\n';
  }
  write_text(paths.extractor_log(), csv.str());
  fs::create_directories(paths.extractor().parent_path());
  save_extractor(paths.extractor(), extractor, config.seed);
  log << "extractor trained for " << rows.size() << " epochs, final L1 " << (rows.empty() ? 0.0 : rows.back().l1)
      << "\nwrote " << paths.extractor().string() << "\n";
}

void cmd_build_index(const RunConfig& config, std::ostream& log) {
  const ArtifactPaths paths(config);
  RunLock lock(paths);
  const DatasetBundle bundle = require_bundle(paths);
  require_artifact(paths.extractor(), "extractor checkpoint", "train-extractor");
  const Extractor extractor = load_extractor(paths.extractor());
  // Stored expressions use whole-bundle statistics; training re-normalizes per fold.
  const Matrix targets = normalize_targets(bundle.raw_expression, fit_normalization(bundle.raw_expression));
  const ExemplarIndex index = build_index(bundle, extractor, targets);
  fs::create_directories(paths.index().parent_path());
  index.save(paths.index());
  log << "indexed " << index.size() << " windows (D=" << index.view_dim() << ")\nwrote " << paths.index().string()
      << "\n";
}

ExemplarSet cmd_retrieve(const RunConfig& config, std::uint64_t window_id, std::ostream& out) {
  const ArtifactPaths paths(config);
  require_artifact(paths.index(), "exemplar index", "build-index");
  const ExemplarIndex index = ExemplarIndex::load(paths.index());
  const auto row = index.find(window_id);
  if (!row) throw DataError("window " + std::to_string(window_id) + " is not in the index");
  const std::uint64_t patient = index.patient_id(*row);
  const ExemplarSet set =
      index.query(index.view(*row), patient, config.retrieval.num_exemplars, config.metric(), window_id);
  out << "window " << window_id << " (patient " << patient << "), " << set.size() << " nearest by "
      << config.retrieval.metric << ":\n";
  out << "rank,window_id,patient_id,distance\n";
  for (std::size_t j = 0; j < set.size(); ++j) {
    out << j + 1 << ',' << set.window_ids[j] << ',' << set.patient_ids[j] << ',' << format_double(set.distances[j])
        << '\n';
  }
  return set;
}

void cmd_train(const RunConfig& config, std::ostream& log) {
  const ArtifactPaths paths(config);
  RunLock lock(paths);
  const DatasetBundle bundle = require_bundle(paths);
  require_artifact(paths.extractor(), "extractor checkpoint", "train-extractor");
  require_artifact(paths.index(), "exemplar index", "build-index");
  const Matrix views = views_from_index(ExemplarIndex::load(paths.index()), bundle);
  const FoldAssignment folds = make_folds(bundle, config.data.n_folds);
  write_text(paths.run_dir() / "config.json", dump_run_config(config));
  for (std::size_t fold : config.folds()) {
    const FoldData data = prepare_fold(config, bundle, views, folds, fold);
    const FoldTraining result = train_fold(config, bundle, data, config.variant(), derive_seed(config.seed, fold));
    write_text(paths.fold_dir(fold) / "loss_curve.csv", loss_curve_csv(result.history));
    save_model(paths.model(fold), result.model);
    const auto& best = result.history[result.best_epoch];
    log << config.run_name() << " fold " << fold << ": best epoch " << result.best_epoch << ", val loss "
        << best.val_loss << ", val PCC@M " << best.val_pcc_m << "\n";
  }
}

MetricReport cmd_eval(const RunConfig& config, std::ostream& log) {
  const ArtifactPaths paths(config);
  RunLock lock(paths);
  const DatasetBundle bundle = require_bundle(paths);
  require_artifact(paths.index(), "exemplar index", "build-index");
  for (std::size_t fold : config.folds()) require_artifact(paths.model(fold), "model checkpoint", "train");
  const Matrix views = views_from_index(ExemplarIndex::load(paths.index()), bundle);
  const FoldAssignment folds = make_folds(bundle, config.data.n_folds);

  Matrix all_pred(0, bundle.num_genes()), all_target(0, bundle.num_genes());
  for (std::size_t fold : config.folds()) {
    const EgnModel model = load_model(paths.model(fold));
    const FoldData data = prepare_fold(config, bundle, views, folds, fold);
    const Matrix pred = predict(model, bundle, data, data.split.test, config.training.batch_size);
    const Matrix target = gather_rows(data.targets, data.split.test);
    const MetricReport fold_report = evaluate(pred, target);
    write_text(paths.fold_dir(fold) / "metrics.json", fold_report.to_json(bundle.gene_names));
    write_text(paths.fold_dir(fold) / "metrics.csv", fold_report.to_csv(bundle.gene_names));
    log << config.run_name() << " fold " << fold << ": PCC@M " << fold_report.pcc_at_m << ", MSE " << fold_report.mse
        << "\n";
    all_pred.values.insert(all_pred.values.end(), pred.values.begin(), pred.values.end());
    all_pred.rows += pred.rows;
    all_target.values.insert(all_target.values.end(), target.values.begin(), target.values.end());
    all_target.rows += target.rows;
  }
  const MetricReport report = evaluate(all_pred, all_target);
  write_text(paths.run_dir() / "metrics.json", report.to_json(bundle.gene_names));
  write_text(paths.run_dir() / "metrics.csv", report.to_csv(bundle.gene_names));
  log << config.run_name() << ": PCC@F " << report.pcc_at_f << ", PCC@S " << report.pcc_at_s << ", PCC@M "
      << report.pcc_at_m << ", MSE " << report.mse << ", MAE " << report.mae << "\nwrote "
      << (paths.run_dir() / "metrics.json").string() << "\n";
  return report;
}

GradcheckReport cmd_gradcheck(const RunConfig& config, std::size_t coordinates, std::ostream& log) {
  ModelConfig toy;
  toy.image_size = 16;
  toy.patch_size = 8;
  toy.model_dim = 16;
  toy.ffn_dim = 32;
  toy.backbone_heads = 2;
  toy.depth = 2;
  toy.eb_heads = 2;
  toy.eb_head_dim = 4;
  toy.eb_frequency = 1;
  toy.num_exemplars = 2;
  toy.num_genes = 4;
  toy.style_dim = 6;
  toy.eb_zero_init = false;  // live EB outputs so every path carries gradient

  EgnModel model(toy, config.variant(), config.seed);
  Rng rng(derive_seed(config.seed, 7));
  auto random = [&](Shape shape, double lo, double hi) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v));
  };
  const std::size_t b = 3;
  ModelInput in;
  in.images = random({b, 3, 16, 16}, 0.0, 1.0);
  in.query_views = random({b, toy.style_dim}, -1.0, 1.0);
  in.exemplar_views = random({b * toy.num_exemplars, toy.style_dim}, -1.0, 1.0);
  in.exemplar_targets = random({b * toy.num_exemplars, toy.num_genes}, 0.0, 1.0);
  const Tensor target = random({b, toy.num_genes}, 0.0, 1.0);

  GradcheckOptions opt;
  opt.max_coordinates = coordinates;
  opt.seed = config.seed;
  const GradcheckReport report =
      gradcheck([&] { return loss_total(model.forward(in), target); }, model.parameters().entries(), opt);
  log << report.summary() << "\n";
  return report;
}

}  // namespace egn
