#include "egn/config.hpp"

#include <fstream>
#include <sstream>

#include "config_visit.hpp"
#include "egn/error.hpp"

namespace egn {

namespace detail {

template <class V>
void visit(V& v, RunConfig& c) {
  v.field("seed", c.seed);
  v.field("output_dir", c.output_dir);
  v.section("data", [&] {
    DataConfig& d = c.data;
    v.field("bundle", d.bundle);
    v.field("external_manifest", d.external_manifest);
    v.field("seed", d.seed);
    v.field("n_patients", d.n_patients);
    v.field("windows_per_patient", d.windows_per_patient);
    v.field("slides_per_patient", d.slides_per_patient);
    v.field("image_size", d.image_size);
    v.field("num_genes", d.num_genes);
    v.field("skew_fraction", d.skew_fraction);
    v.field("n_folds", d.n_folds);
  });
  v.section("extractor", [&] { visit_extractor_settings(v, c.extractor); });
  v.section("retrieval", [&] {
    v.field("metric", c.retrieval.metric);
    v.field("k", c.retrieval.num_exemplars);
  });
  v.section("model", [&] { visit_architecture(v, c.model); });
  v.section("training", [&] {
    TrainingConfig& t = c.training;
    v.field("lr", t.lr);
    v.field("weight_decay", t.weight_decay);
    v.field("epochs", t.epochs);
    v.field("batch_size", t.batch_size);
    v.field("scheduler", t.scheduler);
    v.field("variant", t.variant);
    v.field("run_name", t.run_name);
    v.field("folds", t.folds);
  });
}

}  // namespace detail

namespace {

// Model config keys that a run config sources from other sections.
std::string relocate_model_key(std::string message) {
  static const std::pair<const char*, const char*> kMoves[] = {
      {"model.image_size", "data.image_size"},
      {"model.num_exemplars", "retrieval.k"},
      {"model.num_genes", "data.num_genes"},
      {"model.style_dim", "extractor.style_dim"},
  };
  for (const auto& [from, to] : kMoves) {
    if (auto pos = message.find(from); pos != std::string::npos) message.replace(pos, std::string(from).size(), to);
  }
  return message;
}

void apply_override(detail::Json& root, const std::string& item, std::vector<std::string>& errors) {
  const auto eq = item.find('=');
  if (eq == std::string::npos || eq == 0) {
    errors.push_back("override '" + item + "' is not of the form key=value");
    return;
  }
  const std::string key = item.substr(0, eq), text = item.substr(eq + 1);
  detail::Json value;
  try {
    value = detail::Json::parse(text);
  } catch (const detail::Json::exception&) {
    value = text;
  }
  detail::Json* node = &root;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) path.push_back(part);
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    detail::Json& next = (*node)[path[i]];
    if (next.is_null()) next = detail::Json::object();
    if (!next.is_object()) {
      errors.push_back("override '" + key + "': " + path[i] + " is not a section");
      return;
    }
    node = &next;
  }
  (*node)[path.back()] = std::move(value);
}

}  // namespace

SynthConfig DataConfig::synth() const {
  SynthConfig s;
  s.seed = seed;
  s.n_patients = n_patients;
  s.windows_per_patient = windows_per_patient;
  s.slides_per_patient = slides_per_patient;
  s.image_size = image_size;
  s.num_genes = num_genes;
  s.skew_fraction = skew_fraction;
  return s;
}

ExtractorConfig RunConfig::extractor_config() const {
  ExtractorConfig e = extractor;
  e.image_size = data.image_size;
  return e;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m = model;
  m.image_size = data.image_size;
  m.num_exemplars = retrieval.num_exemplars;
  m.num_genes = data.num_genes;
  m.style_dim = extractor.style_dim;
  return m;
}

std::vector<std::size_t> RunConfig::folds() const {
  if (!training.folds.empty()) return training.folds;
  std::vector<std::size_t> all(data.n_folds);
  for (std::size_t f = 0; f < all.size(); ++f) all[f] = f;
  return all;
}

std::vector<std::string> RunConfig::validate() const {
  std::vector<std::string> errors;
  if (output_dir.empty()) errors.push_back("output_dir must not be empty");
  if (data.external_manifest.empty()) {
    if (data.n_patients == 0) errors.push_back("data.n_patients must be positive");
    if (data.windows_per_patient == 0) errors.push_back("data.windows_per_patient must be positive");
    if (data.slides_per_patient == 0) errors.push_back("data.slides_per_patient must be positive");
    if (!(data.skew_fraction >= 0.0 && data.skew_fraction <= 1.0)) {
      errors.push_back("data.skew_fraction must lie in [0,1]");
    }
    if (data.n_patients != 0 && data.n_folds > data.n_patients) {
      errors.push_back("data.n_folds (" + std::to_string(data.n_folds) + ") exceeds data.n_patients (" +
                       std::to_string(data.n_patients) + ")");
    }
  }
  if (data.n_folds < 2) errors.push_back("data.n_folds must be at least 2");
  for (std::string e : extractor_config().validate()) {
    if (auto pos = e.find("extractor.image_size"); pos != std::string::npos) e.replace(pos, 20, "data.image_size");
    errors.push_back(std::move(e));
  }
  for (const auto& e : model_config().validate()) errors.push_back(relocate_model_key(e));
  try {
    parse_metric(retrieval.metric);
  } catch (const ConfigError& e) {
    errors.push_back(std::string("retrieval.metric: ") + e.what());
  }
  try {
    parse_variant(training.variant);
  } catch (const ConfigError& e) {
    errors.push_back(std::string("training.variant: ") + e.what());
  }
  if (!(training.lr > 0.0)) errors.push_back("training.lr must be positive");
  if (!(training.weight_decay >= 0.0)) errors.push_back("training.weight_decay must be nonnegative");
  if (training.epochs == 0) errors.push_back("training.epochs must be positive");
  if (training.batch_size < 2) errors.push_back("training.batch_size must be at least 2 (the correlation loss needs a batch)");
  if (training.scheduler != "cosine" && training.scheduler != "constant") {
    errors.push_back("training.scheduler must be cosine or constant, got '" + training.scheduler + "'");
  }
  for (std::size_t f : training.folds) {
    if (f >= data.n_folds) {
      errors.push_back("training.folds entry " + std::to_string(f) + " is not below data.n_folds (" +
                       std::to_string(data.n_folds) + ")");
    }
  }
  if (training.run_name.find('/') != std::string::npos || training.run_name == "..") {
    errors.push_back("training.run_name must be a plain directory name");
  }
  return errors;
}

std::string dump_run_config(const RunConfig& config) { return detail::to_json(config).dump(2) + "\n"; }

RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides) {
  std::vector<std::string> errors;
  detail::Json root;
  try {
    root = detail::Json::parse(text);
  } catch (const detail::Json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& item : overrides) apply_override(root, item, errors);

  RunConfig config;
  detail::JsonReader reader(root, errors);
  detail::visit(reader, config);
  reader.finish();
  for (auto& e : config.validate()) errors.push_back(std::move(e));
  if (!errors.empty()) {
    std::string msg = "invalid config (" + std::to_string(errors.size()) + " problem" + (errors.size() > 1 ? "s" : "") + "):";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_run_config(buffer.str(), overrides);
}

}  // namespace egn
