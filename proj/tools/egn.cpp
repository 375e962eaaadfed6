// egn: command-line driver for the exemplar-guided expression pipeline.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "egn/config.hpp"
#include "egn/error.hpp"
#include "egn/pipeline.hpp"

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kArtifact = 3, kNumeric = 4 };

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string seed;
  std::string variant;
  std::uint64_t window = 0;
  std::size_t coordinates = 2048;
};

egn::RunConfig load(const Options& o) {
  std::vector<std::string> overrides = o.overrides;
  if (!o.seed.empty()) overrides.push_back("seed=" + o.seed);
  if (!o.variant.empty()) overrides.push_back("training.variant=\"" + o.variant + "\"");
  if (o.config_path.empty()) return egn::parse_run_config("{}", overrides);
  return egn::load_run_config(o.config_path, overrides);
}

int run(const std::string& command, const Options& o) {
  const egn::RunConfig config = load(o);
  if (command == "gen-data") {
    egn::cmd_gen_data(config, std::cout);
  } else if (command == "train-extractor") {
    egn::cmd_train_extractor(config, std::cout);
  } else if (command == "build-index") {
    egn::cmd_build_index(config, std::cout);
  } else if (command == "retrieve") {
    egn::cmd_retrieve(config, o.window, std::cout);
  } else if (command == "train") {
    egn::cmd_train(config, std::cout);
  } else if (command == "eval") {
    egn::cmd_eval(config, std::cout);
  } else if (command == "gradcheck") {
    return egn::cmd_gradcheck(config, o.coordinates, std::cout).passed ? kOk : kFailure;
  } else if (command == "show-config") {
    std::cout << egn::dump_run_config(config);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exemplar-guided gene-expression prediction from slide image windows"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON run config (defaults apply when omitted)");
    sub->add_option("--seed", o.seed, "Override the run seed");
    sub->add_option("--variant", o.variant, "full | backbone_only | without_eb | without_projector");
    sub->add_option("--set", o.overrides, "Override a config key, e.g. --set training.epochs=5")->take_all();
  };
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "Generate (or ingest) the dataset bundle"},
      {"train-extractor", "Train the global-view extractor"},
      {"build-index", "Encode every window and write the exemplar index"},
      {"retrieve", "Print the nearest cross-patient exemplars of a window"},
      {"train", "Train the prediction model on each configured fold"},
      {"eval", "Evaluate trained fold models and write metrics"},
      {"gradcheck", "Finite-difference check of model gradients at a toy size"},
      {"show-config", "Print the resolved config as canonical JSON"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_common(sub);
    if (name == "retrieve") sub->add_option("--window", o.window, "Window id to query")->required();
    if (name == "gradcheck") sub->add_option("--coordinates", o.coordinates, "Sampled parameter coordinates");
  }
  CLI11_PARSE(app, argc, argv);

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, o);
  } catch (const egn::ConfigError& e) {
    std::cerr << "egn " << command << ": " << e.what() << "\n";
    return kConfig;
  } catch (const egn::ArtifactError& e) {
    std::cerr << "egn " << command << ": " << e.what() << "\n";
    return kArtifact;
  } catch (const egn::DataError& e) {
    std::cerr << "egn " << command << ": " << e.what() << "\n";
    return kArtifact;
  } catch (const egn::NumericError& e) {
    std::cerr << "egn " << command << ": " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "egn " << command << ": " << e.what() << "\n";
    return kFailure;
  }
}
