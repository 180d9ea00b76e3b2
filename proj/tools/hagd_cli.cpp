// Command-line front end: one subcommand per pipeline stage plus `run all`.
#include <CLI11.hpp>

#include <iostream>

#include "hagd/error.hpp"
#include "hagd/pipeline.hpp"

namespace {

int exit_code(const std::exception& e) {
  if (dynamic_cast<const hagd::ConfigError*>(&e) || dynamic_cast<const hagd::ParameterError*>(&e)) return 2;
  if (dynamic_cast<const hagd::DependencyError*>(&e) || dynamic_cast<const hagd::ParseError*>(&e)) return 3;
  if (dynamic_cast<const hagd::NumericError*>(&e) || dynamic_cast<const hagd::TrainingError*>(&e) ||
      dynamic_cast<const hagd::DomainError*>(&e))
    return 4;
  return 1;
}

const char* kind(int code) {
  switch (code) {
    case 2: return "config error";
    case 3: return "dependency error";
    case 4: return "numeric failure";
    default: return "error";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical attribution-graph circuit discovery pipeline"};
  app.fallthrough();
  app.require_subcommand(1);
  std::string config_path, out = "run";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "plain-text config (key = value); defaults apply to omitted keys");
  app.add_option("--seed", seed, "overrides the config seed");
  app.add_option("--out", out, "run directory")->capture_default_str();
  app.add_option("--stage-override", overrides, "key=value, applied after the config file")->take_all();
  auto* show = app.add_subcommand("show-config", "print the effective configuration");
  std::vector<std::pair<CLI::App*, hagd::Stage>> stages;
  for (hagd::Stage s : hagd::all_stages)
    stages.emplace_back(app.add_subcommand(hagd::to_string(s), "run the " + hagd::to_string(s) + " stage"), s);
  auto* run = app.add_subcommand("run", "run every stage in order");
  std::string target;
  run->add_option("target", target, "must be 'all'")->required()->check(CLI::IsMember({"all"}));
  auto* orphan_cmd = app.add_subcommand("orphans", "list files in the run directory the manifest does not reference");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 2;
  }

  try {
    hagd::RunConfig cfg = config_path.empty() ? hagd::RunConfig() : hagd::RunConfig::load(config_path);
    for (const auto& o : overrides) cfg.apply_override(o);
    if (seed) cfg.set("seed", std::to_string(*seed));
    if (*show) {
      std::cout << cfg.echo();
      return 0;
    }
    if (*orphan_cmd) {
      const auto files = hagd::orphans(out);
      for (const auto& f : files) std::cout << f << "\n";
      return files.empty() ? 0 : 1;
    }
    hagd::Pipeline p(cfg, out);
    if (*run) {
      p.run_all();
      return 0;
    }
    for (auto& [cmd, s] : stages)
      if (*cmd) p.run_stage(s);
    return 0;
  } catch (const std::exception& e) {
    const int code = exit_code(e);
    std::cerr << kind(code) << ": " << e.what() << "\n";
    return code;
  }
}
