// efl: staged pipeline driver.
//
//   efl <stage> --config run.cfg [--seed n] [--override key=value]...
//   efl generate --config run.cfg --frame x.ppm --action "open drawer" --action "close drawer"

#include "efl/pipeline/stages.hpp"

#include <CLI11.hpp>

#include <functional>
#include <iostream>

namespace {

using efl::pipeline::RunConfig;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string frame;
  std::vector<std::string> actions;
  std::string probe_out;
};

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "flat key = value config file")->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "overrides the seed in the config file");
  sub->add_option("--override", o.overrides, "key=value, applied after the config file (repeatable)")
      ->take_all()
      ->allow_extra_args(false);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"efl: egocentric action frame generation pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", efl::pipeline::code_version());
  Options o;

  using Cmd = std::function<void(const RunConfig&, std::ostream&)>;
  const std::vector<std::pair<std::string, Cmd>> stages = {
      {"synthesize", efl::pipeline::cmd_synthesize},
      {"preprocess", efl::pipeline::cmd_preprocess},
      {"curate", efl::pipeline::cmd_curate},
      {"train-vllm", efl::pipeline::cmd_train_vllm},
      {"train-ldm", efl::pipeline::cmd_train_ldm},
      {"generate", efl::pipeline::cmd_generate},
      {"evaluate", efl::pipeline::cmd_evaluate},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, fn] : stages) {
    auto* sub = app.add_subcommand(name);
    add_common(sub, o);
    subs[name] = sub;
  }
  subs["generate"]->add_option("--frame", o.frame, "probe mode: input frame (PPM)");
  subs["generate"]->add_option("--action", o.actions, "probe mode: action prompt (repeatable)");
  subs["generate"]->add_option("--probe-out", o.probe_out, "probe output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : efl::pipeline::kConfigError;
  }

  try {
    const RunConfig cfg = efl::pipeline::load_run_config(o.config, o.overrides, o.seed);
    efl::pipeline::WorkDirLock lock(cfg.work_dir);
    for (const auto& [name, fn] : stages) {
      if (!subs[name]->parsed()) continue;
      if (name == "generate" && (!o.frame.empty() || !o.actions.empty())) {
        EFL_CHECK(!o.frame.empty() && !o.actions.empty(), efl::Errc::config,
                  "probe mode needs both --frame and at least one --action");
        efl::pipeline::cmd_generate_probe(cfg, {o.frame, o.actions, o.probe_out}, std::cout);
      } else {
        fn(cfg, std::cout);
      }
    }
  } catch (const efl::Error& e) {
    std::cerr << "efl: " << e.what() << "\n";
    return efl::pipeline::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "efl: " << e.what() << "\n";
    return efl::pipeline::kFailure;
  }
  return efl::pipeline::kOk;
}
