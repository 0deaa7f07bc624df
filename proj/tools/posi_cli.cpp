// posi: command-line front end for interval constants, exact nested-model
// coverage, staged Monte Carlo coverage searches and the zero-restriction check.

#include "posi/posi.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <map>
#include <string>

int main(int argc, char** argv) {
  CLI::App app{"Post-selection confidence interval constants and coverage", "posi"};
  app.require_subcommand(1);
  std::string config_path;
  bool dump_config = false;
  app.add_option("--config", config_path, "INI run configuration; command-line flags override it");
  app.add_flag("--dump-config", dump_config, "print the effective configuration and exit");

  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  for (const auto& f : posi::config_fields()) {
    if (f.key == "command") continue;
    options[f.key] = app.add_option("--" + f.key, values[f.key], f.help + " [" + f.section + "]");
  }
  for (const char* name : {"constants", "exact", "search", "validate-appendix"}) app.add_subcommand(name)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(posi::ErrorCode::usage);
  }

  try {
    posi::RunConfig cfg;
    if (!config_path.empty()) cfg = posi::load_config_file(config_path);
    for (const auto& [key, opt] : options)
      if (opt->count() > 0) posi::config_field(key).set(cfg, values[key]);
    cfg.command = app.get_subcommands().front()->get_name();
    if (dump_config) {
      std::cout << posi::serialize_config(cfg);
      return 0;
    }
    const posi::CsvTable table = posi::run(cfg);
    posi::emit(cfg, posi::render_csv(cfg, table));
    return 0;
  } catch (const posi::Error& e) {
    std::cerr << "posi: " << posi::to_string(e.code()) << " error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "posi: internal error: " << e.what() << "\n";
    return 1;
  }
}
