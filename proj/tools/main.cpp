#include <CLI11.hpp>
#include <json.hpp>

#include <exception>
#include <filesystem>
#include <iostream>
#include <new>

#include "commands.hpp"
#include "motionrag/error.hpp"

namespace {

constexpr const char* kDescription =
    "Music-driven dance synthesis: motion graph retrieval (stage 1: build-graph, prune,\n"
    "train-contrastive, generate) followed by diffusion refinement (stage 2:\n"
    "train-diffusion, refine), with synth-corpus, stats and evaluate utilities.";

void print_summary(const nlohmann::json& summary, bool as_json) {
  if (as_json) {
    std::cout << summary.dump() << "\n";
    return;
  }
  for (const auto& [key, value] : summary.items()) {
    std::cout << key << ": " << (value.is_string() ? value.get<std::string>() : value.dump()) << "\n";
  }
}

int report_error(int code, const std::string& kind, const std::string& message, bool as_json) {
  if (as_json) {
    std::cout << nlohmann::json{{"error", message}, {"kind", kind}, {"exit_code", code}}.dump() << "\n";
  }
  std::cerr << "error (" << kind << "): " << message << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app(kDescription, "motionrag");
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML-style config file; command-line flags take precedence");
  motionrag::cli::Globals globals;
  app.add_option("--seed", globals.seed, "Global seed propagated to every stage")->capture_default_str();
  app.add_flag("--json", globals.json, "Machine-readable stdout");

  const auto commands = motionrag::cli::register_commands(app, globals);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(motionrag::ErrorCode::usage);
  }

  try {
    for (const auto& cmd : commands) {
      if (cmd.app->parsed()) {
        print_summary(cmd.run(), globals.json);
        return 0;
      }
    }
    return report_error(2, "usage", "no command given", globals.json);
  } catch (const motionrag::Error& e) {
    return report_error(static_cast<int>(e.code()), motionrag::to_string(e.code()), e.what(), globals.json);
  } catch (const std::filesystem::filesystem_error& e) {
    return report_error(3, "data", e.what(), globals.json);
  } catch (const nlohmann::json::exception& e) {
    return report_error(3, "data", e.what(), globals.json);
  } catch (const std::bad_alloc&) {
    return report_error(5, "numeric", "out of memory", globals.json);
  } catch (const std::exception& e) {
    return report_error(4, "invariant", e.what(), globals.json);
  }
}
