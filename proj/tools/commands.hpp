#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace motionrag::cli {

struct Globals {
  std::uint64_t seed = 0;
  bool json = false;
};

// A registered subcommand: its parser node and the action run after parsing.
// Actions return a summary object printed as JSON or as key: value lines.
struct Command {
  CLI::App* app = nullptr;
  std::function<nlohmann::json()> run;
};

std::vector<Command> register_commands(CLI::App& app, const Globals& globals);

}  // namespace motionrag::cli
