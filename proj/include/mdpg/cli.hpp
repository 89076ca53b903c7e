#pragma once

// Command-line driver. A run is described by one JSON document (defaults, then
// `--config file.json`, then per-field flags such as `--backbone.epochs 5`).

#include <json.hpp>

#include <exception>
#include <iostream>
#include <string>
#include <vector>

namespace mdpg {

/// Every accepted key with its default value.
nlohmann::json default_run_config();

/// Overlays `patch` onto `base`. Keys absent from `base` and values whose type differs
/// from the default's are rejected with ConfigError.
void merge_config(nlohmann::json& base, const nlohmann::json& patch, const std::string& where = "");

/// Dotted paths of all leaves ("backbone.epochs", ...), in document order.
std::vector<std::string> config_leaves(const nlohmann::json& cfg);

/// Range and enum checks over a merged document; throws ConfigError.
void validate_run_config(const nlohmann::json& cfg);

/// 0 success, 2 configuration error, 3 missing or unreadable checkpoint, 1 anything else.
int exit_code_for(const std::exception& e);

/// Entry point; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace mdpg
