#pragma once

// One JSON file holding the data, model and training sections, with dotted
// command-line overrides such as "model.d=16". Unknown keys are rejected.

#include "semamil/bagdata.hpp"
#include "semamil/harness.hpp"
#include "semamil/model.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace semamil::config {

struct RunConfig {
  bagdata::SynthConfig data;
  model::ModelConfig model;
  harness::TrainConfig train;

  /// Section validity plus cross-section consistency (widths, class count).
  void validate() const;
};

nlohmann::json to_json(const bagdata::SynthConfig& c);
bagdata::SynthConfig synth_config_from_json(const nlohmann::json& j,
                                            bagdata::SynthConfig base = {});

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Reads and parses a config file. Throws IoError when unreadable and
/// ValidationError on bad content.
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies "section.key=value" overrides. The value is parsed as JSON when
/// possible and taken as a string otherwise.
RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& overrides);

}  // namespace semamil::config
