#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "mct/model.hpp"
#include "mct/training.hpp"

namespace mct {

struct RunPaths {
  std::string features;
  std::string captions;
  std::string splits;
  std::string checkpoint;
  std::string vocab;  // optional; built from the training captions when empty
};

/// One JSON document describing a run. Sections: "mode", "encoder",
/// "decoder", "elmo", "train", "paths". Missing keys keep their defaults;
/// unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  RunPaths paths;
  std::size_t min_count = 5;  // vocabulary frequency cut-off

  /// Full-size widths and default optimizer settings.
  static RunConfig full_scale();
  /// Desk widths with the toy optimizer settings.
  static RunConfig toy();
  void validate() const;
};

nlohmann::json to_json(const EncoderConfig& c);
nlohmann::json to_json(const DecoderConfig& c);
nlohmann::json to_json(const ElmoConfig& c);
nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const RunConfig& c);

/// Each parser starts from `base` and overwrites the keys present in `j`.
EncoderConfig encoder_config_from_json(const nlohmann::json& j, EncoderConfig base = {});
DecoderConfig decoder_config_from_json(const nlohmann::json& j, DecoderConfig base = {});
ElmoConfig elmo_config_from_json(const nlohmann::json& j, ElmoConfig base = {});
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
/// Validates the result (cross-field checks included).
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = RunConfig::toy());

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = RunConfig::toy());
void save_run_config(const RunConfig& config, const std::filesystem::path& path);

}  // namespace mct
