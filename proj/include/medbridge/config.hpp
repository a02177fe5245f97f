#pragma once

#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "medbridge/focal.hpp"
#include "medbridge/model.hpp"

namespace medbridge {

struct ExpertConfig {
  std::string id;
  std::uint64_t seed = 0;   // synthetic-weight seed, used when no archive is given
  std::string weights;      // optional archive path
  BackboneSpec spec;        // expert_id mirrors id
};

struct TextConfig {
  std::uint64_t seed = 7;
  std::string weights;
  TextEncoderSpec spec;
};

struct TrainConfig {
  double learning_rate = 5e-4;
  int batch_size = 16;
  int epochs = 3;
  double weight_decay = 0.01;
  double clip_norm = 1.0;    // global-norm gradient clip; zero or negative disables
  double data_fraction = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RunConfig {
  std::vector<ExpertConfig> experts;
  TextConfig text;
  FocalConfig focal;
  ModelConfig model;
  TrainConfig train;

  void validate() const;
  // Restricts the expert list to the named subset, keeping config order.
  RunConfig with_experts(const std::vector<std::string>& ids) const;
};

// Two synthetic experts plus a frozen text tower; the starting point for
// files and overrides.
RunConfig default_config();
nlohmann::json config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::string& path);

// Applies one `key=value` override onto the JSON form. Keys are dotted paths
// ("model.alpha", "experts.0.seed"); an unqualified leaf name is accepted
// when it occurs exactly once in the schema ("alpha" -> "model.alpha").
void apply_override(nlohmann::json& cfg, const std::string& assignment);

std::uint64_t config_hash(const RunConfig& cfg);

std::unique_ptr<AdaptationModel> build_model(const RunConfig& cfg);

}  // namespace medbridge
