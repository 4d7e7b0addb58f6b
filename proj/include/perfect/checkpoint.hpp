#pragma once

#include <optional>
#include <string>

#include <json.hpp>

#include "perfect/harness.hpp"

namespace perfect {

inline constexpr int kCheckpointVersion = 1;

// A model restored from disk together with what it needs to run.
struct LoadedModel {
  Model model;
  Vocab vocab;
  std::optional<PrototypeBank> prototypes;
};

// JSON container: model config, task info, vocabulary, every named tensor
// (label embeddings under "label_embedding") and the optional prototype bank
// under "prototypes". Doubles are written in shortest round-trip form, so a
// load reproduces every value bit for bit.
nlohmann::ordered_json checkpoint_json(const Model& model, const Vocab& vocab, const PrototypeBank* prototypes);
LoadedModel model_from_checkpoint(const nlohmann::json& doc);

void save_checkpoint(const std::string& path, const Model& model, const Vocab& vocab,
                     const PrototypeBank* prototypes = nullptr);
LoadedModel load_checkpoint(const std::string& path);

}  // namespace perfect
