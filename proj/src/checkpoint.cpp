#include "perfect/checkpoint.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "perfect/errors.hpp"

namespace perfect {

using ojson = nlohmann::ordered_json;
using json = nlohmann::json;

namespace {

ojson finite_array(std::span<const double> values, const std::string& name) {
  ojson out = ojson::array();
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("checkpoint: tensor '" + name + "' holds a non-finite value");
    out.push_back(v);
  }
  return out;
}

std::vector<double> read_values(const json& j, std::size_t expected, const std::string& name) {
  auto values = j.get<std::vector<double>>();
  if (values.size() != expected) {
    throw InputError("checkpoint: tensor '" + name + "' has " + std::to_string(values.size()) + " values, expected " +
                     std::to_string(expected));
  }
  return values;
}

}  // namespace

ojson checkpoint_json(const Model& model, const Vocab& vocab, const PrototypeBank* prototypes) {
  ojson doc;
  doc["format"] = "perfect-checkpoint";
  doc["version"] = kCheckpointVersion;
  doc["model"] = model_config_to_json(model.config());

  const auto& task = model.task();
  ojson t;
  t["classes"] = task.classes;
  t["pair"] = task.pair;
  t["label_names"] = task.label_names;
  if (task.verbalizers) {
    t["verbalizers"] = task.verbalizers->tokens;
    t["verbalizer_names"] = task.verbalizers->class_names;
  }
  doc["task"] = t;

  ojson tokens = ojson::array();
  for (std::size_t i = Vocab::kSpecialCount; i < vocab.size(); ++i) tokens.push_back(vocab.token(static_cast<TokenId>(i)));
  doc["vocab"] = tokens;

  ojson tensors = ojson::array();
  for (const auto& p : model.parameters()) {
    tensors.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"values", finite_array(p.tensor.values(), p.name)}});
  }
  doc["tensors"] = tensors;

  if (prototypes) {
    doc["prototypes"] = {{"slots", prototypes->slots},
                         {"classes", prototypes->classes},
                         {"hidden", prototypes->hidden},
                         {"counts", prototypes->counts},
                         {"centroids", finite_array(prototypes->centroids, "prototypes")}};
  }
  return doc;
}

LoadedModel model_from_checkpoint(const json& doc) {
  try {
    if (doc.value("format", "") != "perfect-checkpoint") throw InputError("checkpoint: not a checkpoint file");
    if (doc.at("version").get<int>() != kCheckpointVersion) {
      throw InputError("checkpoint: unsupported version " + doc.at("version").dump());
    }
    const auto config = model_config_from_json(doc.at("model"));
    const auto vocab = Vocab::from_tokens(doc.at("vocab").get<std::vector<std::string>>());

    const auto& t = doc.at("task");
    TaskInfo task;
    task.classes = t.at("classes").get<std::size_t>();
    task.pair = t.at("pair").get<bool>();
    task.label_names = t.at("label_names").get<std::vector<std::string>>();
    if (t.contains("verbalizers")) {
      VerbalizerMap map;
      map.tokens = t.at("verbalizers").get<std::vector<std::vector<TokenId>>>();
      map.class_names = t.at("verbalizer_names").get<std::vector<std::string>>();
      task.verbalizers = std::move(map);
    }

    LoadedModel out{Model(config, task, vocab, 0), vocab, std::nullopt};
    std::size_t restored = 0;
    for (const auto& entry : doc.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      auto& store = out.model.heads().contains(name) ? out.model.heads() : out.model.encoder().params();
      if (!store.contains(name)) throw InputError("checkpoint: unknown tensor '" + name + "'");
      auto& tensor = store.get(name);
      if (entry.at("shape").get<std::vector<std::size_t>>() != tensor.shape()) {
        throw InputError("checkpoint: tensor '" + name + "' has the wrong shape");
      }
      const auto values = read_values(entry.at("values"), tensor.size(), name);
      auto dst = tensor.mutable_values();
      std::copy(values.begin(), values.end(), dst.begin());
      ++restored;
    }
    if (restored != out.model.parameters().size()) {
      throw InputError("checkpoint: " + std::to_string(restored) + " tensors for a model with " +
                       std::to_string(out.model.parameters().size()));
    }

    if (doc.contains("prototypes")) {
      const auto& p = doc.at("prototypes");
      PrototypeBank bank;
      bank.slots = p.at("slots").get<std::size_t>();
      bank.classes = p.at("classes").get<std::size_t>();
      bank.hidden = p.at("hidden").get<std::size_t>();
      bank.counts = p.at("counts").get<std::vector<std::size_t>>();
      bank.centroids = read_values(p.at("centroids"), bank.slots * bank.classes * bank.hidden, "prototypes");
      out.prototypes = std::move(bank);
    }
    return out;
  } catch (const json::exception& e) {
    throw InputError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::string& path, const Model& model, const Vocab& vocab,
                     const PrototypeBank* prototypes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out << checkpoint_json(model, vocab, prototypes).dump() << '\n';
  if (!out) throw IoError("write failed for checkpoint '" + path + "'");
}

LoadedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  json doc;
  try {
    doc = json::parse(buffer.str());
  } catch (const json::exception& e) {
    throw InputError("checkpoint '" + path + "': " + e.what());
  }
  return model_from_checkpoint(doc);
}

}  // namespace perfect
