#pragma once

// Checkpoint layout: <dir>/manifest.json plus one PMAT file per parameter.
//
// manifest.json:
//   format   "perft-checkpoint-v1"
//   config   the full experiment config (see config.hpp)
//   tensors  [{name, role, frozen, file, rows, cols}], in model parameter order

#include <filesystem>
#include <fstream>
#include <string>
#include <utility>

#include "perft/config.hpp"
#include "perft/pmat.hpp"

namespace perft {

inline constexpr const char* kCheckpointFormat = "perft-checkpoint-v1";

inline void save_checkpoint(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                            const Model& model) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["config"] = to_json(cfg);
  json tensors = json::array();
  for (const Parameter* p : model.parameters()) {
    const std::string file = p->name() + ".pmat";
    save_pmat(dir / file, p->value());
    json t;
    t["name"] = p->name();
    t["role"] = to_string(p->role());
    t["frozen"] = p->frozen();
    t["file"] = file;
    t["rows"] = p->value().rows();
    t["cols"] = p->value().cols();
    tensors.push_back(std::move(t));
  }
  manifest["tensors"] = std::move(tensors);
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  os << manifest.dump(2) << '\n';
}

struct LoadedCheckpoint {
  ExperimentConfig config;
  Model model;
};

/// Rebuilds the model from the stored config, then overwrites every tensor
/// from its PMAT file. Missing or mismatched tensors are errors.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) {
    throw ConfigError("checkpoint", "missing manifest.json in " + dir.string());
  }
  const json manifest = read_json_file(manifest_path);
  if (!manifest.contains("format") || manifest.at("format") != kCheckpointFormat) {
    throw ConfigError("checkpoint.format", "expected " + std::string(kCheckpointFormat));
  }
  LoadedCheckpoint ck;
  ck.config = parse_experiment(manifest.at("config"));
  ck.model = build_model(ck.config.model, ck.config.strategy, ck.config.task.kind,
                         Dataset{ck.config.task, {}, {}, {}}.output_dim(), ck.config.train.seed);
  std::map<std::string, Parameter*> by_name;
  for (Parameter* p : ck.model.parameters()) by_name[p->name()] = p;
  if (!manifest.contains("tensors") || manifest.at("tensors").size() != by_name.size()) {
    throw ConfigError("checkpoint.tensors", "tensor list does not match the configured model");
  }
  for (const auto& t : manifest.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError("checkpoint.tensors", "unexpected tensor " + name);
    Matrix m = load_pmat(dir / t.at("file").get<std::string>());
    if (!m.same_shape(it->second->value())) {
      throw ConfigError("checkpoint.tensors", name + " has shape " + m.shape_str() + ", expected " +
                                                  it->second->value().shape_str());
    }
    it->second->mutable_value() = std::move(m);
    it->second->set_frozen(t.at("frozen").get<bool>());
  }
  return ck;
}

}  // namespace perft
