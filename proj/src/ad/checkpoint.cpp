#include "qgvr/ad/checkpoint.hpp"

#include <fstream>
#include <set>

namespace qgvr::ad {

using nlohmann::json;

namespace {

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw CheckpointError("malformed checkpoint " + path.string() + ": " + e.what());
  }
  if (doc.value("format", "") != "qgvr-checkpoint") throw CheckpointError(path.string() + " is not a checkpoint");
  if (doc.value("version", 0) != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version in " + path.string());
  }
  return doc;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParameters& params, const AdamState* adam,
                     const json& metadata) {
  json doc;
  doc["format"] = "qgvr-checkpoint";
  doc["version"] = kCheckpointVersion;
  doc["metadata"] = metadata;
  json tensors = json::array();
  for (const auto& p : params.items()) {
    json entry;
    entry["name"] = p.name;
    entry["shape"] = p.tensor.shape();
    entry["init"] = p.init.describe();
    entry["values"] = std::vector<double>(p.tensor.values().begin(), p.tensor.values().end());
    if (adam) {
      const auto& mom = adam->moments.at(p.name);
      entry["adam_m"] = mom.first;
      entry["adam_v"] = mom.second;
    }
    tensors.push_back(std::move(entry));
  }
  doc["parameters"] = std::move(tensors);
  if (adam) {
    doc["optimizer"] = {{"step", adam->step},
                        {"alpha", adam->config.alpha},
                        {"beta1", adam->config.beta1},
                        {"beta2", adam->config.beta2},
                        {"epsilon", adam->config.epsilon}};
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
    out << doc.dump();
  }
  std::filesystem::rename(tmp, path);
}

json read_checkpoint_metadata(const std::filesystem::path& path) { return read_json(path).value("metadata", json::object()); }

json load_checkpoint(const std::filesystem::path& path, ModelParameters& params, AdamState* adam) {
  json doc = read_json(path);
  std::set<std::string> seen;
  const auto& tensors = doc.at("parameters");
  for (const auto& entry : tensors) {
    const auto name = entry.at("name").get<std::string>();
    if (!params.contains(name)) throw CheckpointError("checkpoint has unknown parameter " + name);
    auto& p = params.get(name);
    const auto shape = entry.at("shape").get<Shape>();
    if (shape != p.tensor.shape()) {
      throw CheckpointError("shape mismatch for " + name + ": file " + shape_str(shape) + ", model " +
                            shape_str(p.tensor.shape()));
    }
    const auto values = entry.at("values").get<std::vector<double>>();
    if (values.size() != p.tensor.size()) throw CheckpointError("value count mismatch for " + name);
    check_finite(name, values);
    std::copy(values.begin(), values.end(), p.tensor.mutable_values().begin());
    seen.insert(name);
  }
  for (const auto& p : params.items()) {
    if (!seen.count(p.name)) throw CheckpointError("checkpoint is missing parameter " + p.name);
  }
  if (adam && doc.contains("optimizer")) {
    const auto& opt = doc.at("optimizer");
    adam->step = opt.at("step").get<std::uint64_t>();
    adam->config = {opt.at("alpha").get<double>(), opt.at("beta1").get<double>(), opt.at("beta2").get<double>(),
                    opt.at("epsilon").get<double>()};
    adam->moments.clear();
    for (const auto& entry : tensors) {
      const auto name = entry.at("name").get<std::string>();
      AdamMoments mom{entry.at("adam_m").get<std::vector<double>>(), entry.at("adam_v").get<std::vector<double>>()};
      if (mom.first.size() != params.get(name).tensor.size() || mom.second.size() != mom.first.size()) {
        throw CheckpointError("optimizer moment shape mismatch for " + name);
      }
      adam->moments[name] = std::move(mom);
    }
  }
  return doc.value("metadata", json::object());
}

}  // namespace qgvr::ad
