#include "semamil/config.hpp"

#include "semamil/error.hpp"

#include <fstream>
#include <sstream>

namespace semamil::config {

using nlohmann::json;

void RunConfig::validate() const {
  data.validate();
  model.validate();
  train.validate();
  if (model.D_in != data.D) {
    throw ValidationError("model.D_in (" + std::to_string(model.D_in) +
                          ") must equal data.D (" + std::to_string(data.D) + ")");
  }
  if (model.n_classes != data.n_classes) {
    throw ValidationError("model.n_classes (" + std::to_string(model.n_classes) +
                          ") must equal data.n_classes (" + std::to_string(data.n_classes) + ")");
  }
}

json to_json(const bagdata::SynthConfig& c) {
  return json{{"n_bags", c.n_bags},
              {"n_classes", c.n_classes},
              {"L_min", c.L_min},
              {"L_max", c.L_max},
              {"D", c.D},
              {"n_clusters_true", c.n_clusters_true},
              {"signal_cluster_fraction", c.signal_cluster_fraction},
              {"noise_sigma", c.noise_sigma},
              {"grid_side", c.grid_side},
              {"seed", c.seed}};
}

bagdata::SynthConfig synth_config_from_json(const json& j, bagdata::SynthConfig c) {
  if (!j.is_object()) throw ValidationError("data config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "n_bags") c.n_bags = v.get<int>();
      else if (key == "n_classes") c.n_classes = v.get<int>();
      else if (key == "L_min") c.L_min = v.get<int>();
      else if (key == "L_max") c.L_max = v.get<int>();
      else if (key == "D") c.D = v.get<int>();
      else if (key == "n_clusters_true") c.n_clusters_true = v.get<int>();
      else if (key == "signal_cluster_fraction") c.signal_cluster_fraction = v.get<double>();
      else if (key == "noise_sigma") c.noise_sigma = v.get<double>();
      else if (key == "grid_side") c.grid_side = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw ValidationError("unknown key 'data." + key + "'");
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("data config: ") + e.what());
  }
  return c;
}

json to_json(const RunConfig& c) {
  return json{{"data", to_json(c.data)},
              {"model", model::to_json(c.model)},
              {"train", harness::to_json(c.train)}};
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "data") c.data = synth_config_from_json(v);
    else if (key == "model") c.model = model::model_config_from_json(v);
    else if (key == "train") c.train = harness::train_config_from_json(v);
    else throw ValidationError("unknown key '" + key + "'");
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& overrides) {
  json j = to_json(base);
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw ValidationError("override '" + o + "' is not of the form section.key=value");
    }
    const std::string section = o.substr(0, dot);
    const std::string key = o.substr(dot + 1, eq - dot - 1);
    const std::string text = o.substr(eq + 1);
    if (!j.contains(section)) throw ValidationError("unknown key '" + section + "'");
    if (!j[section].contains(key)) {
      throw ValidationError("unknown key '" + section + "." + key + "'");
    }
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    j[section][key] = value;
  }
  return run_config_from_json(j);
}

}  // namespace semamil::config
