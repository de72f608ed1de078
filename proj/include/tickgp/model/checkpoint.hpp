#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "tickgp/core/parameters.hpp"

namespace tickgp {

inline constexpr int kCheckpointFormatVersion = 1;

/// Parameter archive: unconstrained values by name, plus the run's resolved configuration.
struct Checkpoint {
  int format_version = kCheckpointFormatVersion;
  std::size_t step = 0;
  std::string config;
  std::map<std::string, std::string> metadata;
  std::map<std::string, std::pair<Transform, Tensor>> params;
};

inline Checkpoint make_checkpoint(const ParameterStore& ps, std::size_t step, std::string config = {}) {
  Checkpoint c;
  c.step = step;
  c.config = std::move(config);
  for (const auto& [name, p] : ps.entries()) c.params.emplace(name, std::make_pair(p.transform, p.raw.value()));
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  nlohmann::json j;
  j["format_version"] = c.format_version;
  j["step"] = c.step;
  j["config"] = c.config;
  j["metadata"] = c.metadata;
  auto& arr = j["params"] = nlohmann::json::array();
  for (const auto& [name, tv] : c.params)
    arr.push_back({{"name", name},
                   {"transform", transform_name(tv.first)},
                   {"shape", tv.second.shape()},
                   {"values", tv.second.to_vector()}});
  if (auto dir = std::filesystem::path(path).parent_path(); !dir.empty()) std::filesystem::create_directories(dir);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot write checkpoint '" + path + "'");
    out << j.dump(1) << '\n';
    if (!out) throw DataError("failed writing checkpoint '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  Checkpoint c;
  try {
    nlohmann::json j = nlohmann::json::parse(in);
    c.format_version = j.at("format_version").get<int>();
    if (c.format_version != kCheckpointFormatVersion)
      throw DataError("checkpoint '" + path + "' has format version " + std::to_string(c.format_version) +
                      ", expected " + std::to_string(kCheckpointFormatVersion));
    c.step = j.at("step").get<std::size_t>();
    c.config = j.value("config", std::string{});
    if (j.contains("metadata")) c.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
    for (const auto& e : j.at("params")) {
      Shape shape = e.at("shape").get<Shape>();
      auto values = e.at("values").get<std::vector<double>>();
      if (values.size() != shape_size(shape))
        throw DataError("checkpoint parameter '" + e.at("name").get<std::string>() + "' has " +
                        std::to_string(values.size()) + " values for shape " + shape_string(shape));
      c.params.emplace(e.at("name").get<std::string>(),
                       std::make_pair(parse_transform(e.at("transform").get<std::string>()),
                                      Tensor(std::move(shape), std::move(values))));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint '" + path + "': " + e.what());
  }
  return c;
}

/// Loads every parameter of `c` into `ps`. Names, transforms and shapes must match exactly.
inline void apply_checkpoint(const Checkpoint& c, ParameterStore& ps) {
  for (const auto& name : ps.names())
    if (!c.params.count(name)) throw DataError("checkpoint lacks parameter '" + name + "'");
  for (const auto& [name, tv] : c.params) {
    if (!ps.contains(name)) throw DataError("checkpoint has unknown parameter '" + name + "'");
    const auto& e = ps.entry(name);
    if (e.transform != tv.first)
      throw DataError("parameter '" + name + "' transform " + transform_name(tv.first) + " != model's " +
                      transform_name(e.transform));
    if (e.raw.shape() != tv.second.shape())
      throw DataError("parameter '" + name + "' shape " + shape_string(tv.second.shape()) + " != model's " +
                      shape_string(e.raw.shape()));
    ps.set_raw(name, tv.second);
  }
}

}  // namespace tickgp
