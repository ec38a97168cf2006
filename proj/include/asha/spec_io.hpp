#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "asha/orchestrator.hpp"
#include "asha/search_space.hpp"

// JSON documents for search spaces and experiment specs.
//
//   {
//     "space": {"dimensions": [
//       {"name": "lr", "kind": "log", "lower": 1e-4, "upper": 0.1},
//       {"name": "layers", "kind": "int", "lower": 1, "upper": 8},
//       {"name": "optimizer", "kind": "categorical", "choices": ["sgd", "adam"]}]},
//     "n": 100,
//     "R": 256,
//     "mode": "async-hyperband",      optional
//     "eta": 4,                        optional
//     "r": 1,                          optional, defaults to ceil(R / eta^4)
//     "brackets": "standard",          optional; or "aggressive", "conservative", [0, 1]
//     "seed": 0,                       optional
//     "incremental_training": false,   optional
//     "infinite_horizon": false,       optional
//     "unbounded": false               optional
//   }

namespace asha {

class SpecError : public std::runtime_error {
 public:
  explicit SpecError(std::vector<FieldError> errors)
      : std::runtime_error(summary(errors)), errors_(std::move(errors)) {}
  const std::vector<FieldError>& errors() const { return errors_; }

 private:
  static std::string summary(const std::vector<FieldError>& errors) {
    std::string s = "invalid spec";
    for (const auto& e : errors) s += "; " + e.field + ": " + e.message;
    return s;
  }
  std::vector<FieldError> errors_;
};

namespace io {

using nlohmann::json;

inline DimensionKind parse_kind(const std::string& s) {
  if (s == "linear" || s == "continuous-linear" || s == "uniform") return DimensionKind::kLinear;
  if (s == "log" || s == "continuous-log" || s == "log-uniform") return DimensionKind::kLog;
  if (s == "int" || s == "integer" || s == "integer-range") return DimensionKind::kInteger;
  if (s == "categorical" || s == "choice") return DimensionKind::kCategorical;
  throw std::invalid_argument("unknown dimension kind '" + s + "'");
}

inline json to_json(const SearchSpace& space) {
  json dims = json::array();
  for (const auto& d : space.dimensions) {
    json j = {{"name", d.name}, {"kind", std::string(to_string(d.kind))}};
    if (d.kind == DimensionKind::kCategorical) {
      j["choices"] = d.choices;
    } else if (d.kind == DimensionKind::kInteger) {
      j["lower"] = static_cast<std::int64_t>(d.lower);
      j["upper"] = static_cast<std::int64_t>(d.upper);
    } else {
      j["lower"] = d.lower;
      j["upper"] = d.upper;
    }
    dims.push_back(std::move(j));
  }
  return {{"dimensions", dims}};
}

/// Collects every field problem instead of stopping at the first.
inline SearchSpace parse_space(const json& j, std::vector<FieldError>& errors, const std::string& prefix = "space") {
  SearchSpace space;
  if (!j.is_object() || !j.contains("dimensions") || !j["dimensions"].is_array()) {
    errors.push_back({prefix + ".dimensions", "must be an array"});
    return space;
  }
  std::size_t i = 0;
  for (const auto& d : j["dimensions"]) {
    const std::string where = prefix + ".dimensions[" + std::to_string(i++) + "]";
    Dimension dim;
    try {
      dim.name = d.at("name").get<std::string>();
      dim.kind = parse_kind(d.at("kind").get<std::string>());
      if (dim.kind == DimensionKind::kCategorical) {
        dim.upper = 0.0;
        for (const auto& c : d.at("choices")) dim.choices.push_back(c.is_string() ? c.get<std::string>() : c.dump());
      } else {
        dim.lower = d.at("lower").get<double>();
        dim.upper = d.at("upper").get<double>();
      }
    } catch (const std::exception& e) {
      errors.push_back({where, e.what()});
      continue;
    }
    space.dimensions.push_back(std::move(dim));
  }
  for (const auto& v : validate_space(space)) errors.push_back({prefix + "." + v.dimension, v.message});
  return space;
}

inline SearchSpace parse_space(const json& j) {
  std::vector<FieldError> errors;
  auto space = parse_space(j, errors);
  if (!errors.empty()) throw SpecError(errors);
  return space;
}

inline Mode parse_mode(const std::string& s) {
  if (s == "sync-sha") return Mode::kSyncSha;
  if (s == "asha") return Mode::kAsha;
  if (s == "sync-hyperband") return Mode::kSyncHyperband;
  if (s == "async-hyperband") return Mode::kAsyncHyperband;
  throw std::invalid_argument("unknown mode '" + s + "'");
}

inline json to_json(const ExperimentSpec& spec) {
  json j;
  j["space"] = to_json(spec.space);
  j["mode"] = std::string(to_string(spec.mode));
  j["R"] = spec.max_resource;
  if (spec.min_resource) j["r"] = *spec.min_resource;
  j["eta"] = spec.eta;
  switch (spec.bracket_set) {
    case BracketSet::kStandard: j["brackets"] = "standard"; break;
    case BracketSet::kAggressive: j["brackets"] = "aggressive"; break;
    case BracketSet::kConservative: j["brackets"] = "conservative"; break;
    case BracketSet::kExplicit: j["brackets"] = spec.brackets; break;
  }
  j["n"] = spec.n;
  j["seed"] = spec.seed;
  j["incremental_training"] = spec.incremental_training;
  j["infinite_horizon"] = spec.infinite_horizon;
  j["unbounded"] = spec.unbounded;
  return j;
}

/// Parses and validates; throws SpecError listing every bad field.
inline ExperimentSpec parse_spec(const json& j) {
  std::vector<FieldError> errors;
  ExperimentSpec spec;
  if (!j.is_object()) throw SpecError(std::vector<FieldError>{{"", "spec must be a JSON object"}});
  auto field = [&](const char* name, auto&& fn) {
    if (!j.contains(name)) return;
    try {
      fn(j.at(name));
    } catch (const std::exception& e) {
      errors.push_back({name, e.what()});
    }
  };
  if (!j.contains("space")) errors.push_back({"space", "required"});
  else spec.space = parse_space(j["space"], errors);
  if (!j.contains("n")) errors.push_back({"n", "required"});
  if (!j.contains("R")) errors.push_back({"R", "required"});
  field("n", [&](const json& v) { spec.n = v.get<std::int64_t>(); });
  field("R", [&](const json& v) { spec.max_resource = v.get<std::int64_t>(); });
  field("r", [&](const json& v) { spec.min_resource = v.get<std::int64_t>(); });
  field("eta", [&](const json& v) { spec.eta = v.get<int>(); });
  field("mode", [&](const json& v) { spec.mode = parse_mode(v.get<std::string>()); });
  field("seed", [&](const json& v) { spec.seed = v.get<std::uint64_t>(); });
  field("incremental_training", [&](const json& v) { spec.incremental_training = v.get<bool>(); });
  field("infinite_horizon", [&](const json& v) { spec.infinite_horizon = v.get<bool>(); });
  field("unbounded", [&](const json& v) { spec.unbounded = v.get<bool>(); });
  field("brackets", [&](const json& v) {
    if (v.is_array()) {
      spec.bracket_set = BracketSet::kExplicit;
      spec.brackets = v.get<std::vector<int>>();
      return;
    }
    const auto name = v.get<std::string>();
    if (name == "standard") spec.bracket_set = BracketSet::kStandard;
    else if (name == "aggressive") spec.bracket_set = BracketSet::kAggressive;
    else if (name == "conservative") spec.bracket_set = BracketSet::kConservative;
    else throw std::invalid_argument("unknown bracket set '" + name + "'");
  });
  if (errors.empty()) errors = validate_spec(spec);
  if (!errors.empty()) throw SpecError(errors);
  return spec;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return json::parse(in);
}

inline json to_json(const Configuration& cfg) {
  json values = json::object();
  for (const auto& [name, v] : cfg.values) {
    std::visit([&](const auto& x) { values[name] = x; }, v);
  }
  return {{"config_id", cfg.config_id}, {"values", values}, {"sample_seed", cfg.sample_seed}};
}

}  // namespace io
}  // namespace asha
