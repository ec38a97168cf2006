#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "asha/common.hpp"
#include "asha/random.hpp"

namespace asha {

enum class DimensionKind { kLinear, kLog, kInteger, kCategorical };

inline std::string_view to_string(DimensionKind kind) {
  switch (kind) {
    case DimensionKind::kLinear: return "linear";
    case DimensionKind::kLog: return "log";
    case DimensionKind::kInteger: return "int";
    case DimensionKind::kCategorical: return "categorical";
  }
  return "?";
}

/// One searchable hyperparameter. Continuous kinds use [lower, upper];
/// integer kind samples lower..upper inclusive; categorical uses choices.
struct Dimension {
  std::string name;
  DimensionKind kind = DimensionKind::kLinear;
  double lower = 0.0;
  double upper = 1.0;
  std::vector<std::string> choices;

  static Dimension linear(std::string name, double lo, double hi) {
    return {std::move(name), DimensionKind::kLinear, lo, hi, {}};
  }
  static Dimension log(std::string name, double lo, double hi) {
    return {std::move(name), DimensionKind::kLog, lo, hi, {}};
  }
  static Dimension integer(std::string name, std::int64_t lo, std::int64_t hi) {
    return {std::move(name), DimensionKind::kInteger, static_cast<double>(lo),
            static_cast<double>(hi), {}};
  }
  static Dimension categorical(std::string name, std::vector<std::string> choices) {
    return {std::move(name), DimensionKind::kCategorical, 0.0, 0.0, std::move(choices)};
  }

  friend bool operator==(const Dimension&, const Dimension&) = default;
};

struct SearchSpace {
  std::vector<Dimension> dimensions;
  friend bool operator==(const SearchSpace&, const SearchSpace&) = default;
};

struct Violation {
  std::string dimension;
  std::string message;
  friend bool operator==(const Violation&, const Violation&) = default;
};

/// Every broken dimension invariant, in declaration order. Empty means valid.
inline std::vector<Violation> validate_space(const SearchSpace& space) {
  std::vector<Violation> out;
  std::set<std::string> seen;
  for (const auto& dim : space.dimensions) {
    if (dim.name.empty()) out.push_back({dim.name, "empty name"});
    if (!seen.insert(dim.name).second) out.push_back({dim.name, "duplicate name"});
    switch (dim.kind) {
      case DimensionKind::kCategorical:
        if (dim.choices.empty()) out.push_back({dim.name, "categorical requires at least one choice"});
        break;
      case DimensionKind::kLog:
        if (!(dim.lower > 0.0)) out.push_back({dim.name, "log scale requires positive lower bound"});
        [[fallthrough]];
      case DimensionKind::kLinear:
        if (!std::isfinite(dim.lower) || !std::isfinite(dim.upper)) {
          out.push_back({dim.name, "bounds must be finite"});
        } else if (!(dim.lower < dim.upper)) {
          out.push_back({dim.name, "lower bound must be less than upper bound"});
        }
        break;
      case DimensionKind::kInteger:
        if (dim.lower != std::floor(dim.lower) || dim.upper != std::floor(dim.upper)) {
          out.push_back({dim.name, "integer bounds must be whole numbers"});
        } else if (!(dim.lower < dim.upper)) {
          out.push_back({dim.name, "lower bound must be less than upper bound"});
        }
        break;
    }
  }
  return out;
}

using Value = std::variant<double, std::int64_t, std::string>;

/// Shortest text that parses back to the identical value.
inline std::string canonical(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

inline double parse_double(std::string_view text) {
  if (text == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (text == "inf") return std::numeric_limits<double>::infinity();
  if (text == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw std::invalid_argument("not a number: " + std::string(text));
  }
  return v;
}

inline std::string canonical(const Value& v) {
  if (const auto* d = std::get_if<double>(&v)) return canonical(*d);
  if (const auto* i = std::get_if<std::int64_t>(&v)) return std::to_string(*i);
  return std::get<std::string>(v);
}

struct Configuration {
  ConfigId config_id = 0;
  std::map<std::string, Value> values;
  std::uint64_t sample_seed = 0;
  friend bool operator==(const Configuration&, const Configuration&) = default;
};

/// Seed of the stream that produces configuration `config_id`.
inline std::uint64_t config_seed(std::uint64_t experiment_seed, ConfigId config_id) {
  return random::derive(experiment_seed, static_cast<std::uint64_t>(config_id));
}

/// Pure in (space, experiment_seed, config_id). Each dimension draws from its
/// own sub-stream keyed by position, so adding a trailing dimension never
/// changes the values of earlier ones.
inline Configuration sample(const SearchSpace& space, std::uint64_t experiment_seed,
                            ConfigId config_id) {
  if (auto v = validate_space(space); !v.empty()) {
    throw std::invalid_argument("sample: invalid search space: " + v.front().dimension + ": " +
                                v.front().message);
  }
  Configuration cfg;
  cfg.config_id = config_id;
  cfg.sample_seed = config_seed(experiment_seed, config_id);
  for (std::size_t i = 0; i < space.dimensions.size(); ++i) {
    const auto& dim = space.dimensions[i];
    random::Stream stream(random::derive(cfg.sample_seed, i));
    switch (dim.kind) {
      case DimensionKind::kLinear: {
        const double x = dim.lower + (dim.upper - dim.lower) * stream.uniform();
        cfg.values[dim.name] = std::min(x, dim.upper);
        break;
      }
      case DimensionKind::kLog: {
        const double lo = std::log(dim.lower), hi = std::log(dim.upper);
        const double x = std::exp(lo + (hi - lo) * stream.uniform());
        cfg.values[dim.name] = std::clamp(x, dim.lower, dim.upper);
        break;
      }
      case DimensionKind::kInteger: {
        const auto lo = static_cast<std::int64_t>(dim.lower);
        const auto span = static_cast<std::uint64_t>(static_cast<std::int64_t>(dim.upper) - lo) + 1;
        cfg.values[dim.name] = lo + static_cast<std::int64_t>(stream.below(span));
        break;
      }
      case DimensionKind::kCategorical:
        cfg.values[dim.name] = dim.choices[stream.below(dim.choices.size())];
        break;
    }
  }
  return cfg;
}

}  // namespace asha
