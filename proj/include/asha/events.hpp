#pragma once

#include <bit>
#include <cstdint>
#include <string>
#include <string_view>
#include <variant>

#include "asha/common.hpp"

namespace asha {

// Every state change of an experiment is one of these. The live engine plans
// a list of payloads, journals them, then applies them; replay applies the
// same list, so the two paths cannot diverge.

struct ExperimentCreated {
  std::string spec;  // canonical JSON of the experiment spec
  friend bool operator==(const ExperimentCreated&, const ExperimentCreated&) = default;
};

struct ConfigSampled {
  ConfigId config_id = 0;
  int bracket = 0;
  std::uint64_t sample_seed = 0;
  friend bool operator==(const ConfigSampled&, const ConfigSampled&) = default;
};

/// The sequence number of this event is the trial token.
struct JobDispatched {
  ConfigId config_id = 0;
  int bracket = 0;
  int rung = 0;
  std::string worker;
  friend bool operator==(const JobDispatched&, const JobDispatched&) = default;
};

struct ResultRecorded {
  std::int64_t token = 0;
  ConfigId config_id = 0;
  int bracket = 0;
  int rung = 0;
  double loss = 0.0;
  std::string checkpoint;
  friend bool operator==(const ResultRecorded& a, const ResultRecorded& b) {
    // Bitwise loss comparison so inf == inf and replay equality is exact.
    return a.token == b.token && a.config_id == b.config_id && a.bracket == b.bracket &&
           a.rung == b.rung && std::bit_cast<std::uint64_t>(a.loss) == std::bit_cast<std::uint64_t>(b.loss) &&
           a.checkpoint == b.checkpoint;
  }
};

struct ConfigPromoted {
  ConfigId config_id = 0;
  int bracket = 0;
  int from_rung = 0;
  friend bool operator==(const ConfigPromoted&, const ConfigPromoted&) = default;
};

struct JobDropped {
  std::int64_t token = 0;
  ConfigId config_id = 0;
  int bracket = 0;
  int rung = 0;
  friend bool operator==(const JobDropped&, const JobDropped&) = default;
};

/// Widens bracket `bracket` by `additional` rung-0 configs. When `bracket`
/// equals the current bracket count a new bracket with rate `s` is opened.
struct WidthExtended {
  int bracket = 0;
  int s = 0;
  std::int64_t additional = 0;
  friend bool operator==(const WidthExtended&, const WidthExtended&) = default;
};

using EventPayload = std::variant<ExperimentCreated, ConfigSampled, JobDispatched, ResultRecorded,
                                  ConfigPromoted, JobDropped, WidthExtended>;

struct Event {
  std::int64_t seq = 0;
  std::int64_t timestamp = 0;
  EventPayload payload;
  friend bool operator==(const Event&, const Event&) = default;
};

inline std::string_view kind_name(const EventPayload& p) {
  static constexpr std::string_view kNames[] = {"experiment-created", "config-sampled",
                                                "job-dispatched",     "result-recorded",
                                                "config-promoted",    "job-dropped",
                                                "width-extended"};
  return kNames[p.index()];
}

}  // namespace asha
