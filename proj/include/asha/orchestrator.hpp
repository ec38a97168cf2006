#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "asha/bracket.hpp"
#include "asha/common.hpp"
#include "asha/events.hpp"
#include "asha/search_space.hpp"

namespace asha {

enum class Mode { kSyncSha, kAsha, kSyncHyperband, kAsyncHyperband };
enum class BracketSet { kStandard, kAggressive, kConservative, kExplicit };

inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::kSyncSha: return "sync-sha";
    case Mode::kAsha: return "asha";
    case Mode::kSyncHyperband: return "sync-hyperband";
    case Mode::kAsyncHyperband: return "async-hyperband";
  }
  return "?";
}

inline bool is_synchronous(Mode m) { return m == Mode::kSyncSha || m == Mode::kSyncHyperband; }

/// What a user asks for. Only space, n and R are required; everything else
/// has a production default.
struct ExperimentSpec {
  SearchSpace space;
  Mode mode = Mode::kAsyncHyperband;
  Resource max_resource = 1;                // R
  std::optional<Resource> min_resource;     // r; derived from R when absent
  int eta = 4;
  BracketSet bracket_set = BracketSet::kStandard;
  std::vector<int> brackets;                // used when bracket_set == kExplicit
  std::int64_t n = 1;
  std::uint64_t seed = 0;
  bool incremental_training = false;
  bool infinite_horizon = false;
  // Ignore n: asynchronous brackets grow without limit and synchronous
  // brackets are reopened whenever no existing bracket has work.
  bool unbounded = false;

  friend bool operator==(const ExperimentSpec&, const ExperimentSpec&) = default;
};

inline constexpr int kDefaultEta = 4;
inline constexpr int kDefaultRungs = 5;

/// r = R / eta^4 rounded up, at least 1.
inline Resource derived_min_resource(Resource max_resource, int eta) {
  const Resource div = checked_pow(eta, kDefaultRungs - 1);
  return std::max<Resource>(1, (max_resource + div - 1) / div);
}

inline std::vector<int> bracket_rates(BracketSet set, int s_max, const std::vector<int>& explicit_set = {}) {
  std::vector<int> out;
  switch (set) {
    case BracketSet::kStandard: out = {0, 1, 2}; break;
    case BracketSet::kAggressive: out = {0}; break;
    case BracketSet::kConservative: out = {0, 1, 2, 3, 4}; break;
    case BracketSet::kExplicit: {
      out = explicit_set;
      std::sort(out.begin(), out.end());
      out.erase(std::unique(out.begin(), out.end()), out.end());
      return out;
    }
  }
  std::erase_if(out, [&](int s) { return s > s_max; });
  return out;
}

struct Defaults {
  int eta;
  Resource min_resource;
  std::vector<int> brackets;
};

inline Defaults default_settings(Resource max_resource) {
  if (max_resource < 1) throw std::invalid_argument("R must be >= 1");
  const Resource r = derived_min_resource(max_resource, kDefaultEta);
  const int s_max = max_early_stopping_rate(r, max_resource, kDefaultEta);
  return {kDefaultEta, r, bracket_rates(BracketSet::kStandard, s_max)};
}

/// Average resource per configuration in bracket s, in units of R, assuming
/// no mispromotions: (#rungs) / eta^(s_max - s).
inline Rational average_resource(int s, Resource min_resource, Resource max_resource, int eta) {
  const int s_max = max_early_stopping_rate(min_resource, max_resource, eta);
  if (s < 0 || s > s_max) throw std::invalid_argument("s must lie in [0, s_max]");
  return Rational(s_max - s + 1, checked_pow(eta, s_max - s));
}

/// Splits n configurations across brackets in proportion to 1 / r̄_s so each
/// bracket consumes about the same total resource. Largest-remainder
/// rounding, lower s wins ties, every bracket gets at least one.
inline std::map<int, std::int64_t> allocate_configs(std::int64_t n, const std::vector<int>& brackets,
                                                    Resource min_resource, Resource max_resource, int eta) {
  if (brackets.empty()) throw std::invalid_argument("allocate_configs: no brackets");
  if (n < static_cast<std::int64_t>(brackets.size())) {
    throw std::invalid_argument("allocate_configs: n = " + std::to_string(n) + " is smaller than the " +
                                std::to_string(brackets.size()) + " brackets");
  }
  // Weight 1/r̄_s = eta^(s_max-s) / rungs_s. Scale by the lcm of the rung
  // counts so every weight is an integer and the split is exact.
  std::int64_t scale = 1;
  for (int s : brackets) {
    const auto inv = average_resource(s, min_resource, max_resource, eta);
    scale = std::lcm(scale, inv.num);
  }
  std::vector<__int128> weight;
  __int128 total = 0;
  for (int s : brackets) {
    const auto avg = average_resource(s, min_resource, max_resource, eta);
    weight.push_back(static_cast<__int128>(avg.den) * (scale / avg.num));
    total += weight.back();
  }
  std::map<int, std::int64_t> out;
  std::vector<std::pair<__int128, std::size_t>> remainders;
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < brackets.size(); ++i) {
    const __int128 q = static_cast<__int128>(n) * weight[i];
    out[brackets[i]] = static_cast<std::int64_t>(q / total);
    assigned += out[brackets[i]];
    remainders.emplace_back(q % total, i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t j = 0; assigned < n; ++j, ++assigned) ++out[brackets[remainders[j].second]];
  for (int s : brackets) {
    if (out[s] > 0) continue;
    auto donor = std::max_element(out.begin(), out.end(),
                                  [](const auto& a, const auto& b) { return a.second < b.second; });
    --donor->second;
    out[s] = 1;
  }
  return out;
}

struct FieldError {
  std::string field;
  std::string message;
  friend bool operator==(const FieldError&, const FieldError&) = default;
};

inline Resource resolved_min_resource(const ExperimentSpec& spec) {
  return spec.min_resource ? *spec.min_resource : derived_min_resource(spec.max_resource, spec.eta);
}

inline std::vector<int> resolved_brackets(const ExperimentSpec& spec) {
  const int s_max = max_early_stopping_rate(resolved_min_resource(spec), spec.max_resource, spec.eta);
  auto rates = bracket_rates(spec.bracket_set, s_max, spec.brackets);
  if (spec.mode == Mode::kAsha || spec.mode == Mode::kSyncSha) rates.resize(std::min<std::size_t>(rates.size(), 1));
  return rates;
}

std::vector<FieldError> validate_spec(const ExperimentSpec& spec);

// --- incumbent -------------------------------------------------------------

enum class Accounting { kByRung, kByBracket };

struct IncumbentRecord {
  ConfigId config_id = 0;
  double loss = 0.0;
  std::int64_t time = 0;
  int rung = 0;
  int bracket = 0;
  Resource resource = 0;
  friend bool operator==(const IncumbentRecord&, const IncumbentRecord&) = default;
};

/// More-trained observations win; within one resource level lower loss wins.
inline bool better_incumbent(const IncumbentRecord& a, const IncumbentRecord& b) {
  if (a.resource != b.resource) return a.resource > b.resource;
  if (a.loss != b.loss) return a.loss < b.loss;
  return a.config_id < b.config_id;
}

class IncumbentTracker {
 public:
  void observe_result(const IncumbentRecord& rec) { offer(by_rung_, rec); }
  void observe_bracket_output(const IncumbentRecord& rec) { offer(by_bracket_, rec); }

  std::optional<IncumbentRecord> current(Accounting a) const {
    const auto& h = a == Accounting::kByRung ? by_rung_ : by_bracket_;
    if (h.empty()) return std::nullopt;
    return h.back();
  }
  const std::vector<IncumbentRecord>& history(Accounting a) const {
    return a == Accounting::kByRung ? by_rung_ : by_bracket_;
  }

  friend bool operator==(const IncumbentTracker&, const IncumbentTracker&) = default;

 private:
  static void offer(std::vector<IncumbentRecord>& h, const IncumbentRecord& rec) {
    if (h.empty() || better_incumbent(rec, h.back())) h.push_back(rec);
  }
  std::vector<IncumbentRecord> by_rung_;
  std::vector<IncumbentRecord> by_bracket_;
};

// --- experiment ------------------------------------------------------------

/// A dispatched job as seen by a worker. `token` is the sequence number of
/// the dispatch event and is never reused.
struct Job {
  std::int64_t token = 0;
  ConfigId config_id = 0;
  int bracket = 0;
  int s = 0;
  int rung = 0;
  Resource resource = 0;        // train up to this many units
  Resource prior_resource = 0;  // units already trained in the checkpoint it resumes from
  JobKind kind = JobKind::kNewConfig;
  friend bool operator==(const Job&, const Job&) = default;
};

struct Outstanding {
  ConfigId config_id = 0;
  int bracket = 0;
  int rung = 0;
  std::string worker;
  friend bool operator==(const Outstanding&, const Outstanding&) = default;
};

/// Events that would hand out the next job, or why there is none.
struct Plan {
  enum class Outcome { kJob, kBlocked, kFinished };
  Outcome outcome = Outcome::kBlocked;
  std::vector<EventPayload> events;  // ends with JobDispatched when outcome == kJob
};

/// Multi-bracket tuner state. Pure state machine: plan_next_job() decides,
/// apply() mutates, and nothing else changes the state.
class Experiment {
 public:
  explicit Experiment(ExperimentSpec spec) : spec_(std::move(spec)) {
    if (auto errs = validate_spec(spec_); !errs.empty()) {
      throw std::invalid_argument("invalid experiment spec: " + errs.front().field + ": " + errs.front().message);
    }
    // An explicit list only means something for the explicit set; dropping it
    // keeps spec_ equal to its JSON round trip.
    if (spec_.bracket_set != BracketSet::kExplicit) spec_.brackets.clear();
    min_resource_ = resolved_min_resource(spec_);
    rates_ = resolved_brackets(spec_);
    std::map<int, std::int64_t> widths;
    if (rates_.size() == 1) {
      widths[rates_.front()] = spec_.n;
    } else {
      widths = allocate_configs(spec_.n, rates_, min_resource_, spec_.max_resource, spec_.eta);
    }
    for (int s : rates_) open_bracket(s, widths[s]);
  }

  const ExperimentSpec& spec() const { return spec_; }
  Resource min_resource() const { return min_resource_; }
  const std::vector<int>& bracket_rates() const { return rates_; }
  const std::vector<BracketState>& brackets() const { return brackets_; }
  const BracketState& bracket(int b) const { return brackets_.at(static_cast<std::size_t>(b)); }
  ConfigId next_config_id() const { return next_config_id_; }
  std::int64_t last_seq() const { return last_seq_; }
  const std::map<std::int64_t, Outstanding>& outstanding() const { return outstanding_; }
  const std::map<std::int64_t, std::uint64_t>& settled() const { return settled_; }
  const IncumbentTracker& incumbents() const { return incumbent_; }
  std::optional<IncumbentRecord> incumbent(Accounting a = Accounting::kByRung) const {
    return incumbent_.current(a);
  }

  bool bracket_finished(int b) const {
    const auto& br = bracket(b);
    if (br.synchronous()) return plan_sync(br).kind == SyncPlan::Kind::kFinished;
    return asha_finished(br);
  }

  bool finished() const {
    if (spec_.unbounded) return false;
    for (std::size_t b = 0; b < brackets_.size(); ++b) {
      if (!bracket_finished(static_cast<int>(b))) return false;
    }
    return true;
  }

  /// Tasks that could start right now (the task stack size |S|).
  std::size_t runnable_count() const {
    std::size_t n = 0;
    for (const auto& br : brackets_) {
      for (const auto& r : br.rungs()) n += r.queued().size();
      if (br.synchronous()) {
        if (br.sampled_count() == 0) n += static_cast<std::size_t>(br.width_limit().value_or(0));
        const auto plan = plan_sync(br);
        if (plan.kind == SyncPlan::Kind::kPromote) n += plan.promoted.size();
        continue;
      }
      for (int k = br.last_promoting_rung(); k >= 0; --k) n += br.rung(k).promotable_count(br.eta());
      if (br.width_limit()) n += static_cast<std::size_t>(*br.width_limit() - br.sampled_count());
      else n += 1;
    }
    return n;
  }

  Plan plan_next_job() const {
    Plan plan;
    const std::size_t count = brackets_.size();
    if (is_synchronous(spec_.mode)) {
      for (std::size_t b = 0; b < count; ++b) {
        if (plan_sync_bracket(static_cast<int>(b), plan.events)) {
          plan.outcome = Plan::Outcome::kJob;
          return plan;
        }
      }
      if (spec_.unbounded) {
        const int b = static_cast<int>(count);
        const int s = rates_.front();
        plan.events.push_back(WidthExtended{b, s, spec_.n});
        for (std::int64_t i = 0; i < spec_.n; ++i) {
          const ConfigId id = next_config_id_ + i;
          plan.events.push_back(ConfigSampled{id, b, config_seed(spec_.seed, id)});
        }
        plan.events.push_back(JobDispatched{next_config_id_, b, 0, {}});
        plan.outcome = Plan::Outcome::kJob;
        return plan;
      }
    } else {
      for (std::size_t i = 0; i < count; ++i) {
        const int b = static_cast<int>((cursor_ + i) % count);
        if (plan_async_bracket(b, plan.events)) {
          plan.outcome = Plan::Outcome::kJob;
          return plan;
        }
      }
    }
    plan.outcome = finished() ? Plan::Outcome::kFinished : Plan::Outcome::kBlocked;
    return plan;
  }

  /// Events that widen the experiment by `additional` configurations.
  std::vector<EventPayload> plan_extension(std::int64_t additional) const {
    if (additional < 0) throw std::invalid_argument("additional configurations must be >= 0");
    std::vector<EventPayload> out;
    if (additional == 0) {
      out.push_back(WidthExtended{0, bracket(0).params().s, 0});
      return out;
    }
    if (is_synchronous(spec_.mode)) {
      throw std::invalid_argument("synchronous brackets have a fixed width and cannot be extended");
    }
    std::map<int, std::int64_t> widths;
    if (brackets_.size() == 1) {
      widths[rates_.front()] = additional;
    } else {
      widths = allocate_configs(additional, rates_, min_resource_, spec_.max_resource, spec_.eta);
    }
    for (std::size_t b = 0; b < brackets_.size(); ++b) {
      const int s = brackets_[b].params().s;
      out.push_back(WidthExtended{static_cast<int>(b), s, widths[s]});
    }
    return out;
  }

  void apply(const Event& e) {
    if (e.seq != last_seq_ + 1) {
      throw std::logic_error("event " + std::to_string(e.seq) + " applied out of order after " +
                             std::to_string(last_seq_));
    }
    std::visit([&](const auto& p) { apply_payload(e, p); }, e.payload);
    last_seq_ = e.seq;
  }

  /// The job handed out by dispatch event `token`.
  Job job(std::int64_t token) const {
    const auto& o = outstanding_.at(token);
    const auto& br = bracket(o.bracket);
    Job j;
    j.token = token;
    j.config_id = o.config_id;
    j.bracket = o.bracket;
    j.s = br.params().s;
    j.rung = o.rung;
    j.resource = br.rung(o.rung).resource();
    j.prior_resource = o.rung == 0 ? 0 : br.rung(o.rung - 1).resource();
    j.kind = o.rung == 0 ? JobKind::kNewConfig : JobKind::kPromotion;
    return j;
  }

  /// Checkpoint recorded for the rung a promoted job resumes from.
  std::string resume_checkpoint(const Job& j) const {
    if (j.rung == 0) return {};
    const auto& cps = bracket(j.bracket).rung(j.rung - 1).checkpoints();
    auto it = cps.find(j.config_id);
    return it == cps.end() ? std::string{} : it->second;
  }

  std::set<int> finished_brackets() const { return finished_brackets_; }

  friend bool operator==(const Experiment&, const Experiment&) = default;

 private:
  void open_bracket(int s, std::optional<std::int64_t> width) {
    BracketParams p{min_resource_, spec_.max_resource, spec_.eta, s, spec_.infinite_horizon};
    const bool sync = is_synchronous(spec_.mode);
    if (spec_.unbounded && !sync) width.reset();
    brackets_.emplace_back(p, width, sync);
  }

  bool plan_async_bracket(int b, std::vector<EventPayload>& events) const {
    const auto& br = bracket(b);
    const AshaPlan p = plan_asha(br);
    switch (p.kind) {
      case AshaPlan::Kind::kRetry:
        events.push_back(JobDispatched{p.config_id, b, p.rung, {}});
        return true;
      case AshaPlan::Kind::kPromote:
        events.push_back(ConfigPromoted{p.config_id, b, p.rung - 1});
        events.push_back(JobDispatched{p.config_id, b, p.rung, {}});
        return true;
      case AshaPlan::Kind::kGrow:
        events.push_back(ConfigSampled{next_config_id_, b, config_seed(spec_.seed, next_config_id_)});
        events.push_back(JobDispatched{next_config_id_, b, 0, {}});
        return true;
      case AshaPlan::Kind::kBlocked:
        break;
    }
    return false;
  }

  bool plan_sync_bracket(int b, std::vector<EventPayload>& events) const {
    const auto& br = bracket(b);
    if (br.sampled_count() == 0) {
      const std::int64_t width = br.width_limit().value_or(0);
      if (width == 0) return false;
      for (std::int64_t i = 0; i < width; ++i) {
        const ConfigId id = next_config_id_ + i;
        events.push_back(ConfigSampled{id, b, config_seed(spec_.seed, id)});
      }
      events.push_back(JobDispatched{next_config_id_, b, 0, {}});
      return true;
    }
    const int k = sync_current_rung(br);
    if (!br.rung(k).queued().empty()) {
      events.push_back(JobDispatched{*br.rung(k).queued().begin(), b, k, {}});
      return true;
    }
    const SyncPlan p = plan_sync(br);
    if (p.kind != SyncPlan::Kind::kPromote) return false;
    for (ConfigId id : p.promoted) events.push_back(ConfigPromoted{id, b, p.from_rung});
    events.push_back(JobDispatched{*std::min_element(p.promoted.begin(), p.promoted.end()), b, p.from_rung + 1, {}});
    return true;
  }

  BracketState& mutable_bracket(int b) {
    if (b < 0 || static_cast<std::size_t>(b) >= brackets_.size()) {
      throw std::logic_error("no bracket " + std::to_string(b));
    }
    return brackets_[b];
  }

  void apply_payload(const Event& e, const ExperimentCreated&) {
    if (e.seq != 0) throw std::logic_error("experiment-created must be the first event");
  }

  void apply_payload(const Event&, const ConfigSampled& p) {
    if (p.config_id != next_config_id_) {
      throw std::logic_error("config ids must be dense: expected " + std::to_string(next_config_id_) +
                             ", got " + std::to_string(p.config_id));
    }
    mutable_bracket(p.bracket).add_config(p.config_id);
    ++next_config_id_;
  }

  void apply_payload(const Event& e, const JobDispatched& p) {
    mutable_bracket(p.bracket).dispatch(p.config_id, p.rung);
    outstanding_[e.seq] = Outstanding{p.config_id, p.bracket, p.rung, p.worker};
    if (!brackets_.empty()) cursor_ = static_cast<std::size_t>(p.bracket + 1) % brackets_.size();
  }

  void apply_payload(const Event& e, const ResultRecorded& p) {
    auto it = outstanding_.find(p.token);
    if (it == outstanding_.end()) {
      throw RejectedReport(settled_.count(p.token) ? RejectedReport::Reason::kDuplicate
                                                   : RejectedReport::Reason::kUnknown,
                           "token " + std::to_string(p.token) + " is not outstanding");
    }
    const Outstanding& o = it->second;
    if (o.config_id != p.config_id || o.bracket != p.bracket || o.rung != p.rung) {
      throw RejectedReport(RejectedReport::Reason::kUnknown, "result does not match dispatch " +
                                                                 std::to_string(p.token));
    }
    auto& br = mutable_bracket(p.bracket);
    br.record({p.config_id, p.rung, p.loss, p.checkpoint});
    outstanding_.erase(it);
    const double loss = sanitize_loss(p.loss);
    settled_[p.token] = std::bit_cast<std::uint64_t>(loss);
    incumbent_.observe_result({p.config_id, loss, e.timestamp, p.rung, p.bracket, br.rung(p.rung).resource()});
    note_if_finished(p.bracket, e.timestamp);
  }

  void apply_payload(const Event&, const ConfigPromoted& p) {
    mutable_bracket(p.bracket).promote(p.config_id, p.from_rung);
  }

  void apply_payload(const Event&, const JobDropped& p) {
    auto it = outstanding_.find(p.token);
    if (it == outstanding_.end() || it->second.config_id != p.config_id || it->second.rung != p.rung ||
        it->second.bracket != p.bracket) {
      throw std::logic_error("drop of unknown dispatch " + std::to_string(p.token));
    }
    outstanding_.erase(it);
    mutable_bracket(p.bracket).drop(p.config_id, p.rung);
  }

  void apply_payload(const Event&, const WidthExtended& p) {
    if (static_cast<std::size_t>(p.bracket) == brackets_.size()) {
      open_bracket(p.s, p.additional);
      return;
    }
    auto& br = mutable_bracket(p.bracket);
    if (br.params().s != p.s) throw std::logic_error("width extension names the wrong bracket rate");
    br.extend_width(p.additional);
    if (p.additional > 0) finished_brackets_.erase(p.bracket);
  }

  void note_if_finished(int b, std::int64_t time) {
    if (finished_brackets_.count(b) || !bracket_finished(b)) return;
    finished_brackets_.insert(b);
    const auto& br = bracket(b);
    if (auto best = bracket_output(br)) {
      for (int k = static_cast<int>(br.rungs().size()) - 1; k >= 0; --k) {
        auto it = br.rung(k).completed().find(*best);
        if (it == br.rung(k).completed().end()) continue;
        incumbent_.observe_bracket_output({*best, it->second, time, k, b, br.rung(k).resource()});
        break;
      }
    }
  }

  ExperimentSpec spec_;
  Resource min_resource_ = 1;
  std::vector<int> rates_;
  std::vector<BracketState> brackets_;
  ConfigId next_config_id_ = 0;
  std::size_t cursor_ = 0;
  std::int64_t last_seq_ = -1;
  std::map<std::int64_t, Outstanding> outstanding_;
  std::map<std::int64_t, std::uint64_t> settled_;  // token -> loss bits
  std::set<int> finished_brackets_;
  IncumbentTracker incumbent_;
};

inline std::vector<FieldError> validate_spec(const ExperimentSpec& spec) {
  std::vector<FieldError> out;
  for (const auto& v : validate_space(spec.space)) out.push_back({"space." + v.dimension, v.message});
  if (spec.n < 1) out.push_back({"n", "must be >= 1"});
  if (spec.max_resource < 1) out.push_back({"R", "must be >= 1"});
  if (spec.eta < 2) out.push_back({"eta", "must be >= 2"});
  if (spec.min_resource && *spec.min_resource < 1) out.push_back({"r", "must be >= 1"});
  if (!out.empty()) return out;
  const Resource r = resolved_min_resource(spec);
  if (r > spec.max_resource) {
    out.push_back({"r", "must not exceed R"});
    return out;
  }
  const int s_max = max_early_stopping_rate(r, spec.max_resource, spec.eta);
  if (spec.bracket_set == BracketSet::kExplicit) {
    if (spec.brackets.empty()) out.push_back({"brackets", "explicit bracket list is empty"});
    for (int s : spec.brackets) {
      if (s < 0 || s > s_max) {
        out.push_back({"brackets", "rate " + std::to_string(s) + " outside [0, " + std::to_string(s_max) + "]"});
      }
    }
    if (!out.empty()) return out;
  }
  const auto rates = resolved_brackets(spec);
  if (rates.size() > 1 && spec.n < static_cast<std::int64_t>(rates.size())) {
    out.push_back({"n", "must be at least the number of brackets (" + std::to_string(rates.size()) + ")"});
    return out;
  }
  if (is_synchronous(spec.mode)) {
    std::map<int, std::int64_t> widths;
    if (rates.size() == 1) widths[rates.front()] = spec.n;
    else widths = allocate_configs(spec.n, rates, r, spec.max_resource, spec.eta);
    for (int s : rates) {
      const std::int64_t need = checked_pow(spec.eta, s_max - s);
      if (widths[s] < need) {
        out.push_back({"n", "synchronous bracket s=" + std::to_string(s) + " receives " +
                                std::to_string(widths[s]) + " configurations but needs at least " +
                                std::to_string(need)});
      }
    }
  }
  return out;
}

}  // namespace asha
