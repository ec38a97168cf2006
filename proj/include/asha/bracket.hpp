#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <ext/pb_ds/assoc_container.hpp>
#include <ext/pb_ds/tree_policy.hpp>

#include "asha/common.hpp"

namespace asha {

/// Shape of one successive-halving bracket. Rung k trains to
/// min_resource * eta^(s + k).
struct BracketParams {
  Resource min_resource = 1;  // r
  Resource max_resource = 1;  // R
  int eta = 2;
  int s = 0;  // minimum early-stopping rate
  bool infinite_horizon = false;

  friend bool operator==(const BracketParams&, const BracketParams&) = default;
};

/// floor(log_eta(R / r)) computed in integers: the largest m with r*eta^m <= R.
inline int max_early_stopping_rate(Resource min_resource, Resource max_resource, int eta) {
  int m = 0;
  Resource level = min_resource;
  while (level <= max_resource / eta) {
    level *= eta;
    ++m;
  }
  return m;
}

inline int max_early_stopping_rate(const BracketParams& p) {
  return max_early_stopping_rate(p.min_resource, p.max_resource, p.eta);
}

inline void validate(const BracketParams& p) {
  if (p.min_resource < 1) throw std::invalid_argument("minimum resource must be >= 1");
  if (p.max_resource < p.min_resource) {
    throw std::invalid_argument("maximum resource must be >= minimum resource");
  }
  if (p.eta < 2) throw std::invalid_argument("reduction factor eta must be >= 2");
  if (p.s < 0 || p.s > max_early_stopping_rate(p)) {
    throw std::invalid_argument("early-stopping rate s must lie in [0, " +
                                std::to_string(max_early_stopping_rate(p)) + "]");
  }
}

/// Index of the last rung in a finite-horizon bracket.
inline int top_rung(const BracketParams& p) { return max_early_stopping_rate(p) - p.s; }

inline Resource rung_resource(const BracketParams& p, int rung) {
  const Resource r = p.min_resource * checked_pow(p.eta, p.s + rung);
  if (!p.infinite_horizon && r > p.max_resource) {
    throw std::out_of_range("rung " + std::to_string(rung) + " exceeds maximum resource");
  }
  return r;
}

struct RungPlan {
  std::int64_t configs;  // n_i
  Resource resource;     // r_i
  friend bool operator==(const RungPlan&, const RungPlan&) = default;
};

/// Synchronous successive-halving schedule for n starting configurations.
inline std::vector<RungPlan> rung_schedule(std::int64_t n, const BracketParams& p) {
  validate(p);
  const int rungs = top_rung(p);
  const std::int64_t needed = checked_pow(p.eta, rungs);
  if (n < needed) {
    throw std::invalid_argument("rung_schedule: n = " + std::to_string(n) + " is too small; need n >= " +
                                std::to_string(needed) + " so one configuration reaches R");
  }
  std::vector<RungPlan> out;
  std::int64_t width = n;
  for (int i = 0; i <= rungs; ++i) {
    out.push_back({width, rung_resource(p, i)});
    width /= p.eta;
  }
  return out;
}

/// Wall-clock time, in units of time(R), for ASHA to finish its first
/// configuration when training restarts from scratch at every rung.
inline Rational completion_time_ratio(const BracketParams& p) {
  validate(p);
  const int top = max_early_stopping_rate(p);
  std::int64_t numer = 0;
  for (int i = p.s; i <= top; ++i) numer += checked_pow(p.eta, i);
  return Rational(numer, checked_pow(p.eta, top));
}

/// Losses are minimized. NaN is treated as the worst possible outcome.
inline double sanitize_loss(double loss) {
  return std::isnan(loss) ? std::numeric_limits<double>::infinity() : loss;
}

namespace detail {
using RankKey = std::pair<double, ConfigId>;
using RankTree = __gnu_pbds::tree<RankKey, __gnu_pbds::null_type, std::less<RankKey>,
                                  __gnu_pbds::rb_tree_tag,
                                  __gnu_pbds::tree_order_statistics_node_update>;
}  // namespace detail

/// One promotion level. A config is in at most one of queued, pending and
/// completed; promoted is a subset of completed.
class RungState {
 public:
  RungState() = default;
  RungState(int index, Resource resource) : index_(index), resource_(resource) {}

  int index() const { return index_; }
  Resource resource() const { return resource_; }
  const std::map<ConfigId, double>& completed() const { return completed_; }
  const std::set<ConfigId>& pending() const { return pending_; }
  const std::set<ConfigId>& queued() const { return queued_; }
  const std::set<ConfigId>& promoted() const { return promoted_; }
  const std::map<ConfigId, std::string>& checkpoints() const { return checkpoints_; }

  bool contains(ConfigId id) const {
    return queued_.count(id) || pending_.count(id) || completed_.count(id);
  }
  bool drained() const { return queued_.empty() && pending_.empty(); }
  std::size_t size() const { return queued_.size() + pending_.size() + completed_.size(); }

  /// Number of configs eligible for promotion: floor(|completed| / eta).
  std::size_t quota(int eta) const { return completed_.size() / static_cast<std::size_t>(eta); }

  /// Zero-based position of `id` in the completed ranking (loss, then id).
  std::size_t rank_of(ConfigId id) const {
    return ranking_.order_of_key({completed_.at(id), id});
  }

  /// Best-ranked config inside the top quota that was not promoted yet.
  std::optional<ConfigId> first_promotable(int eta) const {
    const std::size_t q = quota(eta);
    if (q == 0 || unpromoted_.empty()) return std::nullopt;
    const auto& key = *unpromoted_.begin();
    if (ranking_.order_of_key(key) < q) return key.second;
    return std::nullopt;
  }

  std::size_t promotable_count(int eta) const {
    const std::size_t q = quota(eta);
    std::size_t n = 0;
    for (const auto& key : unpromoted_) {
      if (ranking_.order_of_key(key) >= q) break;
      ++n;
    }
    return n;
  }

  /// Lowest-loss completed configs; ties go to the lower config id.
  std::vector<ConfigId> top(std::size_t count) const {
    std::vector<ConfigId> out;
    for (auto it = ranking_.begin(); it != ranking_.end() && out.size() < count; ++it) {
      out.push_back(it->second);
    }
    return out;
  }

  void enqueue(ConfigId id) {
    if (contains(id)) throw std::logic_error("config " + std::to_string(id) + " already in rung " + std::to_string(index_));
    queued_.insert(id);
  }

  void dispatch(ConfigId id) {
    if (queued_.erase(id) == 0) {
      throw std::logic_error("config " + std::to_string(id) + " is not queued in rung " + std::to_string(index_));
    }
    pending_.insert(id);
  }

  void complete(ConfigId id, double loss, std::string checkpoint = {}) {
    if (completed_.count(id)) {
      throw RejectedReport(RejectedReport::Reason::kDuplicate,
                           "duplicate result for config " + std::to_string(id) + " in rung " +
                               std::to_string(index_));
    }
    if (pending_.erase(id) == 0) {
      throw RejectedReport(RejectedReport::Reason::kUnknown,
                           "config " + std::to_string(id) + " is not pending in rung " +
                               std::to_string(index_));
    }
    loss = sanitize_loss(loss);
    completed_.emplace(id, loss);
    ranking_.insert({loss, id});
    unpromoted_.insert({loss, id});
    if (!checkpoint.empty()) checkpoints_[id] = std::move(checkpoint);
  }

  void requeue(ConfigId id) {
    if (pending_.erase(id) == 0) {
      throw std::logic_error("config " + std::to_string(id) + " is not pending in rung " + std::to_string(index_));
    }
    queued_.insert(id);
  }

  void mark_promoted(ConfigId id) {
    auto it = completed_.find(id);
    if (it == completed_.end()) {
      throw std::logic_error("cannot promote config " + std::to_string(id) + ": no result in rung " +
                             std::to_string(index_));
    }
    if (!promoted_.insert(id).second) {
      throw std::logic_error("config " + std::to_string(id) + " already promoted from rung " +
                             std::to_string(index_));
    }
    unpromoted_.erase({it->second, id});
  }

  friend bool operator==(const RungState& a, const RungState& b) {
    return a.index_ == b.index_ && a.resource_ == b.resource_ && a.completed_ == b.completed_ &&
           a.pending_ == b.pending_ && a.queued_ == b.queued_ && a.promoted_ == b.promoted_ &&
           a.checkpoints_ == b.checkpoints_;
  }

 private:
  int index_ = 0;
  Resource resource_ = 0;
  std::map<ConfigId, double> completed_;
  std::set<ConfigId> pending_;
  std::set<ConfigId> queued_;
  std::set<ConfigId> promoted_;
  std::map<ConfigId, std::string> checkpoints_;
  // Derived indexes over completed_.
  detail::RankTree ranking_;
  std::set<detail::RankKey> unpromoted_;
};

inline std::vector<ConfigId> top_k(const RungState& rung, std::size_t count) { return rung.top(count); }

enum class JobKind { kNewConfig, kPromotion, kRetry };

struct BracketJob {
  ConfigId config_id = 0;
  int rung = 0;
  Resource resource = 0;
  JobKind kind = JobKind::kNewConfig;
  friend bool operator==(const BracketJob&, const BracketJob&) = default;
};

struct Blocked {
  friend bool operator==(const Blocked&, const Blocked&) = default;
};

struct Finished {
  std::optional<ConfigId> best;
  friend bool operator==(const Finished&, const Finished&) = default;
};

struct ResultReport {
  ConfigId config_id = 0;
  int rung = 0;
  double loss = 0.0;
  std::string checkpoint;
};

/// State of a single bracket. All mutation goes through the verbs below,
/// which mirror journal events one-to-one.
class BracketState {
 public:
  BracketState() = default;
  BracketState(BracketParams params, std::optional<std::int64_t> width_limit, bool synchronous = false)
      : params_(params), width_limit_(width_limit), synchronous_(synchronous) {
    validate(params_);
    if (width_limit_ && *width_limit_ < 0) throw std::invalid_argument("width limit must be >= 0");
    const int rungs = params_.infinite_horizon ? 1 : top_rung(params_) + 1;
    for (int k = 0; k < rungs; ++k) rungs_.emplace_back(k, rung_resource(params_, k));
  }

  const BracketParams& params() const { return params_; }
  const std::vector<RungState>& rungs() const { return rungs_; }
  const RungState& rung(int k) const { return rungs_.at(static_cast<std::size_t>(k)); }
  std::int64_t sampled_count() const { return sampled_count_; }
  std::optional<std::int64_t> width_limit() const { return width_limit_; }
  bool synchronous() const { return synchronous_; }
  int eta() const { return params_.eta; }

  /// Highest rung configs may be promoted out of, or -1 with infinite horizon.
  int last_promoting_rung() const {
    return params_.infinite_horizon ? static_cast<int>(rungs_.size()) - 1 : top_rung(params_) - 1;
  }

  bool width_reached() const { return width_limit_ && sampled_count_ >= *width_limit_; }

  bool drained() const {
    return std::all_of(rungs_.begin(), rungs_.end(), [](const RungState& r) { return r.drained(); });
  }

  bool has_promotable() const {
    for (int k = last_promoting_rung(); k >= 0; --k) {
      if (rungs_[k].first_promotable(eta())) return true;
    }
    return false;
  }

  // --- mutators -----------------------------------------------------------

  void add_config(ConfigId id) {
    if (width_reached()) throw std::logic_error("bracket width limit reached");
    rungs_[0].enqueue(id);
    ++sampled_count_;
  }

  void promote(ConfigId id, int from_rung) {
    if (from_rung < 0 || from_rung > last_promoting_rung()) {
      throw std::logic_error("no rung above " + std::to_string(from_rung));
    }
    rungs_.at(from_rung).mark_promoted(id);
    if (static_cast<std::size_t>(from_rung + 1) == rungs_.size()) {
      rungs_.emplace_back(from_rung + 1, rung_resource(params_, from_rung + 1));
    }
    rungs_[from_rung + 1].enqueue(id);
  }

  void dispatch(ConfigId id, int rung) { rung_at(rung).dispatch(id); }

  void record(const ResultReport& report) {
    if (report.rung < 0 || static_cast<std::size_t>(report.rung) >= rungs_.size()) {
      throw RejectedReport(RejectedReport::Reason::kUnknown, "no rung " + std::to_string(report.rung));
    }
    rungs_[report.rung].complete(report.config_id, report.loss, report.checkpoint);
  }

  void drop(ConfigId id, int rung) { rung_at(rung).requeue(id); }

  void extend_width(std::int64_t additional) {
    if (additional < 0) throw std::invalid_argument("width extension must be >= 0");
    if (width_limit_) *width_limit_ += additional;
  }

  friend bool operator==(const BracketState&, const BracketState&) = default;

 private:
  RungState& rung_at(int k) {
    if (k < 0 || static_cast<std::size_t>(k) >= rungs_.size()) {
      throw std::logic_error("no rung " + std::to_string(k));
    }
    return rungs_[k];
  }

  BracketParams params_;
  std::vector<RungState> rungs_;
  std::int64_t sampled_count_ = 0;
  std::optional<std::int64_t> width_limit_;
  bool synchronous_ = false;
};

// --- asynchronous successive halving ---------------------------------------

/// What get_job would do next, without doing it.
struct AshaPlan {
  enum class Kind { kRetry, kPromote, kGrow, kBlocked };
  Kind kind = Kind::kBlocked;
  ConfigId config_id = -1;
  int rung = 0;  // rung the job trains in
};

/// Dropped jobs are retried first; then rungs are scanned top-down for the
/// best unpromoted config inside floor(|completed| / eta); only when no rung
/// can promote does the bottom rung grow.
inline AshaPlan plan_asha(const BracketState& b) {
  for (int k = static_cast<int>(b.rungs().size()) - 1; k >= 0; --k) {
    const auto& q = b.rung(k).queued();
    if (!q.empty()) return {AshaPlan::Kind::kRetry, *q.begin(), k};
  }
  for (int k = b.last_promoting_rung(); k >= 0; --k) {
    if (auto id = b.rung(k).first_promotable(b.eta())) return {AshaPlan::Kind::kPromote, *id, k + 1};
  }
  if (!b.width_reached()) return {AshaPlan::Kind::kGrow, -1, 0};
  return {};
}

inline bool asha_finished(const BracketState& b) {
  return b.width_reached() && b.drained() && !b.has_promotable();
}

/// Applies plan_asha. `new_config` supplies the id for a fresh rung-0 config.
template <class NewConfigFn>
std::variant<BracketJob, Blocked> asha_get_job(BracketState& b, NewConfigFn&& new_config) {
  const AshaPlan plan = plan_asha(b);
  switch (plan.kind) {
    case AshaPlan::Kind::kRetry:
      b.dispatch(plan.config_id, plan.rung);
      return BracketJob{plan.config_id, plan.rung, b.rung(plan.rung).resource(), JobKind::kRetry};
    case AshaPlan::Kind::kPromote:
      b.promote(plan.config_id, plan.rung - 1);
      b.dispatch(plan.config_id, plan.rung);
      return BracketJob{plan.config_id, plan.rung, b.rung(plan.rung).resource(), JobKind::kPromotion};
    case AshaPlan::Kind::kGrow: {
      const ConfigId id = std::invoke(new_config);
      b.add_config(id);
      b.dispatch(id, 0);
      return BracketJob{id, 0, b.rung(0).resource(), JobKind::kNewConfig};
    }
    case AshaPlan::Kind::kBlocked:
      break;
  }
  return Blocked{};
}

inline void asha_record_result(BracketState& b, const ResultReport& report) { b.record(report); }

// --- synchronous successive halving ----------------------------------------

/// Highest rung holding any config, i.e. the rung currently being worked.
inline int sync_current_rung(const BracketState& b) {
  for (int k = static_cast<int>(b.rungs().size()) - 1; k >= 0; --k) {
    if (b.rung(k).size() > 0) return k;
  }
  return 0;
}

/// Best config of the deepest rung with results.
inline std::optional<ConfigId> bracket_output(const BracketState& b) {
  for (int k = static_cast<int>(b.rungs().size()) - 1; k >= 0; --k) {
    auto best = b.rung(k).top(1);
    if (!best.empty()) return best.front();
  }
  return std::nullopt;
}

struct SyncPlan {
  enum class Kind { kPromote, kNotReady, kFinished };
  Kind kind = Kind::kNotReady;
  int from_rung = 0;
  std::vector<ConfigId> promoted;
  std::optional<ConfigId> best;
};

inline SyncPlan plan_sync(const BracketState& b) {
  if (b.sampled_count() == 0) return {};
  const int k = sync_current_rung(b);
  const auto& rung = b.rung(k);
  if (!rung.drained()) return {};
  SyncPlan plan;
  if (k > b.last_promoting_rung() || rung.quota(b.eta()) == 0) {
    plan.kind = SyncPlan::Kind::kFinished;
    plan.best = bracket_output(b);
    return plan;
  }
  plan.kind = SyncPlan::Kind::kPromote;
  plan.from_rung = k;
  plan.promoted = rung.top(rung.quota(b.eta()));
  return plan;
}

using SyncStep = std::variant<std::vector<BracketJob>, Blocked, Finished>;

/// Closes the current rung once every job in it has completed and queues the
/// survivors in the next rung. Blocked means the barrier is still up.
inline SyncStep sync_sha_next_rung(BracketState& b) {
  const SyncPlan plan = plan_sync(b);
  switch (plan.kind) {
    case SyncPlan::Kind::kNotReady: return Blocked{};
    case SyncPlan::Kind::kFinished: return Finished{plan.best};
    case SyncPlan::Kind::kPromote: break;
  }
  std::vector<BracketJob> jobs;
  for (ConfigId id : plan.promoted) {
    b.promote(id, plan.from_rung);
    jobs.push_back({id, plan.from_rung + 1, b.rung(plan.from_rung + 1).resource(), JobKind::kPromotion});
  }
  return jobs;
}

}  // namespace asha
