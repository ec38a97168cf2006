#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace asha {

// --- parallel-training scaling ----------------------------------------------

/// Speedup of one training task spread over g accelerators. Implementations
/// must give speedup(1) = 1, be non-decreasing, and never exceed g.
class ScalingModel {
 public:
  virtual ~ScalingModel() = default;
  virtual double speedup(int g) const = 0;
};

/// speedup(g) = g / (1 + alpha (g - 1)): a fixed per-accelerator overhead.
class OverheadScaling final : public ScalingModel {
 public:
  explicit OverheadScaling(double alpha = 1.0 / 45.0) : alpha_(alpha) {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("alpha must be finite and >= 0");
  }
  double alpha() const { return alpha_; }
  double speedup(int g) const override {
    if (g < 1) throw std::invalid_argument("speedup needs g >= 1");
    return g / (1.0 + alpha_ * (g - 1));
  }

 private:
  double alpha_;
};

/// Largest g <= limit whose efficiency speedup(g)/g is at least tau.
inline int max_gpus_for_efficiency(const ScalingModel& model, double tau, int limit) {
  if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("tau must lie in (0, 1]");
  if (limit < 1) throw std::invalid_argument("limit must be >= 1");
  constexpr double kSlack = 1e-12;  // 16 / (1 + 15/45) is 0.75 only up to rounding
  int best = 1;
  for (int g = 2; g <= limit; ++g) {
    if (model.speedup(g) / g >= tau - kSlack) best = g;
  }
  return best;
}

// --- task stack -------------------------------------------------------------

/// Runnable training tasks of one experiment, newest on top. The observer
/// fires with the new size after every push and pop so demand can follow.
template <class Task>
class TaskStack {
 public:
  using Observer = std::function<void(std::size_t)>;

  void set_observer(Observer fn) { observer_ = std::move(fn); }

  void push(Task t) {
    items_.push_back(std::move(t));
    notify();
  }

  std::optional<Task> pop() {
    if (items_.empty()) return std::nullopt;
    Task t = std::move(items_.back());
    items_.pop_back();
    notify();
    return t;
  }

  const Task& top() const { return items_.back(); }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const std::vector<Task>& items() const { return items_; }

 private:
  void notify() {
    if (observer_) observer_(items_.size());
  }
  std::vector<Task> items_;
  Observer observer_;
};

// --- fair share -------------------------------------------------------------

/// Parallelism an experiment could use right now. `running` counts
/// accelerators already busy with its tasks; they stay part of the demand so
/// that dispatching a task does not by itself shrink the allocation.
struct ClusterDemand {
  std::string experiment;
  std::int64_t kappa = 1;       // accelerators per task
  std::int64_t stack_size = 0;  // runnable tasks |S|
  double weight = 1.0;
  std::int64_t running = 0;

  std::int64_t cap() const { return kappa * stack_size + running; }
  friend bool operator==(const ClusterDemand&, const ClusterDemand&) = default;
};

inline ClusterDemand demand(std::string experiment, std::int64_t kappa, std::int64_t stack_size, double weight = 1.0,
                            std::int64_t running = 0) {
  if (kappa < 0 || stack_size < 0 || running < 0) throw std::invalid_argument("demand terms must be >= 0");
  if (!(weight > 0.0)) throw std::invalid_argument("weight must be > 0");
  return {std::move(experiment), kappa, stack_size, weight, running};
}

/// Weighted max-min fair integer split of `capacity` under per-consumer caps.
///
/// The continuous water level is found first: consumers whose fair share
/// exceeds their cap are frozen at the cap and the surplus is re-divided
/// until nothing more freezes. Unfrozen consumers start at the floor of their
/// share and the leftover units go one at a time to whoever has the smallest
/// (x + 1) / w, lower index first on ties.
inline std::vector<std::int64_t> water_fill(const std::vector<std::int64_t>& caps, const std::vector<double>& weights,
                                            std::int64_t capacity) {
  if (capacity < 0) throw std::invalid_argument("capacity must be >= 0");
  if (caps.size() != weights.size()) throw std::invalid_argument("caps and weights differ in length");
  const std::size_t n = caps.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (caps[i] < 0) throw std::invalid_argument("caps must be >= 0");
    if (!(weights[i] > 0.0)) throw std::invalid_argument("weights must be > 0");
  }
  std::vector<std::int64_t> x(n, 0);
  std::vector<bool> frozen(n, false);
  std::int64_t remaining = capacity;
  for (std::size_t i = 0; i < n; ++i) {
    if (caps[i] == 0) frozen[i] = true;
  }
  double level = 0.0;
  for (bool changed = true; changed;) {
    changed = false;
    double wsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!frozen[i]) wsum += weights[i];
    }
    if (wsum == 0.0) break;
    level = static_cast<double>(remaining) / wsum;
    for (std::size_t i = 0; i < n; ++i) {
      if (!frozen[i] && static_cast<double>(caps[i]) <= level * weights[i]) {
        frozen[i] = true;
        x[i] = caps[i];
        remaining -= caps[i];
        changed = true;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (frozen[i]) continue;
    // Shave a hair off so rounding can only undershoot; the greedy pass
    // tops it back up exactly.
    const double share = std::floor(level * weights[i] * (1.0 - 1e-12));
    x[i] = std::clamp<std::int64_t>(static_cast<std::int64_t>(share), 0, caps[i]);
    remaining -= x[i];
  }
  auto key = [&](std::size_t i) { return static_cast<double>(x[i] + 1) / weights[i]; };
  std::set<std::pair<double, std::size_t>> open;
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i] < caps[i]) open.insert({key(i), i});
  }
  while (remaining > 0 && !open.empty()) {
    const std::size_t i = open.begin()->second;
    open.erase(open.begin());
    ++x[i];
    --remaining;
    if (x[i] < caps[i]) open.insert({key(i), i});
  }
  return x;
}

inline std::map<std::string, std::int64_t> water_fill(const std::vector<ClusterDemand>& demands, std::int64_t capacity) {
  std::vector<std::int64_t> caps;
  std::vector<double> weights;
  for (const auto& d : demands) {
    caps.push_back(d.cap());
    weights.push_back(d.weight);
  }
  const auto x = water_fill(caps, weights, capacity);
  std::map<std::string, std::int64_t> out;
  for (std::size_t i = 0; i < demands.size(); ++i) out[demands[i].experiment] = x[i];
  return out;
}

// --- cluster ----------------------------------------------------------------

/// A change of one experiment's allocation. Shrinking never kills a task:
/// `preempt` accelerators should be released when their tasks next reach a
/// checkpoint boundary. `dispatch` is how many more accelerators may be
/// handed to tasks popped from the experiment's stack.
struct Directive {
  std::string experiment;
  std::int64_t previous = 0;
  std::int64_t allocation = 0;
  std::int64_t dispatch = 0;
  std::int64_t preempt = 0;

  bool is_preempt() const { return allocation < previous; }
  friend bool operator==(const Directive&, const Directive&) = default;
};

/// Single decision loop over the experiments sharing a cluster. Callers
/// update demand snapshots, then call rebalance() once per tick.
class ClusterScheduler {
 public:
  explicit ClusterScheduler(std::int64_t capacity) { set_capacity(capacity); }

  void set_capacity(std::int64_t capacity) {
    if (capacity < 0) throw std::invalid_argument("capacity must be >= 0");
    capacity_ = capacity;
  }
  std::int64_t capacity() const { return capacity_; }

  /// Keep only the newest `rows` dump rows; 0 keeps everything.
  void set_history_limit(std::size_t rows) { history_limit_ = rows; }

  void update(ClusterDemand d) {
    const std::string id = d.experiment;
    demands_[id] = std::move(d);
  }
  void remove(const std::string& experiment) {
    demands_.erase(experiment);
    allocations_.erase(experiment);
  }

  const std::map<std::string, ClusterDemand>& demands() const { return demands_; }
  std::int64_t allocation(const std::string& experiment) const {
    auto it = allocations_.find(experiment);
    return it == allocations_.end() ? 0 : it->second;
  }

  /// Recomputes the fair share. Returns one directive per experiment whose
  /// allocation changed; an unchanged demand set yields none.
  std::vector<Directive> rebalance(std::int64_t tick = 0) {
    std::vector<ClusterDemand> snapshot;
    for (const auto& [id, d] : demands_) snapshot.push_back(d);
    const auto next = water_fill(snapshot, capacity_);
    std::vector<Directive> out;
    for (const auto& d : snapshot) {
      const std::int64_t before = allocation(d.experiment);
      const std::int64_t after = next.at(d.experiment);
      history_.push_back({tick, d.experiment, d.cap(), d.weight, after});
      if (history_limit_ && history_.size() > history_limit_) history_.pop_front();
      if (before == after && allocations_.count(d.experiment)) continue;
      if (before == after && after == 0) {
        allocations_[d.experiment] = 0;
        continue;
      }
      out.push_back({d.experiment, before, after, std::max<std::int64_t>(0, after - d.running),
                     std::max<std::int64_t>(0, d.running - after)});
      allocations_[d.experiment] = after;
    }
    return out;
  }

  /// tick,experiment,cap,weight,allocation
  std::string dump_csv() const {
    std::string out = "tick,experiment,cap,weight,allocation\n";
    for (const auto& row : history_) {
      out += std::to_string(row.tick) + "," + row.experiment + "," + std::to_string(row.cap) + "," +
             std::to_string(row.weight) + "," + std::to_string(row.allocation) + "\n";
    }
    return out;
  }

 private:
  struct Row {
    std::int64_t tick;
    std::string experiment;
    std::int64_t cap;
    double weight;
    std::int64_t allocation;
  };

  std::int64_t capacity_ = 0;
  std::map<std::string, ClusterDemand> demands_;
  std::map<std::string, std::int64_t> allocations_;
  std::deque<Row> history_;
  std::size_t history_limit_ = 0;
};

}  // namespace asha
