#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "asha/journal.hpp"
#include "asha/orchestrator.hpp"
#include "asha/random.hpp"

// Discrete-event simulation of a pool of workers pulling jobs from a Tuner.
// Time is counted in integer ticks; one tick trains one resource unit.

namespace asha::sim {

enum class TrainingModel { kRestart, kIncremental };

/// base * (1 + |z|) rounded up to a whole tick.
inline std::int64_t straggler_time(std::int64_t base, double z) {
  if (base <= 0) throw std::invalid_argument("straggler_time needs base > 0");
  return static_cast<std::int64_t>(std::ceil(static_cast<double>(base) * (1.0 + std::abs(z))));
}

/// Probability a job running `runtime` ticks is never dropped when each tick
/// drops it independently with probability p.
inline double drop_survival(double p, std::int64_t runtime) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("drop probability must lie in [0, 1)");
  if (runtime < 0) throw std::invalid_argument("runtime must be >= 0");
  return std::pow(1.0 - p, static_cast<double>(runtime));
}

enum class NoiseKind { kGaussian, kBounded };

/// Stand-in for a training run. Every config has a latent quality q ~ U[0,1];
///
///   loss(config, resource) = q + (1 + noise_scale * e) / sqrt(resource)
///
/// where e is a standard normal (or uniform on [-1, 1] for kBounded) drawn
/// from (seed, config, resource). With noise_scale = 0 the ranking at every
/// resource level is the ranking by q.
struct SyntheticObjective {
  std::uint64_t seed = 0;
  double noise_scale = 0.0;
  NoiseKind noise = NoiseKind::kGaussian;

  double latent(ConfigId id) const {
    return random::Stream(random::derive(seed, 0x9e3779b9u, static_cast<std::uint64_t>(id))).uniform();
  }

  double loss(ConfigId id, Resource resource) const {
    if (resource < 1) throw std::invalid_argument("resource must be >= 1");
    double e = 0.0;
    if (noise_scale != 0.0) {
      random::Stream s(random::derive(random::derive(seed, static_cast<std::uint64_t>(id)),
                                      static_cast<std::uint64_t>(resource)));
      e = noise == NoiseKind::kGaussian ? s.normal() : 2.0 * s.uniform() - 1.0;
    }
    return latent(id) + (1.0 + noise_scale * e) / std::sqrt(static_cast<double>(resource));
  }
};

struct SimWorkload {
  int worker_count = 1;
  double straggler_sigma = 0.0;
  double drop_prob = 0.0;  // per tick
  SyntheticObjective objective;
  std::uint64_t sim_seed = 0;
  TrainingModel training = TrainingModel::kRestart;
};

struct TraceEvent {
  enum class Kind { kStart, kComplete, kDrop };
  std::int64_t time = 0;
  int worker = 0;
  Kind kind = Kind::kStart;
  ConfigId config_id = 0;
  int bracket = 0;
  int rung = 0;
  Resource resource = 0;
  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

struct SimMetrics {
  std::int64_t configs_trained_to_R = 0;
  // Time of the first result at R; the horizon when none arrived in time.
  std::int64_t time_to_first_R = 0;
  bool reached_R = false;
  std::int64_t end_time = 0;
  std::int64_t jobs_dispatched = 0;
  std::int64_t jobs_dropped = 0;
  std::vector<TraceEvent> trace;
};

struct SimOptions {
  // Throw the engine away at the first event time >= crash_at and rebuild it
  // from its serialized journal with resume(journal, 0).
  std::optional<std::int64_t> crash_at;
  Tuner::Observer observer;
};

struct SimRun {
  SimMetrics metrics;
  Tuner tuner;
};

namespace detail {

struct WorkerSlot {
  bool busy = false;
  Job job;
  std::int64_t end = 0;
  bool dropped = false;
};

}  // namespace detail

/// Runs `spec` on the simulated workers until `horizon` or until no job can
/// ever start again. Ties are broken by (time, worker id, event kind): at one
/// instant every finishing job reports first, in worker order, then idle
/// workers poll, in worker order.
inline SimRun run_simulation(const ExperimentSpec& spec, const SimWorkload& w, std::int64_t horizon,
                             const SimOptions& options = {}) {
  if (w.worker_count < 1) throw std::invalid_argument("simulation needs at least one worker");
  if (!(w.straggler_sigma >= 0.0)) throw std::invalid_argument("straggler sigma must be >= 0");
  if (!(w.drop_prob >= 0.0 && w.drop_prob < 1.0)) throw std::invalid_argument("drop probability must lie in [0, 1)");
  if (horizon < 0) throw std::invalid_argument("horizon must be >= 0");

  Tuner tuner = Tuner::create(spec);
  if (options.observer) tuner.set_observer(options.observer);
  SimMetrics m;
  m.time_to_first_R = horizon;
  std::vector<detail::WorkerSlot> workers(static_cast<std::size_t>(w.worker_count));
  std::vector<std::string> names;
  for (int i = 0; i < w.worker_count; ++i) names.push_back("w" + std::to_string(i));
  bool crashed = false;

  std::int64_t t = 0;
  while (t <= horizon) {
    if (options.crash_at && !crashed && t >= *options.crash_at) {
      crashed = true;
      auto events = journal_format::parse(tuner.journal().serialize());
      tuner = resume(Journal::from_events(std::move(events)), 0, t);
      if (options.observer) tuner.set_observer(options.observer);
    }
    for (std::size_t i = 0; i < workers.size(); ++i) {
      auto& slot = workers[i];
      if (!slot.busy || slot.end != t) continue;
      slot.busy = false;
      const Job& j = slot.job;
      if (slot.dropped) {
        tuner.report_drop(j.token, t);
        ++m.jobs_dropped;
        m.trace.push_back({t, static_cast<int>(i), TraceEvent::Kind::kDrop, j.config_id, j.bracket, j.rung, j.resource});
        continue;
      }
      tuner.record_result(j.token, w.objective.loss(j.config_id, j.resource), t);
      m.trace.push_back({t, static_cast<int>(i), TraceEvent::Kind::kComplete, j.config_id, j.bracket, j.rung, j.resource});
      if (j.resource >= spec.max_resource) {
        ++m.configs_trained_to_R;
        if (!m.reached_R) {
          m.reached_R = true;
          m.time_to_first_R = t;
        }
      }
    }
    for (std::size_t i = 0; i < workers.size(); ++i) {
      auto& slot = workers[i];
      if (slot.busy) continue;
      auto next = tuner.next_job(names[i], t);
      const auto* job = std::get_if<Job>(&next);
      if (!job) continue;
      random::Stream rng(random::derive(w.sim_seed, static_cast<std::uint64_t>(m.jobs_dispatched)));
      ++m.jobs_dispatched;
      const Resource units =
          w.training == TrainingModel::kRestart ? job->resource : job->resource - job->prior_resource;
      std::int64_t duration = units;
      if (w.straggler_sigma > 0.0) duration = straggler_time(units, w.straggler_sigma * rng.normal());
      slot.dropped = false;
      if (w.drop_prob > 0.0) {
        // Tick on which the first per-tick Bernoulli drop fires.
        const double u = 1.0 - rng.uniform();  // (0, 1]
        const double k = std::ceil(std::log(u) / std::log1p(-w.drop_prob));
        if (k >= 1.0 && k <= static_cast<double>(duration)) {
          duration = static_cast<std::int64_t>(k);
          slot.dropped = true;
        }
      }
      slot.busy = true;
      slot.job = *job;
      slot.end = t + std::max<std::int64_t>(duration, 1);
      m.trace.push_back({t, static_cast<int>(i), TraceEvent::Kind::kStart, job->config_id, job->bracket, job->rung,
                         job->resource});
    }
    std::optional<std::int64_t> next_time;
    for (const auto& slot : workers) {
      if (slot.busy && (!next_time || slot.end < *next_time)) next_time = slot.end;
    }
    m.end_time = t;
    if (!next_time) break;
    t = *next_time;
  }
  return SimRun{std::move(m), std::move(tuner)};
}

// --- figure 5 ---------------------------------------------------------------

struct Figure5Setup {
  int workers = 25;
  int eta = 4;
  Resource min_resource = 1;
  Resource max_resource = 256;
  std::int64_t n = 256;
  int replications = 25;
  std::int64_t horizon = 2560;  // ten times the duration of one job at R
  double noise_scale = 0.1;
  std::uint64_t seed = 0;
  TrainingModel training = TrainingModel::kRestart;
};

struct Figure5Cell {
  double sigma = 0.0;
  double drop_prob = 0.0;
  double asha_trained = 0.0;
  double sync_trained = 0.0;
  double asha_time = 0.0;
  double sync_time = 0.0;
};

/// ASHA keeps growing its bracket and synchronous SHA opens a fresh bracket
/// whenever every open one is waiting, so both keep all workers busy for
/// the whole horizon.
inline ExperimentSpec figure5_spec(const Figure5Setup& f, Mode mode, std::uint64_t seed) {
  ExperimentSpec spec;
  spec.space.dimensions.push_back(Dimension::linear("x", 0.0, 1.0));
  spec.mode = mode;
  spec.max_resource = f.max_resource;
  spec.min_resource = f.min_resource;
  spec.eta = f.eta;
  spec.bracket_set = BracketSet::kExplicit;
  spec.brackets = {0};
  spec.n = f.n;
  spec.seed = seed;
  spec.unbounded = true;
  return spec;
}

inline std::vector<Figure5Cell> figure5_suite(const std::vector<double>& sigmas, const std::vector<double>& drop_probs,
                                              const Figure5Setup& setup = {}) {
  if (setup.replications < 1) throw std::invalid_argument("replications must be >= 1");
  std::vector<Figure5Cell> cells;
  for (double sigma : sigmas) {
    for (double p : drop_probs) {
      Figure5Cell cell{sigma, p};
      for (int rep = 0; rep < setup.replications; ++rep) {
        const std::uint64_t seed = random::derive(setup.seed, static_cast<std::uint64_t>(rep));
        SimWorkload w;
        w.worker_count = setup.workers;
        w.straggler_sigma = sigma;
        w.drop_prob = p;
        w.objective = {random::derive(seed, 1), setup.noise_scale, NoiseKind::kGaussian};
        w.sim_seed = random::derive(seed, 2);
        w.training = setup.training;
        for (Mode mode : {Mode::kAsha, Mode::kSyncSha}) {
          const auto run = run_simulation(figure5_spec(setup, mode, seed), w, setup.horizon);
          const bool asha = mode == Mode::kAsha;
          (asha ? cell.asha_trained : cell.sync_trained) += static_cast<double>(run.metrics.configs_trained_to_R);
          (asha ? cell.asha_time : cell.sync_time) += static_cast<double>(run.metrics.time_to_first_R);
        }
      }
      const double reps = setup.replications;
      cell.asha_trained /= reps;
      cell.sync_trained /= reps;
      cell.asha_time /= reps;
      cell.sync_time /= reps;
      cells.push_back(cell);
    }
  }
  return cells;
}

inline std::vector<Figure5Cell> figure5_suite(const std::vector<double>& sigmas, const std::vector<double>& drop_probs,
                                              int replications) {
  Figure5Setup setup;
  setup.replications = replications;
  return figure5_suite(sigmas, drop_probs, setup);
}

/// sigma,drop_prob,asha_trained_to_R,sync_trained_to_R,asha_time_to_first_R,sync_time_to_first_R
inline std::string figure5_csv(const std::vector<Figure5Cell>& cells) {
  std::string out = "sigma,drop_prob,asha_trained_to_R,sync_trained_to_R,asha_time_to_first_R,sync_time_to_first_R\n";
  for (const auto& c : cells) {
    out += canonical(c.sigma) + "," + canonical(c.drop_prob) + "," + canonical(c.asha_trained) + "," +
           canonical(c.sync_trained) + "," + canonical(c.asha_time) + "," + canonical(c.sync_time) + "\n";
  }
  return out;
}

// --- mispromotion -------------------------------------------------------------

/// Share of rung-0 promotions in bracket 0 that are not in the top 1/eta of
/// rung 0 in hindsight, i.e. ranked by every loss the rung finally holds.
inline double mispromotion_fraction(const Experiment& exp) {
  const auto& rung0 = exp.bracket(0).rung(0);
  const auto& promoted = rung0.promoted();
  if (promoted.empty()) return 0.0;
  const auto best = rung0.top(rung0.quota(exp.spec().eta));
  const std::set<ConfigId> top(best.begin(), best.end());
  std::size_t wrong = 0;
  for (ConfigId id : promoted) wrong += top.count(id) ? 0 : 1;
  return static_cast<double>(wrong) / static_cast<double>(promoted.size());
}

/// Mean rung-0 mispromotion fraction of a single ASHA bracket (s = 0) with
/// n configurations, over `seeds` seeded runs.
inline double mean_mispromotion(std::int64_t n, int seeds, int workers = 4, int eta = 4, Resource max_resource = 256,
                                double noise_scale = 0.5) {
  double total = 0.0;
  for (int i = 0; i < seeds; ++i) {
    const auto seed = random::derive(0x6d697370ull, static_cast<std::uint64_t>(i));
    ExperimentSpec spec;
    spec.space.dimensions.push_back(Dimension::linear("x", 0.0, 1.0));
    spec.mode = Mode::kAsha;
    spec.max_resource = max_resource;
    spec.min_resource = 1;
    spec.eta = eta;
    spec.bracket_set = BracketSet::kExplicit;
    spec.brackets = {0};
    spec.n = n;
    spec.seed = seed;
    SimWorkload w;
    w.worker_count = workers;
    w.objective = {random::derive(seed, 1), noise_scale, NoiseKind::kBounded};
    w.sim_seed = random::derive(seed, 2);
    const auto run = run_simulation(spec, w, std::numeric_limits<std::int64_t>::max() / 2);
    total += mispromotion_fraction(run.tuner.experiment());
  }
  return total / seeds;
}

}  // namespace asha::sim
