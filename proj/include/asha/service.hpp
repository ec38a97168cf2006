#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "asha/journal.hpp"
#include "asha/orchestrator.hpp"
#include "asha/scheduler.hpp"
#include "asha/spec_io.hpp"

// Experiment lifecycle and worker job serving. Transport-agnostic: every
// method takes and returns JSON documents; http.hpp maps them onto routes.
//
// On disk, under the data directory:
//   experiments/<id>/journal.log   event journal (see journal.hpp)
//   experiments/<id>/blobs/<sha>   checkpoint blobs

namespace asha::service {

using nlohmann::json;

struct Options {
  std::filesystem::path data_dir = "asha-data";
  // Accelerators shared by all experiments; unset means no fair-share cap.
  std::optional<std::int64_t> capacity;
  std::int64_t kappa = 1;
  // Expected wall time of one resource unit. A dispatch lease lasts
  // lease_factor * unit_ms * (units to train).
  std::int64_t unit_ms = 60'000;
  std::int64_t lease_factor = 10;
  std::int64_t backoff_ms = 1'000;
  bool fsync = true;
  std::function<std::int64_t()> clock;  // milliseconds; defaults to the system clock
};

class Conflict : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loss from the wire: a number, null, or one of "NaN", "Infinity",
/// "-Infinity" (also "nan", "inf", "-inf"). NaN and null become +inf.
inline double wire_loss(const json& v) {
  if (v.is_null()) return std::numeric_limits<double>::infinity();
  if (v.is_number()) return sanitize_loss(v.get<double>());
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "NaN" || s == "nan") return std::numeric_limits<double>::infinity();
    if (s == "Infinity" || s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-Infinity" || s == "-inf") return -std::numeric_limits<double>::infinity();
  }
  throw std::invalid_argument("loss must be a number, null, \"NaN\", \"Infinity\" or \"-Infinity\"");
}

inline json loss_json(double loss) {
  if (std::isinf(loss)) return loss > 0 ? "Infinity" : "-Infinity";
  return loss;
}

class TunerService {
 public:
  explicit TunerService(Options options) : options_(std::move(options)) {
    if (!options_.clock) {
      options_.clock = [] {
        return std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::system_clock::now().time_since_epoch())
            .count();
      };
    }
    if (options_.capacity) {
      scheduler_.emplace(*options_.capacity);
      scheduler_->set_history_limit(10'000);
    }
    std::filesystem::create_directories(experiments_dir());
    recover_all();
  }

  const Options& options() const { return options_; }

  /// Validates `spec`, creates the journal and returns {"id": ...}.
  json create(const json& spec_doc) {
    const ExperimentSpec spec = io::parse_spec(spec_doc);
    std::unique_lock lock(map_mu_);
    const std::string id = "exp-" + std::to_string(++last_id_);
    const auto dir = experiments_dir() / id;
    std::filesystem::create_directories(dir / "blobs");
    auto entry = std::make_unique<Entry>(id, dir, Tuner::create(spec, Journal::open(dir / "journal.log", options_.fsync), now()));
    experiments_.emplace(id, std::move(entry));
    return {{"id", id}};
  }

  json list() const {
    std::shared_lock lock(map_mu_);
    json out = json::array();
    for (const auto& [id, e] : experiments_) {
      std::lock_guard g(e->mu);
      out.push_back({{"id", id},
                     {"mode", std::string(to_string(e->tuner.experiment().spec().mode))},
                     {"finished", e->tuner.experiment().finished()}});
    }
    return out;
  }

  json status(const std::string& id) {
    Entry& e = entry(id);
    std::lock_guard g(e.mu);
    expire_leases(e);
    return status_locked(e);
  }

  /// Widens the experiment by additional_n configurations.
  json resume(const std::string& id, std::int64_t additional_n) {
    Entry& e = entry(id);
    std::lock_guard g(e.mu);
    e.tuner.extend(additional_n, now());
    return status_locked(e);
  }

  /// {"job": {...}} or {"no_work": {"backoff_ms": ..., "finished": ...}}.
  json poll(const std::string& id, const std::string& worker) {
    Entry& e = entry(id);
    std::lock_guard g(e.mu);
    expire_leases(e);
    const Experiment& exp = e.tuner.experiment();
    if (!admitted(e)) return no_work(exp.finished());
    auto next = e.tuner.next_job(worker, now());
    const auto* job = std::get_if<Job>(&next);
    if (!job) return no_work(std::holds_alternative<Finished>(next));
    const Resource units = exp.spec().incremental_training ? job->resource - job->prior_resource : job->resource;
    const std::int64_t lease = options_.lease_factor * options_.unit_ms * std::max<Resource>(units, 1);
    e.leases[job->token] = {now() + lease, worker};
    refresh_demand(e);
    json j = {{"experiment", id},
              {"token", job->token},
              {"config_id", job->config_id},
              {"config", io::to_json(sample(exp.spec().space, exp.spec().seed, job->config_id))["values"]},
              {"bracket", job->bracket},
              {"s", job->s},
              {"rung", job->rung},
              {"resource", job->resource},
              {"prior_resource", job->prior_resource},
              {"training_model", exp.spec().incremental_training ? "incremental" : "restart"},
              {"lease_ms", lease}};
    const auto cp = exp.resume_checkpoint(*job);
    j["checkpoint"] = cp.empty() ? json(nullptr) : json(cp);
    return {{"job", j}};
  }

  /// Records a result. An exact repeat of an accepted submission is
  /// acknowledged again without a second journal entry.
  json submit(const std::string& id, const json& result) {
    Entry& e = entry(id);
    std::lock_guard g(e.mu);
    if (!result.is_object() || !result.contains("token") || !result["token"].is_number_integer()) {
      throw std::invalid_argument("result needs an integer token");
    }
    if (!result.contains("loss")) throw std::invalid_argument("result needs a loss");
    const auto token = result["token"].get<std::int64_t>();
    const double loss = wire_loss(result["loss"]);
    std::string checkpoint;
    if (result.contains("checkpoint") && !result["checkpoint"].is_null()) {
      checkpoint = result["checkpoint"].get<std::string>();
      if (!CheckpointStore(e.dir / "blobs").contains(checkpoint)) {
        throw std::invalid_argument("checkpoint " + checkpoint + " was not uploaded");
      }
    }
    const Experiment& exp = e.tuner.experiment();
    if (auto it = exp.settled().find(token); it != exp.settled().end()) {
      if (it->second == std::bit_cast<std::uint64_t>(loss) && settled_checkpoint(e, token) == checkpoint) {
        return {{"accepted", true}, {"duplicate", true}, {"sequence_no", exp.last_seq()}};
      }
      throw Conflict("token " + std::to_string(token) + " already has a different result");
    }
    if (!exp.outstanding().count(token)) {
      throw Conflict("token " + std::to_string(token) + " is not outstanding (unknown, expired or dropped)");
    }
    e.tuner.record_result(token, loss, now(), checkpoint);
    e.leases.erase(token);
    refresh_demand(e);
    return {{"accepted", true}, {"duplicate", false}, {"sequence_no", e.tuner.experiment().last_seq()}};
  }

  json put_blob(const std::string& id, std::string_view bytes) {
    Entry& e = entry(id);
    const auto ref = CheckpointStore(e.dir / "blobs").put(bytes);
    return {{"id", ref.id}, {"digest", ref.digest}, {"size", ref.size}};
  }

  std::string get_blob(const std::string& id, const std::string& digest) {
    Entry& e = entry(id);
    return CheckpointStore(e.dir / "blobs").get(digest);
  }

  std::string export_results(const std::string& id, const std::string& format) {
    Entry& e = entry(id);
    std::lock_guard g(e.mu);
    const auto& events = e.tuner.journal().events();
    if (format == "csv") return export_csv(events);
    if (format == "jsonlines") return export_jsonlines(events);
    throw std::invalid_argument("unknown export format '" + format + "'");
  }

  std::string allocation_csv() const {
    std::lock_guard g(sched_mu_);
    return scheduler_ ? scheduler_->dump_csv() : std::string("tick,experiment,cap,weight,allocation\n");
  }

 private:
  struct Lease {
    std::int64_t deadline = 0;
    std::string worker;
  };

  struct Entry {
    Entry(std::string id_, std::filesystem::path dir_, Tuner tuner_)
        : id(std::move(id_)), dir(std::move(dir_)), tuner(std::move(tuner_)) {}
    std::string id;
    std::filesystem::path dir;
    mutable std::mutex mu;
    Tuner tuner;
    std::map<std::int64_t, Lease> leases;
  };

  std::filesystem::path experiments_dir() const { return options_.data_dir / "experiments"; }
  std::int64_t now() const { return options_.clock(); }

  Entry& entry(const std::string& id) {
    std::shared_lock lock(map_mu_);
    auto it = experiments_.find(id);
    if (it == experiments_.end()) throw NotFound("no experiment '" + id + "'");
    return *it->second;
  }

  void recover_all() {
    std::vector<std::filesystem::path> dirs;
    for (const auto& d : std::filesystem::directory_iterator(experiments_dir())) {
      if (d.is_directory() && std::filesystem::exists(d.path() / "journal.log")) dirs.push_back(d.path());
    }
    for (const auto& dir : dirs) {
      const std::string id = dir.filename().string();
      auto tuner = Tuner::recover(Journal::open(dir / "journal.log", options_.fsync));
      auto entry = std::make_unique<Entry>(id, dir, std::move(tuner));
      // Jobs that were out when the service stopped get a fresh lease.
      for (const auto& [token, o] : entry->tuner.experiment().outstanding()) {
        const Job job = entry->tuner.experiment().job(token);
        entry->leases[token] = {now() + options_.lease_factor * options_.unit_ms * std::max<Resource>(job.resource, 1),
                                o.worker};
      }
      if (id.rfind("exp-", 0) == 0) {
        try {
          last_id_ = std::max<std::int64_t>(last_id_, std::stoll(id.substr(4)));
        } catch (const std::exception&) {
        }
      }
      experiments_.emplace(id, std::move(entry));
    }
  }

  void expire_leases(Entry& e) {
    const auto t = now();
    for (auto it = e.leases.begin(); it != e.leases.end();) {
      if (it->second.deadline < t && e.tuner.experiment().outstanding().count(it->first)) {
        e.tuner.report_drop(it->first, t);
        it = e.leases.erase(it);
      } else {
        ++it;
      }
    }
  }

  std::string settled_checkpoint(const Entry& e, std::int64_t token) const {
    for (auto it = e.tuner.journal().events().rbegin(); it != e.tuner.journal().events().rend(); ++it) {
      if (const auto* r = std::get_if<ResultRecorded>(&it->payload); r && r->token == token) return r->checkpoint;
    }
    return {};
  }

  json no_work(bool finished) const {
    return {{"no_work", {{"backoff_ms", options_.backoff_ms}, {"finished", finished}}}};
  }

  ClusterDemand current_demand(const Entry& e) const {
    const auto& exp = e.tuner.experiment();
    return demand(e.id, options_.kappa, static_cast<std::int64_t>(exp.runnable_count()), 1.0,
                  options_.kappa * static_cast<std::int64_t>(exp.outstanding().size()));
  }

  void refresh_demand(const Entry& e) {
    if (!scheduler_) return;
    std::lock_guard g(sched_mu_);
    scheduler_->update(current_demand(e));
  }

  // True when the fair share leaves room for one more task of this experiment.
  bool admitted(const Entry& e) {
    if (!scheduler_) return true;
    std::lock_guard g(sched_mu_);
    scheduler_->update(current_demand(e));
    scheduler_->rebalance(++tick_);
    const auto running = options_.kappa * static_cast<std::int64_t>(e.tuner.experiment().outstanding().size());
    return running + options_.kappa <= scheduler_->allocation(e.id);
  }

  json status_locked(const Entry& e) const {
    const Experiment& exp = e.tuner.experiment();
    json brackets = json::array();
    std::int64_t sampled = 0, width = 0;
    bool bounded = true;
    for (const auto& br : exp.brackets()) {
      json rungs = json::array();
      for (const auto& r : br.rungs()) {
        rungs.push_back({{"rung", r.index()},
                         {"resource", r.resource()},
                         {"completed", r.completed().size()},
                         {"pending", r.pending().size()},
                         {"queued", r.queued().size()},
                         {"promoted", r.promoted().size()}});
      }
      sampled += br.sampled_count();
      if (br.width_limit()) width += *br.width_limit();
      else bounded = false;
      brackets.push_back({{"s", br.params().s},
                          {"width_limit", br.width_limit() ? json(*br.width_limit()) : json(nullptr)},
                          {"sampled", br.sampled_count()},
                          {"rungs", rungs}});
    }
    auto incumbent = [&](Accounting a) -> json {
      const auto inc = exp.incumbent(a);
      if (!inc) return nullptr;
      return {{"config_id", inc->config_id}, {"loss", loss_json(inc->loss)}, {"rung", inc->rung},
              {"bracket", inc->bracket},     {"resource", inc->resource},    {"time", inc->time}};
    };
    json out = {{"id", e.id},
                {"sequence_no", exp.last_seq()},
                {"mode", std::string(to_string(exp.spec().mode))},
                {"finished", exp.finished()},
                {"brackets", brackets},
                {"incumbent", incumbent(Accounting::kByRung)},
                {"incumbent_by_bracket", incumbent(Accounting::kByBracket)},
                {"progress",
                 {{"sampled", sampled},
                  {"width", bounded ? json(width) : json(nullptr)},
                  {"results", exp.settled().size()},
                  {"outstanding", exp.outstanding().size()}}}};
    if (scheduler_) {
      std::lock_guard g(sched_mu_);
      out["allocation"] = scheduler_->allocation(e.id);
    } else {
      out["allocation"] = nullptr;
    }
    return out;
  }

  Options options_;
  mutable std::shared_mutex map_mu_;
  std::map<std::string, std::unique_ptr<Entry>> experiments_;
  std::int64_t last_id_ = 0;
  mutable std::mutex sched_mu_;
  std::optional<ClusterScheduler> scheduler_;
  std::int64_t tick_ = 0;
};

}  // namespace asha::service
