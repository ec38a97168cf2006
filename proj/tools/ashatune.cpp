// ashatune: operator CLI for the tuner service and the simulator.

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include "asha/http.hpp"
#include "asha/journal.hpp"
#include "asha/service.hpp"
#include "asha/sim.hpp"
#include "asha/spec_io.hpp"

namespace {

using nlohmann::json;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Remote {
  std::string url = "http://127.0.0.1:8080";

  int call(const std::string& method, const std::string& path, const std::string& body = {}) const {
    httplib::Client cli(url);
    cli.set_read_timeout(30, 0);
    httplib::Result res = method == "GET" ? cli.Get(path) : cli.Post(path, body, "application/json");
    if (!res) {
      std::cerr << "request to " << url << path << " failed: " << httplib::to_string(res.error()) << "\n";
      return 2;
    }
    std::cout << res->body;
    if (!res->body.empty() && res->body.back() != '\n') std::cout << "\n";
    return res->status < 300 ? 0 : 1;
  }
};

asha::service::HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

int validate(const std::string& path) {
  try {
    const auto spec = asha::io::parse_spec(json::parse(read_file(path)));
    const asha::Experiment exp(spec);
    std::cout << "ok: mode " << asha::to_string(spec.mode) << ", R " << spec.max_resource << ", r "
              << exp.min_resource() << ", eta " << spec.eta << "\n";
    for (const auto& br : exp.brackets()) {
      std::cout << "  bracket s=" << br.params().s << " width "
                << (br.width_limit() ? std::to_string(*br.width_limit()) : std::string("unbounded")) << " rungs";
      for (const auto& r : br.rungs()) std::cout << " " << r.resource();
      std::cout << "\n";
    }
    return 0;
  } catch (const asha::SpecError& e) {
    for (const auto& fe : e.errors()) std::cerr << fe.field << ": " << fe.message << "\n";
    return 1;
  }
}

int replay_verify(const std::string& path) {
  const std::string bytes = read_file(path);
  try {
    const auto events = asha::journal_format::parse(bytes);
    const auto exp = asha::replay(events);
    const auto again = asha::Journal::from_events(events).serialize();
    if (again != bytes) {
      std::cerr << "journal does not re-serialize byte-for-byte\n";
      return 1;
    }
    std::cout << "ok: " << events.size() << " events, last sequence " << exp.last_seq() << ", "
              << exp.settled().size() << " results, " << exp.outstanding().size() << " outstanding, "
              << (exp.finished() ? "finished" : "running") << "\n";
    if (auto inc = exp.incumbent()) {
      std::cout << "incumbent: config " << inc->config_id << " loss " << asha::canonical(inc->loss) << " at resource "
                << inc->resource << "\n";
    }
    return 0;
  } catch (const asha::IntegrityError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ashatune - successive-halving hyperparameter tuning"};
  app.require_subcommand(1);
  Remote remote;

  std::string spec_path;
  auto* cmd_validate = app.add_subcommand("validate", "Check an experiment spec file");
  cmd_validate->add_option("spec", spec_path, "Spec JSON file")->required();

  auto* cmd_submit = app.add_subcommand("submit", "Create an experiment on a running server");
  cmd_submit->add_option("spec", spec_path, "Spec JSON file")->required();
  cmd_submit->add_option("--server", remote.url, "Server URL");

  std::string exp_id;
  auto* cmd_status = app.add_subcommand("status", "Show an experiment (or list all)");
  cmd_status->add_option("id", exp_id, "Experiment id");
  cmd_status->add_option("--server", remote.url, "Server URL");

  std::int64_t additional_n = 0;
  auto* cmd_resume = app.add_subcommand("resume", "Evaluate more configurations in an experiment");
  cmd_resume->add_option("id", exp_id, "Experiment id")->required();
  cmd_resume->add_option("--additional-n", additional_n, "Extra configurations")->check(CLI::NonNegativeNumber);
  cmd_resume->add_option("--server", remote.url, "Server URL");

  std::string format = "csv", journal_path;
  auto* cmd_export = app.add_subcommand("export", "Export results as CSV or JSON lines");
  cmd_export->add_option("id", exp_id, "Experiment id on the server");
  cmd_export->add_option("--journal", journal_path, "Read a journal file instead of a server");
  cmd_export->add_option("--format", format, "csv or jsonlines")->check(CLI::IsMember({"csv", "jsonlines"}));
  cmd_export->add_option("--server", remote.url, "Server URL");

  auto* cmd_replay = app.add_subcommand("replay-verify", "Check a journal and replay it");
  cmd_replay->add_option("journal", journal_path, "Journal file")->required();

  std::string mode = "asha", out_path;
  asha::sim::SimWorkload workload;
  workload.worker_count = 25;
  std::int64_t horizon = 2560, n = 256, R = 256, r = 1;
  int eta = 4, replications = 25;
  bool figure5 = false, incremental = false;
  auto* cmd_sim = app.add_subcommand("simulate", "Run the worker simulator");
  cmd_sim->add_option("--mode", mode, "sync-sha, asha, sync-hyperband or async-hyperband")
      ->check(CLI::IsMember({"sync-sha", "asha", "sync-hyperband", "async-hyperband"}));
  cmd_sim->add_option("--workers", workload.worker_count, "Worker count")->check(CLI::PositiveNumber);
  cmd_sim->add_option("--sigma", workload.straggler_sigma, "Straggler standard deviation");
  cmd_sim->add_option("--drop", workload.drop_prob, "Per-tick drop probability");
  cmd_sim->add_option("--noise", workload.objective.noise_scale, "Objective noise scale");
  cmd_sim->add_option("--seed", workload.sim_seed, "Simulation seed");
  cmd_sim->add_option("--horizon", horizon, "Simulated ticks");
  cmd_sim->add_option("-n", n, "Configurations");
  cmd_sim->add_option("-R", R, "Maximum resource");
  cmd_sim->add_option("-r", r, "Minimum resource");
  cmd_sim->add_option("--eta", eta, "Reduction factor");
  cmd_sim->add_flag("--incremental", incremental, "Resume promoted jobs from checkpoints");
  cmd_sim->add_flag("--figure5", figure5, "Run the straggler/drop grid for ASHA and synchronous SHA");
  cmd_sim->add_option("--replications", replications, "Runs per grid cell")->check(CLI::PositiveNumber);
  cmd_sim->add_option("--out", out_path, "Write CSV here instead of stdout");

  int port = 8080;
  std::string host = "127.0.0.1";
  asha::service::Options options;
  if (const char* dir = std::getenv("ASHA_DATA_DIR")) options.data_dir = dir;
  std::int64_t capacity = 0;
  auto* cmd_serve = app.add_subcommand("serve", "Run the tuner service (data directory from ASHA_DATA_DIR)");
  cmd_serve->add_option("--port", port, "TCP port");
  cmd_serve->add_option("--host", host, "Bind address");
  cmd_serve->add_option("--capacity", capacity, "Accelerators shared across experiments (0 = unlimited)");
  cmd_serve->add_option("--kappa", options.kappa, "Accelerators per task");
  cmd_serve->add_option("--unit-ms", options.unit_ms, "Expected milliseconds per resource unit (sets leases)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*cmd_validate) return validate(spec_path);
    if (*cmd_submit) return remote.call("POST", "/experiments", read_file(spec_path));
    if (*cmd_status) return remote.call("GET", exp_id.empty() ? "/experiments" : "/experiments/" + exp_id);
    if (*cmd_resume) {
      return remote.call("POST", "/experiments/" + exp_id + "/resume", json{{"additional_n", additional_n}}.dump());
    }
    if (*cmd_replay) return replay_verify(journal_path);
    if (*cmd_export) {
      if (journal_path.empty()) {
        if (exp_id.empty()) throw std::invalid_argument("export needs an experiment id or --journal");
        return remote.call("GET", "/experiments/" + exp_id + "/export?format=" + format);
      }
      const auto events = asha::journal_format::read_file(journal_path);
      std::cout << (format == "csv" ? asha::export_csv(events) : asha::export_jsonlines(events));
      return 0;
    }
    if (*cmd_sim) {
      std::string csv;
      if (figure5) {
        asha::sim::Figure5Setup setup;
        setup.workers = workload.worker_count;
        setup.eta = eta;
        setup.min_resource = r;
        setup.max_resource = R;
        setup.n = n;
        setup.replications = replications;
        setup.horizon = horizon;
        setup.seed = workload.sim_seed;
        setup.training = incremental ? asha::sim::TrainingModel::kIncremental : asha::sim::TrainingModel::kRestart;
        csv = asha::sim::figure5_csv(asha::sim::figure5_suite({0.0, 0.5, 1.0, 2.0}, {0.0, 1e-4, 1e-3, 1e-2}, setup));
      } else {
        asha::ExperimentSpec spec;
        spec.space.dimensions.push_back(asha::Dimension::linear("x", 0.0, 1.0));
        spec.mode = asha::io::parse_mode(mode);
        spec.max_resource = R;
        spec.min_resource = r;
        spec.eta = eta;
        spec.n = n;
        spec.seed = workload.sim_seed;
        spec.incremental_training = incremental;
        if (spec.mode == asha::Mode::kAsha || spec.mode == asha::Mode::kSyncSha) {
          spec.bracket_set = asha::BracketSet::kExplicit;
          spec.brackets = {0};
        }
        workload.training = incremental ? asha::sim::TrainingModel::kIncremental : asha::sim::TrainingModel::kRestart;
        workload.objective.seed = workload.sim_seed + 1;
        const auto run = asha::sim::run_simulation(spec, workload, horizon);
        const auto& m = run.metrics;
        csv = "mode,workers,sigma,drop_prob,configs_trained_to_R,time_to_first_R,reached_R,jobs_dispatched,jobs_dropped\n" +
              mode + "," + std::to_string(workload.worker_count) + "," + asha::canonical(workload.straggler_sigma) +
              "," + asha::canonical(workload.drop_prob) + "," + std::to_string(m.configs_trained_to_R) + "," +
              std::to_string(m.time_to_first_R) + "," + (m.reached_R ? "true" : "false") + "," +
              std::to_string(m.jobs_dispatched) + "," + std::to_string(m.jobs_dropped) + "\n";
      }
      if (out_path.empty()) {
        std::cout << csv;
      } else {
        std::ofstream(out_path) << csv;
      }
      return 0;
    }
    if (*cmd_serve) {
      if (capacity > 0) options.capacity = capacity;
      asha::service::TunerService service(options);
      asha::service::HttpServer server(service);
      if (!server.bind(host, port)) {
        std::cerr << "cannot bind " << host << ":" << port << "\n";
        return 2;
      }
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "serving on http://" << host << ":" << port << " with data in " << options.data_dir << "\n";
      server.serve();
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
