#pragma once

#include <fcntl.h>
#include <unistd.h>
#include <openssl/evp.h>
#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "asha/events.hpp"
#include "asha/orchestrator.hpp"
#include "asha/spec_io.hpp"

// On-disk journal format. One record per line:
//
//   <length> SP <crc32> SP <payload> LF
//
// <length> is the decimal byte count of <payload>; <crc32> is the zlib CRC-32
// of <payload> as 8 lowercase hex digits; <payload> is a canonical JSON
// object (keys sorted, no whitespace). Losses are strings produced by
// std::to_chars ("inf" for infinity) so they round-trip bit-exactly.

namespace asha {

class IntegrityError : public std::runtime_error {
 public:
  IntegrityError(std::int64_t seq, const std::string& what)
      : std::runtime_error("journal integrity error at sequence " + std::to_string(seq) + ": " + what),
        seq_(seq) {}
  std::int64_t sequence_no() const { return seq_; }

 private:
  std::int64_t seq_;
};

/// An event whose references do not resolve against the journal so far.
class JournalRejected : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace journal_format {

using nlohmann::json;

inline std::uint32_t crc32_of(std::string_view bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline json payload_json(const EventPayload& payload) {
  return std::visit(
      [](const auto& p) -> json {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, ExperimentCreated>) {
          return {{"spec", p.spec}};
        } else if constexpr (std::is_same_v<T, ConfigSampled>) {
          return {{"config", p.config_id}, {"bracket", p.bracket}, {"sample_seed", p.sample_seed}};
        } else if constexpr (std::is_same_v<T, JobDispatched>) {
          return {{"config", p.config_id}, {"bracket", p.bracket}, {"rung", p.rung}, {"worker", p.worker}};
        } else if constexpr (std::is_same_v<T, ResultRecorded>) {
          return {{"token", p.token},       {"config", p.config_id}, {"bracket", p.bracket},
                  {"rung", p.rung},         {"loss", canonical(p.loss)}, {"checkpoint", p.checkpoint}};
        } else if constexpr (std::is_same_v<T, ConfigPromoted>) {
          return {{"config", p.config_id}, {"bracket", p.bracket}, {"from_rung", p.from_rung}};
        } else if constexpr (std::is_same_v<T, JobDropped>) {
          return {{"token", p.token}, {"config", p.config_id}, {"bracket", p.bracket}, {"rung", p.rung}};
        } else {
          return {{"bracket", p.bracket}, {"s", p.s}, {"additional", p.additional}};
        }
      },
      payload);
}

inline std::string encode(const Event& e) {
  json j = {{"seq", e.seq}, {"ts", e.timestamp}, {"kind", std::string(kind_name(e.payload))},
            {"data", payload_json(e.payload)}};
  return j.dump();
}

inline Event decode(std::string_view text) {
  const json j = json::parse(text);
  Event e;
  e.seq = j.at("seq").get<std::int64_t>();
  e.timestamp = j.at("ts").get<std::int64_t>();
  const auto kind = j.at("kind").get<std::string>();
  const json& d = j.at("data");
  if (kind == "experiment-created") {
    e.payload = ExperimentCreated{d.at("spec").get<std::string>()};
  } else if (kind == "config-sampled") {
    e.payload = ConfigSampled{d.at("config").get<ConfigId>(), d.at("bracket").get<int>(),
                              d.at("sample_seed").get<std::uint64_t>()};
  } else if (kind == "job-dispatched") {
    e.payload = JobDispatched{d.at("config").get<ConfigId>(), d.at("bracket").get<int>(), d.at("rung").get<int>(),
                              d.at("worker").get<std::string>()};
  } else if (kind == "result-recorded") {
    e.payload = ResultRecorded{d.at("token").get<std::int64_t>(), d.at("config").get<ConfigId>(),
                               d.at("bracket").get<int>(),        d.at("rung").get<int>(),
                               parse_double(d.at("loss").get<std::string>()),
                               d.at("checkpoint").get<std::string>()};
  } else if (kind == "config-promoted") {
    e.payload = ConfigPromoted{d.at("config").get<ConfigId>(), d.at("bracket").get<int>(), d.at("from_rung").get<int>()};
  } else if (kind == "job-dropped") {
    e.payload = JobDropped{d.at("token").get<std::int64_t>(), d.at("config").get<ConfigId>(),
                           d.at("bracket").get<int>(), d.at("rung").get<int>()};
  } else if (kind == "width-extended") {
    e.payload = WidthExtended{d.at("bracket").get<int>(), d.at("s").get<int>(), d.at("additional").get<std::int64_t>()};
  } else {
    throw std::invalid_argument("unknown event kind '" + kind + "'");
  }
  return e;
}

inline std::string frame(const std::string& payload) {
  char crc[9];
  std::snprintf(crc, sizeof(crc), "%08x", crc32_of(payload));
  return std::to_string(payload.size()) + " " + crc + " " + payload + "\n";
}

/// Parses a whole journal image, checking framing, checksums and density.
inline std::vector<Event> parse(std::string_view data) {
  std::vector<Event> out;
  std::size_t pos = 0;
  while (pos < data.size()) {
    const auto expected = static_cast<std::int64_t>(out.size());
    const auto sp1 = data.find(' ', pos);
    const auto sp2 = sp1 == std::string_view::npos ? sp1 : data.find(' ', sp1 + 1);
    if (sp2 == std::string_view::npos) throw IntegrityError(expected, "truncated record header");
    std::size_t length = 0;
    try {
      std::size_t used = 0;
      length = std::stoull(std::string(data.substr(pos, sp1 - pos)), &used);
      if (used != sp1 - pos) throw std::invalid_argument("length");
    } catch (const std::exception&) {
      throw IntegrityError(expected, "malformed record length");
    }
    const auto crc_text = data.substr(sp1 + 1, sp2 - sp1 - 1);
    const auto body_start = sp2 + 1;
    if (body_start + length >= data.size() || data[body_start + length] != '\n') {
      throw IntegrityError(expected, "truncated or overlong record body");
    }
    const auto body = data.substr(body_start, length);
    char crc[9];
    std::snprintf(crc, sizeof(crc), "%08x", crc32_of(body));
    if (crc_text != crc) throw IntegrityError(expected, "checksum mismatch");
    Event e;
    try {
      e = decode(body);
    } catch (const std::exception& ex) {
      throw IntegrityError(expected, std::string("undecodable payload: ") + ex.what());
    }
    if (e.seq != expected) throw IntegrityError(expected, "sequence gap (found " + std::to_string(e.seq) + ")");
    out.push_back(std::move(e));
    pos = body_start + length + 1;
  }
  return out;
}

inline std::vector<Event> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open journal " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

}  // namespace journal_format

/// Append-only event log with reference checking and optional write-ahead
/// persistence. Single writer.
class Journal {
 public:
  Journal() = default;
  Journal(Journal&&) noexcept = default;
  Journal& operator=(Journal&&) noexcept = default;
  ~Journal() { close_file(); }

  /// File-backed journal. Existing records are loaded and verified first.
  static Journal open(const std::filesystem::path& path, bool fsync_each = true) {
    Journal j;
    if (std::filesystem::exists(path)) {
      for (auto& e : journal_format::read_file(path)) {
        j.admit(e.payload, e.seq);
        j.events_.push_back(std::move(e));
      }
    }
    j.fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (j.fd_ < 0) throw std::runtime_error("cannot open journal " + path.string() + " for append");
    j.fsync_ = fsync_each;
    j.path_ = path;
    return j;
  }

  /// In-memory journal seeded with already-verified events.
  static Journal from_events(std::vector<Event> events) {
    Journal j;
    for (auto& e : events) {
      if (e.seq != static_cast<std::int64_t>(j.events_.size())) throw IntegrityError(static_cast<std::int64_t>(j.events_.size()), "sequence gap");
      j.admit(e.payload, e.seq);
      j.events_.push_back(std::move(e));
    }
    return j;
  }

  /// Durable before return when file-backed. Returns the sequence number.
  std::int64_t append(EventPayload payload, std::int64_t timestamp) {
    const auto seq = static_cast<std::int64_t>(events_.size());
    admit(payload, seq, /*dry_run=*/true);
    Event e{seq, timestamp, std::move(payload)};
    if (fd_ >= 0) write_record(journal_format::frame(journal_format::encode(e)));
    admit(e.payload, seq);
    events_.push_back(std::move(e));
    return seq;
  }

  const std::vector<Event>& events() const { return events_; }
  std::size_t size() const { return events_.size(); }
  bool empty() const { return events_.empty(); }
  const std::filesystem::path& path() const { return path_; }

  std::string serialize() const {
    std::string out;
    for (const auto& e : events_) out += journal_format::frame(journal_format::encode(e));
    return out;
  }

 private:
  using Slot = std::tuple<ConfigId, int, int>;  // config, bracket, rung

  // Checks references; records them unless dry_run.
  void admit(const EventPayload& payload, std::int64_t seq, bool dry_run = false) {
    auto reject = [&](const std::string& why) {
      throw JournalRejected(std::string(kind_name(payload)) + " rejected: " + why);
    };
    if (seq == 0 && !std::holds_alternative<ExperimentCreated>(payload)) reject("first event must be experiment-created");
    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, ExperimentCreated>) {
            if (seq != 0) reject("experiment already created");
          } else if constexpr (std::is_same_v<T, ConfigSampled>) {
            if (sampled_.count(p.config_id)) reject("config " + std::to_string(p.config_id) + " already sampled");
            if (!dry_run) sampled_.insert(p.config_id);
          } else if constexpr (std::is_same_v<T, JobDispatched>) {
            if (!sampled_.count(p.config_id)) reject("config " + std::to_string(p.config_id) + " was never sampled");
            if (!dry_run) outstanding_[seq] = {p.config_id, p.bracket, p.rung};
          } else if constexpr (std::is_same_v<T, ResultRecorded>) {
            auto it = outstanding_.find(p.token);
            if (it == outstanding_.end() || it->second != Slot{p.config_id, p.bracket, p.rung}) {
              reject("no outstanding dispatch " + std::to_string(p.token) + " for this config and rung");
            }
            if (!dry_run) {
              recorded_.insert(it->second);
              outstanding_.erase(it);
            }
          } else if constexpr (std::is_same_v<T, ConfigPromoted>) {
            if (!recorded_.count({p.config_id, p.bracket, p.from_rung})) {
              reject("config " + std::to_string(p.config_id) + " has no result in rung " + std::to_string(p.from_rung));
            }
          } else if constexpr (std::is_same_v<T, JobDropped>) {
            auto it = outstanding_.find(p.token);
            if (it == outstanding_.end() || it->second != Slot{p.config_id, p.bracket, p.rung}) {
              reject("no outstanding dispatch " + std::to_string(p.token));
            }
            if (!dry_run) outstanding_.erase(it);
          }
        },
        payload);
  }

  void write_record(const std::string& rec) {
    std::size_t done = 0;
    while (done < rec.size()) {
      const auto n = ::write(fd_, rec.data() + done, rec.size() - done);
      if (n < 0) throw std::runtime_error("journal write failed");
      done += static_cast<std::size_t>(n);
    }
    if (fsync_ && ::fsync(fd_) != 0) throw std::runtime_error("journal fsync failed");
  }

  void close_file() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

  struct Fd {
    int value = -1;
    Fd() = default;
    Fd(int v) : value(v) {}
    Fd(Fd&& o) noexcept : value(std::exchange(o.value, -1)) {}
    Fd& operator=(Fd&& o) noexcept {
      std::swap(value, o.value);
      return *this;
    }
    operator int() const { return value; }
  };

  std::vector<Event> events_;
  std::set<ConfigId> sampled_;
  std::map<std::int64_t, Slot> outstanding_;
  std::set<Slot> recorded_;
  Fd fd_;
  bool fsync_ = true;
  std::filesystem::path path_;
};

// --- replay ----------------------------------------------------------------

/// Rebuilds experiment state from a journal. Promotions are taken from the
/// log, never recomputed.
inline Experiment replay(std::span<const Event> events) {
  if (events.empty()) throw IntegrityError(0, "empty journal has no experiment spec");
  const auto* created = std::get_if<ExperimentCreated>(&events.front().payload);
  if (!created || events.front().seq != 0) throw IntegrityError(0, "first event must be experiment-created");
  ExperimentSpec spec;
  try {
    spec = io::parse_spec(nlohmann::json::parse(created->spec));
  } catch (const std::exception& e) {
    throw IntegrityError(0, std::string("bad spec: ") + e.what());
  }
  Experiment exp(std::move(spec));
  for (const auto& e : events) {
    if (e.seq != exp.last_seq() + 1) throw IntegrityError(exp.last_seq() + 1, "sequence gap");
    try {
      exp.apply(e);
    } catch (const std::exception& ex) {
      throw IntegrityError(e.seq, ex.what());
    }
  }
  return exp;
}

/// Replay with the experiment settings supplied separately; events may be empty.
inline Experiment replay(const ExperimentSpec& spec, std::span<const Event> events) {
  if (events.empty()) return Experiment(spec);
  return replay(events);
}

// --- live tuner ------------------------------------------------------------

using NextJob = std::variant<Job, Blocked, Finished>;

/// Experiment plus journal under write-ahead discipline: every decision is
/// appended to the journal before it is applied.
class Tuner {
 public:
  static Tuner create(const ExperimentSpec& spec, Journal journal = {}, std::int64_t timestamp = 0) {
    if (!journal.empty()) throw std::invalid_argument("Tuner::create needs an empty journal");
    Tuner t(Experiment(spec), std::move(journal));
    t.commit(ExperimentCreated{io::to_json(spec).dump()}, timestamp);
    return t;
  }

  static Tuner recover(Journal journal) {
    Experiment exp = replay(journal.events());
    return Tuner(std::move(exp), std::move(journal));
  }

  NextJob next_job(std::string_view worker, std::int64_t timestamp) {
    Plan plan = experiment_.plan_next_job();
    if (plan.outcome == Plan::Outcome::kBlocked) return Blocked{};
    if (plan.outcome == Plan::Outcome::kFinished) {
      auto inc = experiment_.incumbent();
      return Finished{inc ? std::optional<ConfigId>(inc->config_id) : std::nullopt};
    }
    std::get<JobDispatched>(plan.events.back()).worker = std::string(worker);
    std::int64_t token = -1;
    for (auto& p : plan.events) token = commit(std::move(p), timestamp);
    return experiment_.job(token);
  }

  /// Rejects unknown tokens; a repeat of an already-recorded token is a
  /// duplicate.
  void record_result(std::int64_t token, double loss, std::int64_t timestamp, std::string checkpoint = {}) {
    auto it = experiment_.outstanding().find(token);
    if (it == experiment_.outstanding().end()) {
      throw RejectedReport(experiment_.settled().count(token) ? RejectedReport::Reason::kDuplicate
                                                              : RejectedReport::Reason::kUnknown,
                           "token " + std::to_string(token) + " is not outstanding");
    }
    const Outstanding o = it->second;
    commit(ResultRecorded{token, o.config_id, o.bracket, o.rung, sanitize_loss(loss), std::move(checkpoint)}, timestamp);
  }

  void report_drop(std::int64_t token, std::int64_t timestamp) {
    auto it = experiment_.outstanding().find(token);
    if (it == experiment_.outstanding().end()) throw NotFound("token " + std::to_string(token) + " is not outstanding");
    const Outstanding o = it->second;
    commit(JobDropped{token, o.config_id, o.bracket, o.rung}, timestamp);
  }

  /// Widens every bracket by its share of `additional` configurations.
  void extend(std::int64_t additional, std::int64_t timestamp) {
    for (auto& p : experiment_.plan_extension(additional)) commit(std::move(p), timestamp);
  }

  const Experiment& experiment() const { return experiment_; }
  const Journal& journal() const { return journal_; }

  /// Called after every journaled event has been applied.
  using Observer = std::function<void(const Event&, const Experiment&)>;
  void set_observer(Observer fn) { observer_ = std::move(fn); }

 private:
  Tuner(Experiment exp, Journal journal) : experiment_(std::move(exp)), journal_(std::move(journal)) {}

  std::int64_t commit(EventPayload payload, std::int64_t timestamp) {
    const auto seq = journal_.append(std::move(payload), timestamp);
    experiment_.apply(journal_.events().back());
    if (observer_) observer_(journal_.events().back(), experiment_);
    return seq;
  }

  Experiment experiment_;
  Journal journal_;
  Observer observer_;
};

/// Replays `journal` and widens the experiment by `additional_n`; a
/// width-extended event is journaled even when additional_n is zero.
inline Tuner resume(Journal journal, std::int64_t additional_n, std::int64_t timestamp = 0) {
  Tuner t = Tuner::recover(std::move(journal));
  t.extend(additional_n, timestamp);
  return t;
}

// --- checkpoints -----------------------------------------------------------

struct CheckpointRef {
  std::string id;  // equal to the digest; blobs are content-addressed
  ConfigId config_id = 0;
  int rung = 0;
  std::string digest;  // SHA-256, lowercase hex
  std::uint64_t size = 0;
  friend bool operator==(const CheckpointRef&, const CheckpointRef&) = default;
};

class CorruptCheckpoint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 15];
  }
  return out;
}

inline bool is_digest(std::string_view s) {
  return s.size() == 64 && s.find_first_not_of("0123456789abcdef") == std::string_view::npos;
}

/// Opaque checkpoint bytes stored under <root>/<sha256>. Contents are never
/// interpreted; reads re-hash and refuse anything that does not match.
class CheckpointStore {
 public:
  explicit CheckpointStore(std::filesystem::path root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_);
  }

  const std::filesystem::path& root() const { return root_; }

  CheckpointRef put(std::string_view bytes, ConfigId config_id = 0, int rung = 0) const {
    const std::string digest = sha256_hex(bytes);
    const auto path = root_ / digest;
    if (!std::filesystem::exists(path)) {
      // Write to a unique temporary name, then rename, so a reader never
      // sees a partial blob.
      const auto tmp = root_ / (digest + ".tmp." + std::to_string(::getpid()) + "." +
                                std::to_string(reinterpret_cast<std::uintptr_t>(&bytes)));
      {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
      }
      std::filesystem::rename(tmp, path);
    }
    return {digest, config_id, rung, digest, bytes.size()};
  }

  bool contains(std::string_view digest) const {
    return is_digest(digest) && std::filesystem::exists(root_ / std::string(digest));
  }

  std::string get(std::string_view digest) const {
    if (!is_digest(digest)) throw NotFound("not a checkpoint digest: " + std::string(digest));
    const auto path = root_ / std::string(digest);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFound("no checkpoint " + std::string(digest));
    std::stringstream ss;
    ss << in.rdbuf();
    std::string bytes = ss.str();
    if (sha256_hex(bytes) != digest) throw CorruptCheckpoint("checkpoint " + std::string(digest) + " fails its digest");
    return bytes;
  }

 private:
  std::filesystem::path root_;
};

// --- export ----------------------------------------------------------------

/// wall_time,config_id,rung,bracket,loss
inline std::string export_csv(std::span<const Event> events) {
  std::string out = "wall_time,config_id,rung,bracket,loss\n";
  for (const auto& e : events) {
    if (const auto* r = std::get_if<ResultRecorded>(&e.payload)) {
      out += std::to_string(e.timestamp) + "," + std::to_string(r->config_id) + "," + std::to_string(r->rung) + "," +
             std::to_string(r->bracket) + "," + canonical(r->loss) + "\n";
    }
  }
  return out;
}

inline std::string export_jsonlines(std::span<const Event> events) {
  std::string out;
  for (const auto& e : events) out += journal_format::encode(e) + "\n";
  return out;
}

}  // namespace asha
