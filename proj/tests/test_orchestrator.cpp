#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include <gtest/gtest.h>

#include "asha/journal.hpp"
#include "asha/orchestrator.hpp"
#include "asha/random.hpp"
#include "asha/spec_io.hpp"
#include "oracles.hpp"

using namespace asha;

namespace {

ExperimentSpec base_spec(Mode mode, std::int64_t n, Resource R = 256) {
  ExperimentSpec spec;
  spec.space.dimensions.push_back(Dimension::linear("x", 0.0, 1.0));
  spec.mode = mode;
  spec.max_resource = R;
  spec.n = n;
  return spec;
}

ExperimentSpec fig1_spec(Mode mode, std::int64_t n) {
  auto spec = base_spec(mode, n, 9);
  spec.min_resource = 1;
  spec.eta = 3;
  return spec;
}

// Runs a tuner to completion with `workers` jobs in flight, finishing them
// in random order. Returns every job handed out.
std::vector<Job> drive(Tuner& t, int workers, std::uint64_t seed, int max_steps = 100000) {
  std::mt19937_64 rng(seed);
  std::vector<Job> running, all;
  std::int64_t clock = 0;
  for (int step = 0; step < max_steps; ++step) {
    while (static_cast<int>(running.size()) < workers) {
      auto next = t.next_job("w", ++clock);
      if (!std::holds_alternative<Job>(next)) break;
      running.push_back(std::get<Job>(next));
      all.push_back(running.back());
    }
    if (running.empty()) break;
    const std::size_t pick = std::uniform_int_distribution<std::size_t>(0, running.size() - 1)(rng);
    const Job j = running[pick];
    running.erase(running.begin() + static_cast<std::ptrdiff_t>(pick));
    const double quality = random::Stream(random::derive(seed, static_cast<std::uint64_t>(j.config_id))).uniform();
    t.record_result(j.token, quality + 1.0 / static_cast<double>(j.resource), ++clock);
  }
  return all;
}

}  // namespace

TEST(Defaults, ProductionSettings) {
  const auto d = default_settings(256);
  EXPECT_EQ(d.eta, 4);
  EXPECT_EQ(d.min_resource, 1);
  EXPECT_EQ(d.brackets, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(default_settings(100).min_resource, 1);
  EXPECT_EQ(default_settings(1000).min_resource, 4);
  EXPECT_EQ(default_settings(512).min_resource, 2);
  const auto one = default_settings(1);
  EXPECT_EQ(one.min_resource, 1);
  EXPECT_EQ(one.brackets, (std::vector<int>{0}));
  EXPECT_THROW(default_settings(0), std::invalid_argument);
}

TEST(Defaults, BracketSets) {
  EXPECT_EQ(bracket_rates(BracketSet::kAggressive, 4), (std::vector<int>{0}));
  EXPECT_EQ(bracket_rates(BracketSet::kConservative, 4), (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(bracket_rates(BracketSet::kConservative, 2), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(bracket_rates(BracketSet::kExplicit, 4, {3, 1, 3}), (std::vector<int>{1, 3}));
}

TEST(AverageResource, DefaultBrackets) {
  EXPECT_EQ(average_resource(0, 1, 256, 4), Rational(5, 256));
  EXPECT_EQ(average_resource(1, 1, 256, 4), Rational(4, 64));
  EXPECT_EQ(average_resource(2, 1, 256, 4), Rational(3, 16));
  EXPECT_EQ(average_resource(4, 1, 256, 4), Rational(1, 1));
  EXPECT_THROW(average_resource(5, 1, 256, 4), std::invalid_argument);
}

TEST(AllocateConfigs, ThousandAcrossStandardBrackets) {
  const auto split = allocate_configs(1000, {0, 1, 2}, 1, 256, 4);
  EXPECT_EQ(split, (std::map<int, std::int64_t>{{0, 706}, {1, 221}, {2, 73}}));
  EXPECT_EQ(split, oracle::split(1000, {0, 1, 2}, 4, 4));
  // Reference shares, within half a percentage point.
  EXPECT_NEAR(split.at(0) / 1000.0, 0.705, 0.005);
  EXPECT_NEAR(split.at(1) / 1000.0, 0.221, 0.005);
  EXPECT_NEAR(split.at(2) / 1000.0, 0.071, 0.005);
}

TEST(AllocateConfigs, EdgeCases) {
  EXPECT_EQ(allocate_configs(50, {0}, 1, 256, 4), (std::map<int, std::int64_t>{{0, 50}}));
  const auto three = allocate_configs(3, {0, 1, 2}, 1, 256, 4);
  for (const auto& [s, n] : three) EXPECT_GE(n, 1) << "s=" << s;
  EXPECT_THROW(allocate_configs(2, {0, 1, 2}, 1, 256, 4), std::invalid_argument);
  EXPECT_THROW(allocate_configs(5, {}, 1, 256, 4), std::invalid_argument);
}

TEST(AllocateConfigs, MatchesOracleAndStaysBudgetNeutral) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 400; ++trial) {
    const int eta = std::uniform_int_distribution<int>(2, 5)(rng);
    const int s_max = std::uniform_int_distribution<int>(1, 5)(rng);
    const Resource R = checked_pow(eta, s_max);
    std::vector<int> rates;
    for (int s = 0; s <= s_max; ++s) {
      if (rng() % 2 || s == 0) rates.push_back(s);
    }
    const std::int64_t n = std::uniform_int_distribution<std::int64_t>(200, 20000)(rng);
    const auto split = allocate_configs(n, rates, 1, R, eta);
    std::int64_t sum = 0;
    for (const auto& [s, k] : split) sum += k;
    ASSERT_EQ(sum, n);
    const auto expect = oracle::split(n, rates, s_max, eta);
    bool floor_hit = false;
    for (const auto& [s, k] : expect) floor_hit |= k == 0;
    if (!floor_hit) {
      EXPECT_EQ(split, expect);
    }
    // Equal total resource per bracket, up to one configuration's worth.
    double lo = INFINITY, hi = -INFINITY, widest = 0;
    for (int s : rates) {
      const double avg = average_resource(s, 1, R, eta).value();
      const double budget = static_cast<double>(split.at(s)) * avg;
      lo = std::min(lo, budget);
      hi = std::max(hi, budget);
      widest = std::max(widest, avg);
    }
    if (!floor_hit) {
      EXPECT_LE(hi - lo, widest + 1e-9);
    }
  }
}

TEST(ValidateSpec, ReportsFields) {
  auto spec = base_spec(Mode::kAsyncHyperband, 0);
  spec.eta = 1;
  spec.space.dimensions.push_back(Dimension::log("lr", 0, 1));
  const auto errs = validate_spec(spec);
  ASSERT_EQ(errs.size(), 3u);
  EXPECT_EQ(errs[0], (FieldError{"space.lr", "log scale requires positive lower bound"}));
  EXPECT_EQ(errs[1], (FieldError{"n", "must be >= 1"}));
  EXPECT_EQ(errs[2].field, "eta");

  auto small = base_spec(Mode::kAsyncHyperband, 2);
  EXPECT_EQ(validate_spec(small).front().field, "n");
  auto r_above = base_spec(Mode::kAsha, 10, 8);
  r_above.min_resource = 9;
  EXPECT_EQ(validate_spec(r_above).front(), (FieldError{"r", "must not exceed R"}));
  auto bad_rate = base_spec(Mode::kAsha, 10);
  bad_rate.bracket_set = BracketSet::kExplicit;
  bad_rate.brackets = {7};
  EXPECT_EQ(validate_spec(bad_rate).front().field, "brackets");
  // A synchronous s=0 bracket over five rungs needs eta^4 configurations.
  EXPECT_EQ(validate_spec(base_spec(Mode::kSyncSha, 255)).size(), 1u);
  EXPECT_TRUE(validate_spec(base_spec(Mode::kSyncSha, 256)).empty());
  EXPECT_THROW(Experiment(base_spec(Mode::kAsha, 0)), std::invalid_argument);
}

TEST(ValidateSpec, JsonErrorsNameFields) {
  const auto doc = nlohmann::json::parse(R"({"space": {"dimensions": []}, "n": "lots", "R": 0, "mode": "fast"})");
  try {
    io::parse_spec(doc);
    FAIL();
  } catch (const SpecError& e) {
    std::vector<std::string> fields;
    for (const auto& f : e.errors()) fields.push_back(f.field);
    EXPECT_EQ(fields, (std::vector<std::string>{"n", "mode"}));
  }
  const auto minimal = io::parse_spec(nlohmann::json::parse(R"({"space": {"dimensions": []}, "n": 9, "R": 256})"));
  EXPECT_EQ(minimal.mode, Mode::kAsyncHyperband);
  EXPECT_EQ(minimal.eta, 4);
  EXPECT_EQ(resolved_min_resource(minimal), 1);
  EXPECT_EQ(io::parse_spec(io::to_json(minimal)), minimal);
}

TEST(Incumbent, DeeperRungWinsOverLowerLoss) {
  IncumbentTracker t;
  t.observe_result({7, 0.40, 1, 0, 0, 1});
  EXPECT_EQ(t.current(Accounting::kByRung)->config_id, 7);
  t.observe_result({1, 0.30, 2, 1, 0, 4});
  t.observe_result({2, 0.32, 3, 2, 0, 16});
  EXPECT_EQ(t.current(Accounting::kByRung)->config_id, 2);
  t.observe_result({3, 0.10, 4, 1, 0, 4});
  EXPECT_EQ(t.current(Accounting::kByRung)->config_id, 2);
  EXPECT_FALSE(t.current(Accounting::kByBracket));
}

TEST(Incumbent, ByBracketWaitsForBracketEnd) {
  auto tuner = Tuner::create(fig1_spec(Mode::kAsha, 9));
  auto first = std::get<Job>(tuner.next_job("w", 1));
  tuner.record_result(first.token, 0.4, 2);
  EXPECT_EQ(tuner.experiment().incumbent(Accounting::kByRung)->config_id, first.config_id);
  EXPECT_FALSE(tuner.experiment().incumbent(Accounting::kByBracket));
  drive(tuner, 3, 1);
  EXPECT_TRUE(tuner.experiment().finished());
  const auto by_bracket = tuner.experiment().incumbent(Accounting::kByBracket);
  ASSERT_TRUE(by_bracket);
  EXPECT_EQ(by_bracket->resource, 9);
}

TEST(NextJob, AsyncHyperbandRoundRobinFromLowestRate) {
  auto tuner = Tuner::create(base_spec(Mode::kAsyncHyperband, 1000));
  std::vector<int> order;
  for (int i = 0; i < 6; ++i) order.push_back(std::get<Job>(tuner.next_job("w", i)).s);
  EXPECT_EQ(order, (std::vector<int>{0, 1, 2, 0, 1, 2}));
}

TEST(NextJob, AshaBlocksAtWidthThenFinishes) {
  auto tuner = Tuner::create(fig1_spec(Mode::kAsha, 3));
  std::vector<Job> jobs;
  for (int i = 0; i < 3; ++i) jobs.push_back(std::get<Job>(tuner.next_job("w", i)));
  EXPECT_TRUE(std::holds_alternative<Blocked>(tuner.next_job("w", 3)));
  tuner.record_result(jobs[0].token, 0.5, 4);
  tuner.record_result(jobs[1].token, 0.2, 5);
  EXPECT_TRUE(std::holds_alternative<Blocked>(tuner.next_job("w", 6)));
  tuner.record_result(jobs[2].token, 0.9, 7);
  const auto promo = std::get<Job>(tuner.next_job("w", 8));
  EXPECT_EQ(promo.config_id, jobs[1].config_id);
  EXPECT_EQ(promo.rung, 1);
  EXPECT_EQ(promo.resource, 3);
  EXPECT_EQ(promo.prior_resource, 1);
  tuner.record_result(promo.token, 0.1, 9);
  const auto done = tuner.next_job("w", 10);
  ASSERT_TRUE(std::holds_alternative<Finished>(done));
  EXPECT_EQ(std::get<Finished>(done).best, jobs[1].config_id);
}

TEST(NextJob, RetryPrecedesNewWork) {
  auto tuner = Tuner::create(fig1_spec(Mode::kAsha, 9));
  const auto a = std::get<Job>(tuner.next_job("w1", 0));
  tuner.report_drop(a.token, 1);
  const auto again = std::get<Job>(tuner.next_job("w2", 2));
  EXPECT_EQ(again.config_id, a.config_id);
  EXPECT_NE(again.token, a.token);
  EXPECT_THROW(tuner.record_result(a.token, 0.1, 3), RejectedReport);
  EXPECT_THROW(tuner.report_drop(a.token, 3), NotFound);
}

TEST(NextJob, StoppingRespectsPerBracketWidths) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto spec = base_spec(Mode::kAsyncHyperband, 100 + static_cast<std::int64_t>(seed) * 37);
    spec.seed = seed;
    auto tuner = Tuner::create(spec);
    drive(tuner, 1 + static_cast<int>(seed % 7), seed);
    const auto& exp = tuner.experiment();
    EXPECT_TRUE(exp.finished());
    const auto widths = allocate_configs(spec.n, {0, 1, 2}, 1, 256, 4);
    std::int64_t sampled = 0;
    for (const auto& br : exp.brackets()) {
      EXPECT_EQ(br.sampled_count(), widths.at(br.params().s));
      sampled += br.sampled_count();
    }
    EXPECT_EQ(sampled, spec.n);
    EXPECT_EQ(exp.next_config_id(), spec.n);
  }
}

TEST(NextJob, SyncShaBarrierAndWidths) {
  auto tuner = Tuner::create(fig1_spec(Mode::kSyncSha, 9));
  std::vector<Job> rung0;
  for (int i = 0; i < 9; ++i) rung0.push_back(std::get<Job>(tuner.next_job("w", i)));
  EXPECT_TRUE(std::holds_alternative<Blocked>(tuner.next_job("w", 9)));
  for (int i = 0; i < 8; ++i) tuner.record_result(rung0[i].token, 1.0 + i, 10 + i);
  EXPECT_TRUE(std::holds_alternative<Blocked>(tuner.next_job("w", 20)));
  tuner.record_result(rung0[8].token, 0.5, 21);
  std::vector<ConfigId> promoted;
  for (int i = 0; i < 3; ++i) {
    const auto j = std::get<Job>(tuner.next_job("w", 22 + i));
    EXPECT_EQ(j.rung, 1);
    EXPECT_EQ(j.resource, 3);
    promoted.push_back(j.config_id);
  }
  std::sort(promoted.begin(), promoted.end());
  EXPECT_EQ(promoted, (std::vector<ConfigId>{rung0[0].config_id, rung0[1].config_id, rung0[8].config_id}));
  EXPECT_TRUE(std::holds_alternative<Blocked>(tuner.next_job("w", 30)));
}

TEST(NextJob, SyncHyperbandRunsEveryBracket) {
  auto spec = fig1_spec(Mode::kSyncHyperband, 30);
  spec.bracket_set = BracketSet::kExplicit;
  spec.brackets = {0, 1, 2};
  auto tuner = Tuner::create(spec);
  drive(tuner, 4, 9);
  const auto& exp = tuner.experiment();
  EXPECT_TRUE(exp.finished());
  EXPECT_EQ(exp.finished_brackets(), (std::set<int>{0, 1, 2}));
  EXPECT_EQ(exp.bracket(0).rung(2).completed().size(), static_cast<std::size_t>(exp.bracket(0).width_limit().value() / 9));
}

TEST(NextJob, UnboundedSyncReopensBrackets) {
  auto spec = fig1_spec(Mode::kSyncSha, 9);
  spec.unbounded = true;
  auto tuner = Tuner::create(spec);
  drive(tuner, 2, 4, 40);
  EXPECT_GT(tuner.experiment().brackets().size(), 1u);
  EXPECT_FALSE(tuner.experiment().finished());
}

TEST(NextJob, UnboundedAsyncNeverBlocksOnWidth) {
  auto spec = fig1_spec(Mode::kAsha, 3);
  spec.unbounded = true;
  auto tuner = Tuner::create(spec);
  for (int i = 0; i < 50; ++i) EXPECT_TRUE(std::holds_alternative<Job>(tuner.next_job("w", i)));
}

TEST(Extension, WidensAsyncAndRejectsSync) {
  auto tuner = Tuner::create(fig1_spec(Mode::kAsha, 3));
  drive(tuner, 2, 5);
  EXPECT_TRUE(tuner.experiment().finished());
  tuner.extend(6, 100);
  EXPECT_FALSE(tuner.experiment().finished());
  drive(tuner, 2, 6);
  EXPECT_TRUE(tuner.experiment().finished());
  EXPECT_EQ(tuner.experiment().bracket(0).sampled_count(), 9);

  auto sync = Tuner::create(fig1_spec(Mode::kSyncSha, 9));
  EXPECT_THROW(sync.extend(3, 0), std::invalid_argument);
  EXPECT_NO_THROW(sync.extend(0, 0));
}

TEST(Properties, ByRungIncumbentIsLexicographicallyMonotone) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto spec = base_spec(Mode::kAsyncHyperband, 300);
    spec.seed = seed;
    auto tuner = Tuner::create(spec);
    drive(tuner, 8, seed);
    const auto& h = tuner.experiment().incumbents().history(Accounting::kByRung);
    ASSERT_FALSE(h.empty());
    for (std::size_t i = 1; i < h.size(); ++i) {
      EXPECT_LE(h[i - 1].time, h[i].time);
      EXPECT_TRUE(h[i].resource > h[i - 1].resource ||
                  (h[i].resource == h[i - 1].resource && h[i].loss <= h[i - 1].loss));
    }
  }
}

TEST(Properties, RunnableCountTracksPlans) {
  auto tuner = Tuner::create(base_spec(Mode::kAsyncHyperband, 50));
  EXPECT_GT(tuner.experiment().runnable_count(), 0u);
  drive(tuner, 4, 2);
  EXPECT_EQ(tuner.experiment().runnable_count(), 0u);
}
