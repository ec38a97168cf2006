#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "asha/scheduler.hpp"
#include "oracles.hpp"

using namespace asha;

namespace {

std::vector<std::int64_t> fill(std::vector<std::int64_t> caps, std::int64_t capacity) {
  return water_fill(caps, std::vector<double>(caps.size(), 1.0), capacity);
}

// Every non-decreasing tuple of `k` caps drawn from 0..max_cap.
void sorted_tuples(int k, std::int64_t max_cap, std::vector<std::int64_t>& cur,
                   const std::function<void(const std::vector<std::int64_t>&)>& fn) {
  if (static_cast<int>(cur.size()) == k) {
    fn(cur);
    return;
  }
  for (std::int64_t c = cur.empty() ? 0 : cur.back(); c <= max_cap; ++c) {
    cur.push_back(c);
    sorted_tuples(k, max_cap, cur, fn);
    cur.pop_back();
  }
}

}  // namespace

TEST(Scaling, EfficiencyCap) {
  EXPECT_EQ(max_gpus_for_efficiency(OverheadScaling(1.0 / 45.0), 0.75, 1024), 16);
  EXPECT_EQ(max_gpus_for_efficiency(OverheadScaling(0.3), 1.0, 64), 1);
  EXPECT_EQ(max_gpus_for_efficiency(OverheadScaling(0.0), 0.9, 48), 48);
  for (double alpha : {0.01, 0.05, 0.2}) {
    for (double tau : {0.5, 0.6, 0.8}) {
      const int closed = static_cast<int>(std::floor(1.0 + (1.0 / tau - 1.0) / alpha + 1e-9));
      EXPECT_EQ(max_gpus_for_efficiency(OverheadScaling(alpha), tau, 100000), closed) << alpha << " " << tau;
    }
  }
  EXPECT_THROW(max_gpus_for_efficiency(OverheadScaling(), 0.0, 4), std::invalid_argument);
  EXPECT_THROW(OverheadScaling(-1.0), std::invalid_argument);
}

TEST(Scaling, DefaultModelInvariants) {
  const OverheadScaling m;
  EXPECT_DOUBLE_EQ(m.speedup(1), 1.0);
  for (int g = 2; g < 200; ++g) {
    EXPECT_GE(m.speedup(g), m.speedup(g - 1));
    EXPECT_LE(m.speedup(g), g);
  }
}

TEST(Demand, CapIsKappaTimesStack) {
  EXPECT_EQ(demand("a", 4, 8).cap(), 32);
  EXPECT_EQ(demand("a", 4, 0).cap(), 0);
  EXPECT_EQ(demand("a", 2, 3).cap(), 6);
  EXPECT_EQ(demand("a", 2, 3, 1.0, 4).cap(), 10);
  EXPECT_THROW(demand("a", -1, 3), std::invalid_argument);
  EXPECT_THROW(demand("a", 1, 3, 0.0), std::invalid_argument);
}

TEST(WaterFill, Scenarios) {
  EXPECT_EQ(fill({32}, 32), (std::vector<std::int64_t>{32}));
  EXPECT_EQ(fill({32, 64}, 32), (std::vector<std::int64_t>{16, 16}));
  EXPECT_EQ(fill({8, 64}, 32), (std::vector<std::int64_t>{8, 24}));
  EXPECT_EQ(fill({}, 32), (std::vector<std::int64_t>{}));
  EXPECT_EQ(fill({3, 0, 5}, 0), (std::vector<std::int64_t>{0, 0, 0}));
  EXPECT_EQ(fill({3, 2}, 100), (std::vector<std::int64_t>{3, 2}));
  EXPECT_EQ(fill({5, 5, 5}, 10), (std::vector<std::int64_t>{4, 3, 3}));
  const auto by_name = water_fill({demand("a", 4, 8), demand("b", 4, 16)}, 32);
  EXPECT_EQ(by_name, (std::map<std::string, std::int64_t>{{"a", 16}, {"b", 16}}));
}

TEST(WaterFill, Weighted) {
  EXPECT_EQ(water_fill({100, 100}, {1.0, 3.0}, 40), (std::vector<std::int64_t>{10, 30}));
  EXPECT_EQ(water_fill({5, 100}, {1.0, 3.0}, 40), (std::vector<std::int64_t>{5, 35}));
  EXPECT_EQ(oracle::check_water_fill({1, 2}, {1.0, 10.0}, 2, water_fill({1, 2}, {1.0, 10.0}, 2)), "");
}

TEST(WaterFill, ExhaustiveEqualWeights) {
  long cases = 0;
  for (int k = 1; k <= 4; ++k) {
    for (std::int64_t capacity = 0; capacity <= 8; ++capacity) {
      std::vector<std::int64_t> cur;
      sorted_tuples(k, capacity + 1, cur, [&](const std::vector<std::int64_t>& caps) {
        const std::vector<double> w(caps.size(), 1.0);
        auto x = water_fill(caps, w, capacity);
        ASSERT_EQ(oracle::check_water_fill(caps, w, capacity, x), "") << ::testing::PrintToString(caps) << " C=" << capacity;
        std::vector<std::int64_t> rev(caps.rbegin(), caps.rend());
        auto y = water_fill(rev, w, capacity);
        ASSERT_EQ(oracle::check_water_fill(rev, w, capacity, y), "") << ::testing::PrintToString(rev) << " C=" << capacity;
        ++cases;
      });
    }
  }
  EXPECT_GT(cases, 1000);
}

TEST(WaterFill, RandomWeightedProperty) {
  std::mt19937_64 rng(11);
  const double weights[] = {0.5, 1.0, 1.5, 2.0, 3.0, 7.0};
  for (int trial = 0; trial < 5000; ++trial) {
    const int k = std::uniform_int_distribution<int>(1, 6)(rng);
    std::vector<std::int64_t> caps;
    std::vector<double> w;
    for (int i = 0; i < k; ++i) {
      caps.push_back(std::uniform_int_distribution<std::int64_t>(0, 40)(rng));
      w.push_back(weights[rng() % 6]);
    }
    const auto capacity = std::uniform_int_distribution<std::int64_t>(0, 120)(rng);
    const auto x = water_fill(caps, w, capacity);
    ASSERT_EQ(oracle::check_water_fill(caps, w, capacity, x), "")
        << ::testing::PrintToString(caps) << " w=" << ::testing::PrintToString(w) << " C=" << capacity;
  }
}

TEST(TaskStack, LifoWithObserver) {
  TaskStack<int> s;
  std::vector<std::size_t> sizes;
  s.set_observer([&](std::size_t n) { sizes.push_back(n); });
  s.push(1);
  s.push(2);
  s.push(3);
  EXPECT_EQ(s.top(), 3);
  EXPECT_EQ(s.pop(), 3);
  s.push(4);
  EXPECT_EQ(s.pop(), 4);
  EXPECT_EQ(s.pop(), 2);
  EXPECT_EQ(s.pop(), 1);
  EXPECT_EQ(s.pop(), std::nullopt);
  EXPECT_EQ(sizes, (std::vector<std::size_t>{1, 2, 3, 2, 3, 2, 1, 0}));
}

TEST(TaskStack, DemandFollowsStack) {
  ClusterScheduler sched(32);
  TaskStack<std::string> s;
  s.set_observer([&](std::size_t n) { sched.update(demand("exp", 4, static_cast<std::int64_t>(n))); });
  for (int i = 0; i < 8; ++i) s.push("cfg" + std::to_string(i));
  EXPECT_EQ(sched.demands().at("exp").cap(), 32);
  s.pop();
  EXPECT_EQ(sched.demands().at("exp").cap(), 28);
}

TEST(Rebalance, SecondExperimentHalvesTheFirst) {
  ClusterScheduler sched(32);
  sched.update(demand("one", 4, 8));
  auto d = sched.rebalance(1);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0], (Directive{"one", 0, 32, 32, 0}));
  // All eight tasks now run; the stack is empty but running work still counts.
  sched.update(demand("one", 4, 0, 1.0, 32));
  EXPECT_TRUE(sched.rebalance(2).empty());
  sched.update(demand("two", 4, 16));
  d = sched.rebalance(3);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[0], (Directive{"one", 32, 16, 0, 16}));
  EXPECT_TRUE(d[0].is_preempt());
  EXPECT_EQ(d[1], (Directive{"two", 0, 16, 16, 0}));
  EXPECT_TRUE(sched.rebalance(4).empty());
  EXPECT_EQ(sched.allocation("one"), 16);
}

TEST(Rebalance, ZeroCapacityPreemptsEverything) {
  ClusterScheduler sched(16);
  sched.update(demand("a", 1, 10));
  sched.update(demand("b", 1, 10));
  sched.rebalance(0);
  sched.set_capacity(0);
  const auto d = sched.rebalance(1);
  ASSERT_EQ(d.size(), 2u);
  for (const auto& x : d) {
    EXPECT_TRUE(x.is_preempt());
    EXPECT_EQ(x.allocation, 0);
  }
  EXPECT_THROW(sched.set_capacity(-1), std::invalid_argument);
}

TEST(Rebalance, RemovalFreesCapacityAndDumpRecordsTicks) {
  ClusterScheduler sched(10);
  sched.set_history_limit(3);
  sched.update(demand("a", 1, 10));
  sched.update(demand("b", 1, 10));
  sched.rebalance(0);
  sched.remove("b");
  const auto d = sched.rebalance(1);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].allocation, 10);
  EXPECT_EQ(sched.dump_csv(),
            "tick,experiment,cap,weight,allocation\n"
            "0,a,10,1.000000,5\n"
            "0,b,10,1.000000,5\n"
            "1,a,10,1.000000,10\n");
}
