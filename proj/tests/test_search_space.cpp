#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include "asha/search_space.hpp"
#include "asha/spec_io.hpp"

using namespace asha;

namespace {

constexpr int kSamples = 100'000;

// Pearson statistic against equal expected counts, compared with the
// 1 - alpha quantile of chi-square with bins - 1 degrees of freedom.
bool uniform_not_rejected(const std::vector<long>& counts, double alpha = 0.001) {
  const double total = [&] {
    double t = 0;
    for (long c : counts) t += static_cast<double>(c);
    return t;
  }();
  const double expected = total / static_cast<double>(counts.size());
  double stat = 0.0;
  for (long c : counts) stat += (c - expected) * (c - expected) / expected;
  boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  return stat < boost::math::quantile(dist, 1.0 - alpha);
}

SearchSpace mixed_space() {
  return {{Dimension::linear("momentum", 0.1, 1.0), Dimension::log("lr", 1e-4, 1e-1),
           Dimension::integer("layers", 1, 8), Dimension::categorical("opt", {"sgd", "adam", "rmsprop"})}};
}

}  // namespace

TEST(ValidateSpace, AcceptsSimpleLinearDimension) {
  EXPECT_TRUE(validate_space({{Dimension::linear("x", 0.1, 1.0)}}).empty());
  EXPECT_TRUE(validate_space(mixed_space()).empty());
}

TEST(ValidateSpace, LogWithZeroLowerBound) {
  const auto v = validate_space({{Dimension::log("lr", 0.0, 1.0)}});
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0], (Violation{"lr", "log scale requires positive lower bound"}));
}

TEST(ValidateSpace, DuplicateNames) {
  const auto v = validate_space({{Dimension::linear("lr", 0, 1), Dimension::log("lr", 1e-3, 1)}});
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0], (Violation{"lr", "duplicate name"}));
}

TEST(ValidateSpace, ReportsEveryViolation) {
  const auto v = validate_space({{Dimension::linear("a", 1, 1), Dimension::categorical("b", {}),
                                  Dimension::integer("c", 3, 2), Dimension{"d", DimensionKind::kInteger, 0.5, 2, {}},
                                  Dimension::linear("", 0, 1), Dimension::linear("e", 0, INFINITY)}});
  ASSERT_EQ(v.size(), 6u);
  EXPECT_EQ(v[0].message, "lower bound must be less than upper bound");
  EXPECT_EQ(v[1].message, "categorical requires at least one choice");
  EXPECT_EQ(v[2].message, "lower bound must be less than upper bound");
  EXPECT_EQ(v[3].message, "integer bounds must be whole numbers");
  EXPECT_EQ(v[4].message, "empty name");
  EXPECT_EQ(v[5].message, "bounds must be finite");
}

TEST(Sample, RejectsInvalidSpace) {
  EXPECT_THROW(sample({{Dimension::log("lr", -1, 1)}}, 0, 0), std::invalid_argument);
}

TEST(Sample, SingleChoiceAlwaysChosen) {
  const SearchSpace space{{Dimension::categorical("opt", {"sgd"})}};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    EXPECT_EQ(std::get<std::string>(sample(space, seed, static_cast<ConfigId>(seed * 7)).values.at("opt")), "sgd");
  }
}

TEST(Sample, DeterministicInSeedAndId) {
  const auto space = mixed_space();
  EXPECT_EQ(sample(space, 42, 17), sample(space, 42, 17));
  EXPECT_NE(sample(space, 42, 17).values, sample(space, 42, 18).values);
  EXPECT_NE(sample(space, 43, 17).values, sample(space, 42, 17).values);
}

TEST(Sample, OrderOfCallsIrrelevant) {
  const auto space = mixed_space();
  std::vector<Configuration> forward, backward;
  for (ConfigId i = 0; i < 20; ++i) forward.push_back(sample(space, 9, i));
  for (ConfigId i = 19; i >= 0; --i) backward.push_back(sample(space, 9, i));
  for (ConfigId i = 0; i < 20; ++i) EXPECT_EQ(forward[i], backward[19 - i]);
}

TEST(Sample, TrailingDimensionLeavesEarlierValuesAlone) {
  auto space = mixed_space();
  const auto before = sample(space, 5, 3);
  space.dimensions.push_back(Dimension::linear("extra", 0, 1));
  const auto after = sample(space, 5, 3);
  for (const auto& [name, value] : before.values) EXPECT_EQ(after.values.at(name), value);
}

TEST(Sample, ValuesWithinBoundsAndChoices) {
  const auto space = mixed_space();
  for (ConfigId id = 0; id < 5000; ++id) {
    const auto c = sample(space, 1, id);
    ASSERT_EQ(c.values.size(), space.dimensions.size());
    const double m = std::get<double>(c.values.at("momentum"));
    EXPECT_GE(m, 0.1);
    EXPECT_LE(m, 1.0);
    const double lr = std::get<double>(c.values.at("lr"));
    EXPECT_GE(lr, 1e-4);
    EXPECT_LE(lr, 1e-1);
    const auto layers = std::get<std::int64_t>(c.values.at("layers"));
    EXPECT_GE(layers, 1);
    EXPECT_LE(layers, 8);
    const auto& opt = std::get<std::string>(c.values.at("opt"));
    EXPECT_TRUE(opt == "sgd" || opt == "adam" || opt == "rmsprop");
  }
}

TEST(Sample, LogUniformDecadeFraction) {
  const SearchSpace space{{Dimension::log("lr", 1e-4, 1e-1)}};
  int in_first_decade = 0;
  for (ConfigId id = 0; id < kSamples; ++id) {
    const double v = std::get<double>(sample(space, 2024, id).values.at("lr"));
    if (v >= 1e-4 && v <= 1e-3) ++in_first_decade;
  }
  EXPECT_NEAR(static_cast<double>(in_first_decade) / kSamples, 1.0 / 3.0, 0.01);
}

TEST(Sample, LinearUniformChiSquare) {
  const SearchSpace space{{Dimension::linear("x", -2.0, 3.0)}};
  std::vector<long> bins(100, 0);
  for (ConfigId id = 0; id < kSamples; ++id) {
    const double v = std::get<double>(sample(space, 11, id).values.at("x"));
    bins[std::min<std::size_t>(99, static_cast<std::size_t>((v + 2.0) / 5.0 * 100))]++;
  }
  EXPECT_TRUE(uniform_not_rejected(bins));
}

TEST(Sample, LogUniformChiSquareInLogSpace) {
  const SearchSpace space{{Dimension::log("lr", 1e-5, 1.0)}};
  std::vector<long> bins(50, 0);
  for (ConfigId id = 0; id < kSamples; ++id) {
    const double v = std::get<double>(sample(space, 12, id).values.at("lr"));
    const double u = (std::log10(v) + 5.0) / 5.0;
    bins[std::min<std::size_t>(49, static_cast<std::size_t>(u * 50))]++;
  }
  EXPECT_TRUE(uniform_not_rejected(bins));
}

TEST(Sample, IntegerChiSquare) {
  const SearchSpace space{{Dimension::integer("k", -3, 9)}};
  std::vector<long> bins(13, 0);
  for (ConfigId id = 0; id < kSamples; ++id) bins[std::get<std::int64_t>(sample(space, 13, id).values.at("k")) + 3]++;
  EXPECT_TRUE(uniform_not_rejected(bins));
}

TEST(Sample, CategoricalChiSquare) {
  const SearchSpace space{{Dimension::categorical("c", {"a", "b", "c", "d", "e"})}};
  std::map<std::string, long> counts;
  for (ConfigId id = 0; id < kSamples; ++id) counts[std::get<std::string>(sample(space, 14, id).values.at("c"))]++;
  ASSERT_EQ(counts.size(), 5u);
  std::vector<long> bins;
  for (const auto& [k, c] : counts) bins.push_back(c);
  EXPECT_TRUE(uniform_not_rejected(bins));
}

TEST(Canonical, DoublesRoundTripExactly) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5e17, 5e-324, 0.0}) {
    EXPECT_EQ(parse_double(canonical(v)), v) << canonical(v);
  }
  EXPECT_EQ(canonical(INFINITY), "inf");
  EXPECT_TRUE(std::isinf(parse_double("inf")));
  EXPECT_TRUE(std::isnan(parse_double("nan")));
  EXPECT_EQ(canonical(Value{std::int64_t{-7}}), "-7");
  EXPECT_THROW(parse_double("1.0x"), std::invalid_argument);
}

TEST(SpaceJson, RoundTripsAndReportsFields) {
  const auto space = mixed_space();
  EXPECT_EQ(io::parse_space(io::to_json(space)), space);

  const auto doc = nlohmann::json::parse(R"({"dimensions": [
      {"name": "lr", "kind": "continuous-log", "lower": 0, "upper": 1},
      {"name": "b", "kind": "bogus"}]})");
  std::vector<FieldError> errors;
  io::parse_space(doc, errors);
  ASSERT_EQ(errors.size(), 2u);
  EXPECT_EQ(errors[0].field, "space.dimensions[1]");
  EXPECT_EQ(errors[1], (FieldError{"space.lr", "log scale requires positive lower bound"}));
}
