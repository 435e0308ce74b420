#include <catch2/catch_amalgamated.hpp>

#include <limits>
#include <random>

#include "percdl/core.hpp"

using namespace percdl;

namespace {

TimeSeriesDataset make_dataset(Index S, Index N, Index P) {
  TimeSeriesDataset d;
  for (Index s = 0; s < S; ++s) d.series.push_back(Mat::Random(N, P));
  return d;
}

}  // namespace

TEST_CASE("validate_dataset accepts well-formed input") {
  REQUIRE_NOTHROW(validate_dataset(make_dataset(2, 500, 1)));
}

TEST_CASE("validate_dataset rejects ragged series") {
  auto d = make_dataset(3, 500, 1);
  d.series[1] = Mat::Random(499, 1);
  REQUIRE_THROWS_WITH(validate_dataset(d), Catch::Matchers::ContainsSubstring("ragged"));
}

TEST_CASE("validate_dataset rejects non-finite values") {
  auto d = make_dataset(1, 10, 2);
  d.series[0](3, 0) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_WITH(validate_dataset(d), Catch::Matchers::ContainsSubstring("non-finite"));
}

TEST_CASE("validate_dataset rejects empty dataset") {
  REQUIRE_THROWS_WITH(validate_dataset(TimeSeriesDataset{}),
                      Catch::Matchers::ContainsSubstring("empty"));
}

TEST_CASE("validate_dataset rejects label count mismatch") {
  auto d = make_dataset(2, 10, 1);
  d.labels = {"only one"};
  REQUIRE_THROWS(validate_dataset(d));
}

TEST_CASE("normalize_atom single coordinate") {
  Mat atom = Mat::Zero(5, 1);
  atom(2, 0) = 3.0;
  auto [unit, norm] = normalize_atom(atom);
  REQUIRE(norm == 3.0);
  REQUIRE(unit(2, 0) == 1.0);
  REQUIRE(unit.norm() == Catch::Approx(1.0));
}

TEST_CASE("normalize_atom keeps unit atoms unchanged") {
  Mat atom(2, 1);
  atom << 0.6, 0.8;
  auto [unit, norm] = normalize_atom(atom);
  REQUIRE(norm == Catch::Approx(1.0));
  REQUIRE((unit - atom).norm() < 1e-15);
}

TEST_CASE("normalize_atom hand-computed Pythagorean") {
  Mat atom(2, 1);
  atom << 3.0, 4.0;
  auto [unit, norm] = normalize_atom(atom);
  REQUIRE(norm == Catch::Approx(5.0));
  REQUIRE(unit(0, 0) == Catch::Approx(0.6));
  REQUIRE(unit(1, 0) == Catch::Approx(0.8));
}

TEST_CASE("normalize_atom rejects the zero atom") {
  REQUIRE_THROWS_WITH(normalize_atom(Mat::Zero(4, 2)),
                      Catch::Matchers::ContainsSubstring("degenerate"));
}

TEST_CASE("normalize_atom is idempotent") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    Mat atom(8, 3);
    for (Index i = 0; i < atom.rows(); ++i)
      for (Index j = 0; j < atom.cols(); ++j) atom(i, j) = g(rng);
    auto [once, n1] = normalize_atom(atom);
    (void)n1;
    auto [twice, n2] = normalize_atom(once);
    REQUIRE((twice - once).norm() < 1e-12);
    REQUIRE(std::abs(n2 - 1.0) < 1e-12);
  }
}

TEST_CASE("activation checker accepts disjoint windows") {
  auto acts = ActivationSet::zeros(1, 2, 100, 10);
  acts.lists[0][0] = {{0, 1.0}, {20, 0.5}};
  acts.lists[0][1] = {{10, 2.0}, {55, 1.5}};
  REQUIRE_NOTHROW(check_activation_invariants(acts));
}

TEST_CASE("activation checker rejects overlapping windows across atoms") {
  auto acts = ActivationSet::zeros(1, 2, 100, 10);
  acts.lists[0][0] = {{0, 1.0}};
  acts.lists[0][1] = {{9, 1.0}};
  REQUIRE_THROWS_WITH(check_activation_invariants(acts),
                      Catch::Matchers::ContainsSubstring("overlapping"));
}

TEST_CASE("activation checker rejects negative amplitudes and bad ordering") {
  auto acts = ActivationSet::zeros(1, 1, 100, 10);
  acts.lists[0][0] = {{0, -1.0}};
  REQUIRE_THROWS(check_activation_invariants(acts));
  acts.lists[0][0] = {{30, 1.0}, {10, 1.0}};
  REQUIRE_THROWS(check_activation_invariants(acts));
  acts.lists[0][0] = {{95, 1.0}};
  REQUIRE_THROWS(check_activation_invariants(acts));
}

TEST_CASE("FitConfig validation") {
  FitConfig cfg;
  REQUIRE_NOTHROW(cfg.validate());
  cfg.lambda = -1.0;
  REQUIRE_THROWS(cfg.validate());
  cfg = {};
  cfg.sigma_interp = 0.0;
  REQUIRE_THROWS(cfg.validate());
  cfg = {};
  cfg.theta_margin = 1.0;
  REQUIRE_THROWS(cfg.validate());
}
