#include <gtest/gtest.h>

#include "support.hpp"

using namespace drq;

namespace {

SearchProblem problem(std::vector<int> candidates, std::vector<double> weights, std::int64_t sum,
                      Sense sense = Sense::maximize) {
  return {std::move(candidates), std::move(weights), sum, sense};
}

// Exhaustive optimum; nullopt when the sum is unreachable.
std::optional<double> brute_force(const SearchProblem& p) {
  const std::size_t L = p.layers(), n = p.candidates.size();
  std::optional<double> best;
  std::vector<std::size_t> idx(L, 0);
  for (;;) {
    std::int64_t sum = 0;
    double obj = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      sum += p.candidates[idx[l]];
      obj += p.weights[l] * p.candidates[idx[l]];
    }
    if (sum == p.target_sum && (!best || (p.sense == Sense::maximize ? obj > *best : obj < *best))) best = obj;
    std::size_t l = 0;
    while (l < L && ++idx[l] == n) idx[l++] = 0;
    if (l == L) break;
  }
  return best;
}

SensitivityProfile profile_of(std::vector<double> traces, std::vector<std::size_t> params) {
  SensitivityProfile p;
  for (std::size_t i = 0; i < traces.size(); ++i) p.layers.push_back({"l" + std::to_string(i), traces[i], params[i]});
  p.recompute_mean();
  return p;
}

}  // namespace

TEST(Solve, SingleLayer) {
  const auto s = solve(problem({2, 4}, {1.0}, 4));
  EXPECT_EQ(s.bits, (std::vector<int>{4}));
}

TEST(Solve, PrefersHigherBitsOnHeavierLayers) {
  const auto s = solve(problem({2, 4}, {2.0, 1.0}, 6));
  EXPECT_EQ(s.bits, (std::vector<int>{4, 2}));
  EXPECT_DOUBLE_EQ(s.objective, 10.0);
  const auto m = solve(problem({2, 4}, {2.0, 1.0}, 6, Sense::minimize));
  EXPECT_EQ(m.bits, (std::vector<int>{2, 4}));
}

TEST(Solve, EqualWeightsTieBreakIsLexicographicHighFirst) {
  const auto s = solve(problem({2, 4, 6, 8}, {1.0, 1.0, 1.0}, 12));
  EXPECT_EQ(s.bits, (std::vector<int>{8, 2, 2}));
  EXPECT_EQ(solve(problem({2, 4, 6, 8}, {1.0, 1.0, 1.0}, 12)).bits, s.bits);
}

TEST(Solve, InfeasibleListsAchievableAverages) {
  try {
    make_search_problem(profile_of({1, 2}, {10, 10}), std::vector<int>{2, 4}, 2.5, Sense::maximize);
    FAIL();
  } catch (const InfeasibleError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2 3 4"), std::string::npos) << msg;
    EXPECT_EQ(e.exit_code(), ExitCode::infeasible);
  }
  EXPECT_THROW(make_search_problem(profile_of({1, 2}, {10, 10}), std::vector<int>{2, 4}, 5.0, Sense::maximize),
               InfeasibleError);
  EXPECT_THROW(solve(problem({2, 4}, {1.0, 1.0}, 5)), InfeasibleError);
}

TEST(Solve, WeightsAreTracePerParameter) {
  const auto p = make_search_problem(profile_of({6, 1}, {3, 1}), std::vector<int>{2, 4}, 3.0, Sense::maximize);
  EXPECT_EQ(p.weights, (std::vector<double>{2.0, 1.0}));
  EXPECT_EQ(p.target_sum, 6);
}

TEST(Solve, MatchesBruteForceOnRandomProblems) {
  Rng rng(99);
  const std::vector<std::vector<int>> sets{{2, 4}, {2, 4, 8}, {2, 4, 6, 8}, {3, 5, 8}, {2, 3, 4, 6}};
  for (int trial = 0; trial < 150; ++trial) {
    const auto& c = sets[rng.below(sets.size())];
    const std::size_t L = 1 + rng.below(7);
    std::vector<double> w(L);
    for (auto& x : w) x = rng.uniform(0.0, 3.0);
    const auto sums = achievable_sums(c, L);
    const auto p = problem(c, w, sums[rng.below(sums.size())], rng.below(2) ? Sense::maximize : Sense::minimize);
    const auto s = solve(p);
    const auto expect = brute_force(p);
    ASSERT_TRUE(expect);
    EXPECT_NEAR(s.objective, *expect, 1e-9);
    EXPECT_EQ(s.bit_sum(), p.target_sum);
  }
}

TEST(Solve, SwappingWeightsSwapsBits) {
  const auto a = solve(problem({2, 4, 8}, {3.0, 1.0, 2.0}, 14));
  const auto b = solve(problem({2, 4, 8}, {1.0, 3.0, 2.0}, 14));
  EXPECT_EQ(a.bits[0], b.bits[1]);
  EXPECT_EQ(a.bits[1], b.bits[0]);
  EXPECT_EQ(a.bits[2], b.bits[2]);
}

TEST(Enumerate, SingleLayerHasOnlyFirstSolution) {
  EXPECT_EQ(enumerate_solutions(problem({2, 4, 8}, {1.0}, 4)).size(), 1u);
}

TEST(Enumerate, TwoLayerFindsBothOrders) {
  const auto all = enumerate_solutions(problem({2, 4}, {2.0, 1.0}, 6));
  ASSERT_EQ(all.size(), 2u);
  EXPECT_EQ(all[0].bits, (std::vector<int>{4, 2}));
  EXPECT_EQ(all[1].bits, (std::vector<int>{2, 4}));
}

TEST(Enumerate, NoDuplicatesAndConstraintHolds) {
  Rng rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t L = 2 + rng.below(6);
    std::vector<double> w(L);
    for (auto& x : w) x = rng.uniform(0.1, 2.0);
    const std::vector<int> c{2, 4, 6, 8};
    const auto sums = achievable_sums(c, L);
    const auto p = problem(c, w, sums[rng.below(sums.size())]);
    const auto all = enumerate_solutions(p);
    for (std::size_t i = 0; i < all.size(); ++i) {
      EXPECT_EQ(all[i].bit_sum(), p.target_sum);
      for (std::size_t j = i + 1; j < all.size(); ++j) EXPECT_NE(all[i].bits, all[j].bits);
    }
  }
}

TEST(Pareto, Examples) {
  auto point = [](std::vector<int> bits, double acc) { return SubNetAssignment{std::move(bits), 0.0, acc}; };
  const auto single = pareto_front({point({2, 2}, 0.6)});
  ASSERT_EQ(single.size(), 1u);
  const auto front = pareto_front({point({2, 2}, 0.6), point({4, 2}, 0.7), point({2, 4}, 0.65)});
  ASSERT_EQ(front.size(), 2u);
  EXPECT_EQ(front[0].avg_bits(), 2.0);
  EXPECT_EQ(*front[1].accuracy, 0.7);
  EXPECT_EQ(pareto_front({point({4, 2}, 0.7), point({2, 4}, 0.7)}).size(), 1u);
  EXPECT_THROW(pareto_front({SubNetAssignment{{2}, 0.0, std::nullopt}}), ContractError);
}
