#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "drq/error.hpp"
#include "drq/quantizer.hpp"
#include "drq/sensitivity.hpp"

namespace drq {

enum class Sense { maximize, minimize };

inline const char* to_string(Sense s) { return s == Sense::maximize ? "maximize" : "minimize"; }

// Separable objective sum_l w_l * b_l subject to sum_l b_l == target_sum.
struct SearchProblem {
  std::vector<int> candidates;  // allowed bit-widths
  std::vector<double> weights;  // w_l = t_l / n_l
  std::int64_t target_sum = 0;  // omega * L
  Sense sense = Sense::maximize;

  std::size_t layers() const { return weights.size(); }
  double omega() const { return static_cast<double>(target_sum) / static_cast<double>(layers()); }
};

struct SubNetAssignment {
  std::vector<int> bits;
  double objective = 0.0;
  std::optional<double> accuracy;

  std::int64_t bit_sum() const {
    std::int64_t s = 0;
    for (int b : bits) s += b;
    return s;
  }
  double avg_bits() const { return static_cast<double>(bit_sum()) / static_cast<double>(bits.size()); }
};

inline double objective_of(const SearchProblem& p, std::span<const int> bits) {
  double o = 0.0;
  for (std::size_t l = 0; l < bits.size(); ++l) o += p.weights[l] * bits[l];
  return o;
}

// Every sum of `layers` candidate bit-widths.
inline std::vector<std::int64_t> achievable_sums(std::span<const int> candidates, std::size_t layers) {
  std::set<std::int64_t> sums{0};
  for (std::size_t l = 0; l < layers; ++l) {
    std::set<std::int64_t> next;
    for (auto s : sums)
      for (int b : candidates) next.insert(s + b);
    sums = std::move(next);
  }
  return {sums.begin(), sums.end()};
}

// Builds a problem from a sensitivity profile with omega given as an average
// bit-width. omega * L must be an achievable integer sum.
inline SearchProblem make_search_problem(const SensitivityProfile& profile, std::span<const int> candidates,
                                         double omega, Sense sense) {
  const std::size_t L = profile.layers.size();
  if (L == 0) throw ConfigError("search: profile has no layers");
  SearchProblem p;
  p.candidates.assign(candidates.begin(), candidates.end());
  p.sense = sense;
  for (const auto& l : profile.layers) {
    if (l.params == 0) throw ConfigError("search: layer " + l.name + " has no parameters");
    p.weights.push_back(l.trace / static_cast<double>(l.params));
  }
  const double target = omega * static_cast<double>(L);
  const double rounded = std::round(target);
  const auto sums = achievable_sums(candidates, L);
  if (std::abs(target - rounded) > 1e-9 ||
      !std::binary_search(sums.begin(), sums.end(), static_cast<std::int64_t>(rounded))) {
    std::ostringstream msg;
    msg << "search: average bit-width " << omega << " is infeasible for " << L << " layers; achievable:";
    for (auto s : sums) msg << ' ' << static_cast<double>(s) / static_cast<double>(L);
    throw InfeasibleError(msg.str());
  }
  p.target_sum = static_cast<std::int64_t>(rounded);
  return p;
}

namespace detail {

inline bool ties(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max({1.0, std::abs(a), std::abs(b)}); }

}  // namespace detail

// Exact optimum by dynamic programming over (layer, running bit sum). Among
// optimal assignments the lexicographically first one preferring higher bits
// at earlier layers is returned. `pins[l]`, when set, fixes layer l.
inline std::optional<SubNetAssignment> solve_pinned(const SearchProblem& p,
                                                    std::span<const std::optional<int>> pins) {
  const std::size_t L = p.layers();
  if (L == 0 || p.candidates.empty()) throw ConfigError("search: empty problem");
  if (!pins.empty() && pins.size() != L) throw ContractError("search: pin vector length mismatch");
  std::vector<int> desc = p.candidates;
  std::sort(desc.begin(), desc.end(), std::greater<>());
  const int max_bit = desc.front();
  const auto max_sum = static_cast<std::int64_t>(L) * max_bit;
  if (p.target_sum < 0 || p.target_sum > max_sum) return std::nullopt;
  auto allowed = [&](std::size_t l) {
    if (!pins.empty() && pins[l]) return std::vector<int>{*pins[l]};
    return desc;
  };
  const bool maximize = p.sense == Sense::maximize;
  // best[l][s]: optimum of layers l..L-1 using exactly bit sum s.
  const auto width = static_cast<std::size_t>(max_sum + 1);
  std::vector<std::vector<std::optional<double>>> best(L + 1, std::vector<std::optional<double>>(width));
  best[L][0] = 0.0;
  for (std::size_t l = L; l-- > 0;) {
    const auto bits = allowed(l);
    for (std::size_t s = 0; s < width; ++s) {
      std::optional<double> v;
      for (int b : bits) {
        if (static_cast<std::size_t>(b) > s || !best[l + 1][s - static_cast<std::size_t>(b)]) continue;
        const double cand = p.weights[l] * b + *best[l + 1][s - static_cast<std::size_t>(b)];
        if (!v || (maximize ? cand > *v : cand < *v)) v = cand;
      }
      best[l][s] = v;
    }
  }
  const auto target = static_cast<std::size_t>(p.target_sum);
  if (!best[0][target]) return std::nullopt;
  SubNetAssignment out;
  std::size_t rem = target;
  for (std::size_t l = 0; l < L; ++l) {
    for (int b : allowed(l)) {
      if (static_cast<std::size_t>(b) > rem || !best[l + 1][rem - static_cast<std::size_t>(b)]) continue;
      const double cand = p.weights[l] * b + *best[l + 1][rem - static_cast<std::size_t>(b)];
      if (detail::ties(cand, *best[l][rem])) {
        out.bits.push_back(b);
        rem -= static_cast<std::size_t>(b);
        break;
      }
    }
  }
  out.objective = objective_of(p, out.bits);
  return out;
}

inline SubNetAssignment solve(const SearchProblem& p) {
  auto s = solve_pinned(p, {});
  if (!s) {
    std::ostringstream msg;
    msg << "search: bit sum " << p.target_sum << " is infeasible; achievable average bit-widths:";
    for (auto v : achievable_sums(p.candidates, p.layers())) msg << ' ' << static_cast<double>(v) / p.layers();
    throw InfeasibleError(msg.str());
  }
  return *s;
}

// First solution, then one re-solve per (layer, lower bit-width) pin,
// keeping distinct results in discovery order.
inline std::vector<SubNetAssignment> enumerate_solutions(const SearchProblem& p) {
  std::vector<SubNetAssignment> found{solve(p)};
  const auto first = found.front().bits;
  const int top = *std::max_element(first.begin(), first.end());
  std::vector<int> below;
  for (int b : p.candidates)
    if (b < top) below.push_back(b);
  std::vector<std::optional<int>> pins(p.layers());
  for (std::size_t l = 0; l < first.size(); ++l) {
    for (int b : below) {
      if (b == first[l]) continue;
      pins[l] = b;
      if (auto s = solve_pinned(p, pins)) {
        const bool seen = std::any_of(found.begin(), found.end(), [&](const auto& f) { return f.bits == s->bits; });
        if (!seen) found.push_back(std::move(*s));
      }
      pins[l].reset();
    }
  }
  return found;
}

// Non-dominated assignments under (maximize accuracy, minimize average
// bit-width), one per distinct point, sorted by average bit-width.
inline std::vector<SubNetAssignment> pareto_front(std::vector<SubNetAssignment> points) {
  for (const auto& p : points) {
    if (!p.accuracy) throw ContractError("pareto_front: assignment without accuracy");
  }
  std::vector<SubNetAssignment> front;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double ai = *points[i].accuracy, bi = points[i].avg_bits();
    bool dominated = false;
    for (std::size_t j = 0; j < points.size() && !dominated; ++j) {
      if (i == j) continue;
      const double aj = *points[j].accuracy, bj = points[j].avg_bits();
      dominated = aj >= ai && bj <= bi && (aj > ai || bj < bi);
    }
    if (dominated) continue;
    const bool duplicate = std::any_of(front.begin(), front.end(), [&](const auto& f) {
      return *f.accuracy == ai && f.avg_bits() == bi;
    });
    if (!duplicate) front.push_back(points[i]);
  }
  std::stable_sort(front.begin(), front.end(),
                   [](const auto& a, const auto& b) { return a.avg_bits() < b.avg_bits(); });
  return front;
}

}  // namespace drq
