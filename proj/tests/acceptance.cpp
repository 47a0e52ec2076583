// Acceptance checks, one per criterion: `acceptance N` prints a single
// PASS/FAIL line and exits non-zero on failure. Without an argument all
// criteria run in order.

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "drq/drq.hpp"

using namespace drq;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------- criterion 1

Outcome containment() {
  Rng rng(101);
  std::size_t mismatches = 0, compared = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t in = 2 + rng.below(15), out = 2 + rng.below(15);
    std::vector<LayerSpec> specs{LayerSpec::dense(3, in, false, false), LayerSpec::relu(in),
                                 LayerSpec::dense(in, out, true, false), LayerSpec::relu(out),
                                 LayerSpec::dense(out, 2, false, false)};
    auto net = Network<float>::build({3}, specs, static_cast<std::uint64_t>(trial));
    auto& l = net.mutable_layer(2);
    const double spread = std::exp(rng.uniform(-4.0, 2.0));
    for (auto& w : l.weight) w = static_cast<float>(rng.normal() * spread);
    net.set_quantization(BitWidthSet({8, 6, 4, 2}), true);
    l.quant.highest_bits = 8;
    l.quant.weight_scale = initial_shared_weight_scale<float>(l.weight.values(), 8, 2) *
                           static_cast<float>(std::exp(rng.uniform(-1.0, 1.0)));
    for (int b : {8, 6, 4, 2}) l.quant.act[b] = {1.0f, 0};

    const auto high = quantize_weight_high(l.weight, l.quant);
    const auto loaded = decode_checkpoint(encode_checkpoint(net));
    const auto& ll = loaded.layers()[2];
    const auto reloaded_high = quantize_weight_high(ll.weight, ll.quant);
    for (int low : {6, 4, 2}) {
      ++compared;
      mismatches += !(double_round_low(high, low) == double_round_low(reloaded_high, low));
    }
  }
  return {mismatches == 0, fmt("%zu/%zu (tensor, l) pairs bit-identical after reload", compared - mismatches, compared)};
}

// ---------------------------------------------------------------- criterion 2

Outcome integer_path() {
  std::size_t bad = 0, total = 0;
  for (int l = 2; l <= 8; ++l) {
    const int delta = 8 - l;
    const double lo = -std::ldexp(1.0, l - 1), hi = std::ldexp(1.0, l - 1) - 1;
    for (int code = -128; code <= 127; ++code) {
      const QuantizedTensor h{{1}, {code}, 8, true};
      const int shifted = double_round_low(h, l).values[0];
      const double reference = std::clamp(std::round(code / std::ldexp(1.0, delta)), lo, hi);
      bad += shifted != static_cast<int>(reference);
      ++total;
    }
  }
  return {bad == 0, fmt("%zu/%zu codes agree between shift and float rounding", total - bad, total)};
}

// ---------------------------------------------------------------- criterion 3

Outcome ste_closed_forms() {
  Rng rng(303);
  double worst = 0.0;
  std::size_t below = 0, above = 0;
  const int n_draws = 100000;
  for (int i = 0; i < n_draws; ++i) {
    const int bits = 2 + static_cast<int>(rng.below(7));
    const bool weights = rng.below(2) == 0;
    const IntRange r = weights ? signed_range(bits) : unsigned_range(bits);
    const double s = std::exp(rng.uniform(-5.0, 1.0));
    const double z = weights ? 0.0 : std::round(rng.uniform(-3.0, 3.0));
    const double v_target = rng.uniform(r.lower - 4.0, r.upper + 4.0);
    const double y = v_target * s + z;
    const double up = rng.uniform(-2.0, 2.0);
    const double v = (y - z) / s;
    const auto n = static_cast<double>(r.lower), p = static_cast<double>(r.upper);
    double g_s, g_z;
    if (n < v && v < p) {
      g_s = std::round(v) - v;
      g_z = 0.0;
    } else {
      g_s = v <= n ? n : p;
      g_z = 1.0;
      (v <= n ? below : above)++;
    }
    const double ys[1] = {y}, ups[1] = {up};
    worst = std::max(worst, std::abs(ste_scale_grad<double>(ys, s, z, r, ups) - up * g_s));
    worst = std::max(worst, std::abs(ste_zeropoint_grad<double>(ys, s, z, r, ups) - up * g_z));
  }
  const bool pass = worst <= 1e-6 && below > 0 && above > 0;
  return {pass, fmt("max |error| %.3g over %d scalars (%zu below n, %zu above p)", worst, n_draws, below, above)};
}

// ---------------------------------------------------------------- criterion 4

Outcome eta_table() {
  const std::vector<std::tuple<int, int, double>> rows{{8, 8, 1.0}, {8, 6, 0.1}, {8, 4, 0.01}, {8, 2, 1e-3}, {4, 3, 0.5}};
  std::string detail;
  bool pass = true;
  for (auto [h, b, want] : rows) {
    const double got = alrs_eta(h, b);
    pass = pass && got == want;
    detail += fmt("eta(h=%d,b=%d)=%g ", h, b, got);
  }
  return {pass, detail};
}

// ---------------------------------------------------------------- criterion 5

Outcome roulette() {
  const std::vector<int> candidates{2, 4, 6, 8};
  const int draws = 100000;
  bool pass = true;
  std::string detail;
  std::uint64_t stream = 0;
  for (auto s : {Sensitivity::insensitive, Sensitivity::sensitive}) {
    const std::vector<double> expected = s == Sensitivity::insensitive ? std::vector<double>{0.25, 0.25, 0.25, 0.25}
                                                                        : std::vector<double>{0.1, 0.2, 0.3, 0.4};
    Rng rng = Rng::derive(505, stream++);
    std::vector<double> counts(4, 0.0);
    for (int i = 0; i < draws; ++i) {
      const int b = roulette_select(candidates, s, rng.uniform_open_closed());
      counts[static_cast<std::size_t>(std::find(candidates.begin(), candidates.end(), b) - candidates.begin())] += 1;
    }
    double chi2 = 0.0, worst = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      const double e = expected[i] * draws;
      chi2 += (counts[i] - e) * (counts[i] - e) / e;
      worst = std::max(worst, std::abs(counts[i] / draws - expected[i]));
    }
    const double p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(3.0), chi2));
    pass = pass && worst <= 0.01 && p > 0.01;
    detail += fmt("%s: max dev %.4f chi2 p=%.3f; ", s == Sensitivity::insensitive ? "insensitive" : "sensitive",
                  worst, p);
  }
  return {pass, detail};
}

// ---------------------------------------------------------------- criterion 6

struct Brute {
  const SearchProblem& p;
  bool maximize;
  std::optional<double> best;
  void go(std::size_t l, std::int64_t sum, double obj) {
    if (l == p.layers()) {
      if (sum == p.target_sum && (!best || (maximize ? obj > *best : obj < *best))) best = obj;
      return;
    }
    for (int b : p.candidates) go(l + 1, sum + b, obj + p.weights[l] * b);
  }
};

Outcome search_exactness() {
  Rng rng(606);
  const std::vector<int> pool{2, 3, 4, 5, 6, 7, 8};
  std::size_t agree = 0, exact_sum = 0;
  const int problems = 200;
  for (int i = 0; i < problems; ++i) {
    SearchProblem p;
    const std::size_t L = 1 + rng.below(12);
    auto bits = pool;
    rng.shuffle(bits.begin(), bits.end());
    bits.resize(1 + rng.below(4));
    p.candidates = bits;
    for (std::size_t l = 0; l < L; ++l) p.weights.push_back(rng.uniform(0.0, 5.0));
    p.sense = rng.below(2) ? Sense::maximize : Sense::minimize;
    const auto sums = achievable_sums(bits, L);
    p.target_sum = sums[rng.below(sums.size())];
    Brute brute{p, p.sense == Sense::maximize, std::nullopt};
    brute.go(0, 0, 0.0);
    const auto dp = solve(p);
    agree += brute.best && std::abs(dp.objective - *brute.best) <= 1e-9 * std::max(1.0, std::abs(*brute.best));
    exact_sum += dp.bit_sum() == p.target_sum;
  }
  return {agree == problems && exact_sum == problems,
          fmt("%zu/%d optima match brute force, %zu/%d hit the bit sum exactly", agree, problems, exact_sum, problems)};
}

// ---------------------------------------------------------------- criterion 7

double dense_fd_trace(const GradientFn& grad, std::vector<double> theta, double eps) {
  double tr = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double keep = theta[i];
    theta[i] = keep + eps;
    const double up = grad(theta)[i];
    theta[i] = keep - eps;
    const double down = grad(theta)[i];
    theta[i] = keep;
    tr += (up - down) / (2 * eps);
  }
  return tr;
}

Outcome hessian_trace() {
  const GradientFn quad = [](std::span<const double> x) {
    return std::vector<double>{1.0 * x[0], 2.0 * x[1], 3.0 * x[2]};
  };
  const std::vector<double> q_theta{0.5, -0.25, 1.5};
  const double q_est = hutchinson_trace(quad, q_theta, {1000, 7, 0});
  const bool q_ok = std::abs(q_est - 6.0) <= 0.05 * 6.0;

  ModelSpec m;
  m.hidden = {8, 8};
  auto fnet = Network<float>::build({6}, make_model_specs(m, {6}, 3), 5);
  Rng rng(6);
  Tensor<float> x({64, 6});
  for (auto& v : x) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  std::vector<int> y(64);
  for (auto& v : y) v = static_cast<int>(rng.below(3));
  train_float(fnet, Dataset{x, y, 3}, FloatTrainConfig{5, 16, 1e-2, 0.0, 5});
  std::size_t params = 0;
  for (const auto& info : fnet.param_layout()) params += fnet.param(info).size();
  auto net = fnet.cast<double>();
  const std::size_t layer = net.quantized_layers().at(0);
  const auto grad = layer_weight_gradient(net, layer, x.cast<double>(), y);
  const auto w = net.layers()[layer].weight;
  const std::vector<double> theta(w.begin(), w.end());
  const double exact = dense_fd_trace(grad, theta, 1e-6);
  const double est = hutchinson_trace(grad, theta, {1000, 9, 0});
  const bool m_ok = params <= 200 && std::abs(est - exact) <= 0.05 * std::abs(exact);
  return {q_ok && m_ok, fmt("quadratic %.4f vs 6; MLP (%zu params) %.4f vs dense FD %.4f (%.2f%%)", q_est, params, est,
                            exact, 100.0 * std::abs(est - exact) / std::abs(exact))};
}

// ---------------------------------------------------------------- criterion 8

RunConfig desk_config(std::uint64_t seed, std::vector<std::size_t> hidden) {
  RunConfig c;
  BlobsSpec b;
  b.classes = 4;
  b.dims = 16;
  b.train_size = 2000;
  b.eval_size = 1000;
  b.noise = 1.5;
  b.seed = seed;
  c.dataset = b;
  c.model.hidden = std::move(hidden);
  c.seed = seed;
  c.float_train = FloatTrainConfig{20, 64, 1e-2, 5e-5, seed};
  c.train.bit_set = BitWidthSet({8, 6, 4, 2});
  c.train.epochs = 30;
  c.train.base_lr = 5e-4;
  c.train.seed = seed;
  c.mixed.bit_set = c.train.bit_set;
  c.mixed.epochs = 30;
  c.mixed.base_lr = 5e-4;
  c.mixed.seed = seed;
  c.sensitivity.seed = seed;
  c.search.omegas = {3, 4, 5};
  return c;
}

double spread(const std::map<int, double>& acc) {
  double lo = 1.0, hi = 0.0;
  for (auto [b, a] : acc) lo = std::min(lo, a), hi = std::max(hi, a);
  return hi - lo;
}

Outcome multiprecision_analog() {
  std::vector<double> spread_gap;
  std::map<int, std::vector<double>> deficit;  // separate - joint(ALRS)
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto cfg = desk_config(seed, {64, 64, 64, 64});
    const auto data = make_dataset(cfg.dataset);
    auto float_model = build_model(cfg, data);
    train_float(float_model, data.train, cfg.float_train);

    std::map<TrainMode, std::map<int, double>> joint;
    for (auto mode : {TrainMode::alrs, TrainMode::conventional}) {
      auto net = float_model;
      auto tc = cfg.train;
      tc.mode = mode;
      calibrate(net, tc.bit_set, true, data.train);
      MultiPrecisionTrainer<float>(net, tc).fit(data.train, data.eval);
      for (int b : tc.bit_set) joint[mode][b] = evaluate(net, b, data.eval);
    }
    std::map<int, double> separate;
    for (int b : {8, 6, 4}) {
      auto net = float_model;
      auto tc = cfg.train;
      tc.bit_set = BitWidthSet({b});
      tc.mode = TrainMode::conventional;
      calibrate(net, tc.bit_set, true, data.train);
      MultiPrecisionTrainer<float>(net, tc).fit(data.train, data.eval);
      separate[b] = evaluate(net, b, data.eval);
      deficit[b].push_back(separate[b] - joint[TrainMode::alrs][b]);
    }
    const double sa = spread(joint[TrainMode::alrs]), sc = spread(joint[TrainMode::conventional]);
    spread_gap.push_back(sa - sc);
    detail += fmt("seed %llu: alrs 8/6/4/2 = %.3f/%.3f/%.3f/%.3f, conv spread %.3f, alone 8/6/4 = %.3f/%.3f/%.3f; ",
                  static_cast<unsigned long long>(seed), joint[TrainMode::alrs][8], joint[TrainMode::alrs][6],
                  joint[TrainMode::alrs][4], joint[TrainMode::alrs][2], sc, separate[8], separate[6], separate[4]);
  }
  bool pass = median(spread_gap) <= 0.0;
  for (auto& [b, d] : deficit) pass = pass && median(d) <= 0.02;
  detail += fmt("median deficit 8/6/4 = %.3f/%.3f/%.3f, median spread(alrs)-spread(conv) = %.3f", median(deficit[8]),
                median(deficit[6]), median(deficit[4]), median(spread_gap));
  return {pass, detail};
}

// ---------------------------------------------------------------- criterion 9

// Best accuracy per omega along the searched frontier.
std::map<double, double> frontier(const SearchRun& run) {
  std::map<double, double> best;
  for (const auto& r : run.per_omega) {
    double a = 0.0;
    for (const auto& s : r.solutions) a = std::max(a, *s.accuracy);
    best[r.omega] = a;
  }
  return best;
}

Outcome hasb_analog() {
  std::map<double, std::vector<double>> gap;  // hasb - uniform
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto cfg = desk_config(seed, {64, 64, 64, 64, 64});
    const auto data = make_dataset(cfg.dataset);
    const auto mp = run_multiprecision(cfg, data);
    const auto profile = run_sensitivity(cfg, mp.model, data);
    std::map<bool, std::map<double, double>> fronts;
    for (bool hasb : {true, false}) {
      auto c = cfg;
      c.mixed.hasb = hasb;
      auto sn = run_supernet(c, mp.model, profile, data);
      const auto bits = sn.model.bit_set()->bits();
      fronts[hasb] = frontier(run_search(c.search, profile, bits, &sn.model, &data.eval));
    }
    detail += fmt("seed %llu:", static_cast<unsigned long long>(seed));
    for (double w : cfg.search.omegas) {
      gap[w].push_back(fronts[true][w] - fronts[false][w]);
      detail += fmt(" w=%g %.3f vs %.3f", w, fronts[true][w], fronts[false][w]);
    }
    detail += "; ";
  }
  int dominated = 0;
  for (auto& [w, g] : gap) dominated += median(g) >= 0.0;
  detail += fmt("HASB >= uniform at %d/3 omegas (median)", dominated);
  return {dominated >= 2, detail};
}

// ---------------------------------------------------------------- criterion 10

std::map<std::string, std::string> pipeline_files(const RunConfig& cfg) {
  std::map<std::string, std::string> files;
  const auto data = make_dataset(cfg.dataset);
  const auto mp = run_multiprecision(cfg, data);
  const auto bytes = [](const Network<float>& n) {
    const auto b = encode_checkpoint(n);
    return std::string(b.begin(), b.end());
  };
  files["model.drq"] = bytes(mp.model);
  files["metrics.csv"] = metrics_csv(mp.log.metrics);
  files["scale_grads.csv"] = scale_grads_csv(mp.log.scale_grads);
  const auto profile = run_sensitivity(cfg, mp.model, data);
  files["profile.json"] = dump(to_json(profile));
  auto sn = run_supernet(cfg, mp.model, profile, data);
  files["supernet.drq"] = bytes(sn.model);
  files["mixed_metrics.csv"] = metrics_csv(sn.log.metrics);
  files["histogram.csv"] = histogram_csv(sn.layer_names, sn.histogram);
  const auto search = run_search(cfg.search, profile, sn.model.bit_set()->bits(), &sn.model, &data.eval);
  files["pareto.csv"] = pareto_csv(search.pareto);
  return files;
}

Outcome determinism_and_format() {
  auto cfg = desk_config(11, {64, 64, 64, 64, 64});
  cfg.float_train.epochs = 3;
  cfg.train.epochs = 3;
  cfg.mixed.epochs = 3;
  cfg.sensitivity.probes = 16;
  cfg.sensitivity.samples = 200;
  const auto a = pipeline_files(cfg), b = pipeline_files(cfg);
  std::size_t same = 0;
  for (const auto& [name, content] : a) same += b.at(name) == content;

  const auto data = make_dataset(cfg.dataset);
  const auto run = run_multiprecision(cfg, data);
  const auto shared = encode_checkpoint(run.model);
  const auto back = decode_checkpoint(shared);
  const bool round_trip = back == to_stored_form(run.model) && encode_checkpoint(back) == shared;

  // Storage on a model dominated by quantized layers, as in the large networks
  // the format targets.
  const auto wide_cfg = desk_config(12, {1024, 1024, 1024});
  auto wide = build_model(wide_cfg, data);
  auto wide_unshared = wide;
  calibrate(wide, wide_cfg.train.bit_set, true, data.train);
  calibrate(wide_unshared, wide_cfg.train.bit_set, false, data.train);
  const auto wide_shared_bytes = encode_checkpoint(wide).size();
  const auto unshared = encode_checkpoint(wide_unshared);
  const bool unshared_trip = decode_checkpoint(unshared) == wide_unshared;
  const double ratio = static_cast<double>(wide_shared_bytes) / static_cast<double>(unshared.size());

  const bool pass = same == a.size() && round_trip && unshared_trip && ratio <= 0.30;
  return {pass, fmt("%zu/%zu pipeline files byte-identical; round trip %s/%s; shared %zu B vs unshared %zu B (%.1f%%)",
                    same, a.size(), round_trip ? "exact" : "MISMATCH", unshared_trip ? "exact" : "MISMATCH",
                    wide_shared_bytes, unshared.size(), 100.0 * ratio)};
}

struct Criterion {
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> list{
      {"lossless containment", 1.0, containment},
      {"double-rounding integer path", 1.0, integer_path},
      {"STE closed forms", 0.0, ste_closed_forms},
      {"eta table", 0.0, eta_table},
      {"roulette distribution", 1.0, roulette},
      {"search exactness", 10.0, search_exactness},
      {"Hessian-trace oracle", 60.0, hessian_trace},
      {"multi-precision analog", 600.0, multiprecision_analog},
      {"HASB analog", 1200.0, hasb_analog},
      {"determinism and format", 0.0, determinism_and_format},
  };
  return list;
}

bool run_one(int n) {
  const auto& c = criteria().at(static_cast<std::size_t>(n - 1));
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = c.run();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool in_time = c.budget_seconds <= 0.0 || secs < c.budget_seconds;
  if (!in_time) o.detail += fmt(" [over the %.0f s budget]", c.budget_seconds);
  const bool pass = o.pass && in_time;
  std::printf("criterion %d (%s): %s %s [%.2f s]\n", n, c.name, pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
  std::fflush(stdout);
  return pass;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 2) {
    std::fprintf(stderr, "usage: %s [criterion 1-10]\n", argv[0]);
    return 2;
  }
  if (argc == 2) {
    const int n = std::atoi(argv[1]);
    if (n < 1 || n > static_cast<int>(criteria().size())) {
      std::fprintf(stderr, "unknown criterion '%s'\n", argv[1]);
      return 2;
    }
    return run_one(n) ? 0 : 1;
  }
  bool all = true;
  for (int n = 1; n <= static_cast<int>(criteria().size()); ++n) all = run_one(n) && all;
  return all ? 0 : 1;
}
