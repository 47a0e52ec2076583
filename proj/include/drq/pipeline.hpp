#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <vector>

#include "drq/config.hpp"
#include "drq/mixedprec.hpp"
#include "drq/multiprec.hpp"
#include "drq/search.hpp"
#include "drq/sensitivity.hpp"

namespace drq {

inline constexpr std::size_t kCalibrationRows = 256;

inline Network<float> build_model(const RunConfig& cfg, const DataSplits& data) {
  const auto input = data.train.sample_shape();
  return Network<float>::build(input, make_model_specs(cfg.model, input, data.train.classes), cfg.seed);
}

inline void calibrate(Network<float>& net, const BitWidthSet& set, bool shared, const Dataset& train) {
  std::vector<std::size_t> rows(std::min(kCalibrationRows, train.size()));
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  net.enable_quantization(set, shared, batch_features<float>(train, rows));
}

struct MultiPrecisionRun {
  Network<float> float_model;
  Network<float> model;
  TrainLog log;
};

// Float pretraining, calibration, then joint multi-precision training.
inline MultiPrecisionRun run_multiprecision(const RunConfig& cfg, const DataSplits& data) {
  MultiPrecisionRun run{build_model(cfg, data), {}, {}};
  if (cfg.float_train.epochs > 0) train_float(run.float_model, data.train, cfg.float_train);
  run.model = run.float_model;
  calibrate(run.model, cfg.train.bit_set, cfg.train.shared_weight_scale, data.train);
  MultiPrecisionTrainer<float> trainer(run.model, cfg.train);
  run.log = trainer.fit(data.train, data.eval);
  return run;
}

inline SensitivityProfile run_sensitivity(const RunConfig& cfg, const Network<float>& model, const DataSplits& data) {
  return profile_sensitivity(model, data.train, cfg.sensitivity);
}

inline void require_profile_matches(const SensitivityProfile& profile, const Network<float>& net) {
  const auto q = net.quantized_layers();
  if (profile.layers.size() != q.size()) {
    throw ConfigError("profile has " + std::to_string(profile.layers.size()) + " layers but the model has " +
                      std::to_string(q.size()) + " quantized layers");
  }
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (profile.layers[i].name != net.layers()[q[i]].name) {
      throw ConfigError("profile layer '" + profile.layers[i].name + "' does not match model layer '" +
                        net.layers()[q[i]].name + "'");
    }
  }
}

struct SuperNetRun {
  Network<float> model;
  TrainLog log;
  std::vector<std::map<int, std::int64_t>> histogram;
  std::vector<std::string> layer_names;
};

inline SuperNetRun run_supernet(const RunConfig& cfg, const Network<float>& multiprec,
                                const SensitivityProfile& profile, const DataSplits& data) {
  require_profile_matches(profile, multiprec);
  SuperNetRun run{multiprec, {}, {}, {}};
  auto mixed = cfg.mixed;
  if (multiprec.bit_set()) mixed.bit_set = *multiprec.bit_set();
  SuperNetTrainer<float> trainer(run.model, mixed, classify_layers(profile));
  run.log = trainer.fit(data.train, data.eval);
  run.histogram = trainer.histogram();
  for (auto i : run.model.quantized_layers()) run.layer_names.push_back(run.model.layers()[i].name);
  return run;
}

struct OmegaResult {
  double omega = 0.0;
  std::vector<SubNetAssignment> solutions;  // best first
};

struct SearchRun {
  std::vector<OmegaResult> per_omega;
  std::vector<SubNetAssignment> pareto;  // empty without a model to evaluate
};

// Searches each omega; with a model, scores every solution on `eval` and
// keeps the accuracy/bit-width Pareto front.
inline SearchRun run_search(const SearchConfig& cfg, const SensitivityProfile& profile,
                            std::span<const int> candidates, Network<float>* model, const Dataset* eval) {
  SearchRun run;
  std::vector<SubNetAssignment> scored;
  for (double omega : cfg.omegas) {
    const auto problem = make_search_problem(profile, candidates, omega, cfg.sense);
    OmegaResult r{omega, enumerate_solutions(problem)};
    if (model && eval) {
      for (auto& s : r.solutions) {
        s.accuracy = evaluate_subnet(*model, s.bits, *eval);
        scored.push_back(s);
      }
    }
    run.per_omega.push_back(std::move(r));
  }
  if (!scored.empty()) run.pareto = pareto_front(std::move(scored));
  return run;
}

}  // namespace drq
