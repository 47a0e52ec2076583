#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "drq/drq.hpp"

namespace fs = std::filesystem;
using namespace drq;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

struct Options {
  Common common;
  std::string model;
  std::string profile;
  std::string assignment;
  std::string bits;
  std::string omegas;
  std::optional<double> omega;
  std::optional<int> epochs;
  std::optional<std::string> mode;
  std::optional<int> probes;
  std::optional<int> samples;
  bool no_hasb = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "run configuration (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", c.out, "output directory (overrides output_dir)");
  cmd->add_option("--seed", c.seed, "global seed (overrides seed)");
}

RunConfig load_config(const Common& c) {
  nlohmann::json j = nlohmann::json::object();
  if (!c.config.empty()) j = read_json_file(c.config);
  if (!j.is_object()) throw ConfigError("config: expected an object");
  if (c.seed) j["seed"] = *c.seed;
  if (!c.out.empty()) j["output_dir"] = c.out;
  return parse_run_config(j);
}

fs::path output_dir(const RunConfig& cfg) {
  fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  return dir;
}

void emit(const fs::path& path, std::string_view text) {
  write_file_atomic(path, text);
  std::cerr << "wrote " << path.string() << "\n";
}

void emit(const fs::path& path, const Network<float>& net) {
  store_checkpoint(net, path);
  std::cerr << "wrote " << path.string() << "\n";
}

std::string required(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string(flag) + " is required");
  return value;
}

int train_mp(Options& o) {
  auto j = o.common.config.empty() ? nlohmann::json::object() : read_json_file(o.common.config);
  if (!j.is_object()) throw ConfigError("config: expected an object");
  if (o.epochs) j["train"]["epochs"] = *o.epochs;
  if (o.mode) j["train"]["mode"] = *o.mode;
  if (!o.bits.empty()) j["train"]["bit_set"] = parse_bits(o.bits);
  if (o.common.seed) j["seed"] = *o.common.seed;
  if (!o.common.out.empty()) j["output_dir"] = o.common.out;
  const auto cfg = parse_run_config(j);
  const auto dir = output_dir(cfg);
  const auto data = make_dataset(cfg.dataset);
  const auto run = run_multiprecision(cfg, data);
  emit(dir / "config.json", dump(to_json(cfg)));
  emit(dir / "float.drq", run.float_model);
  emit(dir / "model.drq", run.model);
  emit(dir / "metrics.csv", metrics_csv(run.log.metrics));
  emit(dir / "scale_grads.csv", scale_grads_csv(run.log.scale_grads));
  return 0;
}

int sensitivity(Options& o) {
  auto cfg = load_config(o.common);
  if (o.probes) cfg.sensitivity.probes = *o.probes;
  if (o.samples) cfg.sensitivity.samples = static_cast<std::size_t>(*o.samples);
  if (cfg.sensitivity.probes < 1 || cfg.sensitivity.samples < 1) throw ConfigError("probes and samples must be >= 1");
  const auto model = load_checkpoint(required(o.model, "--model"));
  const auto data = make_dataset(cfg.dataset);
  const auto profile = run_sensitivity(cfg, model, data);
  emit(output_dir(cfg) / "profile.json", dump(to_json(profile)));
  return 0;
}

int train_mixed(Options& o) {
  auto cfg = load_config(o.common);
  if (o.epochs) {
    if (*o.epochs <= 0) throw ConfigError("--epochs must be > 0");
    cfg.mixed.epochs = *o.epochs;
  }
  if (o.no_hasb) cfg.mixed.hasb = false;
  const auto model = load_checkpoint(required(o.model, "--model"));
  const auto profile = profile_from_json(read_json_file(required(o.profile, "--profile")));
  const auto data = make_dataset(cfg.dataset);
  const auto run = run_supernet(cfg, model, profile, data);
  const auto dir = output_dir(cfg);
  emit(dir / "config.json", dump(to_json(cfg)));
  emit(dir / "supernet.drq", run.model);
  emit(dir / "metrics.csv", metrics_csv(run.log.metrics));
  emit(dir / "histogram.csv", histogram_csv(run.layer_names, run.histogram));
  return 0;
}

int search(Options& o) {
  auto cfg = load_config(o.common);
  if (!o.omegas.empty()) {
    cfg.search.omegas.clear();
    std::string token;
    for (char c : o.omegas + ",") {
      if (c != ',') {
        token += c;
        continue;
      }
      if (token.empty()) continue;
      try {
        std::size_t used = 0;
        cfg.search.omegas.push_back(std::stod(token, &used));
        if (used != token.size()) throw std::invalid_argument(token);
      } catch (const std::exception&) {
        throw ConfigError("--omega: not a number: '" + token + "'");
      }
      token.clear();
    }
  }
  const auto profile = profile_from_json(read_json_file(required(o.profile, "--profile")));
  std::optional<Network<float>> model;
  std::optional<DataSplits> data;
  std::vector<int> candidates = cfg.train.bit_set.bits();
  if (!o.model.empty()) {
    model = load_checkpoint(o.model);
    if (!model->bit_set()) throw ConfigError("search: model is not quantized");
    candidates = model->bit_set()->bits();
    require_profile_matches(profile, *model);
    data = make_dataset(cfg.dataset);
  }
  const auto run =
      run_search(cfg.search, profile, candidates, model ? &*model : nullptr, data ? &data->eval : nullptr);
  nlohmann::ordered_json j;
  j["sense"] = to_string(cfg.search.sense);
  j["candidates"] = candidates;
  j["omegas"] = nlohmann::ordered_json::array();
  std::vector<SubNetAssignment> best;
  for (const auto& r : run.per_omega) {
    nlohmann::ordered_json e;
    e["omega"] = r.omega;
    e["best"] = to_json(r.solutions.front());
    e["solutions"] = nlohmann::ordered_json::array();
    for (const auto& s : r.solutions) e["solutions"].push_back(to_json(s));
    j["omegas"].push_back(std::move(e));
    best.push_back(r.solutions.front());
  }
  const auto dir = output_dir(cfg);
  emit(dir / "solutions.json", dump(j));
  emit(dir / "pareto.csv", pareto_csv(model ? std::span<const SubNetAssignment>(run.pareto) : best));
  return 0;
}

std::vector<int> assignment_bits(const Options& o) {
  const auto j = read_json_file(o.assignment);
  if (j.is_object() && j.contains("bits")) return assignment_from_json(j).bits;
  if (!j.is_object() || !j.contains("omegas") || !j["omegas"].is_array() || j["omegas"].empty()) {
    throw ConfigError(o.assignment + ": expected an assignment or a search result");
  }
  for (const auto& e : j["omegas"]) {
    if (!o.omega || std::abs(e.value("omega", 0.0) - *o.omega) < 1e-9) return assignment_from_json(e.at("best")).bits;
  }
  throw ConfigError(o.assignment + ": no result for omega " + std::to_string(*o.omega));
}

int eval(Options& o) {
  const auto cfg = load_config(o.common);
  if (o.bits.empty() == o.assignment.empty()) throw ConfigError("eval needs exactly one of --bits or --assignment");
  auto model = load_checkpoint(required(o.model, "--model"));
  const auto data = make_dataset(cfg.dataset);
  nlohmann::ordered_json j;
  if (!o.bits.empty()) {
    const auto bits = parse_bits(o.bits);
    if (bits.size() == 1) {
      j["bits"] = bits.front();
      j["accuracy"] = evaluate(model, bits.front(), data.eval);
    } else {
      j["bits"] = bits;
      j["accuracy"] = evaluate_subnet(model, bits, data.eval);
    }
  } else {
    const auto bits = assignment_bits(o);
    j["bits"] = bits;
    j["accuracy"] = evaluate_subnet(model, bits, data.eval);
  }
  std::cout << dump(j);
  return 0;
}

int inspect(Options& o) {
  const auto path = required(o.model, "--model");
  const auto net = load_checkpoint(path);
  std::cout << dump(describe(net, static_cast<std::size_t>(fs::file_size(path))));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Double Rounding multi/mixed-precision quantization workbench"};
  app.require_subcommand(1);
  Options o;

  auto* mp = app.add_subcommand("train-mp", "float pretraining + joint multi-precision training");
  add_common(mp, o.common);
  mp->add_option("--epochs", o.epochs, "multi-precision epochs");
  mp->add_option("--mode", o.mode, "alrs or conventional");
  mp->add_option("--bits", o.bits, "candidate bit-widths, e.g. 8,6,4,2");

  auto* sens = app.add_subcommand("sensitivity", "per-layer Hessian-trace profile");
  add_common(sens, o.common);
  sens->add_option("-m,--model", o.model, "multi-precision checkpoint")->required()->check(CLI::ExistingFile);
  sens->add_option("--probes", o.probes, "Hutchinson probes");
  sens->add_option("--samples", o.samples, "data samples");

  auto* mixed = app.add_subcommand("train-mixed", "mixed-precision SuperNet training");
  add_common(mixed, o.common);
  mixed->add_option("-m,--model", o.model, "multi-precision checkpoint")->required()->check(CLI::ExistingFile);
  mixed->add_option("-p,--profile", o.profile, "sensitivity profile")->required()->check(CLI::ExistingFile);
  mixed->add_option("--epochs", o.epochs, "SuperNet epochs");
  mixed->add_flag("--no-hasb", o.no_hasb, "uniform bit sampling");

  auto* srch = app.add_subcommand("search", "per-layer bit allocation under an average bit-width");
  add_common(srch, o.common);
  srch->add_option("-p,--profile", o.profile, "sensitivity profile")->required()->check(CLI::ExistingFile);
  srch->add_option("-m,--model", o.model, "SuperNet checkpoint used to score solutions")->check(CLI::ExistingFile);
  srch->add_option("--omega", o.omegas, "average bit-widths, e.g. 3,4,5");

  auto* ev = app.add_subcommand("eval", "accuracy of a checkpoint at a bit-width or assignment");
  add_common(ev, o.common);
  ev->add_option("-m,--model", o.model, "checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--bits", o.bits, "one bit-width, or one per quantized layer");
  ev->add_option("--assignment", o.assignment, "assignment or solutions.json")->check(CLI::ExistingFile);
  ev->add_option("--omega", o.omega, "which omega to take from solutions.json");

  auto* ins = app.add_subcommand("inspect-ckpt", "summarize a checkpoint");
  ins->add_option("-m,--model", o.model, "checkpoint")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::config);
  }

  try {
    if (mp->parsed()) return train_mp(o);
    if (sens->parsed()) return sensitivity(o);
    if (mixed->parsed()) return train_mixed(o);
    if (srch->parsed()) return search(o);
    if (ev->parsed()) return eval(o);
    return inspect(o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::config);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::config);
  }
}
