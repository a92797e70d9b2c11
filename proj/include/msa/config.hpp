#pragma once

// Experiment configuration, read from JSON. Every field has a default, unknown
// keys are rejected, and the resolved value is written back into each output.

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "msa/attack.hpp"
#include "msa/classifier.hpp"
#include "msa/container.hpp"
#include "msa/synthetic.hpp"

namespace msa {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

struct Splits {
  IndexRange classifier{0, 4000};
  IndexRange meta{4000, 5000};
  IndexRange eval{5000, 5200};
};

struct AttackSection {
  std::string threat = "linf";
  double eps = 8.0 / 255.0;
  std::string schedule = "sa";
  std::string colors = "uniform";
  double p0 = 0.3;
  std::string loss = "ce";
  bool early_stop = true;
  std::string targeted;  // "", "random" or a class label
};

struct TrainSection {
  std::string arch = "small_cnn";
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = 0.003;
  bool adversarial = false;
  double warmup_epochs = 3.0;
  PgdConfig pgd{};
};

struct MetaSection {
  std::size_t budget = 1000;
  std::size_t epochs = 10;
  std::size_t batch_size = 100;
  double lr = 0.03;
  ControllerHyper hyper{};
};

struct ExperimentConfig {
  std::string dataset;                  // MSAD path
  std::vector<std::string> models;      // MSAT classifier paths
  std::string controllers;              // MSAT controller path
  Splits splits;
  AttackSection attack;
  TrainSection train;
  MetaSection meta;
  std::size_t budget = 5000;
  std::vector<std::size_t> checkpoints{500, 1000, 2500, 5000};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string output = "out";
  std::size_t threads = 1;
  SyntheticConfig synthetic{};
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) throw ConfigError("unknown config key '" + where + it.key() + "'");
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline IndexRange read_range(const json& j, const char* key, IndexRange def) {
  if (!j.contains(key)) return def;
  const auto v = j.at(key).get<std::vector<std::size_t>>();
  if (v.size() != 2 || v[0] > v[1]) throw ConfigError(std::string("split '") + key + "' must be [begin, end]");
  return {v[0], v[1]};
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
  using detail::read;
  detail::check_keys(j,
                     {"dataset", "models", "controllers", "splits", "attack", "train", "meta", "budget", "checkpoints",
                      "seeds", "output", "threads", "synthetic"},
                     "");
  ExperimentConfig c;
  read(j, "dataset", c.dataset);
  read(j, "models", c.models);
  read(j, "controllers", c.controllers);
  read(j, "budget", c.budget);
  read(j, "checkpoints", c.checkpoints);
  read(j, "seeds", c.seeds);
  read(j, "output", c.output);
  read(j, "threads", c.threads);
  if (j.contains("splits")) {
    const auto& s = j["splits"];
    detail::check_keys(s, {"classifier", "meta", "eval"}, "splits.");
    c.splits.classifier = detail::read_range(s, "classifier", c.splits.classifier);
    c.splits.meta = detail::read_range(s, "meta", c.splits.meta);
    c.splits.eval = detail::read_range(s, "eval", c.splits.eval);
  }
  if (j.contains("attack")) {
    const auto& a = j["attack"];
    detail::check_keys(a, {"threat", "eps", "schedule", "colors", "p0", "loss", "early_stop", "targeted"}, "attack.");
    read(a, "threat", c.attack.threat);
    read(a, "eps", c.attack.eps);
    read(a, "schedule", c.attack.schedule);
    read(a, "colors", c.attack.colors);
    read(a, "p0", c.attack.p0);
    read(a, "loss", c.attack.loss);
    read(a, "early_stop", c.attack.early_stop);
    read(a, "targeted", c.attack.targeted);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::check_keys(t, {"arch", "epochs", "batch_size", "lr", "adversarial", "warmup_epochs", "pgd"}, "train.");
    read(t, "arch", c.train.arch);
    read(t, "epochs", c.train.epochs);
    read(t, "batch_size", c.train.batch_size);
    read(t, "lr", c.train.lr);
    read(t, "adversarial", c.train.adversarial);
    read(t, "warmup_epochs", c.train.warmup_epochs);
    if (t.contains("pgd")) {
      const auto& p = t["pgd"];
      detail::check_keys(p, {"eps", "step", "iters"}, "train.pgd.");
      read(p, "eps", c.train.pgd.eps);
      read(p, "step", c.train.pgd.step);
      read(p, "iters", c.train.pgd.iters);
    }
  }
  if (j.contains("meta")) {
    const auto& m = j["meta"];
    detail::check_keys(m, {"budget", "epochs", "batch_size", "lr", "gamma", "r0", "p_min", "temperature", "time_budget"},
                       "meta.");
    read(m, "budget", c.meta.budget);
    read(m, "epochs", c.meta.epochs);
    read(m, "batch_size", c.meta.batch_size);
    read(m, "lr", c.meta.lr);
    read(m, "gamma", c.meta.hyper.gamma);
    read(m, "r0", c.meta.hyper.r0);
    read(m, "p_min", c.meta.hyper.p_min);
    read(m, "temperature", c.meta.hyper.temperature);
    read(m, "time_budget", c.meta.hyper.time_budget);
  }
  if (j.contains("synthetic")) {
    const auto& s = j["synthetic"];
    detail::check_keys(s, {"n", "num_classes", "world_seed", "sample_seed", "signal", "nuisance", "noise", "fragile",
                           "max_shift", "waves"},
                       "synthetic.");
    read(s, "n", c.synthetic.n);
    read(s, "num_classes", c.synthetic.num_classes);
    read(s, "world_seed", c.synthetic.world_seed);
    read(s, "sample_seed", c.synthetic.sample_seed);
    read(s, "signal", c.synthetic.signal);
    read(s, "nuisance", c.synthetic.nuisance);
    read(s, "noise", c.synthetic.noise);
    read(s, "fragile", c.synthetic.fragile);
    read(s, "max_shift", c.synthetic.max_shift);
    read(s, "waves", c.synthetic.waves);
  }
  return c;
}

inline json to_json(const ExperimentConfig& c) {
  auto range = [](IndexRange r) { return json::array({r.begin, r.end}); };
  return {
      {"dataset", c.dataset},
      {"models", c.models},
      {"controllers", c.controllers},
      {"splits", {{"classifier", range(c.splits.classifier)}, {"meta", range(c.splits.meta)}, {"eval", range(c.splits.eval)}}},
      {"attack",
       {{"threat", c.attack.threat},
        {"eps", c.attack.eps},
        {"schedule", c.attack.schedule},
        {"colors", c.attack.colors},
        {"p0", c.attack.p0},
        {"loss", c.attack.loss},
        {"early_stop", c.attack.early_stop},
        {"targeted", c.attack.targeted}}},
      {"train",
       {{"arch", c.train.arch},
        {"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"lr", c.train.lr},
        {"adversarial", c.train.adversarial},
        {"warmup_epochs", c.train.warmup_epochs},
        {"pgd", {{"eps", c.train.pgd.eps}, {"step", c.train.pgd.step}, {"iters", c.train.pgd.iters}}}}},
      {"meta",
       {{"budget", c.meta.budget},
        {"epochs", c.meta.epochs},
        {"batch_size", c.meta.batch_size},
        {"lr", c.meta.lr},
        {"gamma", c.meta.hyper.gamma},
        {"r0", c.meta.hyper.r0},
        {"p_min", c.meta.hyper.p_min},
        {"temperature", c.meta.hyper.temperature},
        {"time_budget", c.meta.hyper.time_budget}}},
      {"budget", c.budget},
      {"checkpoints", c.checkpoints},
      {"seeds", c.seeds},
      {"output", c.output},
      {"threads", c.threads},
      {"synthetic",
       {{"n", c.synthetic.n},
        {"num_classes", c.synthetic.num_classes},
        {"world_seed", c.synthetic.world_seed},
        {"sample_seed", c.synthetic.sample_seed},
        {"signal", c.synthetic.signal},
        {"nuisance", c.synthetic.nuisance},
        {"noise", c.synthetic.noise},
        {"fragile", c.synthetic.fragile},
        {"max_shift", c.synthetic.max_shift},
        {"waves", c.synthetic.waves}}},
  };
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// "A..B" inclusive, or a comma list.
inline std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  const auto dots = s.find("..");
  try {
    if (dots != std::string::npos) {
      const auto a = std::stoull(s.substr(0, dots)), b = std::stoull(s.substr(dots + 2));
      if (a > b) throw ConfigError("seed range '" + s + "' is empty");
      for (auto v = a; v <= b; ++v) out.push_back(v);
    } else {
      std::istringstream is(s);
      for (std::string tok; std::getline(is, tok, ',');) out.push_back(std::stoull(tok));
    }
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const ConfigError*>(&e)) throw;
    throw ConfigError("cannot parse seed list '" + s + "'");
  }
  if (out.empty()) throw ConfigError("empty seed list");
  return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::istringstream is(s);
  try {
    for (std::string tok; std::getline(is, tok, ',');) out.push_back(std::stoul(tok));
  } catch (const std::logic_error&) {
    throw ConfigError("cannot parse list '" + s + "'");
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

inline ThreatModel threat_from(const AttackSection& a) {
  if (!(a.eps > 0.0)) throw ConfigError("attack.eps must be positive");
  if (a.threat == "linf") return {Norm::Linf, a.eps};
  if (a.threat == "l2") return {Norm::L2, a.eps};
  throw ConfigError("unknown threat '" + a.threat + "' (expected linf or l2)");
}

inline LossKind loss_kind_from(const std::string& s) {
  if (s == "ce") return LossKind::CrossEntropy;
  if (s == "margin") return LossKind::Margin;
  throw ConfigError("unknown loss '" + s + "' (expected ce or margin)");
}

// Attack settings of the config, without controllers.
inline AttackConfig attack_config_from(const ExperimentConfig& c, std::size_t budget, std::uint64_t seed) {
  AttackConfig a;
  a.threat = threat_from(c.attack);
  a.budget = budget;
  try {
    a.schedule = schedule_from_string(c.attack.schedule);
    a.colors = color_sampling_from_string(c.attack.colors);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  a.p0 = c.attack.p0;
  a.loss = LossSpec::untargeted(loss_kind_from(c.attack.loss));
  a.early_stop = c.attack.early_stop;
  a.seed = seed;
  if (c.attack.targeted == "random") {
    a.target_mode = TargetMode::Random;
  } else if (!c.attack.targeted.empty()) {
    a.target_mode = TargetMode::Fixed;
    try {
      a.fixed_target = std::stoul(c.attack.targeted);
    } catch (const std::logic_error&) {
      throw ConfigError("attack.targeted must be empty, 'random' or a class label");
    }
  }
  return a;
}

}  // namespace msa
