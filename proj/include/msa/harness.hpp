#pragma once

// Orchestration shared by the CLI and the acceptance runner: multi-seed
// robust-accuracy evaluation and the ablation grid of attack variants.

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "msa/attack.hpp"
#include "msa/config.hpp"
#include "msa/report.hpp"

namespace msa {

// Robust accuracy after q queries for every checkpoint q of one seed. The SA
// schedule depends on the budget, so SA gets a fresh run per checkpoint;
// every other variant is read off a single run at the largest checkpoint.
inline std::vector<double> robust_accuracy_at(const ModelHandle& f, const Dataset& data, IndexRange range,
                                              AttackConfig cfg, const std::vector<std::size_t>& checkpoints,
                                              std::size_t threads) {
  if (checkpoints.empty()) throw std::invalid_argument("no checkpoints");
  std::vector<double> out;
  if (cfg.schedule == ScheduleKind::SA) {
    for (std::size_t q : checkpoints) {
      if (q == 0) throw std::invalid_argument("SA evaluation needs checkpoints >= 1");
      cfg.budget = q;
      out.push_back(run_batch(f, data, range.begin, range.end, cfg, threads).summary.robust_accuracy);
    }
    return out;
  }
  cfg.budget = std::max<std::size_t>(1, *std::max_element(checkpoints.begin(), checkpoints.end()));
  const auto batch = run_batch(f, data, range.begin, range.end, cfg, threads);
  return robust_accuracy_curve(batch.items, checkpoints);
}

inline EvalRow evaluate_attack(const ModelHandle& f, const Dataset& data, IndexRange range, const AttackConfig& base,
                               const std::vector<std::size_t>& checkpoints, const std::vector<std::uint64_t>& seeds,
                               std::size_t threads) {
  EvalRow row;
  row.attack = base.name();
  row.per_seed.assign(checkpoints.size(), {});
  for (auto seed : seeds) {
    AttackConfig c = base;
    c.seed = seed;
    const auto acc = robust_accuracy_at(f, data, range, c, checkpoints, threads);
    for (std::size_t k = 0; k < acc.size(); ++k) row.per_seed[k].push_back(acc[k]);
  }
  return row;
}

// {SA, AA, MSA} x {uniform, MSA}; controller rows only when controllers exist.
inline std::vector<AttackConfig> ablation_variants(const AttackConfig& base,
                                                   std::shared_ptr<const ControllerParams> controllers) {
  std::vector<AttackConfig> out;
  for (auto s : {ScheduleKind::SA, ScheduleKind::AA, ScheduleKind::Controller})
    for (auto c : {ColorSampling::Uniform, ColorSampling::Controller}) {
      if (!controllers && (s == ScheduleKind::Controller || c == ColorSampling::Controller)) continue;
      AttackConfig a = base;
      a.schedule = s;
      a.colors = c;
      a.controllers = controllers;
      out.push_back(a);
    }
  return out;
}

inline void check_range(const Dataset& d, IndexRange r, const std::string& what) {
  if (r.begin >= r.end || r.end > d.size())
    throw ConfigError(what + " split [" + std::to_string(r.begin) + ", " + std::to_string(r.end) +
                      ") is empty or exceeds the dataset size " + std::to_string(d.size()));
}

}  // namespace msa
