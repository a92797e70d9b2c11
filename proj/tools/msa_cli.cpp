// msa: command-line front end.
//
//   msa make-dataset     --config C --out data.msad [--seed N]
//   msa train-classifier --config C --out model.msat [--seed N]
//   msa meta-train       --config C --out DIR [--seed N] [--budget N]
//   msa attack           --config C --out DIR [--seed N] [--budget N] [attack flags]
//   msa evaluate         --config C --out DIR [--seeds A..B] [--checkpoints LIST] [--grid] [attack flags]
//   msa probe            --config C --out FILE [--budget N]
//   msa report           --out DIR EVAL.csv...
//
// Failures print one line "error: <command>: <message>" to stderr and exit 1
// (2 for usage errors).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "msa/msa.hpp"

namespace fs = std::filesystem;
using namespace msa;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string seeds;
  std::optional<std::size_t> budget;
  std::string checkpoints;
  std::optional<std::size_t> threads;
  std::string schedule, colors, threat;
  std::optional<double> eps;
  std::optional<std::string> targeted;
  std::optional<bool> early_stop;
  bool grid = false;
  std::vector<std::string> inputs;
};

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

ExperimentConfig resolve(const Flags& f) {
  ExperimentConfig c = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
  if (!f.seeds.empty()) c.seeds = parse_seed_list(f.seeds);
  if (f.seed) c.seeds = {*f.seed};
  if (f.budget) c.budget = *f.budget;
  if (!f.checkpoints.empty()) c.checkpoints = parse_size_list(f.checkpoints);
  if (!f.schedule.empty()) c.attack.schedule = f.schedule;
  if (!f.colors.empty()) c.attack.colors = f.colors;
  if (!f.threat.empty()) c.attack.threat = f.threat;
  if (f.eps) c.attack.eps = *f.eps;
  if (f.targeted) c.attack.targeted = f.targeted->empty() ? "random" : *f.targeted;
  if (f.early_stop) c.attack.early_stop = *f.early_stop;
  if (f.threads) {
    c.threads = *f.threads;
  } else if (const char* env = std::getenv("MSA_THREADS")) {
    try {
      c.threads = std::stoul(env);
    } catch (const std::logic_error&) {
      throw ConfigError(std::string("MSA_THREADS='") + env + "' is not a number");
    }
  }
  if (c.threads == 0) throw ConfigError("threads must be >= 1");
  if (!f.out.empty()) c.output = f.out;
  return c;
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  out << s;
}

Dataset need_dataset(const ExperimentConfig& c) {
  if (c.dataset.empty()) throw ConfigError("config does not name a dataset");
  return load_dataset(c.dataset);
}

std::vector<Classifier> need_models(const ExperimentConfig& c) {
  if (c.models.empty()) throw ConfigError("config does not name any model");
  std::vector<Classifier> out;
  for (const auto& p : c.models) out.push_back(classifier_from_container(WeightContainer::load(p)));
  return out;
}

std::shared_ptr<const ControllerParams> maybe_controllers(const ExperimentConfig& c, bool required) {
  if (c.controllers.empty()) {
    if (required) throw ConfigError("controller-driven attack needs 'controllers' in the config");
    return nullptr;
  }
  return std::make_shared<const ControllerParams>(controllers_from_container(WeightContainer::load(c.controllers)));
}

bool wants_controllers(const ExperimentConfig& c) { return c.attack.schedule == "msa" || c.attack.colors == "msa"; }

int make_dataset(const ExperimentConfig& c) {
  SyntheticConfig sc = c.synthetic;
  sc.sample_seed = c.seeds.front();
  const auto d = make_synthetic_dataset(sc);
  save_dataset(d, c.output);
  std::cout << "wrote " << d.size() << " images to " << c.output << '\n';
  return 0;
}

int train_classifier_cmd(const ExperimentConfig& c) {
  const auto data = need_dataset(c);
  check_range(data, c.splits.classifier, "classifier");
  check_range(data, c.splits.eval, "eval");
  TrainConfig tc;
  tc.arch = architecture_from_string(c.train.arch);
  tc.epochs = c.train.epochs;
  tc.batch_size = c.train.batch_size;
  tc.lr = c.train.lr;
  tc.seed = c.seeds.front();
  tc.eval_attack = c.train.pgd;
  if (c.train.adversarial) {
    tc.adversarial = c.train.pgd;
    tc.warmup_epochs = c.train.warmup_epochs;
  }
  const auto train = data.slice(c.splits.classifier.begin, c.splits.classifier.end);
  const auto eval = data.slice(c.splits.eval.begin, c.splits.eval.end);
  const auto res = train_classifier(train, tc, &eval);
  std::ostringstream log;
  log.precision(17);
  log << "epoch,loss,accuracy,robust_accuracy\n";
  for (const auto& r : res.log) log << r.epoch << ',' << r.loss << ',' << r.accuracy << ',' << r.robust_accuracy << '\n';
  json meta = {{"config", to_json(c)}, {"seed", tc.seed}, {"adversarial", c.train.adversarial}};
  classifier_container(res.model, meta).save(c.output);
  write_text(c.output + ".log.csv", log.str());
  std::cout << "clean accuracy " << clean_accuracy(res.model, eval) << ", pgd robust accuracy "
            << pgd_robust_accuracy(res.model, eval, c.train.pgd, tc.seed) << '\n';
  return 0;
}

int meta_train_cmd(const ExperimentConfig& c, const Flags& f) {
  const auto data = need_dataset(c);
  check_range(data, c.splits.meta, "meta");
  const auto models = need_models(c);
  const auto meta = data.slice(c.splits.meta.begin, c.splits.meta.end);
  MetaTrainConfig mc;
  for (const auto& m : models) mc.sources.push_back(&m);
  mc.data = &meta;
  mc.budget = f.budget ? *f.budget : c.meta.budget;
  mc.epochs = c.meta.epochs;
  mc.batch_size = c.meta.batch_size;
  mc.lr = c.meta.lr;
  mc.seed = c.seeds.front();
  mc.threads = c.threads;
  mc.threat = threat_from(c.attack);
  Rng rng = make_rng(mc.seed);
  const auto init = ControllerParams::initialized(rng, c.meta.hyper);
  const fs::path dir(c.output);
  fs::create_directories(dir);
  std::ostringstream log;
  log.precision(17);
  log << "epoch,meta_loss,train_robust_accuracy\n";
  json meta_json = {{"config", to_json(c)}, {"seed", mc.seed}, {"meta_budget", mc.budget}};
  const auto res = meta_train(mc, init, [&](const MetaEpochLog& row, const ControllerParams& p) {
    log << row.epoch << ',' << row.meta_loss << ',' << row.train_robust_accuracy << '\n';
    json m = meta_json;
    m["epoch"] = row.epoch;
    controller_container(p, m).save((dir / ("controllers_epoch" + std::to_string(row.epoch) + ".msat")).string());
    std::cout << "epoch " << row.epoch << " meta_loss " << row.meta_loss << " train_robust_accuracy "
              << row.train_robust_accuracy << std::endl;
  });
  write_text(dir / "meta_log.csv", log.str());
  json m = meta_json;
  m["diverged"] = res.diverged;
  controller_container(res.params, m).save((dir / "controllers.msat").string());
  if (res.diverged) throw NumericError("meta-training diverged; last good controllers saved to " + (dir / "controllers.msat").string());
  return 0;
}

int attack_cmd(const ExperimentConfig& c) {
  const auto data = need_dataset(c);
  check_range(data, c.splits.eval, "eval");
  const auto models = need_models(c);
  AttackConfig a = attack_config_from(c, c.budget, c.seeds.front());
  a.controllers = maybe_controllers(c, wants_controllers(c));
  a.record_trajectory = true;
  const auto res = run_batch(ModelHandle::black_box(models.front()), data, c.splits.eval.begin, c.splits.eval.end, a,
                             c.threads);
  const fs::path dir(c.output);
  write_text(dir / "trajectory.csv", trajectory_csv(res.items));
  const auto& s = res.summary;
  json summary = {{"config", to_json(c)},          {"attack", a.name()},
                  {"images", s.images},            {"clean_accuracy", s.clean_accuracy},
                  {"robust_accuracy", s.robust_accuracy}, {"mean_queries", s.mean_queries},
                  {"failures", s.failures}};
  json errors = json::array();
  for (const auto& it : res.items)
    if (it.error) errors.push_back({{"image_id", it.image_id}, {"error", *it.error}});
  summary["errors"] = errors;
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << a.name() << ": robust accuracy " << s.robust_accuracy << " over " << s.images << " images\n";
  return 0;
}

int evaluate_cmd(const ExperimentConfig& c, const Flags& f) {
  const auto data = need_dataset(c);
  check_range(data, c.splits.eval, "eval");
  const auto models = need_models(c);
  const auto handle = ModelHandle::black_box(models.front());
  AttackConfig base = attack_config_from(c, c.budget, 0);
  base.controllers = maybe_controllers(c, !f.grid && wants_controllers(c));
  const auto variants = f.grid ? ablation_variants(base, base.controllers) : std::vector<AttackConfig>{base};
  EvalTable table;
  table.checkpoints = c.checkpoints;
  table.seeds = c.seeds;
  table.config = to_json(c).dump();
  for (const auto& v : variants) {
    table.rows.push_back(evaluate_attack(handle, data, c.splits.eval, v, c.checkpoints, c.seeds, c.threads));
    std::cout << "evaluated " << v.name() << std::endl;
  }
  const fs::path dir(c.output);
  write_text(dir / "eval.csv", table.csv());
  write_text(dir / "eval.txt", table.text());
  std::cout << table.text();
  return 0;
}

int probe_cmd(const ExperimentConfig& c) {
  const auto ctl = maybe_controllers(c, true);
  const auto data_shape = c.synthetic.shape;
  const std::size_t s_max = std::min(data_shape.h, data_shape.w);
  Rng rng = make_rng(c.seeds.front());
  std::ostringstream os;
  os.precision(17);
  os << "p,t,mean_size\n";
  for (double p : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const auto trace = probe_controller(*ctl, p, c.budget, 25, s_max, rng);
    for (std::size_t t = 0; t < trace.size(); ++t) os << p << ',' << t << ',' << trace[t] << '\n';
  }
  write_text(c.output, os.str());
  return 0;
}

int report_cmd(const ExperimentConfig& c, const Flags& f) {
  if (f.inputs.empty()) throw ConfigError("report needs at least one evaluation CSV");
  std::vector<ParsedCell> cells;
  json configs = json::array();
  for (const auto& p : f.inputs) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("cannot open '" + p + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    std::string cfg;
    auto part = parse_eval_csv(ss.str(), &cfg);
    cells.insert(cells.end(), part.begin(), part.end());
    configs.push_back({{"source", p}, {"config", cfg.empty() ? json(nullptr) : json::parse(cfg)}});
  }
  const std::string table = ablation_table(cells);
  const fs::path dir(c.output);
  write_text(dir / "report.txt", table);
  std::ostringstream csv;
  csv.precision(17);
  csv << "# sources: " << configs.dump() << '\n' << "attack,checkpoint,mean,stderr,n\n";
  for (const auto& cell : cells)
    csv << cell.attack << ',' << cell.checkpoint << ',' << cell.value.mean << ',' << cell.value.se << ','
        << cell.value.n << '\n';
  write_text(dir / "report.csv", csv.str());
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Square Attack and Meta Square Attack engine"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", f.config, "experiment config (JSON)");
    s->add_option("--out", f.out, "output file or directory");
    s->add_option("--seed", f.seed, "single seed");
    s->add_option("--threads", f.threads, "worker threads (fallback: MSA_THREADS)");
  };
  auto attack_flags = [&](CLI::App* s) {
    s->add_option("--budget", f.budget, "query budget");
    s->add_option("--schedule", f.schedule, "sa, aa or msa")->check(CLI::IsMember({"sa", "aa", "msa"}));
    s->add_option("--colors", f.colors, "uniform or msa")->check(CLI::IsMember({"uniform", "msa"}));
    s->add_option("--threat", f.threat, "linf or l2")->check(CLI::IsMember({"linf", "l2"}));
    s->add_option("--eps", f.eps, "threat radius");
    s->add_option("--targeted", f.targeted, "target label or 'random'")->expected(0, 1);
    s->add_option("--early-stop", f.early_stop, "stop at the first success");
  };

  auto* mk = app.add_subcommand("make-dataset", "generate the synthetic dataset container");
  common(mk);
  auto* tr = app.add_subcommand("train-classifier", "train a classifier, optionally with PGD");
  common(tr);
  auto* mt = app.add_subcommand("meta-train", "meta-train the size and color controllers");
  common(mt);
  mt->add_option("--budget", f.budget, "per-image query budget during meta-training");
  mt->add_option("--threat", f.threat, "linf or l2")->check(CLI::IsMember({"linf", "l2"}));
  mt->add_option("--eps", f.eps, "threat radius");
  auto* at = app.add_subcommand("attack", "attack the eval split and dump trajectories");
  common(at);
  attack_flags(at);
  auto* ev = app.add_subcommand("evaluate", "robust accuracy over seeds and checkpoints");
  common(ev);
  attack_flags(ev);
  ev->add_option("--seeds", f.seeds, "A..B or comma list");
  ev->add_option("--checkpoints", f.checkpoints, "comma list of query budgets");
  ev->add_flag("--grid", f.grid, "evaluate the full schedule x color ablation grid");
  auto* pr = app.add_subcommand("probe", "controller size traces under fixed success probability");
  common(pr);
  pr->add_option("--budget", f.budget, "steps per trace");
  auto* rp = app.add_subcommand("report", "merge evaluation CSVs into the ablation table");
  common(rp);
  rp->add_option("inputs", f.inputs, "evaluation CSV files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << '\n';
    return 2;
  }

  auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    const auto c = resolve(f);
    if (sub == mk) return make_dataset(c);
    if (sub == tr) return train_classifier_cmd(c);
    if (sub == mt) return meta_train_cmd(c, f);
    if (sub == at) return attack_cmd(c);
    if (sub == ev) return evaluate_cmd(c, f);
    if (sub == pr) return probe_cmd(c);
    if (sub == rp) return report_cmd(c, f);
  } catch (const std::exception& e) {
    std::cerr << "error: " << name << ": " << one_line(e.what()) << '\n';
    return 1;
  }
  return 1;
}
