// Experiment runner: every study is a subcommand over a flat key-value config.
// Each run writes its reports plus a resolved-config copy into --out and exits
// 0 on success, 1 on validation errors, 2 on runtime failures.

#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "nsns/attacks.hpp"
#include "nsns/attribution.hpp"
#include "nsns/binio.hpp"
#include "nsns/checkpoint.hpp"
#include "nsns/config.hpp"
#include "nsns/data.hpp"
#include "nsns/model.hpp"
#include "nsns/report.hpp"
#include "nsns/sensitivity.hpp"
#include "nsns/trainer.hpp"

namespace fs = std::filesystem;
using namespace nsns;

namespace {

struct Context {
  RunConfig config;
  std::string out_dir;
  uint64_t seed = 0;
  std::string command;

  std::string out_path(const std::string& name) const {
    return (fs::path(out_dir) / name).string();
  }
};

std::vector<int> parse_chw(const std::string& text) {
  std::vector<int> out;
  std::string cur;
  for (char ch : text + "x") {
    if (ch == 'x' || ch == 'X') {
      if (!cur.empty()) out.push_back(std::stoi(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (out.size() != 3) throw std::invalid_argument("model input must look like CxHxW");
  return out;
}

ModelSpec model_spec_from(Context& ctx) {
  std::string name = ctx.config.get("model", "spec");
  std::vector<int> input = parse_chw(ctx.config.get("model", "input"));
  int classes = static_cast<int>(ctx.config.get_int("model", "classes"));
  return ModelSpec::by_name(name, input, classes);
}

Model model_from(Context& ctx) {
  if (ctx.config.has("model", "checkpoint"))
    return load_checkpoint(ctx.config.get("model", "checkpoint"));
  return build_model(model_spec_from(ctx), ctx.config.get_u64_or("model", "init_seed", ctx.seed));
}

Dataset dataset_from(Context& ctx, int model_classes) {
  std::string kind = ctx.config.get("dataset", "kind");
  if (kind == "blobs" || kind == "stripes") {
    int n = static_cast<int>(ctx.config.get_int("dataset", "n"));
    int size = static_cast<int>(ctx.config.get_int("dataset", "size"));
    double noise = ctx.config.get_double_or("dataset", "noise", 0.1);
    uint64_t seed = ctx.config.get_u64_or("dataset", "seed", 1);
    return synth_dataset(kind == "blobs" ? SynthKind::Blobs : SynthKind::Stripes,
                         model_classes, n, size, noise, seed);
  }
  if (kind == "idx")
    return load_idx(ctx.config.get("dataset", "images"), ctx.config.get("dataset", "labels"));
  if (kind == "cifar") {
    std::vector<std::string> paths = ctx.config.get_list("dataset", "paths");
    return load_cifar_binary(paths);
  }
  throw std::invalid_argument("dataset.kind must be blobs, stripes, idx or cifar, got '" + kind +
                              "'");
}

struct SplitSet {
  Dataset train, val, test;
  const Dataset& by_name(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw std::invalid_argument("unknown split '" + name + "' (train, val, test)");
  }
};

SplitSet splits_from(Context& ctx, int model_classes) {
  Dataset all = dataset_from(ctx, model_classes);
  double tf = ctx.config.get_double_or("dataset", "train_frac", 0.8);
  double vf = ctx.config.get_double_or("dataset", "val_frac", 0.1);
  double sf = ctx.config.get_double_or("dataset", "test_frac", 1.0 - tf - vf);
  uint64_t seed = ctx.config.get_u64_or("dataset", "split_seed", 7);
  auto [train, val, test] = split(all, tf, vf, sf, seed);
  return {std::move(train), std::move(val), std::move(test)};
}

AttackSpec attack_from(Context& ctx, const std::string& section) {
  std::string kind = ctx.config.get(section, "kind");
  AttackSpec spec;
  if (ctx.config.has(section, "eps_255") && ctx.config.has(section, "eps_unit"))
    throw std::invalid_argument("config: give " + section + ".eps_255 or eps_unit, never both");
  double eps = 0.0;
  if (ctx.config.has(section, "eps_255"))
    eps = ctx.config.get_double(section, "eps_255") / 255.0;
  else
    eps = ctx.config.get_double_or(section, "eps_unit", 0.0);
  uint64_t seed = ctx.config.get_u64_or(section, "seed", ctx.seed);

  if (kind == "fgsm") {
    spec = AttackSpec::fgsm(eps, seed);
  } else if (kind == "pgd_linf" || kind == "pgd_l2") {
    int steps = static_cast<int>(ctx.config.get_int_or(section, "steps", 10));
    if (ctx.config.has(section, "alpha_255") && ctx.config.has(section, "alpha_unit"))
      throw std::invalid_argument("config: give " + section +
                                  ".alpha_255 or alpha_unit, never both");
    double alpha = 0.0;
    if (ctx.config.has(section, "alpha_255"))
      alpha = ctx.config.get_double(section, "alpha_255") / 255.0;
    else
      alpha = ctx.config.get_double_or(section, "alpha_unit", 0.0);
    spec = kind == "pgd_linf" ? AttackSpec::pgd_linf(eps, steps, alpha, seed)
                              : AttackSpec::pgd_l2(eps, steps, alpha, seed);
    spec.random_start = ctx.config.get_bool_or(section, "random_start", true);
  } else if (kind == "gaussian") {
    spec = AttackSpec::gaussian(static_cast<int>(ctx.config.get_int(section, "severity")), seed);
  } else {
    throw std::invalid_argument(section + ".kind must be fgsm, pgd_linf, pgd_l2 or gaussian");
  }
  if (ctx.config.has(section, "target"))
    spec = spec.with_target(static_cast<int>(ctx.config.get_int(section, "target")));
  return spec;
}

/// [attack], [attack2], [attack3], ... in numeric order.
std::vector<AttackSpec> attack_list(Context& ctx) {
  std::vector<AttackSpec> out;
  if (ctx.config.has("attack", "kind")) out.push_back(attack_from(ctx, "attack"));
  for (int i = 2;; ++i) {
    std::string section = "attack" + std::to_string(i);
    if (!ctx.config.has(section, "kind")) break;
    out.push_back(attack_from(ctx, section));
  }
  return out;
}

TrainConfig train_config_from(Context& ctx, const ModelSpec& spec) {
  TrainConfig config;
  config.spec = spec;
  config.epochs = static_cast<int>(ctx.config.get_int_or("train", "epochs", 4));
  config.batch = static_cast<int>(ctx.config.get_int_or("train", "batch", 64));
  config.schedule.lr = ctx.config.get_double_or("train", "lr", 0.05);
  config.schedule.decay_factor = ctx.config.get_double_or("train", "lr_decay_factor", 1.0);
  config.schedule.decay_every =
      static_cast<int>(ctx.config.get_int_or("train", "lr_decay_every", 0));
  config.momentum = ctx.config.get_double_or("train", "momentum", 0.9);
  config.seed = ctx.config.get_u64_or("train", "seed", ctx.seed);
  config.lambda = ctx.config.get_double_or("train", "lambda", 5.0);
  config.sensitive_fraction = ctx.config.get_double_or("train", "fraction", 0.10);
  config.dyn_sample_count = static_cast<int>(ctx.config.get_int_or("train", "dyn_samples", 200));
  config.alp_lambda = ctx.config.get_double_or("train", "alp_lambda", 0.5);
  config.static_pairs = ctx.config.get_bool_or("train", "static_pairs", false);
  config.freeze_below = ctx.config.get_bool_or("train", "freeze_below", true);
  config.pure_adversarial = ctx.config.get_bool_or("train", "pure_adv", false);
  config.eval_robust = ctx.config.get_bool_or("train", "eval_robust", true);
  config.mode = neuron_mode_from_string(ctx.config.get_or("train", "mode", "sen"));
  if (ctx.config.has("train", "layers") && ctx.config.has("train", "layers_topk"))
    throw std::invalid_argument("config: give train.layers or train.layers_topk, never both");
  if (ctx.config.has("train", "layers"))
    config.layer_set = ctx.config.get_list("train", "layers");
  else if (ctx.config.has("train", "layers_topk"))
    config.layer_set =
        select_layers_topk(spec, static_cast<int>(ctx.config.get_int("train", "layers_topk")));
  if (ctx.config.has("attack", "kind")) config.attack = attack_from(ctx, "attack");
  return config;
}

std::vector<std::string> layer_selection(Context& ctx, const std::string& section,
                                         const ModelSpec& spec) {
  std::string value = ctx.config.get_or(section, "layers", "conv");
  if (value == "conv") return conv_layer_names(spec);
  if (value == "conv_relu") return conv_and_relu_layer_names(spec);
  RunConfig& cfg = ctx.config;
  (void)cfg;
  std::vector<std::string> names;
  std::string cur;
  for (char ch : value + ",") {
    if (ch == ',') {
      if (!cur.empty()) names.push_back(cur);
      cur.clear();
    } else if (!isspace(static_cast<unsigned char>(ch))) {
      cur += ch;
    }
  }
  for (const std::string& n : names)
    if (spec.layer_index(n) < 0)
      throw std::invalid_argument(section + ".layers: unknown layer '" + n + "'");
  return names;
}

void write_resolved_config(Context& ctx) {
  std::string text = "[run]\ncommand = " + ctx.command + "\nseed = " +
                     std::to_string(ctx.seed) + "\n\n" + ctx.config.resolved_text();
  atomic_write_file(ctx.out_path("resolved.cfg"), text);
}

// ---------------------------------------------------------------------------

int cmd_train(Context& ctx) {
  ModelSpec spec = model_spec_from(ctx);
  std::string method = ctx.config.get("train", "method");
  SplitSet splits = splits_from(ctx, spec.class_count);
  TrainConfig config = train_config_from(ctx, spec);
  DataSplits data{splits.train, splits.val};

  TrainResult result = [&] {
    if (method == "vanilla") return train_vanilla(config, data);
    if (method == "pat") return train_pat(config, data);
    if (method == "alp") return train_alp(config, data);
    if (method == "sns") {
      Model base = load_checkpoint(ctx.config.get("train", "base"));
      return train_sns(config, data, base);
    }
    throw std::invalid_argument("train.method must be vanilla, pat, alp or sns, got '" + method +
                                "'");
  }();
  ctx.config.reject_unknown();

  save_checkpoint(result.model, ctx.out_path("checkpoint.nsck"));
  atomic_write_file(ctx.out_path("report.jsonl"), result.report.to_jsonl());
  write_resolved_config(ctx);
  std::cout << "trained " << method << " for " << result.report.epochs.size() << " epochs in "
            << format_sig6(result.report.wall_seconds) << "s";
  if (!result.report.epochs.empty()) {
    std::cout << "; final clean acc " << format_sig6(result.report.epochs.back().clean_acc);
    for (const auto& [name, acc] : result.report.epochs.back().robust_acc)
      std::cout << ", " << name << " " << format_sig6(acc);
  }
  std::cout << "\n";
  return 0;
}

int cmd_attack(Context& ctx) {
  Model model = model_from(ctx);
  SplitSet splits = splits_from(ctx, model.spec.class_count);
  const Dataset& part = splits.by_name(ctx.config.get_or("attack", "split", "test"));
  AttackSpec spec = attack_from(ctx, "attack");

  nlohmann::json meta;
  meta["attack"] = spec.name();
  if (spec.targeted) {
    TargetedResult result = targeted_set(model, part, spec.target_class, spec);
    meta["targeted"] = true;
    meta["target_class"] = spec.target_class;
    meta["attempted"] = result.attempted;
    meta["retained"] = result.set.size();
    meta["success_rate"] = result.success_rate();
    if (result.set.size() > 0) save_pairs(result.set, ctx.out_path("pairs.nspr"));
  } else {
    DualPairSet pairs = build_dual_pairs(model, part, spec);
    meta["targeted"] = false;
    meta["pairs"] = pairs.size();
    save_pairs(pairs, ctx.out_path("pairs.nspr"));
  }
  ctx.config.reject_unknown();
  atomic_write_file(ctx.out_path("attack.json"), meta.dump() + "\n");
  write_resolved_config(ctx);
  std::cout << meta.dump() << "\n";
  return 0;
}

DualPairSet pairs_for_analysis(Context& ctx, const Model& model, const std::string& section) {
  if (ctx.config.has(section, "pairs")) return load_pairs(ctx.config.get(section, "pairs"));
  SplitSet splits = splits_from(ctx, model.spec.class_count);
  const Dataset& part = splits.by_name(ctx.config.get_or(section, "split", "test"));
  return build_dual_pairs(model, part, attack_from(ctx, "attack"));
}

int cmd_sensitivity(Context& ctx) {
  Model model = model_from(ctx);
  DualPairSet pairs = pairs_for_analysis(ctx, model, "sensitivity");
  std::vector<std::string> layers = layer_selection(ctx, "sensitivity", model.spec);
  double fraction = ctx.config.get_double_or("sensitivity", "fraction", 0.10);
  ctx.config.reject_unknown();

  std::vector<SensitivityTable> tables = layer_tables(model, pairs, layers);
  std::string sets = "[";
  for (size_t i = 0; i < tables.size(); ++i) {
    atomic_write_file(ctx.out_path("sensitivity_" + tables[i].layer + ".csv"),
                      tables[i].to_csv());
    if (i) sets += ",";
    sets += select_sensitive_fraction(tables[i], fraction).to_json();
  }
  sets += "]\n";
  atomic_write_file(ctx.out_path("sensitive_sets.json"), sets);
  write_resolved_config(ctx);
  std::cout << "wrote " << tables.size() << " sensitivity tables over " << pairs.size()
            << " pairs\n";
  return 0;
}

int cmd_ratio_profile(Context& ctx) {
  Model model = model_from(ctx);
  DualPairSet pairs = pairs_for_analysis(ctx, model, "ratio-profile");
  std::vector<std::string> layers = layer_selection(ctx, "ratio-profile", model.spec);
  double fraction = ctx.config.get_double_or("ratio-profile", "fraction", 0.10);
  std::string aggregate = ctx.config.get_or("ratio-profile", "aggregate", "sensitive");
  if (aggregate != "sensitive" && aggregate != "all")
    throw std::invalid_argument("ratio-profile.aggregate must be sensitive or all");
  ctx.config.reject_unknown();

  std::vector<ProfilePoint> profile =
      amplification_profile(model, pairs, layers, fraction, aggregate == "sensitive");
  ReportTable table({"layer", "mean_sigma_ratio", "neurons_used"});
  for (const ProfilePoint& p : profile)
    table.add_row({p.layer, p.mean_sigma_ratio, static_cast<long long>(p.neurons_used)});
  table.write_csv(ctx.out_path("ratio_profile.csv"));
  write_resolved_config(ctx);
  std::cout << "wrote ratio profile over " << profile.size() << " layers\n";
  return 0;
}

int cmd_importance(Context& ctx) {
  Model model = model_from(ctx);
  int k = static_cast<int>(ctx.config.get_int_or("importance", "k", 20));
  AttackSpec spec = attack_from(ctx, "attack");
  if (!spec.targeted)
    throw std::invalid_argument("importance needs a targeted attack ([attack] target = ...)");
  SplitSet splits = splits_from(ctx, model.spec.class_count);
  const Dataset& part = splits.by_name(ctx.config.get_or("importance", "split", "test"));
  ctx.config.reject_unknown();

  TargetedResult targeted = targeted_set(model, part, spec.target_class, spec);
  nlohmann::json out;
  out["target"] = spec.target_class;
  out["k"] = k;
  out["attempted"] = targeted.attempted;
  out["retained"] = targeted.set.size();
  if (targeted.set.size() > 0) {
    NeuronSequence gamma = vote_important(model, targeted.set, k);
    VoteTally tally = vote_tally(model, targeted.set, k);
    out["gamma"] = gamma.neurons;
    out["votes"] = tally.votes;
    ReportTable table({"channel", "votes"});
    for (size_t c = 0; c < tally.votes.size(); ++c)
      table.add_row({static_cast<long long>(c), tally.votes[c]});
    table.write_csv(ctx.out_path("votes.csv"));
  }
  atomic_write_file(ctx.out_path("importance.json"), out.dump() + "\n");
  write_resolved_config(ctx);
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_similarity(Context& ctx) {
  Model model = model_from(ctx);
  SplitSet splits = splits_from(ctx, model.spec.class_count);
  const Dataset& part = splits.by_name(ctx.config.get_or("similarity", "split", "test"));
  AttackSpec spec = attack_from(ctx, "attack");
  int k = static_cast<int>(ctx.config.get_int_or("similarity", "k", 10));
  std::vector<std::string> layers = layer_selection(ctx, "similarity", model.spec);
  std::string ranking_name = ctx.config.get_or("similarity", "ranking", "voting");
  ImportanceRanking ranking;
  if (ranking_name == "voting")
    ranking = ImportanceRanking::Voting;
  else if (ranking_name == "mean_phi")
    ranking = ImportanceRanking::MeanPhi;
  else
    throw std::invalid_argument("similarity.ranking must be voting or mean_phi");
  std::vector<int> classes;
  if (ctx.config.get_or("similarity", "classes", "all") == "all")
    for (int c = 0; c < model.spec.class_count; ++c) classes.push_back(c);
  else
    classes = ctx.config.get_int_list("similarity", "classes");
  ctx.config.reject_unknown();

  SimilarityStudy study = per_class_similarity_study(model, part, classes, layers, k, spec,
                                                     ranking);
  atomic_write_file(ctx.out_path("similarity.json"), study.to_json() + "\n");
  atomic_write_file(ctx.out_path("similarity.csv"), study.to_csv());
  write_resolved_config(ctx);
  std::cout << "similarity study over " << study.classes.size() << " classes ("
            << study.excluded_classes.size() << " excluded)\n";
  return 0;
}

int cmd_suppress(Context& ctx) {
  Model model = model_from(ctx);
  SplitSet splits = splits_from(ctx, model.spec.class_count);
  const Dataset& part = splits.by_name(ctx.config.get_or("suppress", "split", "test"));
  std::vector<AttackSpec> attacks = attack_list(ctx);
  if (attacks.empty()) throw std::invalid_argument("suppress needs at least one [attack]");
  std::vector<double> betas = ctx.config.get_double_list("suppress", "betas");
  int trials = static_cast<int>(ctx.config.get_int_or("suppress", "trials", 3));
  double fraction = ctx.config.get_double_or("suppress", "fraction", 0.10);
  ctx.config.reject_unknown();

  std::vector<SuppressionRow> rows =
      suppression_experiment(model, part, attacks, betas, trials, fraction, ctx.seed);
  std::vector<std::string> columns{"beta", "group", "trials", "clean_acc"};
  for (const AttackSpec& spec : attacks) columns.push_back("acc_" + spec.name());
  ReportTable table(columns);
  for (const SuppressionRow& row : rows) {
    std::vector<Cell> cells{row.beta, row.group, static_cast<long long>(row.trials),
                            row.clean_acc};
    for (const auto& [name, acc] : row.attack_acc) cells.push_back(acc);
    table.add_row(std::move(cells));
  }
  table.write_csv(ctx.out_path("suppress.csv"));
  write_resolved_config(ctx);
  std::cout << "suppression sweep over " << betas.size() << " beta values\n";
  return 0;
}

int cmd_layer_sweep(Context& ctx) {
  ModelSpec spec = model_spec_from(ctx);
  std::vector<int> ks = ctx.config.get_int_list("layer-sweep", "ks");
  Model base = load_checkpoint(ctx.config.get("train", "base"));
  SplitSet splits = splits_from(ctx, spec.class_count);
  TrainConfig config = train_config_from(ctx, spec);
  std::vector<AttackSpec> attacks = attack_list(ctx);
  ctx.config.reject_unknown();

  std::vector<std::string> columns{"k", "layers", "clean_acc"};
  for (const AttackSpec& a : attacks) columns.push_back("acc_" + a.name());
  ReportTable table(columns);
  for (int k : ks) {
    TrainConfig run = config;
    run.layer_set = select_layers_topk(spec, k);
    TrainResult result = train_sns(run, {splits.train, splits.val}, base);
    EvalResult eval = evaluate(result.model, splits.test.size() > 0 ? splits.test : splits.val,
                               attacks);
    std::string names;
    for (const std::string& l : run.layer_set) names += (names.empty() ? "" : "+") + l;
    std::vector<Cell> cells{static_cast<long long>(k), names, eval.clean_acc};
    for (const auto& [name, acc] : eval.robust_acc) cells.push_back(acc);
    table.add_row(std::move(cells));
    save_checkpoint(result.model, ctx.out_path("checkpoint_k" + std::to_string(k) + ".nsck"));
  }
  table.write_csv(ctx.out_path("layer_sweep.csv"));
  write_resolved_config(ctx);
  std::cout << "layer sweep over " << ks.size() << " depths\n";
  return 0;
}

int cmd_evaluate(Context& ctx) {
  Model model = model_from(ctx);
  SplitSet splits = splits_from(ctx, model.spec.class_count);
  const Dataset& part = splits.by_name(ctx.config.get_or("evaluate", "split", "test"));
  std::vector<AttackSpec> attacks = attack_list(ctx);
  ctx.config.reject_unknown();

  EvalResult result = evaluate(model, part, attacks);
  std::vector<std::string> columns{"split", "n", "clean_acc"};
  for (const AttackSpec& a : attacks) columns.push_back("acc_" + a.name());
  ReportTable table(columns);
  std::vector<Cell> cells{part.split, static_cast<long long>(part.size()), result.clean_acc};
  for (const auto& [name, acc] : result.robust_acc) cells.push_back(acc);
  table.add_row(std::move(cells));
  table.write_csv(ctx.out_path("evaluate.csv"));
  table.write_jsonl(ctx.out_path("evaluate.jsonl"));
  write_resolved_config(ctx);
  std::cout << "clean acc " << format_sig6(result.clean_acc);
  for (const auto& [name, acc] : result.robust_acc)
    std::cout << ", " << name << " " << format_sig6(acc);
  std::cout << "\n";
  return 0;
}

int cmd_report(Context& ctx) {
  std::vector<std::string> inputs = ctx.config.get_list("report", "inputs");
  ctx.config.reject_unknown();
  nlohmann::json summary = nlohmann::json::object();
  for (const std::string& dir : inputs) {
    nlohmann::json entry = nlohmann::json::object();
    const fs::path base(dir);
    if (fs::exists(base / "report.jsonl")) {
      std::ifstream in(base / "report.jsonl");
      std::string line, last;
      while (std::getline(in, line))
        if (!line.empty()) last = line;
      if (!last.empty()) entry["train_summary"] = nlohmann::json::parse(last);
    }
    if (fs::exists(base / "evaluate.jsonl")) {
      std::ifstream in(base / "evaluate.jsonl");
      std::string line;
      nlohmann::json rows = nlohmann::json::array();
      while (std::getline(in, line))
        if (!line.empty()) rows.push_back(nlohmann::json::parse(line));
      entry["evaluate"] = rows;
    }
    for (const char* name : {"attack.json", "importance.json", "similarity.json"})
      if (fs::exists(base / name)) {
        std::ifstream in(base / name);
        std::ostringstream ss;
        ss << in.rdbuf();
        entry[name] = nlohmann::json::parse(ss.str());
      }
    nlohmann::json files = nlohmann::json::array();
    if (fs::exists(base))
      for (const auto& f : fs::directory_iterator(base)) {
        std::string fname = f.path().filename().string();
        if (fname.rfind(".tmp") == std::string::npos) files.push_back(fname);
      }
    std::sort(files.begin(), files.end());
    entry["files"] = files;
    summary[fs::path(dir).filename().string().empty() ? dir
                                                      : fs::path(dir).filename().string()] =
        entry;
  }
  atomic_write_file(ctx.out_path("summary.json"), summary.dump(2) + "\n");
  write_resolved_config(ctx);
  std::cout << "merged " << inputs.size() << " run directories\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neuron sensitivity toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out";
  uint64_t seed = 0;
  bool seed_given = false;
  app.add_option("--config", config_path, "experiment config file")->required();
  app.add_option("--out", out_dir, "output directory (created if missing)");
  app.add_option("--seed", seed, "seed overriding [run].seed")->each([&](const std::string&) {
    seed_given = true;
  });

  const std::vector<std::string> commands{"train",      "attack",     "sensitivity",
                                          "ratio-profile", "importance", "similarity",
                                          "suppress",   "layer-sweep", "evaluate",
                                          "report"};
  for (const std::string& name : commands) app.add_subcommand(name)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  Context ctx;
  ctx.command = app.get_subcommands().front()->get_name();
  ctx.out_dir = out_dir;
  try {
    ctx.config = RunConfig::parse_file(config_path);
    ctx.seed = seed_given ? seed : ctx.config.get_u64_or("run", "seed", 0);
    fs::create_directories(out_dir);

    if (ctx.command == "train") return cmd_train(ctx);
    if (ctx.command == "attack") return cmd_attack(ctx);
    if (ctx.command == "sensitivity") return cmd_sensitivity(ctx);
    if (ctx.command == "ratio-profile") return cmd_ratio_profile(ctx);
    if (ctx.command == "importance") return cmd_importance(ctx);
    if (ctx.command == "similarity") return cmd_similarity(ctx);
    if (ctx.command == "suppress") return cmd_suppress(ctx);
    if (ctx.command == "layer-sweep") return cmd_layer_sweep(ctx);
    if (ctx.command == "evaluate") return cmd_evaluate(ctx);
    if (ctx.command == "report") return cmd_report(ctx);
    std::cerr << "unknown subcommand '" << ctx.command << "'\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
}
