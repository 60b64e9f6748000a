#include "polarize/experiment.hpp"

#include <cmath>
#include <cstdio>

#include "polarize/runio.hpp"

namespace polarize {

namespace {

// --------------------------------------------------------------------------
// strict typed getters
// --------------------------------------------------------------------------

double num_field(const nlohmann::json& obj, const std::string& section,
                 const std::string& key, double def) {
  if (!obj.contains(key)) return def;
  if (!obj.at(key).is_number())
    throw ConfigError("config field " + section + "." + key + " must be a number");
  return obj.at(key).get<double>();
}

int64_t int_field(const nlohmann::json& obj, const std::string& section,
                  const std::string& key, int64_t def) {
  if (!obj.contains(key)) return def;
  if (!obj.at(key).is_number_integer())
    throw ConfigError("config field " + section + "." + key + " must be an integer");
  return obj.at(key).get<int64_t>();
}

bool bool_field(const nlohmann::json& obj, const std::string& section,
                const std::string& key, bool def) {
  if (!obj.contains(key)) return def;
  if (!obj.at(key).is_boolean())
    throw ConfigError("config field " + section + "." + key + " must be a boolean");
  return obj.at(key).get<bool>();
}

std::string str_field(const nlohmann::json& obj, const std::string& section,
                      const std::string& key, const std::string& def) {
  if (!obj.contains(key)) return def;
  if (!obj.at(key).is_string())
    throw ConfigError("config field " + section + "." + key + " must be a string");
  return obj.at(key).get<std::string>();
}

std::string required_str(const nlohmann::json& obj, const std::string& section,
                         const std::string& key) {
  if (!obj.contains(key))
    throw ConfigError("missing required config field " + section + "." + key);
  return str_field(obj, section, key, "");
}

std::filesystem::path dataset_root(const nlohmann::json& config) {
  if (!config.contains("dataset"))
    throw ConfigError("missing required config section 'dataset'");
  require_known_keys(config.at("dataset"), "dataset", {"root"});
  return required_str(config.at("dataset"), "dataset", "root");
}

void check_sections(const nlohmann::json& config) {
  require_known_keys(config, "<top>", {"dataset", "attack", "defense", "eval", "sweep"});
}

// --------------------------------------------------------------------------
// evaluation helpers
// --------------------------------------------------------------------------

PredictFn model_predict_fn(CnnModel& model) {
  return [&model](const Tensor& b) { return predict_classes(model.forward(b, Mode::kInfer)); };
}

std::string train_log_csv(const std::vector<EpochStats>& log) {
  std::string out = "epoch,loss,acc,asr\n";
  char buf[128];
  for (const auto& st : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f\n", st.epoch, st.loss, st.acc,
                  st.asr);
    out += buf;
  }
  return out;
}

void note_dataset_inputs(RunWriter& writer, const std::filesystem::path& dir) {
  for (const char* name : {"images.bin", "labels.bin", "meta.json"})
    writer.note_input(dir / name);
}

struct AttackContext {
  TriggerSpec trigger;
  PoisonPlan plan;
  std::string label;
};

// Pulls trigger + plan from the manifest of the attack run that produced a
// checkpoint, so defend/eval runs can score ASR against the same attack.
AttackContext attack_context_for_checkpoint(const std::filesystem::path& ckpt,
                                            const DatasetMeta& meta) {
  const auto manifest_path = ckpt.parent_path() / "manifest.json";
  if (!std::filesystem::exists(manifest_path))
    throw ConfigError("no attack manifest next to checkpoint: " + manifest_path.string());
  const nlohmann::json manifest = load_json_file(manifest_path);
  const nlohmann::json& attack = manifest.at("config").at("attack");
  AttackContext ctx{trigger_from_json(attack.at("trigger"), meta),
                    plan_from_json(attack), ""};
  ctx.label = attack_label(ctx.trigger, ctx.plan);
  return ctx;
}

}  // namespace

// --------------------------------------------------------------------------
// config resolution
// --------------------------------------------------------------------------

nlohmann::json resolve_attack_section(const nlohmann::json& attack,
                                      const DatasetMeta& meta) {
  require_known_keys(attack, "attack",
                     {"trigger", "mode", "target", "ratio", "seed", "model", "train"});
  nlohmann::json trig = attack.value("trigger", nlohmann::json::object());
  require_known_keys(trig, "attack.trigger",
                     {"kind", "patch_size", "patch_value", "blend_alpha", "pattern_seed"});
  const std::string kind = str_field(trig, "attack.trigger", "kind", "patch");
  if (kind != "patch" && kind != "blend")
    throw ConfigError("attack.trigger.kind must be 'patch' or 'blend'");
  nlohmann::json rtrig{{"kind", kind}};
  if (kind == "patch") {
    const int64_t size = int_field(trig, "attack.trigger", "patch_size", 3);
    const double value = num_field(trig, "attack.trigger", "patch_value", 1.0);
    if (size < 1 || size > std::min(meta.height, meta.width))
      throw ConfigError("attack.trigger.patch_size out of range");
    if (value < 0 || value > 1) throw ConfigError("attack.trigger.patch_value must be in [0,1]");
    rtrig["patch_size"] = size;
    rtrig["patch_value"] = value;
  } else {
    const double alpha = num_field(trig, "attack.trigger", "blend_alpha", 0.2);
    if (alpha < 0 || alpha > 1) throw ConfigError("attack.trigger.blend_alpha must be in [0,1]");
    rtrig["blend_alpha"] = alpha;
    rtrig["pattern_seed"] = static_cast<uint64_t>(
        int_field(trig, "attack.trigger", "pattern_seed",
                  static_cast<int64_t>(kDefaultBlendPatternSeed)));
  }

  const std::string mode = str_field(attack, "attack", "mode", "all_to_one");
  if (mode != "all_to_one" && mode != "all_to_all")
    throw ConfigError("attack.mode must be 'all_to_one' or 'all_to_all'");
  const int64_t target = int_field(attack, "attack", "target", 0);
  if (mode == "all_to_one" && (target < 0 || target >= meta.num_classes))
    throw ConfigError("attack.target out of range for the dataset");
  const double ratio = num_field(attack, "attack", "ratio", 0.1);
  if (ratio < 0 || ratio > 1) throw ConfigError("attack.ratio must be in [0,1]");

  nlohmann::json model = attack.value("model", nlohmann::json::object());
  require_known_keys(model, "attack.model", {"channels", "seed"});
  std::vector<int64_t> channels{32, 64, 128, 128};
  if (model.contains("channels")) {
    if (!model.at("channels").is_array())
      throw ConfigError("attack.model.channels must be an array of integers");
    channels = model.at("channels").get<std::vector<int64_t>>();
  }

  nlohmann::json train = attack.value("train", nlohmann::json::object());
  require_known_keys(train, "attack.train",
                     {"epochs", "batch_size", "lr", "momentum", "weight_decay", "seed",
                      "eval_subset"});
  const int64_t epochs = int_field(train, "attack.train", "epochs", 30);
  const int64_t batch = int_field(train, "attack.train", "batch_size", 128);
  const double lr = num_field(train, "attack.train", "lr", 0.01);
  if (epochs < 0) throw ConfigError("attack.train.epochs must be >= 0");
  if (batch < 1) throw ConfigError("attack.train.batch_size must be >= 1");
  if (lr <= 0) throw ConfigError("attack.train.lr must be positive");

  return nlohmann::json{
      {"trigger", rtrig},
      {"mode", mode},
      {"target", target},
      {"ratio", ratio},
      {"seed", static_cast<uint64_t>(int_field(attack, "attack", "seed", 1))},
      {"model",
       {{"channels", channels},
        {"seed", static_cast<uint64_t>(int_field(model, "attack.model", "seed", 2))}}},
      {"train",
       {{"epochs", epochs},
        {"batch_size", batch},
        {"lr", lr},
        {"momentum", num_field(train, "attack.train", "momentum", 0.9)},
        {"weight_decay", num_field(train, "attack.train", "weight_decay", 5e-4)},
        {"seed", static_cast<uint64_t>(int_field(train, "attack.train", "seed", 3))},
        {"eval_subset", int_field(train, "attack.train", "eval_subset", 512)}}}};
}

nlohmann::json resolve_defense_section(const nlohmann::json& defense,
                                       const DatasetMeta& meta) {
  require_known_keys(defense, "defense",
                     {"checkpoint", "variant", "lambda1", "lambda2", "lambda3", "epochs",
                      "warmup_epochs", "lr", "momentum", "batch_size", "insertion",
                      "known_target", "seed", "clean", "perturbation", "use_bce1",
                      "use_bce2", "use_asr", "eval_subset"});
  const std::string variant = str_field(defense, "defense", "variant", "NPD");
  const DefenseVariant v = variant_from_name(variant);  // throws on bad name
  const bool known = v == DefenseVariant::kNpdTp || v == DefenseVariant::kNpdTu;
  const double def_l23 = known ? 0.1 : 0.4;

  nlohmann::json clean = defense.value("clean", nlohmann::json::object());
  require_known_keys(clean, "defense.clean", {"fraction", "count", "seed"});
  if (clean.contains("fraction") && clean.contains("count"))
    throw ConfigError("defense.clean: give either fraction or count, not both");
  nlohmann::json rclean{{"seed", static_cast<uint64_t>(int_field(clean, "defense.clean", "seed", 5))}};
  if (clean.contains("count")) {
    const int64_t count = int_field(clean, "defense.clean", "count", 0);
    if (count < 1) throw ConfigError("defense.clean.count must be >= 1");
    rclean["count"] = count;
  } else {
    const double fraction = num_field(clean, "defense.clean", "fraction", 0.05);
    if (fraction <= 0 || fraction > 1)
      throw ConfigError("defense.clean.fraction must be in (0,1]");
    rclean["fraction"] = fraction;
  }

  nlohmann::json pert = defense.value("perturbation", nlohmann::json::object());
  require_known_keys(pert, "defense.perturbation",
                     {"norm", "rho", "steps", "step_size", "clamp"});
  const std::string norm = str_field(pert, "defense.perturbation", "norm", "l2");
  if (norm != "l2" && norm != "linf")
    throw ConfigError("defense.perturbation.norm must be 'l2' or 'linf'");
  // paper-equivalent default budget: L2 bound 3 on 3x32x32 inputs, scaled to
  // this dataset's dimension
  const double d = static_cast<double>(meta.sample_size());
  const double rho_default = norm == "l2" ? 3.0 * std::sqrt(d / 3072.0) : 8.0 / 255.0;
  const double rho = num_field(pert, "defense.perturbation", "rho", rho_default);
  if (rho <= 0) throw ConfigError("defense.perturbation.rho must be positive");
  const int64_t steps = int_field(pert, "defense.perturbation", "steps", 5);
  if (steps < 0) throw ConfigError("defense.perturbation.steps must be >= 0");

  nlohmann::json resolved{
      {"variant", variant},
      {"lambda1", num_field(defense, "defense", "lambda1", 1.0)},
      {"lambda2", num_field(defense, "defense", "lambda2", def_l23)},
      {"lambda3", num_field(defense, "defense", "lambda3", def_l23)},
      {"epochs", int_field(defense, "defense", "epochs", 50)},
      {"warmup_epochs", int_field(defense, "defense", "warmup_epochs", 2)},
      {"lr", num_field(defense, "defense", "lr", 0.01)},
      {"momentum", num_field(defense, "defense", "momentum", 0.9)},
      {"batch_size", int_field(defense, "defense", "batch_size", 128)},
      {"insertion", int_field(defense, "defense", "insertion", 3)},
      {"seed", static_cast<uint64_t>(int_field(defense, "defense", "seed", 4))},
      {"clean", rclean},
      {"perturbation",
       {{"norm", norm},
        {"rho", rho},
        {"steps", steps},
        {"step_size", num_field(pert, "defense.perturbation", "step_size", 0.0)},
        {"clamp", bool_field(pert, "defense.perturbation", "clamp", true)}}},
      {"use_bce1", bool_field(defense, "defense", "use_bce1", true)},
      {"use_bce2", bool_field(defense, "defense", "use_bce2", true)},
      {"use_asr", bool_field(defense, "defense", "use_asr", true)},
      {"eval_subset", int_field(defense, "defense", "eval_subset", 512)}};
  if (defense.contains("checkpoint"))
    resolved["checkpoint"] = required_str(defense, "defense", "checkpoint");
  if (defense.contains("known_target"))
    resolved["known_target"] = int_field(defense, "defense", "known_target", 0);
  // config-structure errors (missing target for TP/TU, ranges) surface here;
  // the exact insertion bound is re-checked against the model in npd_fit
  validate_defense_config(defense_config_from_json(resolved), meta.num_classes,
                          /*max_insertion=*/8);
  return resolved;
}

TriggerSpec trigger_from_json(const nlohmann::json& t, const DatasetMeta& meta) {
  const std::string kind = t.at("kind").get<std::string>();
  if (kind == "patch")
    return make_patch_trigger(meta, t.at("patch_size").get<int64_t>(),
                              t.at("patch_value").get<double>());
  return make_blend_trigger(meta, t.at("blend_alpha").get<double>(),
                            t.at("pattern_seed").get<uint64_t>());
}

PoisonPlan plan_from_json(const nlohmann::json& attack) {
  PoisonPlan plan;
  plan.mode = attack.at("mode").get<std::string>() == "all_to_all"
                  ? PoisonMode::kAllToAll
                  : PoisonMode::kAllToOne;
  plan.target = attack.at("target").get<int64_t>();
  plan.ratio = attack.at("ratio").get<double>();
  plan.seed = attack.at("seed").get<uint64_t>();
  return plan;
}

DefenseConfig defense_config_from_json(const nlohmann::json& d) {
  DefenseConfig cfg;
  cfg.variant = variant_from_name(d.at("variant").get<std::string>());
  cfg.weights = {d.at("lambda1").get<double>(), d.at("lambda2").get<double>(),
                 d.at("lambda3").get<double>()};
  cfg.flags = {d.at("use_bce1").get<bool>(), d.at("use_bce2").get<bool>(),
               d.at("use_asr").get<bool>()};
  cfg.epochs = d.at("epochs").get<int>();
  cfg.warmup_epochs = d.at("warmup_epochs").get<int>();
  cfg.lr = d.at("lr").get<double>();
  cfg.momentum = d.at("momentum").get<double>();
  cfg.batch_size = d.at("batch_size").get<int>();
  cfg.insertion_index = d.at("insertion").get<int>();
  if (d.contains("known_target")) cfg.known_target = d.at("known_target").get<int64_t>();
  cfg.seed = d.at("seed").get<uint64_t>();
  const nlohmann::json& p = d.at("perturbation");
  cfg.perturbation.norm =
      p.at("norm").get<std::string>() == "linf" ? NormKind::kLinf : NormKind::kL2;
  cfg.perturbation.rho = p.at("rho").get<double>();
  cfg.perturbation.steps = p.at("steps").get<int>();
  cfg.perturbation.step_size = p.at("step_size").get<double>();
  cfg.perturbation.clamp = p.at("clamp").get<bool>();
  return cfg;
}

std::string attack_label(const TriggerSpec& trig, const PoisonPlan& plan) {
  if (trig.kind == TriggerKind::kBlend) return "blended";
  return plan.mode == PoisonMode::kAllToOne ? "badnets-a2o" : "badnets-a2a";
}

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j{{"acc", r.acc},
                   {"asr", r.asr},
                   {"n_clean_eval", r.n_clean_eval},
                   {"n_poison_eval", r.n_poison_eval}};
  if (r.der) j["der"] = *r.der;
  return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.acc = j.at("acc").get<double>();
  r.asr = j.at("asr").get<double>();
  r.n_clean_eval = j.at("n_clean_eval").get<int64_t>();
  r.n_poison_eval = j.at("n_poison_eval").get<int64_t>();
  if (j.contains("der")) r.der = j.at("der").get<double>();
  return r;
}

// --------------------------------------------------------------------------
// attack
// --------------------------------------------------------------------------

nlohmann::json run_attack(const nlohmann::json& config,
                          const std::filesystem::path& run_dir) {
  check_sections(config);
  const auto root = dataset_root(config);
  if (!config.contains("attack"))
    throw ConfigError("attack command needs an 'attack' config section");
  Dataset train = load_dataset(root / "train");
  Dataset test = load_dataset(root / "test");

  const nlohmann::json attack = resolve_attack_section(config.at("attack"), train.meta);
  const nlohmann::json resolved{{"dataset", {{"root", root.string()}}},
                                {"attack", attack}};
  RunWriter writer(run_dir, "attack", resolved);
  note_dataset_inputs(writer, root / "train");
  note_dataset_inputs(writer, root / "test");

  const TriggerSpec trigger = trigger_from_json(attack.at("trigger"), train.meta);
  const PoisonPlan plan = plan_from_json(attack);

  PoisonResult poisoned = poison_dataset(train, plan, trigger);
  save_dataset(writer.dir() / "poisoned", poisoned.data);
  for (const char* f : {"images.bin", "labels.bin", "meta.json"})
    writer.note(std::string("poisoned/") + f);
  save_poison_manifest(writer.dir() / "poisoned" / "poison.json", plan,
                       poisoned.poisoned_indices);
  writer.note("poisoned/poison.json");

  CnnModel model = build_cnn(train.meta,
                             attack.at("model").at("channels").get<std::vector<int64_t>>(),
                             attack.at("model").at("seed").get<uint64_t>());
  TrainHyper hyper;
  const nlohmann::json& tr = attack.at("train");
  hyper.epochs = tr.at("epochs").get<int>();
  hyper.batch_size = tr.at("batch_size").get<int>();
  hyper.lr = tr.at("lr").get<double>();
  hyper.momentum = tr.at("momentum").get<double>();
  hyper.weight_decay = tr.at("weight_decay").get<double>();
  hyper.seed = tr.at("seed").get<uint64_t>();

  TrainEvalHooks hooks{&test, &trigger, &plan, tr.at("eval_subset").get<int64_t>()};
  const auto log = train_model(model, poisoned.data, hyper,
                               hooks.max_eval == 0 ? nullptr : &hooks);
  writer.write_text("train_log.csv", train_log_csv(log));

  EvalReport report = evaluate(model_predict_fn(model), test, trigger, plan);
  save_checkpoint(writer.dir() / "model.ckpt", model, hyper.epochs,
                  {{"acc", report.acc}, {"asr", report.asr}});
  writer.note("model.ckpt");
  writer.note("model.json");
  writer.write_json("report.json", report_to_json(report));
  writer.write_text("report.csv",
                    report_csv({{attack_label(trigger, plan), "none", report,
                                 plan.seed}}));

  writer.set_seeds({{"poison", plan.seed},
                    {"model", attack.at("model").at("seed")},
                    {"train", hyper.seed}});
  nlohmann::json metrics{{"acc", report.acc},
                         {"asr", report.asr},
                         {"attack", attack_label(trigger, plan)},
                         {"n_poisoned", poisoned.poisoned_indices.size()}};
  writer.set_metrics(metrics);
  writer.finalize();
  return metrics;
}

// --------------------------------------------------------------------------
// defend
// --------------------------------------------------------------------------

nlohmann::json run_defend(const nlohmann::json& config,
                          const std::filesystem::path& run_dir) {
  check_sections(config);
  const auto root = dataset_root(config);
  if (!config.contains("defense"))
    throw ConfigError("defend command needs a 'defense' config section");
  Dataset train = load_dataset(root / "train");
  Dataset test = load_dataset(root / "test");

  nlohmann::json defense = resolve_defense_section(config.at("defense"), train.meta);
  if (!defense.contains("checkpoint"))
    throw ConfigError("missing required config field defense.checkpoint");
  const nlohmann::json resolved{{"dataset", {{"root", root.string()}}},
                                {"defense", defense}};
  RunWriter writer(run_dir, "defend", resolved);
  note_dataset_inputs(writer, root / "train");
  note_dataset_inputs(writer, root / "test");

  const std::filesystem::path ckpt = defense.at("checkpoint").get<std::string>();
  if (!std::filesystem::exists(ckpt))
    throw ConfigError("defense.checkpoint does not exist: " + ckpt.string());
  writer.note_input(ckpt);
  CnnModel base = load_checkpoint(ckpt);
  PZ_REQUIRE(base.meta == train.meta, "checkpoint and dataset shapes differ");

  const AttackContext ctx = attack_context_for_checkpoint(ckpt, train.meta);
  EvalReport pre;
  const auto pre_path = ckpt.parent_path() / "report.json";
  if (!std::filesystem::exists(pre_path))
    throw ConfigError("pre-defense report missing: " + pre_path.string());
  pre = report_from_json(load_json_file(pre_path));
  writer.note_input(pre_path);

  const nlohmann::json& clean = defense.at("clean");
  Dataset d_bn =
      clean.contains("count")
          ? split_clean_count(train, clean.at("count").get<int64_t>(),
                              clean.at("seed").get<uint64_t>())
                .first
          : split_clean_subset(train, clean.at("fraction").get<double>(),
                               clean.at("seed").get<uint64_t>())
                .first;

  DefenseConfig cfg = defense_config_from_json(defense);
  validate_defense_config(cfg, base.meta.num_classes, base.num_units() - 1);
  TrainEvalHooks hooks{&test, &ctx.trigger, &ctx.plan,
                       defense.at("eval_subset").get<int64_t>()};
  NpdResult res = npd_fit(base, d_bn, cfg, hooks.max_eval == 0 ? nullptr : &hooks);

  writer.write_json("config.json", resolved);
  writer.write_text("metrics.csv", defense_log_csv(res.log));
  save_polarizer(writer.dir() / "polarizer.ckpt", res.model.polarizer(),
                 cfg.insertion_index, res.model.boundary_name());
  writer.note("polarizer.ckpt");
  writer.note("polarizer.json");

  auto pf = [&res](const Tensor& b) { return res.model.predict(b); };
  EvalReport post = evaluate(pf, test, ctx.trigger, ctx.plan, &pre);
  writer.write_json("report.json", report_to_json(post));
  writer.write_text("report.csv",
                    report_csv({{ctx.label, variant_name(cfg.variant), post, cfg.seed}}));

  writer.set_seeds({{"defense", cfg.seed}, {"clean", clean.at("seed")}});
  nlohmann::json metrics{{"acc", post.acc},      {"asr", post.asr},
                         {"der", *post.der},     {"pre_acc", pre.acc},
                         {"pre_asr", pre.asr},   {"attack", ctx.label},
                         {"variant", variant_name(cfg.variant)},
                         {"n_clean", d_bn.size()}};
  writer.set_metrics(metrics);
  writer.finalize();
  return metrics;
}

// --------------------------------------------------------------------------
// eval
// --------------------------------------------------------------------------

nlohmann::json run_eval(const nlohmann::json& config,
                        const std::filesystem::path& run_dir) {
  check_sections(config);
  const auto root = dataset_root(config);
  if (!config.contains("eval"))
    throw ConfigError("eval command needs an 'eval' config section");
  const nlohmann::json& eval = config.at("eval");
  require_known_keys(eval, "eval", {"checkpoint", "polarizer", "pre_report"});
  Dataset test = load_dataset(root / "test");

  nlohmann::json resolved{{"dataset", {{"root", root.string()}}},
                          {"eval", eval}};
  RunWriter writer(run_dir, "eval", resolved);
  note_dataset_inputs(writer, root / "test");

  const std::filesystem::path ckpt = required_str(eval, "eval", "checkpoint");
  if (!std::filesystem::exists(ckpt))
    throw ConfigError("eval.checkpoint does not exist: " + ckpt.string());
  writer.note_input(ckpt);
  CnnModel base = load_checkpoint(ckpt);
  const AttackContext ctx = attack_context_for_checkpoint(ckpt, test.meta);

  std::optional<AugmentedModel> aug;
  if (eval.contains("polarizer")) {
    const std::filesystem::path pol = required_str(eval, "eval", "polarizer");
    if (!std::filesystem::exists(pol))
      throw ConfigError("eval.polarizer does not exist: " + pol.string());
    writer.note_input(pol);
    auto [params, k] = load_polarizer(pol);
    aug.emplace(base, k, std::move(params));
  }

  EvalReport pre;
  const EvalReport* pre_ptr = nullptr;
  if (eval.contains("pre_report")) {
    pre = report_from_json(load_json_file(required_str(eval, "eval", "pre_report")));
    pre_ptr = &pre;
  }

  PredictFn pf = aug ? PredictFn([&aug](const Tensor& b) { return aug->predict(b); })
                     : model_predict_fn(base);
  EvalReport report = evaluate(pf, test, ctx.trigger, ctx.plan, pre_ptr);
  writer.write_json("report.json", report_to_json(report));
  writer.write_text(
      "report.csv",
      report_csv({{ctx.label, aug ? "defended" : "none", report, ctx.plan.seed}}));

  nlohmann::json metrics{{"acc", report.acc}, {"asr", report.asr}};
  if (report.der) metrics["der"] = *report.der;
  writer.set_metrics(metrics);
  writer.finalize();
  return metrics;
}

// --------------------------------------------------------------------------
// sweep
// --------------------------------------------------------------------------

nlohmann::json run_sweep(const nlohmann::json& config,
                         const std::filesystem::path& run_dir) {
  check_sections(config);
  const auto root = dataset_root(config);
  if (!config.contains("sweep"))
    throw ConfigError("sweep command needs a 'sweep' config section");
  const nlohmann::json& sweep = config.at("sweep");
  require_known_keys(sweep, "sweep", {"axis", "values"});
  const std::string axis = required_str(sweep, "sweep", "axis");
  if (axis != "poison_ratio" && axis != "clean_count" && axis != "insertion")
    throw ConfigError("sweep.axis must be poison_ratio, clean_count or insertion");
  if (!sweep.contains("values") || !sweep.at("values").is_array() ||
      sweep.at("values").empty())
    throw ConfigError("sweep.values must be a non-empty array");
  if (!config.contains("attack") || !config.contains("defense"))
    throw ConfigError("sweep needs both 'attack' and 'defense' config sections");

  Dataset probe = load_dataset(root / "test");  // meta only
  const nlohmann::json attack = resolve_attack_section(config.at("attack"), probe.meta);
  nlohmann::json defense = resolve_defense_section(config.at("defense"), probe.meta);
  defense.erase("checkpoint");  // filled per sub-run below
  const nlohmann::json resolved{{"dataset", {{"root", root.string()}}},
                                {"attack", attack},
                                {"defense", defense},
                                {"sweep", sweep}};
  RunWriter writer(run_dir, "sweep", resolved);

  // one attack run is shared when the axis does not touch the attack
  std::filesystem::path shared_ckpt;
  if (axis != "poison_ratio") {
    const auto sub = writer.dir() / "attack";
    nlohmann::json sub_cfg{{"dataset", {{"root", root.string()}}}, {"attack", attack}};
    run_attack(sub_cfg, sub);
    writer.note("attack");
    shared_ckpt = sub / "model.ckpt";
  }

  std::vector<ReportRow> rows;
  std::vector<std::string> values_text;
  for (const auto& value : sweep.at("values")) {
    std::string vtext = value.dump();
    values_text.push_back(vtext);
    std::filesystem::path ckpt = shared_ckpt;
    if (axis == "poison_ratio") {
      if (!value.is_number()) throw ConfigError("poison_ratio values must be numbers");
      nlohmann::json a = attack;
      a["ratio"] = value.get<double>();
      if (a.at("ratio") < 0.0 || a.at("ratio") > 1.0)
        throw ConfigError("sweep poison_ratio value out of [0,1]");
      const auto sub = writer.dir() / ("attack-" + vtext);
      run_attack({{"dataset", {{"root", root.string()}}}, {"attack", a}}, sub);
      writer.note("attack-" + vtext);
      ckpt = sub / "model.ckpt";
    }

    nlohmann::json d = defense;
    if (axis == "clean_count") {
      if (!value.is_number_integer())
        throw ConfigError("clean_count values must be integers");
      d["clean"].erase("fraction");
      d["clean"]["count"] = value.get<int64_t>();
    } else if (axis == "insertion") {
      if (!value.is_number_integer()) throw ConfigError("insertion values must be integers");
      d["insertion"] = value.get<int64_t>();
    }
    d["checkpoint"] = ckpt.string();
    const auto sub = writer.dir() / ("defend-" + vtext);
    nlohmann::json metrics =
        run_defend({{"dataset", {{"root", root.string()}}}, {"defense", d}}, sub);
    writer.note("defend-" + vtext);

    EvalReport r = report_from_json(load_json_file(sub / "report.json"));
    rows.push_back({metrics.at("attack").get<std::string>(),
                    metrics.at("variant").get<std::string>(), r,
                    d.at("seed").get<uint64_t>()});
  }

  // aggregate table: the swept value plus the standard report columns
  std::string agg = "value,attack,variant,acc,asr,der,n_clean_eval,n_poison_eval,seed\n";
  for (size_t i = 0; i < rows.size(); ++i) {
    const std::string one = report_csv({rows[i]});
    agg += values_text[i] + "," + one.substr(one.find('\n') + 1);
  }
  writer.write_text("aggregate.csv", agg);

  writer.set_metrics({{"axis", axis}, {"rows", rows.size()}});
  writer.finalize();
  return {{"axis", axis}, {"rows", rows.size()}};
}

}  // namespace polarize
