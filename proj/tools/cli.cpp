#include "cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <ctime>
#include <functional>
#include <iostream>
#include <optional>

#include "latinf/ablation.hpp"
#include "latinf/attack_eval.hpp"
#include "latinf/curation.hpp"
#include "latinf/errors.hpp"
#include "latinf/logging.hpp"
#include "latinf/serialize.hpp"
#include "latinf/toybench.hpp"
#include "latinf/trainer.hpp"

namespace latinf::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kMiPairTag = 0x6d697061;

json default_config() {
  json c = PipelineConfig{}.to_json();
  c["registry"] = "";
  c["surrogate"] = "";
  c["victims"] = json::array();
  c["dataset"] = "";
  c["deterministic"] = false;
  c["partition"] = "";
  c["checkpoint"] = "";
  c["resume"] = "";
  c["adv"] = "";
  c["mode"] = "known";
  c["audit"] = false;
  c["per_class_report"] = false;
  c["bins"] = 10;
  c["records"] = json::array();
  c["ablation"] = {{"axis", "alpha"}, {"values", json::array()}, {"repeats", 1}, {"fixed_seed", false},
                   {"m_reference", 0}};
  c["mi"] = {{"model", ""}, {"split", "test"}, {"pairs", 256}, {"steps", 300}, {"mu", 1.0}, {"epsilon_255", 16.0}};
  return c;
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string run_dir;
  std::string log_level = "info";
};

// Options bound per subcommand; each set option becomes a JSON patch entry.
struct Overrides {
  std::vector<std::function<void(json&)>> setters;

  template <typename T>
  void bind(CLI::App* app, const std::string& flag, std::optional<T>& slot, json::json_pointer ptr,
            const std::string& help) {
    app->add_option(flag, slot, help);
    setters.push_back([&slot, ptr](json& j) {
      if (slot) j[ptr] = *slot;
    });
  }
};

std::string utc_stamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

fs::path prepare_run_dir(const std::string& requested, const json& resolved) {
  const std::string hash = sha256_hex(resolved.dump()).substr(0, 12);
  fs::path dir = requested.empty() ? fs::path("runs") / (utc_stamp() + "-" + hash) : fs::path(requested);
  if (fs::exists(dir) && !fs::is_empty(dir))
    throw ConfigError("run directory " + dir.string() + " already holds another run's artifacts");
  fs::create_directories(dir);
  write_file_atomic(dir / "config.json", resolved.dump(2) + "\n");
  return dir;
}

std::string need(const json& c, const char* key) {
  const std::string v = c.value(key, std::string());
  if (v.empty()) throw ConfigError(std::string("missing required setting '") + key + "'");
  return v;
}

ModelRegistry open_registry(const json& c) {
  const fs::path file = need(c, "registry");
  if (!fs::exists(file)) throw ConfigError("model registry not found: " + file.string());
  return ModelRegistry::load(file);
}

std::vector<ModelHandle> load_victims(const ModelRegistry& reg, const json& c) {
  std::vector<ModelHandle> out;
  for (const auto& id : c.at("victims")) out.push_back(reg.load_model(id.get<std::string>(), ModelRole::kVictim));
  return out;
}

void require_dir(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("missing required setting '") + what + "'");
  if (!fs::is_directory(path)) throw DataError(std::string(what) + " directory not found: " + path);
}

void write_eval_reports(const fs::path& dir, const std::vector<EvalRecord>& records, bool per_class, int bins) {
  write_file_atomic(dir / "records.tsv", records_tsv(records));
  const TransferMatrix m = transfer_matrix(records);
  const auto cells = m.cells();
  write_file_atomic(dir / "report.tsv", report_tsv(cells));
  write_file_atomic(dir / "report.md", render_matrix(m));
  std::cout << render_matrix(m);
  if (per_class) {
    const PerClassReport pc = per_class_tasr(records, bins);
    write_file_atomic(dir / "per_class.tsv", report_tsv(pc.classes));
    std::string hist = "bin_low\tbin_high\tclasses\n";
    for (int b = 0; b < bins; ++b) {
      char row[96];
      std::snprintf(row, sizeof row, "%.4f\t%.4f\t%lld\n", static_cast<double>(b) / bins,
                    static_cast<double>(b + 1) / bins, static_cast<long long>(pc.histogram[static_cast<std::size_t>(b)]));
      hist += row;
    }
    write_file_atomic(dir / "histogram.tsv", hist);
  }
}

// ---- commands ----------------------------------------------------------------

void cmd_curate(const json& c, const fs::path& run) {
  const ModelRegistry reg = open_registry(c);
  const ModelHandle m = reg.load_model(need(c, "surrogate"), ModelRole::kExtractor);
  PipelineConfig pc = PipelineConfig::from_json(c);
  PartitionOptions o = pc.curation;
  o.seed = pc.seed;
  const ClassPartition p = build_partition(m, fs::absolute(need(c, "dataset")), o);
  p.save(run / "partition.json");
  std::string log;
  for (const auto& l : p.log) log += l + "\n";
  write_file_atomic(run / "curation_log.txt", log);
  std::cout << "partition: " << (run / "partition.json").string() << " (" << p.known.size() << " known, "
            << p.unknown.size() << " unknown)\n";
}

void cmd_train(const json& c, const fs::path& run) {
  const ModelRegistry reg = open_registry(c);
  const ModelHandle m = reg.load_model(need(c, "surrogate"), ModelRole::kExtractor);
  const ClassPartition part = ClassPartition::load(need(c, "partition"));
  PipelineConfig pc = PipelineConfig::from_json(c);
  TrainJob job;
  job.partition = &part;
  job.surrogate = &m;
  job.generator = pc.generator;
  job.generator.feature_dim = m.feature_dim();
  job.generator.image_channels = m.input_spec().channels;
  job.generator.init_seed = pc.seed;
  job.train = pc.train;
  job.train.seed = pc.seed;
  job.train.deterministic = c.value("deterministic", false);
  job.out_dir = run / "train";
  if (const std::string r = c.value("resume", std::string()); !r.empty()) job.resume_from = fs::path(r);
  const TrainResult res = train(job);
  std::cout << "checkpoint: " << res.final_checkpoint.string() << "\n";
}

void cmd_attack(const json& c, const fs::path& run) {
  const ModelRegistry reg = open_registry(c);
  const ModelHandle m = reg.load_model(need(c, "surrogate"), ModelRole::kExtractor);
  const LoadedCheckpoint ck = load_checkpoint(need(c, "checkpoint"), m.feature_dim());
  const ClassPartition part = ClassPartition::load(need(c, "partition"));
  PipelineConfig pc = PipelineConfig::from_json(c);
  const std::string dataset = c.value("dataset", std::string()).empty() ? part.dataset_root : need(c, "dataset");
  require_dir(dataset, "dataset");
  const DatasetSplit split = scan_split(dataset, pc.eval_split);
  const auto sources = collect_sources(split, pc.eval_per_class);
  CraftOptions co;
  co.mode = parse_partition_tag(c.value("mode", std::string("known")));
  if (co.mode == PartitionTag::kClean) throw ConfigError("attack mode must be known or unknown");
  co.seed = pc.seed;
  co.targets_per_source =
      co.mode == PartitionTag::kKnown ? pc.known_targets_per_source : pc.unknown_targets_per_source;
  ClassPartition rooted = part;
  rooted.dataset_root = dataset;
  AdversarialSet set = craft_set(*ck.generator, m, sources, rooted, co);
  write_adversarial_set(set, run / "adv");
  std::cout << "adversarial set: " << (run / "adv").string() << " (" << set.rows.size() << " images)\n";
  if (c.value("audit", false)) {
    const double eps = ck.generator->config().epsilon;
    const double in_memory = max_perturbation(set);
    const AdversarialSet back = read_adversarial_set(run / "adv", set.images.channels(), set.images.height(),
                                                     set.images.width());
    double on_disk = 0;
    for (std::int64_t i = 0; i < back.images.tensor().numel(); ++i)
      on_disk = std::max(on_disk, std::abs(back.images.tensor()[i] - set.sources.tensor()[i]));
    const json audit = {{"epsilon", eps},
                        {"max_perturbation", in_memory},
                        {"max_perturbation_written", on_disk},
                        {"within_budget", in_memory <= eps + 1e-7}};
    write_file_atomic(run / "audit.json", audit.dump(2) + "\n");
    std::cout << "budget audit: max |x'-x| = " << in_memory * 255.0 << "/255 (eps " << eps * 255.0 << "/255), "
              << (in_memory <= eps + 1e-7 ? "ok" : "VIOLATED") << "\n";
    if (in_memory > eps + 1e-7) throw NumericError("perturbation budget violated");
  }
}

void cmd_eval(const json& c, const fs::path& run) {
  const ModelRegistry reg = open_registry(c);
  const auto victims = load_victims(reg, c);
  if (victims.empty()) throw ConfigError("eval needs at least one victim");
  const std::string adv = need(c, "adv");
  require_dir(adv, "adv");
  const auto& spec = victims.front().input_spec();
  std::vector<std::string> skipped;
  const AdversarialSet set = read_adversarial_set(adv, spec.channels, spec.height, spec.width, &skipped);
  if (set.rows.empty()) throw DataError("no readable adversarial images in " + adv);
  const auto records = evaluate(set, victims);
  write_eval_reports(run, records, c.value("per_class_report", false), c.value("bins", 10));
}

void cmd_report(const json& c, const fs::path& run) {
  std::vector<EvalRecord> records;
  for (const auto& f : c.at("records")) {
    const auto part = parse_records_tsv(read_file_bytes(f.get<std::string>()));
    records.insert(records.end(), part.begin(), part.end());
  }
  if (records.empty()) throw DataError("no evaluation records to report");
  write_eval_reports(run, records, c.value("per_class_report", false), c.value("bins", 10));
}

void cmd_ablate(const json& c, const fs::path& run) {
  const ModelRegistry reg = open_registry(c);
  const ModelHandle m = reg.load_model(need(c, "surrogate"), ModelRole::kExtractor);
  const auto victims = load_victims(reg, c);
  const std::string dataset = need(c, "dataset");
  require_dir(dataset, "dataset");
  PipelineConfig pc = PipelineConfig::from_json(c);
  const auto& a = c.at("ablation");
  AblationSpec spec;
  spec.axis = parse_axis(a.value("axis", std::string("alpha")));
  spec.values = a.value("values", std::vector<std::string>{});
  spec.repeats = a.value("repeats", 1);
  spec.fixed_seed = a.value("fixed_seed", false);
  spec.m_reference = a.value("m_reference", std::size_t{0});
  const AblationResult res = ablation_run(spec, pc, m, victims, fs::absolute(dataset), run);
  std::cout << "plot data: " << res.plot_data.string() << " (" << res.rows.size() << " rows)\n";
}

void cmd_baseline_mi(const json& c, const fs::path& run) {
  const ModelRegistry reg = open_registry(c);
  const auto& mi = c.at("mi");
  const std::string id = mi.value("model", std::string()).empty() ? need(c, "surrogate") : mi.value("model", std::string());
  const ModelHandle model = reg.load_model(id, ModelRole::kVictim);
  const std::string dataset = need(c, "dataset");
  require_dir(dataset, "dataset");
  const DatasetSplit split = scan_split(dataset, mi.value("split", std::string("test")));
  auto sources = collect_sources(split);
  const std::uint64_t seed = c.value("seed", std::uint64_t{0});
  Rng rng(derive_seed(seed, kMiPairTag));
  rng.shuffle(sources);
  const auto pairs = std::min<std::size_t>(mi.value("pairs", std::size_t{256}), sources.size());
  sources.resize(pairs);
  const std::vector<int> labels = split.labels();
  if (labels.size() < 2) throw DataError("MI baseline needs at least two classes");

  MiOptions o;
  o.eps = mi.value("epsilon_255", 16.0) / 255.0;
  o.steps = mi.value("steps", 300);
  o.mu = mi.value("mu", 1.0);
  const auto& spec = model.input_spec();
  AdversarialSet set;
  set.surrogate = model.id();
  set.tag = PartitionTag::kKnown;
  std::vector<fs::path> paths;
  std::vector<int> targets;
  for (const auto& s : sources) {
    int t = s.label;
    while (t == s.label) t = labels[rng.below(labels.size())];
    paths.push_back(split.root / s.path);
    targets.push_back(t);
    set.rows.push_back({s.path, s.label, t, "", "", seed});
  }
  const ImageBatch x = load_images(paths, spec.channels, spec.height, spec.width);
  std::vector<Tensor> adv;
  for (std::int64_t b = 0; b < x.size(); b += 32) {
    const std::int64_t e = std::min(x.size(), b + 32);
    const ImageBatch out = mi_fgsm_targeted(model, x.slice(b, e),
                                            std::span<const int>(targets).subspan(static_cast<std::size_t>(b),
                                                                                  static_cast<std::size_t>(e - b)),
                                            o);
    for (std::int64_t i = 0; i < out.size(); ++i) adv.push_back(out.image(i));
  }
  set.images = stack_images(adv);
  set.sources = x;
  std::vector<ModelHandle> victims{model};
  for (const auto& v : load_victims(reg, c)) victims.push_back(v);
  const auto records = evaluate(set, victims);
  write_eval_reports(run, records, false, 10);
  const json summary = {{"pairs", pairs}, {"max_perturbation", max_perturbation(set)}, {"epsilon", o.eps}};
  write_file_atomic(run / "mi_summary.json", summary.dump(2) + "\n");
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Target-conditioned adversarial generator toolkit"};
  app.set_version_flag("--version", std::string(LATINF_VERSION));
  app.require_subcommand(1);
  Common g;
  app.add_option("--config", g.config_path, "JSON config; CLI flags override its values");
  app.add_option("--seed", g.seed, "Master seed");
  app.add_flag("--deterministic", g.deterministic, "Deterministic execution (recorded in the run config)");
  app.add_option("--run-dir", g.run_dir, "Run directory (default runs/<timestamp>-<config hash>)");
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error");

  Overrides ov;
  using ptr = json::json_pointer;
  std::optional<std::string> registry, surrogate, dataset, partition, checkpoint, resume, adv, mode, strategy,
      quality, target_sel, delta_src, axis, mi_model, split, eval_split, mapping;
  std::optional<std::size_t> n, m, pool, per_class, kt, ut, pairs, m_ref;
  std::optional<double> alpha, lr, wd, eps, mu;
  std::optional<int> epochs, batch, base_width, depth, steps, repeats, bins;
  std::optional<std::int64_t> inj_dim, max_steps;
  std::optional<std::vector<std::string>> victims, values, records;
  bool audit = false, per_class_report = false, fixed_seed = false;

  auto add_models = [&](CLI::App* s, bool with_victims) {
    ov.bind(s, "--registry", registry, ptr("/registry"), "Model registry file");
    ov.bind(s, "--surrogate", surrogate, ptr("/surrogate"), "Surrogate model id");
    if (with_victims) ov.bind(s, "--victims", victims, ptr("/victims"), "Victim model ids");
  };
  auto add_curation = [&](CLI::App* s) {
    ov.bind(s, "--dataset", dataset, ptr("/dataset"), "Dataset root (root/split/class/image)");
    ov.bind(s, "--n", n, ptr("/curation/n"), "Number of known classes");
    ov.bind(s, "--m", m, ptr("/curation/m"), "Curated samples per known class");
    ov.bind(s, "--strategy", strategy, ptr("/curation/strategy"), "greedy|random");
    ov.bind(s, "--quality", quality, ptr("/curation/quality"), "high|low|random");
    ov.bind(s, "--target-selection", target_sel, ptr("/curation/target_selection"), "fixed|random");
    ov.bind(s, "--unknown-pool", pool, ptr("/curation/unknown_pool_size"), "Held-out images per unknown class");
  };
  auto add_training = [&](CLI::App* s) {
    ov.bind(s, "--alpha", alpha, ptr("/train/alpha"), "Weight of the perturbation term");
    ov.bind(s, "--epochs", epochs, ptr("/train/epochs"), "Training epochs");
    ov.bind(s, "--batch-size", batch, ptr("/train/batch_size"), "Batch size");
    ov.bind(s, "--lr", lr, ptr("/train/lr"), "AdamW learning rate");
    ov.bind(s, "--weight-decay", wd, ptr("/train/weight_decay"), "AdamW weight decay");
    ov.bind(s, "--max-steps-per-epoch", max_steps, ptr("/train/max_steps_per_epoch"), "Cap on steps per epoch");
    ov.bind(s, "--delta-source", delta_src, ptr("/train/delta_source"), "clipped|raw");
    s->add_option("--eps", eps, "Budget in 0-255 pixel units");
    ov.bind(s, "--base-width", base_width, ptr("/generator/base_width"), "Generator base width");
    ov.bind(s, "--depth", depth, ptr("/generator/depth"), "Generator depth");
    ov.bind(s, "--injection-dim", inj_dim, ptr("/generator/injection_dim"), "Injection embedding width");
    ov.bind(s, "--output-mapping", mapping, ptr("/generator/output_mapping"),
            "bounded-residual|residual-sigmoid|tanh");
  };
  auto add_eval = [&](CLI::App* s) {
    ov.bind(s, "--split", eval_split, ptr("/eval/split"), "Source split for crafting");
    ov.bind(s, "--per-class", per_class, ptr("/eval/per_class"), "Source images per class (0 = all)");
    ov.bind(s, "--known-targets", kt, ptr("/eval/known_targets_per_source"), "Known targets per source (0 = all)");
    ov.bind(s, "--unknown-targets", ut, ptr("/eval/unknown_targets_per_source"),
            "Unknown targets per source (0 = all)");
  };

  auto* curate = app.add_subcommand("curate", "Select known classes and curate their samples");
  add_models(curate, false);
  add_curation(curate);

  auto* trn = app.add_subcommand("train", "Train a generator on a partition");
  add_models(trn, false);
  ov.bind(trn, "--partition", partition, ptr("/partition"), "Partition file");
  ov.bind(trn, "--resume", resume, ptr("/resume"), "Checkpoint directory to resume from");
  add_training(trn);

  auto* attack = app.add_subcommand("attack", "Craft an adversarial set with a trained generator");
  add_models(attack, false);
  ov.bind(attack, "--checkpoint", checkpoint, ptr("/checkpoint"), "Checkpoint directory");
  ov.bind(attack, "--partition", partition, ptr("/partition"), "Partition file");
  ov.bind(attack, "--dataset", dataset, ptr("/dataset"), "Dataset root (defaults to the partition's)");
  ov.bind(attack, "--mode", mode, ptr("/mode"), "known|unknown");
  add_eval(attack);
  attack->add_flag("--audit", audit, "Report the maximum perturbation");

  auto* eval = app.add_subcommand("eval", "Evaluate an adversarial set on victims");
  ov.bind(eval, "--registry", registry, ptr("/registry"), "Model registry file");
  ov.bind(eval, "--victims", victims, ptr("/victims"), "Victim model ids");
  ov.bind(eval, "--adv", adv, ptr("/adv"), "Adversarial set directory");
  eval->add_flag("--per-class-report", per_class_report, "Also write per-class rates and histogram");
  ov.bind(eval, "--bins", bins, ptr("/bins"), "Histogram bins");

  auto* report = app.add_subcommand("report", "Aggregate evaluation records into reports");
  ov.bind(report, "--records", records, ptr("/records"), "records.tsv files");
  report->add_flag("--per-class-report", per_class_report, "Also write per-class rates and histogram");
  ov.bind(report, "--bins", bins, ptr("/bins"), "Histogram bins");

  auto* ablate = app.add_subcommand("ablate", "Sweep one setting through the whole pipeline");
  add_models(ablate, true);
  add_curation(ablate);
  add_training(ablate);
  add_eval(ablate);
  ov.bind(ablate, "--axis", axis, ptr("/ablation/axis"), "N|M|alpha|strategy|quality");
  ov.bind(ablate, "--values", values, ptr("/ablation/values"), "Axis values");
  ov.bind(ablate, "--repeats", repeats, ptr("/ablation/repeats"), "Repeats per value");
  ov.bind(ablate, "--m-reference", m_ref, ptr("/ablation/m_reference"), "Scale M values from this per-class count");
  ablate->add_flag("--fixed-seed", fixed_seed, "Reuse the base seed for every repeat");

  auto* mi = app.add_subcommand("baseline-mi", "Targeted MI-FGSM baseline");
  add_models(mi, true);
  ov.bind(mi, "--model", mi_model, ptr("/mi/model"), "Model attacked white-box (default: surrogate)");
  ov.bind(mi, "--dataset", dataset, ptr("/dataset"), "Dataset root");
  ov.bind(mi, "--split", split, ptr("/mi/split"), "Source split");
  ov.bind(mi, "--pairs", pairs, ptr("/mi/pairs"), "Source/target pairs");
  ov.bind(mi, "--steps", steps, ptr("/mi/steps"), "Iterations");
  ov.bind(mi, "--mu", mu, ptr("/mi/mu"), "Momentum decay");
  std::optional<double> mi_eps;
  ov.bind(mi, "--eps", mi_eps, ptr("/mi/epsilon_255"), "Budget in 0-255 pixel units");

  std::string toy_out;
  toy::DatasetOptions toy_opts;
  auto* toy_cmd = app.add_subcommand("toy-data", "Write the procedural 10-class toy dataset (fixture)");
  toy_cmd->add_option("--out", toy_out, "Output root")->required();
  toy_cmd->add_option("--train-per-class", toy_opts.train_per_class);
  toy_cmd->add_option("--val-per-class", toy_opts.val_per_class);
  toy_cmd->add_option("--test-per-class", toy_opts.test_per_class);
  toy_cmd->add_option("--image-seed", toy_opts.seed);
  toy_cmd->add_option("--contrast", toy_opts.contrast, "Grating amplitude scale in (0, 1]");

  std::string fit_id, fit_registry, fit_dataset;
  toy::FitOptions fit_opts;
  std::vector<std::int64_t> widths{16, 32, 64};
  auto* fit = app.add_subcommand("fit-classifier", "Train a small CNN and register it (fixture)");
  fit->add_option("--dataset", fit_dataset, "Dataset root")->required();
  fit->add_option("--registry", fit_registry, "Registry file (created if missing)")->required();
  fit->add_option("--id", fit_id, "Model id")->required();
  fit->add_option("--epochs", fit_opts.epochs);
  fit->add_option("--widths", widths)->expected(3);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    set_log_level(g.log_level);
    auto* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();

    if (name == "toy-data") {
      toy::write_dataset(toy_out, toy_opts);
      std::cout << "dataset: " << toy_out << "\n";
      return kOk;
    }
    if (name == "fit-classifier") {
      fit_opts.seed = g.seed.value_or(1);
      const DatasetSplit train_split = scan_split(fit_dataset, "train");
      const DatasetSplit test_split = scan_split(fit_dataset, "test");
      auto net = build_network("smallcnn", {{"widths", widths}, {"num_labels", train_split.classes.size()}},
                               fit_opts.seed);
      const InputSpec spec;
      const auto rep = toy::fit_classifier(*net, spec, train_split, &test_split, fit_opts);
      ModelRegistry reg = fs::exists(fit_registry) ? ModelRegistry::load(fit_registry)
                                                   : ModelRegistry(fs::absolute(fit_registry).parent_path());
      register_network(reg, fit_id, *net, spec, fit_id + ".bin");
      reg.save(fit_registry);
      std::cout << fit_id << ": train accuracy " << rep.train_accuracy << ", test accuracy " << rep.test_accuracy
                << "\n";
      return kOk;
    }

    json resolved = default_config();
    if (!g.config_path.empty()) {
      json file;
      try {
        file = json::parse(read_file_bytes(g.config_path));
      } catch (const json::parse_error& e) {
        throw ConfigError("config " + g.config_path + " is not valid JSON: " + e.what());
      } catch (const DataError& e) {
        throw ConfigError(e.what());
      }
      file.erase("command");
      file.erase("version");
      resolved.merge_patch(file);
    }
    for (const auto& set : ov.setters) set(resolved);
    if (eps) resolved["generator"]["epsilon"] = *eps / 255.0;
    if (audit) resolved["audit"] = true;
    if (per_class_report) resolved["per_class_report"] = true;
    if (fixed_seed) resolved["ablation"]["fixed_seed"] = true;
    if (g.seed) resolved["seed"] = *g.seed;
    if (g.deterministic) resolved["deterministic"] = true;
    // Validates every section before any directory is created.
    const PipelineConfig pc = PipelineConfig::from_json(resolved);
    resolved.merge_patch(pc.to_json());
    resolved["command"] = name;
    resolved["version"] = LATINF_VERSION;

    if (name == "curate" || name == "ablate") require_dir(resolved.value("dataset", std::string()), "dataset");

    const fs::path run_dir = prepare_run_dir(g.run_dir, resolved);
    logger()->info("{}: run directory {}", name, run_dir.string());
    if (name == "curate") cmd_curate(resolved, run_dir);
    else if (name == "train") cmd_train(resolved, run_dir);
    else if (name == "attack") cmd_attack(resolved, run_dir);
    else if (name == "eval") cmd_eval(resolved, run_dir);
    else if (name == "report") cmd_report(resolved, run_dir);
    else if (name == "ablate") cmd_ablate(resolved, run_dir);
    else if (name == "baseline-mi") cmd_baseline_mi(resolved, run_dir);
    return kOk;
  } catch (const IntegrityError& e) {
    logger()->error("integrity error: {}", e.what());
    return kIntegrityError;
  } catch (const DataError& e) {
    logger()->error("data error: {}", e.what());
    return kDataError;
  } catch (const ConfigError& e) {
    logger()->error("config error: {}", e.what());
    return kConfigError;
  } catch (const ContractError& e) {
    logger()->error("invalid input: {}", e.what());
    return kConfigError;
  } catch (const NumericError& e) {
    logger()->error("numeric failure: {}", e.what());
    return kNumericError;
  } catch (const std::exception& e) {
    logger()->error("{}", e.what());
    return kFailure;
  }
}

}  // namespace latinf::cli
