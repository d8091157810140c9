#include "latinf/ablation.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "latinf/errors.hpp"
#include "latinf/logging.hpp"
#include "latinf/serialize.hpp"

namespace latinf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json curation_to_json(const PartitionOptions& o) {
  return {{"n", o.n},
          {"m", o.m_samples},
          {"strategy", to_string(o.strategy)},
          {"quality", to_string(o.quality)},
          {"target_selection", to_string(o.target_selection)},
          {"train_split", o.train_split},
          {"heldout_split", o.heldout_split},
          {"unknown_pool_size", o.unknown_pool_size},
          {"prototype_limit", o.prototype_limit}};
}

PartitionOptions curation_from_json(const json& j) {
  PartitionOptions o;
  o.n = j.value("n", o.n);
  o.m_samples = j.value("m", o.m_samples);
  o.strategy = parse_strategy(j.value("strategy", to_string(o.strategy)));
  o.quality = parse_quality(j.value("quality", to_string(o.quality)));
  o.target_selection = parse_target_selection(j.value("target_selection", to_string(o.target_selection)));
  o.train_split = j.value("train_split", o.train_split);
  o.heldout_split = j.value("heldout_split", o.heldout_split);
  o.unknown_pool_size = j.value("unknown_pool_size", o.unknown_pool_size);
  o.prototype_limit = j.value("prototype_limit", o.prototype_limit);
  if (o.n == 0) throw ConfigError("curation n must be positive");
  if (o.m_samples == 0) throw ConfigError("curation m must be positive");
  if (o.unknown_pool_size == 0) throw ConfigError("unknown_pool_size must be positive");
  return o;
}

std::size_t parse_count(const std::string& v, const char* what) {
  std::size_t pos = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || x < 1) throw ConfigError(std::string(what) + " value must be a positive integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

double parse_real(const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || !std::isfinite(x) || x < 0)
    throw ConfigError("alpha value must be a non-negative number, got '" + v + "'");
  return x;
}

std::string sanitize(const std::string& v) {
  std::string s = v;
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-') c = '_';
  return s;
}

}  // namespace

json PipelineConfig::to_json() const {
  return {{"curation", curation_to_json(curation)},
          {"generator", generator.to_json()},
          {"train", train.to_json()},
          {"eval",
           {{"split", eval_split},
            {"per_class", eval_per_class},
            {"known_targets_per_source", known_targets_per_source},
            {"unknown_targets_per_source", unknown_targets_per_source}}},
          {"seed", seed}};
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c;
  try {
    if (j.contains("curation")) c.curation = curation_from_json(j.at("curation"));
    if (j.contains("generator")) c.generator = GeneratorConfig::from_json(j.at("generator"));
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      c.eval_split = e.value("split", c.eval_split);
      c.eval_per_class = e.value("per_class", c.eval_per_class);
      c.known_targets_per_source = e.value("known_targets_per_source", c.known_targets_per_source);
      c.unknown_targets_per_source = e.value("unknown_targets_per_source", c.unknown_targets_per_source);
    }
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid pipeline config: ") + e.what());
  }
  return c;
}

PipelineResult run_pipeline(const ModelHandle& surrogate, std::span<const ModelHandle> victims,
                            const fs::path& dataset_root, const PipelineConfig& config, const fs::path& work_dir) {
  auto log = logger();
  fs::create_directories(work_dir);
  PipelineResult out;

  PartitionOptions po = config.curation;
  po.seed = config.seed;
  out.partition = build_partition(surrogate, dataset_root, po);
  out.partition.save(work_dir / "partition.json");
  log->info("curated {} known / {} unknown classes", out.partition.known.size(), out.partition.unknown.size());

  const ModelHandle extractor = surrogate.with_role(ModelRole::kExtractor);
  TrainJob job;
  job.partition = &out.partition;
  job.surrogate = &extractor;
  job.generator = config.generator;
  job.generator.feature_dim = extractor.feature_dim();
  job.generator.image_channels = extractor.input_spec().channels;
  job.generator.init_seed = config.seed;
  job.train = config.train;
  job.train.seed = config.seed;
  job.out_dir = work_dir / "train";
  out.training = train(job);

  const LoadedCheckpoint ck = load_checkpoint(out.training.final_checkpoint, extractor.feature_dim());
  const DatasetSplit eval_split = scan_split(dataset_root, config.eval_split);
  const std::vector<SourceImage> sources = collect_sources(eval_split, config.eval_per_class);

  std::vector<ModelHandle> all_victims;
  all_victims.push_back(surrogate.with_role(ModelRole::kVictim));
  for (const auto& v : victims) all_victims.push_back(v);

  for (PartitionTag tag : {PartitionTag::kKnown, PartitionTag::kUnknown}) {
    const auto& classes = tag == PartitionTag::kKnown ? out.partition.known : out.partition.unknown;
    if (classes.empty()) continue;
    CraftOptions co;
    co.mode = tag;
    co.seed = config.seed;
    co.targets_per_source =
        tag == PartitionTag::kKnown ? config.known_targets_per_source : config.unknown_targets_per_source;
    const AdversarialSet set = craft_set(*ck.generator, extractor, sources, out.partition, co);
    out.max_perturbation = std::max(out.max_perturbation, max_perturbation(set));
    auto recs = evaluate(set, all_victims);
    out.records.insert(out.records.end(), recs.begin(), recs.end());
    AdversarialSet clean = clean_counterpart(set);
    clean.tag = tag;
    auto crecs = evaluate(clean, all_victims);
    for (auto& r : crecs) r.surrogate = "clean";
    out.clean_records.insert(out.clean_records.end(), crecs.begin(), crecs.end());
  }

  std::vector<EvalRecord> both = out.records;
  both.insert(both.end(), out.clean_records.begin(), out.clean_records.end());
  if (!both.empty()) {
    const TransferMatrix m = transfer_matrix(both);
    const auto cells = m.cells();
    write_file_atomic(work_dir / "report.tsv", report_tsv(cells));
    write_file_atomic(work_dir / "report.md", render_matrix(m));
  }
  write_file_atomic(work_dir / "records.tsv", records_tsv(out.records));
  return out;
}

std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::kN: return "N";
    case AblationAxis::kM: return "M";
    case AblationAxis::kAlpha: return "alpha";
    case AblationAxis::kStrategy: return "strategy";
    case AblationAxis::kQuality: return "quality";
  }
  return "alpha";
}

AblationAxis parse_axis(const std::string& s) {
  if (s == "N" || s == "n") return AblationAxis::kN;
  if (s == "M" || s == "m") return AblationAxis::kM;
  if (s == "alpha") return AblationAxis::kAlpha;
  if (s == "strategy") return AblationAxis::kStrategy;
  if (s == "quality") return AblationAxis::kQuality;
  throw ConfigError("unknown ablation axis '" + s + "' (expected N|M|alpha|strategy|quality)");
}

PipelineConfig apply_axis_value(PipelineConfig c, AblationAxis axis, const std::string& value,
                                std::size_t available_per_class, std::size_t m_reference) {
  switch (axis) {
    case AblationAxis::kN:
      c.curation.n = parse_count(value, "N");
      break;
    case AblationAxis::kM: {
      std::size_t m = parse_count(value, "M");
      if (m_reference > 0 && available_per_class > 0) {
        const double scaled = static_cast<double>(m) * static_cast<double>(available_per_class) /
                              static_cast<double>(m_reference);
        m = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(scaled)));
      }
      c.curation.m_samples = m;
      break;
    }
    case AblationAxis::kAlpha:
      c.train.alpha = parse_real(value);
      break;
    case AblationAxis::kStrategy:
      c.curation.strategy = parse_strategy(value);
      break;
    case AblationAxis::kQuality:
      c.curation.quality = parse_quality(value);
      break;
  }
  return c;
}

std::string plot_data_tsv(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << "value\tvictim\tpartition_tag\ttasr\n";
  for (const auto& r : rows) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", r.tasr);
    os << r.value << '\t' << r.victim << '\t' << to_string(r.tag) << '\t' << buf << "\n";
  }
  return os.str();
}

std::string ablation_report_tsv(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << "value\teffective\trepeat\tvictim\tpartition_tag\tn\ttasr\tusr\n";
  for (const auto& r : rows) {
    char t[40], u[40];
    std::snprintf(t, sizeof t, "%.17g", r.tasr);
    std::snprintf(u, sizeof u, "%.17g", r.usr);
    os << r.value << '\t' << r.effective << '\t' << r.repeat << '\t' << r.victim << '\t' << to_string(r.tag) << '\t'
       << r.n << '\t' << t << '\t' << u << "\n";
  }
  return os.str();
}

AblationResult ablation_run(const AblationSpec& spec, const PipelineConfig& base, const ModelHandle& surrogate,
                            std::span<const ModelHandle> victims, const fs::path& dataset_root,
                            const fs::path& out_dir) {
  if (spec.values.empty()) throw ConfigError("ablation needs at least one axis value");
  if (spec.repeats < 1) throw ConfigError("ablation repeats must be at least 1");

  std::size_t available = 0;
  if (spec.axis == AblationAxis::kM && spec.m_reference > 0) {
    const DatasetSplit train_split = scan_split(dataset_root, base.curation.train_split);
    for (const auto& c : train_split.classes)
      available = available == 0 ? c.files.size() : std::min(available, c.files.size());
  }
  // Validate every value before spending time on any pipeline.
  std::vector<PipelineConfig> configs;
  for (const auto& v : spec.values) configs.push_back(apply_axis_value(base, spec.axis, v, available, spec.m_reference));

  AblationResult res;
  const fs::path axis_dir = out_dir / to_string(spec.axis);
  fs::create_directories(axis_dir);
  res.plot_data = axis_dir / "plot_data.tsv";
  res.report = axis_dir / "report.tsv";
  auto flush = [&] {
    write_file_atomic(res.plot_data, plot_data_tsv(res.rows));
    write_file_atomic(res.report, ablation_report_tsv(res.rows));
  };

  for (std::size_t vi = 0; vi < spec.values.size(); ++vi) {
    for (int r = 0; r < spec.repeats; ++r) {
      PipelineConfig cfg = configs[vi];
      cfg.seed = spec.fixed_seed ? base.seed : base.seed + static_cast<std::uint64_t>(r);
      std::string effective;
      switch (spec.axis) {
        case AblationAxis::kN: effective = std::to_string(cfg.curation.n); break;
        case AblationAxis::kM: effective = std::to_string(cfg.curation.m_samples); break;
        case AblationAxis::kAlpha: effective = spec.values[vi]; break;
        case AblationAxis::kStrategy: effective = to_string(cfg.curation.strategy); break;
        case AblationAxis::kQuality: effective = to_string(cfg.curation.quality); break;
      }
      const fs::path work = axis_dir / sanitize(spec.values[vi]) / ("r" + std::to_string(r));
      logger()->info("ablation {}={} repeat {}", to_string(spec.axis), spec.values[vi], r);
      PipelineResult pr;
      try {
        pr = run_pipeline(surrogate, victims, dataset_root, cfg, work);
      } catch (...) {
        flush();
        throw;
      }
      if (pr.records.empty()) throw DataError("pipeline produced no evaluation records");
      const TransferMatrix m = transfer_matrix(pr.records);
      for (const auto& row : m.rows)
        for (const auto& victim : m.victims) {
          auto it = row.cells.find(victim);
          if (it == row.cells.end()) continue;
          res.rows.push_back({spec.values[vi], r, victim, row.tag, it->second.n, it->second.tasr, it->second.usr,
                              effective});
        }
      flush();
    }
  }
  return res;
}

}  // namespace latinf
