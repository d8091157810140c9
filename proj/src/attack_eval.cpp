#include "latinf/attack_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "latinf/errors.hpp"
#include "latinf/logging.hpp"
#include "latinf/serialize.hpp"

namespace latinf {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kPairingTag = 0x70616972;
constexpr std::uint64_t kTargetDrawTag = 0x64726177;
constexpr const char* kPairsHeader = "source_path\ty\ty_t\ttarget_path\toutput_path\tseed";

std::string fmt_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, '\t')) out.push_back(cur);
  if (!line.empty() && line.back() == '\t') out.emplace_back();
  return out;
}

TasrCell finish(TasrCell c) {
  c.tasr = c.n > 0 ? static_cast<double>(c.targeted_hits) / static_cast<double>(c.n) : 0.0;
  c.usr = c.n > 0 ? static_cast<double>(c.untargeted_hits) / static_cast<double>(c.n) : 0.0;
  return c;
}

void add_record(TasrCell& c, const EvalRecord& r) {
  ++c.n;
  c.targeted_hits += r.targeted_hit ? 1 : 0;
  c.untargeted_hits += r.untargeted_hit ? 1 : 0;
}

}  // namespace

std::string to_string(PartitionTag t) {
  switch (t) {
    case PartitionTag::kKnown: return "known";
    case PartitionTag::kUnknown: return "unknown";
    case PartitionTag::kClean: return "clean";
  }
  return "known";
}

PartitionTag parse_partition_tag(const std::string& s) {
  if (s == "known") return PartitionTag::kKnown;
  if (s == "unknown") return PartitionTag::kUnknown;
  if (s == "clean") return PartitionTag::kClean;
  throw ConfigError("unknown partition tag '" + s + "' (expected known|unknown|clean)");
}

std::vector<SourceImage> collect_sources(const DatasetSplit& split, std::size_t per_class) {
  std::vector<SourceImage> out;
  for (const auto& c : split.classes) {
    const std::size_t k = per_class == 0 ? c.files.size() : std::min(per_class, c.files.size());
    for (std::size_t i = 0; i < k; ++i) out.push_back({c.files[i], c.label});
  }
  return out;
}

AdversarialSet craft_set(const Generator& g, const ModelHandle& extractor, std::span<const SourceImage> sources,
                         const ClassPartition& partition, const CraftOptions& o) {
  LATINF_EXPECT(o.mode != PartitionTag::kClean, "craft_set mode must be known or unknown");
  LATINF_EXPECT(o.chunk > 0, "chunk must be positive");
  LATINF_EXPECT(g.config().feature_dim == extractor.feature_dim(),
                "generator feature_dim " + std::to_string(g.config().feature_dim) + " != extractor feature dim " +
                    std::to_string(extractor.feature_dim()));
  const auto& spec = extractor.input_spec();
  const bool known = o.mode == PartitionTag::kKnown;
  std::vector<int> classes = known ? partition.known : partition.unknown;
  std::sort(classes.begin(), classes.end());
  for (int c : classes) {
    const bool present = known ? partition.targets.known.contains(c) : partition.targets.unknown.contains(c);
    if (!present) throw ContractError("target pool has no entry for class " + std::to_string(c));
  }

  AdversarialSet set;
  set.surrogate = extractor.id();
  set.tag = o.mode;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    std::vector<int> eligible;
    for (int c : classes)
      if (c != sources[i].label) eligible.push_back(c);
    const std::uint64_t row_seed = derive_seed(o.seed, kPairingTag, i);
    if (o.targets_per_source > 0 && o.targets_per_source < eligible.size()) {
      Rng pick(derive_seed(row_seed, kTargetDrawTag));
      pick.shuffle(eligible);
      eligible.resize(o.targets_per_source);
      std::sort(eligible.begin(), eligible.end());
    }
    Rng draw(row_seed);
    for (int c : eligible) {
      const RankedSample& t = partition.targets.pick(c, draw);
      set.rows.push_back({sources[i].path, sources[i].label, c, t.path, "", row_seed});
    }
  }

  const fs::path root(partition.dataset_root);
  std::unordered_map<std::string, Tensor> src_cache, feat_cache;
  auto load_one = [&](const std::string& rel) {
    const fs::path full = root / rel;
    return load_images(std::span<const fs::path>(&full, 1), spec.channels, spec.height, spec.width).image(0);
  };

  std::vector<Tensor> adv, clean;
  adv.reserve(set.rows.size());
  clean.reserve(set.rows.size());
  const auto total = static_cast<std::int64_t>(set.rows.size());
  for (std::int64_t b = 0; b < total; b += o.chunk) {
    const std::int64_t e = std::min(total, b + o.chunk);
    std::vector<Tensor> xs, ts;
    std::vector<std::string> need;
    for (std::int64_t i = b; i < e; ++i) {
      const auto& row = set.rows[static_cast<std::size_t>(i)];
      auto it = src_cache.find(row.source_path);
      if (it == src_cache.end()) it = src_cache.emplace(row.source_path, load_one(row.source_path)).first;
      xs.push_back(it->second);
      if (!feat_cache.contains(row.target_path) &&
          std::find(need.begin(), need.end(), row.target_path) == need.end())
        need.push_back(row.target_path);
    }
    if (!need.empty()) {
      std::vector<Tensor> imgs;
      for (const auto& p : need) imgs.push_back(load_one(p));
      const Tensor f = extract_features(extractor, stack_images(imgs));
      for (std::size_t k = 0; k < need.size(); ++k)
        feat_cache.emplace(need[k], f.slice_rows(static_cast<std::int64_t>(k), static_cast<std::int64_t>(k) + 1));
    }
    for (std::int64_t i = b; i < e; ++i) ts.push_back(feat_cache.at(set.rows[static_cast<std::size_t>(i)].target_path));
    const ImageBatch xb = stack_images(xs);
    const Tensor fb = Tensor::stack_rows(ts).reshaped({e - b, extractor.feature_dim()});
    const ImageBatch out = craft(g, xb, fb);
    for (std::int64_t i = 0; i < e - b; ++i) {
      adv.push_back(out.image(i));
      clean.push_back(xb.image(i));
    }
  }
  if (!adv.empty()) {
    set.images = stack_images(adv);
    set.sources = stack_images(clean);
  } else {
    set.images = ImageBatch::empty(spec.channels, spec.height, spec.width);
    set.sources = set.images;
  }
  return set;
}

AdversarialSet clean_counterpart(const AdversarialSet& set) {
  AdversarialSet c = set;
  c.images = set.sources;
  c.tag = PartitionTag::kClean;
  return c;
}

double max_perturbation(const AdversarialSet& set) {
  const Tensor& a = set.images.tensor();
  const Tensor& s = set.sources.tensor();
  LATINF_EXPECT(a.shape() == s.shape(), "adversarial and source batches differ in shape");
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - s[i]));
  return m;
}

void write_adversarial_set(AdversarialSet& set, const fs::path& dir) {
  LATINF_EXPECT(set.images.size() == static_cast<std::int64_t>(set.rows.size()), "set images and rows differ");
  fs::create_directories(dir / "images");
  std::ostringstream manifest;
  manifest << kPairsHeader << "\n";
  for (std::size_t i = 0; i < set.rows.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%06zu.ppm", i);
    auto& row = set.rows[i];
    row.output_path = name;
    write_netpbm(dir / row.output_path, set.images.image(static_cast<std::int64_t>(i)));
    manifest << row.source_path << '\t' << row.y << '\t' << row.y_t << '\t' << row.target_path << '\t'
             << row.output_path << '\t' << row.seed << "\n";
  }
  write_file_atomic(dir / "pairs.tsv", manifest.str());
  nlohmann::json meta = {{"surrogate", set.surrogate}, {"tag", to_string(set.tag)}, {"count", set.rows.size()}};
  write_file_atomic(dir / "set.json", meta.dump(2) + "\n");
}

AdversarialSet read_adversarial_set(const fs::path& dir, std::int64_t channels, std::int64_t height,
                                    std::int64_t width, std::vector<std::string>* skipped) {
  const fs::path pairs = dir / "pairs.tsv";
  if (!fs::exists(pairs)) throw DataError("no pairing manifest in " + dir.string());
  AdversarialSet set;
  try {
    const auto meta = nlohmann::json::parse(read_file_bytes(dir / "set.json"));
    set.surrogate = meta.at("surrogate").get<std::string>();
    set.tag = parse_partition_tag(meta.at("tag").get<std::string>());
  } catch (const std::exception& e) {
    throw DataError("unreadable set metadata in " + dir.string() + ": " + e.what());
  }
  std::istringstream in(read_file_bytes(pairs));
  std::string line;
  std::getline(in, line);
  if (line != kPairsHeader) throw DataError("unexpected pairing manifest header in " + pairs.string());
  std::vector<Tensor> imgs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != 6) throw DataError("malformed pairing row: " + line);
    PairingRow row;
    try {
      row = {f[0], std::stoi(f[1]), std::stoi(f[2]), f[3], f[4], std::stoull(f[5])};
    } catch (const std::exception&) {
      throw DataError("malformed pairing row: " + line);
    }
    try {
      const fs::path p = dir / row.output_path;
      imgs.push_back(load_images(std::span<const fs::path>(&p, 1), channels, height, width).image(0));
    } catch (const DataError& e) {
      logger()->warn("skipping {}: {}", row.output_path, e.what());
      if (skipped) skipped->push_back(row.output_path);
      continue;
    }
    set.rows.push_back(std::move(row));
  }
  set.images = imgs.empty() ? ImageBatch::empty(channels, height, width) : stack_images(imgs);
  set.sources = ImageBatch::empty(channels, height, width);
  return set;
}

std::vector<EvalRecord> evaluate(const AdversarialSet& set, std::span<const ModelHandle> victims, std::int64_t chunk) {
  LATINF_EXPECT(set.images.size() == static_cast<std::int64_t>(set.rows.size()), "set images and rows differ");
  std::vector<EvalRecord> out;
  out.reserve(set.rows.size() * victims.size());
  for (const auto& v : victims) {
    const std::vector<int> pred = predict(v, set.images, chunk);
    for (std::size_t i = 0; i < set.rows.size(); ++i) {
      const auto& row = set.rows[i];
      EvalRecord r;
      r.source_path = row.source_path;
      r.y = row.y;
      r.y_t = row.y_t;
      r.tag = set.tag;
      r.surrogate = set.surrogate;
      r.victim_id = v.id();
      r.y_pred = pred[i];
      r.targeted_hit = r.y_pred == r.y_t;
      r.untargeted_hit = r.y_pred != r.y;
      out.push_back(std::move(r));
    }
  }
  return out;
}

TasrCell summarize(std::span<const EvalRecord> records) {
  TasrCell c;
  if (!records.empty()) {
    c.surrogate = records.front().surrogate;
    c.victim = records.front().victim_id;
    c.tag = records.front().tag;
  }
  for (const auto& r : records) add_record(c, r);
  return finish(c);
}

std::vector<TasrCell> TransferMatrix::cells() const {
  std::vector<TasrCell> out;
  for (const auto& row : rows)
    for (const auto& v : victims)
      if (auto it = row.cells.find(v); it != row.cells.end()) out.push_back(it->second);
  return out;
}

TransferMatrix transfer_matrix(std::span<const EvalRecord> records) {
  LATINF_EXPECT(!records.empty(), "transfer_matrix needs at least one record");
  TransferMatrix m;
  for (const auto& r : records) {
    if (std::find(m.victims.begin(), m.victims.end(), r.victim_id) == m.victims.end()) m.victims.push_back(r.victim_id);
    auto row = std::find_if(m.rows.begin(), m.rows.end(),
                            [&](const TransferRow& t) { return t.surrogate == r.surrogate && t.tag == r.tag; });
    if (row == m.rows.end()) {
      m.rows.push_back({r.surrogate, r.tag, {}, 0.0});
      row = std::prev(m.rows.end());
    }
    auto [it, fresh] = row->cells.try_emplace(r.victim_id);
    if (fresh) {
      it->second.surrogate = r.surrogate;
      it->second.victim = r.victim_id;
      it->second.tag = r.tag;
    }
    add_record(it->second, r);
  }
  for (auto& row : m.rows) {
    double sum = 0;
    for (auto& [v, c] : row.cells) {
      c = finish(c);
      sum += c.tasr;
    }
    row.avg = row.cells.empty() ? 0.0 : sum / static_cast<double>(row.cells.size());
  }
  return m;
}

PerClassReport per_class_tasr(std::span<const EvalRecord> records, int bins) {
  LATINF_EXPECT(bins > 0, "histogram needs at least one bin");
  PerClassReport rep;
  std::map<std::tuple<std::string, std::string, int, int>, TasrCell> groups;
  for (const auto& r : records) {
    auto [it, fresh] = groups.try_emplace({r.surrogate, r.victim_id, static_cast<int>(r.tag), r.y_t});
    if (fresh) it->second = {r.surrogate, r.victim_id, r.tag, r.y_t, 0, 0, 0, 0.0, 0.0};
    add_record(it->second, r);
  }
  rep.histogram.assign(static_cast<std::size_t>(bins), 0);
  for (auto& [key, c] : groups) {
    rep.classes.push_back(finish(c));
    const auto bin = std::min<std::int64_t>(bins - 1, static_cast<std::int64_t>(std::floor(rep.classes.back().tasr * bins)));
    ++rep.histogram[static_cast<std::size_t>(bin)];
  }
  return rep;
}

std::string report_tsv(std::span<const TasrCell> cells) {
  std::ostringstream os;
  os << "surrogate\tvictim\tpartition_tag\tclass_id\tn\ttasr\tusr\n";
  for (const auto& c : cells)
    os << c.surrogate << '\t' << c.victim << '\t' << to_string(c.tag) << '\t'
       << (c.class_id ? std::to_string(*c.class_id) : "") << '\t' << c.n << '\t' << fmt_full(c.tasr) << '\t'
       << fmt_full(c.usr) << "\n";
  return os.str();
}

std::string render_matrix(const TransferMatrix& m) {
  auto pct = [](double r) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * r);
    return std::string(buf);
  };
  std::ostringstream os;
  os << "| surrogate | tag |";
  for (const auto& v : m.victims) os << ' ' << v << " |";
  os << " Avg |\n|---|---|";
  for (std::size_t i = 0; i <= m.victims.size(); ++i) os << "---|";
  os << "\n";
  for (const auto& row : m.rows) {
    os << "| " << row.surrogate << " | " << to_string(row.tag) << " |";
    for (const auto& v : m.victims) {
      auto it = row.cells.find(v);
      os << ' ' << (it == row.cells.end() ? std::string("-") : pct(it->second.tasr)) << " |";
    }
    os << ' ' << pct(row.avg) << " |\n";
  }
  return os.str();
}

std::string records_tsv(std::span<const EvalRecord> records) {
  std::ostringstream os;
  os << "source_path\ty\ty_t\tpartition_tag\tsurrogate\tvictim\ty_pred\ttargeted_hit\tuntargeted_hit\n";
  for (const auto& r : records)
    os << r.source_path << '\t' << r.y << '\t' << r.y_t << '\t' << to_string(r.tag) << '\t' << r.surrogate << '\t'
       << r.victim_id << '\t' << r.y_pred << '\t' << int(r.targeted_hit) << '\t' << int(r.untargeted_hit) << "\n";
  return os.str();
}

std::vector<EvalRecord> parse_records_tsv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line.rfind("source_path\ty\ty_t", 0) != 0) throw DataError("not an evaluation records table");
  std::vector<EvalRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != 9) throw DataError("malformed record row: " + line);
    try {
      EvalRecord r;
      r.source_path = f[0];
      r.y = std::stoi(f[1]);
      r.y_t = std::stoi(f[2]);
      r.tag = parse_partition_tag(f[3]);
      r.surrogate = f[4];
      r.victim_id = f[5];
      r.y_pred = std::stoi(f[6]);
      r.targeted_hit = f[7] == "1";
      r.untargeted_hit = f[8] == "1";
      out.push_back(std::move(r));
    } catch (const std::exception&) {
      throw DataError("malformed record row: " + line);
    }
  }
  return out;
}

ImageBatch mi_fgsm_targeted(const ModelHandle& model, const ImageBatch& x, std::span<const int> y_t,
                            const MiOptions& o) {
  LATINF_EXPECT(o.eps > 0 && o.steps >= 1, "MI-FGSM needs eps > 0 and steps >= 1");
  LATINF_EXPECT(o.step_size >= 0, "MI-FGSM step size must be non-negative");
  LATINF_EXPECT(static_cast<std::int64_t>(y_t.size()) == x.size(), "one target label per image is required");
  for (int t : y_t)
    LATINF_EXPECT(t >= 0 && t < model.num_labels(), "target label " + std::to_string(t) + " out of range");
  if (x.size() == 0) return x;

  const Tensor& x0 = x.tensor();
  const std::int64_t per = x0.numel() / x.size();
  const double step = o.step_size > 0 ? o.step_size : o.eps / o.steps;
  Tensor cur = x0;
  Tensor g(x0.shape(), 0.0);
  for (int s = 0; s < o.steps; ++s) {
    ag::Var xv(cur, true);
    ag::sum(ag::gather_rows(model.logits(xv), y_t)).backward();
    const Tensor& grad = xv.grad();
    if (!grad.all_finite()) throw NumericError("non-finite gradient in MI-FGSM at step " + std::to_string(s));
    for (std::int64_t b = 0; b < x.size(); ++b) {
      double l1 = 0;
      for (std::int64_t k = b * per; k < (b + 1) * per; ++k) l1 += std::abs(grad[k]);
      for (std::int64_t k = b * per; k < (b + 1) * per; ++k) {
        g[k] = o.mu * g[k] + (l1 > 0 ? grad[k] / l1 : 0.0);
        const double sgn = g[k] > 0 ? 1.0 : (g[k] < 0 ? -1.0 : 0.0);
        const double lo = std::max(0.0, x0[k] - o.eps), hi = std::min(1.0, x0[k] + o.eps);
        cur[k] = std::clamp(cur[k] + step * sgn, lo, hi);
      }
    }
  }
  return ImageBatch(std::move(cur));
}

}  // namespace latinf
