#include "latinf/curation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "latinf/errors.hpp"
#include "latinf/logging.hpp"
#include "latinf/serialize.hpp"

namespace latinf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kGreedyStartTag = 0x67726565;
constexpr std::uint64_t kRandomSelectTag = 0x72616e64;
constexpr std::uint64_t kQualityTag = 0x7175616c;

bool sample_less(const RankedSample& a, const RankedSample& b) {
  if (a.loss != b.loss) return a.loss < b.loss;
  return a.path < b.path;
}

json sample_to_json(const RankedSample& s) { return {{"path", s.path}, {"loss", s.loss}}; }
RankedSample sample_from_json(const json& j) { return {j.at("path").get<std::string>(), j.at("loss").get<double>()}; }

}  // namespace

std::vector<ClassPrototype> compute_class_prototypes(const ModelHandle& m, const DatasetSplit& split,
                                                     std::span<const int> labels, std::int64_t chunk) {
  const auto& spec = m.input_spec();
  std::vector<ClassPrototype> out;
  out.reserve(labels.size());
  for (int label : labels) {
    const ClassFiles& cf = split.at(label);
    if (cf.files.empty()) throw CurationError("class " + std::to_string(label) + " has no images in split " + split.split);
    Tensor sum({m.feature_dim()});
    for (std::size_t b = 0; b < cf.files.size(); b += static_cast<std::size_t>(chunk)) {
      std::vector<fs::path> paths;
      for (std::size_t i = b; i < std::min(cf.files.size(), b + static_cast<std::size_t>(chunk)); ++i)
        paths.push_back(split.root / cf.files[i]);
      const Tensor f = extract_features(m, load_images(paths, spec.channels, spec.height, spec.width));
      for (std::int64_t r = 0; r < f.dim(0); ++r)
        for (std::int64_t d = 0; d < f.dim(1); ++d) sum[d] += f[r * f.dim(1) + d];
    }
    const double inv = 1.0 / static_cast<double>(cf.files.size());
    double norm = 0.0;
    for (auto& v : sum.values()) {
      v *= inv;
      norm += v * v;
    }
    if (!(norm > 0.0)) throw CurationError("class " + std::to_string(label) + " has an all-zero prototype");
    out.push_back({label, std::move(sum), static_cast<std::int64_t>(cf.files.size())});
  }
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  LATINF_EXPECT(a.size() == b.size(), "cosine_similarity: dimension mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  LATINF_EXPECT(aa > 0 && bb > 0, "cosine_similarity: zero vector");
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

std::vector<int> greedy_select_classes(std::span<const ClassPrototype> prototypes, std::size_t n, std::uint64_t seed) {
  LATINF_EXPECT(n <= prototypes.size(), "cannot select " + std::to_string(n) + " classes from a pool of " +
                                            std::to_string(prototypes.size()));
  for (const auto& p : prototypes) LATINF_EXPECT(p.mean_feature.max_abs() > 0, "zero prototype in greedy pool");
  if (n == 0) return {};

  const std::size_t k = prototypes.size();
  // Pairwise similarities once; sums against the selected set are updated incrementally.
  std::vector<double> sim(k * k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i; j < k; ++j)
      sim[i * k + j] = sim[j * k + i] = cosine_similarity(prototypes[i].mean_feature.values(),
                                                          prototypes[j].mean_feature.values());

  std::vector<char> chosen(k, 0);
  std::vector<double> acc(k, 0.0);
  std::vector<int> out;
  Rng rng(derive_seed(seed, kGreedyStartTag));
  std::size_t pick = static_cast<std::size_t>(rng.below(k));
  for (;;) {
    chosen[pick] = 1;
    out.push_back(prototypes[pick].label);
    if (out.size() == n) break;
    for (std::size_t i = 0; i < k; ++i) acc[i] += sim[i * k + pick];
    const double count = static_cast<double>(out.size());
    std::size_t best = k;
    double best_mean = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      if (chosen[i]) continue;
      const double mean = acc[i] / count;
      if (best == k || mean < best_mean || (mean == best_mean && prototypes[i].label < prototypes[best].label)) {
        best = i;
        best_mean = mean;
      }
    }
    pick = best;
  }
  return out;
}

std::vector<int> random_select_classes(std::span<const int> labels, std::size_t n, std::uint64_t seed) {
  LATINF_EXPECT(n <= labels.size(), "cannot select " + std::to_string(n) + " classes from a pool of " +
                                        std::to_string(labels.size()));
  std::vector<int> pool(labels.begin(), labels.end());
  std::sort(pool.begin(), pool.end());
  Rng rng(derive_seed(seed, kRandomSelectTag));
  rng.shuffle(pool);
  pool.resize(n);
  return pool;
}

RankResult rank_samples_by_loss(const ModelHandle& m, int class_id, const fs::path& root,
                                std::span<const std::string> files, std::int64_t chunk) {
  LATINF_EXPECT(!files.empty(), "class " + std::to_string(class_id) + " has no images to rank");
  LATINF_EXPECT(class_id >= 0 && class_id < m.num_labels(), "class id outside the surrogate label space");
  const auto& spec = m.input_spec();
  RankResult result;
  std::vector<std::string> batch_paths;
  std::vector<Tensor> batch_images;
  auto flush = [&] {
    if (batch_images.empty()) return;
    const std::vector<int> labels(batch_images.size(), class_id);
    const auto losses = classification_loss(m, stack_images(batch_images), labels);
    for (std::size_t i = 0; i < losses.size(); ++i) result.samples.push_back({batch_paths[i], losses[i]});
    batch_paths.clear();
    batch_images.clear();
  };
  for (const auto& f : files) {
    try {
      const fs::path p = root / f;
      auto loaded = load_images(std::span<const fs::path>(&p, 1), spec.channels, spec.height, spec.width);
      batch_images.push_back(loaded.image(0));
      batch_paths.push_back(f);
    } catch (const DataError& e) {
      result.warnings.push_back("skipped unreadable image " + f + ": " + e.what());
      logger()->warn("{}", result.warnings.back());
    }
    if (static_cast<std::int64_t>(batch_images.size()) >= chunk) flush();
  }
  flush();
  std::sort(result.samples.begin(), result.samples.end(), sample_less);
  if (result.samples.empty()) throw CurationError("no readable images for class " + std::to_string(class_id));
  return result;
}

std::string to_string(SelectionStrategy s) { return s == SelectionStrategy::kGreedy ? "greedy" : "random"; }
std::string to_string(SampleQuality q) {
  switch (q) {
    case SampleQuality::kHigh: return "high";
    case SampleQuality::kLow: return "low";
    case SampleQuality::kRandom: return "random";
  }
  return "?";
}
std::string to_string(TargetSelection t) { return t == TargetSelection::kFixed ? "fixed" : "random"; }

SelectionStrategy parse_strategy(const std::string& s) {
  if (s == "greedy") return SelectionStrategy::kGreedy;
  if (s == "random") return SelectionStrategy::kRandom;
  throw ConfigError("unknown class selection strategy '" + s + "'");
}
SampleQuality parse_quality(const std::string& s) {
  if (s == "high") return SampleQuality::kHigh;
  if (s == "low") return SampleQuality::kLow;
  if (s == "random") return SampleQuality::kRandom;
  throw ConfigError("unknown sample quality '" + s + "'");
}
TargetSelection parse_target_selection(const std::string& s) {
  if (s == "fixed") return TargetSelection::kFixed;
  if (s == "random") return TargetSelection::kRandom;
  throw ConfigError("unknown target selection mode '" + s + "'");
}

const RankedSample& TargetPool::pick(int label, Rng& rng) const {
  if (auto it = known.find(label); it != known.end()) return it->second;
  auto it = unknown.find(label);
  if (it == unknown.end() || it->second.empty())
    throw ContractError("target pool has no entry for class " + std::to_string(label));
  if (selection == TargetSelection::kFixed) return it->second.front();
  return it->second[static_cast<std::size_t>(rng.below(it->second.size()))];
}

bool ClassPartition::is_known(int label) const { return std::find(known.begin(), known.end(), label) != known.end(); }

json ClassPartition::to_json() const {
  json samples_j = json::object();
  for (const auto& [label, list] : samples) {
    json arr = json::array();
    for (const auto& s : list) arr.push_back(sample_to_json(s));
    samples_j[std::to_string(label)] = std::move(arr);
  }
  json known_t = json::object(), unknown_t = json::object();
  for (const auto& [label, s] : targets.known) known_t[std::to_string(label)] = sample_to_json(s);
  for (const auto& [label, list] : targets.unknown) {
    json arr = json::array();
    for (const auto& s : list) arr.push_back(sample_to_json(s));
    unknown_t[std::to_string(label)] = std::move(arr);
  }
  return {{"format", "latinf.partition/1"},
          {"seed", seed},
          {"strategy", to_string(strategy)},
          {"quality", to_string(quality)},
          {"n", n},
          {"m", m},
          {"surrogate", surrogate},
          {"dataset_root", dataset_root},
          {"train_split", train_split},
          {"heldout_split", heldout_split},
          {"known", known},
          {"unknown", unknown},
          {"samples", samples_j},
          {"targets", {{"selection", to_string(targets.selection)}, {"known", known_t}, {"unknown", unknown_t}}},
          {"log", log}};
}

ClassPartition ClassPartition::from_json(const json& j) {
  ClassPartition p;
  try {
    if (j.value("format", std::string()) != "latinf.partition/1") throw DataError("not a partition file");
    p.seed = j.at("seed").get<std::uint64_t>();
    p.strategy = parse_strategy(j.at("strategy").get<std::string>());
    p.quality = parse_quality(j.at("quality").get<std::string>());
    p.n = j.at("n").get<std::size_t>();
    p.m = j.at("m").get<std::size_t>();
    p.surrogate = j.at("surrogate").get<std::string>();
    p.dataset_root = j.at("dataset_root").get<std::string>();
    p.train_split = j.value("train_split", std::string("train"));
    p.heldout_split = j.value("heldout_split", std::string("val"));
    p.known = j.at("known").get<std::vector<int>>();
    p.unknown = j.at("unknown").get<std::vector<int>>();
    for (const auto& [k, arr] : j.at("samples").items()) {
      auto& list = p.samples[std::stoi(k)];
      for (const auto& s : arr) list.push_back(sample_from_json(s));
    }
    const auto& t = j.at("targets");
    p.targets.selection = parse_target_selection(t.value("selection", std::string("random")));
    for (const auto& [k, s] : t.at("known").items()) p.targets.known[std::stoi(k)] = sample_from_json(s);
    for (const auto& [k, arr] : t.at("unknown").items()) {
      auto& list = p.targets.unknown[std::stoi(k)];
      for (const auto& s : arr) list.push_back(sample_from_json(s));
    }
    p.log = j.value("log", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed partition: ") + e.what());
  }
  return p;
}

void ClassPartition::save(const fs::path& file) const { write_file_atomic(file, to_json().dump(2) + "\n"); }

ClassPartition ClassPartition::load(const fs::path& file) {
  const std::string text = read_file_bytes(file);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError("partition file " + file.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

namespace {

void fill_unknown_targets(const ModelHandle& m, ClassPartition& partition, const DatasetSplit& heldout_split,
                          std::size_t unknown_pool_size, TargetPool& pool) {
  for (int label : partition.unknown) {
    if (!heldout_split.contains(label) || heldout_split.at(label).files.empty())
      throw CurationError("held-out split '" + heldout_split.split + "' has no images for unknown class " +
                          std::to_string(label));
    auto ranked = rank_samples_by_loss(m, label, heldout_split.root, heldout_split.at(label).files);
    for (const auto& w : ranked.warnings) partition.log.push_back(w);
    if (ranked.samples.size() < unknown_pool_size) {
      partition.log.push_back("class " + std::to_string(label) + " has only " + std::to_string(ranked.samples.size()) +
                              " held-out images; using all of them as targets");
      logger()->warn("{}", partition.log.back());
    }
    ranked.samples.resize(std::min(ranked.samples.size(), unknown_pool_size));
    pool.unknown[label] = std::move(ranked.samples);
  }
}

}  // namespace

TargetPool build_target_pool(const ModelHandle& m, ClassPartition& partition, const DatasetSplit& train_split,
                             const DatasetSplit& heldout_split, std::size_t unknown_pool_size,
                             TargetSelection selection) {
  LATINF_EXPECT(unknown_pool_size >= 1, "unknown target pool size must be positive");
  TargetPool pool;
  pool.selection = selection;
  for (int label : partition.known) {
    const auto ranked = rank_samples_by_loss(m, label, train_split.root, train_split.at(label).files);
    for (const auto& w : ranked.warnings) partition.log.push_back(w);
    pool.known[label] = ranked.samples.front();
  }
  fill_unknown_targets(m, partition, heldout_split, unknown_pool_size, pool);
  partition.targets = pool;
  return pool;
}

ClassPartition build_partition(const ModelHandle& m, const fs::path& dataset_root, const PartitionOptions& o) {
  const DatasetSplit train = scan_split(dataset_root, o.train_split);
  const std::vector<int> labels = train.labels();
  if (o.n > labels.size())
    throw ContractError("requested " + std::to_string(o.n) + " known classes but the dataset has " +
                        std::to_string(labels.size()));
  for (int l : labels)
    if (l < 0 || l >= m.num_labels())
      throw ContractError("dataset label " + std::to_string(l) + " is outside the surrogate label space");

  ClassPartition p;
  p.seed = o.seed;
  p.strategy = o.strategy;
  p.quality = o.quality;
  p.n = o.n;
  p.m = o.m_samples;
  p.surrogate = m.id();
  p.dataset_root = dataset_root.generic_string();
  p.train_split = o.train_split;
  p.heldout_split = o.heldout_split;

  if (o.strategy == SelectionStrategy::kGreedy) {
    DatasetSplit proto_split = train;
    if (o.prototype_limit > 0)
      for (auto& c : proto_split.classes)
        if (c.files.size() > o.prototype_limit) c.files.resize(o.prototype_limit);
    const ModelHandle extractor = m.with_role(ModelRole::kExtractor);
    const auto protos = compute_class_prototypes(extractor, proto_split, labels);
    p.known = greedy_select_classes(protos, o.n, o.seed);
  } else {
    p.known = random_select_classes(labels, o.n, o.seed);
  }
  for (int l : labels)
    if (!p.is_known(l)) p.unknown.push_back(l);

  LATINF_EXPECT(o.unknown_pool_size >= 1, "unknown target pool size must be positive");
  p.targets.selection = o.target_selection;
  for (int label : p.known) {
    auto ranked = rank_samples_by_loss(m, label, dataset_root, train.at(label).files);
    for (const auto& w : ranked.warnings) p.log.push_back(w);
    auto& all = ranked.samples;
    p.targets.known[label] = all.front();
    const std::size_t take = std::min(o.m_samples, all.size());
    std::vector<RankedSample> chosen;
    switch (o.quality) {
      case SampleQuality::kHigh:
        chosen.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take));
        break;
      case SampleQuality::kLow:
        chosen.assign(all.rbegin(), all.rbegin() + static_cast<std::ptrdiff_t>(take));
        break;
      case SampleQuality::kRandom: {
        std::vector<std::size_t> idx(all.size());
        std::iota(idx.begin(), idx.end(), 0);
        Rng rng(derive_seed(o.seed, kQualityTag, static_cast<std::uint64_t>(label)));
        rng.shuffle(idx);
        idx.resize(take);
        std::sort(idx.begin(), idx.end());
        for (auto i : idx) chosen.push_back(all[i]);
        break;
      }
    }
    p.samples[label] = std::move(chosen);
  }

  if (!p.unknown.empty())
    fill_unknown_targets(m, p, scan_split(dataset_root, o.heldout_split), o.unknown_pool_size, p.targets);
  return p;
}

}  // namespace latinf
