#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "latinf/dataset.hpp"
#include "latinf/model_zoo.hpp"
#include "latinf/rng.hpp"

namespace latinf {

struct ClassPrototype {
  int label = 0;
  Tensor mean_feature;  // [D], average of member features
  std::int64_t member_count = 0;
};

// Mean surrogate feature per class over the class's images in split.
// chunk bounds the number of images held in memory at once.
std::vector<ClassPrototype> compute_class_prototypes(const ModelHandle& m, const DatasetSplit& split,
                                                     std::span<const int> labels, std::int64_t chunk = 64);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Diverse class subset: a seeded uniformly random first class, then repeatedly
// the remaining prototype with the lowest mean cosine similarity to those
// already chosen (ties -> lowest label).
std::vector<int> greedy_select_classes(std::span<const ClassPrototype> prototypes, std::size_t n, std::uint64_t seed);
std::vector<int> random_select_classes(std::span<const int> labels, std::size_t n, std::uint64_t seed);

struct RankedSample {
  std::string path;  // relative to the dataset root
  double loss = 0.0;
};

struct RankResult {
  std::vector<RankedSample> samples;  // ascending loss, ties by path
  std::vector<std::string> warnings;  // unreadable files that were skipped
};

RankResult rank_samples_by_loss(const ModelHandle& m, int class_id, const std::filesystem::path& root,
                                std::span<const std::string> files, std::int64_t chunk = 64);

enum class SelectionStrategy { kGreedy, kRandom };
enum class SampleQuality { kHigh, kLow, kRandom };
enum class TargetSelection { kFixed, kRandom };

std::string to_string(SelectionStrategy s);
std::string to_string(SampleQuality q);
std::string to_string(TargetSelection t);
SelectionStrategy parse_strategy(const std::string& s);
SampleQuality parse_quality(const std::string& s);
TargetSelection parse_target_selection(const std::string& s);

struct TargetPool {
  std::map<int, RankedSample> known;                 // min-loss training sample
  std::map<int, std::vector<RankedSample>> unknown;  // lowest-loss held-out samples
  TargetSelection selection = TargetSelection::kRandom;

  // Target image for a class: the fixed known entry, or a draw from the
  // unknown pool (always the first entry in fixed mode).
  const RankedSample& pick(int label, Rng& rng) const;
};

struct ClassPartition {
  std::uint64_t seed = 0;
  SelectionStrategy strategy = SelectionStrategy::kGreedy;
  SampleQuality quality = SampleQuality::kHigh;
  std::size_t n = 0;
  std::size_t m = 0;
  std::string surrogate;
  std::string dataset_root;
  std::string train_split = "train";
  std::string heldout_split = "val";
  std::vector<int> known;    // selection order
  std::vector<int> unknown;  // ascending
  // Per known class: high -> ascending loss; low -> descending (highest first);
  // random -> seeded draw, then ascending.
  std::map<int, std::vector<RankedSample>> samples;
  TargetPool targets;
  std::vector<std::string> log;

  nlohmann::json to_json() const;
  static ClassPartition from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& file) const;
  static ClassPartition load(const std::filesystem::path& file);
  bool is_known(int label) const;
};

struct PartitionOptions {
  std::size_t n = 200;
  std::size_t m_samples = 325;
  SelectionStrategy strategy = SelectionStrategy::kGreedy;
  SampleQuality quality = SampleQuality::kHigh;
  TargetSelection target_selection = TargetSelection::kRandom;
  std::uint64_t seed = 0;
  std::string train_split = "train";
  std::string heldout_split = "val";
  std::size_t unknown_pool_size = 10;
  // Images per class used for prototypes; 0 means all.
  std::size_t prototype_limit = 0;
};

ClassPartition build_partition(const ModelHandle& m, const std::filesystem::path& dataset_root,
                               const PartitionOptions& options);

// Fills partition.targets from the two splits; classes with fewer held-out
// images than the pool size use all of them and log a warning.
TargetPool build_target_pool(const ModelHandle& m, ClassPartition& partition, const DatasetSplit& train_split,
                             const DatasetSplit& heldout_split, std::size_t unknown_pool_size = 10,
                             TargetSelection selection = TargetSelection::kRandom);

}  // namespace latinf
