#pragma once

#include <filesystem>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latinf/curation.hpp"
#include "latinf/generator.hpp"
#include "latinf/model_zoo.hpp"
#include "latinf/optim.hpp"

namespace latinf {

// Which image feeds the perturbation term: the clipped adversarial example
// (x' - x_s) or the unclipped generator output (G(x_s, x_t) - x_s).
enum class DeltaSource { kClipped, kRaw };
std::string to_string(DeltaSource d);
DeltaSource parse_delta_source(const std::string& s);

struct TrainConfig {
  double alpha = 0.5;
  int epochs = 20;
  int batch_size = 16;
  double lr = 2e-4;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  DeltaSource delta_source = DeltaSource::kClipped;
  // 0 = one full pass over the curated samples per epoch.
  std::int64_t max_steps_per_epoch = 0;
  double norm_floor = 1e-12;
  bool deterministic = true;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct LossBreakdown {
  double total = 0.0;
  double term_adv = 0.0;    // D_cos(f(x'), f_t)
  double term_delta = 0.0;  // D_cos(f(delta), f_t)
};

// 1 - <a,b> / (|a||b|) with both norms floored at norm_floor.
double cosine_distance(std::span<const double> a, std::span<const double> b, double norm_floor = 1e-12);

struct LossEvaluation {
  ag::Var total;  // differentiable w.r.t. generator parameters
  LossBreakdown values;
  double max_perturbation = 0.0;  // |x' - x_s|_inf over the batch
  int norm_floor_hits = 0;
};

// Batch-mean latent-infection loss:
//   D_cos(F(x'), F(x_t)) + alpha * D_cos(F(delta), F(x_t)), x' = clip(G(x_s, F(x_t))).
LossEvaluation latent_infection_loss(const Generator& g, const ModelHandle& extractor, const ImageBatch& source,
                                     const Tensor& target_features, double alpha,
                                     DeltaSource delta = DeltaSource::kClipped, double norm_floor = 1e-12);
LossEvaluation latent_infection_loss(const Generator& g, const ModelHandle& extractor, const ImageBatch& source,
                                     const ImageBatch& target_images, double alpha,
                                     DeltaSource delta = DeltaSource::kClipped, double norm_floor = 1e-12);

// ---- checkpoints ------------------------------------------------------------

struct CheckpointMeta {
  GeneratorConfig generator;
  TrainConfig train;
  std::string surrogate;
  std::size_t n = 0;
  std::size_t m = 0;
  int epochs_completed = 0;
  std::int64_t optimizer_steps = 0;
  std::string params_sha256;
  std::string optimizer_sha256;
};

// dir/manifest.json + dir/generator.bin (+ dir/optimizer.bin when opt given).
// The manifest carries the blob hashes and a hash over its own content.
void save_checkpoint(const std::filesystem::path& dir, const Generator& g, const nn::AdamW* opt, CheckpointMeta meta);

struct LoadedCheckpoint {
  std::unique_ptr<Generator> generator;
  CheckpointMeta meta;
  std::filesystem::path dir;
};

// Hash mismatch anywhere -> IntegrityError; expected_feature_dim mismatch -> ContractError.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir,
                                 std::optional<std::int64_t> expected_feature_dim = std::nullopt);

// ---- training ---------------------------------------------------------------

struct StepRecord {
  int epoch = 0;
  std::int64_t step = 0;
  LossBreakdown loss;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean total loss per epoch run in this call
  std::vector<StepRecord> steps;
  std::filesystem::path final_checkpoint;
  std::string extractor_checksum;
};

struct TrainJob {
  const ClassPartition* partition = nullptr;
  const ModelHandle* surrogate = nullptr;
  GeneratorConfig generator;
  TrainConfig train;
  // Receives checkpoints/epoch_NNNN/ and train_log.jsonl.
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume_from;
};

// Optimizes a generator on the partition's known classes. Each step draws
// source images from the curated known-class samples and, per source, a
// target class uniformly from the known set and one of its curated images
// uniformly. Deterministic for a fixed seed; resumable from any checkpoint.
TrainResult train(const TrainJob& job);

}  // namespace latinf
