#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "latinf/attack_eval.hpp"
#include "latinf/curation.hpp"
#include "latinf/trainer.hpp"

namespace latinf {

// Curate, train, craft and evaluate in one go.
struct PipelineConfig {
  PartitionOptions curation;
  GeneratorConfig generator;
  TrainConfig train;
  std::string eval_split = "test";
  std::size_t eval_per_class = 0;  // 0 = all
  std::size_t known_targets_per_source = 0;
  std::size_t unknown_targets_per_source = 0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
};

struct PipelineResult {
  ClassPartition partition;
  TrainResult training;
  // Adversarial known and unknown records plus the clean records of both pairings.
  std::vector<EvalRecord> records;
  std::vector<EvalRecord> clean_records;
  double max_perturbation = 0.0;
};

// Artifacts land in work_dir (partition.json, train/, reports). The surrogate
// is evaluated white-box alongside the victims.
PipelineResult run_pipeline(const ModelHandle& surrogate, std::span<const ModelHandle> victims,
                            const std::filesystem::path& dataset_root, const PipelineConfig& config,
                            const std::filesystem::path& work_dir);

enum class AblationAxis { kN, kM, kAlpha, kStrategy, kQuality };
std::string to_string(AblationAxis a);
AblationAxis parse_axis(const std::string& s);

struct AblationSpec {
  AblationAxis axis = AblationAxis::kAlpha;
  std::vector<std::string> values;
  int repeats = 1;
  // false: repeat r uses seed + r; true: every repeat reuses the base seed.
  bool fixed_seed = false;
  // For the M axis: values are nominal counts out of m_reference images per
  // class and are scaled to the training images actually available. 0 = off.
  std::size_t m_reference = 0;
};

// Applies one axis value to a pipeline config (validates it).
PipelineConfig apply_axis_value(PipelineConfig base, AblationAxis axis, const std::string& value,
                                std::size_t available_per_class = 0, std::size_t m_reference = 0);

struct AblationRow {
  std::string value;
  int repeat = 0;
  std::string victim;
  PartitionTag tag = PartitionTag::kKnown;
  std::int64_t n = 0;
  double tasr = 0.0;
  double usr = 0.0;
  std::string effective;  // the setting actually used (e.g. scaled M)
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::filesystem::path plot_data;
  std::filesystem::path report;
};

// One pipeline per value x repeat under out_dir/<axis>/<value>/r<k>. Plot
// data (value, victim, partition_tag, tasr) and a full report are rewritten
// after every pipeline, so a failure keeps the rows finished before it.
AblationResult ablation_run(const AblationSpec& spec, const PipelineConfig& base, const ModelHandle& surrogate,
                            std::span<const ModelHandle> victims, const std::filesystem::path& dataset_root,
                            const std::filesystem::path& out_dir);

std::string plot_data_tsv(std::span<const AblationRow> rows);
std::string ablation_report_tsv(std::span<const AblationRow> rows);

}  // namespace latinf
