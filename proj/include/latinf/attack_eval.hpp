#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latinf/curation.hpp"
#include "latinf/generator.hpp"
#include "latinf/model_zoo.hpp"

namespace latinf {

enum class PartitionTag { kKnown, kUnknown, kClean };
std::string to_string(PartitionTag t);
PartitionTag parse_partition_tag(const std::string& s);

struct SourceImage {
  std::string path;  // relative to the dataset root
  int label = 0;
};

// Up to per_class images of every class in split (0 = all), in split order.
std::vector<SourceImage> collect_sources(const DatasetSplit& split, std::size_t per_class = 0);

struct PairingRow {
  std::string source_path;
  int y = 0;
  int y_t = 0;
  std::string target_path;
  std::string output_path;  // relative to the set directory once written
  std::uint64_t seed = 0;
};

struct AdversarialSet {
  std::string surrogate;
  PartitionTag tag = PartitionTag::kKnown;
  ImageBatch images;   // one per row
  ImageBatch sources;  // matching clean inputs
  std::vector<PairingRow> rows;
};

struct CraftOptions {
  PartitionTag mode = PartitionTag::kKnown;
  std::uint64_t seed = 0;
  // Target classes per source; 0 = every class of the mode except y.
  std::size_t targets_per_source = 0;
  std::int64_t chunk = 32;
};

// One adversarial image per (source, target class) pairing. Known targets
// use the partition's fixed known entry; unknown targets draw one held-out
// image per pairing from a stream seeded by (seed, source index).
AdversarialSet craft_set(const Generator& g, const ModelHandle& extractor, std::span<const SourceImage> sources,
                         const ClassPartition& partition, const CraftOptions& options);

// The same pairings with the unmodified source images (the clean baseline).
AdversarialSet clean_counterpart(const AdversarialSet& set);

// Largest |x' - x| over the set.
double max_perturbation(const AdversarialSet& set);

// Writes images/<row>.ppm plus pairs.tsv; fills output_path on the rows.
void write_adversarial_set(AdversarialSet& set, const std::filesystem::path& dir);
// Reads pairs.tsv and the images it names. Rows whose image is unreadable are
// dropped and reported in skipped.
AdversarialSet read_adversarial_set(const std::filesystem::path& dir, std::int64_t channels, std::int64_t height,
                                    std::int64_t width, std::vector<std::string>* skipped = nullptr);

struct EvalRecord {
  std::string source_path;
  int y = 0;
  int y_t = 0;
  PartitionTag tag = PartitionTag::kKnown;
  std::string surrogate;
  std::string victim_id;
  int y_pred = 0;
  bool targeted_hit = false;    // y_pred == y_t
  bool untargeted_hit = false;  // y_pred != y
};

// One record per (image, victim). Victims apply their own input spec.
std::vector<EvalRecord> evaluate(const AdversarialSet& set, std::span<const ModelHandle> victims,
                                 std::int64_t chunk = 64);

struct TasrCell {
  std::string surrogate;
  std::string victim;
  PartitionTag tag = PartitionTag::kKnown;
  std::optional<int> class_id;
  std::int64_t n = 0;
  std::int64_t targeted_hits = 0;
  std::int64_t untargeted_hits = 0;
  double tasr = 0.0;
  double usr = 0.0;
};

TasrCell summarize(std::span<const EvalRecord> records);

struct TransferRow {
  std::string surrogate;
  PartitionTag tag = PartitionTag::kKnown;
  std::map<std::string, TasrCell> cells;  // by victim
  double avg = 0.0;                       // mean tasr over present cells
};

struct TransferMatrix {
  std::vector<std::string> victims;  // column order: first appearance
  std::vector<TransferRow> rows;     // by (surrogate, tag) first appearance
  std::vector<TasrCell> cells() const;
};

TransferMatrix transfer_matrix(std::span<const EvalRecord> records);

struct PerClassReport {
  std::vector<TasrCell> classes;       // keyed by target class y_t
  std::vector<std::int64_t> histogram; // class rates in equal-width bins over [0, 1]
};

PerClassReport per_class_tasr(std::span<const EvalRecord> records, int bins = 10);

// Columns: surrogate, victim, partition_tag, class_id, n, tasr, usr (full precision).
std::string report_tsv(std::span<const TasrCell> cells);
// Percentages with two decimals, victims as columns plus Avg.
std::string render_matrix(const TransferMatrix& m);
std::string records_tsv(std::span<const EvalRecord> records);
// Inverse of records_tsv; malformed rows -> DataError.
std::vector<EvalRecord> parse_records_tsv(const std::string& text);

struct MiOptions {
  double eps = 16.0 / 255.0;
  int steps = 300;
  double mu = 1.0;
  // Per-step size; 0 means eps / steps.
  double step_size = 0.0;
};

// Targeted MI-FGSM on the logit loss: g <- mu g + grad / |grad|_1 per image,
// x <- clip(x + step sign(g)). A zero gradient adds nothing to g.
ImageBatch mi_fgsm_targeted(const ModelHandle& model, const ImageBatch& x, std::span<const int> y_t,
                            const MiOptions& options = {});

}  // namespace latinf
