#pragma once

#include <filesystem>
#include <memory>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "latinf/autograd.hpp"
#include "latinf/image_io.hpp"
#include "latinf/layers.hpp"

namespace latinf {

// A classifier architecture split at the classification head: features()
// is the globally pooled penultimate representation, head() the final affine
// map onto label logits. Inputs are already normalized.
class Network {
 public:
  virtual ~Network() = default;
  virtual ag::Var features(const ag::Var& normalized) const = 0;
  virtual ag::Var head(const ag::Var& features) const = 0;
  virtual std::int64_t feature_dim() const = 0;
  virtual std::int64_t num_labels() const = 0;
  virtual std::string arch() const = 0;
  virtual nlohmann::json arch_params() const = 0;

  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

 protected:
  nn::ParamSet params_;
};

// Instantiates a registered architecture with seeded random weights.
// Known archs: "smallcnn" {widths:[a,b,c], activation, num_labels, in_channels}
// and "resnet" {layers:[..4], width, num_labels} (torchvision bottleneck layout).
std::unique_ptr<Network> build_network(const std::string& arch, const nlohmann::json& arch_params,
                                       std::uint64_t init_seed);

enum class ModelRole { kExtractor, kVictim };
std::string to_string(ModelRole role);
ModelRole parse_role(const std::string& s);

struct InputSpec {
  std::int64_t channels = 3;
  std::int64_t height = 32;
  std::int64_t width = 32;
  std::vector<double> mean{0.5, 0.5, 0.5};
  std::vector<double> stddev{0.5, 0.5, 0.5};
};

struct Logits {
  Tensor values;  // [batch, num_labels]

  std::int64_t rows() const { return values.dim(0); }
  // Row argmax; ties go to the lowest label index.
  std::vector<int> argmax() const;
};

// Frozen pretrained classifier. Copies share the same immutable weights.
// Every entry point takes unit-interval pixels; normalization happens inside.
class ModelHandle {
 public:
  ModelHandle(std::string id, ModelRole role, InputSpec spec, std::shared_ptr<Network> net);

  const std::string& id() const { return id_; }
  ModelRole role() const { return role_; }
  const InputSpec& input_spec() const { return spec_; }
  std::int64_t feature_dim() const { return net_->feature_dim(); }
  std::int64_t num_labels() const { return net_->num_labels(); }
  const Network& network() const { return *net_; }

  // Differentiable with respect to x (weights never receive gradients).
  ag::Var features(const ag::Var& x) const;
  ag::Var logits(const ag::Var& x) const;
  ag::Var head(const ag::Var& features) const { return net_->head(features); }

  std::string parameter_checksum() const;
  ModelHandle with_role(ModelRole role) const { return ModelHandle(id_, role, spec_, net_); }

 private:
  void check_input(const Shape& s) const;
  ag::Var normalize(const ag::Var& x) const;

  std::string id_;
  ModelRole role_;
  InputSpec spec_;
  std::shared_ptr<Network> net_;
};

// [batch, D] pooled penultimate features. Requires role extractor.
Tensor extract_features(const ModelHandle& m, const ImageBatch& x);
Logits classify(const ModelHandle& m, const ImageBatch& x);
// Per-sample softmax cross-entropy.
std::vector<double> classification_loss(const ModelHandle& m, const ImageBatch& x, std::span<const int> labels);
// Resizes to the model's input size when needed, then classifies in chunks.
std::vector<int> predict(const ModelHandle& m, const ImageBatch& x, std::int64_t chunk = 64);

struct RegistryEntry {
  std::string id;
  std::string arch;
  nlohmann::json arch_params;
  std::string weights;  // relative to the registry file directory, or absolute
  std::string sha256;
  InputSpec input;
  std::int64_t num_labels = 0;
};

// Structured-text (JSON) registry mapping model ids to architecture,
// weights file, input spec, label count and weights content hash.
class ModelRegistry {
 public:
  ModelRegistry() = default;
  explicit ModelRegistry(std::filesystem::path base_dir) : base_dir_(std::move(base_dir)) {}

  static ModelRegistry load(const std::filesystem::path& file);
  void save(const std::filesystem::path& file) const;

  void add(RegistryEntry entry);
  const RegistryEntry& entry(const std::string& id) const;
  bool contains(const std::string& id) const;
  std::vector<std::string> ids() const;
  const std::filesystem::path& base_dir() const { return base_dir_; }

  // Unknown id -> RegistryError; hash mismatch or unreadable blob -> IntegrityError.
  ModelHandle load_model(const std::string& id, ModelRole role) const;

 private:
  std::filesystem::path weights_path(const RegistryEntry& e) const;

  std::filesystem::path base_dir_;
  std::vector<RegistryEntry> entries_;
};

// Writes net's weights beside the registry and records an entry for them.
RegistryEntry register_network(ModelRegistry& registry, const std::string& id, const Network& net,
                               const InputSpec& spec, const std::filesystem::path& weights_file);

}  // namespace latinf
