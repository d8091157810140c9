#pragma once

#include <filesystem>
#include <memory>
#include <random>
#include <string>

#include "latinf/image_io.hpp"
#include "latinf/model_zoo.hpp"
#include "latinf/rng.hpp"
#include "latinf/toybench.hpp"

namespace latinf::test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("latinf-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::shared_ptr<Network> tiny_net(std::uint64_t seed, std::int64_t labels = 10, std::int64_t in_channels = 3,
                                         std::vector<std::int64_t> widths = {4, 8, 8}) {
  return std::shared_ptr<Network>(build_network(
      "smallcnn", {{"widths", widths}, {"num_labels", labels}, {"in_channels", in_channels}}, seed));
}

inline InputSpec spec_for(std::int64_t channels, std::int64_t size) {
  InputSpec s;
  s.channels = channels;
  s.height = size;
  s.width = size;
  s.mean.assign(static_cast<std::size_t>(channels), 0.5);
  s.stddev.assign(static_cast<std::size_t>(channels), 0.5);
  return s;
}

inline ModelHandle tiny_model(const std::string& id, std::uint64_t seed, ModelRole role = ModelRole::kExtractor,
                              std::int64_t labels = 10, std::int64_t channels = 3, std::int64_t size = 32) {
  return ModelHandle(id, role, spec_for(channels, size), tiny_net(seed, labels, channels));
}

// Features are the per-channel means of the normalized input; the head is a
// fixed affine map. Lets tests dial logits through image brightness.
class MeanNet : public Network {
 public:
  MeanNet(std::int64_t channels, Tensor weight, Tensor bias) : channels_(channels) {
    labels_ = weight.dim(0);
    w_ = params_.add("head.weight", std::move(weight));
    b_ = params_.add("head.bias", std::move(bias));
  }
  ag::Var features(const ag::Var& x) const override { return ag::global_avg_pool(x); }
  ag::Var head(const ag::Var& f) const override { return ag::linear(f, w_, b_); }
  std::int64_t feature_dim() const override { return channels_; }
  std::int64_t num_labels() const override { return labels_; }
  std::string arch() const override { return "mean"; }
  nlohmann::json arch_params() const override { return nlohmann::json::object(); }

 private:
  std::int64_t channels_, labels_;
  ag::Var w_, b_;
};

// Constant-colour image [C, H, W].
inline Tensor flat_image(std::int64_t c, std::int64_t size, double v) { return Tensor({c, size, size}, v); }

inline Tensor random_batch(Rng& rng, std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
  Tensor t({n, c, h, w});
  for (auto& v : t.values()) v = rng.uniform();
  return t;
}

// root/{train,val,test}/<label>/NNNN.ppm from the toy renderer.
inline void write_small_dataset(const std::filesystem::path& root, int train, int val, int test,
                                std::uint64_t seed = 3) {
  toy::DatasetOptions o;
  o.train_per_class = train;
  o.val_per_class = val;
  o.test_per_class = test;
  o.seed = seed;
  toy::write_dataset(root, o);
}

}  // namespace latinf::test
