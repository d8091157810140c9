#include "latinf/toybench.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "latinf/errors.hpp"
#include "latinf/logging.hpp"
#include "latinf/optim.hpp"

namespace latinf::toy {

namespace fs = std::filesystem;

namespace {
constexpr double kPeriod = 8.0;
constexpr double kTextureAmplitude = 0.4;
constexpr double kMinObject = 0.35;
constexpr double kMaxObject = 0.6;
constexpr double kNoise = 0.04;

// Primitive grating frequencies (cycles per kPeriod pixels along x and y).
// Distinct frequencies stay orthogonal under any phase shift.
constexpr std::array<std::array<int, 2>, 5> kPrimitives{{{1, 0}, {0, 1}, {1, 1}, {1, -1}, {2, 0}}};

// Class k is the k-th unordered pair of primitives in lexicographic order, so
// every primitive is shared by four classes.
std::array<int, 2> class_primitives(int label) {
  int k = 0;
  for (int a = 0; a < static_cast<int>(kPrimitives.size()); ++a)
    for (int b = a + 1; b < static_cast<int>(kPrimitives.size()); ++b, ++k)
      if (k == label) return {a, b};
  return {0, 1};
}
}  // namespace

Tensor render_image(int label, Rng& rng, std::int64_t size, double contrast) {
  LATINF_EXPECT(label >= 0 && label < kNumClasses, "toy label out of range");
  LATINF_EXPECT(contrast > 0 && contrast <= 1, "toy contrast must lie in (0, 1]");
  Tensor img({3, size, size});
  const double s = static_cast<double>(size);

  // Background: grey level with a random linear gradient.
  const double base = rng.uniform(0.3, 0.6);
  const double gx = rng.uniform(-0.15, 0.15), gy = rng.uniform(-0.15, 0.15);
  std::array<double, 3> tint{rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)};
  for (std::int64_t y = 0; y < size; ++y)
    for (std::int64_t x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) img[(c * size + y) * size + x] = base + tint[c] + gx * (x / s - 0.5) + gy * (y / s - 0.5);

  // Object: random colour patch carrying the class's two gratings, each at a random phase.
  const auto prim = class_primitives(label);
  const auto w = static_cast<std::int64_t>(rng.uniform(kMinObject, kMaxObject) * s);
  const auto h = static_cast<std::int64_t>(rng.uniform(kMinObject, kMaxObject) * s);
  const auto x0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(size - w + 1)));
  const auto y0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(size - h + 1)));
  const std::array<double, 2> phase{rng.uniform(0.0, 2.0 * std::numbers::pi), rng.uniform(0.0, 2.0 * std::numbers::pi)};
  std::array<double, 3> colour{rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75)};
  const double amp = kTextureAmplitude * contrast;
  for (std::int64_t y = y0; y < y0 + h; ++y)
    for (std::int64_t x = x0; x < x0 + w; ++x) {
      double texture = 0.0;
      for (std::size_t j = 0; j < 2; ++j) {
        const auto& f = kPrimitives[static_cast<std::size_t>(prim[j])];
        texture += std::cos(2.0 * std::numbers::pi * (f[0] * x + f[1] * y) / kPeriod + phase[j]);
      }
      for (int c = 0; c < 3; ++c) img[(c * size + y) * size + x] = colour[static_cast<std::size_t>(c)] + amp * texture;
    }

  for (auto& v : img.values()) {
    v += kNoise * rng.normal();
    v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  }
  return img;
}

void write_dataset(const fs::path& root, const DatasetOptions& options) {
  const std::array<std::pair<const char*, int>, 3> splits{
      {{"train", options.train_per_class}, {"val", options.val_per_class}, {"test", options.test_per_class}}};
  for (std::size_t si = 0; si < splits.size(); ++si) {
    for (int label = 0; label < kNumClasses; ++label) {
      Rng rng(derive_seed(options.seed, si, static_cast<std::uint64_t>(label)));
      for (int i = 0; i < splits[si].second; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "%04d.ppm", i);
        write_netpbm(root / splits[si].first / std::to_string(label) / name, render_image(label, rng, options.size, options.contrast));
      }
    }
  }
}

std::pair<ImageBatch, std::vector<int>> load_split(const DatasetSplit& split, const InputSpec& spec) {
  std::vector<fs::path> paths;
  std::vector<int> labels;
  for (const auto& c : split.classes)
    for (const auto& f : c.files) {
      paths.push_back(split.root / f);
      labels.push_back(c.label);
    }
  return {load_images(paths, spec.channels, spec.height, spec.width), std::move(labels)};
}

double accuracy(const ModelHandle& m, const DatasetSplit& split) {
  auto [images, labels] = load_split(split, m.input_spec());
  if (labels.empty()) return 0.0;
  const auto pred = predict(m, images);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

FitReport fit_classifier(Network& net, const InputSpec& spec, const DatasetSplit& train, const DatasetSplit* test,
                         const FitOptions& options) {
  auto [images, labels] = load_split(train, spec);
  const auto n = static_cast<std::int64_t>(labels.size());
  LATINF_EXPECT(n > 0, "empty training split");
  net.params().set_trainable(true);
  nn::AdamW opt(net.params(), {.lr = options.lr, .weight_decay = options.weight_decay});
  const std::int64_t steps_per_epoch = (n + options.batch_size - 1) / options.batch_size;
  const std::int64_t total = steps_per_epoch * options.epochs;
  const std::int64_t row = images.channels() * images.height() * images.width();

  FitReport report;
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    for (std::int64_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(options.seed, 0xf17, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::int64_t b = 0; b < n; b += options.batch_size) {
      const std::int64_t e = std::min(n, b + options.batch_size);
      Tensor batch({e - b, images.channels(), images.height(), images.width()});
      std::vector<int> batch_labels;
      for (std::int64_t i = b; i < e; ++i) {
        std::copy_n(images.tensor().data() + order[i] * row, row, batch.data() + (i - b) * row);
        batch_labels.push_back(labels[static_cast<std::size_t>(order[i])]);
      }
      ag::Var x(ag::normalize_channels(ag::Var(batch), spec.mean, spec.stddev).value());
      ag::Var loss = ag::mean(ag::cross_entropy(net.head(net.features(x)), batch_labels));
      net.params().zero_grad();
      loss.backward();
      opt.step(nn::cosine_lr(options.lr, opt.step_count(), total));
      loss_sum += loss.value()[0] * static_cast<double>(e - b);
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(n));
    logger()->debug("fit epoch {} loss {:.4f}", epoch + 1, report.epoch_loss.back());
  }
  net.params().set_trainable(false);
  net.params().zero_grad();

  auto shared = std::shared_ptr<Network>(&net, [](Network*) {});
  ModelHandle h("fit", ModelRole::kVictim, spec, shared);
  report.train_accuracy = accuracy(h, train);
  if (test) report.test_accuracy = accuracy(h, *test);
  return report;
}

}  // namespace latinf::toy
