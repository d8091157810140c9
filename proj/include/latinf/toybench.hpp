#pragma once

#include <filesystem>
#include <vector>

#include "latinf/dataset.hpp"
#include "latinf/model_zoo.hpp"
#include "latinf/rng.hpp"

// Desk-scale benchmark fixtures: a procedurally rendered 10-class 32x32
// dataset and a small-CNN fitting loop used to produce surrogate and victim
// weights for tests and demos.
namespace latinf::toy {

// Five primitive sinusoidal gratings; each class superimposes one of the ten
// pairs, at random phases, on a randomly coloured patch over a noisy gradient
// background. Every primitive appears in four classes, so a held-out class is
// a new combination of familiar parts. Colour, position and size carry no
// label information.
inline constexpr int kNumClasses = 10;

struct DatasetOptions {
  std::int64_t size = 32;
  int train_per_class = 120;
  int val_per_class = 30;
  int test_per_class = 30;
  std::uint64_t seed = 7;
  // Scales the grating amplitude; lower values make classes harder to tell apart.
  double contrast = 0.2;
};

// [3, size, size] in [0, 1], already quantized to 8-bit levels.
Tensor render_image(int label, Rng& rng, std::int64_t size, double contrast = 0.2);
// Writes root/{train,val,test}/<label>/<index>.ppm.
void write_dataset(const std::filesystem::path& root, const DatasetOptions& options);

struct FitOptions {
  int epochs = 6;
  int batch_size = 32;
  double lr = 3e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
};

struct FitReport {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

// Supervised cross-entropy fit of net on a split (weights are updated in place).
FitReport fit_classifier(Network& net, const InputSpec& spec, const DatasetSplit& train, const DatasetSplit* test,
                         const FitOptions& options);

double accuracy(const ModelHandle& m, const DatasetSplit& split);

// Loads every image of a split with its label, in class then file order.
std::pair<ImageBatch, std::vector<int>> load_split(const DatasetSplit& split, const InputSpec& spec);

}  // namespace latinf::toy
