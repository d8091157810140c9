// Acceptance harness: evaluates the nine acceptance criteria and prints one
// PASS/FAIL line per criterion. Exits 1 when any criterion fails.
//
//   latinf_acceptance [--work-dir DIR] [--keep] [--only 1,4,7] [--report FILE]

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "latinf/ablation.hpp"
#include "latinf/attack_eval.hpp"
#include "latinf/curation.hpp"
#include "latinf/errors.hpp"
#include "latinf/logging.hpp"
#include "latinf/serialize.hpp"
#include "latinf/toybench.hpp"
#include "latinf/trainer.hpp"

using namespace latinf;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

std::string pct(double v) { return num(100.0 * v, 4) + "%"; }

Tensor random_tensor(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform();
  return t;
}

std::shared_ptr<Network> small_cnn(std::uint64_t seed, std::int64_t channels, std::vector<std::int64_t> widths,
                                   const std::string& activation = "relu") {
  return std::shared_ptr<Network>(build_network(
      "smallcnn", {{"widths", widths}, {"in_channels", channels}, {"activation", activation}}, seed));
}

InputSpec spec_for(std::int64_t channels, std::int64_t size) {
  InputSpec s;
  s.channels = channels;
  s.height = size;
  s.width = size;
  s.mean.assign(static_cast<std::size_t>(channels), 0.5);
  s.stddev.assign(static_cast<std::size_t>(channels), 0.5);
  return s;
}

// ---- independent arithmetic ---------------------------------------------------

// Mean over rows of 1 - <a,b>/(max(|a|,floor) max(|b|,floor)), long double.
long double mean_cosine_distance(const Tensor& a, const Tensor& b, long double floor) {
  const std::int64_t rows = a.dim(0), d = a.dim(1);
  long double total = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    long double ab = 0, aa = 0, bb = 0;
    for (std::int64_t k = 0; k < d; ++k) {
      const long double x = a[r * d + k], y = b[r * d + k];
      ab += x * y;
      aa += x * x;
      bb += y * y;
    }
    total += 1 - ab / (std::max(std::sqrt(aa), floor) * std::max(std::sqrt(bb), floor));
  }
  return total / static_cast<long double>(rows);
}

GeneratorConfig random_generator_config(Rng& rng, std::int64_t channels, std::int64_t feature_dim) {
  GeneratorConfig c;
  c.image_channels = channels;
  c.base_width = 2 + static_cast<std::int64_t>(rng.below(5));
  c.depth = 1 + static_cast<int>(rng.below(2));
  c.injection_dim = 2 + static_cast<std::int64_t>(rng.below(7));
  c.feature_dim = feature_dim;
  c.output_mapping = static_cast<OutputMapping>(rng.below(3));
  c.init_seed = rng.next_u64();
  return c;
}

// ---- criterion 1 --------------------------------------------------------------

Outcome budget_soundness() {
  const auto t0 = Clock::now();
  const double eps = 16.0 / 255.0, tol = 1e-7;
  Rng rng(101);
  std::int64_t violations = 0, calls = 0;
  double worst = 0.0;
  while (calls < 1000) {
    const std::int64_t channels = rng.uniform() < 0.5 ? 1 : 3;
    const std::int64_t fdim = 2 + static_cast<std::int64_t>(rng.below(15));
    Generator g(random_generator_config(rng, channels, fdim));
    // Random states: rescale every weight so that some generators saturate.
    const double gain = std::exp(rng.uniform(-1.0, 2.5));
    for (auto& p : g.params().items())
      for (auto& v : p.var.mutable_value().values()) v = v * gain + 0.1 * rng.normal();
    for (int k = 0; k < 20 && calls < 1000; ++k, ++calls) {
      const std::int64_t size = 4 << rng.below(3);
      const std::int64_t batch = 1 + static_cast<std::int64_t>(rng.below(3));
      Tensor x = random_tensor(rng, {batch, channels, size, size});
      for (auto& v : x.values()) {
        const double u = rng.uniform();
        if (u < 0.1) v = 0.0;
        else if (u < 0.2) v = 1.0;
      }
      Tensor f({batch, fdim});
      for (auto& v : f.values()) v = 5.0 * rng.normal();
      const ImageBatch src(x);
      const ImageBatch adv = craft(g, src, f);
      bool bad = false;
      for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double a = adv.tensor()[i];
        const double d = std::abs(a - x[i]);
        worst = std::max(worst, d);
        if (!(d <= eps + tol) || !(a >= -tol) || !(a <= 1.0 + tol)) bad = true;
      }
      violations += bad;
    }
  }
  const double secs = seconds_since(t0);
  return {violations == 0 && secs < 60.0, std::to_string(calls) + " calls, " + std::to_string(violations) +
                                              " violations, max |x'-x| " + num(worst * 255.0, 6) + "/255, " +
                                              num(secs, 3) + " s"};
}

// ---- criterion 2 --------------------------------------------------------------

Outcome loss_correctness(const fs::path& work) {
  Rng rng(202);
  int mismatches = 0;
  long double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t channels = rng.uniform() < 0.5 ? 1 : 3;
    const std::int64_t size = 8 << rng.below(2);
    const std::int64_t batch = 1 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t w = 2 + static_cast<std::int64_t>(rng.below(6));
    const ModelHandle ext("x", ModelRole::kExtractor, spec_for(channels, size),
                          small_cnn(rng.next_u64(), channels, {w, w, 8}));
    Generator g(random_generator_config(rng, channels, 8));
    const ImageBatch xs(random_tensor(rng, {batch, channels, size, size}));
    const double alpha = rng.uniform() < 0.2 ? 0.0 : rng.uniform(0.0, 2.0);
    const DeltaSource src = rng.uniform() < 0.5 ? DeltaSource::kClipped : DeltaSource::kRaw;

    Tensor ft({batch, 8});
    const bool by_image = rng.uniform() < 0.5;
    const ImageBatch target(random_tensor(rng, {batch, channels, size, size}));
    if (by_image) {
      ft = extract_features(ext, target);
    } else {
      for (auto& v : ft.values()) v = rng.normal();
    }
    const LossEvaluation L = by_image ? latent_infection_loss(g, ext, xs, target, alpha, src)
                                      : latent_infection_loss(g, ext, xs, ft, alpha, src);

    // Straight-line recomputation: x' = min(x+eps, max(G, x-eps)) in [0,1],
    // delta = x' - x (or G - x), then the cosine distances in long double.
    const ImageBatch raw = generate_raw(g, xs, ft);
    const double eps = g.config().epsilon;
    Tensor adv(xs.tensor().shape()), delta(xs.tensor().shape());
    for (std::int64_t i = 0; i < adv.numel(); ++i) {
      const double x = xs.tensor()[i];
      const double r = raw.tensor()[i];
      adv[i] = std::clamp(std::min(x + eps, std::max(r, x - eps)), 0.0, 1.0);
      delta[i] = (src == DeltaSource::kClipped ? adv[i] : r) - x;
    }
    const long double t_adv = mean_cosine_distance(extract_features(ext, ImageBatch(adv)), ft, 1e-12L);
    const long double t_delta = mean_cosine_distance(extract_features(ext, ImageBatch(delta)), ft, 1e-12L);
    const long double expect = t_adv + static_cast<long double>(alpha) * t_delta;
    const long double err = std::abs(expect - static_cast<long double>(L.values.total));
    worst = std::max(worst, err);
    if (!(err <= 1e-6L)) ++mismatches;
  }

  // Decomposition on every step of a one-epoch toy run.
  toy::DatasetOptions o;
  o.train_per_class = 8;
  o.val_per_class = 2;
  o.test_per_class = 1;
  o.seed = 21;
  toy::write_dataset(work / "data", o);
  const ModelHandle sur("sur", ModelRole::kExtractor, InputSpec{}, small_cnn(22, 3, {4, 8, 8}));
  PartitionOptions po;
  po.n = 4;
  po.m_samples = 8;
  po.seed = 23;
  po.unknown_pool_size = 2;
  const ClassPartition part = build_partition(sur, work / "data", po);
  TrainJob job;
  job.partition = &part;
  job.surrogate = &sur;
  job.generator.base_width = 4;
  job.generator.depth = 2;
  job.generator.injection_dim = 8;
  job.generator.feature_dim = sur.feature_dim();
  job.train.epochs = 1;
  job.train.batch_size = 4;
  job.train.alpha = 0.75;
  job.train.lr = 1e-3;
  job.out_dir = work / "train";
  const TrainResult tr = train(job);

  std::ifstream log(work / "train" / "train_log.jsonl");
  int steps = 0, broken = 0;
  for (std::string line; std::getline(log, line);) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    const double total = j.at("total"), adv = j.at("term_adv"), del = j.at("term_delta");
    ++steps;
    if (!(std::abs(total - (adv + job.train.alpha * del)) <= 1e-12 * std::max(1.0, std::abs(total)))) ++broken;
  }
  const bool ok = mismatches == 0 && broken == 0 && steps > 0 && steps == static_cast<int>(tr.steps.size());
  return {ok, "50 cases, " + std::to_string(mismatches) + " mismatches (max |err| " +
                  num(static_cast<double>(worst), 3) + "); decomposition " + std::to_string(steps - broken) + "/" +
                  std::to_string(steps) + " logged steps"};
}

// ---- criterion 3 --------------------------------------------------------------

// Central differences against backprop for one generator; returns probes run.
struct GradStats {
  int probes = 0, failures = 0, skipped = 0;
  double worst = 0.0, clipped = 0.0;
};

GradStats gradient_probes(OutputMapping mapping, std::uint64_t seed, int wanted) {
  const ModelHandle ext("x", ModelRole::kExtractor, spec_for(3, 16), small_cnn(seed, 3, {4, 8, 8}, "gelu"));
  GeneratorConfig gc;
  gc.image_channels = 3;
  gc.base_width = 4;
  gc.depth = 2;
  gc.injection_dim = 6;
  gc.feature_dim = ext.feature_dim();
  gc.output_mapping = mapping;
  gc.init_seed = seed + 1;
  Generator g(gc);
  // A loud output head pushes part of the image to the edge of the budget band.
  for (auto& p : g.params().items())
    if (p.name.starts_with("head."))
      for (auto& v : p.var.mutable_value().values()) v *= 40.0;
  Rng rng(seed + 2);
  const ImageBatch xs(random_tensor(rng, {2, 3, 16, 16}));
  Tensor ft({2, ext.feature_dim()});
  for (auto& v : ft.values()) v = rng.normal();
  const double alpha = 0.6;

  g.params().set_trainable(true);
  g.params().zero_grad();
  latent_infection_loss(g, ext, xs, ft, alpha).total.backward();
  auto value = [&] {
    ag::NoGradGuard ng;
    return latent_infection_loss(g, ext, xs, ft, alpha).values.total;
  };
  // -1 at or below the lower bound of the band, +1 at or above the upper, 0 inside.
  auto clip_pattern = [&] {
    const ImageBatch raw = generate_raw(g, xs, ft);
    std::vector<signed char> p(static_cast<std::size_t>(raw.tensor().numel()));
    for (std::int64_t k = 0; k < raw.tensor().numel(); ++k) {
      const double x = xs.tensor()[k], r = raw.tensor()[k];
      const double lo = std::max(0.0, x - gc.epsilon), hi = std::min(1.0, x + gc.epsilon);
      p[static_cast<std::size_t>(k)] = r <= lo ? -1 : (r >= hi ? 1 : 0);
    }
    return p;
  };

  GradStats st;
  const auto base = clip_pattern();
  st.clipped = static_cast<double>(std::count_if(base.begin(), base.end(), [](signed char c) { return c != 0; })) /
               static_cast<double>(base.size());
  const double h = 1e-4;
  for (int attempt = 0; attempt < 400 && st.probes < wanted; ++attempt) {
    auto& p = g.params().items()[rng.below(g.params().size())];
    const auto i = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(p.var.value().numel())));
    const double analytic = p.var.grad()[i];
    const double keep = p.var.value()[i];
    p.var.mutable_value()[i] = keep + h;
    const bool same_p = clip_pattern() == base;
    const double fp = value();
    p.var.mutable_value()[i] = keep - h;
    const bool same_m = clip_pattern() == base;
    const double fm = value();
    p.var.mutable_value()[i] = keep;
    if (!same_p || !same_m) {
      ++st.skipped;
      continue;
    }
    const double fd = (fp - fm) / (2 * h);
    const double scale = std::max(std::abs(fd), std::abs(analytic));
    if (scale < 1e-7) continue;
    const double rel = std::abs(fd - analytic) / scale;
    st.worst = std::max(st.worst, rel);
    st.failures += !(rel < 1e-3);
    ++st.probes;
  }
  return st;
}

Outcome gradient_check() {
  const auto t0 = Clock::now();
  int probes = 0, failures = 0, skipped = 0;
  double worst = 0.0;
  std::string clipped;
  std::uint64_t seed = 31;
  for (auto m : {OutputMapping::kBoundedResidual, OutputMapping::kResidualSigmoid, OutputMapping::kTanh}) {
    const GradStats st = gradient_probes(m, seed, 15);
    seed += 10;
    probes += st.probes;
    failures += st.failures;
    skipped += st.skipped;
    worst = std::max(worst, st.worst);
    clipped += (clipped.empty() ? "" : ", ") + to_string(m) + " " + pct(st.clipped);
  }
  const double secs = seconds_since(t0);
  return {probes >= 20 && failures == 0 && secs < 120.0,
          std::to_string(probes) + " probes, " + std::to_string(failures) + " above 1e-3 (max rel err " +
              num(worst, 3) + "), " + std::to_string(skipped) + " skipped at clip boundaries; pixels at the band edge: " +
              clipped + "; " + num(secs, 3) + " s"};
}

// ---- criterion 4 --------------------------------------------------------------

double cosine_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

// Brute force: at every step recompute each candidate's mean similarity to
// the chosen set from scratch; ties go to the lowest label.
std::vector<int> brute_force_greedy(const std::map<int, std::vector<double>>& pool, std::size_t n, int first) {
  std::vector<int> chosen{first};
  while (chosen.size() < n) {
    int best = -1;
    double best_mean = 0.0;
    for (const auto& [label, v] : pool) {
      if (std::find(chosen.begin(), chosen.end(), label) != chosen.end()) continue;
      double s = 0.0;
      for (int c : chosen) s += cosine_oracle(v, pool.at(c));
      const double m = s / static_cast<double>(chosen.size());
      if (best < 0 || m < best_mean) {
        best = label;
        best_mean = m;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

Outcome greedy_oracle() {
  Rng rng(404);
  int mismatches = 0, tie_pools = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 2 + rng.below(9);
    const std::size_t d = 1 + rng.below(8);
    std::vector<int> labels(30);
    for (int i = 0; i < 30; ++i) labels[static_cast<std::size_t>(i)] = 2 * i + 1;
    rng.shuffle(labels);
    std::map<int, std::vector<double>> pool;
    std::vector<ClassPrototype> protos;
    while (protos.size() < k) {
      std::vector<double> v(d);
      if (!protos.empty() && rng.uniform() < 0.3) {
        const auto src = protos[rng.below(protos.size())].mean_feature.values();
        v.assign(src.begin(), src.end());
      } else {
        for (auto& x : v) x = static_cast<double>(static_cast<int>(rng.below(5)) - 2);
      }
      if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) continue;
      const int label = labels[protos.size()];
      pool[label] = v;
      protos.push_back({label, Tensor({static_cast<std::int64_t>(d)}, v), 1});
    }
    std::set<std::vector<double>> distinct;
    for (const auto& [l, v] : pool) distinct.insert(v);
    tie_pools += distinct.size() < pool.size();

    const std::size_t n = 1 + rng.below(k);
    const auto got = greedy_select_classes(protos, n, rng.next_u64());
    const bool ok = got.size() == n && pool.count(got.front()) && got == brute_force_greedy(pool, n, got.front());
    mismatches += !ok;
  }
  return {mismatches == 0, "100 pools (" + std::to_string(tie_pools) + " with duplicated prototypes), " +
                               std::to_string(mismatches) + " mismatches"};
}

// ---- criterion 5 --------------------------------------------------------------

Outcome curation_laws(const fs::path& work) {
  toy::DatasetOptions o;
  o.train_per_class = 12;
  o.val_per_class = 4;
  o.test_per_class = 1;
  o.seed = 51;
  toy::write_dataset(work / "data", o);
  const ModelHandle sur("sur", ModelRole::kExtractor, InputSpec{}, small_cnn(52, 3, {4, 8, 8}));
  const DatasetSplit train_split = scan_split(work / "data", "train");
  const auto all_labels = train_split.labels();
  const std::set<int> universe(all_labels.begin(), all_labels.end());

  std::vector<std::string> problems;
  auto fail = [&](const std::string& what) { problems.push_back(what); };
  int checked = 0;
  for (auto strategy : {SelectionStrategy::kGreedy, SelectionStrategy::kRandom})
    for (auto quality : {SampleQuality::kHigh, SampleQuality::kLow})
      for (std::size_t n : {1u, 4u, 9u}) {
        PartitionOptions po;
        po.n = n;
        po.m_samples = 5;
        po.strategy = strategy;
        po.quality = quality;
        po.seed = 1000 + n;
        po.unknown_pool_size = 3;
        const ClassPartition p = build_partition(sur, work / "data", po);
        const std::string tag = to_string(strategy) + "/" + to_string(quality) + "/n=" + std::to_string(n);
        ++checked;

        std::set<int> known(p.known.begin(), p.known.end()), unknown(p.unknown.begin(), p.unknown.end());
        if (known.size() != n || p.known.size() != n) fail(tag + " known size");
        for (int c : known)
          if (unknown.count(c)) fail(tag + " known and unknown overlap");
        std::set<int> both = known;
        both.insert(unknown.begin(), unknown.end());
        if (both != universe) fail(tag + " coverage");

        for (int c : p.known) {
          const ClassFiles& files = train_split.at(c);
          const RankResult ranked = rank_samples_by_loss(sur, c, work / "data", files.files);
          const auto& sel = p.samples.at(c);
          if (sel.size() != po.m_samples) fail(tag + " sample count");
          std::set<std::string> chosen;
          for (const auto& s : sel) chosen.insert(s.path);
          double sel_max = -INFINITY, sel_min = INFINITY, rej_max = -INFINITY, rej_min = INFINITY;
          for (const auto& r : ranked.samples) {
            if (chosen.count(r.path)) {
              sel_max = std::max(sel_max, r.loss);
              sel_min = std::min(sel_min, r.loss);
            } else {
              rej_max = std::max(rej_max, r.loss);
              rej_min = std::min(rej_min, r.loss);
            }
          }
          if (chosen.size() != sel.size()) fail(tag + " duplicate samples");
          if (quality == SampleQuality::kHigh && !(sel_max <= rej_min)) fail(tag + " high-quality monotonicity");
          if (quality == SampleQuality::kLow && !(sel_min >= rej_max)) fail(tag + " low-quality monotonicity");
        }

        p.save(work / "a.json");
        build_partition(sur, work / "data", po).save(work / "b.json");
        if (read_file_bytes(work / "a.json") != read_file_bytes(work / "b.json")) fail(tag + " not byte-identical");
      }
  std::string detail = std::to_string(checked) + " partitions, " + std::to_string(problems.size()) + " violations";
  if (!problems.empty()) detail += " (first: " + problems.front() + ")";
  return {problems.empty(), detail};
}

// ---- criteria 6, 7, 9 ---------------------------------------------------------

// Desk-scale benchmark settings shared by the MI and end-to-end criteria.
constexpr int kFitEpochs = 30;
constexpr int kMiPairs = 256;

PipelineConfig benchmark_pipeline() {
  PipelineConfig c;
  c.curation.n = 8;
  c.curation.m_samples = 100;
  c.curation.unknown_pool_size = 10;
  c.generator.base_width = 16;
  c.generator.depth = 2;
  c.generator.injection_dim = 64;
  c.train.epochs = 20;
  c.train.batch_size = 16;
  c.train.lr = 1e-3;
  c.train.alpha = 0.5;
  c.train.deterministic = true;
  c.eval_per_class = 5;
  c.seed = 0;
  return c;
}

struct BenchmarkRun {
  fs::path dir;
  double surrogate_accuracy = 0.0;
  double victim_accuracy = 0.0;
  double mi_tasr = 0.0;
  double mi_max_perturbation = 0.0;
  double mi_seconds = 0.0;
  double pipeline_seconds = 0.0;
  PipelineResult pipeline;
};

ModelHandle fit_small_cnn(const std::string& id, std::uint64_t seed, const DatasetSplit& train_split,
                          const DatasetSplit& test_split, double* test_accuracy) {
  auto net = small_cnn(seed, 3, {16, 32, 64});
  toy::FitOptions fo;
  fo.epochs = kFitEpochs;
  fo.seed = seed;
  const auto rep = toy::fit_classifier(*net, InputSpec{}, train_split, &test_split, fo);
  *test_accuracy = rep.test_accuracy;
  return ModelHandle(id, ModelRole::kVictim, InputSpec{}, net);
}

// Toy dataset, two independently seeded small CNNs, the MI baseline on the
// surrogate and the full known/unknown pipeline.
BenchmarkRun run_benchmark(const fs::path& dir) {
  BenchmarkRun run;
  run.dir = dir;
  toy::write_dataset(dir / "data", toy::DatasetOptions{});
  const DatasetSplit train_split = scan_split(dir / "data", "train");
  const DatasetSplit test_split = scan_split(dir / "data", "test");
  const ModelHandle sur = fit_small_cnn("sur", 1, train_split, test_split, &run.surrogate_accuracy);
  const ModelHandle vic = fit_small_cnn("vic", 2, train_split, test_split, &run.victim_accuracy);

  auto t0 = Clock::now();
  {
    auto [x, y] = toy::load_split(test_split, sur.input_spec());
    std::vector<std::size_t> order(y.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(606);
    rng.shuffle(order);
    std::vector<Tensor> xs;
    std::vector<int> yt, ys;
    for (int i = 0; i < kMiPairs; ++i) {
      const std::size_t idx = order[static_cast<std::size_t>(i) % order.size()];
      xs.push_back(x.image(static_cast<std::int64_t>(idx)));
      ys.push_back(y[idx]);
      yt.push_back((y[idx] + 1 + static_cast<int>(rng.below(9))) % 10);
    }
    const ImageBatch src = stack_images(xs);
    MiOptions mo;
    mo.steps = 300;
    mo.mu = 1.0;
    const ImageBatch adv = mi_fgsm_targeted(sur, src, yt, mo);
    const auto pred = predict(sur, adv);
    int hits = 0;
    std::ostringstream tsv;
    tsv << "pair\ty\ty_t\ty_pred\n";
    for (int i = 0; i < kMiPairs; ++i) {
      const auto k = static_cast<std::size_t>(i);
      hits += pred[k] == yt[k];
      tsv << i << '\t' << ys[k] << '\t' << yt[k] << '\t' << pred[k] << '\n';
    }
    run.mi_tasr = hits / static_cast<double>(kMiPairs);
    run.mi_max_perturbation = max_abs_diff(adv.tensor(), src.tensor());
    fs::create_directories(dir / "mi");
    write_file_atomic(dir / "mi" / "records.tsv", tsv.str());
    write_file_atomic(dir / "mi" / "summary.json",
                      json{{"pairs", kMiPairs}, {"hits", hits}, {"tasr", run.mi_tasr}}.dump(2) + "\n");
  }
  run.mi_seconds = seconds_since(t0);

  t0 = Clock::now();
  const std::vector<ModelHandle> victims{vic};
  run.pipeline = run_pipeline(sur, victims, dir / "data", benchmark_pipeline(), dir / "pipeline");
  run.pipeline_seconds = seconds_since(t0);
  return run;
}

Outcome mi_calibration(const BenchmarkRun& r) {
  const bool ok = r.surrogate_accuracy >= 0.95 && r.mi_tasr >= 0.90 && r.mi_max_perturbation <= 16.0 / 255.0 + 1e-12 &&
                  r.mi_seconds < 600.0;
  return {ok, "classifier test accuracy " + pct(r.surrogate_accuracy) + ", MI white-box TASR " + pct(r.mi_tasr) +
                  " over " + std::to_string(kMiPairs) + " pairs (floor 90%), " + num(r.mi_seconds, 3) + " s"};
}

double rate(const std::vector<EvalRecord>& recs, const std::string& victim, PartitionTag tag) {
  std::int64_t n = 0, hits = 0;
  for (const auto& r : recs)
    if (r.victim_id == victim && r.tag == tag) {
      ++n;
      hits += r.targeted_hit;
    }
  return n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
}

Outcome end_to_end(const BenchmarkRun& r) {
  const auto& p = r.pipeline;
  const double known_wb = rate(p.records, "sur", PartitionTag::kKnown);
  const double unknown_wb = rate(p.records, "sur", PartitionTag::kUnknown);
  const double unknown_clean = rate(p.clean_records, "sur", PartitionTag::kUnknown);
  const double known_tr = rate(p.records, "vic", PartitionTag::kKnown);
  const double known_tr_clean = rate(p.clean_records, "vic", PartitionTag::kKnown);
  const double unknown_tr = rate(p.records, "vic", PartitionTag::kUnknown);
  const double unknown_tr_clean = rate(p.clean_records, "vic", PartitionTag::kUnknown);

  const bool a = known_wb >= 0.50;
  const bool b = unknown_wb > 10.0 * unknown_clean && unknown_wb >= 0.05;
  const bool c = known_tr > known_tr_clean;
  const bool split_ok = p.partition.known.size() == 8 && p.partition.unknown.size() == 2;
  const bool budget_ok = p.max_perturbation <= 16.0 / 255.0 + 1e-7;
  return {a && b && c && split_ok && budget_ok && r.pipeline_seconds < 4 * 3600.0,
          std::string("(a) known white-box ") + pct(known_wb) + (a ? " ok" : " LOW") + "; (b) unknown white-box " +
              pct(unknown_wb) + " vs clean confusion " + pct(unknown_clean) + (b ? " ok" : " LOW") +
              "; (c) known transfer " + pct(known_tr) + " vs clean " + pct(known_tr_clean) + (c ? " ok" : " LOW") +
              " (unknown transfer " + pct(unknown_tr) + " vs " + pct(unknown_tr_clean) + "); " +
              num(r.pipeline_seconds / 60.0, 3) + " min"};
}

// Relative path -> content hash for every manifest and report file of a run.
std::map<std::string, std::string> run_fingerprint(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    const bool manifest = name == "manifest.json";
    const bool report = name.starts_with("report.") || name == "records.tsv" || name == "summary.json";
    if (manifest || report) out[fs::relative(e.path(), dir).string()] = sha256_hex(read_file_bytes(e.path()));
  }
  return out;
}

Outcome reproducibility(const BenchmarkRun& a, const BenchmarkRun& b) {
  const auto fa = run_fingerprint(a.dir), fb = run_fingerprint(b.dir);
  std::size_t manifests = 0, differing = 0;
  for (const auto& [k, v] : fa) {
    manifests += k.ends_with("manifest.json");
    auto it = fb.find(k);
    differing += it == fb.end() || it->second != v;
  }
  for (const auto& [k, v] : fb) differing += !fa.count(k);
  return {differing == 0 && manifests > 0,
          std::to_string(fa.size()) + " files compared (" + std::to_string(manifests) + " checkpoint manifests), " +
              std::to_string(differing) + " differ"};
}

// ---- criterion 8 --------------------------------------------------------------

Outcome ablation_fidelity(const fs::path& work) {
  toy::DatasetOptions o;
  o.train_per_class = 20;
  o.val_per_class = 3;
  o.test_per_class = 2;
  o.seed = 81;
  toy::write_dataset(work / "data", o);
  const ModelHandle sur("sur", ModelRole::kVictim, InputSpec{}, small_cnn(82, 3, {4, 8, 8}));
  const std::vector<ModelHandle> victims{ModelHandle("vic", ModelRole::kVictim, InputSpec{}, small_cnn(83, 3, {4, 8, 8}))};

  PipelineConfig base;
  base.curation.n = 6;
  base.curation.m_samples = 4;
  base.curation.unknown_pool_size = 2;
  base.generator.base_width = 4;
  base.generator.depth = 2;
  base.generator.injection_dim = 8;
  base.train.epochs = 1;
  base.train.batch_size = 4;
  base.train.max_steps_per_epoch = 3;
  base.eval_per_class = 1;
  base.known_targets_per_source = 2;
  base.unknown_targets_per_source = 1;
  base.seed = 84;

  struct Sweep {
    AblationAxis axis;
    std::vector<std::string> values;
    std::size_t m_reference;
  };
  const std::vector<Sweep> sweeps{{AblationAxis::kAlpha, {"0", "0.25", "0.5", "0.75", "1"}, 0},
                                  {AblationAxis::kM, {"1", "130", "325", "650", "1300"}, 1300}};
  const std::vector<std::string> victim_ids{"sur", "vic"};
  std::vector<std::string> problems;
  std::size_t rows_total = 0;
  std::string scaled;
  for (const auto& sw : sweeps) {
    AblationSpec spec;
    spec.axis = sw.axis;
    spec.values = sw.values;
    spec.repeats = 2;
    spec.fixed_seed = true;
    spec.m_reference = sw.m_reference;
    const AblationResult res = ablation_run(spec, base, sur, victims, work / "data", work / "out");
    const std::string axis = to_string(sw.axis);

    // Plot data: header plus one row per (value, victim, tag) and repeat.
    std::map<std::tuple<std::string, std::string, std::string>, std::vector<std::string>> plot;
    std::istringstream in(read_file_bytes(res.plot_data));
    std::string line;
    std::getline(in, line);
    if (line != "value\tvictim\tpartition_tag\ttasr") problems.push_back(axis + " plot header");
    std::size_t plot_rows = 0;
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::istringstream ls(line);
      for (std::string cell; std::getline(ls, cell, '\t');) f.push_back(cell);
      if (f.size() != 4) {
        problems.push_back(axis + " malformed plot row");
        continue;
      }
      ++plot_rows;
      plot[{f[0], f[1], f[2]}].push_back(f[3]);
    }
    const std::size_t expected = sw.values.size() * victim_ids.size() * 2;
    if (plot.size() != expected) problems.push_back(axis + " has " + std::to_string(plot.size()) + " of " +
                                                    std::to_string(expected) + " (value, victim, tag) keys");
    for (const auto& v : sw.values)
      for (const auto& vic : victim_ids)
        for (const char* tag : {"known", "unknown"}) {
          auto it = plot.find({v, vic, tag});
          if (it == plot.end()) {
            problems.push_back(axis + " missing " + v + "/" + vic + "/" + tag);
            continue;
          }
          if (it->second.size() != 2) problems.push_back(axis + " repeat count for " + v);
          else if (it->second[0] != it->second[1]) problems.push_back(axis + " repeats differ at " + v);
        }
    if (plot_rows != expected * 2) problems.push_back(axis + " plot row count");

    // Row-level duplicates: every field of repeat 1 equals repeat 0.
    std::map<std::tuple<std::string, std::string, int>, const AblationRow*> first;
    for (const auto& r : res.rows)
      if (r.repeat == 0) first[{r.value, r.victim, static_cast<int>(r.tag)}] = &r;
    for (const auto& r : res.rows) {
      if (r.repeat != 1) continue;
      auto it = first.find({r.value, r.victim, static_cast<int>(r.tag)});
      if (it == first.end() || it->second->n != r.n || it->second->tasr != r.tasr || it->second->usr != r.usr ||
          it->second->effective != r.effective)
        problems.push_back(axis + " non-deterministic duplicate at " + r.value);
    }
    rows_total += res.rows.size();
    if (sw.axis == AblationAxis::kM) {
      std::map<std::string, std::string> eff;
      for (const auto& r : res.rows) eff[r.value] = r.effective;
      for (const auto& v : sw.values) scaled += (scaled.empty() ? "" : ", ") + v + "->" + eff[v];
    }
  }
  std::string detail = std::to_string(rows_total) + " rows over alpha and M sweeps; M scaled to 20 per class (" +
                       scaled + "); " + std::to_string(problems.size()) + " problems";
  if (!problems.empty()) detail += " (first: " + problems.front() + ")";
  return {problems.empty(), detail};
}

std::set<int> parse_only(const std::string& s) {
  std::set<int> out;
  std::istringstream in(s);
  for (std::string tok; std::getline(in, tok, ',');) {
    if (tok.empty()) continue;
    const int v = std::stoi(tok);
    if (v < 1 || v > 9) throw ConfigError("criteria are numbered 1 to 9: " + tok);
    out.insert(v);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string work_arg, only_arg, report_arg;
  bool keep = false;
  app.add_option("--work-dir", work_arg, "Directory for run artifacts (default: fresh temp dir)");
  app.add_option("--only", only_arg, "Comma-separated criterion numbers");
  app.add_flag("--keep", keep, "Keep the work directory");
  app.add_option("--report", report_arg, "Also write the verdict lines to this file");
  CLI11_PARSE(app, argc, argv);

  std::set<int> only;
  try {
    only = parse_only(only_arg);
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  auto wanted = [&](int c) { return only.empty() || only.count(c) > 0; };

  set_log_level("warn");
  fs::path work;
  if (work_arg.empty()) {
    std::random_device rd;
    work = fs::temp_directory_path() / ("latinf-acceptance-" + std::to_string(rd()));
  } else {
    work = work_arg;
    keep = true;
  }
  if (fs::exists(work) && !fs::is_empty(work)) {
    std::cerr << "work directory is not empty: " << work << "\n";
    return 2;
  }
  fs::create_directories(work);
  std::cout << "work directory: " << work.string() << std::endl;

  std::map<int, std::pair<std::string, Outcome>> results;
  std::ostringstream report;
  auto record = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    results[id] = {name, o};
    std::ostringstream line;
    line << "criterion " << id << " [" << name << "]: " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << " ("
         << num(seconds_since(t0), 3) << " s)\n";
    report << line.str();
    std::cout << line.str() << std::flush;
  };

  if (wanted(1)) record(1, "budget soundness", budget_soundness);
  if (wanted(2)) record(2, "loss correctness", [&] { return loss_correctness(work / "c2"); });
  if (wanted(3)) record(3, "gradient check", gradient_check);
  if (wanted(4)) record(4, "greedy oracle", greedy_oracle);
  if (wanted(5)) record(5, "curation laws", [&] { return curation_laws(work / "c5"); });

  if (wanted(6) || wanted(7) || wanted(9)) {
    std::optional<BenchmarkRun> first, second;
    std::string error;
    try {
      first = run_benchmark(work / "bench_a");
      if (wanted(9)) second = run_benchmark(work / "bench_b");
    } catch (const std::exception& e) {
      error = std::string("error: ") + e.what();
    }
    auto from_first = [&](auto fn) {
      return [&, fn]() -> Outcome { return first ? fn(*first) : Outcome{false, error}; };
    };
    if (wanted(6)) record(6, "MI baseline calibration", from_first(mi_calibration));
    if (wanted(7)) record(7, "end-to-end known/unknown separation", from_first(end_to_end));
    if (wanted(9))
      record(9, "reproducibility", [&]() -> Outcome {
        return first && second ? reproducibility(*first, *second) : Outcome{false, error};
      });
  }
  if (wanted(8)) record(8, "ablation harness fidelity", [&] { return ablation_fidelity(work / "c8"); });

  int failed = 0;
  for (const auto& [id, r] : results) failed += !r.second.pass;
  std::ostringstream summary;
  summary << "summary:";
  for (const auto& [id, r] : results) summary << " " << id << "=" << (r.second.pass ? "PASS" : "FAIL");
  summary << "\nacceptance: " << results.size() - static_cast<std::size_t>(failed) << "/" << results.size()
          << " criteria passed\n";
  std::cout << summary.str() << std::flush;
  if (!report_arg.empty()) write_file_atomic(report_arg, report.str() + summary.str());

  if (!keep) {
    std::error_code ec;
    fs::remove_all(work, ec);
  }
  return failed == 0 ? 0 : 1;
}
