#include "latinf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_map>

#include "latinf/errors.hpp"
#include "latinf/logging.hpp"
#include "latinf/serialize.hpp"

namespace latinf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kEpochTag = 0x65706f63;
constexpr double kBudgetSlack = 1e-9;
constexpr double kDecompositionTol = 1e-6;
constexpr std::size_t kImageCacheBytes = std::size_t{1} << 30;
constexpr const char* kManifestFormat = "latinf.checkpoint/1";

std::string epoch_dir_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04d", epoch);
  return buf;
}

json manifest_body(const CheckpointMeta& m) {
  return {{"format", kManifestFormat},
          {"generator", m.generator.to_json()},
          {"train", m.train.to_json()},
          {"surrogate", m.surrogate},
          {"n", m.n},
          {"m", m.m},
          {"epochs_completed", m.epochs_completed},
          {"optimizer_steps", m.optimizer_steps},
          {"params_sha256", m.params_sha256},
          {"optimizer_sha256", m.optimizer_sha256}};
}

// m and v moments under prefixed names so one blob holds both.
nn::ParamSet moment_view(const nn::AdamW& opt) {
  nn::ParamSet s;
  for (const auto& p : opt.first_moments().items()) s.add("m/" + p.name, p.var.value());
  for (const auto& p : opt.second_moments().items()) s.add("v/" + p.name, p.var.value());
  return s;
}

void restore_moments(nn::AdamW& opt, const nn::ParamSet& s) {
  auto& m = opt.first_moments().items();
  auto& v = opt.second_moments().items();
  for (std::size_t i = 0; i < m.size(); ++i) m[i].var.mutable_value() = s.items()[i].var.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i].var.mutable_value() = s.items()[m.size() + i].var.value();
}

bool grads_finite(const nn::ParamSet& ps) {
  for (const auto& p : ps.items())
    if (p.var.has_grad() && !p.var.grad().all_finite()) return false;
  return true;
}

// Pixels and surrogate features keyed by dataset-relative path. The
// extractor is frozen, so features never go stale.
class SampleCache {
 public:
  SampleCache(const fs::path& root, const ModelHandle& extractor) : root_(root), extractor_(extractor) {}

  ImageBatch images(const std::vector<std::string>& paths) {
    const auto& spec = extractor_.input_spec();
    std::vector<Tensor> out;
    out.reserve(paths.size());
    for (const auto& p : paths) {
      auto it = pixels_.find(p);
      if (it != pixels_.end()) {
        out.push_back(it->second);
        continue;
      }
      const fs::path full = root_ / p;
      Tensor img = load_images(std::span<const fs::path>(&full, 1), spec.channels, spec.height, spec.width).image(0);
      const std::size_t bytes = static_cast<std::size_t>(img.numel()) * sizeof(double);
      if (bytes_ + bytes <= kImageCacheBytes) {
        bytes_ += bytes;
        pixels_.emplace(p, img);
      }
      out.push_back(std::move(img));
    }
    return stack_images(out);
  }

  Tensor features(const std::vector<std::string>& paths) {
    std::vector<std::string> missing;
    for (const auto& p : paths)
      if (!features_.contains(p) && std::find(missing.begin(), missing.end(), p) == missing.end()) missing.push_back(p);
    if (!missing.empty()) {
      const Tensor f = extract_features(extractor_, images(missing));
      for (std::size_t i = 0; i < missing.size(); ++i)
        features_.emplace(missing[i], f.slice_rows(static_cast<std::int64_t>(i), static_cast<std::int64_t>(i) + 1));
    }
    std::vector<Tensor> rows;
    rows.reserve(paths.size());
    for (const auto& p : paths) rows.push_back(features_.at(p));
    return Tensor::stack_rows(rows).reshaped({static_cast<std::int64_t>(paths.size()), extractor_.feature_dim()});
  }

 private:
  fs::path root_;
  const ModelHandle& extractor_;
  std::unordered_map<std::string, Tensor> pixels_;
  std::unordered_map<std::string, Tensor> features_;
  std::size_t bytes_ = 0;
};

}  // namespace

std::string to_string(DeltaSource d) { return d == DeltaSource::kRaw ? "raw" : "clipped"; }

DeltaSource parse_delta_source(const std::string& s) {
  if (s == "clipped") return DeltaSource::kClipped;
  if (s == "raw") return DeltaSource::kRaw;
  throw ConfigError("unknown delta source '" + s + "' (expected clipped|raw)");
}

void TrainConfig::validate() const {
  if (!std::isfinite(alpha) || alpha < 0) throw ConfigError("alpha must be a finite non-negative number");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (max_steps_per_epoch < 0) throw ConfigError("max_steps_per_epoch must be non-negative");
  if (!(norm_floor > 0)) throw ConfigError("norm_floor must be positive");
}

json TrainConfig::to_json() const {
  return {{"alpha", alpha},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"seed", seed},
          {"delta_source", to_string(delta_source)},
          {"max_steps_per_epoch", max_steps_per_epoch},
          {"norm_floor", norm_floor},
          {"deterministic", deterministic}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    c.alpha = j.value("alpha", c.alpha);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    c.delta_source = parse_delta_source(j.value("delta_source", to_string(c.delta_source)));
    c.max_steps_per_epoch = j.value("max_steps_per_epoch", c.max_steps_per_epoch);
    c.norm_floor = j.value("norm_floor", c.norm_floor);
    c.deterministic = j.value("deterministic", c.deterministic);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid train config: ") + e.what());
  }
  c.validate();
  return c;
}

double cosine_distance(std::span<const double> a, std::span<const double> b, double norm_floor) {
  LATINF_EXPECT(a.size() == b.size(), "cosine_distance length mismatch");
  LATINF_EXPECT(norm_floor > 0, "norm_floor must be positive");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return 1.0 - dot / (std::max(std::sqrt(na), norm_floor) * std::max(std::sqrt(nb), norm_floor));
}

LossEvaluation latent_infection_loss(const Generator& g, const ModelHandle& extractor, const ImageBatch& source,
                                     const Tensor& target_features, double alpha, DeltaSource delta,
                                     double norm_floor) {
  LATINF_EXPECT(std::isfinite(alpha) && alpha >= 0, "alpha must be finite and non-negative");
  LATINF_EXPECT(source.size() > 0, "loss needs a non-empty batch");
  LATINF_EXPECT(target_features.rank() == 2 && target_features.dim(0) == source.size(),
                "target features " + shape_str(target_features.shape()) + " do not pair with " +
                    std::to_string(source.size()) + " source images");
  LATINF_EXPECT(target_features.dim(1) == extractor.feature_dim(),
                "target feature width " + std::to_string(target_features.dim(1)) + " != extractor feature dim " +
                    std::to_string(extractor.feature_dim()));

  const ag::Var xs(source.tensor());
  const ag::Var ft(target_features);
  const ag::Var raw = g.generate_raw(xs, ft);
  const ag::Var adv = ag::clip_to_budget(raw, source.tensor(), g.config().epsilon);
  const ag::Var d = ag::sub(delta == DeltaSource::kClipped ? adv : raw, xs);

  int hits_adv = 0, hits_delta = 0;
  const ag::Var t_adv = ag::mean(ag::row_cosine_distance(extractor.features(adv), ft, norm_floor, &hits_adv));
  const ag::Var t_delta = ag::mean(ag::row_cosine_distance(extractor.features(d), ft, norm_floor, &hits_delta));

  LossEvaluation out;
  out.total = ag::add(t_adv, ag::scale(t_delta, alpha));
  out.values.term_adv = t_adv.value()[0];
  out.values.term_delta = t_delta.value()[0];
  out.values.total = out.total.value()[0];
  out.norm_floor_hits = hits_adv + hits_delta;
  const Tensor& a = adv.value();
  const Tensor& s = source.tensor();
  for (std::int64_t i = 0; i < a.numel(); ++i)
    out.max_perturbation = std::max(out.max_perturbation, std::abs(a[i] - s[i]));
  if (out.norm_floor_hits > 0)
    logger()->debug("cosine distance: {} feature norms hit the floor {}", out.norm_floor_hits, norm_floor);
  return out;
}

LossEvaluation latent_infection_loss(const Generator& g, const ModelHandle& extractor, const ImageBatch& source,
                                     const ImageBatch& target_images, double alpha, DeltaSource delta,
                                     double norm_floor) {
  LATINF_EXPECT(target_images.size() == source.size(), "source and target batches differ in size");
  return latent_infection_loss(g, extractor, source, extract_features(extractor, target_images), alpha, delta,
                               norm_floor);
}

// ---- checkpoints ------------------------------------------------------------

void save_checkpoint(const fs::path& dir, const Generator& g, const nn::AdamW* opt, CheckpointMeta meta) {
  fs::create_directories(dir);
  const std::string params = encode_params(g.params());
  meta.generator = g.config();
  meta.params_sha256 = sha256_hex(params);
  write_file_atomic(dir / "generator.bin", params);
  if (opt != nullptr) {
    const std::string moments = encode_params(moment_view(*opt));
    meta.optimizer_sha256 = sha256_hex(moments);
    meta.optimizer_steps = opt->step_count();
    write_file_atomic(dir / "optimizer.bin", moments);
  } else {
    meta.optimizer_sha256.clear();
  }
  json body = manifest_body(meta);
  body["manifest_sha256"] = sha256_hex(manifest_body(meta).dump());
  write_file_atomic(dir / "manifest.json", body.dump(2) + "\n");
}

namespace {

CheckpointMeta parse_manifest(const fs::path& dir) {
  const fs::path file = dir / "manifest.json";
  if (!fs::exists(file)) throw DataError("checkpoint manifest not found: " + file.string());
  json j;
  try {
    j = json::parse(read_file_bytes(file));
  } catch (const json::parse_error& e) {
    throw IntegrityError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  CheckpointMeta m;
  try {
    if (j.at("format").get<std::string>() != kManifestFormat)
      throw IntegrityError("unsupported checkpoint format in " + file.string());
    m.generator = GeneratorConfig::from_json(j.at("generator"));
    m.train = TrainConfig::from_json(j.at("train"));
    m.surrogate = j.at("surrogate").get<std::string>();
    m.n = j.at("n").get<std::size_t>();
    m.m = j.at("m").get<std::size_t>();
    m.epochs_completed = j.at("epochs_completed").get<int>();
    m.optimizer_steps = j.at("optimizer_steps").get<std::int64_t>();
    m.params_sha256 = j.at("params_sha256").get<std::string>();
    m.optimizer_sha256 = j.at("optimizer_sha256").get<std::string>();
    if (sha256_hex(manifest_body(m).dump()) != j.at("manifest_sha256").get<std::string>())
      throw IntegrityError("checkpoint manifest hash mismatch in " + file.string());
  } catch (const json::exception& e) {
    throw IntegrityError("malformed checkpoint manifest " + file.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IntegrityError("checkpoint manifest holds an invalid config: " + std::string(e.what()));
  }
  return m;
}

std::string read_verified(const fs::path& file, const std::string& expected) {
  if (!fs::exists(file)) throw IntegrityError("checkpoint blob missing: " + file.string());
  std::string blob = read_file_bytes(file);
  if (sha256_hex(blob) != expected) throw IntegrityError("checkpoint blob hash mismatch: " + file.string());
  return blob;
}

}  // namespace

LoadedCheckpoint load_checkpoint(const fs::path& dir, std::optional<std::int64_t> expected_feature_dim) {
  LoadedCheckpoint out;
  out.dir = dir;
  out.meta = parse_manifest(dir);
  if (expected_feature_dim && *expected_feature_dim != out.meta.generator.feature_dim)
    throw ContractError("checkpoint expects feature_dim " + std::to_string(out.meta.generator.feature_dim) +
                        " but the extractor produces " + std::to_string(*expected_feature_dim));
  const std::string blob = read_verified(dir / "generator.bin", out.meta.params_sha256);
  out.generator = std::make_unique<Generator>(out.meta.generator);
  try {
    decode_params(blob, out.generator->params());
  } catch (const ContractError& e) {
    throw IntegrityError("checkpoint weights do not match its generator config: " + std::string(e.what()));
  }
  return out;
}

// ---- training ---------------------------------------------------------------

TrainResult train(const TrainJob& job) {
  LATINF_EXPECT(job.partition != nullptr && job.surrogate != nullptr, "train job needs a partition and a surrogate");
  const ClassPartition& part = *job.partition;
  const ModelHandle& ext = *job.surrogate;
  LATINF_EXPECT(ext.role() == ModelRole::kExtractor, "surrogate must be loaded with role extractor");
  job.train.validate();
  job.generator.validate();
  LATINF_EXPECT(job.generator.feature_dim == ext.feature_dim(),
                "generator feature_dim " + std::to_string(job.generator.feature_dim) + " != surrogate feature dim " +
                    std::to_string(ext.feature_dim()));
  LATINF_EXPECT(job.generator.image_channels == ext.input_spec().channels, "generator and surrogate channels differ");
  if (part.known.empty()) throw CurationError("partition has no known classes");

  const TrainConfig& tc = job.train;
  auto log = logger();

  // Source pool: every curated known-class sample, in partition order.
  std::vector<std::string> pool;
  for (int label : part.known) {
    auto it = part.samples.find(label);
    if (it == part.samples.end() || it->second.empty())
      throw CurationError("known class " + std::to_string(label) + " has no curated samples");
    for (const auto& s : it->second) pool.push_back(s.path);
  }

  std::unique_ptr<Generator> gen;
  int start_epoch = 0;
  std::int64_t restored_steps = 0;
  std::string restored_moments;
  if (job.resume_from) {
    LoadedCheckpoint ck = load_checkpoint(*job.resume_from, ext.feature_dim());
    if (ck.meta.generator.to_json() != job.generator.to_json())
      throw ConfigError("resume checkpoint generator config differs from the requested one");
    gen = std::move(ck.generator);
    start_epoch = ck.meta.epochs_completed;
    restored_steps = ck.meta.optimizer_steps;
    if (ck.meta.optimizer_sha256.empty()) throw IntegrityError("resume checkpoint has no optimizer state");
    restored_moments = read_verified(*job.resume_from / "optimizer.bin", ck.meta.optimizer_sha256);
    log->info("resuming from {} after epoch {}", job.resume_from->string(), start_epoch);
  } else {
    gen = std::make_unique<Generator>(job.generator);
  }

  nn::AdamW opt(gen->params(), nn::AdamWOptions{.lr = tc.lr, .weight_decay = tc.weight_decay});
  if (!restored_moments.empty()) {
    nn::ParamSet moments = moment_view(opt);
    decode_params(restored_moments, moments);
    restore_moments(opt, moments);
    opt.set_step_count(restored_steps);
  }

  const auto pool_size = static_cast<std::int64_t>(pool.size());
  std::int64_t steps_per_epoch = (pool_size + tc.batch_size - 1) / tc.batch_size;
  if (tc.max_steps_per_epoch > 0) steps_per_epoch = std::min(steps_per_epoch, tc.max_steps_per_epoch);
  const std::int64_t total_steps = steps_per_epoch * tc.epochs;

  fs::create_directories(job.out_dir);
  std::ofstream step_log(job.out_dir / "train_log.jsonl", std::ios::app);
  if (!step_log) throw DataError("cannot open training log in " + job.out_dir.string());

  SampleCache cache(fs::path(part.dataset_root), ext);
  const std::string ext_checksum = ext.parameter_checksum();
  TrainResult result;
  result.extractor_checksum = ext_checksum;

  CheckpointMeta meta;
  meta.train = tc;
  meta.surrogate = ext.id();
  meta.n = part.known.size();
  meta.m = part.m;

  for (int epoch = start_epoch; epoch < tc.epochs; ++epoch) {
    Rng rng(derive_seed(tc.seed, kEpochTag, static_cast<std::uint64_t>(epoch)));
    std::vector<std::int64_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
    rng.shuffle(order);

    double epoch_sum = 0;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      const std::int64_t begin = s * tc.batch_size;
      const std::int64_t end = std::min(pool_size, begin + tc.batch_size);
      std::vector<std::string> src_paths, tgt_paths;
      for (std::int64_t i = begin; i < end; ++i) {
        src_paths.push_back(pool[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
        const int label = part.known[rng.below(part.known.size())];
        const auto& cls = part.samples.at(label);
        tgt_paths.push_back(cls[rng.below(cls.size())].path);
      }
      const ImageBatch xs = cache.images(src_paths);
      const Tensor ft = cache.features(tgt_paths);

      gen->params().zero_grad();
      LossEvaluation L = latent_infection_loss(*gen, ext, xs, ft, tc.alpha, tc.delta_source, tc.norm_floor);
      const std::int64_t global_step = opt.step_count();
      const double lr = nn::cosine_lr(tc.lr, global_step, total_steps);

      if (L.max_perturbation > gen->config().epsilon + kBudgetSlack)
        throw NumericError("perturbation " + std::to_string(L.max_perturbation) + " exceeds budget");
      if (std::abs(L.values.total - (L.values.term_adv + tc.alpha * L.values.term_delta)) > kDecompositionTol)
        throw NumericError("loss decomposition mismatch");

      bool finite = std::isfinite(L.values.total);
      if (finite) {
        L.total.backward();
        finite = grads_finite(gen->params());
      }
      if (!finite) {
        const fs::path diag = job.out_dir / "diagnostic";
        meta.epochs_completed = epoch;
        save_checkpoint(diag, *gen, &opt, meta);
        json info = {{"epoch", epoch}, {"step", global_step}, {"sources", src_paths}, {"targets", tgt_paths},
                     {"term_adv", L.values.term_adv}, {"term_delta", L.values.term_delta}};
        write_file_atomic(diag / "batch.json", info.dump(2) + "\n");
        throw NumericError("non-finite loss or gradient at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(global_step) + "; state saved to " + diag.string());
      }
      opt.step(lr);

      StepRecord rec{epoch, global_step, L.values, lr};
      step_log << json{{"epoch", epoch},
                       {"step", global_step},
                       {"term_adv", L.values.term_adv},
                       {"term_delta", L.values.term_delta},
                       {"total", L.values.total},
                       {"lr", lr}}
                      .dump()
               << "\n";
      result.steps.push_back(rec);
      epoch_sum += L.values.total;
    }
    step_log.flush();
    result.epoch_loss.push_back(epoch_sum / static_cast<double>(steps_per_epoch));

    if (ext.parameter_checksum() != ext_checksum) throw NumericError("surrogate weights changed during training");

    meta.epochs_completed = epoch + 1;
    result.final_checkpoint = job.out_dir / "checkpoints" / epoch_dir_name(epoch + 1);
    save_checkpoint(result.final_checkpoint, *gen, &opt, meta);
    log->info("epoch {}/{} mean loss {:.6f}", epoch + 1, tc.epochs, result.epoch_loss.back());
  }
  if (result.final_checkpoint.empty()) {
    meta.epochs_completed = start_epoch;
    result.final_checkpoint = job.out_dir / "checkpoints" / epoch_dir_name(start_epoch);
    save_checkpoint(result.final_checkpoint, *gen, &opt, meta);
  }
  return result;
}

}  // namespace latinf
