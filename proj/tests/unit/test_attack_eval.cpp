#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "latinf/attack_eval.hpp"
#include "latinf/errors.hpp"
#include "latinf/serialize.hpp"
#include "support.hpp"

using namespace latinf;
namespace fs = std::filesystem;

namespace {

GeneratorConfig gen_config(std::int64_t feature_dim) {
  GeneratorConfig c;
  c.base_width = 4;
  c.depth = 2;
  c.injection_dim = 6;
  c.feature_dim = feature_dim;
  c.init_seed = 3;
  return c;
}

struct AttackFixture {
  test::TempDir dir{"atk"};
  ModelHandle surrogate = test::tiny_model("sur", 41);
  ClassPartition partition;
  std::unique_ptr<Generator> gen;
  DatasetSplit test_split;

  AttackFixture() {
    test::write_small_dataset(dir / "data", 4, 3, 2);
    PartitionOptions o;
    o.n = 5;
    o.m_samples = 2;
    o.seed = 4;
    o.unknown_pool_size = 3;
    partition = build_partition(surrogate, dir / "data", o);
    gen = std::make_unique<Generator>(gen_config(surrogate.feature_dim()));
    test_split = scan_split(dir / "data", "test");
  }
};

ModelHandle mean_victim(const std::string& id, const Tensor& w, const Tensor& b) {
  return ModelHandle(id, ModelRole::kVictim, test::spec_for(3, 8), std::make_shared<test::MeanNet>(3, w, b));
}

EvalRecord rec(const std::string& victim, int y, int y_t, int pred, const std::string& sur = "s",
               PartitionTag tag = PartitionTag::kKnown) {
  EvalRecord r;
  r.source_path = "p/" + std::to_string(y);
  r.y = y;
  r.y_t = y_t;
  r.tag = tag;
  r.surrogate = sur;
  r.victim_id = victim;
  r.y_pred = pred;
  r.targeted_hit = pred == y_t;
  r.untargeted_hit = pred != y;
  return r;
}

// n records for one victim with exactly hits targeted successes.
std::vector<EvalRecord> hits_of(const std::string& victim, int n, int hits, const std::string& sur = "s") {
  std::vector<EvalRecord> out;
  for (int i = 0; i < n; ++i) out.push_back(rec(victim, 0, 1, i < hits ? 1 : 2, sur));
  return out;
}

}  // namespace

TEST_CASE("partition tags and source collection") {
  for (auto t : {PartitionTag::kKnown, PartitionTag::kUnknown, PartitionTag::kClean})
    CHECK(parse_partition_tag(to_string(t)) == t);
  CHECK_THROWS_AS(parse_partition_tag("seen"), ConfigError);

  test::TempDir dir("src");
  test::write_small_dataset(dir.path(), 1, 1, 3);
  const DatasetSplit s = scan_split(dir.path(), "test");
  CHECK(collect_sources(s).size() == 30);
  const auto one = collect_sources(s, 1);
  REQUIRE(one.size() == 10);
  for (int c = 0; c < 10; ++c) CHECK(one[static_cast<std::size_t>(c)].label == c);
  CHECK(collect_sources(s, 7).size() == 30);
}

TEST_CASE("crafted set cardinality, targets and budget") {
  AttackFixture fx;
  std::vector<SourceImage> sources = collect_sources(fx.test_split, 1);
  sources.resize(5);
  const std::set<int> known(fx.partition.known.begin(), fx.partition.known.end());

  SUBCASE("two targets per source") {
    CraftOptions o;
    o.targets_per_source = 2;
    o.seed = 8;
    const AdversarialSet set = craft_set(*fx.gen, fx.surrogate, sources, fx.partition, o);
    CHECK(set.rows.size() == 10);
    CHECK(set.images.size() == 10);
    CHECK(set.sources.size() == 10);
    for (const auto& r : set.rows) {
      CHECK(r.y_t != r.y);
      CHECK(known.contains(r.y_t));
      CHECK(r.target_path == fx.partition.targets.known.at(r.y_t).path);
    }
  }
  SUBCASE("every known class except the source label") {
    const AdversarialSet set = craft_set(*fx.gen, fx.surrogate, sources, fx.partition, CraftOptions{});
    std::size_t expected = 0;
    for (const auto& s : sources) expected += known.size() - (known.contains(s.label) ? 1 : 0);
    CHECK(set.rows.size() == expected);
    CHECK(max_perturbation(set) <= fx.gen->config().epsilon + 1e-12);
    CHECK(set.images.in_unit_interval());
    const AdversarialSet clean = clean_counterpart(set);
    CHECK(clean.tag == PartitionTag::kClean);
    CHECK(max_perturbation(clean) == 0.0);
  }
  SUBCASE("unknown targets come from the held-out pool") {
    CraftOptions o;
    o.mode = PartitionTag::kUnknown;
    const AdversarialSet set = craft_set(*fx.gen, fx.surrogate, sources, fx.partition, o);
    CHECK(set.tag == PartitionTag::kUnknown);
    CHECK_FALSE(set.rows.empty());
    for (const auto& r : set.rows) {
      CHECK_FALSE(known.contains(r.y_t));
      const auto& pool = fx.partition.targets.unknown.at(r.y_t);
      CHECK(std::any_of(pool.begin(), pool.end(), [&](const RankedSample& s) { return s.path == r.target_path; }));
    }
  }
}

TEST_CASE("crafting is deterministic and checks its inputs") {
  AttackFixture fx;
  const std::vector<SourceImage> sources = collect_sources(fx.test_split, 1);
  CraftOptions o;
  o.mode = PartitionTag::kUnknown;
  o.seed = 12;
  o.targets_per_source = 2;
  o.chunk = 7;
  const AdversarialSet a = craft_set(*fx.gen, fx.surrogate, sources, fx.partition, o);
  o.chunk = 32;
  const AdversarialSet b = craft_set(*fx.gen, fx.surrogate, sources, fx.partition, o);
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    CHECK(a.rows[i].y_t == b.rows[i].y_t);
    CHECK(a.rows[i].target_path == b.rows[i].target_path);
  }
  CHECK(max_abs_diff(a.images.tensor(), b.images.tensor()) < 1e-12);
  CHECK(craft_set(*fx.gen, fx.surrogate, sources, fx.partition, o).images.tensor() == b.images.tensor());

  CHECK(craft_set(*fx.gen, fx.surrogate, {}, fx.partition, o).images.size() == 0);

  CraftOptions clean;
  clean.mode = PartitionTag::kClean;
  CHECK_THROWS_AS(craft_set(*fx.gen, fx.surrogate, sources, fx.partition, clean), ContractError);

  ClassPartition broken = fx.partition;
  broken.targets.known.erase(broken.known.front());
  CHECK_THROWS_AS(craft_set(*fx.gen, fx.surrogate, sources, broken, CraftOptions{}), ContractError);

  Generator wide(gen_config(fx.surrogate.feature_dim() + 1));
  CHECK_THROWS_AS(craft_set(wide, fx.surrogate, sources, fx.partition, CraftOptions{}), ContractError);
}

TEST_CASE("evaluation against a degenerate victim") {
  AttackFixture fx;
  const std::vector<SourceImage> sources = collect_sources(fx.test_split, 1);
  const AdversarialSet set = craft_set(*fx.gen, fx.surrogate, sources, fx.partition, CraftOptions{});
  // All logits tie, so every prediction is class 0.
  const std::vector<ModelHandle> victims{mean_victim("flat", Tensor({10, 3}, 0.0), Tensor({10}, 0.0)),
                                         fx.surrogate.with_role(ModelRole::kVictim)};
  const auto records = evaluate(set, victims);
  REQUIRE(records.size() == 2 * set.rows.size());

  std::int64_t zero_targets = 0;
  for (const auto& r : set.rows) zero_targets += r.y_t == 0 ? 1 : 0;
  const std::span<const EvalRecord> flat(records.data(), set.rows.size());
  const TasrCell c = summarize(flat);
  CHECK(c.victim == "flat");
  CHECK(c.n == static_cast<std::int64_t>(set.rows.size()));
  CHECK(c.targeted_hits == zero_targets);
  for (const auto& r : flat) CHECK(r.y_pred == 0);

  for (const auto& r : records) {
    CHECK(r.targeted_hit == (r.y_pred == r.y_t));
    CHECK(r.untargeted_hit == (r.y_pred != r.y));
    if (r.targeted_hit) CHECK(r.untargeted_hit);
  }
}

TEST_CASE("summaries and the transfer matrix") {
  SUBCASE("three of ten") {
    const auto r = hits_of("v", 10, 3);
    const TasrCell c = summarize(r);
    CHECK(c.n == 10);
    CHECK(c.tasr == doctest::Approx(0.3));
    CHECK(c.usr == doctest::Approx(1.0));
    CHECK(summarize(std::span<const EvalRecord>{}).tasr == 0.0);
  }
  SUBCASE("row averages over victims") {
    std::vector<EvalRecord> all;
    for (auto& r : hits_of("v1", 10, 3, "a")) all.push_back(r);
    for (auto& r : hits_of("v2", 4, 4, "a")) all.push_back(r);
    for (auto& r : hits_of("v1", 5, 0, "b")) all.push_back(r);
    const TransferMatrix m = transfer_matrix(all);
    CHECK(m.victims == std::vector<std::string>{"v1", "v2"});
    REQUIRE(m.rows.size() == 2);
    CHECK(m.rows[0].avg == doctest::Approx((0.3 + 1.0) / 2));
    CHECK(m.rows[1].avg == 0.0);
    CHECK(m.rows[1].cells.size() == 1);
    CHECK(m.cells().size() == 3);

    const std::string table = render_matrix(m);
    CHECK(table.find("| v1 | v2 | Avg |") != std::string::npos);
    CHECK(table.find("| a | known | 30.00 | 100.00 | 65.00 |") != std::string::npos);
    CHECK(table.find("| b | known | 0.00 | - | 0.00 |") != std::string::npos);
    CHECK_THROWS_AS(transfer_matrix(std::span<const EvalRecord>{}), ContractError);
  }
  SUBCASE("hand grid with tags kept apart") {
    std::vector<EvalRecord> all{rec("v", 0, 1, 1), rec("v", 0, 2, 0), rec("v", 0, 1, 1, "s", PartitionTag::kUnknown)};
    const TransferMatrix m = transfer_matrix(all);
    REQUIRE(m.rows.size() == 2);
    CHECK(m.rows[0].cells.at("v").tasr == 0.5);
    CHECK(m.rows[1].tag == PartitionTag::kUnknown);
    CHECK(m.rows[1].cells.at("v").tasr == 1.0);
  }
}

TEST_CASE("per-class rates and histogram") {
  std::vector<EvalRecord> all;
  for (int i = 0; i < 4; ++i) all.push_back(rec("v", 0, 3, i < 2 ? 3 : 0));  // class 3: 0.5
  for (int i = 0; i < 3; ++i) all.push_back(rec("v", 0, 5, 5));              // class 5: 1.0
  all.push_back(rec("v", 0, 7, 0));                                          // class 7: 0.0
  const PerClassReport rep = per_class_tasr(all, 10);
  REQUIRE(rep.classes.size() == 3);
  CHECK(rep.classes[0].class_id == 3);
  CHECK(rep.classes[0].tasr == 0.5);
  CHECK(rep.classes[1].tasr == 1.0);
  CHECK(rep.classes[2].tasr == 0.0);
  CHECK(rep.histogram == std::vector<std::int64_t>{1, 0, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK_THROWS_AS(per_class_tasr(all, 0), ContractError);
}

TEST_CASE("per-class rates agree with a direct count over 20 classes") {
  Rng rng(17);
  std::vector<EvalRecord> all;
  std::map<int, std::pair<int, int>> oracle;
  for (int i = 0; i < 600; ++i) {
    const int y = static_cast<int>(rng.below(20));
    const int t = static_cast<int>(rng.below(20));
    const int p = static_cast<int>(rng.below(20));
    all.push_back(rec("v", y, t, p));
    oracle[t].first += 1;
    oracle[t].second += p == t ? 1 : 0;
  }
  const PerClassReport rep = per_class_tasr(all, 4);
  REQUIRE(rep.classes.size() == oracle.size());
  std::int64_t binned = 0;
  for (auto b : rep.histogram) binned += b;
  CHECK(binned == static_cast<std::int64_t>(oracle.size()));
  for (const auto& c : rep.classes) {
    const auto [n, h] = oracle.at(*c.class_id);
    CHECK(c.n == n);
    CHECK(c.tasr == doctest::Approx(static_cast<double>(h) / n));
  }
}

TEST_CASE("tables round trip") {
  std::vector<EvalRecord> all{rec("v", 1, 2, 2), rec("w", 3, 4, 3, "x", PartitionTag::kUnknown)};
  const auto back = parse_records_tsv(records_tsv(all));
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].source_path == all[i].source_path);
    CHECK(back[i].y_t == all[i].y_t);
    CHECK(back[i].tag == all[i].tag);
    CHECK(back[i].victim_id == all[i].victim_id);
    CHECK(back[i].targeted_hit == all[i].targeted_hit);
    CHECK(back[i].untargeted_hit == all[i].untargeted_hit);
  }
  CHECK_THROWS_AS(parse_records_tsv("nope\n"), DataError);
  CHECK_THROWS_AS(parse_records_tsv(records_tsv(all) + "a\tb\n"), DataError);
  CHECK_THROWS_AS(parse_records_tsv(records_tsv(all) + "a\tx\t1\tknown\ts\tv\t1\t1\t0\n"), DataError);

  TasrCell c;
  c.surrogate = "s";
  c.victim = "v";
  c.n = 3;
  c.tasr = 1.0 / 3.0;
  c.class_id = 9;
  const std::string tsv = report_tsv(std::vector<TasrCell>{c});
  CHECK(tsv.rfind("surrogate\tvictim\tpartition_tag\tclass_id\tn\ttasr\tusr\n", 0) == 0);
  const auto row = tsv.substr(tsv.find('\n') + 1);
  CHECK(row.find("s\tv\tknown\t9\t3\t") == 0);
  const auto tasr_field = row.substr(std::string("s\tv\tknown\t9\t3\t").size());
  CHECK(std::stod(tasr_field.substr(0, tasr_field.find('\t'))) == c.tasr);
}

TEST_CASE("adversarial sets survive a disk round trip and skip unreadable images") {
  AttackFixture fx;
  const std::vector<SourceImage> sources = collect_sources(fx.test_split, 1);
  CraftOptions o;
  o.targets_per_source = 1;
  AdversarialSet set = craft_set(*fx.gen, fx.surrogate, sources, fx.partition, o);
  write_adversarial_set(set, fx.dir / "set");
  CHECK(set.rows[0].output_path == "images/000000.ppm");

  const AdversarialSet back = read_adversarial_set(fx.dir / "set", 3, 32, 32);
  REQUIRE(back.rows.size() == set.rows.size());
  CHECK(back.surrogate == "sur");
  CHECK(back.tag == PartitionTag::kKnown);
  for (std::size_t i = 0; i < set.rows.size(); ++i) {
    CHECK(back.rows[i].source_path == set.rows[i].source_path);
    CHECK(back.rows[i].y_t == set.rows[i].y_t);
    CHECK(back.rows[i].seed == set.rows[i].seed);
  }
  for (std::int64_t i = 0; i < set.images.tensor().numel(); ++i)
    CHECK(std::abs(back.images.tensor()[i] - set.images.tensor()[i]) <= 0.5 / 255 + 1e-12);

  std::ofstream(fx.dir / "set" / set.rows[2].output_path, std::ios::trunc) << "P6\n32 32\n255\n";
  std::vector<std::string> skipped;
  const AdversarialSet partial = read_adversarial_set(fx.dir / "set", 3, 32, 32, &skipped);
  CHECK(partial.rows.size() == set.rows.size() - 1);
  CHECK(skipped == std::vector<std::string>{set.rows[2].output_path});

  CHECK_THROWS_AS(read_adversarial_set(fx.dir / "nothing", 3, 32, 32), DataError);
  write_file_atomic(fx.dir / "set" / "pairs.tsv", "wrong header\n");
  CHECK_THROWS_AS(read_adversarial_set(fx.dir / "set", 3, 32, 32), DataError);
}

TEST_CASE("MI-FGSM on a mean-brightness model moves each channel by the budget") {
  // d logit_t / d pixel has the sign of W[t, channel] everywhere.
  Tensor w({3, 3}, std::vector<double>{1, -1, 0, -2, 0.5, 3, 0, 0, 0});
  const ModelHandle m = mean_victim("m", w, Tensor({3}, 0.0));
  Rng rng(5);
  const ImageBatch x(test::random_batch(rng, 2, 3, 8, 8));
  const std::vector<int> targets{0, 1};
  const double eps = 8.0 / 255.0;
  for (int steps : {1, 2, 3, 10}) {
    const ImageBatch adv = mi_fgsm_targeted(m, x, targets, MiOptions{eps, steps, 1.0, 0.0});
    for (std::int64_t b = 0; b < 2; ++b)
      for (std::int64_t c = 0; c < 3; ++c) {
        const double s = w[targets[static_cast<std::size_t>(b)] * 3 + c];
        const double dir = s > 0 ? 1.0 : (s < 0 ? -1.0 : 0.0);
        for (std::int64_t k = 0; k < 64; ++k) {
          const std::int64_t i = (b * 3 + c) * 64 + k;
          const double want = std::clamp(x.tensor()[i] + dir * eps, 0.0, 1.0);
          CHECK(std::abs(adv.tensor()[i] - want) < 1e-12);
        }
      }
  }
  // Row 2 of W is zero: no gradient, no movement.
  const std::vector<int> dead{2, 2};
  CHECK(mi_fgsm_targeted(m, x, dead, MiOptions{eps, 3}).tensor() == x.tensor());
}

TEST_CASE("MI-FGSM follows the momentum recurrence for a few steps") {
  const ModelHandle m("v", ModelRole::kVictim, test::spec_for(1, 8), test::tiny_net(33, 4, 1));
  Rng rng(8);
  const ImageBatch x(test::random_batch(rng, 2, 1, 8, 8));
  const std::vector<int> targets{3, 1};
  for (int steps = 1; steps <= 3; ++steps) {
    for (double mu : {0.0, 0.5, 1.0}) {
      const double eps = 16.0 / 255.0;
      const double step = eps / steps;
      Tensor cur = x.tensor(), g(cur.shape(), 0.0);
      for (int s = 0; s < steps; ++s) {
        ag::Var v(cur, true);
        ag::sum(ag::gather_rows(m.logits(v), targets)).backward();
        const Tensor grad = v.grad();
        for (std::int64_t b = 0; b < 2; ++b) {
          double l1 = 0;
          for (std::int64_t k = 0; k < 64; ++k) l1 += std::abs(grad[b * 64 + k]);
          for (std::int64_t k = 0; k < 64; ++k) {
            const auto i = b * 64 + k;
            g[i] = mu * g[i] + grad[i] / l1;
            const double moved = cur[i] + step * (g[i] > 0 ? 1 : (g[i] < 0 ? -1 : 0));
            cur[i] = std::min(std::min(1.0, x.tensor()[i] + eps), std::max(std::max(0.0, x.tensor()[i] - eps), moved));
          }
        }
      }
      const ImageBatch adv = mi_fgsm_targeted(m, x, targets, MiOptions{eps, steps, mu, 0.0});
      for (std::int64_t i = 0; i < cur.numel(); ++i) CHECK(adv.tensor()[i] == doctest::Approx(cur[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("MI-FGSM stays inside the budget and the unit interval") {
  const ModelHandle m("v", ModelRole::kVictim, test::spec_for(3, 8), test::tiny_net(34, 5, 3));
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = static_cast<std::int64_t>(1 + rng.below(3));
    const ImageBatch x(test::random_batch(rng, n, 3, 8, 8));
    std::vector<int> t;
    for (std::int64_t i = 0; i < n; ++i) t.push_back(static_cast<int>(rng.below(5)));
    MiOptions o;
    o.eps = rng.uniform(0.5, 32.0) / 255.0;
    o.steps = static_cast<int>(1 + rng.below(4));
    o.step_size = trial % 2 == 0 ? 0.0 : o.eps;
    const ImageBatch adv = mi_fgsm_targeted(m, x, t, o);
    CHECK(adv.in_unit_interval());
    double worst = 0;
    for (std::int64_t i = 0; i < x.tensor().numel(); ++i)
      worst = std::max(worst, std::abs(adv.tensor()[i] - x.tensor()[i]));
    CHECK(worst <= o.eps + 1e-12);
  }
}

TEST_CASE("MI-FGSM argument checks") {
  const ModelHandle m("v", ModelRole::kVictim, test::spec_for(3, 8), test::tiny_net(34, 5, 3));
  const ImageBatch x(Tensor({1, 3, 8, 8}, 0.5));
  const std::vector<int> ok{1}, bad{5}, two{1, 2};
  CHECK_THROWS_AS(mi_fgsm_targeted(m, x, ok, MiOptions{0.0, 10}), ContractError);
  CHECK_THROWS_AS(mi_fgsm_targeted(m, x, ok, MiOptions{0.1, 0}), ContractError);
  CHECK_THROWS_AS(mi_fgsm_targeted(m, x, bad), ContractError);
  CHECK_THROWS_AS(mi_fgsm_targeted(m, x, two), ContractError);
  MiOptions neg;
  neg.step_size = -1;
  CHECK_THROWS_AS(mi_fgsm_targeted(m, x, ok, neg), ContractError);
  CHECK(mi_fgsm_targeted(m, ImageBatch::empty(3, 8, 8), std::vector<int>{}).size() == 0);
}
