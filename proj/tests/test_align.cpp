#include <gtest/gtest.h>

#include "insta/align.hpp"
#include "support/fixtures.hpp"
#include "support/margin.hpp"
#include "support/oracles.hpp"

using namespace insta;

namespace {

Eigen::VectorXd random_vec(Rng& rng, Eigen::Index n) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = 2 * rng.uniform() - 1;
  return v;
}

std::vector<std::string> instruction_texts(const MetaDataset& ds) {
  std::vector<std::string> out;
  for (const auto& t : ds.tasks())
    for (const auto& in : t.instructions) out.push_back(in.text);
  return out;
}

TrainConfig efficacy_config() {
  TrainConfig cfg;
  cfg.learning_rate = 3.0;
  cfg.epochs = 5;
  cfg.n_pos = 400;
  cfg.n_neg = 400;
  cfg.seed = 11;
  return cfg;
}

}  // namespace

TEST(Align, LossExamples) {
  auto id = ProjectionHead::identity(3);
  Eigen::VectorXd a(3), b(3), c(3);
  a << 1, 0, 0;
  b << 0, 1, 0;
  c << 0.5, std::sqrt(3.0) / 2, 0;
  EXPECT_DOUBLE_EQ(pair_loss(id, a, a, 1), 0.0);
  EXPECT_DOUBLE_EQ(pair_loss(id, a, b, 0), 0.0);
  EXPECT_NEAR(pair_loss(id, a, c, 1), 0.25, 1e-15);
  EXPECT_NEAR(pair_loss(id, a, -a, 1), 4.0, 1e-15);
}

TEST(Align, LossBounds) {
  Rng rng(3);
  for (int t = 0; t < 500; ++t) {
    ProjectionHead h{Eigen::MatrixXd::Random(6, 3)};
    const double l = pair_loss(h, random_vec(rng, 6), random_vec(rng, 6), int(rng.below(2)));
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 4.0 + 1e-12);
  }
}

TEST(Align, GradientMatchesFiniteDifferences) {
  EXPECT_LT(oracles::worst_gradient_error(42, 100, 8, 4, 1e-5), 1e-4);
  // Rectangular heads in both directions.
  EXPECT_LT(oracles::worst_gradient_error(43, 20, 4, 8, 1e-5), 1e-4);
  EXPECT_LT(oracles::worst_gradient_error(44, 20, 16, 3, 1e-5), 1e-4);
}

TEST(Align, AccumulatedGradientEqualsPairGrad) {
  Rng rng(8);
  ProjectionHead h{Eigen::MatrixXd::Random(5, 3)};
  const auto ea = random_vec(rng, 5), eb = random_vec(rng, 5);
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(5, 3);
  const double loss = accumulate_pair_grad(h, ea, eb, 1, acc);
  EXPECT_NEAR(loss, pair_loss(h, ea, eb, 1), 1e-15);
  EXPECT_LT((acc - pair_grad(h, ea, eb, 1)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Align, GradientVanishesAtPerfectPositive) {
  Rng rng(1);
  ProjectionHead h{Eigen::MatrixXd::Random(8, 4)};
  const auto e = random_vec(rng, 8);
  EXPECT_LT(pair_grad(h, e, e, 1).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Align, CosineScaleInvariance) {
  Rng rng(2);
  ProjectionHead h{Eigen::MatrixXd::Random(8, 4)};
  const auto ea = random_vec(rng, 8), eb = random_vec(rng, 8);
  EXPECT_NEAR(pair_cosine(h, 2 * ea, eb), pair_cosine(h, ea, eb), 1e-15);
}

TEST(Align, ZeroProjectionIsError) {
  ProjectionHead h{Eigen::MatrixXd::Zero(3, 2)};
  Eigen::VectorXd a = Eigen::VectorXd::Ones(3);
  EXPECT_THROW(pair_loss(h, a, a, 1), ZeroNormError);
}

TEST(Align, PairPolicy) {
  // Two NLI tasks and one QA task: NLI siblings must never be paired.
  std::vector<Task> tasks{
      fixtures::task("A", "NLI", Split::train, {"a one", "a two", "a three"}),
      fixtures::task("B", "NLI", Split::train, {"b one", "b two"}),
      fixtures::task("C", "QA", Split::train, {"c one", "c two"}),
      fixtures::task("E", "Eval", Split::eval, {"e one", "e two"}),
  };
  tasks[0].instructions.push_back(fixtures::instr("A", "A/x", "a excluded", InstructionRole::excluded));
  auto ds = MetaDataset::build("p", tasks);
  auto pairs = sample_pairs(ds, 5000, 5000, 5);
  ASSERT_EQ(pairs.size(), 10000u);
  EXPECT_TRUE(oracles::pair_policy_violations(ds, pairs).empty());
  std::size_t pos = 0;
  for (const auto& p : pairs) {
    const auto* a = ds.find_instruction(p.a);
    const auto* b = ds.find_instruction(p.b);
    ASSERT_TRUE(a && b);
    EXPECT_NE(a->id, b->id);
    EXPECT_NE(a->role, InstructionRole::excluded);
    EXPECT_NE(b->role, InstructionRole::excluded);
    const auto& ta = ds.task(a->task_id);
    const auto& tb = ds.task(b->task_id);
    EXPECT_EQ(ta.split, Split::train);
    EXPECT_EQ(tb.split, Split::train);
    if (ta.id == tb.id) {
      EXPECT_EQ(p.y, 1);
      EXPECT_EQ(p.origin, PairOrigin::same_task);
      ++pos;
    } else {
      EXPECT_EQ(p.y, 0);
      EXPECT_NE(ta.cluster_id, tb.cluster_id);
      EXPECT_EQ(p.origin, PairOrigin::cross_cluster);
    }
  }
  EXPECT_EQ(pos, 5000u);
}

TEST(Align, PairSamplingDeterministic) {
  auto ds = fixtures::four_clusters(1);
  auto a = sample_pairs(ds, 50, 50, 9), b = sample_pairs(ds, 50, 50, 9), c = sample_pairs(ds, 50, 50, 10);
  auto key = [](const std::vector<PairSample>& v) {
    std::string s;
    for (const auto& p : v) s += p.a + "|" + p.b + "|" + std::to_string(p.y) + ";";
    return s;
  };
  EXPECT_EQ(key(a), key(b));
  EXPECT_NE(key(a), key(c));
}

TEST(Align, DefaultPairCounts) {
  auto ds = fixtures::four_clusters(1, 3);
  auto pairs = sample_pairs(ds, PairSamplingOptions{});
  std::size_t pos = 0, neg = 0;
  for (const auto& p : pairs) (p.y ? pos : neg)++;
  EXPECT_EQ(pos, 36u);  // one per original instruction
  EXPECT_EQ(neg, 36u);
}

TEST(Align, ParaphraseIsPositivePartner) {
  std::vector<Task> tasks{fixtures::task("t1", "c1", Split::train, {"only definition one"}),
                          fixtures::task("t2", "c2", Split::train, {"only definition two"})};
  tasks[0].instructions.push_back(fixtures::instr("t1", "t1#aug0", "reworded definition one", InstructionRole::augmented));
  auto ds = MetaDataset::build("n", tasks);
  auto pairs = sample_pairs(ds, 10, 10, 1);
  std::size_t pos = 0;
  for (const auto& p : pairs) {
    if (p.y == 1) {
      EXPECT_EQ(p.a, "t1/i0");
      EXPECT_EQ(p.b, "t1#aug0");
      ++pos;
    }
  }
  EXPECT_EQ(pos, 10u);
}

TEST(Align, InsufficientPairs) {
  auto single = MetaDataset::build("s", {fixtures::task("a", "c1", Split::train, {"one"}),
                                        fixtures::task("b", "c2", Split::train, {"two"})});
  EXPECT_THROW(sample_pairs(single, PairSamplingOptions{}), InsufficientPairsError);
  auto one_cluster = MetaDataset::build("o", {fixtures::task("a", "c1", Split::train, {"one", "two"})});
  EXPECT_THROW(sample_pairs(one_cluster, PairSamplingOptions{}), InsufficientPairsError);
}

TEST(Align, ZeroEpochsReturnsIdentity) {
  auto ds = fixtures::four_clusters(1);
  ReferenceBackend b(64);
  Embedder e(b);
  TrainConfig cfg;
  cfg.epochs = 0;
  auto r = train_head(ds, e, cfg);
  EXPECT_TRUE(r.head.weights.isApprox(Eigen::MatrixXd::Identity(64, 64), 0.0));
  ASSERT_EQ(r.report.epochs.size(), 1u);
  EXPECT_EQ(r.report.best_epoch, 0u);
  const auto val = embed_pairs(r.val_pairs, e);
  EXPECT_DOUBLE_EQ(r.report.best_val_loss, mean_loss(ProjectionHead::identity(64), val));
}

TEST(Align, AbsurdLearningRateDiverges) {
  fixtures::TempDir dir;
  auto ds = fixtures::four_clusters(1);
  ReferenceBackend b(64);
  Embedder e(b);
  TrainConfig cfg;
  cfg.learning_rate = 1e6;
  EXPECT_THROW(train_head(ds, e, cfg), DivergenceError);
}

TEST(Align, TrainingIsDeterministic) {
  auto ds = fixtures::four_clusters(1);
  ReferenceBackend b(64);
  Embedder e(b);
  auto cfg = efficacy_config();
  cfg.n_pos = cfg.n_neg = 60;
  auto r1 = train_head(ds, e, cfg), r2 = train_head(ds, e, cfg);
  ASSERT_EQ(r1.report.epochs.size(), r2.report.epochs.size());
  for (std::size_t i = 0; i < r1.report.epochs.size(); ++i) {
    EXPECT_EQ(r1.report.epochs[i].train_loss, r2.report.epochs[i].train_loss);
    EXPECT_EQ(r1.report.epochs[i].val_loss, r2.report.epochs[i].val_loss);
  }
  EXPECT_EQ(serialize_head(r1.head), serialize_head(r2.head));
}

TEST(Align, BestCheckpointIsMinimumValidationLoss) {
  auto ds = fixtures::four_clusters(1);
  ReferenceBackend b(64);
  Embedder e(b);
  for (double lr : {0.5, 5.0, 40.0}) {
    auto cfg = efficacy_config();
    cfg.learning_rate = lr;
    cfg.n_pos = cfg.n_neg = 60;
    auto r = train_head(ds, e, cfg);
    for (const auto& ep : r.report.epochs) EXPECT_LE(r.report.best_val_loss, ep.val_loss);
    EXPECT_EQ(r.report.epochs[r.report.best_epoch].val_loss, r.report.best_val_loss);
    const auto val = embed_pairs(r.val_pairs, e);
    EXPECT_NEAR(mean_loss(r.head, val), r.report.best_val_loss, 1e-12);
  }
}

TEST(Align, TrainedHeadWidensHeldOutMargin) {
  const auto train = fixtures::four_clusters(1);
  const auto held_out = fixtures::four_clusters(2);
  // Held-out instructions are new texts over the same tasks.
  const auto tt = instruction_texts(train);
  for (const auto& t : instruction_texts(held_out)) EXPECT_EQ(std::count(tt.begin(), tt.end(), t), 0);
  ReferenceBackend b(256);
  Embedder e(b);
  auto r = train_head(train, e, efficacy_config());
  const auto before = fixtures::alignment_margin(held_out, e, ProjectionHead::identity(256));
  const auto after = fixtures::alignment_margin(held_out, e, r.head);
  EXPECT_GT(after.value(), before.value());
  EXPECT_GE(after.value() - before.value(), 0.05);
}

TEST(Align, AuxiliaryPairs) {
  fixtures::TempDir dir;
  fixtures::write_file(dir / "aux.jsonl", R"({"text_a":"the cat sat","text_b":"a cat was sitting","label":1,"source":"mrpc"})"
                                          "\n"
                                          R"({"text_a":"stock prices fell","text_b":"the weather is nice","label":0,"source":"qqp"})"
                                          "\n");
  auto aux = load_auxiliary_pairs(dir / "aux.jsonl");
  ASSERT_EQ(aux.size(), 2u);
  EXPECT_EQ(aux[0].origin, PairOrigin::auxiliary);
  EXPECT_EQ(aux[0].y, 1);
  EXPECT_EQ(aux[1].y, 0);
  EXPECT_EQ(aux[1].a, "aux:qqp:2:a");

  auto ds = fixtures::four_clusters(1);
  ReferenceBackend b(64);
  Embedder e(b);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.auxiliary_pairs_path = dir / "aux.jsonl";
  auto r = train_head(ds, e, cfg);
  EXPECT_EQ(r.report.auxiliary_pairs, 2u);
  EXPECT_EQ(r.report.train_pairs + r.report.val_pairs, 96u + 2u);

  fixtures::write_file(dir / "bad.jsonl", R"({"text_a":"x","text_b":"y","label":2,"source":"s"})" "\n");
  EXPECT_THROW(load_auxiliary_pairs(dir / "bad.jsonl"), SchemaError);
}

TEST(Align, HeadCheckpointRoundTrip) {
  fixtures::TempDir dir;
  ProjectionHead h{Eigen::MatrixXd::Random(5, 3)};
  save_head(h, dir / "head.bin");
  const auto bytes = fixtures::slurp(dir / "head.bin");
  EXPECT_EQ(bytes.substr(0, 8), "INSTAHDW");
  EXPECT_EQ(bytes.size(), 16u + 15u * 4u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 5);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 3);
  auto back = load_head(dir / "head.bin");
  EXPECT_TRUE(back.weights.cast<float>().cast<double>().isApprox(h.weights.cast<float>().cast<double>(), 0.0));
  EXPECT_EQ(head_id(back), head_id(h));
  EXPECT_THROW(deserialize_head("NOTAHEAD"), Error);
}

TEST(Align, ConfigPresets) {
  EXPECT_DOUBLE_EQ(TrainConfig::p3().learning_rate, 1e-6);
  EXPECT_DOUBLE_EQ(TrainConfig::niv2().learning_rate, 1e-5);
  EXPECT_EQ(TrainConfig{}.epochs, 5u);
  TrainConfig bad;
  bad.val_fraction = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}
