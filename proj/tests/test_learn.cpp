#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fixtures.hpp"
#include "helpers.hpp"
#include "kamal/learn/evaluate.hpp"
#include "kamal/learn/joint.hpp"
#include "kamal/learn/layerwise.hpp"
#include "reference.hpp"

using namespace kamal;
using kamal::test::least_squares_optimum;
using kamal::test::random_tensor;

namespace {

const NonParam kReluPool{Activation::relu, 2, 2};

LayerSpec conv3(std::size_t in, std::size_t out) {
  LayerSpec l;
  l.kind = LayerKind::conv;
  l.in_ch = in;
  l.out_ch = out;
  l.kernel = 3;
  l.pad = 1;
  return l;
}

StagePairFn pairs_of(const Tensor& x, const Tensor& y) {
  return [&x, &y](std::span<const std::size_t> idx) { return std::make_pair(x.gather(idx), y.gather(idx)); };
}

TrainHyper stage_hyper(std::size_t epochs) {
  TrainHyper h;
  h.epochs = epochs;
  h.batch_size = 20;
  h.sgd.lr = 0.3f;
  h.sgd.weight_decay = 0.0f;
  h.seed = 3;
  return h;
}

// Network with no hidden layers whose scores are the constant `bias`.
Network constant_net(std::size_t in_ch, const std::vector<float>& bias) {
  Network n = build_network(conv_classifier_spec({in_ch, 1, 1}, {}, 0, bias.size()), Rng(1));
  n.layer(1).weight.value.fill(0.0f);
  n.layer(1).bias.value = Tensor({bias.size()}, bias);
  return n;
}

}  // namespace

TEST(LayerwiseStage, MatchesLeastSquaresOptimum) {
  const std::size_t N = 200;
  const Tensor x = random_tensor({N, 3, 8, 8}, 1);
  const Tensor known_w = random_tensor({4, 3, 3, 3}, 2, -0.5f, 0.5f);
  const Tensor known_b = random_tensor({4}, 3, -0.2f, 0.2f);
  const ref::D h = ref::nonparam(ref::D(x), kReluPool);
  Tensor y = ops::conv2d(ops::nonparam(x, kReluPool), known_w, known_b, 1, 1);
  const Tensor noise = random_tensor(y.shape(), 4, -0.1f, 0.1f);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += noise[i];
  const double opt = least_squares_optimum(h, y);
  ASSERT_GT(opt, 0.01);
  const TrainHyper hp = stage_hyper(60);
  const auto r = layerwise_stage(2, pairs_of(x, y), N, conv3(3, 4), kReluPool, 27, false, hp, Rng(5));
  EXPECT_GE(r.final_loss, opt - 1e-6);
  EXPECT_NEAR(r.final_loss, opt, 1e-3) << "initial " << r.initial_loss;
}

TEST(LayerwiseStage, ZeroTargetRealizable) {
  const Tensor x = random_tensor({40, 2, 6, 6}, 6);
  const Tensor y({40, 3, 3, 3});
  const TrainHyper hp = stage_hyper(300);
  const auto r = layerwise_stage(2, pairs_of(x, y), 40, conv3(2, 3), kReluPool, 18, false, hp, Rng(7));
  EXPECT_LT(r.final_loss, 1e-6);
}

TEST(LayerwiseStage, FamRecoversNegativeChannel) {
  // Channel 0 positive, channel 1 entirely negative. The target is built
  // from x0 - x1; relu erases x1 unless FAM folds it into channel 0.
  const std::size_t N = 80;
  Tensor x = random_tensor({N, 2, 6, 6}, 8, 0.2f, 1.0f);
  Tensor mixed({N, 1, 6, 6});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < 36; ++i) {
      x[(n * 2 + 1) * 36 + i] *= -1.0f;
      mixed[n * 36 + i] = x[n * 2 * 36 + i] - x[(n * 2 + 1) * 36 + i];
    }
  const Tensor y = ops::conv2d(ops::nonparam(mixed, kReluPool), random_tensor({2, 1, 3, 3}, 9), Tensor({2}), 1, 1);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto off = layerwise_stage(2, pairs_of(x, y), N, conv3(2, 2), kReluPool, 18, false, stage_hyper(30), Rng(seed));
    const auto on = layerwise_stage(2, pairs_of(x, y), N, conv3(2, 2), kReluPool, 18, true, stage_hyper(30), Rng(seed));
    ASSERT_TRUE(on.fam.has_value());
    EXPECT_LT(on.final_loss, off.final_loss) << "seed " << seed;
    EXPECT_LT(on.fam->value.at(0, 1), 0.0f) << "seed " << seed;
  }
}

TEST(LayerwiseStage, IdentityFamLeavesInitialLossBitwise) {
  const Tensor x = random_tensor({16, 3, 6, 6}, 11);
  const Tensor y = random_tensor({16, 4, 3, 3}, 12);
  const auto off = layerwise_stage(2, pairs_of(x, y), 16, conv3(3, 4), kReluPool, 27, false, stage_hyper(0), Rng(13));
  const auto on = layerwise_stage(2, pairs_of(x, y), 16, conv3(3, 4), kReluPool, 27, true, stage_hyper(0), Rng(13));
  EXPECT_EQ(on.initial_loss, off.initial_loss);
  EXPECT_EQ(on.fam->value, identity_matrix(3));
}

TEST(LayerwiseStage, RejectsShapeMismatchAndFamOnFirstLayer) {
  const Tensor x = random_tensor({4, 3, 6, 6}, 14);
  const Tensor bad({4, 4, 2, 2});
  EXPECT_THROW(layerwise_stage(2, pairs_of(x, bad), 4, conv3(3, 4), kReluPool, 27, false, stage_hyper(1), Rng(1)),
               ShapeError);
  EXPECT_THROW(layerwise_stage(1, pairs_of(x, bad), 4, conv3(3, 4), {}, 27, true, stage_hyper(1), Rng(1)), ConfigError);
}

namespace {

struct Fixture {
  std::vector<Network> teachers;
  TransferSet transfer;
  LabeledSet test;
  ClassSplit split;
  LabelMap map;
  NetworkSpec student_spec;
};

Fixture small_fixture(std::size_t n_teachers) {
  Fixture f;
  const std::array<std::size_t, 3> img{3, 12, 12};
  const int classes = static_cast<int>(2 * n_teachers);
  const LabeledSet all = gen_synthetic(classes, 12, img, 0.08f, 21);
  f.test = gen_synthetic(classes, 6, img, 0.08f, 21, 12);
  f.split = make_class_split(classes, n_teachers, 22);
  const auto parts = split_classes(all, f.split);
  const NetworkSpec t = conv_classifier_spec(img, {4, 6}, 12, 2);
  for (std::size_t i = 0; i < n_teachers; ++i) {
    TrainHyper h;
    h.epochs = 3;
    h.batch_size = 8;
    h.seed = i;
    f.teachers.push_back(train_classifier(build_network(t, Rng(100 + i)), parts[i], {}, h).first);
  }
  f.transfer = make_transfer_set(parts, 23);
  f.map = LabelMap::from_teachers(f.split.parts);
  f.student_spec = make_student_spec(t, n_teachers, default_width_ratio(n_teachers), f.map.width());
  return f;
}

TrainHyper quick(std::size_t epochs, std::uint64_t seed = 1) {
  TrainHyper h;
  h.epochs = epochs;
  h.batch_size = 8;
  h.seed = seed;
  return h;
}

}  // namespace

TEST(RunLayerwise, StagesDeterminismAndTeachersUntouched) {
  const Fixture f = small_fixture(2);
  const std::vector<Network> before = f.teachers;
  const FeatureBank bank(f.teachers, f.transfer);
  const auto plan = AmalgamPlan::make(AmalgamMode::dfa, f.teachers[0].spec, 2, default_width_ratio(2));
  const auto a = run_layerwise(bank, plan, f.student_spec, true, quick(3), quick(3), 9);
  const auto b = run_layerwise(bank, plan, f.student_spec, true, quick(3), quick(3), 9);
  const std::size_t L = f.student_spec.depth();
  EXPECT_EQ(a.stages.size(), L - 1);
  EXPECT_EQ(a.amalgams.size(), L - 1);
  EXPECT_TRUE(a.student.same_values(b.student));
  for (const auto& s : a.stages) EXPECT_LT(s.final_loss, s.initial_loss) << "layer " << s.layer_index;
  for (std::size_t i = 0; i < 2; ++i) EXPECT_TRUE(f.teachers[i].same_values(before[i]));
  // Classifier keeps its random init; FAM sits on layers 2..L-1.
  const Network init = build_network(f.student_spec, Rng(9, 0x73747564));
  EXPECT_EQ(a.student.layer(L).weight.value, init.layer(L).weight.value);
  EXPECT_FALSE(a.student.layer(1).fam.has_value());
  for (std::size_t l = 2; l < L; ++l) EXPECT_TRUE(a.student.layer(l).fam.has_value());
  EXPECT_EQ(count_params(a.student), count_params(f.student_spec, true));
}

TEST(RunLayerwise, PlanWidthMismatchRejected) {
  const Fixture f = small_fixture(2);
  const FeatureBank bank(f.teachers, f.transfer);
  const auto plan = AmalgamPlan::make(AmalgamMode::dfa, f.teachers[0].spec, 2, 0.9);
  EXPECT_THROW(run_layerwise(bank, plan, f.student_spec, false, quick(1), quick(1), 1), ConfigError);
}

TEST(Joint, ZeroEpochsLeaveStudentBitwise) {
  const Fixture f = small_fixture(2);
  const FeatureBank bank(f.teachers, f.transfer);
  Network s = build_network(f.student_spec, Rng(4));
  add_fam(s);
  const auto [out, log] = joint_finetune(s, bank, f.map, quick(0));
  EXPECT_TRUE(out.same_values(s));
  EXPECT_TRUE(log.records.empty());
}

TEST(Joint, ConstantTeacherScoresAreLearned) {
  const Tensor img = random_tensor({64, 2, 1, 1}, 30, 0.0f, 1.0f);
  const std::vector<Network> teachers{constant_net(2, {1.5f, -0.5f}), constant_net(2, {0.25f, 2.0f})};
  const TransferSet transfer{img};
  const FeatureBank bank(teachers, transfer);
  const LabelMap map = LabelMap::from_teachers(std::vector<std::vector<int>>{{0, 1}, {2, 3}});
  NetworkSpec spec = conv_classifier_spec({2, 1, 1}, {}, 8, 4);
  Network s = build_network(spec, Rng(31));
  const double initial = ops::l2_loss(scores(s, img), bank.scores());
  TrainHyper h = quick(40);
  h.sgd.lr = 0.05f;
  const auto [out, log] = joint_finetune(s, bank, map, h);
  const double final_loss = ops::l2_loss(scores(out, img), bank.scores());
  EXPECT_LT(final_loss, 0.01 * initial);
  ASSERT_EQ(log.split("train").size(), 40u);
}

TEST(Joint, LogsOneRowPerEpochAndSplit) {
  const Fixture f = small_fixture(2);
  const FeatureBank bank(f.teachers, f.transfer);
  const LabeledSet train_view = gen_synthetic(4, 2, {3, 12, 12}, 0.08f, 21);
  EvalContext ctx{nullptr, &f.test, f.split.parts};
  const auto [out, log] = joint_finetune(build_network(f.student_spec, Rng(5)), bank, f.map, quick(3), &ctx);
  ASSERT_EQ(log.split("train").size(), 3u);
  ASSERT_EQ(log.split("test").size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_EQ(log.split("test")[e].epoch, e + 1);
  (void)train_view;
}

TEST(Joint, RejectsWrongWidth) {
  const Fixture f = small_fixture(2);
  const FeatureBank bank(f.teachers, f.transfer);
  const auto spec = make_student_spec(f.teachers[0].spec, 2, 0.6, 5);
  EXPECT_THROW(joint_finetune(build_network(spec, Rng(1)), bank, f.map, quick(1)), ConfigError);
}

TEST(Kd, SelfDistillationSitsAtEntropyFloor) {
  const Fixture f = small_fixture(2);
  const Network& t = f.teachers[0];
  const Tensor x = f.transfer.images;
  const Tensor z = scores(t, x);
  const std::vector<ops::Block> blocks{{0, 2}};
  const Tensor q = ops::block_softmax(z, blocks, 1.0f);
  double entropy = 0.0;
  for (float p : q.data()) entropy -= p > 0 ? static_cast<double>(p) * std::log(p) : 0.0;
  entropy /= static_cast<double>(x.dim(0));
  const double copy = ops::soft_cross_entropy(z, q, blocks, 1.0f);
  EXPECT_NEAR(copy, entropy, 1e-4);
  const double random = ops::soft_cross_entropy(scores(build_network(t.spec, Rng(77)), x), q, blocks, 1.0f);
  EXPECT_LT(copy, random);
}

TEST(Kd, BlockSoftmaxRowsSumToOne) {
  const Tensor z = random_tensor({10, 7}, 40, -5.0f, 5.0f);
  const std::vector<ops::Block> blocks{{0, 3}, {3, 4}};
  const Tensor q = ops::block_softmax(z, blocks, 4.0f);
  for (std::size_t n = 0; n < 10; ++n)
    for (const auto& b : blocks) {
      double s = 0.0;
      for (std::size_t j = b.begin; j < b.begin + b.width; ++j) s += q.at(n, j);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Kd, TrainsAndRejectsBadTemperature) {
  const Fixture f = small_fixture(2);
  const FeatureBank bank(f.teachers, f.transfer);
  KdOptions kd;
  const auto [out, log] = kd_baseline(f.student_spec, bank, f.map, kd, quick(4), 3);
  EXPECT_FALSE(out.has_fam());
  const auto tr = log.split("train");
  ASSERT_EQ(tr.size(), 4u);
  EXPECT_LT(tr.back().loss, tr.front().loss);
  kd.temperature = 0.0f;
  EXPECT_THROW(kd_baseline(f.student_spec, bank, f.map, kd, quick(1), 3), ConfigError);
}

TEST(Ensemble, ConcatenatedArgmax) {
  const std::vector<Network> t{constant_net(1, {0.2f, 0.8f}), constant_net(1, {0.6f, 0.4f})};
  const LabelMap map = LabelMap::from_teachers(std::vector<std::vector<int>>{{0, 1}, {2, 3}});
  const Tensor x({3, 1, 1, 1});
  for (int p : ensemble_predict(t, x, map)) EXPECT_EQ(p, 1);
  const std::vector<Network> eq{constant_net(1, {0.5f, 0.5f}), constant_net(1, {0.5f, 0.5f})};
  for (int p : ensemble_predict(eq, x, map)) EXPECT_EQ(p, 0);
}

TEST(Ensemble, MonotoneTransformInvariance) {
  const Fixture f = small_fixture(2);
  const Tensor s = scorer_of(std::span<const Network>(f.teachers))(f.test.images);
  Tensor t = s;
  for (auto& v : t.data()) v = std::exp(v) + 3.0f;
  EXPECT_EQ(predict_classes(t, f.map), predict_classes(s, f.map));
  EXPECT_EQ(ensemble_predict(f.teachers, f.test.images, f.map), predict_classes(s, f.map));
}

TEST(Evaluate, PerfectPredictor) {
  LabeledSet set;
  set.images = Tensor({4, 1, 1, 1});
  set.labels = {0, 1, 2, 3};
  set.class_ids = {0, 1, 2, 3};
  const LabelMap map = LabelMap::from_teachers(std::vector<std::vector<int>>{{0, 1}, {2, 3}});
  Tensor s({4, 4});
  for (std::size_t i = 0; i < 4; ++i) s.at(i, i) = 1.0f;
  const auto rep = evaluate_scores(s, set, map, {{0, 1}, {2, 3}});
  EXPECT_EQ(rep.accuracy_whole, 1.0);
  EXPECT_EQ(rep.accuracy_per_part, (std::vector<double>{1.0, 1.0}));
  set.labels[0] = 9;
  EXPECT_THROW(evaluate_scores(s, set, map, {}), ConfigError);
}

TEST(Evaluate, RandomScoresNearChance) {
  const std::size_t N = 4000, G = 8;
  LabeledSet set;
  set.images = Tensor({N, 1, 1, 1});
  Rng r(50);
  for (std::size_t i = 0; i < N; ++i) set.labels.push_back(static_cast<int>(r.index(G)));
  for (int c = 0; c < static_cast<int>(G); ++c) set.class_ids.push_back(c);
  const LabelMap map = LabelMap::from_teachers(std::vector<std::vector<int>>{{0, 1, 2, 3}, {4, 5, 6, 7}});
  const auto rep = evaluate_scores(random_tensor({N, G}, 51), set, map, {{0, 1, 2, 3}, {4, 5, 6, 7}});
  const double sd = std::sqrt(0.125 * 0.875 / static_cast<double>(N));
  EXPECT_NEAR(rep.accuracy_whole, 0.125, 4 * sd);
  for (double a : rep.accuracy_per_part) EXPECT_NEAR(a, 0.25, 4 * std::sqrt(0.25 * 0.75 / (N / 2.0)));
}
