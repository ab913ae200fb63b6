#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <vector>

#include "helpers.hpp"
#include "kamal/amalgam/feature.hpp"
#include "kamal/amalgam/scores.hpp"

using namespace kamal;
using kamal::test::random_tensor;

namespace {

// cin channels that are fixed linear mixtures of `rank` random channels.
Tensor low_rank_features(std::size_t n, std::size_t cin, std::size_t rank, std::size_t hw, std::uint64_t seed) {
  const Tensor base = random_tensor({n, rank, hw, hw}, seed);
  const Tensor mix = random_tensor({cin, rank}, seed + 1);
  return ops::conv1x1(base, mix);
}

// Best achievable 1/2||F - P F||^2 per sample over rank-k linear maps P
// (channel PCA in double precision).
double pca_optimum(const Tensor& f, std::size_t k) {
  const std::size_t C = f.dim(1), P = positions(f);
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(C));
  for (std::size_t n = 0; n < f.dim(0); ++n)
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t a = 0; a < C; ++a)
        for (std::size_t b = 0; b < C; ++b)
          G(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) +=
              static_cast<double>(f[(n * C + a) * P + p]) * f[(n * C + b) * P + p];
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
  double rest = 0.0;  // eigenvalues ascend; drop the k largest
  for (std::size_t i = 0; i + k < C; ++i) rest += std::max(0.0, es.eigenvalues()(static_cast<Eigen::Index>(i)));
  return 0.5 * rest / static_cast<double>(f.dim(0));
}

TrainHyper ae_hyper(std::size_t epochs = 40) {
  TrainHyper h;
  h.epochs = epochs;
  h.batch_size = 16;
  h.sgd.lr = 0.1f;
  h.sgd.weight_decay = 0.0f;
  h.seed = 5;
  return h;
}

}  // namespace

TEST(Autoencoder, LowRankCompressesAlmostLosslessly) {
  const Tensor f = low_rank_features(64, 12, 6, 4, 1);
  EXPECT_LT(pca_optimum(f, 8), 1e-6 * feature_energy(f));
  const auto res = train_autoencoder(stream_of(f), 64, 12, 8, ae_hyper());
  EXPECT_LT(res.final_loss, 0.05 * res.energy);
  EXPECT_GE(res.final_loss, pca_optimum(f, 8) - 1e-6);
}

TEST(Autoencoder, FullRankNoBetterThanPcaOptimum) {
  const Tensor f = random_tensor({64, 10, 3, 3}, 2);
  const auto res = train_autoencoder(stream_of(f), 64, 10, 6, ae_hyper(60));
  const double opt = pca_optimum(f, 6);
  EXPECT_GE(res.final_loss, opt * (1.0 - 1e-4));
  EXPECT_LT(res.final_loss, opt * 1.2);
}

TEST(Autoencoder, RejectsNonCompressingWidth) {
  const Tensor f = random_tensor({4, 6, 2, 2}, 3);
  EXPECT_THROW(train_autoencoder(stream_of(f), 4, 6, 6, ae_hyper()), ConfigError);
  EXPECT_THROW(train_autoencoder(stream_of(f), 4, 6, 7, ae_hyper()), ConfigError);
  EXPECT_THROW(ChannelAutoencoder::make(6, 6, Rng(1)), ConfigError);
}

TEST(Autoencoder, LossDecreasesOnRandomFeatures) {
  const Tensor f = random_tensor({32, 8, 4, 4}, 4);
  const auto res = train_autoencoder(stream_of(f), 32, 8, 5, ae_hyper(10));
  EXPECT_LT(res.final_loss, res.initial_loss);
  ASSERT_EQ(res.curve.size(), 10u);
  EXPECT_LT(res.curve.back(), res.curve.front());
}

TEST(Autoencoder, ShapesConsistent) {
  const auto ae = ChannelAutoencoder::make(9, 4, Rng(2));
  EXPECT_EQ(ae.enc.value.shape(), (Shape{4, 9}));
  EXPECT_EQ(ae.dec.value.shape(), (Shape{9, 4}));
}

TEST(Encode, SelectsChannels) {
  auto ae = ChannelAutoencoder::make(5, 3, Rng(1));
  ae.enc.value.fill(0.0f);
  for (std::size_t c = 0; c < 3; ++c) ae.enc.value.at(c, c) = 1.0f;
  const Tensor f = random_tensor({2, 5, 3, 4}, 6);
  const Tensor e = encode(ae, f);
  ASSERT_EQ(e.shape(), (Shape{2, 3, 3, 4}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t h = 0; h < 3; ++h)
        for (std::size_t w = 0; w < 4; ++w) EXPECT_EQ(e.at(n, c, h, w), f.at(n, c, h, w));
}

TEST(Encode, ZeroWeightsGiveZero) {
  auto ae = ChannelAutoencoder::make(4, 2, Rng(1));
  ae.enc.value.fill(0.0f);
  const Tensor e = encode(ae, random_tensor({3, 4, 2, 2}, 7));
  for (float v : e.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Encode, ChannelMismatch) {
  const auto ae = ChannelAutoencoder::make(4, 2, Rng(1));
  EXPECT_THROW(encode(ae, random_tensor({1, 5, 2, 2}, 1)), ShapeError);
  EXPECT_THROW(decode(ae, random_tensor({1, 3, 2, 2}, 1)), ShapeError);
}

TEST(Encode, AnalyticInversePair) {
  // Input channels: a, b, a+b. enc keeps (a, b); dec rebuilds (a, b, a+b).
  const Tensor ab = random_tensor({3, 2, 4, 4}, 8);
  Tensor mix({3, 2});
  mix.at(0, 0) = 1;
  mix.at(1, 1) = 1;
  mix.at(2, 0) = 1;
  mix.at(2, 1) = 1;
  const Tensor f = ops::conv1x1(ab, mix);
  auto ae = ChannelAutoencoder::make(3, 2, Rng(1));
  ae.enc.value.fill(0.0f);
  ae.enc.value.at(0, 0) = 1;
  ae.enc.value.at(1, 1) = 1;
  ae.dec.value = mix;
  EXPECT_LT(test::max_abs_diff(decode(ae, encode(ae, f)), f), 1e-5);
}

TEST(Pair, IdenticalTeachersReconstructNearlyExactly) {
  const Tensor f = random_tensor({48, 6, 4, 4}, 9);
  const auto [la, fa] = amalgamate_pair(f, f, 9, ae_hyper());
  EXPECT_EQ(fa.shape(), (Shape{48, 9, 4, 4}));
  const std::vector<Tensor> all{f, f};
  EXPECT_LT(relative_reconstruction_error(la, teacher_features_of(all), 48), 0.01);
}

TEST(Pair, OpenIntervalBounds) {
  const Tensor f = random_tensor({4, 4, 2, 2}, 10);
  EXPECT_THROW(amalgamate_pair(f, f, 4, ae_hyper(1)), ConfigError);
  EXPECT_THROW(amalgamate_pair(f, f, 8, ae_hyper(1)), ConfigError);
  EXPECT_NO_THROW(amalgamate_pair(f, f, 5, ae_hyper(1)));
  EXPECT_THROW(amalgamate_pair(f, random_tensor({4, 3, 2, 2}, 1), 5, ae_hyper(1)), ShapeError);
}

TEST(Ifa, TwoTeachersMatchPairAndDfa) {
  const Tensor f1 = random_tensor({32, 5, 3, 3}, 11), f2 = random_tensor({32, 5, 3, 3}, 12);
  const std::vector<Tensor> all{f1, f2};
  const auto [lp, fp] = amalgamate_pair(f1, f2, 7, ae_hyper(5));
  const auto [li, fi] = amalgamate_ifa(all, {7}, ae_hyper(5));
  const auto [ld, fd] = amalgamate_dfa(all, 7, ae_hyper(5));
  EXPECT_EQ(fp, fi);
  EXPECT_EQ(fp, fd);
  EXPECT_EQ(lp.reports[0].curve, li.reports[0].curve);
  EXPECT_EQ(lp.reports[0].curve, ld.reports[0].curve);
}

TEST(Ifa, ThreeDuplicatedTeachers) {
  const Tensor f = random_tensor({48, 6, 4, 4}, 13);
  const std::vector<Tensor> all{f, f, f};
  const auto [la, fa] = amalgamate_ifa(all, {9, 12}, ae_hyper());
  EXPECT_EQ(la.steps.size(), 2u);
  EXPECT_EQ(fa.dim(1), 12u);
  EXPECT_LT(relative_reconstruction_error(la, teacher_features_of(all), 48), 0.02);
}

TEST(Ifa, MergeCountIsTeachersMinusOne) {
  const Tensor f = random_tensor({8, 4, 2, 2}, 14);
  const std::vector<Tensor> all{f, f, f, f};
  const auto [la, fa] = amalgamate_ifa(all, {6, 9, 12}, ae_hyper(1));
  EXPECT_EQ(la.steps.size(), 3u);
  EXPECT_EQ(la.reports.size(), 3u);
}

TEST(Ifa, BadStepNamed) {
  const Tensor f = random_tensor({8, 4, 2, 2}, 15);
  const std::vector<Tensor> all{f, f, f};
  try {
    (void)amalgamate_ifa(all, {6, 4}, ae_hyper(1));
    FAIL() << "no error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("step 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(amalgamate_ifa(all, {6}, ae_hyper(1)), ConfigError);
}

TEST(Dfa, OneAutoencoderRegardlessOfTeachers) {
  const Tensor f = random_tensor({8, 4, 2, 2}, 16);
  for (std::size_t n : {2u, 3u, 4u}) {
    const std::vector<Tensor> all(n, f);
    const auto [la, fa] = amalgamate_dfa(all, 4 * n - 1, ae_hyper(1));
    EXPECT_EQ(la.steps.size(), 1u);
    EXPECT_EQ(fa.dim(1), 4 * n - 1);
  }
}

TEST(Dfa, ThreeDuplicatedTeachers) {
  const Tensor f = random_tensor({48, 6, 4, 4}, 17);
  const std::vector<Tensor> all{f, f, f};
  const auto [la, fa] = amalgamate_dfa(all, 12, ae_hyper());
  EXPECT_LT(relative_reconstruction_error(la, teacher_features_of(all), 48), 0.02);
}

TEST(Dfa, Bounds) {
  const Tensor f = random_tensor({4, 4, 2, 2}, 18);
  const std::vector<Tensor> all{f, f, f};
  EXPECT_THROW(amalgamate_dfa(all, 4, ae_hyper(1)), ConfigError);
  EXPECT_THROW(amalgamate_dfa(all, 12, ae_hyper(1)), ConfigError);
}

TEST(Plan, WidthsInsideInterval) {
  const NetworkSpec t = default_teacher_spec(4);
  for (std::size_t n : {2u, 3u, 4u}) {
    const auto p = AmalgamPlan::make(AmalgamMode::ifa, t, n, default_width_ratio(n));
    ASSERT_EQ(p.per_layer_out.size(), t.depth() - 1);
    for (std::size_t l = 1; l < t.depth(); ++l) {
      const std::size_t w = t.layer(l).out_ch;
      EXPECT_GT(p.per_layer_out[l - 1], w);
      EXPECT_LT(p.per_layer_out[l - 1], n * w);
      EXPECT_EQ(p.merge_widths[l - 1].size(), n - 1);
      EXPECT_EQ(p.merge_widths[l - 1].back(), p.per_layer_out[l - 1]);
    }
    const auto s = make_student_spec(t, n, default_width_ratio(n), 4 * n);
    for (std::size_t l = 1; l < t.depth(); ++l) EXPECT_EQ(s.layer(l).out_ch, p.per_layer_out[l - 1]);
  }
  EXPECT_THROW(AmalgamPlan::make(AmalgamMode::pairwise, t, 3, 0.5), ConfigError);
  EXPECT_EQ(parse_mode("dfa"), AmalgamMode::dfa);
  EXPECT_THROW(parse_mode("both"), ConfigError);
}

TEST(Features, SentinelChannelOrder) {
  // Teacher i's features are the constant i+1; concatenation keeps teacher order.
  std::vector<Tensor> all;
  for (int i = 0; i < 3; ++i) {
    Tensor t({2, 2, 1, 1});
    t.fill(static_cast<float>(i + 1));
    all.push_back(t);
  }
  const Tensor c = concat_channels(all);
  for (std::size_t ch = 0; ch < 6; ++ch) EXPECT_EQ(c.at(0, ch, 0, 0), static_cast<float>(ch / 2 + 1));
  const std::vector<Tensor> s{Tensor({1, 2}, {0.2f, 0.8f}), Tensor({1, 2}, {0.6f, 0.4f})};
  const std::vector<std::vector<int>> cls{{0, 1}, {2, 3}};
  const auto [cat, map] = amalgamate_scores(s, cls);
  EXPECT_EQ(cat, Tensor({1, 4}, {0.2f, 0.8f, 0.6f, 0.4f}));
  for (std::size_t e = 0; e < 4; ++e) EXPECT_EQ(map.entries[e].teacher, e / 2);
}

TEST(Features, CachedLayersMatchStreamed) {
  const NetworkSpec spec = conv_classifier_spec({3, 8, 8}, {4, 6}, 5, 3);
  const std::vector<Network> teachers{build_network(spec, Rng(1, 0)), build_network(spec, Rng(2, 0))};
  TransferSet ts;
  ts.images = random_tensor({300, 3, 8, 8}, 17, 0.0f, 1.0f);
  FeatureBank cached(teachers, ts), streamed(teachers, ts);
  streamed.set_cache_budget(0);
  const std::vector<std::size_t> idx{299, 0, 131, 7};
  for (std::size_t l : {1u, 2u, 3u, 2u, 3u}) {
    const auto a = cached.features(idx, l);
    const auto b = streamed.features(idx, l);
    ASSERT_EQ(a.size(), 2u);
    for (std::size_t t = 0; t < 2; ++t) EXPECT_LT(test::max_abs_diff(a[t], b[t]), 1e-5) << "layer " << l;
  }
}

TEST(Scores, DisjointLabelMap) {
  const std::vector<std::vector<int>> cls{{0, 1, 2}, {3, 4}};
  const auto m = LabelMap::from_teachers(cls);
  EXPECT_EQ(m.width(), 5u);
  EXPECT_EQ(m.global_classes.size(), 5u);
  EXPECT_EQ(m.blocks().size(), 2u);
  EXPECT_EQ(m.blocks()[1].begin, 3u);
  EXPECT_EQ(m.blocks()[1].width, 2u);
  EXPECT_EQ(LabelMap::from_tensor(m.to_tensor()), m);
}

TEST(Scores, OverlapKeepsBothEntries) {
  const std::vector<std::vector<int>> cls{{0, 1}, {1, 2}};  // A,B and B,C
  const auto m = LabelMap::from_teachers(cls);
  EXPECT_EQ(m.width(), 4u);
  EXPECT_EQ(m.global_classes, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(std::count_if(m.entries.begin(), m.entries.end(), [](const auto& e) { return e.global == 1; }), 2);
}

TEST(Scores, ShapeMismatch) {
  const std::vector<Tensor> s{Tensor({1, 3})};
  const std::vector<std::vector<int>> cls{{0, 1}};
  EXPECT_THROW(amalgamate_scores(s, cls), ShapeError);
}

TEST(Merge, NoOverlapIsCopy) {
  const auto m = LabelMap::from_teachers(std::vector<std::vector<int>>{{0, 1}, {2, 3}});
  const Tensor s = random_tensor({5, 4}, 19);
  EXPECT_EQ(merge_overlapping_at_test(s, m), s);
}

TEST(Merge, MaxRule) {
  const auto m = LabelMap::from_teachers(std::vector<std::vector<int>>{{0, 1}, {1, 2}});
  const Tensor s({1, 4}, {0.1f, 0.3f, 0.9f, 0.2f});
  const Tensor g = merge_overlapping_at_test(s, m);
  EXPECT_EQ(g, Tensor({1, 3}, {0.1f, 0.9f, 0.2f}));
}

TEST(Merge, ArgmaxMatchesBruteForceAndScaling) {
  const auto m = LabelMap::from_teachers(std::vector<std::vector<int>>{{0, 1, 2}, {2, 3}, {0, 4}});
  const Tensor s = random_tensor({200, 7}, 20);
  const auto pred = predict_classes(s, m);
  Tensor scaled = s;
  for (auto& v : scaled.data()) v *= 3.5f;
  EXPECT_EQ(predict_classes(scaled, m), pred);
  for (std::size_t n = 0; n < 200; ++n) {
    std::size_t best = 0;
    for (std::size_t e = 1; e < 7; ++e)
      if (s.at(n, e) > s.at(n, best)) best = e;
    EXPECT_EQ(pred[n], m.entries[best].global);
  }
}
