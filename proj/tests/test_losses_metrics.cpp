#include "msat/gradcheck.hpp"
#include "msat/losses.hpp"
#include "msat/metrics.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace msat;

namespace {

LabelMap random_labels(Index n, Index h, Index w, int k, std::uint64_t seed) {
  LabelMap m(n, h, w);
  CounterRng rng(seed);
  for (auto& v : m.data) v = std::uint8_t(rng.uniform_int(0, k - 1));
  return m;
}

}  // namespace

TEST(CrossEntropy, UniformLogitsGiveLogK) {
  Tape<double> tape;
  auto x = tape.constant(TensorD::zeros({2, 4, 3, 3}));
  for (std::uint64_t seed : {1, 2, 3}) {
    EXPECT_NEAR(cross_entropy(x, random_labels(2, 3, 3, 4, seed)).value()[0], std::log(4.0), 1e-12);
  }
}

TEST(CrossEntropy, SaturatedCorrectLogitsGoToZero) {
  auto labels = random_labels(1, 2, 2, 3, 4);
  TensorD x({1, 3, 2, 2});
  for (Index p = 0; p < 4; ++p) x[labels.data[p] * 4 + p] = 100.0;
  Tape<double> tape;
  EXPECT_LT(cross_entropy(tape.constant(x), labels).value()[0], 1e-40);
}

TEST(CrossEntropy, MatchesPerPixelOracleAndIgnoresLabel) {
  auto x = oracle::random_tensor({1, 3, 2, 2}, 5, -3, 3);
  auto labels = random_labels(1, 2, 2, 3, 6);
  Tape<double> tape;
  EXPECT_NEAR(cross_entropy(tape.constant(x), labels).value()[0], oracle::cross_entropy(x, labels), 1e-6);
  labels.data[1] = kIgnoreLabel;
  EXPECT_NEAR(cross_entropy(tape.constant(x), labels).value()[0], oracle::cross_entropy(x, labels), 1e-12);
  auto xf = x.cast<float>();
  Tape<float> tf;
  EXPECT_NEAR(cross_entropy(tf.constant(xf), labels).value()[0], oracle::cross_entropy(x, labels), 1e-6);
}

TEST(CrossEntropy, Errors) {
  Tape<double> tape;
  auto x = tape.constant(TensorD::zeros({1, 3, 2, 2}));
  EXPECT_THROW(cross_entropy(x, LabelMap(1, 2, 2, kIgnoreLabel)), std::invalid_argument);
  EXPECT_THROW(cross_entropy(x, LabelMap(1, 2, 2, 3)), std::exception);
  EXPECT_THROW(cross_entropy(x, LabelMap(1, 2, 3, 0)), std::exception);
}

TEST(CrossEntropy, GradcheckAndNonNegative) {
  auto labels = random_labels(2, 3, 3, 4, 7);
  labels.data[4] = kIgnoreLabel;
  ForwardFn<double> f = [&](Tape<double>&, const VarMap<double>& v) { return cross_entropy(v.at("x"), labels); };
  ParamMap<double> params{{"x", oracle::random_tensor({2, 4, 3, 3}, 8, -2, 2)}};
  EXPECT_LT(finite_diff_check(f, params, 1e-5, 72).max_rel_err, 1e-7);
  Tape<double> tape;
  EXPECT_GE(f(tape, register_parameters(tape, params)).value()[0], 0.0);
}

TEST(TotalLoss, SumOfTerms) {
  auto labels = random_labels(1, 3, 3, 4, 9);
  Tape<double> tape;
  auto z = tape.constant(TensorD::zeros({1, 4, 3, 3}));
  auto terms = total_loss({z, z}, z, labels);
  EXPECT_NEAR(terms.total.value()[0], 3 * std::log(4.0), 1e-12);
  ASSERT_EQ(terms.stream_terms.size(), 2u);

  auto only = total_loss<double>({}, z, labels);
  EXPECT_EQ(only.total.value()[0], cross_entropy(z, labels).value()[0]);
}

TEST(TotalLoss, GradientIsSumOfTermGradients) {
  auto labels = random_labels(1, 3, 3, 3, 10);
  auto a = oracle::random_tensor({1, 3, 3, 3}, 11), b = oracle::random_tensor({1, 3, 3, 3}, 12);
  auto build = [&](Tape<double>& t, int which) {
    auto p = t.parameter("p", a);
    auto s1 = p * t.constant(b);
    auto s2 = scale(p, 2.0);
    auto fin = p + s1;
    auto terms = total_loss({s1, s2}, fin, labels);
    if (which == 0) return terms.total;
    if (which == 1) return terms.final_term;
    return terms.stream_terms[std::size_t(which - 2)];
  };
  Tape<double> tt;
  auto total = tt.backward(build(tt, 0)).at("p");
  TensorD parts = TensorD::zeros(a.shape());
  for (int w = 1; w <= 3; ++w) {
    Tape<double> t;
    parts.data() += t.backward(build(t, w)).at("p").data();
  }
  EXPECT_LT((total.data() - parts.data()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Metrics, PerfectAndComplement) {
  LabelMap gt(1, 4, 4);
  for (std::size_t i = 0; i < 16; ++i) gt.data[i] = std::uint8_t(i % 2);
  ConfusionMatrix cm(2);
  cm.accumulate(gt, gt);
  EXPECT_EQ(miou(cm), 1.0);
  EXPECT_EQ(pixel_accuracy(cm), 1.0);

  LabelMap inv = gt;
  for (auto& v : inv.data) v = std::uint8_t(1 - v);
  ConfusionMatrix bad(2);
  bad.accumulate(inv, gt);
  EXPECT_EQ(miou(bad), 0.0);
  EXPECT_EQ(pixel_accuracy(bad), 0.0);
}

TEST(Metrics, MatchesSetIouOracle) {
  auto gt = random_labels(1, 8, 8, 3, 13);
  auto pred = random_labels(1, 8, 8, 3, 14);
  gt.data[5] = kIgnoreLabel;
  ConfusionMatrix cm(3);
  accumulate_confusion(pred, gt, cm);
  EXPECT_EQ(cm.total(), 63);
  auto ious = per_class_iou(cm);
  double sum = 0;
  for (int c = 0; c < 3; ++c) {
    auto want = oracle::set_iou(pred, gt, c);
    ASSERT_EQ(ious[c].has_value(), want.has_value());
    EXPECT_NEAR(*ious[c], *want, 1e-15);
    sum += *want;
  }
  EXPECT_NEAR(miou(cm), sum / 3, 1e-15);
}

TEST(Metrics, AbsentClassesAreExcluded) {
  LabelMap gt(1, 1, 4), pred(1, 1, 4);
  gt.data = {0, 0, 1, 1};
  pred.data = {0, 0, 1, 0};
  ConfusionMatrix cm(4);
  cm.accumulate(pred, gt);
  auto ious = per_class_iou(cm);
  EXPECT_FALSE(ious[2].has_value());
  EXPECT_FALSE(ious[3].has_value());
  EXPECT_NEAR(miou(cm), (2.0 / 3 + 1.0 / 2) / 2, 1e-15);
  EXPECT_DOUBLE_EQ(pixel_accuracy(cm), 0.75);
}

TEST(Metrics, OrderIndependentAndMergeable) {
  auto gt = random_labels(1, 6, 6, 4, 15);
  auto pred = random_labels(1, 6, 6, 4, 16);
  std::vector<std::size_t> perm(36);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[3], perm[20]);
  LabelMap gt2 = gt, pred2 = pred;
  for (std::size_t i = 0; i < 36; ++i) {
    gt2.data[i] = gt.data[perm[i]];
    pred2.data[i] = pred.data[perm[i]];
  }
  ConfusionMatrix a(4), b(4);
  a.accumulate(pred, gt);
  b.accumulate(pred2, gt2);
  EXPECT_EQ(a, b);

  LabelMap g1(1, 1, 18), p1(1, 1, 18), g2(1, 1, 18), p2(1, 1, 18);
  std::copy_n(gt.data.begin(), 18, g1.data.begin());
  std::copy_n(gt.data.begin() + 18, 18, g2.data.begin());
  std::copy_n(pred.data.begin(), 18, p1.data.begin());
  std::copy_n(pred.data.begin() + 18, 18, p2.data.begin());
  ConfusionMatrix c1(4), c2(4);
  c1.accumulate(p1, g1);
  c2.accumulate(p2, g2);
  c2.merge(c1);
  EXPECT_EQ(c2, a);
}

TEST(Metrics, InvariantUnderRelabeling) {
  auto gt = random_labels(2, 5, 5, 4, 17);
  auto pred = random_labels(2, 5, 5, 4, 18);
  const std::uint8_t map[4] = {2, 0, 3, 1};
  LabelMap gt2 = gt, pred2 = pred;
  for (auto& v : gt2.data) v = map[v];
  for (auto& v : pred2.data) v = map[v];
  ConfusionMatrix a(4), b(4);
  a.accumulate(pred, gt);
  b.accumulate(pred2, gt2);
  EXPECT_NEAR(miou(a), miou(b), 1e-15);
  EXPECT_EQ(pixel_accuracy(a), pixel_accuracy(b));
}

TEST(Metrics, ErrorsAndReports) {
  ConfusionMatrix cm(3);
  EXPECT_THROW(miou(cm), MetricsError);
  EXPECT_THROW(pixel_accuracy(cm), MetricsError);
  LabelMap bad(1, 1, 2);
  bad.data = {0, 3};
  EXPECT_THROW(cm.accumulate(bad, LabelMap(1, 1, 2)), MetricsError);

  LabelMap gt(1, 1, 3), pred(1, 1, 3);
  gt.data = {0, 1, 1};
  pred.data = {0, 1, 0};
  cm.accumulate(pred, gt);
  auto report = make_report(cm);
  EXPECT_EQ(report.pixels, 3);
  auto kv = format_key_values(report);
  EXPECT_NE(kv.find("miou="), std::string::npos);
  EXPECT_NE(kv.find("pixel_accuracy="), std::string::npos);
  EXPECT_NE(kv.find("iou_2="), std::string::npos);
  EXPECT_NE(format_table(report).find("mIoU"), std::string::npos);
}

TEST(Labels, ArgmaxTiesAndNearestResize) {
  auto scores = TensorF::from({1, 3, 1, 2}, {1, 0, 1, 5, 0, 5});
  auto am = argmax_channels(scores);
  EXPECT_EQ(am.data, (std::vector<std::uint8_t>{0, 1}));

  LabelMap m(1, 4, 4);
  for (std::size_t i = 0; i < 16; ++i) m.data[i] = std::uint8_t(i);
  auto d = resize_nearest(m, 2, 2);
  EXPECT_EQ(d.data, (std::vector<std::uint8_t>{5, 7, 13, 15}));
  auto u = resize_nearest(d, 4, 4);
  EXPECT_EQ(u(0, 0, 1), 5);
  EXPECT_EQ(u(0, 3, 3), 15);
}
