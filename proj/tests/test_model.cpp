#include "msat/gradcheck.hpp"
#include "msat/losses.hpp"
#include "msat/model.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace msat;

namespace {

ModelConfig small_config(Index n_class = 5) {
  ModelConfig cfg;
  cfg.backbone.widths = {4, 6, 8};
  cfg.backbone.n_class = n_class;
  cfg.streams.scale_conv_channels = 5;
  cfg.streams.hidden = 6;
  return cfg;
}

template <typename Scalar>
StreamOutputs<Scalar> run(Tape<Scalar>& tape, const ParamMap<Scalar>& params, const Tensor<Scalar>& image,
                          const ModelConfig& cfg) {
  return model_forward(tape, register_parameters(tape, params), image, cfg);
}

std::vector<Var<double>> constants(Tape<double>& tape, const std::vector<TensorD>& ts) {
  std::vector<Var<double>> out;
  for (const auto& t : ts) out.push_back(tape.constant(t));
  return out;
}

}  // namespace

TEST(Backbone, StageShapesAndHypercolumnWidth) {
  ModelConfig cfg;
  auto params = init_params<float>(cfg, 1);
  Tape<float> tape;
  auto vars = register_parameters(tape, params);
  auto img = tape.constant(oracle::random_tensor({1, 3, 16, 16}, 1, 0, 1).cast<float>());
  auto stages = backbone_forward(vars, img, cfg);
  ASSERT_EQ(stages.size(), 3u);
  EXPECT_EQ(stages[0].shape(), (Shape{1, 16, 8, 8}));
  EXPECT_EQ(stages[1].shape(), (Shape{1, 32, 4, 4}));
  EXPECT_EQ(stages[2].shape(), (Shape{1, 64, 4, 4}));
  EXPECT_EQ(hypercolumn_fuse(std::span<const Var<float>>(stages)).shape(), (Shape{1, 112, 4, 4}));
}

TEST(Backbone, ZeroInputGivesZeroFeatures) {
  ModelConfig cfg = small_config();
  auto params = init_params<float>(cfg, 2);
  Tape<float> tape;
  auto stages = backbone_forward(register_parameters(tape, params), tape.constant(TensorF::zeros({2, 3, 8, 8})), cfg);
  for (const auto& s : stages) EXPECT_TRUE(s.value().data().isZero());
}

TEST(Backbone, RejectsSizesNotDivisibleByFour) {
  ModelConfig cfg = small_config();
  auto params = init_params<float>(cfg, 2);
  Tape<float> tape;
  auto vars = register_parameters(tape, params);
  try {
    backbone_forward(vars, tape.constant(TensorF::zeros({1, 3, 10, 8})), cfg);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos);
  }
  EXPECT_THROW(model_forward(tape, vars, TensorF::zeros({1, 3, 12, 12}), cfg), ShapeError);  // 6x6 at 0.5
}

TEST(Backbone, Deterministic) {
  ModelConfig cfg = small_config();
  auto params = init_params<float>(cfg, 3);
  auto img = oracle::random_tensor({1, 3, 16, 16}, 4, 0, 1).cast<float>();
  Tape<float> t1, t2;
  auto a = backbone_forward(register_parameters(t1, params), t1.constant(img), cfg);
  auto b = backbone_forward(register_parameters(t2, params), t2.constant(img), cfg);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].value(), b[i].value());
}

TEST(Hypercolumn, SlicesMatchIndividuallyResizedStages) {
  Tape<float> tape;
  std::vector<Var<float>> stages{
      tape.constant(oracle::random_tensor({1, 16, 8, 8}, 5).cast<float>()),
      tape.constant(oracle::random_tensor({1, 32, 4, 4}, 6).cast<float>()),
      tape.constant(oracle::random_tensor({1, 64, 4, 4}, 7).cast<float>())};
  auto fused = hypercolumn_fuse(std::span<const Var<float>>(stages)).value();
  EXPECT_EQ(slice_channels(fused, 0, 16), bilinear_resize(stages[0].value(), 4, 4));
  EXPECT_EQ(slice_channels(fused, 16, 32), stages[1].value());
  EXPECT_EQ(slice_channels(fused, 48, 64), stages[2].value());

  std::vector<Var<float>> one{stages[1]};
  EXPECT_EQ(hypercolumn_fuse(std::span<const Var<float>>(one)).id(), stages[1].id());
}

TEST(ScaleConv, DilationTwelveKeepsShapeAndMatchesOracle) {
  ModelConfig cfg = small_config();
  auto params = init_params<double>(cfg, 8);
  for (auto& [name, t] : params) t = oracle::random_tensor(t.shape(), name_hash(name));
  Tape<double> tape;
  auto vars = register_parameters(tape, params);
  auto feat = oracle::random_tensor({1, cfg.feature_channels(), 4, 4}, 9);
  for (std::size_t si = 0; si < 2; ++si) {
    const double scale = cfg.streams.scales[si];
    const Index dil = cfg.streams.dilations[si];
    auto y = scale_specific_conv(vars, tape.constant(feat), scale, cfg).value();
    EXPECT_EQ(y.shape(), (Shape{1, 5, 4, 4}));
    const std::string p = "decoder/scale_conv/s" + std::to_string(si);
    auto ref = oracle::conv2d(feat, params.at(p + "/weight"), params.at(p + "/bias"),
                              Conv2dSpec::square(feat.dim(1), 5, 3, dil, dil));
    for (Index i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], std::max(0.0, ref[i]), 1e-12);
  }
  EXPECT_THROW(scale_specific_conv(vars, tape.constant(feat), 0.25, cfg), std::invalid_argument);
}

TEST(ScaleConv, ZeroWeightsGiveBias) {
  ModelConfig cfg = small_config();
  auto params = init_params<double>(cfg, 8);
  params.at("decoder/scale_conv/s1/weight").data().setZero();
  params.at("decoder/scale_conv/s1/bias").data().setConstant(0.3);
  Tape<double> tape;
  auto y = scale_specific_conv(register_parameters(tape, params),
                               tape.constant(oracle::random_tensor({1, cfg.feature_channels(), 4, 4}, 3)), 0.5, cfg);
  for (Index i = 0; i < y.value().size(); ++i) EXPECT_EQ(y.value()[i], 0.3);
}

TEST(AttentionHead, ZeroFinalLayersGiveUniformWeightsAndHalfRecalibration) {
  ModelConfig cfg = small_config();
  auto params = init_params<float>(cfg, 10);
  for (const char* p : {"decoder/location/out/weight", "decoder/location/out/bias", "decoder/recalib/out/weight",
                        "decoder/recalib/out/bias"})
    params.at(p).data().setZero();
  Tape<float> tape;
  auto out = run(tape, params, oracle::random_tensor({2, 3, 16, 16}, 11, 0, 1).cast<float>(), cfg);
  ASSERT_TRUE(out.attention.has_value());
  auto l = softmax_channels(out.attention->location_logits.value());
  for (Index i = 0; i < l.size(); ++i) EXPECT_EQ(l[i], 0.5f);
  const auto& wr = out.attention->recalibration->value();
  EXPECT_EQ(wr.shape(), (Shape{2, 5, 4, 4}));
  for (Index i = 0; i < wr.size(); ++i) EXPECT_EQ(wr[i], 0.5f);
}

TEST(AttentionHead, NormalizationOnRandomParams) {
  ModelConfig cfg = small_config();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto params = init_params<float>(cfg, seed);
    Tape<float> tape;
    auto out = run(tape, params, oracle::random_tensor({1, 3, 16, 16}, seed + 20, 0, 1).cast<float>(), cfg);
    auto l = softmax_channels(out.attention->location_logits.value());
    const Index hw = 16;
    for (Index p = 0; p < hw; ++p) EXPECT_NEAR(double(l[p]) + double(l[hw + p]), 1.0, 1e-6);
    const auto& wr = out.attention->recalibration->value();
    EXPECT_GT(wr.data().minCoeff(), 0.f);
    EXPECT_LT(wr.data().maxCoeff(), 1.f);
  }
}

TEST(AttentionHead, RejectsMismatchedInputs) {
  ModelConfig cfg = small_config();
  auto params = init_params<float>(cfg, 1);
  Tape<float> tape;
  auto vars = register_parameters(tape, params);
  std::vector<Var<float>> in{tape.constant(TensorF::zeros({1, 5, 4, 4})), tape.constant(TensorF::zeros({1, 5, 2, 2}))};
  EXPECT_THROW(attention_head(vars, std::span<const Var<float>>(in), cfg), ShapeError);
}

TEST(FuseAttention, UniformWeightsUnitRecalibrationIsMean) {
  Tape<double> tape;
  auto p = constants(tape, {oracle::random_tensor({1, 3, 4, 4}, 1), oracle::random_tensor({1, 3, 4, 4}, 2)});
  auto m = fuse_attention(std::span<const Var<double>>(p), tape.constant(TensorD::zeros({1, 2, 4, 4})),
                          std::optional(tape.constant(TensorD::constant({1, 3, 4, 4}, 1.0))), RecalibMode::multiply);
  for (Index i = 0; i < 48; ++i) EXPECT_NEAR(m.value()[i], (p[0].value()[i] + p[1].value()[i]) / 2, 1e-15);
}

TEST(FuseAttention, OneHotLogitsSelectStream) {
  Tape<double> tape;
  auto p = constants(tape, {oracle::random_tensor({1, 3, 4, 4}, 1), oracle::random_tensor({1, 3, 4, 4}, 2)});
  TensorD logits({1, 2, 4, 4});
  for (Index i = 0; i < 16; ++i) logits[i] = 1e3;  // scale 1 on, scale 2 off
  auto wr = oracle::random_tensor({1, 3, 4, 4}, 3, 0.01, 0.99);
  auto m = fuse_attention(std::span<const Var<double>>(p), tape.constant(logits), std::optional(tape.constant(wr)),
                          RecalibMode::multiply);
  EXPECT_EQ(m.value(), elementwise_mul(p[0].value(), wr));
}

TEST(FuseAttention, MatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    CounterRng rng(seed);
    const Index k = rng.uniform_int(1, 5), h = rng.uniform_int(1, 8), w = rng.uniform_int(1, 8);
    const Index s = rng.uniform_int(1, 3);
    std::vector<TensorD> ps;
    for (Index i = 0; i < s; ++i) ps.push_back(oracle::random_tensor({2, k, h, w}, seed * 100 + i, -3, 3));
    auto logits = oracle::random_tensor({2, s, h, w}, seed * 100 + 50, -4, 4);
    auto r = oracle::random_tensor({2, k, h, w}, seed * 100 + 60, -2, 2);
    Tape<double> tape;
    auto pv = constants(tape, ps);
    auto span = std::span<const Var<double>>(pv);
    auto lv = tape.constant(logits);
    auto rv = tape.constant(r);
    auto none = fuse_attention(span, lv, std::optional<Var<double>>{}, RecalibMode::multiply).value();
    auto mul = fuse_attention(span, lv, std::optional(rv), RecalibMode::multiply).value();
    auto bias = fuse_attention(span, lv, std::optional(rv), RecalibMode::bias).value();
    EXPECT_LT((none.data() - oracle::fuse(ps, logits, nullptr, true).data()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((mul.data() - oracle::fuse(ps, logits, &r, true).data()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((bias.data() - oracle::fuse(ps, logits, &r, false).data()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(FuseAttention, SaturatedRecalibrationEqualsNone) {
  ModelConfig cfg = small_config();
  auto params = init_params<double>(cfg, 12);
  params.at("decoder/recalib/out/weight").data().setZero();
  params.at("decoder/recalib/out/bias").data().setConstant(40.0);  // sigmoid -> 1
  auto img = oracle::random_tensor({1, 3, 16, 16}, 13, 0, 1);
  Tape<double> t1, t2;
  auto with = run(t1, params, img, cfg);
  ModelConfig off = cfg;
  off.ablation.extra_branch = false;
  ParamMap<double> trimmed;
  for (const auto& [n, t] : params)
    if (n.find("recalib") == std::string::npos) trimmed.emplace(n, t);
  auto without = run(t2, trimmed, img, off);
  EXPECT_LT((with.fused.value().data() - without.fused.value().data()).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(FuseAttention, ShapeErrors) {
  Tape<double> tape;
  auto p = constants(tape, {TensorD::zeros({1, 3, 4, 4}), TensorD::zeros({1, 3, 4, 4})});
  auto span = std::span<const Var<double>>(p);
  EXPECT_THROW(fuse_attention(span, tape.constant(TensorD::zeros({1, 3, 4, 4})), std::optional<Var<double>>{}, RecalibMode::multiply),
               ShapeError);
  EXPECT_THROW(fuse_attention(span, tape.constant(TensorD::zeros({1, 2, 4, 4})),
                              std::optional(tape.constant(TensorD::zeros({1, 2, 4, 4}))), RecalibMode::multiply),
               ShapeError);
}

TEST(FusePooling, ClosedFormsAndOracle) {
  Tape<double> tape;
  auto a = oracle::random_tensor({1, 2, 3, 3}, 1);
  auto same = constants(tape, {a, a});
  EXPECT_EQ(fuse_pooling(std::span<const Var<double>>(same), FusionMode::maxpool).value(), a);
  EXPECT_EQ(fuse_pooling(std::span<const Var<double>>(same), FusionMode::avgpool).value(), a);

  auto zo = constants(tape, {TensorD::zeros({1, 2, 3, 3}), TensorD::constant({1, 2, 3, 3}, 1.0)});
  auto mx = fuse_pooling(std::span<const Var<double>>(zo), FusionMode::maxpool).value();
  auto av = fuse_pooling(std::span<const Var<double>>(zo), FusionMode::avgpool).value();
  for (Index i = 0; i < mx.size(); ++i) {
    EXPECT_EQ(mx[i], 1.0);
    EXPECT_EQ(av[i], 0.5);
  }

  std::vector<TensorD> ts{oracle::random_tensor({2, 3, 4, 4}, 2), oracle::random_tensor({2, 3, 4, 4}, 3),
                          oracle::random_tensor({2, 3, 4, 4}, 4)};
  auto tri = constants(tape, ts);
  mx = fuse_pooling(std::span<const Var<double>>(tri), FusionMode::maxpool).value();
  av = fuse_pooling(std::span<const Var<double>>(tri), FusionMode::avgpool).value();
  for (Index i = 0; i < mx.size(); ++i) {
    EXPECT_EQ(mx[i], std::max({ts[0][i], ts[1][i], ts[2][i]}));
    EXPECT_NEAR(av[i], (ts[0][i] + ts[1][i] + ts[2][i]) / 3, 1e-15);
  }
  EXPECT_THROW(fuse_pooling(std::span<const Var<double>>(), FusionMode::maxpool), ShapeError);
}

TEST(ModelForward, OutputShapeForEveryConfiguration) {
  ModelConfig cfg = small_config(4);
  std::vector<Ablation> variants;
  for (bool ms : {false, true})
    for (bool dd : {false, true})
      for (bool eb : {false, true})
        for (RecalibMode rm : {RecalibMode::multiply, RecalibMode::bias})
          variants.push_back({ms, dd, FusionMode::attention, eb, rm});
  variants.push_back({false, false, FusionMode::maxpool, false, RecalibMode::multiply});
  variants.push_back({true, true, FusionMode::avgpool, false, RecalibMode::multiply});
  for (const auto& ab : variants) {
    cfg.ablation = ab;
    auto params = init_params<float>(cfg, 1);
    Tape<float> tape;
    auto out = run(tape, params, oracle::random_tensor({1, 3, 32, 32}, 2, 0, 1).cast<float>(), cfg);
    EXPECT_EQ(out.fused.shape(), (Shape{1, 4, 8, 8}));
    ASSERT_EQ(out.scores.size(), 2u);
    for (const auto& s : out.scores) EXPECT_EQ(s.shape(), (Shape{1, 4, 8, 8}));
    EXPECT_EQ(out.attention.has_value(), ab.fusion == FusionMode::attention);
  }
}

TEST(ModelForward, ThreeScales) {
  ModelConfig cfg = small_config(3);
  cfg.streams.scales = {1.0, 0.5, 0.25};
  cfg.streams.dilations = {2, 4, 8};
  auto params = init_params<float>(cfg, 1);
  Tape<float> tape;
  auto out = run(tape, params, oracle::random_tensor({1, 3, 32, 32}, 2, 0, 1).cast<float>(), cfg);
  EXPECT_EQ(out.attention->location_logits.shape(), (Shape{1, 3, 8, 8}));
  EXPECT_EQ(out.fused.shape(), (Shape{1, 3, 8, 8}));
}

TEST(ModelForward, BitIdenticalRepeats) {
  ModelConfig cfg = small_config();
  auto img = oracle::random_tensor({2, 3, 16, 16}, 3, 0, 1).cast<float>();
  Tape<float> t1, t2;
  auto a = run(t1, init_params<float>(cfg, 9), img, cfg);
  auto b = run(t2, init_params<float>(cfg, 9), img, cfg);
  EXPECT_EQ(a.fused.value(), b.fused.value());
  EXPECT_EQ(t1.op_sequence(), t2.op_sequence());
}

TEST(ModelForward, BaselineGraphIsAttentionToScale) {
  ModelConfig cfg = small_config(4);
  cfg.ablation = {false, false, FusionMode::attention, false, RecalibMode::multiply};
  Tape<float> tape;
  run(tape, init_params<float>(cfg, 1), TensorF::zeros({1, 3, 16, 16}), cfg);

  // Shared backbone on each scale, score conv on the last stage, one shared
  // standard conv per stream, a single location branch, one weighted sum.
  auto stream = [](const std::string& resize_in, Index hw) {
    std::vector<std::string> ops;
    if (!resize_in.empty()) ops.push_back("bilinear_resize[" + resize_in + "]");
    ops.insert(ops.end(), {"conv2d[k=3x3,d=1,p=1,s=1,c=3->4]", "relu", "maxpool2d[w=2,s=2]",
                           "conv2d[k=3x3,d=1,p=1,s=1,c=4->6]", "relu", "maxpool2d[w=2,s=2]",
                           "conv2d[k=3x3,d=2,p=2,s=1,c=6->8]", "relu", "conv2d[k=1x1,d=1,p=0,s=1,c=8->4]"});
    if (hw != 4) ops.push_back("bilinear_resize[4x4]");
    ops.push_back("conv2d[k=3x3,d=1,p=1,s=1,c=8->5]");
    ops.push_back("relu");
    if (hw != 4) ops.push_back("bilinear_resize[4x4]");
    return ops;
  };
  std::vector<std::string> expected = stream("", 4);
  auto half = stream("8x8", 2);
  expected.insert(expected.end(), half.begin(), half.end());
  expected.insert(expected.end(), {"concat_channels[2]", "conv2d[k=3x3,d=1,p=1,s=1,c=10->6]", "relu",
                                   "conv2d[k=1x1,d=1,p=0,s=1,c=6->2]", "fuse_attention[none]"});
  EXPECT_EQ(tape.op_sequence(), expected);

  for (const auto& p : parameter_layout(cfg)) {
    EXPECT_EQ(p.name.find("recalib"), std::string::npos);
    EXPECT_EQ(p.name.find("scale_conv/s0"), std::string::npos);
  }
}

TEST(ModelForward, StreamsShareBackboneWeights) {
  ModelConfig cfg = small_config(3);
  auto params = init_params<double>(cfg, 4);
  auto img = oracle::random_tensor({1, 3, 16, 16}, 5, 0, 1);
  LabelMap labels(1, 4, 4);
  for (std::size_t i = 0; i < labels.data.size(); ++i) labels.data[i] = std::uint8_t(i % 3);

  Tape<double> base;
  auto out = run(base, params, img, cfg);
  ParamMap<double> bumped = params;
  bumped.at("encoder/stage1/weight")[0] += 1e-3;
  Tape<double> moved;
  auto out2 = run(moved, bumped, img, cfg);
  for (std::size_t s = 0; s < 2; ++s) EXPECT_NE(out.scores[s].value(), out2.scores[s].value()) << s;

  for (std::size_t s = 0; s < 2; ++s) {
    Tape<double> tape;
    auto o = run(tape, params, img, cfg);
    auto g = tape.backward(cross_entropy(o.scores[s], labels));
    EXPECT_GT(g.at("encoder/stage1/weight").data().norm(), 0.0) << "stream " << s;
  }
}

TEST(ModelForward, FullGradcheckSmall) {
  ModelConfig cfg = small_config(3);
  auto img = oracle::random_tensor({2, 3, 16, 16}, 6, 0, 1);
  LabelMap labels(2, 4, 4);
  for (std::size_t i = 0; i < labels.data.size(); ++i) labels.data[i] = std::uint8_t((i * 7) % 3);
  for (RecalibMode mode : {RecalibMode::multiply, RecalibMode::bias}) {
    cfg.ablation.recalib = mode;
    ForwardFn<double> f = [&](Tape<double>& t, const VarMap<double>& v) {
      auto o = model_forward(t, v, img, cfg);
      return total_loss(o.scores, o.fused, labels).total;
    };
    auto r = finite_diff_check(f, init_params<double>(cfg, 7), 1e-5, 60, 1);
    EXPECT_LT(r.max_rel_err, 1e-4) << to_string(mode) << " " << r.worst_param;
  }
}

TEST(Params, LayoutInitAndDecoderSplit) {
  ModelConfig cfg;
  auto params = init_params<double>(cfg, 1);
  EXPECT_EQ(params.at("encoder/stage1/weight").shape(), (Shape{16, 3, 3, 3}));
  EXPECT_EQ(params.at("decoder/score/weight").shape(), (Shape{5, 64, 1, 1}));
  EXPECT_EQ(params.at("decoder/scale_conv/s0/weight").shape(), (Shape{32, 112, 3, 3}));
  EXPECT_EQ(params.at("decoder/location/out/weight").shape(), (Shape{2, 64, 1, 1}));
  EXPECT_EQ(params.at("decoder/recalib/out/weight").shape(), (Shape{5, 64, 1, 1}));
  EXPECT_TRUE(params.at("decoder/score/bias").data().isZero());
  EXPECT_TRUE(is_decoder_param("decoder/location/hidden/weight"));
  EXPECT_FALSE(is_decoder_param("encoder/stage3/bias"));

  // Fan-in scaled normal: sample std of the largest tensor near sqrt(2 / fan_in).
  const auto& w = params.at("decoder/scale_conv/s0/weight");
  const double sd = std::sqrt(w.data().squaredNorm() / double(w.size()));
  EXPECT_NEAR(sd, std::sqrt(2.0 / (112 * 9)), 0.02 * sd);

  EXPECT_EQ(init_params<double>(cfg, 1).at("encoder/stage2/weight"), params.at("encoder/stage2/weight"));
  EXPECT_NE(init_params<double>(cfg, 2).at("encoder/stage2/weight"), params.at("encoder/stage2/weight"));
}

TEST(Params, ConfigValidation) {
  ModelConfig cfg;
  cfg.ablation.fusion = FusionMode::maxpool;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);  // extra branch still on
  cfg.ablation.extra_branch = false;
  EXPECT_NO_THROW(cfg.validate());
  cfg.streams.dilations = {2};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = ModelConfig{};
  cfg.streams.scales = {0.5, 0.25};
  cfg.streams.dilations = {1, 2};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  EXPECT_EQ(parse_fusion_mode("avgpool"), FusionMode::avgpool);
  EXPECT_THROW(parse_recalib_mode("scale"), std::invalid_argument);
}
