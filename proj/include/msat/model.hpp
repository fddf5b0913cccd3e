#ifndef MSAT_MODEL_HPP
#define MSAT_MODEL_HPP

#include "msat/autodiff.hpp"
#include "msat/rng.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace msat {

enum class FusionMode { attention, maxpool, avgpool };
enum class RecalibMode { multiply, bias };

std::string to_string(FusionMode mode);
std::string to_string(RecalibMode mode);
FusionMode parse_fusion_mode(const std::string& s);
RecalibMode parse_recalib_mode(const std::string& s);

/// Three conv+ReLU stages; max-pool (2x2, stride 2) after stages 1 and 2, so
/// stage 2 and 3 run at input/4. Stage 3 is dilated instead of downsampled.
struct BackboneConfig {
  std::array<Index, 3> widths{16, 32, 64};
  Index in_channels = 3;
  Index n_class = 5;
  Index stage3_dilation = 2;
};

/// Scale streams. dilations[i] is the dilation of the scale-specific conv for
/// scales[i].
struct ScaleStreamConfig {
  std::vector<double> scales{1.0, 0.5};
  std::vector<Index> dilations{12, 2};
  Index scale_conv_channels = 32;
  Index hidden = 64;
};

/// Graph toggles. The attention-to-scale baseline is
/// {multi_stage=false, diverse_dilations=false, fusion=attention, extra_branch=false}.
struct Ablation {
  bool multi_stage = true;
  bool diverse_dilations = true;
  FusionMode fusion = FusionMode::attention;
  bool extra_branch = true;
  RecalibMode recalib = RecalibMode::multiply;
};

struct ModelConfig {
  BackboneConfig backbone;
  ScaleStreamConfig streams;
  Ablation ablation;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  Index num_scales() const { return static_cast<Index>(streams.scales.size()); }
  Index feature_channels() const;  // channels entering the scale-specific conv
  std::optional<std::size_t> scale_index(double scale) const;
};

struct ParamSpec {
  std::string name;
  Shape shape;
};

/// Every parameter the configured graph uses, in creation order.
std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg);

/// Decoder = score convs, scale-specific convs and both attention branches.
inline bool is_decoder_param(const std::string& name) { return name.rfind("decoder/", 0) == 0; }

inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

/// Kaiming-normal conv weights (std = sqrt(2 / fan_in)), zero biases. Each
/// tensor draws from its own stream keyed by (seed, name).
template <typename Scalar>
ParamMap<Scalar> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ParamMap<Scalar> params;
  for (const auto& spec : parameter_layout(cfg)) {
    Tensor<Scalar> t(spec.shape);
    if (spec.shape.size() == 4) {
      const double fan_in = static_cast<double>(spec.shape[1] * spec.shape[2] * spec.shape[3]);
      const double stddev = std::sqrt(2.0 / fan_in);
      CounterRng rng(hash_combine(seed, name_hash(spec.name)));
      for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(stddev * rng.normal());
    }
    params.emplace(spec.name, std::move(t));
  }
  return params;
}

template <typename Scalar>
struct AttentionMaps {
  Var<Scalar> location_logits;                     // N x S x h x w, pre-softmax
  std::optional<Var<Scalar>> recalibration_logits;  // N x nClass x h x w, pre-sigmoid
  std::optional<Var<Scalar>> recalibration;         // sigmoid of the above
};

template <typename Scalar>
struct StreamOutputs {
  std::vector<Var<Scalar>> scores;  // P^s at the common resolution
  std::optional<AttentionMaps<Scalar>> attention;
  Var<Scalar> fused;
};

namespace detail {

template <typename Scalar>
const Var<Scalar>& param(const VarMap<Scalar>& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::invalid_argument("missing model parameter '" + name + "'");
  return it->second;
}

template <typename Scalar>
Var<Scalar> conv_layer(const VarMap<Scalar>& params, const std::string& prefix, const Var<Scalar>& x,
                       const Conv2dSpec& spec) {
  return conv2d(x, param(params, prefix + "/weight"), param(params, prefix + "/bias"), spec);
}

inline Conv2dSpec conv3x3(Index in, Index out, Index dilation) {
  return Conv2dSpec::square(in, out, 3, dilation, dilation);
}

inline Conv2dSpec conv1x1(Index in, Index out) { return Conv2dSpec::square(in, out, 1); }

}  // namespace detail

/// Shared-weight backbone. Returns the ReLU output of each stage:
/// stage 1 after its pool (H/2), stage 2 after its pool (H/4), stage 3 (H/4).
template <typename Scalar>
std::vector<Var<Scalar>> backbone_forward(const VarMap<Scalar>& params, const Var<Scalar>& image,
                                          const ModelConfig& cfg) {
  const auto& shape = image.shape();
  if (shape.size() != 4 || shape[1] != cfg.backbone.in_channels) {
    throw ShapeError("backbone: image must be Nx" + std::to_string(cfg.backbone.in_channels) +
                     "xHxW, got " + to_string(shape));
  }
  if (shape[2] % 4 != 0 || shape[3] % 4 != 0) {
    throw ShapeError("backbone: image size " + std::to_string(shape[2]) + "x" +
                     std::to_string(shape[3]) +
                     " is not divisible by 4; pad the input to a multiple of 4");
  }
  const auto& w = cfg.backbone.widths;
  std::vector<Var<Scalar>> stages;
  auto x = relu(detail::conv_layer(params, "encoder/stage1", image,
                                   detail::conv3x3(cfg.backbone.in_channels, w[0], 1)));
  x = maxpool2d(x, 2, 2);
  stages.push_back(x);
  x = relu(detail::conv_layer(params, "encoder/stage2", x, detail::conv3x3(w[0], w[1], 1)));
  x = maxpool2d(x, 2, 2);
  stages.push_back(x);
  x = relu(detail::conv_layer(params, "encoder/stage3", x,
                              detail::conv3x3(w[1], w[2], cfg.backbone.stage3_dilation)));
  stages.push_back(x);
  return stages;
}

/// Resizes every stage to the second stage's resolution (the twice-pooled
/// size) and concatenates along channels in stage order. A single stage is
/// passed through.
template <typename Scalar>
Var<Scalar> hypercolumn_fuse(std::span<const Var<Scalar>> stages) {
  if (stages.empty()) throw ShapeError("hypercolumn_fuse: no stage features");
  if (stages.size() == 1) return stages.front();
  const Index h = stages[1].shape()[2], w = stages[1].shape()[3];
  std::vector<Var<Scalar>> resized;
  for (const auto& s : stages) {
    resized.push_back(s.shape()[2] == h && s.shape()[3] == w ? s : bilinear_resize(s, h, w));
  }
  return concat_channels(resized);
}

/// 3x3 conv with this scale's own dilation and weights (padding = dilation),
/// followed by ReLU.
template <typename Scalar>
Var<Scalar> scale_specific_conv(const VarMap<Scalar>& params, const Var<Scalar>& fused, double scale,
                                const ModelConfig& cfg) {
  const auto idx = cfg.scale_index(scale);
  if (!idx) throw std::invalid_argument("scale_specific_conv: unknown scale " + std::to_string(scale));
  const Index in = fused.shape()[1];
  const Index dil = cfg.streams.dilations[*idx];
  return relu(detail::conv_layer(params, "decoder/scale_conv/s" + std::to_string(*idx), fused,
                                 detail::conv3x3(in, cfg.streams.scale_conv_channels, dil)));
}

/// Plain 3x3 conv shared by all scales; stands in for the per-scale dilated
/// convs when diverse dilations are ablated.
template <typename Scalar>
Var<Scalar> shared_stream_conv(const VarMap<Scalar>& params, const Var<Scalar>& fused,
                               const ModelConfig& cfg) {
  return relu(detail::conv_layer(params, "decoder/scale_conv/shared", fused,
                                 detail::conv3x3(fused.shape()[1], cfg.streams.scale_conv_channels, 1)));
}

/// Concatenates the per-scale features and runs the two parallel branches,
/// each conv3x3(hidden) -> ReLU -> conv1x1. The location branch emits S
/// logits; the recalibration branch (extra_branch only) emits nClass logits
/// and their sigmoid.
template <typename Scalar>
AttentionMaps<Scalar> attention_head(const VarMap<Scalar>& params,
                                     std::span<const Var<Scalar>> per_scale,
                                     const ModelConfig& cfg) {
  if (per_scale.empty()) throw ShapeError("attention_head: no inputs");
  for (const auto& v : per_scale) {
    if (v.shape() != per_scale.front().shape()) {
      throw ShapeError("attention_head: input shapes differ, " + to_string(v.shape()) + " vs " +
                       to_string(per_scale.front().shape()));
    }
  }
  const Index s = static_cast<Index>(per_scale.size());
  const Index hidden = cfg.streams.hidden;
  auto joined = concat_channels(per_scale);
  const Index in = joined.shape()[1];

  AttentionMaps<Scalar> maps;
  auto loc = relu(detail::conv_layer(params, "decoder/location/hidden", joined,
                                     detail::conv3x3(in, hidden, 1)));
  maps.location_logits =
      detail::conv_layer(params, "decoder/location/out", loc, detail::conv1x1(hidden, s));
  if (cfg.ablation.extra_branch) {
    auto rec = relu(detail::conv_layer(params, "decoder/recalib/hidden", joined,
                                       detail::conv3x3(in, hidden, 1)));
    maps.recalibration_logits = detail::conv_layer(params, "decoder/recalib/out", rec,
                                                   detail::conv1x1(hidden, cfg.backbone.n_class));
    maps.recalibration = sigmoid(*maps.recalibration_logits);
  }
  return maps;
}

namespace detail {
template <typename Scalar>
void check_stream_list(std::span<const Var<Scalar>> scores, const char* op) {
  if (scores.empty()) throw ShapeError(std::string(op) + ": empty score list");
  for (const auto& p : scores) {
    require_rank4(p.value(), op);
    if (p.shape() != scores.front().shape()) {
      throw ShapeError(std::string(op) + ": score maps differ in shape, " + to_string(p.shape()) +
                       " vs " + to_string(scores.front().shape()));
    }
  }
}
}  // namespace detail

/// Location-attention fusion: M[c,i] = sum_s softmax_s(wl)[s,i] * Q^s[c,i] with
/// Q^s = P^s * r (multiply), P^s + r (bias) or P^s (no recalibration).
/// `recalibration` must be the post-sigmoid map for multiply and the
/// pre-sigmoid map for bias.
template <typename Scalar>
Var<Scalar> fuse_attention(std::span<const Var<Scalar>> scores, const Var<Scalar>& location_logits,
                           const std::optional<Var<Scalar>>& recalibration, RecalibMode mode) {
  detail::check_stream_list(scores, "fuse_attention");
  const Shape& ps = scores.front().shape();
  const Index n = ps[0], k = ps[1], hw = ps[2] * ps[3];
  const Index s_count = static_cast<Index>(scores.size());
  const Shape& ls = location_logits.shape();
  if (ls.size() != 4 || ls[0] != n || ls[1] != s_count || ls[2] != ps[2] || ls[3] != ps[3]) {
    throw ShapeError("fuse_attention: location logits " + to_string(ls) + " must be [" +
                     std::to_string(n) + "x" + std::to_string(s_count) + "x" + std::to_string(ps[2]) +
                     "x" + std::to_string(ps[3]) + "] for " + std::to_string(s_count) + " streams");
  }
  if (recalibration && recalibration->shape() != ps) {
    throw ShapeError("fuse_attention: recalibration map " + to_string(recalibration->shape()) +
                     " does not match score maps " + to_string(ps));
  }
  const bool has_recal = recalibration.has_value();
  const bool multiply = mode == RecalibMode::multiply;

  using Mat = detail::RowMajorMatrix<Scalar>;
  using CMap = detail::ConstMatrixMap<Scalar>;
  using MMap = detail::MatrixMap<Scalar>;

  const Tensor<Scalar> weights = softmax_channels(location_logits.value());
  Tensor<Scalar> out({n, k, ps[2], ps[3]});
  for (Index b = 0; b < n; ++b) {
    CMap l(weights.raw() + b * s_count * hw, s_count, hw);
    MMap m(out.raw() + b * k * hw, k, hw);
    for (Index s = 0; s < s_count; ++s) {
      CMap p(scores[static_cast<std::size_t>(s)].value().raw() + b * k * hw, k, hw);
      Mat q = p;
      if (has_recal) {
        CMap r(recalibration->value().raw() + b * k * hw, k, hw);
        if (multiply) q.array() *= r.array(); else q += r;
      }
      m.array() += q.array().rowwise() * l.row(s).array();
    }
  }

  std::vector<Var<Scalar>> inputs(scores.begin(), scores.end());
  inputs.push_back(location_logits);
  if (has_recal) inputs.push_back(*recalibration);

  auto backward = [s_count, has_recal, multiply, weights](const Tape<Scalar>& t, const auto& node,
                                                         const Tensor<Scalar>& g, auto grads) {
    const Index n = g.dim(0), k = g.dim(1), hw = g.dim(2) * g.dim(3);
    const auto lidx = static_cast<std::size_t>(s_count);
    const Tensor<Scalar>* recal = has_recal ? &t.value(node.inputs[lidx + 1]) : nullptr;
    Tensor<Scalar>* grad_recal = has_recal ? grads[lidx + 1] : nullptr;
    Mat gl(s_count, hw);
    for (Index b = 0; b < n; ++b) {
      CMap gm(g.raw() + b * k * hw, k, hw);
      CMap l(weights.raw() + b * s_count * hw, s_count, hw);
      for (Index s = 0; s < s_count; ++s) {
        const auto si = static_cast<std::size_t>(s);
        CMap p(t.value(node.inputs[si]).raw() + b * k * hw, k, hw);
        // dM/dQ^s = l_s broadcast over channels.
        Mat gq = gm.array().rowwise() * l.row(s).array();
        Mat q = p;
        if (recal) {
          CMap r(recal->raw() + b * k * hw, k, hw);
          if (multiply) {
            q.array() *= r.array();
            if (grads[si]) MMap(grads[si]->raw() + b * k * hw, k, hw).array() += gq.array() * r.array();
            if (grad_recal) MMap(grad_recal->raw() + b * k * hw, k, hw).array() += gq.array() * p.array();
          } else {
            q += r;
            if (grads[si]) MMap(grads[si]->raw() + b * k * hw, k, hw) += gq;
            if (grad_recal) MMap(grad_recal->raw() + b * k * hw, k, hw) += gq;
          }
        } else if (grads[si]) {
          MMap(grads[si]->raw() + b * k * hw, k, hw) += gq;
        }
        gl.row(s) = (gm.array() * q.array()).colwise().sum();
      }
      if (grads[lidx]) {
        // Softmax VJP over the scale axis.
        const auto dot = (l.array() * gl.array()).colwise().sum().eval();
        MMap(grads[lidx]->raw() + b * s_count * hw, s_count, hw).array() +=
            l.array() * (gl.array().rowwise() - dot);
      }
    }
  };
  std::string attrs = !has_recal ? "none" : (multiply ? "multiply" : "bias");
  return location_logits.tape()->record("fuse_attention", std::span<const Var<Scalar>>(inputs),
                                        std::move(out), std::move(backward), std::move(attrs));
}

/// Elementwise max or mean across the stream list (pooling-merge baselines).
/// Max ties go to the earliest stream.
template <typename Scalar>
Var<Scalar> fuse_pooling(std::span<const Var<Scalar>> scores, FusionMode mode) {
  if (scores.empty()) throw ShapeError("fuse_pooling: empty score list");
  if (mode == FusionMode::attention) throw std::invalid_argument("fuse_pooling: mode must be max or avg");
  detail::check_stream_list(scores, "fuse_pooling");
  const bool is_max = mode == FusionMode::maxpool;
  const auto s_count = scores.size();
  Tensor<Scalar> out = scores.front().value();
  for (std::size_t s = 1; s < s_count; ++s) {
    if (is_max) {
      out.data() = out.data().cwiseMax(scores[s].value().data());
    } else {
      out.data() += scores[s].value().data();
    }
  }
  if (!is_max) out.data() /= static_cast<Scalar>(s_count);

  auto backward = [is_max, s_count](const Tape<Scalar>& t, const auto& node, const Tensor<Scalar>& g,
                                    auto grads) {
    if (!is_max) {
      const Scalar inv = Scalar(1) / static_cast<Scalar>(s_count);
      for (std::size_t s = 0; s < s_count; ++s) {
        if (grads[s]) grads[s]->data() += g.data() * inv;
      }
      return;
    }
    for (Index i = 0; i < g.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t s = 1; s < s_count; ++s) {
        if (t.value(node.inputs[s])[i] > t.value(node.inputs[best])[i]) best = s;
      }
      if (grads[best]) (*grads[best])[i] += g[i];
    }
  };
  return scores.front().tape()->record("fuse_pooling", scores, std::move(out), std::move(backward),
                                       is_max ? "max" : "avg");
}

/// Full multi-scale graph. For each scale: resize the image, run the shared
/// backbone, score stage 3 with the shared 1x1 decoder conv and resize P^s to
/// the common (full-scale /4) resolution. Attention fusion additionally builds
/// per-stream features (hypercolumn or last stage), a scale-specific or shared
/// conv, and the attention head.
template <typename Scalar>
StreamOutputs<Scalar> model_forward(const VarMap<Scalar>& params, const Var<Scalar>& image,
                                    const ModelConfig& cfg) {
  cfg.validate();
  require_rank4(image.value(), "model_forward image");
  const Index h = image.shape()[2], w = image.shape()[3];
  if (h % 4 != 0 || w % 4 != 0) {
    throw ShapeError("model_forward: image size " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not divisible by 4; pad the input");
  }
  const Index common_h = h / 4, common_w = w / 4;
  const bool attention = cfg.ablation.fusion == FusionMode::attention;

  StreamOutputs<Scalar> out;
  std::vector<Var<Scalar>> processed;
  for (std::size_t si = 0; si < cfg.streams.scales.size(); ++si) {
    const double scale = cfg.streams.scales[si];
    const double sh = static_cast<double>(h) * scale, sw = static_cast<double>(w) * scale;
    const auto ih = static_cast<Index>(std::lround(sh)), iw = static_cast<Index>(std::lround(sw));
    if (std::abs(sh - static_cast<double>(ih)) > 1e-9 || std::abs(sw - static_cast<double>(iw)) > 1e-9 ||
        ih % 4 != 0 || iw % 4 != 0) {
      throw ShapeError("model_forward: " + std::to_string(h) + "x" + std::to_string(w) +
                       " at scale " + std::to_string(scale) +
                       " is not an integer multiple of 4; pad the input");
    }
    Var<Scalar> x = (ih == h && iw == w) ? image : bilinear_resize(image, ih, iw);
    auto stages = backbone_forward(params, x, cfg);

    auto score = detail::conv_layer(params, "decoder/score", stages.back(),
                                    detail::conv1x1(cfg.backbone.widths[2], cfg.backbone.n_class));
    if (score.shape()[2] != common_h || score.shape()[3] != common_w) {
      score = bilinear_resize(score, common_h, common_w);
    }
    out.scores.push_back(score);

    if (!attention) continue;
    Var<Scalar> feat = cfg.ablation.multi_stage
                           ? hypercolumn_fuse(std::span<const Var<Scalar>>(stages))
                           : stages.back();
    Var<Scalar> proc = cfg.ablation.diverse_dilations ? scale_specific_conv(params, feat, scale, cfg)
                                                      : shared_stream_conv(params, feat, cfg);
    if (proc.shape()[2] != common_h || proc.shape()[3] != common_w) {
      proc = bilinear_resize(proc, common_h, common_w);
    }
    processed.push_back(proc);
  }

  if (attention) {
    auto maps = attention_head(params, std::span<const Var<Scalar>>(processed), cfg);
    std::optional<Var<Scalar>> recal;
    if (cfg.ablation.extra_branch) {
      recal = cfg.ablation.recalib == RecalibMode::multiply ? maps.recalibration
                                                            : maps.recalibration_logits;
    }
    out.fused = fuse_attention(std::span<const Var<Scalar>>(out.scores), maps.location_logits, recal,
                               cfg.ablation.recalib);
    out.attention = std::move(maps);
  } else {
    out.fused = fuse_pooling(std::span<const Var<Scalar>>(out.scores), cfg.ablation.fusion);
  }
  return out;
}

template <typename Scalar>
StreamOutputs<Scalar> model_forward(Tape<Scalar>& tape, const VarMap<Scalar>& params,
                                    const Tensor<Scalar>& image, const ModelConfig& cfg) {
  return model_forward(params, tape.constant(image), cfg);
}

}  // namespace msat

#endif  // MSAT_MODEL_HPP
