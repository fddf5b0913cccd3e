#include "msat/model.hpp"

#include <algorithm>
#include <cmath>

namespace msat {

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::attention: return "attention";
    case FusionMode::maxpool: return "maxpool";
    case FusionMode::avgpool: return "avgpool";
  }
  return "?";
}

std::string to_string(RecalibMode mode) {
  return mode == RecalibMode::multiply ? "multiply" : "bias";
}

FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "attention") return FusionMode::attention;
  if (s == "maxpool" || s == "max") return FusionMode::maxpool;
  if (s == "avgpool" || s == "avg") return FusionMode::avgpool;
  throw std::invalid_argument("unknown fusion mode '" + s + "' (expected attention|maxpool|avgpool)");
}

RecalibMode parse_recalib_mode(const std::string& s) {
  if (s == "multiply") return RecalibMode::multiply;
  if (s == "bias") return RecalibMode::bias;
  throw std::invalid_argument("unknown recalibration mode '" + s + "' (expected multiply|bias)");
}

void ModelConfig::validate() const {
  const auto& sc = streams.scales;
  if (sc.empty()) throw std::invalid_argument("config: at least one scale required");
  if (streams.dilations.size() != sc.size()) {
    throw std::invalid_argument("config: need exactly one dilation per scale (" +
                                std::to_string(sc.size()) + " scales, " +
                                std::to_string(streams.dilations.size()) + " dilations)");
  }
  bool has_unit = false;
  for (std::size_t i = 0; i < sc.size(); ++i) {
    if (!(sc[i] > 0.0 && sc[i] <= 1.0)) {
      throw std::invalid_argument("config: scale " + std::to_string(sc[i]) + " outside (0, 1]");
    }
    if (sc[i] == 1.0) has_unit = true;
    for (std::size_t j = 0; j < i; ++j) {
      if (sc[i] == sc[j]) throw std::invalid_argument("config: duplicate scale " + std::to_string(sc[i]));
    }
    if (streams.dilations[i] < 1) throw std::invalid_argument("config: dilations must be >= 1");
  }
  if (!has_unit) throw std::invalid_argument("config: scale 1.0 must be present");
  for (Index wdt : backbone.widths) {
    if (wdt < 1) throw std::invalid_argument("config: backbone widths must be >= 1");
  }
  if (backbone.n_class < 1 || backbone.n_class > 255) {
    throw std::invalid_argument("config: n_class must be in [1, 255]");
  }
  if (streams.hidden < 1 || streams.scale_conv_channels < 1 || backbone.stage3_dilation < 1) {
    throw std::invalid_argument("config: hidden/scale_conv_channels/stage3_dilation must be >= 1");
  }
  if (ablation.fusion != FusionMode::attention && ablation.extra_branch) {
    throw std::invalid_argument("config: pooling merge (" + to_string(ablation.fusion) +
                                ") cannot be combined with extra_branch");
  }
}

Index ModelConfig::feature_channels() const {
  const auto& w = backbone.widths;
  return ablation.multi_stage ? w[0] + w[1] + w[2] : w[2];
}

std::optional<std::size_t> ModelConfig::scale_index(double scale) const {
  for (std::size_t i = 0; i < streams.scales.size(); ++i) {
    if (std::abs(streams.scales[i] - scale) < 1e-12) return i;
  }
  return std::nullopt;
}

std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  auto conv = [&out](const std::string& prefix, Index in, Index outc, Index k) {
    out.push_back({prefix + "/weight", {outc, in, k, k}});
    out.push_back({prefix + "/bias", {outc}});
  };
  const auto& w = cfg.backbone.widths;
  const Index n_class = cfg.backbone.n_class;
  conv("encoder/stage1", cfg.backbone.in_channels, w[0], 3);
  conv("encoder/stage2", w[0], w[1], 3);
  conv("encoder/stage3", w[1], w[2], 3);
  conv("decoder/score", w[2], n_class, 1);
  if (cfg.ablation.fusion == FusionMode::attention) {
    const Index feat = cfg.feature_channels();
    const Index scc = cfg.streams.scale_conv_channels;
    if (cfg.ablation.diverse_dilations) {
      for (std::size_t i = 0; i < cfg.streams.scales.size(); ++i) {
        conv("decoder/scale_conv/s" + std::to_string(i), feat, scc, 3);
      }
    } else {
      conv("decoder/scale_conv/shared", feat, scc, 3);
    }
    const Index joined = scc * cfg.num_scales();
    conv("decoder/location/hidden", joined, cfg.streams.hidden, 3);
    conv("decoder/location/out", cfg.streams.hidden, cfg.num_scales(), 1);
    if (cfg.ablation.extra_branch) {
      conv("decoder/recalib/hidden", joined, cfg.streams.hidden, 3);
      conv("decoder/recalib/out", cfg.streams.hidden, n_class, 1);
    }
  }
  return out;
}

}  // namespace msat
