#ifndef MSAT_LABELS_HPP
#define MSAT_LABELS_HPP

#include "msat/tensor.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace msat {

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Integer class grid, N x H x W, row-major. 255 marks pixels excluded from
/// losses and metrics.
struct LabelMap {
  Index n = 0;
  Index h = 0;
  Index w = 0;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(Index n_, Index h_, Index w_, std::uint8_t fill = 0)
      : n(n_), h(h_), w(w_), data(static_cast<std::size_t>(n_ * h_ * w_), fill) {}

  Index size() const { return n * h * w; }
  std::uint8_t& operator()(Index b, Index y, Index x) {
    return data[static_cast<std::size_t>((b * h + y) * w + x)];
  }
  std::uint8_t operator()(Index b, Index y, Index x) const {
    return data[static_cast<std::size_t>((b * h + y) * w + x)];
  }

  bool operator==(const LabelMap&) const = default;
};

/// Nearest-neighbour resampling; source index = floor((i + 0.5) * in / out).
inline LabelMap resize_nearest(const LabelMap& labels, Index out_h, Index out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_nearest: output size must be >= 1");
  LabelMap out(labels.n, out_h, out_w);
  for (Index b = 0; b < labels.n; ++b) {
    for (Index y = 0; y < out_h; ++y) {
      const Index sy = (2 * y + 1) * labels.h / (2 * out_h);
      for (Index x = 0; x < out_w; ++x) {
        const Index sx = (2 * x + 1) * labels.w / (2 * out_w);
        out(b, y, x) = labels(b, sy, sx);
      }
    }
  }
  return out;
}

/// Stacks single-image label maps into one batch.
inline LabelMap stack_labels(const std::vector<const LabelMap*>& parts) {
  if (parts.empty()) throw ShapeError("stack_labels: empty input list");
  LabelMap out(0, parts.front()->h, parts.front()->w);
  for (const auto* p : parts) {
    if (p->h != out.h || p->w != out.w) throw ShapeError("stack_labels: spatial size mismatch");
    out.data.insert(out.data.end(), p->data.begin(), p->data.end());
    out.n += p->n;
  }
  return out;
}

/// Per-pixel argmax over channels of an N x K x H x W score tensor; ties go
/// to the lowest class index.
template <typename Scalar>
LabelMap argmax_channels(const Tensor<Scalar>& scores) {
  require_rank4(scores, "argmax_channels input");
  const Index n = scores.dim(0), k = scores.dim(1), h = scores.dim(2), w = scores.dim(3);
  if (k > 255) throw ShapeError("argmax_channels: at most 255 classes supported");
  LabelMap out(n, h, w);
  const Index hw = h * w;
  for (Index b = 0; b < n; ++b) {
    for (Index i = 0; i < hw; ++i) {
      const Scalar* base = scores.raw() + b * k * hw + i;
      Index best = 0;
      for (Index c = 1; c < k; ++c) {
        if (base[c * hw] > base[best * hw]) best = c;
      }
      out.data[static_cast<std::size_t>(b * hw + i)] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

}  // namespace msat

#endif  // MSAT_LABELS_HPP
