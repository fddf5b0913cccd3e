#ifndef MSAT_LOSSES_HPP
#define MSAT_LOSSES_HPP

#include "msat/autodiff.hpp"
#include "msat/labels.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

namespace msat {

/// Mean over non-ignored pixels of -log softmax(scores)[label].
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& scores, const LabelMap& labels) {
  const Tensor<Scalar>& x = scores.value();
  require_rank4(x, "cross_entropy scores");
  const Index n = x.dim(0), k = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (labels.n != n || labels.h != h || labels.w != w) {
    throw ShapeError("cross_entropy: labels " + to_string({labels.n, labels.h, labels.w}) +
                     " do not match scores " + to_string(x.shape()));
  }
  const Index hw = h * w;
  double total = 0.0;
  Index count = 0;
  for (Index b = 0; b < n; ++b) {
    for (Index i = 0; i < hw; ++i) {
      const std::uint8_t label = labels.data[static_cast<std::size_t>(b * hw + i)];
      if (label == kIgnoreLabel) continue;
      if (label >= k) {
        throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                    " >= class count " + std::to_string(k));
      }
      const Scalar* px = x.raw() + b * k * hw + i;
      Scalar mx = px[0];
      for (Index c = 1; c < k; ++c) mx = std::max(mx, px[c * hw]);
      Scalar acc = 0;
      for (Index c = 0; c < k; ++c) acc += std::exp(px[c * hw] - mx);
      total += static_cast<double>(mx + std::log(acc) - px[label * hw]);
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: every pixel is ignored");

  auto saved = std::make_shared<LabelMap>(labels);
  return scores.tape()->record(
      "cross_entropy", {scores},
      Tensor<Scalar>::constant({1}, static_cast<Scalar>(total / static_cast<double>(count))),
      [saved, count](const Tape<Scalar>& t, const auto& node, const Tensor<Scalar>& g, auto grads) {
        if (!grads[0]) return;
        const Tensor<Scalar>& x = t.value(node.inputs[0]);
        const Index n = x.dim(0), k = x.dim(1), hw = x.dim(2) * x.dim(3);
        const Scalar coef = g[0] / static_cast<Scalar>(count);
        for (Index b = 0; b < n; ++b) {
          for (Index i = 0; i < hw; ++i) {
            const std::uint8_t label = saved->data[static_cast<std::size_t>(b * hw + i)];
            if (label == kIgnoreLabel) continue;
            const Scalar* px = x.raw() + b * k * hw + i;
            Scalar* gx = grads[0]->raw() + b * k * hw + i;
            Scalar mx = px[0];
            for (Index c = 1; c < k; ++c) mx = std::max(mx, px[c * hw]);
            Scalar acc = 0;
            for (Index c = 0; c < k; ++c) acc += std::exp(px[c * hw] - mx);
            for (Index c = 0; c < k; ++c) {
              const Scalar p = std::exp(px[c * hw] - mx) / acc;
              gx[c * hw] += coef * (p - (c == label ? Scalar(1) : Scalar(0)));
            }
          }
        }
      },
      "n_valid=" + std::to_string(count));
}

template <typename Scalar>
struct LossTerms {
  Var<Scalar> total;
  Var<Scalar> final_term;
  std::vector<Var<Scalar>> stream_terms;
};

/// Unweighted sum of 1+S cross-entropies: one per scale stream plus the fused map.
template <typename Scalar>
LossTerms<Scalar> total_loss(const std::vector<Var<Scalar>>& stream_scores,
                             const Var<Scalar>& final_scores, const LabelMap& labels) {
  LossTerms<Scalar> terms;
  terms.final_term = cross_entropy(final_scores, labels);
  terms.total = terms.final_term;
  for (const auto& s : stream_scores) {
    terms.stream_terms.push_back(cross_entropy(s, labels));
    terms.total = terms.total + terms.stream_terms.back();
  }
  return terms;
}

}  // namespace msat

#endif  // MSAT_LOSSES_HPP
