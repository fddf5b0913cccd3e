#ifndef MSAT_AUTODIFF_HPP
#define MSAT_AUTODIFF_HPP

#include "msat/kernels.hpp"
#include "msat/tensor.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace msat {

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; the tape must outlive it.
template <typename Scalar>
class Var {
 public:
  Var() = default;

  Tape<Scalar>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor<Scalar>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape<Scalar>;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
using ParamMap = std::map<std::string, Tensor<Scalar>>;

template <typename Scalar>
using Gradients = std::map<std::string, Tensor<Scalar>>;

template <typename Scalar>
using VarMap = std::map<std::string, Var<Scalar>>;

/// Define-by-run record of tensor operations. Nodes are appended in
/// evaluation order, so insertion order is a topological order and backward
/// simply walks it in reverse.
template <typename Scalar>
class Tape {
 public:
  using TensorT = Tensor<Scalar>;
  struct Node;
  // Receives the gradient w.r.t. this node's output and accumulates (+=) into
  // the gradient buffers of its inputs. A null buffer means that input does not
  // need a gradient.
  using BackwardFn = std::function<void(const Tape&, const Node&, const TensorT& grad,
                                        std::span<TensorT* const> input_grads)>;

  struct Node {
    std::string op;
    std::string attrs;
    std::vector<std::size_t> inputs;
    TensorT value;
    BackwardFn backward;
    bool requires_grad = false;
    std::string name;  // parameters only
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> parameter(std::string name, TensorT value) {
    if (params_.contains(name)) throw TapeError("parameter '" + name + "' registered twice");
    Node n;
    n.op = "parameter";
    n.value = std::move(value);
    n.requires_grad = true;
    n.name = name;
    nodes_.push_back(std::move(n));
    params_.emplace(std::move(name), nodes_.size() - 1);
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  Var<Scalar> constant(TensorT value) {
    Node n;
    n.op = "constant";
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  Var<Scalar> record(std::string op, std::span<const Var<Scalar>> inputs, TensorT output,
                     BackwardFn backward, std::string attrs = {}) {
    Node n;
    n.op = std::move(op);
    n.attrs = std::move(attrs);
    n.value = std::move(output);
    n.backward = std::move(backward);
    for (const auto& v : inputs) {
      check_owned(v, n.op);
      n.inputs.push_back(v.id());
      n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
    }
#ifndef NDEBUG
    bool inputs_finite = true;
    for (auto id : n.inputs) inputs_finite = inputs_finite && nodes_[id].value.all_finite();
    if (inputs_finite && !n.value.all_finite()) {
      throw std::runtime_error("op '" + n.op + "' produced non-finite output from finite inputs");
    }
#endif
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  Var<Scalar> record(std::string op, std::initializer_list<Var<Scalar>> inputs, TensorT output,
                     BackwardFn backward, std::string attrs = {}) {
    return record(std::move(op), std::span<const Var<Scalar>>(inputs.begin(), inputs.size()),
                  std::move(output), std::move(backward), std::move(attrs));
  }

  const TensorT& value(const Var<Scalar>& v) const {
    check_owned(v, "value");
    return nodes_[v.id()].value;
  }
  const TensorT& value(std::size_t id) const { return nodes_.at(id).value; }

  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  std::optional<Var<Scalar>> find_parameter(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) return std::nullopt;
    return Var<Scalar>(this, it->second);
  }

  /// Non-leaf ops in insertion order as "op" or "op[attrs]".
  std::vector<std::string> op_sequence() const {
    std::vector<std::string> seq;
    for (const auto& n : nodes_) {
      if (n.op == "parameter" || n.op == "constant") continue;
      seq.push_back(n.attrs.empty() ? n.op : n.op + "[" + n.attrs + "]");
    }
    return seq;
  }

  /// Describes the first node holding a non-finite value, if any.
  std::optional<std::string> first_non_finite() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].value.all_finite()) {
        const auto& n = nodes_[i];
        return "node " + std::to_string(i) + " (" + n.op + (n.name.empty() ? "" : " '" + n.name + "'") +
               ", shape " + to_string(n.value.shape()) + ")";
      }
    }
    return std::nullopt;
  }

  /// Reverse sweep from a scalar loss. Every registered parameter gets an entry;
  /// parameters the loss does not depend on get zeros. `visit_order`, when
  /// given, receives the ids of nodes whose backward rule ran.
  Gradients<Scalar> backward(const Var<Scalar>& loss,
                             std::vector<std::size_t>* visit_order = nullptr) const {
    check_owned(loss, "backward");
    const auto& root = nodes_[loss.id()];
    if (root.value.shape() != Shape{1}) {
      throw TapeError("backward: loss must be a scalar of shape [1], got " +
                      to_string(root.value.shape()));
    }
    std::vector<TensorT> grads(loss.id() + 1);
    grads[loss.id()] = TensorT::constant({1}, Scalar(1));
    std::vector<TensorT*> input_grads;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (!n.requires_grad || grads[i].empty() || !n.backward) continue;
      input_grads.clear();
      for (auto id : n.inputs) {
        if (!nodes_[id].requires_grad) {
          input_grads.push_back(nullptr);
          continue;
        }
        if (grads[id].empty()) grads[id] = TensorT::zeros(nodes_[id].value.shape());
        input_grads.push_back(&grads[id]);
      }
      n.backward(*this, n, grads[i], input_grads);
      if (visit_order) visit_order->push_back(i);
      grads[i] = TensorT();
    }
    Gradients<Scalar> out;
    for (const auto& [name, id] : params_) {
      if (id < grads.size() && !grads[id].empty()) {
        out.emplace(name, std::move(grads[id]));
      } else {
        out.emplace(name, TensorT::zeros(nodes_[id].value.shape()));
      }
    }
    return out;
  }

 private:
  void check_owned(const Var<Scalar>& v, const std::string& what) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw TapeError(what + ": input is not recorded on this tape");
    }
  }

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> params_;
};

template <typename Scalar>
VarMap<Scalar> register_parameters(Tape<Scalar>& tape, const ParamMap<Scalar>& params) {
  VarMap<Scalar> vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.parameter(name, value));
  return vars;
}

template <typename Scalar>
Gradients<Scalar> backward(const Var<Scalar>& loss) {
  return loss.tape()->backward(loss);
}

// ---------------------------------------------------------------------------
// Differentiable operations. Each records the forward result and a backward
// rule; names match the tensor kernels they wrap.

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   const Conv2dSpec& spec) {
  auto out = conv2d(x.value(), weight.value(), bias.value(), spec);
  std::string attrs = "k=" + std::to_string(spec.kernel[0]) + "x" + std::to_string(spec.kernel[1]) +
                      ",d=" + std::to_string(spec.dilation[0]) +
                      ",p=" + std::to_string(spec.padding[0]) +
                      ",s=" + std::to_string(spec.stride[0]) +
                      ",c=" + std::to_string(spec.in_channels) + "->" +
                      std::to_string(spec.out_channels);
  return x.tape()->record(
      "conv2d", {x, weight, bias}, std::move(out),
      [spec](const Tape<Scalar>& t, const auto& node, const Tensor<Scalar>& g, auto grads) {
        conv2d_backward(t.value(node.inputs[0]), t.value(node.inputs[1]), g, spec, grads[0],
                        grads[1], grads[2]);
      },
      std::move(attrs));
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  return x.tape()->record("relu", {x}, relu(x.value()),
                          [](const Tape<Scalar>&, const auto& node, const Tensor<Scalar>& g, auto grads) {
                            if (!grads[0]) return;
                            grads[0]->data().array() +=
                                (node.value.data().array() > Scalar(0)).select(g.data().array(), Scalar(0));
                          });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  return x.tape()->record("sigmoid", {x}, sigmoid(x.value()),
                          [](const Tape<Scalar>&, const auto& node, const Tensor<Scalar>& g, auto grads) {
                            if (!grads[0]) return;
                            const auto y = node.value.data().array();
                            grads[0]->data().array() += g.data().array() * y * (Scalar(1) - y);
                          });
}

template <typename Scalar>
Var<Scalar> softmax_channels(const Var<Scalar>& x) {
  return x.tape()->record("softmax_channels", {x}, softmax_channels(x.value()),
                          [](const Tape<Scalar>&, const auto& node, const Tensor<Scalar>& g, auto grads) {
                            if (grads[0]) softmax_channels_backward(node.value, g, *grads[0]);
                          });
}

template <typename Scalar>
Var<Scalar> maxpool2d(const Var<Scalar>& x, Index window, Index stride) {
  auto res = maxpool2d(x.value(), window, stride);
  auto argmax = std::make_shared<std::vector<Index>>(std::move(res.argmax));
  return x.tape()->record(
      "maxpool2d", {x}, std::move(res.output),
      [argmax](const Tape<Scalar>&, const auto&, const Tensor<Scalar>& g, auto grads) {
        if (grads[0]) maxpool2d_backward<Scalar>(g, *argmax, *grads[0]);
      },
      "w=" + std::to_string(window) + ",s=" + std::to_string(stride));
}

template <typename Scalar>
Var<Scalar> avgpool2d(const Var<Scalar>& x, Index window, Index stride) {
  return x.tape()->record(
      "avgpool2d", {x}, avgpool2d(x.value(), window, stride),
      [window, stride](const Tape<Scalar>&, const auto&, const Tensor<Scalar>& g, auto grads) {
        if (grads[0]) avgpool2d_backward(g, window, stride, *grads[0]);
      },
      "w=" + std::to_string(window) + ",s=" + std::to_string(stride));
}

template <typename Scalar>
Var<Scalar> bilinear_resize(const Var<Scalar>& x, Index out_h, Index out_w,
                            bool align_corners = false) {
  return x.tape()->record(
      "bilinear_resize", {x}, bilinear_resize(x.value(), out_h, out_w, align_corners),
      [align_corners](const Tape<Scalar>&, const auto&, const Tensor<Scalar>& g, auto grads) {
        if (grads[0]) bilinear_resize_backward(g, align_corners, *grads[0]);
      },
      std::to_string(out_h) + "x" + std::to_string(out_w));
}

template <typename Scalar>
Var<Scalar> concat_channels(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: empty input list");
  std::vector<const Tensor<Scalar>*> values;
  for (const auto& p : parts) values.push_back(&p.value());
  auto out = concat_channels<Scalar>(std::span<const Tensor<Scalar>* const>(values));
  return parts.front().tape()->record(
      "concat_channels", parts, std::move(out),
      [](const Tape<Scalar>& t, const auto& node, const Tensor<Scalar>& g, auto grads) {
        const Index n = g.dim(0), total = g.dim(1), hw = g.dim(2) * g.dim(3);
        Index offset = 0;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
          const Index c = t.value(node.inputs[k]).dim(1);
          if (grads[k]) {
            for (Index b = 0; b < n; ++b) {
              grads[k]->data().segment(b * c * hw, c * hw) +=
                  g.data().segment((b * total + offset) * hw, c * hw);
            }
          }
          offset += c;
        }
      },
      std::to_string(parts.size()));
}

template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts) {
  return concat_channels(std::span<const Var<Scalar>>(parts));
}

template <typename Scalar>
Var<Scalar> slice_channels(const Var<Scalar>& x, Index begin, Index count) {
  return x.tape()->record(
      "slice_channels", {x}, slice_channels(x.value(), begin, count),
      [begin, count](const Tape<Scalar>&, const auto&, const Tensor<Scalar>& g, auto grads) {
        if (!grads[0]) return;
        const Index n = g.dim(0), c = grads[0]->dim(1), hw = g.dim(2) * g.dim(3);
        for (Index b = 0; b < n; ++b) {
          grads[0]->data().segment((b * c + begin) * hw, count * hw) +=
              g.data().segment(b * count * hw, count * hw);
        }
      },
      std::to_string(begin) + ":" + std::to_string(begin + count));
}

template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) {
  return a.tape()->record("mul", {a, b}, elementwise_mul(a.value(), b.value()),
                          [](const Tape<Scalar>& t, const auto& node, const Tensor<Scalar>& g, auto grads) {
                            if (grads[0]) grads[0]->data() += g.data().cwiseProduct(t.value(node.inputs[1]).data());
                            if (grads[1]) grads[1]->data() += g.data().cwiseProduct(t.value(node.inputs[0]).data());
                          });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  return a.tape()->record("add", {a, b}, elementwise_add(a.value(), b.value()),
                          [](const Tape<Scalar>&, const auto&, const Tensor<Scalar>& g, auto grads) {
                            if (grads[0]) grads[0]->data() += g.data();
                            if (grads[1]) grads[1]->data() += g.data();
                          });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar s) {
  return x.tape()->record("scale", {x}, scalar_scale(x.value(), s),
                          [s](const Tape<Scalar>&, const auto&, const Tensor<Scalar>& g, auto grads) {
                            if (grads[0]) grads[0]->data() += g.data() * s;
                          });
}

/// Sum of all elements, as a [1] tensor.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  return x.tape()->record("sum", {x}, Tensor<Scalar>::constant({1}, x.value().data().sum()),
                          [](const Tape<Scalar>&, const auto&, const Tensor<Scalar>& g, auto grads) {
                            if (grads[0]) grads[0]->data().array() += g[0];
                          });
}

}  // namespace msat

#endif  // MSAT_AUTODIFF_HPP
