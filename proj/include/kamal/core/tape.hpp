#pragma once

#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "kamal/core/error.hpp"
#include "kamal/core/ops.hpp"
#include "kamal/core/optim.hpp"
#include "kamal/core/tensor.hpp"

namespace kamal {

// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

// Records a forward pass over the fixed op set and replays it in reverse to
// accumulate gradients into the Params it touched. One loss per tape; a tape
// can be backpropagated exactly once.
class Tape {
 public:
  Var input(Tensor t) { return push(Node{std::move(t), {}, nullptr, nullptr, false, {}}); }

  // Read-only view of an external tensor; never receives gradient.
  Var constant(const Tensor& t) { return push(Node{{}, {}, &t, nullptr, false, {}}); }

  Var param(Param& p) { return push(Node{{}, {}, &p.value, &p, true, {}}); }

  // Constant input that still reports its gradient via grad().
  Var watched(Tensor t) { return push(Node{std::move(t), {}, nullptr, nullptr, true, {}}); }

  [[nodiscard]] const Tensor& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.ref ? *n.ref : n.value;
  }

  // Gradient of a watched/param/intermediate node after backward().
  [[nodiscard]] const Tensor& grad(Var v) {
    Node& n = nodes_.at(v.id);
    return n.param ? n.param->grad : n.grad;
  }

  Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
    Tensor y = ops::conv2d(value(x), value(w), value(b), stride, pad);
    return record(std::move(y), {x, w, b}, [x, w, b, stride, pad](Tape& t, const Tensor& dy) {
      ops::conv2d_backward(t.value(x), t.value(w), stride, pad, dy, t.grad_buf(x), t.grad_buf(w), t.grad_buf(b));
    });
  }

  Var conv1x1(Var x, Var w) {
    Tensor y = ops::conv1x1(value(x), value(w));
    return record(std::move(y), {x, w}, [x, w](Tape& t, const Tensor& dy) {
      ops::conv1x1_backward(t.value(x), t.value(w), dy, t.grad_buf(x), t.grad_buf(w));
    });
  }

  Var linear(Var x, Var w, Var b) {
    Tensor y = ops::linear(value(x), value(w), value(b));
    return record(std::move(y), {x, w, b}, [x, w, b](Tape& t, const Tensor& dy) {
      ops::linear_backward(t.value(x), t.value(w), dy, t.grad_buf(x), t.grad_buf(w), t.grad_buf(b));
    });
  }

  Var relu(Var x) {
    Tensor y = ops::relu(value(x));
    return record(std::move(y), {x}, [x](Tape& t, const Tensor& dy) {
      if (Tensor* dx = t.grad_buf(x)) ops::relu_backward(t.value(x), dy, *dx);
    });
  }

  Var maxpool(Var x, std::size_t k, std::size_t s) {
    auto r = ops::maxpool(value(x), k, s);
    auto argmax = std::make_shared<std::vector<std::size_t>>(std::move(r.argmax));
    return record(std::move(r.y), {x}, [x, argmax](Tape& t, const Tensor& dy) {
      if (Tensor* dx = t.grad_buf(x)) ops::maxpool_backward(*argmax, dy, *dx);
    });
  }

  Var nonparam(Var x, const NonParam& np) {
    Var h = x;
    if (np.activation == Activation::relu) h = relu(h);
    if (np.pools()) h = maxpool(h, np.pool_kernel, np.pool_stride);
    return h;
  }

  // [B, ...] -> [B, prod(...)]
  Var flatten(Var x) {
    const Tensor& v = value(x);
    if (v.rank() == 2) return x;
    Tensor y = v.reshaped({v.dim(0), v.size() / v.dim(0)});
    return record(std::move(y), {x}, [x](Tape& t, const Tensor& dy) {
      if (Tensor* dx = t.grad_buf(x))
        for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i];
    });
  }

  Var softmax(Var x, float temperature) {
    Tensor y = ops::softmax(value(x), temperature);
    const std::size_t self = nodes_.size();
    return record(std::move(y), {x}, [x, self, temperature](Tape& t, const Tensor& dy) {
      if (Tensor* dx = t.grad_buf(x)) ops::softmax_backward(t.nodes_[self].value, temperature, dy, *dx);
    });
  }

  // Loss terminals. Each records the loss gradient seed closure; backward()
  // must follow exactly once.
  double l2_loss(Var pred, const Tensor& target) {
    const double loss = ops::l2_loss(value(pred), target);
    set_loss([pred, &target](Tape& t, float seed) {
      if (Tensor* d = t.grad_buf(pred)) ops::l2_loss_backward(t.value(pred), target, seed, *d);
    });
    return loss;
  }

  double cross_entropy(Var logits, std::span<const int> labels) {
    const double loss = ops::cross_entropy(value(logits), labels);
    set_loss([logits, labels](Tape& t, float seed) {
      if (Tensor* d = t.grad_buf(logits)) ops::cross_entropy(t.value(logits), labels, d, seed);
    });
    return loss;
  }

  double soft_cross_entropy(Var logits, const Tensor& targets, std::span<const ops::Block> blocks, float temperature) {
    const double loss = ops::soft_cross_entropy(value(logits), targets, blocks, temperature);
    set_loss([logits, &targets, blocks, temperature](Tape& t, float seed) {
      if (Tensor* d = t.grad_buf(logits)) ops::soft_cross_entropy(t.value(logits), targets, blocks, temperature, d, seed);
    });
    return loss;
  }

  // Custom scalar terminal: loss = sum(value(v) * weights) (used by tests).
  double dot_loss(Var v, const Tensor& weights) {
    ops::detail::require_same_shape(value(v), weights, "dot_loss");
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) acc += static_cast<double>(value(v)[i]) * weights[i];
    set_loss([v, &weights](Tape& t, float seed) {
      if (Tensor* d = t.grad_buf(v))
        for (std::size_t i = 0; i < weights.size(); ++i) (*d)[i] += seed * weights[i];
    });
    return acc;
  }

  // Reverse sweep. Gradients accumulate into Param::grad.
  void backward(float seed = 1.0f) {
    require(static_cast<bool>(loss_seed_), "backprop without a recorded forward loss");
    require(!done_, "tape already backpropagated; record a new forward pass");
    done_ = true;
    loss_seed_(*this, seed);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  using Backward = std::function<void(Tape&, const Tensor&)>;

  struct Node {
    Tensor value;
    Tensor grad;
    const Tensor* ref;
    Param* param;
    bool needs_grad;
    Backward backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var record(Tensor y, std::initializer_list<Var> inputs, Backward bw) {
    bool needs = false;
    for (Var v : inputs) needs = needs || nodes_.at(v.id).needs_grad;
    if (!needs) return push(Node{std::move(y), {}, nullptr, nullptr, false, {}});
    return push(Node{std::move(y), {}, nullptr, nullptr, true, std::move(bw)});
  }

  void set_loss(std::function<void(Tape&, float)> f) {
    require(!loss_seed_, "tape already holds a loss; record a new forward pass");
    loss_seed_ = std::move(f);
  }

  // Gradient buffer for v, allocated on first use; null if v needs none.
  Tensor* grad_buf(Var v) {
    Node& n = nodes_.at(v.id);
    if (!n.needs_grad) return nullptr;
    if (n.param) return &n.param->grad;
    if (n.grad.empty()) n.grad = Tensor(value(v).shape());
    return &n.grad;
  }

  std::vector<Node> nodes_;
  std::function<void(Tape&, float)> loss_seed_;
  bool done_ = false;
};

}  // namespace kamal
