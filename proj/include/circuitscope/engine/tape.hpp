#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string_view>
#include <utility>
#include <vector>

#include "circuitscope/engine/tensor.hpp"

namespace circuitscope::engine {

template <class Real>
class Tape;

// Handle to a value recorded on a Tape.
template <class Real>
struct Var {
  Tape<Real>* tape = nullptr;
  std::size_t id = 0;
};

template <class Real>
struct ParameterGrad {
  Var<Real> param;
  Tensor<Real> grad;
};

// Define-by-run reverse-mode tape. Values that do not depend on a trainable
// parameter are stored as constants and get no backward closure, so the
// recorded subgraph is exactly the parameter-to-output subgraph.
template <class Real>
class Tape {
 public:
  using TensorT = Tensor<Real>;
  using ValuePtr = std::shared_ptr<const TensorT>;
  using BackwardFn = std::function<void(Tape&, const TensorT& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Real> constant(TensorT value) { return constant(std::make_shared<const TensorT>(std::move(value))); }

  Var<Real> constant(ValuePtr value) {
    check_finite(*value, "constant");
    nodes_.push_back(Node{std::move(value), {}, false, false, {}});
    return Var<Real>{this, nodes_.size() - 1};
  }

  Var<Real> parameter(TensorT value) { return parameter(std::make_shared<const TensorT>(std::move(value))); }

  // Trainable leaf. Only parameters receive gradients from backward().
  Var<Real> parameter(ValuePtr value) {
    check_finite(*value, "parameter");
    nodes_.push_back(Node{std::move(value), {}, true, true, {}});
    parameters_.push_back(nodes_.size() - 1);
    return Var<Real>{this, nodes_.size() - 1};
  }

  const TensorT& value(Var<Real> v) const { return *node(v).value; }
  const ValuePtr& value_ptr(Var<Real> v) const { return node(v).value; }
  bool requires_grad(Var<Real> v) const { return node(v).requires_grad; }

  std::size_t size() const { return nodes_.size(); }

  std::size_t recorded_ops() const {
    std::size_t n = 0;
    for (const auto& nd : nodes_) {
      if (nd.requires_grad && !nd.is_parameter) ++n;
    }
    return n;
  }

  // Used by op implementations. The closure runs only if some input needs a
  // gradient; otherwise the result is stored as a constant.
  Var<Real> record(std::string_view op, TensorT value, std::initializer_list<Var<Real>> inputs,
                   BackwardFn fn) {
    return record(op, std::move(value), std::vector<Var<Real>>(inputs), std::move(fn));
  }

  Var<Real> record(std::string_view op, TensorT value, const std::vector<Var<Real>>& inputs,
                   BackwardFn fn) {
    check_finite(value, op);
    bool needs = false;
    for (const auto& in : inputs) {
      own(in);
      needs = needs || nodes_[in.id].requires_grad;
    }
    auto ptr = std::make_shared<const TensorT>(std::move(value));
    if (needs) {
      nodes_.push_back(Node{std::move(ptr), {}, true, false, std::move(fn)});
    } else {
      nodes_.push_back(Node{std::move(ptr), {}, false, false, {}});
    }
    return Var<Real>{this, nodes_.size() - 1};
  }

  // Gradient accumulator for an input; allocated on first use.
  TensorT& grad_buffer(Var<Real> v) {
    Node& nd = nodes_[v.id];
    if (nd.grad.empty()) nd.grad = TensorT(nd.value->shape());
    return nd.grad;
  }

  // Reverse sweep from a scalar output. Returns d(output)/d(parameter) for
  // every trainable parameter reachable from the output, in creation order.
  std::vector<ParameterGrad<Real>> backward(Var<Real> output, Real output_grad = Real{1}) {
    own(output);
    if (value(output).size() != 1) {
      throw ShapeError("backward requires a scalar output, got shape " +
                       shape_string(value(output).shape()));
    }
    for (auto& nd : nodes_) nd.grad = TensorT();
    std::vector<ParameterGrad<Real>> result;
    if (!nodes_[output.id].requires_grad) return result;
    grad_buffer(output)[0] = output_grad;
    for (std::size_t i = output.id + 1; i-- > 0;) {
      Node& nd = nodes_[i];
      if (!nd.requires_grad || nd.is_parameter || nd.grad.empty()) continue;
      nd.backward(*this, nd.grad);
    }
    for (std::size_t id : parameters_) {
      Node& nd = nodes_[id];
      if (nd.grad.empty()) continue;
      check_finite(nd.grad, "gradient");
      result.push_back({Var<Real>{this, id}, nd.grad});
    }
    return result;
  }

  void own(Var<Real> v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw std::invalid_argument("variable does not belong to this tape");
    }
  }

 private:
  struct Node {
    ValuePtr value;
    TensorT grad;
    bool requires_grad = false;
    bool is_parameter = false;
    BackwardFn backward;
  };

  const Node& node(Var<Real> v) const {
    own(v);
    return nodes_[v.id];
  }

  static void check_finite(const TensorT& t, std::string_view op) {
    if (!t.all_finite()) {
      throw NonFiniteError("non-finite value produced by " + std::string(op));
    }
  }

  std::deque<Node> nodes_;
  std::vector<std::size_t> parameters_;
};

}  // namespace circuitscope::engine
