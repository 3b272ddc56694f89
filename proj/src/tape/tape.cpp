#include "circle/tape.hpp"

#include <cmath>
#include <numeric>

namespace circle::tape {

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  const std::size_t n = std::accumulate(shape_.begin(), shape_.end(), std::size_t{1},
                                        std::multiplies<>());
  data_.assign(n, fill);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, double fill) {
  return Tensor({rows, cols}, fill);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, value); }

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> data) {
  Tensor t;
  const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                        std::multiplies<>());
  if (n != data.size()) throw Error(ErrorCode::ShapeMismatch, "tensor data does not match shape");
  t.shape_ = std::move(shape);
  t.data_.assign(data.begin(), data.end());
  return t;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

const Tensor& Var::value() const { return tape_->value(*this); }

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::parameter(Parameter& p) {
  if (!p.grad.same_shape(p.value)) p.grad = Tensor(p.value.shape());
  Node n;
  n.param = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  n.interior = true;
  for (const auto& in : inputs) {
    if (in.valid()) {
      if (in.tape() != this) throw Error(ErrorCode::InvalidArgument, "mixing tapes");
      n.requires_grad |= nodes_[in.id()].requires_grad;
    }
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

const Tensor& Tape::value(const Var& v) const {
  const Node& n = nodes_[v.id()];
  return n.param ? n.param->value : n.owned;
}

Tensor& Tape::grad(const Var& v) {
  Node& n = nodes_[v.id()];
  if (n.param) return n.param->grad;
  if (!n.has_grad) {
    n.grad = Tensor(n.owned.shape());
    n.has_grad = true;
  }
  return n.grad;
}

const Tensor* Tape::grad_if(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (n.param) return &n.param->grad;
  return n.has_grad ? &n.grad : nullptr;
}

void Tape::backward(const Var& loss) {
  if (value(loss).size() != 1) throw Error(ErrorCode::ShapeMismatch, "backward needs a scalar loss");
  for (auto& n : nodes_) {
    if (n.interior && n.has_grad) n.grad.fill(0.0);
  }
  grad(loss)[0] += 1.0;
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.interior || !n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& x : t.values()) x = dist(rng);
  return t;
}

double grad_check(const std::function<Var(Tape&, std::span<const Var>)>& op,
                  std::vector<Tensor> inputs, double eps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor projection;

  auto evaluate = [&](const std::vector<Tensor>& xs) {
    Tape t;
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(t.constant(x));
    const Tensor& out = op(t, vars).value();
    if (projection.empty()) projection = random_tensor(out.shape(), rng);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += projection[i] * out[i];
    return s;
  };
  evaluate(inputs);

  Tape t;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(t.leaf(x));
  const Var out = op(t, vars);
  const Var loss = sum(mul_const(out, projection));
  t.backward(loss);

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor* g = t.grad_if(vars[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k][i];
      inputs[k][i] = saved + eps;
      const double up = evaluate(inputs);
      inputs[k][i] = saved - eps;
      const double down = evaluate(inputs);
      inputs[k][i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = g ? (*g)[i] : 0.0;
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
  }
  return worst;
}

}  // namespace circle::tape
