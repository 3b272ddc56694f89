#pragma once

#include "circle/common.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <new>
#include <random>
#include <span>
#include <string>
#include <vector>

// Reverse-mode differentiation over dense row-major arrays. Every kernel is a
// node holding its forward value and a closure that pushes the incoming
// gradient onto its inputs.
namespace circle::tape {

/// Cache-line aligned storage; vectorized reductions are then bit-reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{alignment}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{alignment}); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  static Tensor scalar(double value);
  static Tensor from(std::vector<std::size_t> shape, std::vector<double> data);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  /// Leading dimension; all trailing dimensions are folded into `cols()`.
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const { return rows() == 0 ? 0 : size() / rows(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  Storage& values() { return data_; }
  const Storage& values() const { return data_; }
  std::vector<double> to_vector() const { return {data_.begin(), data_.end()}; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  Eigen::Map<RowMatrix> mat() {
    return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
  }
  Eigen::Map<const RowMatrix> mat() const {
    return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
  }

  void fill(double v);
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  std::vector<std::size_t> shape_;
  Storage data_;
};

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

/// Owns the trainable parameters theta, in insertion order.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, std::vector<std::size_t> shape);
  /// Kaiming-uniform with LeakyReLU gain: U(-bound, bound), bound = gain * sqrt(3 / fan_in).
  Parameter& add_kaiming(const std::string& name, std::vector<std::size_t> shape,
                         std::size_t fan_in, double slope, std::mt19937_64& rng);

  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  const Parameter* find(const std::string& name) const;

  std::vector<std::unique_ptr<Parameter>>& all() { return params_; }
  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }

  void zero_grad();
  std::size_t scalar_count() const;

  /// Checkpoint: "CIRC1" magic, text manifest (name, shape, offset), then
  /// little-endian float64 payload.
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that never receives a gradient.
  Var constant(Tensor value);
  /// Differentiable input; its gradient accumulates across backward calls.
  Var leaf(Tensor value);
  /// Parameter node. Gradients accumulate into `p.grad`; the value is not copied.
  Var parameter(Parameter& p);
  /// Records a kernel output. `fn` runs during backward only if some input
  /// requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  const Tensor& value(const Var& v) const;
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
  /// Gradient buffer of `v`, allocated as zeros on first access.
  Tensor& grad(const Var& v);
  /// Gradient buffer if one was ever allocated.
  const Tensor* grad_if(const Var& v) const;

  /// Seeds d(loss)/d(loss) = 1 and visits nodes in exact reverse order.
  /// Intermediate gradients are reset first; leaf and parameter gradients add up.
  void backward(const Var& loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    Parameter* param = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    bool interior = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Dense kernels. Shapes are (rows x cols) unless stated.
Var matmul(const Var& a, const Var& b);
/// x W + b; `b` may be an invalid Var for no bias.
Var linear(const Var& x, const Var& w, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// Elementwise product with a constant tensor of the same shape.
Var mul_const(const Var& a, const Tensor& c);
Var add_const(const Var& a, const Tensor& c);
Var scale(const Var& a, double s);
Var leaky_relu(const Var& x, double slope);
Var sigmoid(const Var& x);
Var clamp(const Var& x, double lo, double hi);
Var abs(const Var& x);
Var sum(const Var& x);
Var mean(const Var& x);
/// Euclidean norm of each row, shape rows x 1. Gradient is 0 at a zero row.
Var row_norm(const Var& x);
Var row_dot(const Var& a, const Var& b);
/// Per-channel normalization over all rows, then gamma * x_hat + beta.
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Mean of the rows sharing a segment id. Throws EmptySet for an empty segment.
Var segment_mean(const Var& x, std::span<const int> segment, std::size_t segments);
/// Columnwise mean, 1 x C. Throws EmptySet when x has no rows.
Var mean_pool(const Var& x);
/// Row gather; index -1 produces a zero row.
Var gather_rows(const Var& x, std::vector<int> index);
/// out[r] = sum_j weights[r*k + j] * x[index[r*k + j]]; index -1 is skipped.
Var weighted_gather(const Var& x, std::vector<int> index, std::vector<double> weights,
                    std::size_t k);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
/// Sum over rows of binary cross-entropy, p clamped to [eps, 1 - eps].
Var bce_sum(const Var& p, std::span<const double> labels, double eps = 1e-7);

/// Derivative masks, used to push tangents through activations.
Tensor leaky_relu_mask(const Tensor& pre, double slope);
Tensor clamp_mask(const Tensor& pre, double lo, double hi);

/// Gather-scatter convolution plan: for every tap, pairs (input row, output row).
struct Rulebook {
  std::size_t out_rows = 0;
  std::vector<std::vector<std::pair<int, int>>> taps;

  std::size_t pair_count() const;
};

/// out[o] = sum over (i, o) in taps[k] of x[i] * W[k]; W has shape taps x Cin x Cout.
Var rulebook_conv(const Var& x, const Var& weight, std::shared_ptr<const Rulebook> rules);

/// Max relative error between analytic gradients and central differences of a
/// random projection of `op`'s output, over every input element.
double grad_check(const std::function<Var(Tape&, std::span<const Var>)>& op,
                  std::vector<Tensor> inputs, double eps = 1e-5, std::uint64_t seed = 7);

Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double lo = -1.0,
                     double hi = 1.0);

}  // namespace circle::tape
