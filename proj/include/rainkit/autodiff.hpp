#pragma once

/**
 * Minimal reverse-mode autodiff on a tape of tensor nodes.
 *
 * Doubles throughout. The op set is exactly what the mixture network needs:
 * elementwise add/mul/softsign, channel-mixing affine maps, global average
 * pooling, softmax, top-k masking with renormalization, weighted blending of
 * expert branches, and L1 loss. Nodes are created in topological order, so
 * backward is a single reverse sweep.
 */

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace rainkit::nn {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double v);
  static Tensor from(std::vector<int> shape, std::vector<double> values);
  static Tensor scalar(double v);

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
};

class Tape;

struct Value {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until touched by backward
    std::vector<int> parents;
    std::function<void(Tape&, Node&)> pull;  // pushes node.grad into parents
  };

  Value leaf(Tensor v);

  const Tensor& value(Value v) const;
  // Gradient of the last backward() target with respect to this node.
  const Tensor& grad(Value v) const;
  // False when the node was never touched by backward (e.g. skipped experts).
  bool has_grad(Value v) const;

  // Reverse sweep from a scalar node; seeds its gradient with 1.
  void backward(Value loss);

  std::size_t node_count() const { return nodes_.size(); }

  // Internal-ish helpers used by the op builders.
  int add_node(Tensor value, std::vector<int> parents,
               std::function<void(Tape&, Node&)> pull);
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Tensor& grad_buffer(int id);  // lazily allocates zeros of the value shape

 private:
  void check(Value v) const;
  std::vector<Node> nodes_;
};

// Elementwise; shapes must match.
Value add(Value a, Value b);
Value mul(Value a, Value b);
Value scale(Value a, double c);
// Adds a constant tensor (no gradient through the constant).
Value add_const(Value a, const Tensor& c);
// Elementwise x / (1 + |x|); bounded to (-1, 1) like tanh but far cheaper.
Value softsign_act(Value a);

// x:[C,H,W], w:[O,C], b:[O] -> [O,H,W]; per-pixel channel mixing.
Value affine_chw(Value x, Value w, Value b);
// x:[C], w:[O,C], b:[O] -> [O].
Value affine_vec(Value x, Value w, Value b);
// [C,H,W] -> [C].
Value global_avg_pool(Value x);
// [N] -> [N], numerically stable.
Value softmax_vec(Value x);

// Keeps the k largest entries (ties won by the lower index), zeroes the rest
// and renormalizes the survivors to sum to 1. Gradients flow through the
// survivors only. The surviving indices are reported in ascending order.
Value topk_renorm(Value weights, int k, std::vector<int>& active_out);

// sum_j weights[branch_indices[j]] * branch_outputs[j]; the branch outputs
// share a shape, weights is a vector spanning all branches.
Value weighted_blend(std::span<const Value> branch_outputs,
                     std::span<const int> branch_indices, Value weights);

// Mean absolute error against a constant target; scalar output.
Value l1_loss(Value pred, const Tensor& target);

// sum_i coeffs[i] * scalars[i]; scalar output.
Value scalar_combine(std::span<const Value> scalars, std::span<const double> coeffs);

// The indices of the k largest entries (ties to the lower index), ascending.
std::vector<int> topk_indices(std::span<const double> weights, int k);

}  // namespace rainkit::nn
