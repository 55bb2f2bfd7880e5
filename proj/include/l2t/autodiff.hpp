#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "l2t/common.hpp"

namespace l2t {

using NodeId = int32_t;

// Dense row-major f64 tensor. Values are immutable once a node owns them;
// any NaN/Inf produced by a forward op raises NonFinite instead of
// propagating silently.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<NodeId> node_id;

  Tensor() = default;
  Tensor(std::vector<int> shape_in, std::vector<double> data_in);

  static Tensor zeros(std::vector<int> shape_in);
  static Tensor scalar(double v);
  static Tensor vec(std::vector<double> v);
  static Tensor matrix(int r, int c, std::vector<double> v);

  size_t numel() const;
  bool is_matrix() const { return shape.size() == 2; }
  int rows() const;
  int cols() const;
  double& at(int r, int c);
  double at(int r, int c) const;
  bool all_finite() const;
};

enum class Reduction { Sum, TokenMean };

struct GradMap {
  std::vector<std::optional<Tensor>> by_node;

  bool has(NodeId id) const {
    return id >= 0 && static_cast<size_t>(id) < by_node.size() &&
           by_node[id].has_value();
  }
  const Tensor& at(NodeId id) const;
};

// Single-writer computation tape. Node values are immutable after creation;
// backward walks the tape once in reverse and is fully deterministic.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  NodeId leaf(Tensor t);
  const Tensor& value(NodeId id) const;
  size_t size() const { return nodes_.size(); }

  NodeId add(NodeId a, NodeId b);
  // a[R x C] + bias[C] broadcast over rows; the only broadcast supported.
  NodeId add_bias(NodeId a, NodeId bias);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);
  NodeId matmul(NodeId a, NodeId b);
  NodeId softmax_rows(NodeId a);
  NodeId gelu(NodeId a);
  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5);
  NodeId embedding_lookup(NodeId table, std::span<const int> ids);
  NodeId concat_rows(NodeId a, NodeId b);
  NodeId slice_rows(NodeId a, int start, int len);
  NodeId reshape(NodeId a, std::vector<int> shape);
  NodeId sum(NodeId a);
  // Multi-head causal attention over already-projected q,k,v [S x d].
  // Per-head weights are materialized and kept readable after the forward.
  NodeId causal_self_attention(NodeId q, NodeId k, NodeId v, int n_heads);
  // Masked NLL over target positions. targets/mask cover the logits rows;
  // entries at unmasked positions are ignored.
  NodeId cross_entropy_masked(NodeId logits, std::span<const int> targets,
                              std::span<const uint8_t> mask, Reduction red);

  // Saved weights of a causal_self_attention node, shape {H, S, S}.
  Tensor attention_weights(NodeId attn_node) const;

  // Gradients for every requires_grad leaf; unreachable leaves get zeros.
  GradMap backward(NodeId loss) const;

 private:
  enum class Op : uint8_t {
    Leaf, Add, AddBias, Mul, Scale, MatMul, SoftmaxRows, Gelu, LayerNorm,
    Embed, ConcatRows, SliceRows, Reshape, Sum, Attention, CrossEntropy,
  };

  struct Node {
    Op op = Op::Leaf;
    std::array<NodeId, 3> in{-1, -1, -1};
    int n_in = 0;
    bool needs_grad = false;
    Tensor value;
    // Op-specific stash: softmax probs, layer-norm stats, attention weights,
    // cross-entropy probabilities at supervised rows.
    std::vector<double> saved;
    std::vector<int> saved_i;
    double darg = 0.0;
    int iarg = 0;
  };

  NodeId push(Node n);
  const Node& node(NodeId id) const;
  void check_id(NodeId id) const;

  std::vector<Node> nodes_;
};

// Central-difference gradient oracle: (f(p+eps e_i) - f(p-eps e_i)) / (2 eps).
// Evaluates f through forward passes only, independent of Graph::backward.
std::vector<Tensor> finite_diff_grad(
    const std::function<double(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> params, double eps);

double gelu_scalar(double x);

}  // namespace l2t
