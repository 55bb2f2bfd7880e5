#include "l2t/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "l2t/kernels.hpp"

namespace l2t {

namespace {

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d < 0) raise(Err::ShapeMismatch, "negative dimension");
    n *= static_cast<size_t>(d);
  }
  return n;
}

std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
}

Tensor::Tensor(std::vector<int> shape_in, std::vector<double> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
  if (shape_numel(shape) != data.size())
    raise(Err::ShapeMismatch, "shape " + shape_str(shape) + " does not match " +
                                  std::to_string(data.size()) + " values");
}

Tensor Tensor::zeros(std::vector<int> shape_in) {
  size_t n = shape_numel(shape_in);
  return Tensor(std::move(shape_in), std::vector<double>(n, 0.0));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::vec(std::vector<double> v) {
  int n = static_cast<int>(v.size());
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(int r, int c, std::vector<double> v) {
  return Tensor({r, c}, std::move(v));
}

size_t Tensor::numel() const { return data.size(); }

int Tensor::rows() const {
  if (!is_matrix()) raise(Err::ShapeMismatch, "rows() on non-matrix");
  return shape[0];
}

int Tensor::cols() const {
  if (!is_matrix()) raise(Err::ShapeMismatch, "cols() on non-matrix");
  return shape[1];
}

double& Tensor::at(int r, int c) {
  return data[static_cast<size_t>(r) * cols() + c];
}

double Tensor::at(int r, int c) const {
  return data[static_cast<size_t>(r) * cols() + c];
}

bool Tensor::all_finite() const {
  if (std::isfinite(kern::active().sum_abs(data.data(), data.size())))
    return true;
  // The fast reduction can overflow on huge-but-finite values; rescan.
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

const Tensor& GradMap::at(NodeId id) const {
  if (!has(id)) raise(Err::InvalidId, "no gradient for node " + std::to_string(id));
  return *by_node[id];
}

void Graph::check_id(NodeId id) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
    raise(Err::InvalidId, "node id " + std::to_string(id));
}

const Graph::Node& Graph::node(NodeId id) const {
  check_id(id);
  return nodes_[id];
}

const Tensor& Graph::value(NodeId id) const { return node(id).value; }

NodeId Graph::push(Node n) {
  if (n.op != Op::Leaf && !n.value.all_finite())
    raise(Err::NonFinite, "non-finite values produced by op");
  NodeId id = static_cast<NodeId>(nodes_.size());
  n.value.node_id = id;
  nodes_.push_back(std::move(n));
  return id;
}

NodeId Graph::leaf(Tensor t) {
  if (!t.all_finite()) raise(Err::NonFinite, "non-finite leaf tensor");
  Node n;
  n.op = Op::Leaf;
  n.needs_grad = t.requires_grad;
  n.value = std::move(t);
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.shape != tb.shape)
    raise(Err::ShapeMismatch,
          "add " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.op = Op::Add;
  n.in = {a, b, -1};
  n.n_in = 2;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  n.value = Tensor(ta.shape, std::vector<double>(ta.numel()));
  kern::active().add(n.value.data.data(), ta.data.data(), tb.data.data(),
                     ta.numel());
  return push(std::move(n));
}

NodeId Graph::add_bias(NodeId a, NodeId bias) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(bias);
  if (!ta.is_matrix() || tb.shape.size() != 1 || tb.shape[0] != ta.cols())
    raise(Err::ShapeMismatch,
          "add_bias " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.op = Op::AddBias;
  n.in = {a, bias, -1};
  n.n_in = 2;
  n.needs_grad = nodes_[a].needs_grad || nodes_[bias].needs_grad;
  n.value = Tensor(ta.shape, std::vector<double>(ta.numel()));
  int R = ta.rows(), C = ta.cols();
  for (int r = 0; r < R; ++r) {
    kern::active().add(n.value.data.data() + static_cast<size_t>(r) * C,
                       ta.data.data() + static_cast<size_t>(r) * C,
                       tb.data.data(), C);
  }
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.shape != tb.shape)
    raise(Err::ShapeMismatch,
          "mul " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.op = Op::Mul;
  n.in = {a, b, -1};
  n.n_in = 2;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  n.value = Tensor(ta.shape, std::vector<double>(ta.numel()));
  kern::active().mul(n.value.data.data(), ta.data.data(), tb.data.data(),
                     ta.numel());
  return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double s) {
  const Tensor& ta = value(a);
  Node n;
  n.op = Op::Scale;
  n.in = {a, -1, -1};
  n.n_in = 1;
  n.needs_grad = nodes_[a].needs_grad;
  n.darg = s;
  n.value = Tensor(ta.shape, std::vector<double>(ta.numel()));
  kern::active().scale(n.value.data.data(), ta.data.data(), s, ta.numel());
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows())
    raise(Err::ShapeMismatch,
          "matmul " + shape_str(ta.shape) + " * " + shape_str(tb.shape));
  int m = ta.rows(), k = ta.cols(), nn = tb.cols();
  Node n;
  n.op = Op::MatMul;
  n.in = {a, b, -1};
  n.n_in = 2;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  n.value = Tensor({m, nn}, std::vector<double>(static_cast<size_t>(m) * nn));
  kern::active().gemm(n.value.data.data(), ta.data.data(), tb.data.data(), m,
                      k, nn);
  return push(std::move(n));
}

NodeId Graph::softmax_rows(NodeId a) {
  const Tensor& ta = value(a);
  if (!ta.is_matrix()) raise(Err::ShapeMismatch, "softmax_rows needs a matrix");
  int R = ta.rows(), C = ta.cols();
  Node n;
  n.op = Op::SoftmaxRows;
  n.in = {a, -1, -1};
  n.n_in = 1;
  n.needs_grad = nodes_[a].needs_grad;
  n.value = Tensor(ta.shape, std::vector<double>(ta.numel()));
  for (int r = 0; r < R; ++r) {
    const double* x = ta.data.data() + static_cast<size_t>(r) * C;
    double* y = n.value.data.data() + static_cast<size_t>(r) * C;
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < C; ++c) mx = std::max(mx, x[c]);
    double z = 0.0;
    for (int c = 0; c < C; ++c) {
      y[c] = std::exp(x[c] - mx);
      z += y[c];
    }
    for (int c = 0; c < C; ++c) y[c] /= z;
  }
  return push(std::move(n));
}

NodeId Graph::gelu(NodeId a) {
  const Tensor& ta = value(a);
  Node n;
  n.op = Op::Gelu;
  n.in = {a, -1, -1};
  n.n_in = 1;
  n.needs_grad = nodes_[a].needs_grad;
  n.value = Tensor(ta.shape, std::vector<double>(ta.numel()));
  for (size_t i = 0; i < ta.numel(); ++i)
    n.value.data[i] = gelu_scalar(ta.data[i]);
  return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps) {
  const Tensor& tx = value(x);
  const Tensor& tg = value(gamma);
  const Tensor& tb = value(beta);
  if (!tx.is_matrix()) raise(Err::ShapeMismatch, "layer_norm needs a matrix");
  int R = tx.rows(), C = tx.cols();
  if (tg.shape != std::vector<int>{C} || tb.shape != std::vector<int>{C})
    raise(Err::ShapeMismatch, "layer_norm gamma/beta must be [cols]");
  Node n;
  n.op = Op::LayerNorm;
  n.in = {x, gamma, beta};
  n.n_in = 3;
  n.needs_grad = nodes_[x].needs_grad || nodes_[gamma].needs_grad ||
                 nodes_[beta].needs_grad;
  n.darg = eps;
  n.value = Tensor(tx.shape, std::vector<double>(tx.numel()));
  // saved: xhat (R*C) then inv_std (R)
  n.saved.resize(static_cast<size_t>(R) * C + R);
  for (int r = 0; r < R; ++r) {
    const double* xi = tx.data.data() + static_cast<size_t>(r) * C;
    double* yi = n.value.data.data() + static_cast<size_t>(r) * C;
    double* xh = n.saved.data() + static_cast<size_t>(r) * C;
    double mean = 0.0;
    for (int c = 0; c < C; ++c) mean += xi[c];
    mean /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) {
      double d = xi[c] - mean;
      var += d * d;
    }
    var /= C;
    double inv_std = 1.0 / std::sqrt(var + eps);
    n.saved[static_cast<size_t>(R) * C + r] = inv_std;
    for (int c = 0; c < C; ++c) {
      xh[c] = (xi[c] - mean) * inv_std;
      yi[c] = xh[c] * tg.data[c] + tb.data[c];
    }
  }
  return push(std::move(n));
}

NodeId Graph::embedding_lookup(NodeId table, std::span<const int> ids) {
  const Tensor& tt = value(table);
  if (!tt.is_matrix()) raise(Err::ShapeMismatch, "embedding table must be 2-D");
  int V = tt.rows(), D = tt.cols();
  Node n;
  n.op = Op::Embed;
  n.in = {table, -1, -1};
  n.n_in = 1;
  n.needs_grad = nodes_[table].needs_grad;
  int T = static_cast<int>(ids.size());
  n.value = Tensor({T, D}, std::vector<double>(static_cast<size_t>(T) * D));
  n.saved_i.assign(ids.begin(), ids.end());
  for (int t = 0; t < T; ++t) {
    int id = ids[t];
    if (id < 0 || id >= V)
      raise(Err::IndexOutOfVocab, "embedding id " + std::to_string(id));
    std::memcpy(n.value.data.data() + static_cast<size_t>(t) * D,
                tt.data.data() + static_cast<size_t>(id) * D,
                sizeof(double) * D);
  }
  return push(std::move(n));
}

NodeId Graph::concat_rows(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.cols())
    raise(Err::ShapeMismatch,
          "concat_rows " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.op = Op::ConcatRows;
  n.in = {a, b, -1};
  n.n_in = 2;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  int C = ta.cols();
  n.value = Tensor({ta.rows() + tb.rows(), C},
                   std::vector<double>(ta.numel() + tb.numel()));
  std::memcpy(n.value.data.data(), ta.data.data(),
              sizeof(double) * ta.numel());
  std::memcpy(n.value.data.data() + ta.numel(), tb.data.data(),
              sizeof(double) * tb.numel());
  return push(std::move(n));
}

NodeId Graph::slice_rows(NodeId a, int start, int len) {
  const Tensor& ta = value(a);
  if (!ta.is_matrix()) raise(Err::ShapeMismatch, "slice_rows needs a matrix");
  if (start < 0 || len < 0 || start + len > ta.rows())
    raise(Err::ShapeMismatch, "slice_rows range out of bounds");
  Node n;
  n.op = Op::SliceRows;
  n.in = {a, -1, -1};
  n.n_in = 1;
  n.needs_grad = nodes_[a].needs_grad;
  n.iarg = start;
  int C = ta.cols();
  n.value = Tensor({len, C}, std::vector<double>(static_cast<size_t>(len) * C));
  std::memcpy(n.value.data.data(),
              ta.data.data() + static_cast<size_t>(start) * C,
              sizeof(double) * static_cast<size_t>(len) * C);
  return push(std::move(n));
}

NodeId Graph::reshape(NodeId a, std::vector<int> shape) {
  const Tensor& ta = value(a);
  if (shape_numel(shape) != ta.numel())
    raise(Err::ShapeMismatch, "reshape to incompatible size");
  Node n;
  n.op = Op::Reshape;
  n.in = {a, -1, -1};
  n.n_in = 1;
  n.needs_grad = nodes_[a].needs_grad;
  n.value = Tensor(std::move(shape), ta.data);
  return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
  const Tensor& ta = value(a);
  Node n;
  n.op = Op::Sum;
  n.in = {a, -1, -1};
  n.n_in = 1;
  n.needs_grad = nodes_[a].needs_grad;
  double s = 0.0;
  for (double v : ta.data) s += v;
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

NodeId Graph::causal_self_attention(NodeId q, NodeId k, NodeId v,
                                    int n_heads) {
  const Tensor& tq = value(q);
  const Tensor& tk = value(k);
  const Tensor& tv = value(v);
  if (!tq.is_matrix() || tq.shape != tk.shape || tq.shape != tv.shape)
    raise(Err::ShapeMismatch, "attention q/k/v must share [S x d]");
  int S = tq.rows(), D = tq.cols();
  if (n_heads < 1 || D % n_heads != 0)
    raise(Err::ShapeMismatch, "d_model must divide by n_heads");
  int dh = D / n_heads;
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Node n;
  n.op = Op::Attention;
  n.in = {q, k, v};
  n.n_in = 3;
  n.needs_grad =
      nodes_[q].needs_grad || nodes_[k].needs_grad || nodes_[v].needs_grad;
  n.iarg = n_heads;
  n.darg = inv_sqrt_dh;
  n.value = Tensor({S, D}, std::vector<double>(static_cast<size_t>(S) * D));
  n.saved.assign(static_cast<size_t>(n_heads) * S * S, 0.0);

  std::vector<double> qh(static_cast<size_t>(S) * dh);
  std::vector<double> kh(static_cast<size_t>(S) * dh);
  std::vector<double> vh(static_cast<size_t>(S) * dh);
  std::vector<double> scores(static_cast<size_t>(S) * S);
  std::vector<double> outh(static_cast<size_t>(S) * dh);
  const auto& K = kern::active();

  for (int h = 0; h < n_heads; ++h) {
    int off = h * dh;
    for (int s = 0; s < S; ++s) {
      std::memcpy(qh.data() + static_cast<size_t>(s) * dh,
                  tq.data.data() + static_cast<size_t>(s) * D + off,
                  sizeof(double) * dh);
      std::memcpy(kh.data() + static_cast<size_t>(s) * dh,
                  tk.data.data() + static_cast<size_t>(s) * D + off,
                  sizeof(double) * dh);
      std::memcpy(vh.data() + static_cast<size_t>(s) * dh,
                  tv.data.data() + static_cast<size_t>(s) * D + off,
                  sizeof(double) * dh);
    }
    K.gemm_nt(scores.data(), qh.data(), kh.data(), S, dh, S);
    double* weights = n.saved.data() + static_cast<size_t>(h) * S * S;
    for (int i = 0; i < S; ++i) {
      double* srow = scores.data() + static_cast<size_t>(i) * S;
      double* wrow = weights + static_cast<size_t>(i) * S;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j <= i; ++j) {
        srow[j] *= inv_sqrt_dh;
        mx = std::max(mx, srow[j]);
      }
      double z = 0.0;
      for (int j = 0; j <= i; ++j) {
        wrow[j] = std::exp(srow[j] - mx);
        z += wrow[j];
      }
      for (int j = 0; j <= i; ++j) wrow[j] /= z;
      // wrow[j] stays 0 for j > i (causal mask)
    }
    K.gemm(outh.data(), weights, vh.data(), S, S, dh);
    for (int s = 0; s < S; ++s) {
      std::memcpy(n.value.data.data() + static_cast<size_t>(s) * D + off,
                  outh.data() + static_cast<size_t>(s) * dh,
                  sizeof(double) * dh);
    }
  }
  return push(std::move(n));
}

Tensor Graph::attention_weights(NodeId attn_node) const {
  const Node& n = node(attn_node);
  if (n.op != Op::Attention)
    raise(Err::InvalidId, "node is not an attention node");
  int S = n.value.rows();
  return Tensor({n.iarg, S, S}, n.saved);
}

NodeId Graph::cross_entropy_masked(NodeId logits,
                                   std::span<const int> targets,
                                   std::span<const uint8_t> mask,
                                   Reduction red) {
  const Tensor& tl = value(logits);
  if (!tl.is_matrix()) raise(Err::ShapeMismatch, "logits must be [T x V]");
  int T = tl.rows(), V = tl.cols();
  if (static_cast<int>(targets.size()) != T ||
      static_cast<int>(mask.size()) != T)
    raise(Err::LengthMismatch, "targets/mask must cover all logits rows");
  int n_masked = 0;
  for (int t = 0; t < T; ++t) n_masked += mask[t] ? 1 : 0;
  if (n_masked == 0) raise(Err::EmptyMask, "no supervised position");

  Node n;
  n.op = Op::CrossEntropy;
  n.in = {logits, -1, -1};
  n.n_in = 1;
  n.needs_grad = nodes_[logits].needs_grad;
  n.iarg = red == Reduction::TokenMean ? 1 : 0;
  // saved: probs for each masked row (n_masked * V)
  // saved_i: [n_masked, masked_row..., target_at_masked_row...]
  n.saved.resize(static_cast<size_t>(n_masked) * V);
  n.saved_i.reserve(1 + 2 * n_masked);
  n.saved_i.push_back(n_masked);
  double loss = 0.0;
  int mrow = 0;
  for (int t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    int y = targets[t];
    if (y < 0 || y >= V)
      raise(Err::IndexOutOfVocab,
            "target " + std::to_string(y) + " at position " + std::to_string(t));
    const double* x = tl.data.data() + static_cast<size_t>(t) * V;
    double* p = n.saved.data() + static_cast<size_t>(mrow) * V;
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < V; ++c) mx = std::max(mx, x[c]);
    double z = 0.0;
    for (int c = 0; c < V; ++c) {
      p[c] = std::exp(x[c] - mx);
      z += p[c];
    }
    for (int c = 0; c < V; ++c) p[c] /= z;
    loss += -(x[y] - mx - std::log(z));
    n.saved_i.push_back(t);
    ++mrow;
  }
  for (int t = 0; t < T; ++t)
    if (mask[t]) n.saved_i.push_back(targets[t]);
  if (red == Reduction::TokenMean) loss /= n_masked;
  n.value = Tensor::scalar(loss);
  return push(std::move(n));
}

GradMap Graph::backward(NodeId loss) const {
  const Node& ln = node(loss);
  if (ln.value.numel() != 1)
    raise(Err::NonScalarLoss,
          "loss tensor has " + std::to_string(ln.value.numel()) + " elements");

  std::vector<std::vector<double>> grad(nodes_.size());
  auto ensure = [&](NodeId id) -> std::vector<double>& {
    auto& g = grad[id];
    if (g.empty()) g.assign(nodes_[id].value.numel(), 0.0);
    return g;
  };
  ensure(loss)[0] = 1.0;

  const auto& K = kern::active();
  std::vector<double> tmp;

  for (NodeId id = loss; id >= 0; --id) {
    const Node& n = nodes_[id];
    if (!n.needs_grad || grad[id].empty()) continue;
    const std::vector<double>& go = grad[id];
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Add: {
        if (nodes_[n.in[0]].needs_grad)
          K.axpy(ensure(n.in[0]).data(), go.data(), 1.0, go.size());
        if (nodes_[n.in[1]].needs_grad)
          K.axpy(ensure(n.in[1]).data(), go.data(), 1.0, go.size());
        break;
      }
      case Op::AddBias: {
        const Tensor& ta = nodes_[n.in[0]].value;
        int R = ta.rows(), C = ta.cols();
        if (nodes_[n.in[0]].needs_grad)
          K.axpy(ensure(n.in[0]).data(), go.data(), 1.0, go.size());
        if (nodes_[n.in[1]].needs_grad) {
          auto& gb = ensure(n.in[1]);
          for (int r = 0; r < R; ++r)
            K.axpy(gb.data(), go.data() + static_cast<size_t>(r) * C, 1.0, C);
        }
        break;
      }
      case Op::Mul: {
        const Tensor& ta = nodes_[n.in[0]].value;
        const Tensor& tb = nodes_[n.in[1]].value;
        tmp.resize(go.size());
        if (nodes_[n.in[0]].needs_grad) {
          K.mul(tmp.data(), go.data(), tb.data.data(), go.size());
          K.axpy(ensure(n.in[0]).data(), tmp.data(), 1.0, go.size());
        }
        if (nodes_[n.in[1]].needs_grad) {
          K.mul(tmp.data(), go.data(), ta.data.data(), go.size());
          K.axpy(ensure(n.in[1]).data(), tmp.data(), 1.0, go.size());
        }
        break;
      }
      case Op::Scale: {
        if (nodes_[n.in[0]].needs_grad)
          K.axpy(ensure(n.in[0]).data(), go.data(), n.darg, go.size());
        break;
      }
      case Op::MatMul: {
        const Tensor& ta = nodes_[n.in[0]].value;
        const Tensor& tb = nodes_[n.in[1]].value;
        int m = ta.rows(), k = ta.cols(), nn = tb.cols();
        if (nodes_[n.in[0]].needs_grad) {
          tmp.resize(static_cast<size_t>(m) * k);
          K.gemm_nt(tmp.data(), go.data(), tb.data.data(), m, nn, k);
          K.axpy(ensure(n.in[0]).data(), tmp.data(), 1.0, tmp.size());
        }
        if (nodes_[n.in[1]].needs_grad) {
          tmp.resize(static_cast<size_t>(k) * nn);
          K.gemm_tn(tmp.data(), ta.data.data(), go.data(), k, m, nn);
          K.axpy(ensure(n.in[1]).data(), tmp.data(), 1.0, tmp.size());
        }
        break;
      }
      case Op::SoftmaxRows: {
        if (!nodes_[n.in[0]].needs_grad) break;
        const Tensor& p = n.value;
        int R = p.rows(), C = p.cols();
        auto& gx = ensure(n.in[0]);
        for (int r = 0; r < R; ++r) {
          const double* pr = p.data.data() + static_cast<size_t>(r) * C;
          const double* gr = go.data() + static_cast<size_t>(r) * C;
          double dot = 0.0;
          for (int c = 0; c < C; ++c) dot += gr[c] * pr[c];
          double* gxr = gx.data() + static_cast<size_t>(r) * C;
          for (int c = 0; c < C; ++c) gxr[c] += pr[c] * (gr[c] - dot);
        }
        break;
      }
      case Op::Gelu: {
        if (!nodes_[n.in[0]].needs_grad) break;
        const Tensor& tx = nodes_[n.in[0]].value;
        auto& gx = ensure(n.in[0]);
        for (size_t i = 0; i < tx.numel(); ++i) {
          double x = tx.data[i];
          double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
          double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
          gx[i] += go[i] * (cdf + x * pdf);
        }
        break;
      }
      case Op::LayerNorm: {
        const Tensor& tx = nodes_[n.in[0]].value;
        const Tensor& tg = nodes_[n.in[1]].value;
        int R = tx.rows(), C = tx.cols();
        const double* xhat = n.saved.data();
        const double* inv_std = n.saved.data() + static_cast<size_t>(R) * C;
        if (nodes_[n.in[1]].needs_grad) {
          auto& gg = ensure(n.in[1]);
          for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c)
              gg[c] += go[static_cast<size_t>(r) * C + c] *
                       xhat[static_cast<size_t>(r) * C + c];
        }
        if (nodes_[n.in[2]].needs_grad) {
          auto& gb = ensure(n.in[2]);
          for (int r = 0; r < R; ++r)
            K.axpy(gb.data(), go.data() + static_cast<size_t>(r) * C, 1.0, C);
        }
        if (nodes_[n.in[0]].needs_grad) {
          auto& gx = ensure(n.in[0]);
          std::vector<double> dxhat(C);
          for (int r = 0; r < R; ++r) {
            const double* gr = go.data() + static_cast<size_t>(r) * C;
            const double* xh = xhat + static_cast<size_t>(r) * C;
            double sum_dx = 0.0, sum_dx_xh = 0.0;
            for (int c = 0; c < C; ++c) {
              dxhat[c] = gr[c] * tg.data[c];
              sum_dx += dxhat[c];
              sum_dx_xh += dxhat[c] * xh[c];
            }
            double* gxr = gx.data() + static_cast<size_t>(r) * C;
            double k_inv = inv_std[r] / C;
            for (int c = 0; c < C; ++c)
              gxr[c] += k_inv * (C * dxhat[c] - sum_dx - xh[c] * sum_dx_xh);
          }
        }
        break;
      }
      case Op::Embed: {
        if (!nodes_[n.in[0]].needs_grad) break;
        auto& gt = ensure(n.in[0]);
        int D = n.value.cols();
        for (size_t t = 0; t < n.saved_i.size(); ++t) {
          int id = n.saved_i[t];
          K.axpy(gt.data() + static_cast<size_t>(id) * D,
                 go.data() + t * D, 1.0, D);
        }
        break;
      }
      case Op::ConcatRows: {
        const Tensor& ta = nodes_[n.in[0]].value;
        size_t na = ta.numel();
        if (nodes_[n.in[0]].needs_grad)
          K.axpy(ensure(n.in[0]).data(), go.data(), 1.0, na);
        if (nodes_[n.in[1]].needs_grad)
          K.axpy(ensure(n.in[1]).data(), go.data() + na, 1.0,
                 go.size() - na);
        break;
      }
      case Op::SliceRows: {
        if (!nodes_[n.in[0]].needs_grad) break;
        int C = n.value.cols();
        K.axpy(ensure(n.in[0]).data() + static_cast<size_t>(n.iarg) * C,
               go.data(), 1.0, go.size());
        break;
      }
      case Op::Reshape: {
        if (nodes_[n.in[0]].needs_grad)
          K.axpy(ensure(n.in[0]).data(), go.data(), 1.0, go.size());
        break;
      }
      case Op::Sum: {
        if (!nodes_[n.in[0]].needs_grad) break;
        auto& gx = ensure(n.in[0]);
        double g = go[0];
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        break;
      }
      case Op::Attention: {
        const Tensor& tq = nodes_[n.in[0]].value;
        const Tensor& tk = nodes_[n.in[1]].value;
        const Tensor& tv = nodes_[n.in[2]].value;
        int S = tq.rows(), D = tq.cols();
        int H = n.iarg, dh = D / H;
        double inv_sqrt_dh = n.darg;
        bool need_q = nodes_[n.in[0]].needs_grad;
        bool need_k = nodes_[n.in[1]].needs_grad;
        bool need_v = nodes_[n.in[2]].needs_grad;
        std::vector<double>* gq = need_q ? &ensure(n.in[0]) : nullptr;
        std::vector<double>* gk = need_k ? &ensure(n.in[1]) : nullptr;
        std::vector<double>* gv = need_v ? &ensure(n.in[2]) : nullptr;
        std::vector<double> qh(static_cast<size_t>(S) * dh);
        std::vector<double> kh(static_cast<size_t>(S) * dh);
        std::vector<double> vh(static_cast<size_t>(S) * dh);
        std::vector<double> goh(static_cast<size_t>(S) * dh);
        std::vector<double> dA(static_cast<size_t>(S) * S);
        std::vector<double> dS(static_cast<size_t>(S) * S);
        std::vector<double> dhead(static_cast<size_t>(S) * dh);
        for (int h = 0; h < H; ++h) {
          int off = h * dh;
          for (int s = 0; s < S; ++s) {
            std::memcpy(qh.data() + static_cast<size_t>(s) * dh,
                        tq.data.data() + static_cast<size_t>(s) * D + off,
                        sizeof(double) * dh);
            std::memcpy(kh.data() + static_cast<size_t>(s) * dh,
                        tk.data.data() + static_cast<size_t>(s) * D + off,
                        sizeof(double) * dh);
            std::memcpy(vh.data() + static_cast<size_t>(s) * dh,
                        tv.data.data() + static_cast<size_t>(s) * D + off,
                        sizeof(double) * dh);
            std::memcpy(goh.data() + static_cast<size_t>(s) * dh,
                        go.data() + static_cast<size_t>(s) * D + off,
                        sizeof(double) * dh);
          }
          const double* A = n.saved.data() + static_cast<size_t>(h) * S * S;
          if (need_v) {
            K.gemm_tn(dhead.data(), A, goh.data(), S, S, dh);
            for (int s = 0; s < S; ++s)
              K.axpy(gv->data() + static_cast<size_t>(s) * D + off,
                     dhead.data() + static_cast<size_t>(s) * dh, 1.0, dh);
          }
          if (need_q || need_k) {
            K.gemm_nt(dA.data(), goh.data(), vh.data(), S, dh, S);
            for (int i = 0; i < S; ++i) {
              const double* arow = A + static_cast<size_t>(i) * S;
              const double* darow = dA.data() + static_cast<size_t>(i) * S;
              double* dsrow = dS.data() + static_cast<size_t>(i) * S;
              double dot = 0.0;
              for (int j = 0; j <= i; ++j) dot += darow[j] * arow[j];
              for (int j = 0; j <= i; ++j)
                dsrow[j] = arow[j] * (darow[j] - dot) * inv_sqrt_dh;
              for (int j = i + 1; j < S; ++j) dsrow[j] = 0.0;
            }
            if (need_q) {
              K.gemm(dhead.data(), dS.data(), kh.data(), S, S, dh);
              for (int s = 0; s < S; ++s)
                K.axpy(gq->data() + static_cast<size_t>(s) * D + off,
                       dhead.data() + static_cast<size_t>(s) * dh, 1.0, dh);
            }
            if (need_k) {
              K.gemm_tn(dhead.data(), dS.data(), qh.data(), S, S, dh);
              for (int s = 0; s < S; ++s)
                K.axpy(gk->data() + static_cast<size_t>(s) * D + off,
                       dhead.data() + static_cast<size_t>(s) * dh, 1.0, dh);
            }
          }
        }
        break;
      }
      case Op::CrossEntropy: {
        if (!nodes_[n.in[0]].needs_grad) break;
        const Tensor& tl = nodes_[n.in[0]].value;
        int V = tl.cols();
        int n_masked = n.saved_i[0];
        double w = go[0];
        if (n.iarg == 1) w /= n_masked;
        auto& gl = ensure(n.in[0]);
        for (int r = 0; r < n_masked; ++r) {
          int row = n.saved_i[1 + r];
          int y = n.saved_i[1 + n_masked + r];
          const double* p = n.saved.data() + static_cast<size_t>(r) * V;
          double* g = gl.data() + static_cast<size_t>(row) * V;
          for (int c = 0; c < V; ++c) g[c] += w * p[c];
          g[y] -= w;
        }
        break;
      }
    }
  }

  GradMap out;
  out.by_node.resize(nodes_.size());
  for (size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.op != Op::Leaf || !n.value.requires_grad) continue;
    Tensor g = Tensor::zeros(n.value.shape);
    if (!grad[i].empty()) g.data = std::move(grad[i]);
    g.node_id = static_cast<NodeId>(i);
    out.by_node[i] = std::move(g);
  }
  return out;
}

std::vector<Tensor> finite_diff_grad(
    const std::function<double(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> params, double eps) {
  if (eps <= 0.0) raise(Err::InvalidArgument, "eps must be positive");
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const Tensor& p : params) grads.push_back(Tensor::zeros(p.shape));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    for (size_t i = 0; i < params[pi].data.size(); ++i) {
      double orig = params[pi].data[i];
      params[pi].data[i] = orig + eps;
      double up = f(params);
      params[pi].data[i] = orig - eps;
      double down = f(params);
      params[pi].data[i] = orig;
      grads[pi].data[i] = (up - down) / (2.0 * eps);
    }
  }
  return grads;
}

}  // namespace l2t
