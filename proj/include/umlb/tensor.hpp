#pragma once

// Dense row-major tensors plus a reverse-mode tape (Graph) with exactly the
// primitives a small decoder-only transformer needs. Scalar type is a
// template parameter: float for training, double for gradient-check oracles.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "umlb/util.hpp"

namespace umlb {

template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), T(0));
  }
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape)) throw InvalidInput("tensor data does not match shape");
  }

  static size_t numel_of(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) {
      if (d <= 0) throw InvalidInput("tensor dimensions must be positive");
      n *= static_cast<size_t>(d);
    }
    return n;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int rows() const { return shape.size() == 2 ? shape[0] : (shape.empty() ? 1 : shape[0]); }
  int cols() const { return shape.size() == 2 ? shape[1] : 1; }

  T& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
  T at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool finite() const { return all_finite(data); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

template <typename T>
Tensor<T> random_normal(std::vector<int> shape, T stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.next_normal() * static_cast<double>(stddev));
  return t;
}

// ---------------------------------------------------------------------------
// matmul kernels (accumulating)

template <typename T>
void mm_nn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  // c[m,n] += a[m,k] * b[k,n]
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<size_t>(i) * k;
    T* ci = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      T av = ai[p];
      if (av == T(0)) continue;
      const T* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
void mm_nt_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  // c[m,n] += a[m,k] * b[n,k]^T
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<size_t>(i) * k;
    T* ci = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* bj = b + static_cast<size_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

template <typename T>
void mm_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  // c[k,n] += a[m,k]^T * b[m,n]
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<size_t>(i) * k;
    const T* bi = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      T av = ai[p];
      if (av == T(0)) continue;
      T* cp = c + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

// ---------------------------------------------------------------------------
// standalone softmax (used directly by metrics and anywhere outside the tape)

// Stabilized softmax over the last axis. Throws on non-finite input.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.shape.empty() || logits.shape.back() < 1) throw InvalidInput("softmax: empty last axis");
  if (!logits.finite()) throw NumericError("softmax: non-finite input");
  Tensor<T> out = logits;
  int c = logits.shape.back();
  size_t rows = logits.numel() / static_cast<size_t>(c);
  for (size_t r = 0; r < rows; ++r) {
    T* row = out.data.data() + r * c;
    T mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int j = 0; j < c; ++j) row[j] /= sum;
  }
  return out;
}

// log softmax over the last axis via log-sum-exp; never log(softmax(x)).
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits) {
  if (logits.shape.empty() || logits.shape.back() < 1) throw InvalidInput("log_softmax: empty last axis");
  if (!logits.finite()) throw NumericError("log_softmax: non-finite input");
  Tensor<T> out = logits;
  int c = logits.shape.back();
  size_t rows = logits.numel() / static_cast<size_t>(c);
  for (size_t r = 0; r < rows; ++r) {
    T* row = out.data.data() + r * c;
    T mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    T lse = mx + std::log(sum);
    for (int j = 0; j < c; ++j) row[j] -= lse;
  }
  return out;
}

// ---------------------------------------------------------------------------
// reverse-mode tape

// A Graph owns one forward computation and can run one backward pass over it.
// Nodes are appended in execution order, so the record is topologically
// ordered by construction. Single-owner: not shareable across threads.
template <typename T>
class Graph {
 public:
  using Id = int32_t;

  enum class Op : uint8_t {
    kInput,
    kMatMul,     // a[m,k] @ b[k,n]
    kMatMulNT,   // a[m,k] @ b[n,k]^T
    kAdd,
    kScale,
    kAddRow,     // matrix + row vector
    kMulRow,     // matrix * row vector
    kLayerNorm,  // per-row normalize, then gain/bias
    kGelu,
    kCausalSoftmax,
    kLogSoftmax,
    kExp,
    kMul,        // elementwise
    kSum,        // full reduction to scalar
    kPick,       // gather single entries (row, col) -> vector
    kRows,       // gather rows by index
    kSliceRows,
  };

  Id input(Tensor<T> v, bool requires_grad = false) {
    Node n;
    n.op = Op::kInput;
    n.value = std::move(v);
    n.needs_grad = requires_grad;
    return push(std::move(n));
  }

  // External tensor, referenced not copied. Must outlive the graph.
  Id param(const Tensor<T>& t, bool requires_grad = true) {
    Node n;
    n.op = Op::kInput;
    n.ext = &t;
    n.needs_grad = requires_grad;
    return push(std::move(n));
  }

  Id matmul(Id a, Id b) {
    const auto& A = val(a);
    const auto& B = val(b);
    if (A.cols() != B.rows()) throw InvalidInput("matmul: inner dimensions differ");
    Node n = binary(Op::kMatMul, a, b, Tensor<T>({A.rows(), B.cols()}));
    mm_nn_acc(A.data.data(), B.data.data(), n.value.data.data(), A.rows(), A.cols(), B.cols());
    return push(std::move(n));
  }

  Id matmul_nt(Id a, Id b) {
    const auto& A = val(a);
    const auto& B = val(b);
    if (A.cols() != B.cols()) throw InvalidInput("matmul_nt: inner dimensions differ");
    Node n = binary(Op::kMatMulNT, a, b, Tensor<T>({A.rows(), B.rows()}));
    mm_nt_acc(A.data.data(), B.data.data(), n.value.data.data(), A.rows(), A.cols(), B.rows());
    return push(std::move(n));
  }

  Id add(Id a, Id b) {
    const auto& A = val(a);
    const auto& B = val(b);
    if (!A.same_shape(B)) throw InvalidInput("add: shape mismatch");
    Node n = binary(Op::kAdd, a, b, A);
    for (size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] += B.data[i];
    return push(std::move(n));
  }

  Id scale(Id a, T c) {
    Node n = unary(Op::kScale, a, val(a));
    n.scalar = c;
    for (auto& v : n.value.data) v *= c;
    return push(std::move(n));
  }

  Id add_row(Id m, Id v) {
    const auto& M = val(m);
    const auto& V = val(v);
    if (static_cast<size_t>(M.cols()) != V.numel()) throw InvalidInput("add_row: width mismatch");
    Node n = binary(Op::kAddRow, m, v, M);
    for (int i = 0; i < M.rows(); ++i)
      for (int j = 0; j < M.cols(); ++j) n.value.at(i, j) += V.data[j];
    return push(std::move(n));
  }

  Id mul_row(Id m, Id v) {
    const auto& M = val(m);
    const auto& V = val(v);
    if (static_cast<size_t>(M.cols()) != V.numel()) throw InvalidInput("mul_row: width mismatch");
    Node n = binary(Op::kMulRow, m, v, M);
    for (int i = 0; i < M.rows(); ++i)
      for (int j = 0; j < M.cols(); ++j) n.value.at(i, j) *= V.data[j];
    return push(std::move(n));
  }

  Id layer_norm(Id x, Id gain, Id bias, T eps = T(1e-5)) {
    const auto& X = val(x);
    int r = X.rows(), c = X.cols();
    if (val(gain).numel() != static_cast<size_t>(c) || val(bias).numel() != static_cast<size_t>(c))
      throw InvalidInput("layer_norm: gain/bias width mismatch");
    Node n;
    n.op = Op::kLayerNorm;
    n.a = x;
    n.b = gain;
    n.c = bias;
    n.scalar = eps;
    n.needs_grad = needs(x) || needs(gain) || needs(bias);
    n.value = Tensor<T>({r, c});
    n.aux = Tensor<T>({r, c});   // normalized rows before gain/bias
    n.aux2 = Tensor<T>({r});     // reciprocal stddev per row
    const auto& G = val(gain);
    const auto& B = val(bias);
    for (int i = 0; i < r; ++i) {
      const T* xi = X.data.data() + static_cast<size_t>(i) * c;
      T mean = T(0);
      for (int j = 0; j < c; ++j) mean += xi[j];
      mean /= static_cast<T>(c);
      T var = T(0);
      for (int j = 0; j < c; ++j) {
        T d = xi[j] - mean;
        var += d * d;
      }
      var /= static_cast<T>(c);
      T rstd = T(1) / std::sqrt(var + eps);
      n.aux2.data[i] = rstd;
      for (int j = 0; j < c; ++j) {
        T xh = (xi[j] - mean) * rstd;
        n.aux.at(i, j) = xh;
        n.value.at(i, j) = xh * G.data[j] + B.data[j];
      }
    }
    return push(std::move(n));
  }

  Id gelu(Id x) {
    Node n = unary(Op::kGelu, x, val(x));
    for (auto& v : n.value.data) v = gelu_fwd(v);
    return push(std::move(n));
  }

  // Row-stochastic causal attention: entry (i, j) masked out for j > i.
  Id causal_softmax(Id scores) {
    const auto& S = val(scores);
    if (S.rows() != S.cols()) throw InvalidInput("causal_softmax: expects square scores");
    Node n = unary(Op::kCausalSoftmax, scores, Tensor<T>(S.shape));
    int t = S.rows();
    for (int i = 0; i < t; ++i) {
      T mx = S.at(i, 0);
      for (int j = 1; j <= i; ++j) mx = std::max(mx, S.at(i, j));
      T sum = T(0);
      for (int j = 0; j <= i; ++j) {
        T e = std::exp(S.at(i, j) - mx);
        n.value.at(i, j) = e;
        sum += e;
      }
      for (int j = 0; j <= i; ++j) n.value.at(i, j) /= sum;
    }
    return push(std::move(n));
  }

  Id log_softmax_rows(Id x) {
    Node n = unary(Op::kLogSoftmax, x, umlb::log_softmax(val(x)));
    return push(std::move(n));
  }

  Id exp(Id x) {
    Node n = unary(Op::kExp, x, val(x));
    for (auto& v : n.value.data) v = std::exp(v);
    return push(std::move(n));
  }

  Id mul(Id a, Id b) {
    const auto& A = val(a);
    const auto& B = val(b);
    if (!A.same_shape(B)) throw InvalidInput("mul: shape mismatch");
    Node n = binary(Op::kMul, a, b, A);
    for (size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] *= B.data[i];
    return push(std::move(n));
  }

  Id sum(Id x) {
    const auto& X = val(x);
    T acc = T(0);
    for (T v : X.data) acc += v;
    Node n = unary(Op::kSum, x, Tensor<T>::scalar(acc));
    return push(std::move(n));
  }

  // out[k] = x[rows[k], cols[k]]
  Id pick(Id x, std::vector<int32_t> rows, std::vector<int32_t> cols) {
    const auto& X = val(x);
    if (rows.size() != cols.size() || rows.empty()) throw InvalidInput("pick: bad index lists");
    Node n = unary(Op::kPick, x, Tensor<T>({static_cast<int>(rows.size())}));
    for (size_t k = 0; k < rows.size(); ++k) {
      if (rows[k] < 0 || rows[k] >= X.rows() || cols[k] < 0 || cols[k] >= X.cols())
        throw InvalidInput("pick: index out of range");
      n.value.data[k] = X.at(rows[k], cols[k]);
    }
    n.idx = std::move(rows);
    for (int32_t c : cols) n.idx.push_back(c);
    return push(std::move(n));
  }

  // Embedding gather: out row k = table row ids[k].
  Id rows(Id table, std::vector<int32_t> ids) {
    const auto& E = val(table);
    if (ids.empty()) throw InvalidInput("rows: empty index list");
    Node n = unary(Op::kRows, table, Tensor<T>({static_cast<int>(ids.size()), E.cols()}));
    for (size_t k = 0; k < ids.size(); ++k) {
      if (ids[k] < 0 || ids[k] >= E.rows()) throw InvalidInput("rows: index out of range");
      const T* src = E.data.data() + static_cast<size_t>(ids[k]) * E.cols();
      std::copy(src, src + E.cols(), n.value.data.data() + k * static_cast<size_t>(E.cols()));
    }
    n.idx = std::move(ids);
    return push(std::move(n));
  }

  Id slice_rows(Id x, int r0, int r1) {
    const auto& X = val(x);
    if (r0 < 0 || r1 > X.rows() || r0 >= r1) throw InvalidInput("slice_rows: bad range");
    Node n = unary(Op::kSliceRows, x, Tensor<T>({r1 - r0, X.cols()}));
    std::copy(X.data.data() + static_cast<size_t>(r0) * X.cols(),
              X.data.data() + static_cast<size_t>(r1) * X.cols(), n.value.data.data());
    n.idx = {r0, r1};
    return push(std::move(n));
  }

  const Tensor<T>& val(Id id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    return n.ext ? *n.ext : n.value;
  }

  // Zero until backward() touches the node.
  const Tensor<T>& grad(Id id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.numel() == 0) {
      zero_like_ = Tensor<T>(val(id).shape);
      return zero_like_;
    }
    return n.grad;
  }

  bool needs(Id id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
  size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar loss. Deterministic: fixed reverse order,
  // fixed accumulation order. Disconnected inputs keep zero gradients.
  void backward(Id loss) {
    Node& ln = nodes_[static_cast<size_t>(loss)];
    if (val(loss).numel() != 1) throw InvalidInput("backward: loss must be scalar");
    if (!std::isfinite(static_cast<double>(val(loss).data[0])))
      throw NumericError("backward: loss is not finite");
    for (auto& n : nodes_)
      if (n.grad.numel()) std::fill(n.grad.data.begin(), n.grad.data.end(), T(0));
    ensure_grad(ln, val(loss).shape);
    ln.grad.data[0] = T(1);
    for (size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.op == Op::kInput || n.grad.numel() == 0) continue;
      backprop(n);
    }
    for (const auto& n : nodes_) {
      if (n.op == Op::kInput && n.needs_grad && n.grad.numel() && !n.grad.finite())
        throw NumericError("backward: non-finite gradient");
    }
  }

 private:
  struct Node {
    Op op = Op::kInput;
    Id a = -1, b = -1, c = -1;
    Tensor<T> value;
    const Tensor<T>* ext = nullptr;
    Tensor<T> grad;
    Tensor<T> aux, aux2;
    std::vector<int32_t> idx;
    T scalar{};
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  mutable Tensor<T> zero_like_;

  static T gelu_fwd(T x) {
    const T k = T(0.7978845608028654);  // sqrt(2/pi)
    T x3 = x * x * x;
    return T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x3)));
  }

  static T gelu_bwd(T x) {
    const T k = T(0.7978845608028654);
    T x2 = x * x;
    T u = k * (x + T(0.044715) * x2 * x);
    T t = std::tanh(u);
    T du = k * (T(1) + T(3) * T(0.044715) * x2);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
  }

  Id push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  Node unary(Op op, Id a, Tensor<T> value) {
    Node n;
    n.op = op;
    n.a = a;
    n.value = std::move(value);
    n.needs_grad = needs(a);
    return n;
  }

  Node binary(Op op, Id a, Id b, Tensor<T> value) {
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.value = std::move(value);
    n.needs_grad = needs(a) || needs(b);
    return n;
  }

  void ensure_grad(Node& n, const std::vector<int>& shape) {
    if (n.grad.numel() == 0) n.grad = Tensor<T>(shape);
  }

  Tensor<T>* grad_sink(Id id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.needs_grad) return nullptr;
    ensure_grad(n, val(id).shape);
    return &n.grad;
  }

  void backprop(Node& n) {
    const Tensor<T>& gy = n.grad;
    switch (n.op) {
      case Op::kMatMul: {
        const auto& A = val(n.a);
        const auto& B = val(n.b);
        if (auto* ga = grad_sink(n.a))
          mm_nt_acc(gy.data.data(), B.data.data(), ga->data.data(), A.rows(), B.cols(), A.cols());
        if (auto* gb = grad_sink(n.b))
          mm_tn_acc(A.data.data(), gy.data.data(), gb->data.data(), A.rows(), A.cols(), B.cols());
        break;
      }
      case Op::kMatMulNT: {
        const auto& A = val(n.a);
        const auto& B = val(n.b);
        // y = A B^T: dA += gy B ; dB += gy^T A
        if (auto* ga = grad_sink(n.a))
          mm_nn_acc(gy.data.data(), B.data.data(), ga->data.data(), A.rows(), B.rows(), A.cols());
        if (auto* gb = grad_sink(n.b))
          mm_tn_acc(gy.data.data(), A.data.data(), gb->data.data(), A.rows(), B.rows(), A.cols());
        break;
      }
      case Op::kAdd: {
        for (Id in : {n.a, n.b})
          if (auto* g = grad_sink(in))
            for (size_t i = 0; i < gy.data.size(); ++i) g->data[i] += gy.data[i];
        break;
      }
      case Op::kScale: {
        if (auto* g = grad_sink(n.a))
          for (size_t i = 0; i < gy.data.size(); ++i) g->data[i] += n.scalar * gy.data[i];
        break;
      }
      case Op::kAddRow: {
        if (auto* g = grad_sink(n.a))
          for (size_t i = 0; i < gy.data.size(); ++i) g->data[i] += gy.data[i];
        if (auto* g = grad_sink(n.b)) {
          int r = gy.rows(), c = gy.cols();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) g->data[j] += gy.at(i, j);
        }
        break;
      }
      case Op::kMulRow: {
        const auto& X = val(n.a);
        const auto& V = val(n.b);
        int r = gy.rows(), c = gy.cols();
        if (auto* g = grad_sink(n.a))
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) g->at(i, j) += gy.at(i, j) * V.data[j];
        if (auto* g = grad_sink(n.b))
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) g->data[j] += gy.at(i, j) * X.at(i, j);
        break;
      }
      case Op::kLayerNorm: {
        const auto& G = val(n.b);
        int r = gy.rows(), c = gy.cols();
        auto* gx = grad_sink(n.a);
        auto* gg = grad_sink(n.b);
        auto* gb = grad_sink(n.c);
        for (int i = 0; i < r; ++i) {
          T rstd = n.aux2.data[i];
          T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
          for (int j = 0; j < c; ++j) {
            T dy = gy.at(i, j);
            T xh = n.aux.at(i, j);
            if (gg) gg->data[j] += dy * xh;
            if (gb) gb->data[j] += dy;
            T dxhat = dy * G.data[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xh;
          }
          mean_dxhat /= static_cast<T>(c);
          mean_dxhat_xhat /= static_cast<T>(c);
          if (gx) {
            for (int j = 0; j < c; ++j) {
              T dxhat = gy.at(i, j) * G.data[j];
              gx->at(i, j) += (dxhat - mean_dxhat - n.aux.at(i, j) * mean_dxhat_xhat) * rstd;
            }
          }
        }
        break;
      }
      case Op::kGelu: {
        const auto& X = val(n.a);
        if (auto* g = grad_sink(n.a))
          for (size_t i = 0; i < gy.data.size(); ++i) g->data[i] += gy.data[i] * gelu_bwd(X.data[i]);
        break;
      }
      case Op::kCausalSoftmax: {
        if (auto* g = grad_sink(n.a)) {
          int t = gy.rows();
          for (int i = 0; i < t; ++i) {
            T dot = T(0);
            for (int j = 0; j <= i; ++j) dot += gy.at(i, j) * n.value.at(i, j);
            for (int j = 0; j <= i; ++j) g->at(i, j) += n.value.at(i, j) * (gy.at(i, j) - dot);
          }
        }
        break;
      }
      case Op::kLogSoftmax: {
        if (auto* g = grad_sink(n.a)) {
          int r = gy.rows(), c = gy.cols();
          for (int i = 0; i < r; ++i) {
            T s = T(0);
            for (int j = 0; j < c; ++j) s += gy.at(i, j);
            for (int j = 0; j < c; ++j) g->at(i, j) += gy.at(i, j) - std::exp(n.value.at(i, j)) * s;
          }
        }
        break;
      }
      case Op::kExp: {
        if (auto* g = grad_sink(n.a))
          for (size_t i = 0; i < gy.data.size(); ++i) g->data[i] += gy.data[i] * n.value.data[i];
        break;
      }
      case Op::kMul: {
        const auto& A = val(n.a);
        const auto& B = val(n.b);
        if (auto* g = grad_sink(n.a))
          for (size_t i = 0; i < gy.data.size(); ++i) g->data[i] += gy.data[i] * B.data[i];
        if (auto* g = grad_sink(n.b))
          for (size_t i = 0; i < gy.data.size(); ++i) g->data[i] += gy.data[i] * A.data[i];
        break;
      }
      case Op::kSum: {
        if (auto* g = grad_sink(n.a)) {
          T s = gy.data[0];
          for (auto& v : g->data) v += s;
        }
        break;
      }
      case Op::kPick: {
        if (auto* g = grad_sink(n.a)) {
          size_t k = n.idx.size() / 2;
          for (size_t i = 0; i < k; ++i) g->at(n.idx[i], n.idx[k + i]) += gy.data[i];
        }
        break;
      }
      case Op::kRows: {
        if (auto* g = grad_sink(n.a)) {
          int c = g->cols();
          for (size_t k = 0; k < n.idx.size(); ++k) {
            T* dst = g->data.data() + static_cast<size_t>(n.idx[k]) * c;
            const T* src = gy.data.data() + k * static_cast<size_t>(c);
            for (int j = 0; j < c; ++j) dst[j] += src[j];
          }
        }
        break;
      }
      case Op::kSliceRows: {
        if (auto* g = grad_sink(n.a)) {
          int c = g->cols();
          T* dst = g->data.data() + static_cast<size_t>(n.idx[0]) * c;
          for (size_t i = 0; i < gy.data.size(); ++i) dst[i] += gy.data[i];
        }
        break;
      }
      case Op::kInput:
        break;
    }
  }
};

// ---------------------------------------------------------------------------
// finite-difference oracle

struct FdOptions {
  double step = 1e-5;
  // Sample at most this many coordinates per tensor (0 = all).
  int max_coords_per_tensor = 0;
  uint64_t sample_seed = 17;
  // Skip coordinates whose numeric gradient is below this floor (0 = keep all).
  double min_numeric_grad = 0.0;
};

// Max over sampled coordinates of |g_analytic - g_numeric| / max(1e-8, |g_numeric|),
// with g_numeric from central differences. `f` re-evaluates the loss from the
// current parameter values; `params` and `analytic` are aligned.
template <typename T, typename F>
double finite_difference_check(F&& f, std::vector<Tensor<T>*> params,
                               const std::vector<const Tensor<T>*>& analytic,
                               const FdOptions& opt = {}) {
  if (opt.step <= 0.0) throw InvalidInput("finite_difference_check: step must be positive");
  if (params.size() != analytic.size()) throw InvalidInput("finite_difference_check: size mismatch");
  Rng rng(opt.sample_seed);
  double worst = 0.0;
  for (size_t t = 0; t < params.size(); ++t) {
    Tensor<T>& p = *params[t];
    size_t n = p.numel();
    std::vector<size_t> coords(n);
    std::iota(coords.begin(), coords.end(), size_t{0});
    if (opt.max_coords_per_tensor > 0 && n > static_cast<size_t>(opt.max_coords_per_tensor)) {
      deterministic_shuffle(coords, rng);
      coords.resize(static_cast<size_t>(opt.max_coords_per_tensor));
    }
    for (size_t c : coords) {
      T keep = p.data[c];
      p.data[c] = keep + static_cast<T>(opt.step);
      double up = static_cast<double>(f());
      p.data[c] = keep - static_cast<T>(opt.step);
      double dn = static_cast<double>(f());
      p.data[c] = keep;
      if (!std::isfinite(up) || !std::isfinite(dn))
        throw NumericError("finite_difference_check: non-finite evaluation");
      double gn = (up - dn) / (2.0 * opt.step);
      if (std::abs(gn) < opt.min_numeric_grad) continue;
      double ga = static_cast<double>(analytic[t]->data[c]);
      double rel = std::abs(ga - gn) / std::max(1e-8, std::abs(gn));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace umlb
