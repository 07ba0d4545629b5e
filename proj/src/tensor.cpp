#include "cytoset/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace cyto {
namespace {

using EMat =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

std::int64_t shape_size(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i)
    os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

[[noreturn]] void shape_fail(OpKind kind, const Tensor& a) {
  throw DataError(std::string("op ") + op_name(kind) +
                  ": bad operand shape " + shape_str(a.shape));
}

[[noreturn]] void shape_fail(OpKind kind, const Tensor& a, const Tensor& b) {
  throw DataError(std::string("op ") + op_name(kind) + ": shape mismatch " +
                  shape_str(a.shape) + " vs " + shape_str(b.shape));
}

float gelu_val(float x) {
  return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752440f));
}

float gelu_grad(float x) {
  const float phi = std::exp(-0.5f * x * x) * 0.39894228040143267794f;
  const float cdf = 0.5f * (1.0f + std::erf(x * 0.70710678118654752440f));
  return cdf + x * phi;
}

float sigmoid_val(float x) {
  return x >= 0 ? 1.0f / (1.0f + std::exp(-x))
                : std::exp(x) / (1.0f + std::exp(x));
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::concat: return "concat";
    case OpKind::reduce_mean: return "reduce_mean";
    case OpKind::reduce_sum: return "reduce_sum";
    case OpKind::reduce_max: return "reduce_max";
    case OpKind::softmax: return "softmax";
    case OpKind::relu: return "relu";
    case OpKind::leaky_relu: return "leaky_relu";
    case OpKind::gelu: return "gelu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::layernorm: return "layernorm";
    case OpKind::batchnorm: return "batchnorm";
    case OpKind::dropout: return "dropout";
    case OpKind::linear: return "linear";
    case OpKind::gather: return "gather";
    case OpKind::scatter_sum: return "scatter_sum";
    case OpKind::transpose: return "transpose";
    case OpKind::scale: return "scale";
    case OpKind::rowmul: return "rowmul";
    case OpKind::rowdiv: return "rowdiv";
    case OpKind::segment_softmax: return "segment_softmax";
    case OpKind::bce_logits: return "bce_logits";
    case OpKind::leaf: return "leaf";
  }
  return "?";
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  Tensor t;
  t.shape = std::move(shape);
  t.store = std::make_shared<std::vector<float>>(shape_size(t.shape), 0.0f);
  t.requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(std::vector<int> shape, float value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::scalar(float value) { return full({1}, value); }

Tensor Tensor::from(std::vector<int> shape, std::vector<float> values) {
  if (shape_size(shape) != static_cast<std::int64_t>(values.size()))
    throw DataError("Tensor::from: " + shape_str(shape) + " needs " +
                    std::to_string(shape_size(shape)) + " values, got " +
                    std::to_string(values.size()));
  Tensor t;
  t.shape = std::move(shape);
  t.store = std::make_shared<std::vector<float>>(std::move(values));
  return t;
}

Tensor Tensor::uniform(std::vector<int> shape, float lo, float hi,
                       std::mt19937& rng) {
  Tensor t = zeros(std::move(shape));
  std::uniform_real_distribution<float> d(lo, hi);
  for (float& v : t.data()) v = d(rng);
  return t;
}

Tensor Tensor::normal(std::vector<int> shape, float mean, float stddev,
                      std::mt19937& rng) {
  Tensor t = zeros(std::move(shape));
  std::normal_distribution<float> d(mean, stddev);
  for (float& v : t.data()) v = d(rng);
  return t;
}

float Tensor::item() const {
  if (size() != 1) throw DataError("Tensor::item on non-scalar tensor");
  return (*store)[0];
}

Tensor Tensor::with_grad() const {
  Tensor t = *this;
  t.requires_grad = true;
  t.node = -1;
  return t;
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.requires_grad = false;
  t.node = -1;
  return t;
}

// ---------------------------------------------------------------------------

bool Tape::should_record(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad || t->node >= 0) return true;
  return false;
}

int Tape::input_id(const Tensor& t) {
  if (t.node >= 0) return t.node;
  auto it = leaves_.find(t.store.get());
  if (it != leaves_.end()) return it->second;
  Node leaf;
  leaf.kind = OpKind::leaf;
  leaf.shape = t.shape;
  nodes_.push_back(std::move(leaf));
  int id = static_cast<int>(nodes_.size()) - 1;
  leaves_.emplace(t.store.get(), id);
  return id;
}

int Tape::record(OpKind kind, std::vector<int> inputs, Tensor& out,
                 std::function<void(Tape&, int)> back) {
  Node n;
  n.kind = kind;
  n.inputs = std::move(inputs);
  n.shape = out.shape;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  out.node = static_cast<int>(nodes_.size()) - 1;
  out.requires_grad = true;
  return out.node;
}

std::vector<float>& Tape::grad_buf(int node) {
  if (grads_[node].empty())
    grads_[node].assign(shape_size(nodes_[node].shape), 0.0f);
  return grads_[node];
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw DataError("backward: loss must be scalar, got " +
                    shape_str(loss.shape));
  if (loss.node < 0)
    throw DataError("backward: loss is not on this tape");
  grads_.assign(nodes_.size(), {});
  grad_buf(loss.node)[0] = 1.0f;
  for (int i = loss.node; i >= 0; --i) {
    if (grads_[i].empty() || !nodes_[i].back) continue;
    nodes_[i].back(*this, i);
  }
}

Tensor Tape::grad(const Tensor& t) const {
  int id = t.node;
  if (id < 0) {
    auto it = leaves_.find(t.store.get());
    if (it != leaves_.end()) id = it->second;
  }
  if (id < 0 || id >= static_cast<int>(grads_.size()) || grads_[id].empty())
    return Tensor::zeros(t.shape);
  Tensor g;
  g.shape = t.shape;
  g.store = std::make_shared<std::vector<float>>(grads_[id]);
  return g;
}

// ---------------------------------------------------------------------------
// Ops

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  if (!a.is_matrix() || !b.is_matrix() || a.shape[1] != b.shape[0])
    shape_fail(OpKind::matmul, a, b);
  const int n = a.shape[0], k = a.shape[1], m = b.shape[1];
  Tensor out = Tensor::zeros({n, m});
  CMapM A(a.data().data(), n, k), B(b.data().data(), k, m);
  MapM(out.data().data(), n, m).noalias() = A * B;
  if (should_record({&a, &b})) {
    int ia = input_id(a), ib = input_id(b);
    auto as = a.store, bs = b.store;
    record(OpKind::matmul, {ia, ib}, out, [=](Tape& t, int self) {
      CMapM G(t.grads_[self].data(), n, m);
      CMapM A2(as->data(), n, k), B2(bs->data(), k, m);
      MapM(t.grad_buf(ia).data(), n, k).noalias() += G * B2.transpose();
      MapM(t.grad_buf(ib).data(), k, m).noalias() += A2.transpose() * G;
    });
  }
  return out;
}

// add/sub/mul share elementwise plumbing; b may broadcast as a row vector
// ({cols} / {1,cols}) or a single scalar {1}.
Tensor Tape::add(const Tensor& a, const Tensor& b) {
  const std::int64_t na = a.size(), nb = b.size();
  const int cols = a.cols();
  const bool same = b.shape == a.shape || (na == nb);
  const bool row = !same && (nb == cols);
  const bool scal = !same && !row && nb == 1;
  if (!same && !row && !scal) shape_fail(OpKind::add, a, b);
  Tensor out = Tensor::zeros(a.shape);
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::int64_t i = 0; i < na; ++i)
    ov[i] = av[i] + (same ? bv[i] : scal ? bv[0] : bv[i % cols]);
  if (should_record({&a, &b})) {
    int ia = input_id(a), ib = input_id(b);
    record(OpKind::add, {ia, ib}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& ga = t.grad_buf(ia);
      auto& gb = t.grad_buf(ib);
      for (std::int64_t i = 0; i < na; ++i) {
        ga[i] += g[i];
        gb[same ? i : scal ? 0 : i % cols] += g[i];
      }
    });
  }
  return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) shape_fail(OpKind::sub, a, b);
  Tensor out = Tensor::zeros(a.shape);
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i)
    out.data()[i] = a.data()[i] - b.data()[i];
  if (should_record({&a, &b})) {
    int ia = input_id(a), ib = input_id(b);
    record(OpKind::sub, {ia, ib}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& ga = t.grad_buf(ia);
      auto& gb = t.grad_buf(ib);
      for (std::int64_t i = 0; i < n; ++i) {
        ga[i] += g[i];
        gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  const std::int64_t na = a.size(), nb = b.size();
  const int cols = a.cols();
  const bool same = na == nb;
  const bool row = !same && nb == cols;
  const bool scal = !same && !row && nb == 1;
  if (!same && !row && !scal) shape_fail(OpKind::mul, a, b);
  Tensor out = Tensor::zeros(a.shape);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::int64_t i = 0; i < na; ++i)
    out.data()[i] = av[i] * (same ? bv[i] : scal ? bv[0] : bv[i % cols]);
  if (should_record({&a, &b})) {
    int ia = input_id(a), ib = input_id(b);
    auto as = a.store, bs = b.store;
    record(OpKind::mul, {ia, ib}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& ga = t.grad_buf(ia);
      auto& gb = t.grad_buf(ib);
      const auto& av2 = *as;
      const auto& bv2 = *bs;
      for (std::int64_t i = 0; i < na; ++i) {
        const std::int64_t j = same ? i : scal ? 0 : i % cols;
        ga[i] += g[i] * bv2[j];
        gb[j] += g[i] * av2[i];
      }
    });
  }
  return out;
}

Tensor Tape::concat(const Tensor& a, const Tensor& b, int axis) {
  if (!a.is_matrix() || !b.is_matrix() || axis < 0 || axis > 1)
    shape_fail(OpKind::concat, a, b);
  if (a.shape[1 - axis] != b.shape[1 - axis]) shape_fail(OpKind::concat, a, b);
  const int an = a.shape[0], ac = a.shape[1], bn = b.shape[0], bc = b.shape[1];
  Tensor out = axis == 0 ? Tensor::zeros({an + bn, ac})
                         : Tensor::zeros({an, ac + bc});
  if (axis == 0) {
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    std::copy(b.data().begin(), b.data().end(),
              out.data().begin() + a.size());
  } else {
    for (int i = 0; i < an; ++i) {
      std::copy_n(a.data().begin() + std::int64_t(i) * ac, ac,
                  out.data().begin() + std::int64_t(i) * (ac + bc));
      std::copy_n(b.data().begin() + std::int64_t(i) * bc, bc,
                  out.data().begin() + std::int64_t(i) * (ac + bc) + ac);
    }
  }
  if (should_record({&a, &b})) {
    int ia = input_id(a), ib = input_id(b);
    record(OpKind::concat, {ia, ib}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& ga = t.grad_buf(ia);
      auto& gb = t.grad_buf(ib);
      if (axis == 0) {
        for (std::int64_t i = 0; i < std::int64_t(an) * ac; ++i) ga[i] += g[i];
        for (std::int64_t i = 0; i < std::int64_t(bn) * bc; ++i)
          gb[i] += g[std::int64_t(an) * ac + i];
      } else {
        for (int i = 0; i < an; ++i) {
          for (int j = 0; j < ac; ++j)
            ga[std::int64_t(i) * ac + j] +=
                g[std::int64_t(i) * (ac + bc) + j];
          for (int j = 0; j < bc; ++j)
            gb[std::int64_t(i) * bc + j] +=
                g[std::int64_t(i) * (ac + bc) + ac + j];
        }
      }
    });
  }
  return out;
}

// Reductions accumulate in double then cast back to float.
Tensor Tape::reduce_sum(const Tensor& x, int axis) {
  const int n = x.rows(), c = x.cols();
  Tensor out;
  if (axis == -1) {
    double s = 0;
    for (float v : x.data()) s += v;
    out = Tensor::scalar(static_cast<float>(s));
  } else if (axis == 0) {
    out = Tensor::zeros({c});
    std::vector<double> acc(c, 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) acc[j] += x.data()[std::int64_t(i) * c + j];
    for (int j = 0; j < c; ++j) out.data()[j] = static_cast<float>(acc[j]);
  } else if (axis == 1) {
    out = Tensor::zeros({n});
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (int j = 0; j < c; ++j) s += x.data()[std::int64_t(i) * c + j];
      out.data()[i] = static_cast<float>(s);
    }
  } else {
    shape_fail(OpKind::reduce_sum, x);
  }
  if (should_record({&x})) {
    int ix = input_id(x);
    record(OpKind::reduce_sum, {ix}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(ix);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j)
          gx[std::int64_t(i) * c + j] +=
              axis == -1 ? g[0] : axis == 0 ? g[j] : g[i];
    });
  }
  return out;
}

Tensor Tape::reduce_mean(const Tensor& x, int axis) {
  const float denom = axis == -1 ? static_cast<float>(x.size())
                      : axis == 0 ? static_cast<float>(x.rows())
                                  : static_cast<float>(x.cols());
  return scale(reduce_sum(x, axis), 1.0f / denom);
}

Tensor Tape::reduce_max(const Tensor& x, int axis) {
  const int n = x.rows(), c = x.cols();
  if (axis != 0 && axis != 1) shape_fail(OpKind::reduce_max, x);
  const int m = axis == 0 ? c : n;
  Tensor out = Tensor::zeros({m});
  // argmax with ties resolved to the lowest index
  auto arg = std::make_shared<std::vector<int>>(m, 0);
  if (axis == 0) {
    for (int j = 0; j < c; ++j) {
      float best = x.data()[j];
      int bi = 0;
      for (int i = 1; i < n; ++i) {
        float v = x.data()[std::int64_t(i) * c + j];
        if (v > best) { best = v; bi = i; }
      }
      out.data()[j] = best;
      (*arg)[j] = bi;
    }
  } else {
    for (int i = 0; i < n; ++i) {
      const float* row = x.data().data() + std::int64_t(i) * c;
      int bj = 0;
      for (int j = 1; j < c; ++j)
        if (row[j] > row[bj]) bj = j;
      out.data()[i] = row[bj];
      (*arg)[i] = bj;
    }
  }
  if (should_record({&x})) {
    int ix = input_id(x);
    record(OpKind::reduce_max, {ix}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(ix);
      for (int i = 0; i < m; ++i) {
        std::int64_t flat = axis == 0
            ? std::int64_t((*arg)[i]) * c + i
            : std::int64_t(i) * c + (*arg)[i];
        gx[flat] += g[i];
      }
    });
  }
  return out;
}

Tensor Tape::softmax(const Tensor& x, int axis) {
  Tensor in = x;
  const bool transposed = axis == 0;
  if (axis != 0 && axis != 1 && !(axis == -1 && x.shape.size() == 1))
    shape_fail(OpKind::softmax, x);
  if (transposed) in = transpose(x);
  const int n = in.rows(), c = in.shape.size() == 1 ? in.rows() : in.cols();
  const int rows = in.shape.size() == 1 ? 1 : n;
  Tensor out = Tensor::zeros(in.shape);
  for (int i = 0; i < rows; ++i) {
    const float* row = in.data().data() + std::int64_t(i) * c;
    float* orow = out.data().data() + std::int64_t(i) * c;
    float mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0;
    for (int j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      s += orow[j];
    }
    const float inv = static_cast<float>(1.0 / s);
    for (int j = 0; j < c; ++j) orow[j] *= inv;
  }
  if (should_record({&in})) {
    int ix = input_id(in);
    auto ys = out.store;
    record(OpKind::softmax, {ix}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(ix);
      const auto& y = *ys;
      for (int i = 0; i < rows; ++i) {
        double dot = 0;
        for (int j = 0; j < c; ++j)
          dot += g[std::int64_t(i) * c + j] * y[std::int64_t(i) * c + j];
        for (int j = 0; j < c; ++j) {
          std::int64_t f = std::int64_t(i) * c + j;
          gx[f] += y[f] * (g[f] - static_cast<float>(dot));
        }
      }
    });
  }
  return transposed ? transpose(out) : out;
}

Tensor Tape::relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape);
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i)
    out.data()[i] = x.data()[i] > 0 ? x.data()[i] : 0.0f;
  if (should_record({&x})) {
    int ix = input_id(x);
    auto xs = x.store;
    record(OpKind::relu, {ix}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(ix);
      for (std::int64_t i = 0; i < n; ++i)
        if ((*xs)[i] > 0) gx[i] += g[i];  // d/dx at 0 defined as 0
    });
  }
  return out;
}

Tensor Tape::leaky_relu(const Tensor& x, float slope) {
  Tensor out = Tensor::zeros(x.shape);
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i)
    out.data()[i] = x.data()[i] > 0 ? x.data()[i] : slope * x.data()[i];
  if (should_record({&x})) {
    int ix = input_id(x);
    auto xs = x.store;
    record(OpKind::leaky_relu, {ix}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(ix);
      for (std::int64_t i = 0; i < n; ++i)
        gx[i] += g[i] * ((*xs)[i] > 0 ? 1.0f : slope);
    });
  }
  return out;
}

Tensor Tape::gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape);
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = gelu_val(x.data()[i]);
  if (should_record({&x})) {
    int ix = input_id(x);
    auto xs = x.store;
    record(OpKind::gelu, {ix}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(ix);
      for (std::int64_t i = 0; i < n; ++i)
        gx[i] += g[i] * gelu_grad((*xs)[i]);
    });
  }
  return out;
}

Tensor Tape::sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape);
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i)
    out.data()[i] = sigmoid_val(x.data()[i]);
  if (should_record({&x})) {
    int ix = input_id(x);
    auto ys = out.store;
    record(OpKind::sigmoid, {ix}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(ix);
      for (std::int64_t i = 0; i < n; ++i) {
        const float y = (*ys)[i];
        gx[i] += g[i] * y * (1.0f - y);
      }
    });
  }
  return out;
}

Tensor Tape::layernorm(const Tensor& x, const Tensor& gamma,
                       const Tensor& beta, float eps) {
  if (!x.is_matrix() || gamma.size() != x.cols() || beta.size() != x.cols())
    shape_fail(OpKind::layernorm, x, gamma);
  const int n = x.shape[0], c = x.shape[1];
  Tensor out = Tensor::zeros(x.shape);
  auto xhat = std::make_shared<std::vector<float>>(x.size());
  auto istd = std::make_shared<std::vector<float>>(n);
  for (int i = 0; i < n; ++i) {
    const float* row = x.data().data() + std::int64_t(i) * c;
    double mu = 0;
    for (int j = 0; j < c; ++j) mu += row[j];
    mu /= c;
    double var = 0;
    for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= c;
    const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*istd)[i] = is;
    for (int j = 0; j < c; ++j) {
      const float xh = (row[j] - static_cast<float>(mu)) * is;
      (*xhat)[std::int64_t(i) * c + j] = xh;
      out.data()[std::int64_t(i) * c + j] = gamma.data()[j] * xh +
                                            beta.data()[j];
    }
  }
  if (should_record({&x, &gamma, &beta})) {
    int ix = input_id(x), ig = input_id(gamma), ib = input_id(beta);
    auto gs = gamma.store;
    record(OpKind::layernorm, {ix, ig, ib}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(ix);
      auto& gg = t.grad_buf(ig);
      auto& gb = t.grad_buf(ib);
      for (int i = 0; i < n; ++i) {
        double m1 = 0, m2 = 0;  // mean(dxhat), mean(dxhat*xhat)
        for (int j = 0; j < c; ++j) {
          const std::int64_t f = std::int64_t(i) * c + j;
          const float dxh = g[f] * (*gs)[j];
          m1 += dxh;
          m2 += dxh * (*xhat)[f];
          gg[j] += g[f] * (*xhat)[f];
          gb[j] += g[f];
        }
        m1 /= c;
        m2 /= c;
        for (int j = 0; j < c; ++j) {
          const std::int64_t f = std::int64_t(i) * c + j;
          const float dxh = g[f] * (*gs)[j];
          gx[f] += (*istd)[i] * (dxh - static_cast<float>(m1) -
                                 (*xhat)[f] * static_cast<float>(m2));
        }
      }
    });
  }
  return out;
}

Tensor Tape::batchnorm(const Tensor& x, const Tensor& gamma,
                       const Tensor& beta, std::vector<float>& running_mean,
                       std::vector<float>& running_var, float momentum,
                       bool train, float eps) {
  if (!x.is_matrix() || gamma.size() != x.cols() || beta.size() != x.cols() ||
      static_cast<int>(running_mean.size()) != x.cols() ||
      static_cast<int>(running_var.size()) != x.cols())
    shape_fail(OpKind::batchnorm, x, gamma);
  const int n = x.shape[0], c = x.shape[1];
  std::vector<float> mean(c), var(c);
  if (train) {
    for (int j = 0; j < c; ++j) {
      double mu = 0;
      for (int i = 0; i < n; ++i) mu += x.data()[std::int64_t(i) * c + j];
      mu /= n;
      double v = 0;
      for (int i = 0; i < n; ++i) {
        const double d = x.data()[std::int64_t(i) * c + j] - mu;
        v += d * d;
      }
      v /= n;
      mean[j] = static_cast<float>(mu);
      var[j] = static_cast<float>(v);
      running_mean[j] = (1 - momentum) * running_mean[j] + momentum * mean[j];
      running_var[j] = (1 - momentum) * running_var[j] + momentum * var[j];
    }
  } else {
    mean = running_mean;
    var = running_var;
  }
  Tensor out = Tensor::zeros(x.shape);
  auto xhat = std::make_shared<std::vector<float>>(x.size());
  auto istd = std::make_shared<std::vector<float>>(c);
  for (int j = 0; j < c; ++j)
    (*istd)[j] = 1.0f / std::sqrt(var[j] + eps);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const std::int64_t f = std::int64_t(i) * c + j;
      const float xh = (x.data()[f] - mean[j]) * (*istd)[j];
      (*xhat)[f] = xh;
      out.data()[f] = gamma.data()[j] * xh + beta.data()[j];
    }
  if (should_record({&x, &gamma, &beta})) {
    int ix = input_id(x), ig = input_id(gamma), ib = input_id(beta);
    auto gs = gamma.store;
    record(OpKind::batchnorm, {ix, ig, ib}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(ix);
      auto& gg = t.grad_buf(ig);
      auto& gb = t.grad_buf(ib);
      for (int j = 0; j < c; ++j) {
        double m1 = 0, m2 = 0;
        for (int i = 0; i < n; ++i) {
          const std::int64_t f = std::int64_t(i) * c + j;
          const float dxh = g[f] * (*gs)[j];
          m1 += dxh;
          m2 += dxh * (*xhat)[f];
          gg[j] += g[f] * (*xhat)[f];
          gb[j] += g[f];
        }
        if (train) {
          m1 /= n;
          m2 /= n;
          for (int i = 0; i < n; ++i) {
            const std::int64_t f = std::int64_t(i) * c + j;
            const float dxh = g[f] * (*gs)[j];
            gx[f] += (*istd)[j] * (dxh - static_cast<float>(m1) -
                                   (*xhat)[f] * static_cast<float>(m2));
          }
        } else {
          for (int i = 0; i < n; ++i) {
            const std::int64_t f = std::int64_t(i) * c + j;
            gx[f] += g[f] * (*gs)[j] * (*istd)[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::dropout(const Tensor& x, float p, bool train, std::mt19937& rng) {
  if (p < 0.0f || p >= 1.0f)
    throw DataError("op dropout: p must be in [0,1), got " + std::to_string(p));
  if (!train || p == 0.0f) {
    Tensor out = Tensor::from(x.shape, x.data());
    if (should_record({&x})) {
      int ix = input_id(x);
      const std::int64_t n = x.size();
      record(OpKind::dropout, {ix}, out, [=](Tape& t, int self) {
        const auto& g = t.grads_[self];
        auto& gx = t.grad_buf(ix);
        for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
      });
    }
    return out;
  }
  const float keep = 1.0f - p;
  auto mask = std::make_shared<std::vector<float>>(x.size());
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  for (float& m : *mask) m = d(rng) < keep ? 1.0f / keep : 0.0f;
  Tensor out = Tensor::zeros(x.shape);
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i)
    out.data()[i] = x.data()[i] * (*mask)[i];
  if (should_record({&x})) {
    int ix = input_id(x);
    record(OpKind::dropout, {ix}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(ix);
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * (*mask)[i];
    });
  }
  return out;
}

Tensor Tape::linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (!x.is_matrix() || !w.is_matrix() || x.shape[1] != w.shape[0] ||
      b.size() != w.shape[1])
    shape_fail(OpKind::linear, x, w);
  return add(matmul(x, w), b);
}

Tensor Tape::gather(const Tensor& x, const std::vector<int>& rows) {
  if (!x.is_matrix()) shape_fail(OpKind::gather, x);
  const int n = x.shape[0], c = x.shape[1];
  const int m = static_cast<int>(rows.size());
  Tensor out = Tensor::zeros({m, c});
  for (int i = 0; i < m; ++i) {
    if (rows[i] < 0 || rows[i] >= n)
      throw DataError("op gather: row index " + std::to_string(rows[i]) +
                      " out of range [0," + std::to_string(n) + ")");
    std::copy_n(x.data().begin() + std::int64_t(rows[i]) * c, c,
                out.data().begin() + std::int64_t(i) * c);
  }
  if (should_record({&x})) {
    int ix = input_id(x);
    auto idx = std::make_shared<std::vector<int>>(rows);
    record(OpKind::gather, {ix}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(ix);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j)
          gx[std::int64_t((*idx)[i]) * c + j] += g[std::int64_t(i) * c + j];
    });
  }
  return out;
}

Tensor Tape::scatter_sum(const Tensor& x, const std::vector<int>& index,
                         int size) {
  if (!x.is_matrix() || static_cast<int>(index.size()) != x.shape[0])
    shape_fail(OpKind::scatter_sum, x);
  const int m = x.shape[0], c = x.shape[1];
  Tensor out = Tensor::zeros({size, c});
  for (int i = 0; i < m; ++i) {
    if (index[i] < 0 || index[i] >= size)
      throw DataError("op scatter_sum: index " + std::to_string(index[i]) +
                      " out of range [0," + std::to_string(size) + ")");
    for (int j = 0; j < c; ++j)
      out.data()[std::int64_t(index[i]) * c + j] +=
          x.data()[std::int64_t(i) * c + j];
  }
  if (should_record({&x})) {
    int ix = input_id(x);
    auto idx = std::make_shared<std::vector<int>>(index);
    record(OpKind::scatter_sum, {ix}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(ix);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j)
          gx[std::int64_t(i) * c + j] += g[std::int64_t((*idx)[i]) * c + j];
    });
  }
  return out;
}

Tensor Tape::transpose(const Tensor& x) {
  if (!x.is_matrix()) shape_fail(OpKind::transpose, x);
  const int n = x.shape[0], c = x.shape[1];
  Tensor out = Tensor::zeros({c, n});
  CMapM X(x.data().data(), n, c);
  MapM(out.data().data(), c, n) = X.transpose();
  if (should_record({&x})) {
    int ix = input_id(x);
    record(OpKind::transpose, {ix}, out, [=](Tape& t, int self) {
      CMapM G(t.grads_[self].data(), c, n);
      MapM(t.grad_buf(ix).data(), n, c) += G.transpose();
    });
  }
  return out;
}

Tensor Tape::scale(const Tensor& x, float cfac) {
  Tensor out = Tensor::zeros(x.shape);
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * cfac;
  if (should_record({&x})) {
    int ix = input_id(x);
    record(OpKind::scale, {ix}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(ix);
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * cfac;
    });
  }
  return out;
}

Tensor Tape::rowmul(const Tensor& x, const Tensor& cvec) {
  if (!x.is_matrix() || cvec.size() != x.shape[0])
    shape_fail(OpKind::rowmul, x, cvec);
  const int n = x.shape[0], c = x.shape[1];
  Tensor out = Tensor::zeros(x.shape);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      out.data()[std::int64_t(i) * c + j] =
          x.data()[std::int64_t(i) * c + j] * cvec.data()[i];
  if (should_record({&x, &cvec})) {
    int ix = input_id(x), ic = input_id(cvec);
    auto xs = x.store, cs = cvec.store;
    record(OpKind::rowmul, {ix, ic}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(ix);
      auto& gc = t.grad_buf(ic);
      for (int i = 0; i < n; ++i) {
        double dc = 0;
        for (int j = 0; j < c; ++j) {
          const std::int64_t f = std::int64_t(i) * c + j;
          gx[f] += g[f] * (*cs)[i];
          dc += double(g[f]) * (*xs)[f];
        }
        gc[i] += static_cast<float>(dc);
      }
    });
  }
  return out;
}

Tensor Tape::rowdiv(const Tensor& x, const Tensor& dvec, float floor) {
  if (!x.is_matrix() || dvec.size() != x.shape[0])
    shape_fail(OpKind::rowdiv, x, dvec);
  const int n = x.shape[0], c = x.shape[1];
  Tensor out = Tensor::zeros(x.shape);
  auto deff = std::make_shared<std::vector<float>>(n);
  auto live = std::make_shared<std::vector<char>>(n);
  for (int i = 0; i < n; ++i) {
    (*live)[i] = dvec.data()[i] > floor;
    (*deff)[i] = std::max(dvec.data()[i], floor);
    for (int j = 0; j < c; ++j)
      out.data()[std::int64_t(i) * c + j] =
          x.data()[std::int64_t(i) * c + j] / (*deff)[i];
  }
  if (should_record({&x, &dvec})) {
    int ix = input_id(x), id = input_id(dvec);
    auto xs = x.store;
    record(OpKind::rowdiv, {ix, id}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(ix);
      auto& gd = t.grad_buf(id);
      for (int i = 0; i < n; ++i) {
        double dd = 0;
        for (int j = 0; j < c; ++j) {
          const std::int64_t f = std::int64_t(i) * c + j;
          gx[f] += g[f] / (*deff)[i];
          dd += double(g[f]) * (*xs)[f];
        }
        if ((*live)[i])
          gd[i] -= static_cast<float>(dd / ((*deff)[i] * double((*deff)[i])));
      }
    });
  }
  return out;
}

Tensor Tape::segment_softmax(const Tensor& v,
                             const std::vector<int>& segments) {
  if (v.shape.size() != 1 || segments.size() != v.data().size())
    shape_fail(OpKind::segment_softmax, v);
  const int n = static_cast<int>(v.size());
  int nseg = 0;
  for (int s : segments) {
    if (s < 0) throw DataError("op segment_softmax: negative segment id");
    nseg = std::max(nseg, s + 1);
  }
  std::vector<float> smax(nseg, -std::numeric_limits<float>::infinity());
  for (int i = 0; i < n; ++i)
    smax[segments[i]] = std::max(smax[segments[i]], v.data()[i]);
  std::vector<double> ssum(nseg, 0.0);
  Tensor out = Tensor::zeros(v.shape);
  for (int i = 0; i < n; ++i) {
    out.data()[i] = std::exp(v.data()[i] - smax[segments[i]]);
    ssum[segments[i]] += out.data()[i];
  }
  for (int i = 0; i < n; ++i)
    out.data()[i] = static_cast<float>(out.data()[i] / ssum[segments[i]]);
  if (should_record({&v})) {
    int iv = input_id(v);
    auto ys = out.store;
    auto seg = std::make_shared<std::vector<int>>(segments);
    record(OpKind::segment_softmax, {iv}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gv = t.grad_buf(iv);
      std::vector<double> dot(nseg, 0.0);
      for (int i = 0; i < n; ++i)
        dot[(*seg)[i]] += double(g[i]) * (*ys)[i];
      for (int i = 0; i < n; ++i)
        gv[i] += (*ys)[i] *
                 (g[i] - static_cast<float>(dot[(*seg)[i]]));
    });
  }
  return out;
}

Tensor Tape::bce_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.size() != targets.size())
    shape_fail(OpKind::bce_logits, logits, targets);
  const std::int64_t n = logits.size();
  Tensor out = Tensor::zeros(logits.shape);
  for (std::int64_t i = 0; i < n; ++i) {
    const float z = logits.data()[i], tgt = targets.data()[i];
    out.data()[i] = std::max(z, 0.0f) - z * tgt +
                    std::log1p(std::exp(-std::abs(z)));
  }
  if (should_record({&logits, &targets})) {
    int iz = input_id(logits), it = input_id(targets);
    auto zs = logits.store, ts = targets.store;
    record(OpKind::bce_logits, {iz, it}, out, [=](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gz = t.grad_buf(iz);
      auto& gt = t.grad_buf(it);
      for (std::int64_t i = 0; i < n; ++i) {
        gz[i] += g[i] * (sigmoid_val((*zs)[i]) - (*ts)[i]);
        gt[i] -= g[i] * (*zs)[i];
      }
    });
  }
  return out;
}

Tensor Tape::forward_op(const std::string& kind,
                        const std::vector<Tensor>& in, const OpAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (in.size() != n)
      throw DataError("op " + kind + ": expected " + std::to_string(n) +
                      " inputs, got " + std::to_string(in.size()));
  };
  if (kind == "matmul") { need(2); return matmul(in[0], in[1]); }
  if (kind == "add") { need(2); return add(in[0], in[1]); }
  if (kind == "sub") { need(2); return sub(in[0], in[1]); }
  if (kind == "mul") { need(2); return mul(in[0], in[1]); }
  if (kind == "concat") { need(2); return concat(in[0], in[1], attrs.axis); }
  if (kind == "reduce_mean") { need(1); return reduce_mean(in[0], attrs.axis); }
  if (kind == "reduce_sum") { need(1); return reduce_sum(in[0], attrs.axis); }
  if (kind == "reduce_max") { need(1); return reduce_max(in[0], attrs.axis); }
  if (kind == "softmax") { need(1); return softmax(in[0], attrs.axis); }
  if (kind == "relu") { need(1); return relu(in[0]); }
  if (kind == "leaky_relu") { need(1); return leaky_relu(in[0], attrs.slope); }
  if (kind == "gelu") { need(1); return gelu(in[0]); }
  if (kind == "sigmoid") { need(1); return sigmoid(in[0]); }
  if (kind == "layernorm") {
    need(3);
    return layernorm(in[0], in[1], in[2], attrs.eps);
  }
  if (kind == "batchnorm") {
    need(5);
    std::vector<float> rm(in[3].data()), rv(in[4].data());
    return batchnorm(in[0], in[1], in[2], rm, rv, 0.1f, attrs.train,
                     attrs.eps);
  }
  if (kind == "dropout") {
    need(1);
    std::mt19937 rng(static_cast<std::uint32_t>(attrs.seed));
    return dropout(in[0], attrs.p, attrs.train, rng);
  }
  if (kind == "linear") { need(3); return linear(in[0], in[1], in[2]); }
  if (kind == "gather") { need(1); return gather(in[0], attrs.index); }
  if (kind == "scatter_sum") {
    need(1);
    return scatter_sum(in[0], attrs.index, attrs.size);
  }
  if (kind == "transpose") { need(1); return transpose(in[0]); }
  if (kind == "scale") { need(1); return scale(in[0], attrs.scale); }
  if (kind == "rowmul") { need(2); return rowmul(in[0], in[1]); }
  if (kind == "rowdiv") { need(2); return rowdiv(in[0], in[1], attrs.floor); }
  if (kind == "segment_softmax") {
    need(1);
    return segment_softmax(in[0], attrs.index);
  }
  if (kind == "bce_logits") { need(2); return bce_logits(in[0], in[1]); }
  throw DataError("unknown op kind: " + kind);
}

double gradient_check(const TensorFn& f, const Tensor& x, double eps) {
  if (eps <= 0) throw DataError("gradient_check: eps must be positive");
  Tensor leaf = x.with_grad();
  Tape tape;
  Tensor y = f(tape, leaf);
  if (y.size() != 1)
    throw DataError("gradient_check: f must be scalar-valued");
  if (!std::isfinite(y.item()))
    throw NumericError("gradient_check: non-finite function value");
  tape.backward(y);
  Tensor analytic = tape.grad(leaf);

  auto eval = [&](const Tensor& p) {
    Tape t(false);
    return f(t, p).item();
  };
  double worst = 0;
  Tensor probe = Tensor::from(x.shape, x.data());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const float orig = probe.data()[i];
    probe.data()[i] = orig + static_cast<float>(eps);
    const double fp = eval(probe);
    probe.data()[i] = orig - static_cast<float>(eps);
    const double fm = eval(probe);
    probe.data()[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("gradient_check: non-finite perturbed value");
    const double num = (fp - fm) / (2 * eps);
    const double err = std::abs(analytic.data()[i] - num) /
                       std::max(1.0, std::abs(num));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace cyto
