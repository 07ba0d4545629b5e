#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace cyto {

// Data-shaped inputs that fail validation (bad files, bad shapes, bad configs).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values or diverging numerics.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Tape;

/// Dense row-major float32 tensor, rank 1 or 2. Value type; the payload is
/// shared so copies are cheap and treated as immutable once created.
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<float>> store;
  bool requires_grad = false;
  int node = -1;  // id on the tape that produced this tensor, -1 if detached

  Tensor() : store(std::make_shared<std::vector<float>>()) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value);
  static Tensor scalar(float value);
  static Tensor from(std::vector<int> shape, std::vector<float> values);
  static Tensor uniform(std::vector<int> shape, float lo, float hi,
                        std::mt19937& rng);
  static Tensor normal(std::vector<int> shape, float mean, float stddev,
                       std::mt19937& rng);

  std::vector<float>& data() { return *store; }
  const std::vector<float>& data() const { return *store; }
  std::int64_t size() const { return static_cast<std::int64_t>(store->size()); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() > 1 ? shape[1] : 1; }
  bool is_matrix() const { return shape.size() == 2; }
  float item() const;
  Tensor with_grad() const;  // copy flagged as a differentiable leaf
  Tensor detached() const;   // same payload, no tape linkage
};

enum class OpKind {
  matmul, add, sub, mul, concat, reduce_mean, reduce_sum, reduce_max,
  softmax, relu, leaky_relu, gelu, sigmoid, layernorm, batchnorm, dropout,
  linear, gather, scatter_sum, transpose, scale, rowmul, rowdiv,
  segment_softmax, bce_logits, leaf
};

const char* op_name(OpKind kind);

/// Attribute bag for the string-dispatch surface (forward_op).
struct OpAttrs {
  int axis = -1;
  float p = 0.5f;
  bool train = false;
  float scale = 1.0f;
  float eps = 1e-5f;
  float slope = 0.2f;
  float floor = 1e-6f;
  int size = 0;
  std::vector<int> index;
  std::uint64_t seed = 0;
};

/// Reverse-mode tape. One forward/backward pass owns a tape exclusively.
/// Ops are tape methods; leaves (parameters, inputs with requires_grad)
/// are registered on first use and deduplicated by payload identity.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t num_nodes() const { return nodes_.size(); }

  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);  // b may be {d} or {1}
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);  // b may be {d} or {1}
  Tensor concat(const Tensor& a, const Tensor& b, int axis);
  Tensor reduce_mean(const Tensor& x, int axis);  // axis -1 = all -> {1}
  Tensor reduce_sum(const Tensor& x, int axis);
  Tensor reduce_max(const Tensor& x, int axis);
  Tensor softmax(const Tensor& x, int axis);
  Tensor relu(const Tensor& x);
  Tensor leaky_relu(const Tensor& x, float slope);
  Tensor gelu(const Tensor& x);
  Tensor sigmoid(const Tensor& x);
  Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   float eps = 1e-5f);
  Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<float>& running_mean,
                   std::vector<float>& running_var, float momentum, bool train,
                   float eps = 1e-5f);
  Tensor dropout(const Tensor& x, float p, bool train, std::mt19937& rng);
  Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
  Tensor gather(const Tensor& x, const std::vector<int>& rows);
  Tensor scatter_sum(const Tensor& x, const std::vector<int>& index, int size);
  Tensor transpose(const Tensor& x);
  Tensor scale(const Tensor& x, float c);
  Tensor rowmul(const Tensor& x, const Tensor& c);  // c has one entry per row
  Tensor rowdiv(const Tensor& x, const Tensor& d, float floor = 1e-6f);
  Tensor segment_softmax(const Tensor& v, const std::vector<int>& segments);
  Tensor bce_logits(const Tensor& logits, const Tensor& targets);

  /// String-keyed dispatch over the op catalog; unknown kinds throw.
  Tensor forward_op(const std::string& kind, const std::vector<Tensor>& inputs,
                    const OpAttrs& attrs);

  /// Propagates dLoss/d(everything) from a scalar loss back to the leaves.
  void backward(const Tensor& loss);

  /// Gradient of a leaf or intermediate after backward(); zeros when the
  /// tensor never participated in the loss.
  Tensor grad(const Tensor& t) const;

 private:
  struct Node {
    OpKind kind;
    std::vector<int> inputs;
    std::vector<int> shape;
    std::function<void(Tape&, int)> back;  // pull grads_[self], push to inputs
  };

  int input_id(const Tensor& t);
  int record(OpKind kind, std::vector<int> inputs, Tensor& out,
             std::function<void(Tape&, int)> back);
  bool should_record(std::initializer_list<const Tensor*> inputs) const;
  std::vector<float>& grad_buf(int node);

  std::vector<Node> nodes_;
  std::vector<std::vector<float>> grads_;
  std::unordered_map<const void*, int> leaves_;
  bool recording_;
};

/// Scalar-valued differentiable function of one tensor.
using TensorFn = std::function<Tensor(Tape&, const Tensor&)>;

/// Max over coordinates of |analytic - central difference| / max(1, |cd|).
double gradient_check(const TensorFn& f, const Tensor& x, double eps);

}  // namespace cyto
