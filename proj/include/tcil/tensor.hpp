#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <vector>

namespace tcil {

// Shapes are small: [K] for vectors, [C,H,W] for feature maps,
// [Cout,Cin,Kh,Kw] for convolution weights.
using Shape = std::vector<int>;

int64_t numel(const Shape& shape);
bool same_shape(const Shape& a, const Shape& b);
std::string shape_str(const Shape& shape);

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily, only while a tape is alive
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

// Reverse-mode autograd handle with value semantics. Copies share storage;
// ops record a tape while autograd is enabled and any input requires grad.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t size() const { return static_cast<int64_t>(node_->value.size()); }
  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& grad() { return node_->grad; }
  const std::vector<double>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  double scalar() const;
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  // Detached copy of the values (no tape, no grad).
  Tensor detached_copy() const;

  std::shared_ptr<TensorNode>& node() { return node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<TensorNode> node_;

  friend Tensor wrap_node(std::shared_ptr<TensorNode> n);
};

// Autograd is recorded only while enabled; frozen pipelines run under NoGrad.
bool autograd_enabled();

class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool previous_;
};

// Runs reverse accumulation from a scalar root; grads of requiring leaves
// are summed into their grad buffers.
void backward(const Tensor& root);

// --- elementwise / reductions -------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor sub_const(const Tensor& a, const std::vector<double>& c);
Tensor sum(const Tensor& a);
Tensor exp_elem(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// Euclidean norm of the flattened difference; gradient is safe at zero.
Tensor l2_distance(const Tensor& a, const Tensor& b);

// --- vector ops -----------------------------------------------------------
Tensor slice_prefix(const Tensor& a, int n);
Tensor log_softmax(const Tensor& a);
Tensor cross_entropy(const Tensor& logits, int label);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// --- feature-map ops ([C,H,W]) ---------------------------------------------
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int pad);
// Per-channel normalization over the spatial dims with affine gain/bias.
Tensor instance_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                     double eps = 1e-5);
Tensor maxpool2(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);
Tensor global_max_pool(const Tensor& x);
Tensor channel_mean_map(const Tensor& x);
Tensor channel_max_map(const Tensor& x);
Tensor mul_channel(const Tensor& x, const Tensor& a);
Tensor mul_spatial(const Tensor& x, const Tensor& s);
Tensor concat_channels(const std::vector<Tensor>& maps);
Tensor select_channels(const Tensor& x, const std::vector<int>& channels);

}  // namespace tcil
