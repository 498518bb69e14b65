#include "tcil/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "tcil/errors.hpp"

namespace tcil {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

namespace {

bool g_autograd_enabled = true;

std::shared_ptr<TensorNode> new_node(Shape shape) {
  auto n = std::make_shared<TensorNode>();
  n->value.assign(static_cast<size_t>(numel(shape)), 0.0);
  n->shape = std::move(shape);
  return n;
}

}  // namespace

Tensor wrap_node(std::shared_ptr<TensorNode> n) { return Tensor(std::move(n)); }

bool autograd_enabled() { return g_autograd_enabled; }

NoGrad::NoGrad() : previous_(g_autograd_enabled) { g_autograd_enabled = false; }
NoGrad::~NoGrad() { g_autograd_enabled = previous_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = new_node(std::move(shape));
  n->requires_grad = requires_grad;
  return wrap_node(n);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  auto n = new_node(std::move(shape));
  std::fill(n->value.begin(), n->value.end(), fill);
  n->requires_grad = requires_grad;
  return wrap_node(n);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (static_cast<int64_t>(values.size()) != numel(shape))
    throw internal_error("tensor value count does not match shape " + shape_str(shape));
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return wrap_node(n);
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  auto n = new_node(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : n->value) v = dist(rng);
  n->requires_grad = requires_grad;
  return wrap_node(n);
}

double Tensor::scalar() const {
  if (node_->value.size() != 1)
    throw internal_error("scalar() on tensor of shape " + shape_str(node_->shape));
  return node_->value[0];
}

Tensor Tensor::detached_copy() const {
  auto n = std::make_shared<TensorNode>();
  n->shape = node_->shape;
  n->value = node_->value;
  return wrap_node(n);
}

void backward(const Tensor& root) {
  if (root.size() != 1) throw internal_error("backward() root must be a scalar");
  if (!root.requires_grad()) return;

  // Post-order over requiring parents, then reverse accumulation.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* p = node->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (TensorNode* n : order) n->ensure_grad();
  root.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

namespace {

bool tape_active(std::initializer_list<const Tensor*> inputs) {
  if (!g_autograd_enabled) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

void attach(Tensor& out, std::vector<Tensor> parents, std::function<void(TensorNode&)> fn) {
  auto& n = out.node();
  n->requires_grad = true;
  for (auto& p : parents)
    if (p.defined()) n->parents.push_back(p.node());
  n->backward = std::move(fn);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!same_shape(a.shape(), b.shape()))
    throw internal_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (tape_active({&a, &b})) {
    auto an = a.node(), bn = b.node();
    attach(out, {a, b}, [an, bn](TensorNode& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (tape_active({&a, &b})) {
    auto an = a.node(), bn = b.node();
    attach(out, {a, b}, [an, bn](TensorNode& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (tape_active({&a, &b})) {
    auto an = a.node(), bn = b.node();
    attach(out, {a, b}, [an, bn](TensorNode& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * s;
  if (tape_active({&a})) {
    auto an = a.node();
    attach(out, {a}, [an, s](TensorNode& self) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * s;
    });
  }
  return out;
}

Tensor sub_const(const Tensor& a, const std::vector<double>& c) {
  if (c.size() != static_cast<size_t>(a.size()))
    throw internal_error("sub_const: size mismatch");
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - c[i];
  if (tape_active({&a})) {
    auto an = a.node();
    attach(out, {a}, [an](TensorNode& self) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = Tensor::zeros({1});
  double s = 0.0;
  for (double v : a.data()) s += v;
  out.data()[0] = s;
  if (tape_active({&a})) {
    auto an = a.node();
    attach(out, {a}, [an](TensorNode& self) {
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += self.grad[0];
    });
  }
  return out;
}

Tensor exp_elem(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = std::exp(a.data()[i]);
  if (tape_active({&a})) {
    auto an = a.node();
    attach(out, {a}, [an](TensorNode& self) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] * self.value[i];
    });
  }
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  if (tape_active({&a})) {
    auto an = a.node();
    attach(out, {a}, [an](TensorNode& self) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        if (an->value[i] > 0.0) an->grad[i] += self.grad[i];
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) {
    double x = a.data()[i];
    out.data()[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                             : std::exp(x) / (1.0 + std::exp(x));
  }
  if (tape_active({&a})) {
    auto an = a.node();
    attach(out, {a}, [an](TensorNode& self) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        double y = self.value[i];
        an->grad[i] += self.grad[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

Tensor l2_distance(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "l2_distance");
  Tensor out = Tensor::zeros({1});
  double sq = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    double d = a.data()[i] - b.data()[i];
    sq += d * d;
  }
  out.data()[0] = std::sqrt(sq);
  if (tape_active({&a, &b})) {
    auto an = a.node(), bn = b.node();
    attach(out, {a, b}, [an, bn](TensorNode& self) {
      double denom = std::max(self.value[0], 1e-12);
      double g = self.grad[0] / denom;
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (size_t i = 0; i < an->value.size(); ++i) {
        double d = (an->value[i] - bn->value[i]) * g;
        if (an->requires_grad) an->grad[i] += d;
        if (bn->requires_grad) bn->grad[i] -= d;
      }
    });
  }
  return out;
}

Tensor slice_prefix(const Tensor& a, int n) {
  if (a.shape().size() != 1) throw internal_error("slice_prefix expects a vector");
  if (n < 0 || n > a.shape()[0]) throw internal_error("slice_prefix: bad length");
  Tensor out = Tensor::zeros({n});
  std::copy(a.data().begin(), a.data().begin() + n, out.data().begin());
  if (tape_active({&a})) {
    auto an = a.node();
    attach(out, {a}, [an](TensorNode& self) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& a) {
  if (a.shape().size() != 1) throw internal_error("log_softmax expects a vector");
  int k = a.shape()[0];
  Tensor out = Tensor::zeros({k});
  double mx = *std::max_element(a.data().begin(), a.data().end());
  double lse = 0.0;
  for (double v : a.data()) lse += std::exp(v - mx);
  lse = mx + std::log(lse);
  for (int i = 0; i < k; ++i) out.data()[i] = a.data()[i] - lse;
  if (tape_active({&a})) {
    auto an = a.node();
    attach(out, {a}, [an](TensorNode& self) {
      an->ensure_grad();
      double gsum = 0.0;
      for (double g : self.grad) gsum += g;
      for (size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] - std::exp(self.value[i]) * gsum;
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, int label) {
  if (logits.shape().size() != 1) throw internal_error("cross_entropy expects a logit vector");
  int k = logits.shape()[0];
  if (label < 0 || label >= k)
    throw input_error("cross_entropy: label " + std::to_string(label) +
                      " out of range for " + std::to_string(k) + " classes");
  double mx = *std::max_element(logits.data().begin(), logits.data().end());
  double lse = 0.0;
  for (double v : logits.data()) lse += std::exp(v - mx);
  lse = mx + std::log(lse);
  Tensor out = Tensor::zeros({1});
  out.data()[0] = lse - logits.data()[label];
  if (tape_active({&logits})) {
    auto ln = logits.node();
    std::vector<double> probs(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) probs[i] = std::exp(logits.data()[i] - lse);
    attach(out, {logits}, [ln, probs, label](TensorNode& self) {
      ln->ensure_grad();
      double g = self.grad[0];
      for (size_t i = 0; i < probs.size(); ++i)
        ln->grad[i] += g * (probs[i] - (static_cast<int>(i) == label ? 1.0 : 0.0));
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.shape().size() != 1 || weight.shape().size() != 2)
    throw internal_error("linear expects vector input and 2-D weight");
  int in = x.shape()[0], out_dim = weight.shape()[0];
  if (weight.shape()[1] != in)
    throw internal_error("linear: weight " + shape_str(weight.shape()) +
                         " does not match input " + shape_str(x.shape()));
  Tensor out = Tensor::zeros({out_dim});
  const double* w = weight.data().data();
  for (int o = 0; o < out_dim; ++o) {
    double s = bias.defined() ? bias.data()[o] : 0.0;
    const double* row = w + static_cast<size_t>(o) * in;
    for (int i = 0; i < in; ++i) s += row[i] * x.data()[i];
    out.data()[o] = s;
  }
  if (tape_active({&x, &weight, &bias})) {
    auto xn = x.node(), wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    attach(out, {x, weight, bias}, [xn, wn, bn, in, out_dim](TensorNode& self) {
      if (xn->requires_grad) xn->ensure_grad();
      if (wn->requires_grad) wn->ensure_grad();
      if (bn && bn->requires_grad) bn->ensure_grad();
      for (int o = 0; o < out_dim; ++o) {
        double g = self.grad[o];
        if (g == 0.0) continue;
        const double* row = wn->value.data() + static_cast<size_t>(o) * in;
        if (bn && bn->requires_grad) bn->grad[o] += g;
        for (int i = 0; i < in; ++i) {
          if (xn->requires_grad) xn->grad[i] += g * row[i];
          if (wn->requires_grad)
            wn->grad[static_cast<size_t>(o) * in + i] += g * xn->value[i];
        }
      }
    });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int pad) {
  if (x.shape().size() != 3 || weight.shape().size() != 4)
    throw internal_error("conv2d expects [C,H,W] input and [O,C,Kh,Kw] weight");
  int cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  int cout = weight.shape()[0], kh = weight.shape()[2], kw = weight.shape()[3];
  if (weight.shape()[1] != cin)
    throw internal_error("conv2d: input channels " + std::to_string(cin) +
                         " vs weight channels " + std::to_string(weight.shape()[1]));
  int oh = h + 2 * pad - kh + 1;
  int ow = w + 2 * pad - kw + 1;
  if (oh < 1 || ow < 1) throw internal_error("conv2d: kernel larger than padded input");
  Tensor out = Tensor::zeros({cout, oh, ow});

  const double* xv = x.data().data();
  const double* wv = weight.data().data();
  double* ov = out.data().data();
  for (int oc = 0; oc < cout; ++oc) {
    double b = bias.defined() ? bias.data()[oc] : 0.0;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double s = b;
        for (int ic = 0; ic < cin; ++ic) {
          const double* xc = xv + static_cast<size_t>(ic) * h * w;
          const double* wc = wv + ((static_cast<size_t>(oc) * cin + ic) * kh) * kw;
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy + ky - pad;
            if (iy < 0 || iy >= h) continue;
            int kx_lo = std::max(0, pad - ox);
            int kx_hi = std::min(kw, w + pad - ox);
            const double* xr = xc + static_cast<size_t>(iy) * w + (ox - pad);
            const double* wr = wc + static_cast<size_t>(ky) * kw;
            for (int kx = kx_lo; kx < kx_hi; ++kx) s += xr[kx] * wr[kx];
          }
        }
        ov[(static_cast<size_t>(oc) * oh + oy) * ow + ox] = s;
      }
    }
  }

  if (tape_active({&x, &weight, &bias})) {
    auto xn = x.node(), wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    attach(out, {x, weight, bias},
           [xn, wn, bn, cin, h, w, cout, kh, kw, pad, oh, ow](TensorNode& self) {
             bool need_x = xn->requires_grad, need_w = wn->requires_grad;
             bool need_b = bn && bn->requires_grad;
             if (need_x) xn->ensure_grad();
             if (need_w) wn->ensure_grad();
             if (need_b) bn->ensure_grad();
             const double* gv = self.grad.data();
             for (int oc = 0; oc < cout; ++oc) {
               for (int oy = 0; oy < oh; ++oy) {
                 for (int ox = 0; ox < ow; ++ox) {
                   double g = gv[(static_cast<size_t>(oc) * oh + oy) * ow + ox];
                   if (g == 0.0) continue;
                   if (need_b) bn->grad[oc] += g;
                   for (int ic = 0; ic < cin; ++ic) {
                     size_t xbase = static_cast<size_t>(ic) * h * w;
                     size_t wbase = ((static_cast<size_t>(oc) * cin + ic) * kh) * kw;
                     for (int ky = 0; ky < kh; ++ky) {
                       int iy = oy + ky - pad;
                       if (iy < 0 || iy >= h) continue;
                       for (int kx = 0; kx < kw; ++kx) {
                         int ix = ox + kx - pad;
                         if (ix < 0 || ix >= w) continue;
                         size_t xi = xbase + static_cast<size_t>(iy) * w + ix;
                         size_t wi = wbase + static_cast<size_t>(ky) * kw + kx;
                         if (need_x) xn->grad[xi] += g * wn->value[wi];
                         if (need_w) wn->grad[wi] += g * xn->value[xi];
                       }
                     }
                   }
                 }
               }
             }
           });
  }
  return out;
}

Tensor instance_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.shape().size() != 3) throw internal_error("instance_norm expects [C,H,W]");
  int c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c})
    throw internal_error("instance_norm: gain/bias must be [C]");
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> xhat(static_cast<size_t>(c) * hw);
  std::vector<double> inv_std(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    const double* xc = x.data().data() + static_cast<size_t>(ch) * hw;
    double mean = 0.0;
    for (int i = 0; i < hw; ++i) mean += xc[i];
    mean /= hw;
    double var = 0.0;
    for (int i = 0; i < hw; ++i) var += (xc[i] - mean) * (xc[i] - mean);
    var /= hw;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(ch)] = is;
    for (int i = 0; i < hw; ++i) {
      double xh = (xc[i] - mean) * is;
      xhat[static_cast<size_t>(ch) * hw + i] = xh;
      out.data()[static_cast<size_t>(ch) * hw + i] = gain.data()[static_cast<size_t>(ch)] * xh + bias.data()[static_cast<size_t>(ch)];
    }
  }
  if (tape_active({&x, &gain, &bias})) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    attach(out, {x, gain, bias}, [xn, gn, bn, c, hw, xhat, inv_std](TensorNode& self) {
      bool need_x = xn->requires_grad;
      if (need_x) xn->ensure_grad();
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (int ch = 0; ch < c; ++ch) {
        size_t base = static_cast<size_t>(ch) * hw;
        double g = gn->value[static_cast<size_t>(ch)];
        double sum_gh = 0.0, sum_gh_xhat = 0.0;
        for (int i = 0; i < hw; ++i) {
          double up = self.grad[base + i];
          if (gn->requires_grad) gn->grad[static_cast<size_t>(ch)] += up * xhat[base + i];
          if (bn->requires_grad) bn->grad[static_cast<size_t>(ch)] += up;
          double gh = up * g;
          sum_gh += gh;
          sum_gh_xhat += gh * xhat[base + i];
        }
        if (need_x) {
          double mean_gh = sum_gh / hw;
          double mean_gh_xhat = sum_gh_xhat / hw;
          double is = inv_std[static_cast<size_t>(ch)];
          for (int i = 0; i < hw; ++i) {
            double gh = self.grad[base + i] * g;
            xn->grad[base + i] += is * (gh - mean_gh - xhat[base + i] * mean_gh_xhat);
          }
        }
      }
    });
  }
  return out;
}

Tensor maxpool2(const Tensor& x) {
  if (x.shape().size() != 3) throw internal_error("maxpool2 expects [C,H,W]");
  int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  int oh = h / 2, ow = w / 2;
  if (oh < 1 || ow < 1) throw internal_error("maxpool2: input too small");
  Tensor out = Tensor::zeros({c, oh, ow});
  std::vector<int> argmax(static_cast<size_t>(c) * oh * ow);
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        int best = -1;
        double bv = -1e308;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            int idx = (ch * h + oy * 2 + dy) * w + ox * 2 + dx;
            if (x.data()[idx] > bv) {
              bv = x.data()[idx];
              best = idx;
            }
          }
        }
        size_t o = (static_cast<size_t>(ch) * oh + oy) * ow + ox;
        out.data()[o] = bv;
        argmax[o] = best;
      }
    }
  }
  if (tape_active({&x})) {
    auto xn = x.node();
    attach(out, {x}, [xn, argmax](TensorNode& self) {
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[argmax[i]] += self.grad[i];
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.shape().size() != 3) throw internal_error("global_avg_pool expects [C,H,W]");
  int c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  Tensor out = Tensor::zeros({c});
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (int i = 0; i < hw; ++i) s += x.data()[static_cast<size_t>(ch) * hw + i];
    out.data()[ch] = s / hw;
  }
  if (tape_active({&x})) {
    auto xn = x.node();
    attach(out, {x}, [xn, c, hw](TensorNode& self) {
      xn->ensure_grad();
      for (int ch = 0; ch < c; ++ch) {
        double g = self.grad[ch] / hw;
        for (int i = 0; i < hw; ++i) xn->grad[static_cast<size_t>(ch) * hw + i] += g;
      }
    });
  }
  return out;
}

Tensor global_max_pool(const Tensor& x) {
  if (x.shape().size() != 3) throw internal_error("global_max_pool expects [C,H,W]");
  int c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  Tensor out = Tensor::zeros({c});
  std::vector<int> argmax(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    int best = ch * hw;
    for (int i = 1; i < hw; ++i)
      if (x.data()[static_cast<size_t>(ch) * hw + i] > x.data()[best]) best = ch * hw + i;
    out.data()[ch] = x.data()[best];
    argmax[ch] = best;
  }
  if (tape_active({&x})) {
    auto xn = x.node();
    attach(out, {x}, [xn, argmax](TensorNode& self) {
      xn->ensure_grad();
      for (size_t ch = 0; ch < argmax.size(); ++ch) xn->grad[argmax[ch]] += self.grad[ch];
    });
  }
  return out;
}

Tensor channel_mean_map(const Tensor& x) {
  if (x.shape().size() != 3) throw internal_error("channel_mean_map expects [C,H,W]");
  int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  int hw = h * w;
  Tensor out = Tensor::zeros({1, h, w});
  for (int i = 0; i < hw; ++i) {
    double s = 0.0;
    for (int ch = 0; ch < c; ++ch) s += x.data()[static_cast<size_t>(ch) * hw + i];
    out.data()[i] = s / c;
  }
  if (tape_active({&x})) {
    auto xn = x.node();
    attach(out, {x}, [xn, c, hw](TensorNode& self) {
      xn->ensure_grad();
      for (int i = 0; i < hw; ++i) {
        double g = self.grad[i] / c;
        for (int ch = 0; ch < c; ++ch) xn->grad[static_cast<size_t>(ch) * hw + i] += g;
      }
    });
  }
  return out;
}

Tensor channel_max_map(const Tensor& x) {
  if (x.shape().size() != 3) throw internal_error("channel_max_map expects [C,H,W]");
  int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  int hw = h * w;
  Tensor out = Tensor::zeros({1, h, w});
  std::vector<int> argmax(static_cast<size_t>(hw));
  for (int i = 0; i < hw; ++i) {
    int best = i;
    for (int ch = 1; ch < c; ++ch)
      if (x.data()[static_cast<size_t>(ch) * hw + i] > x.data()[best]) best = ch * hw + i;
    out.data()[i] = x.data()[best];
    argmax[i] = best;
  }
  if (tape_active({&x})) {
    auto xn = x.node();
    attach(out, {x}, [xn, argmax](TensorNode& self) {
      xn->ensure_grad();
      for (size_t i = 0; i < argmax.size(); ++i) xn->grad[argmax[i]] += self.grad[i];
    });
  }
  return out;
}

Tensor mul_channel(const Tensor& x, const Tensor& a) {
  if (x.shape().size() != 3 || a.shape().size() != 1 || a.shape()[0] != x.shape()[0])
    throw internal_error("mul_channel: [C,H,W] map and [C] weights required");
  int c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  Tensor out = Tensor::zeros(x.shape());
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < hw; ++i) {
      size_t idx = static_cast<size_t>(ch) * hw + i;
      out.data()[idx] = x.data()[idx] * a.data()[ch];
    }
  if (tape_active({&x, &a})) {
    auto xn = x.node(), an = a.node();
    attach(out, {x, a}, [xn, an, c, hw](TensorNode& self) {
      if (xn->requires_grad) xn->ensure_grad();
      if (an->requires_grad) an->ensure_grad();
      for (int ch = 0; ch < c; ++ch) {
        for (int i = 0; i < hw; ++i) {
          size_t idx = static_cast<size_t>(ch) * hw + i;
          if (xn->requires_grad) xn->grad[idx] += self.grad[idx] * an->value[ch];
          if (an->requires_grad) an->grad[ch] += self.grad[idx] * xn->value[idx];
        }
      }
    });
  }
  return out;
}

Tensor mul_spatial(const Tensor& x, const Tensor& s) {
  if (x.shape().size() != 3 || s.shape().size() != 3 || s.shape()[0] != 1 ||
      s.shape()[1] != x.shape()[1] || s.shape()[2] != x.shape()[2])
    throw internal_error("mul_spatial: [C,H,W] map and [1,H,W] weights required");
  int c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  Tensor out = Tensor::zeros(x.shape());
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < hw; ++i) {
      size_t idx = static_cast<size_t>(ch) * hw + i;
      out.data()[idx] = x.data()[idx] * s.data()[i];
    }
  if (tape_active({&x, &s})) {
    auto xn = x.node(), sn = s.node();
    attach(out, {x, s}, [xn, sn, c, hw](TensorNode& self) {
      if (xn->requires_grad) xn->ensure_grad();
      if (sn->requires_grad) sn->ensure_grad();
      for (int ch = 0; ch < c; ++ch) {
        for (int i = 0; i < hw; ++i) {
          size_t idx = static_cast<size_t>(ch) * hw + i;
          if (xn->requires_grad) xn->grad[idx] += self.grad[idx] * sn->value[i];
          if (sn->requires_grad) sn->grad[i] += self.grad[idx] * xn->value[idx];
        }
      }
    });
  }
  return out;
}

Tensor concat_channels(const std::vector<Tensor>& maps) {
  if (maps.empty()) throw internal_error("concat_channels: no inputs");
  int h = maps[0].shape()[1], w = maps[0].shape()[2];
  int c_total = 0;
  for (const Tensor& m : maps) {
    if (m.shape().size() != 3 || m.shape()[1] != h || m.shape()[2] != w)
      throw internal_error("concat_channels: spatial dims differ across inputs");
    c_total += m.shape()[0];
  }
  Tensor out = Tensor::zeros({c_total, h, w});
  size_t offset = 0;
  for (const Tensor& m : maps) {
    std::copy(m.data().begin(), m.data().end(), out.data().begin() + offset);
    offset += m.data().size();
  }
  bool active = g_autograd_enabled &&
                std::any_of(maps.begin(), maps.end(),
                            [](const Tensor& m) { return m.requires_grad(); });
  if (active) {
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const Tensor& m : maps) nodes.push_back(m.node());
    auto& n = out.node();
    n->requires_grad = true;
    n->parents = nodes;
    n->backward = [nodes](TensorNode& self) {
      size_t off = 0;
      for (auto& p : nodes) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (size_t i = 0; i < p->value.size(); ++i) p->grad[i] += self.grad[off + i];
        }
        off += p->value.size();
      }
    };
  }
  return out;
}

Tensor select_channels(const Tensor& x, const std::vector<int>& channels) {
  if (x.shape().size() != 3) throw internal_error("select_channels expects [C,H,W]");
  int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  int hw = h * w;
  for (int ch : channels)
    if (ch < 0 || ch >= c) throw internal_error("select_channels: channel out of range");
  Tensor out = Tensor::zeros({static_cast<int>(channels.size()), h, w});
  for (size_t k = 0; k < channels.size(); ++k)
    std::copy(x.data().begin() + static_cast<size_t>(channels[k]) * hw,
              x.data().begin() + static_cast<size_t>(channels[k] + 1) * hw,
              out.data().begin() + k * hw);
  if (tape_active({&x})) {
    auto xn = x.node();
    attach(out, {x}, [xn, channels, hw](TensorNode& self) {
      xn->ensure_grad();
      for (size_t k = 0; k < channels.size(); ++k)
        for (int i = 0; i < hw; ++i)
          xn->grad[static_cast<size_t>(channels[k]) * hw + i] += self.grad[k * hw + i];
    });
  }
  return out;
}

}  // namespace tcil
