#include "tcil/nn.hpp"

#include <cmath>

#include "tcil/errors.hpp"

namespace tcil {

Conv2dLayer::Conv2dLayer(int in_channels, int out_channels, int kernel, int pad,
                         std::mt19937_64& rng)
    : pad(pad) {
  double stddev = std::sqrt(2.0 / (in_channels * kernel * kernel));
  weight = Tensor::randn({out_channels, in_channels, kernel, kernel}, rng, stddev, true);
  bias = Tensor::zeros({out_channels}, true);
}

LinearLayer::LinearLayer(int in_dim, int out_dim, std::mt19937_64& rng) {
  double stddev = std::sqrt(2.0 / in_dim);
  weight = Tensor::randn({out_dim, in_dim}, rng, stddev, true);
  bias = Tensor::zeros({out_dim}, true);
}

InstanceNormLayer::InstanceNormLayer(int channels) {
  gain = Tensor::full({channels}, 1.0, true);
  bias = Tensor::zeros({channels}, true);
}

Mlp::Mlp(int dim, int reduction, std::mt19937_64& rng) {
  int hidden = std::max(1, dim / reduction);
  fc1 = LinearLayer(dim, hidden, rng);
  fc2 = LinearLayer(hidden, dim, rng);
}

int ExtractorConfig::feature_size() const {
  int s = image_size;
  for (size_t i = 0; i < channels.size(); ++i) s /= 2;
  return s;
}

Extractor::Extractor(const ExtractorConfig& cfg, std::mt19937_64& rng) : config(cfg) {
  if (cfg.channels.empty()) throw config_error("extractor needs at least one conv block");
  if (cfg.feature_size() < 1)
    throw config_error("image size " + std::to_string(cfg.image_size) +
                       " too small for " + std::to_string(cfg.channels.size()) +
                       " pooling blocks");
  int in = cfg.in_channels;
  for (int out : cfg.channels) {
    convs.emplace_back(in, out, 3, 1, rng);
    norms.emplace_back(out);
    std::vector<int> identity(out);
    for (int i = 0; i < out; ++i) identity[i] = i;
    kept_indices.push_back(std::move(identity));
    in = out;
  }
}

Tensor Extractor::forward(const Tensor& image) const {
  Tensor x = image;
  for (size_t i = 0; i < convs.size(); ++i)
    x = maxpool2(relu(norms[i].forward(convs[i].forward(x))));
  return x;
}

std::vector<Tensor> Extractor::parameters() const {
  std::vector<Tensor> out;
  for (size_t i = 0; i < convs.size(); ++i) {
    out.push_back(convs[i].weight);
    out.push_back(convs[i].bias);
    out.push_back(norms[i].gain);
    out.push_back(norms[i].bias);
  }
  return out;
}

void Extractor::set_trainable(bool trainable) {
  for (Conv2dLayer& conv : convs) {
    conv.weight.set_requires_grad(trainable);
    conv.bias.set_requires_grad(trainable);
  }
  for (InstanceNormLayer& norm : norms) {
    norm.gain.set_requires_grad(trainable);
    norm.bias.set_requires_grad(trainable);
  }
}

std::vector<Tensor> collect_params(std::initializer_list<const std::vector<Tensor>*> groups) {
  std::vector<Tensor> out;
  for (const auto* g : groups) out.insert(out.end(), g->begin(), g->end());
  return out;
}

int64_t parameter_count(const std::vector<Tensor>& params) {
  int64_t n = 0;
  for (const Tensor& p : params) n += p.size();
  return n;
}

uint64_t parameter_checksum(const std::vector<Tensor>& params) {
  uint64_t h = 1469598103934665603ull;  // FNV offset basis
  auto mix = [&h](const unsigned char* bytes, size_t len) {
    for (size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  };
  for (const Tensor& p : params)
    mix(reinterpret_cast<const unsigned char*>(p.data().data()),
        p.data().size() * sizeof(double));
  return h;
}

Sgd::Sgd(std::vector<Tensor> params, SgdConfig config)
    : params_(std::move(params)), config_(config) {
  velocity_.resize(params_.size());
  frozen_prefix_.assign(params_.size(), 0);
  for (size_t i = 0; i < params_.size(); ++i)
    velocity_[i].assign(params_[i].data().size(), 0.0);
}

void Sgd::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void Sgd::freeze_prefix(const Tensor& param, int64_t elements) {
  for (size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].node() == param.node()) {
      frozen_prefix_[i] = std::min<int64_t>(elements, params_[i].size());
      return;
    }
  }
  throw internal_error("freeze_prefix: parameter not managed by this optimizer");
}

void Sgd::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.requires_grad()) continue;
    if (p.grad().size() != p.data().size()) continue;  // never touched this batch
    auto& v = velocity_[i];
    for (size_t j = static_cast<size_t>(frozen_prefix_[i]); j < v.size(); ++j) {
      double g = p.grad()[j] + config_.weight_decay * p.data()[j];
      v[j] = config_.momentum * v[j] + g;
      p.data()[j] -= config_.lr * v[j];
    }
  }
}

}  // namespace tcil
