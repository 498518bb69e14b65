#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tcil/tensor.hpp"

namespace tcil {

struct Conv2dLayer {
  Tensor weight;  // [Cout,Cin,K,K]
  Tensor bias;    // [Cout]
  int pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(int in_channels, int out_channels, int kernel, int pad, std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, pad); }
  int out_channels() const { return weight.shape()[0]; }
  int in_channels() const { return weight.shape()[1]; }
};

struct LinearLayer {
  Tensor weight;  // [out,in]
  Tensor bias;    // [out]

  LinearLayer() = default;
  LinearLayer(int in_dim, int out_dim, std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
  int out_dim() const { return weight.shape()[0]; }
  int in_dim() const { return weight.shape()[1]; }
};

// Two-layer perceptron with a reduction bottleneck, shared by the avg and
// max branches of the channel attention.
struct Mlp {
  LinearLayer fc1;
  LinearLayer fc2;

  Mlp() = default;
  Mlp(int dim, int reduction, std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const { return fc2.forward(relu(fc1.forward(x))); }
};

struct ExtractorConfig {
  int in_channels = 3;
  int image_size = 32;                     // square inputs
  std::vector<int> channels = {16, 32, 64};  // one conv per block, pool after each

  int feature_channels() const { return channels.back(); }
  int feature_size() const;  // spatial side of the output map
};

struct InstanceNormLayer {
  Tensor gain;  // [C]
  Tensor bias;  // [C]

  InstanceNormLayer() = default;
  explicit InstanceNormLayer(int channels);

  Tensor forward(const Tensor& x) const { return instance_norm(x, gain, bias); }
};

// Per-task feature extractor: stacked conv3x3 + norm + relu + maxpool
// blocks. The per-channel normalization keeps feature scales bounded so the
// downstream attention sigmoids cannot saturate shut. Emits a [C_f, S, S]
// map.
struct Extractor {
  ExtractorConfig config;
  std::vector<Conv2dLayer> convs;
  std::vector<InstanceNormLayer> norms;
  // Kept output-channel indices per conv, in original index space. Identity
  // until the extractor is pruned.
  std::vector<std::vector<int>> kept_indices;

  Extractor() = default;
  Extractor(const ExtractorConfig& cfg, std::mt19937_64& rng);

  Tensor forward(const Tensor& image) const;
  int out_channels() const { return convs.back().out_channels(); }
  // Kept indices of the final conv, i.e. which original feature channels
  // this extractor still emits.
  const std::vector<int>& output_channels_kept() const { return kept_indices.back(); }

  std::vector<Tensor> parameters() const;
  void set_trainable(bool trainable);
};

std::vector<Tensor> collect_params(std::initializer_list<const std::vector<Tensor>*> groups);
int64_t parameter_count(const std::vector<Tensor>& params);

// FNV-1a over the raw bytes of all parameter values, in declaration order.
// Bit-identical parameters give equal checksums.
uint64_t parameter_checksum(const std::vector<Tensor>& params);

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

class Sgd {
 public:
  Sgd(std::vector<Tensor> params, SgdConfig config);

  void set_lr(double lr) { config_.lr = lr; }
  double lr() const { return config_.lr; }
  void zero_grad();
  void step();

  // Excludes the leading `elements` values of a parameter from every update
  // (gradient, momentum and weight decay). Rows are the leading dimension,
  // so a frozen row block is a flat prefix.
  void freeze_prefix(const Tensor& param, int64_t elements);

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  std::vector<int64_t> frozen_prefix_;
  SgdConfig config_;
};

}  // namespace tcil
