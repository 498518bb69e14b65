#include "tcil/model.hpp"

#include <algorithm>
#include <cmath>

#include "tcil/errors.hpp"

namespace tcil {

uint64_t mix_seed(uint64_t seed, uint64_t tag) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

FusionModule::FusionModule(int channels, int reduction, std::mt19937_64& rng)
    : channels(channels) {
  channel_mlp = Mlp(channels, reduction, rng);
  spatial_conv = Conv2dLayer(2, 1, 7, 3, rng);
}

FusionModule FusionModule::grown_from(const FusionModule& prev, int channels, int reduction,
                                      std::mt19937_64& rng) {
  FusionModule next(channels, reduction, rng);
  int c_old = prev.channels;
  int hid_old = prev.channel_mlp.fc1.out_dim();
  int hid_new = next.channel_mlp.fc1.out_dim();
  if (c_old > channels || hid_old > hid_new)
    throw internal_error("grown_from: fusion cannot shrink");

  // fc1: old hidden units read only the old channels at step start.
  auto& fc1 = next.channel_mlp.fc1;
  for (int h = 0; h < hid_old; ++h) {
    for (int c = 0; c < channels; ++c)
      fc1.weight.data()[static_cast<size_t>(h) * channels + c] =
          c < c_old ? prev.channel_mlp.fc1.weight.data()[static_cast<size_t>(h) * c_old + c]
                    : 0.0;
    fc1.bias.data()[static_cast<size_t>(h)] = prev.channel_mlp.fc1.bias.data()[static_cast<size_t>(h)];
  }
  // fc2: old channels keep their old-hidden mix and ignore new hidden units.
  auto& fc2 = next.channel_mlp.fc2;
  for (int c = 0; c < c_old; ++c) {
    for (int h = 0; h < hid_new; ++h)
      fc2.weight.data()[static_cast<size_t>(c) * hid_new + h] =
          h < hid_old ? prev.channel_mlp.fc2.weight.data()[static_cast<size_t>(c) * hid_old + h]
                      : 0.0;
    fc2.bias.data()[static_cast<size_t>(c)] = prev.channel_mlp.fc2.bias.data()[static_cast<size_t>(c)];
  }
  // Spatial conv shape never changes.
  next.spatial_conv.weight = prev.spatial_conv.weight.detached_copy();
  next.spatial_conv.weight.set_requires_grad(true);
  next.spatial_conv.bias = prev.spatial_conv.bias.detached_copy();
  next.spatial_conv.bias.set_requires_grad(true);
  next.spatial_conv.pad = prev.spatial_conv.pad;
  return next;
}

Tensor FusionModule::channel_attention(const Tensor& u) const {
  Tensor avg = global_avg_pool(u);
  Tensor mx = global_max_pool(u);
  return sigmoid(add(channel_mlp.forward(avg), channel_mlp.forward(mx)));
}

Tensor FusionModule::spatial_attention(const Tensor& u) const {
  Tensor pooled = concat_channels({channel_mean_map(u), channel_max_map(u)});
  return sigmoid(spatial_conv.forward(pooled));
}

Tensor FusionModule::fuse(const Tensor& u) const {
  if (u.shape()[0] != channels)
    throw config_error("fuse: map has " + std::to_string(u.shape()[0]) +
                       " channels, fusion sized for " + std::to_string(channels));
  Tensor v = mul_channel(u, channel_attention(u));
  return mul_spatial(v, spatial_attention(v));
}

Tensor FusionModule::combine(const Tensor& u, const Tensor& ac, const Tensor& as) {
  return mul_spatial(mul_channel(u, ac), as);
}

std::vector<Tensor> FusionModule::parameters() const {
  return {channel_mlp.fc1.weight, channel_mlp.fc1.bias, channel_mlp.fc2.weight,
          channel_mlp.fc2.bias, spatial_conv.weight, spatial_conv.bias};
}

void FusionModule::set_trainable(bool trainable) {
  for (Tensor p : parameters()) p.set_requires_grad(trainable);
}

FusionModule FusionModule::frozen_copy() const {
  FusionModule copy;
  copy.channels = channels;
  copy.channel_mlp.fc1.weight = channel_mlp.fc1.weight.detached_copy();
  copy.channel_mlp.fc1.bias = channel_mlp.fc1.bias.detached_copy();
  copy.channel_mlp.fc2.weight = channel_mlp.fc2.weight.detached_copy();
  copy.channel_mlp.fc2.bias = channel_mlp.fc2.bias.detached_copy();
  copy.spatial_conv.weight = spatial_conv.weight.detached_copy();
  copy.spatial_conv.bias = spatial_conv.bias.detached_copy();
  copy.spatial_conv.pad = spatial_conv.pad;
  return copy;
}

GrowingClassifier::GrowingClassifier(int num_classes, int feature_dim, std::mt19937_64& rng,
                                     bool use_bias) {
  double stddev = std::sqrt(2.0 / feature_dim);
  weight = Tensor::randn({num_classes, feature_dim}, rng, stddev, true);
  if (use_bias) bias = Tensor::zeros({num_classes}, true);
}

GrowingClassifier GrowingClassifier::grown(int new_classes, int new_feature_dim,
                                           std::mt19937_64& rng) const {
  if (new_classes <= 0) throw input_error("grown: new class count must be positive");
  int old_rows = num_classes();
  int old_dim = feature_dim();
  if (new_feature_dim < old_dim) throw internal_error("grown: feature dim shrank");
  GrowingClassifier out(old_rows + new_classes, new_feature_dim, rng, bias.defined());
  // Old rows: copy the old block, zero the widened columns so step-start
  // predictions on old classes ignore the untrained extractor.
  for (int r = 0; r < old_rows; ++r) {
    for (int c = 0; c < new_feature_dim; ++c)
      out.weight.data()[static_cast<size_t>(r) * new_feature_dim + c] =
          c < old_dim ? weight.data()[static_cast<size_t>(r) * old_dim + c] : 0.0;
    if (bias.defined()) out.bias.data()[r] = bias.data()[r];
  }
  return out;
}

void GrowingClassifier::set_trainable(bool trainable) {
  weight.set_requires_grad(trainable);
  if (bias.defined()) bias.set_requires_grad(trainable);
}

GrowingClassifier GrowingClassifier::frozen_copy() const {
  GrowingClassifier copy;
  copy.weight = weight.detached_copy();
  if (bias.defined()) copy.bias = bias.detached_copy();
  return copy;
}

RescoreState compute_gamma(const GrowingClassifier& classifier, int old_count, int new_count) {
  if (old_count < 1 || new_count < 1)
    throw input_error("compute_gamma: needs at least one old and one new class");
  if (old_count + new_count != classifier.num_classes())
    throw input_error("compute_gamma: counts do not match classifier rows");
  int dim = classifier.feature_dim();
  auto row_norm = [&](int r) {
    double s = 0.0;
    for (int c = 0; c < dim; ++c) {
      double w = classifier.weight.data()[static_cast<size_t>(r) * dim + c];
      s += w * w;
    }
    return std::sqrt(s);
  };
  double mean_old = 0.0, mean_new = 0.0;
  for (int r = 0; r < old_count; ++r) mean_old += row_norm(r);
  for (int r = old_count; r < old_count + new_count; ++r) mean_new += row_norm(r);
  mean_old /= old_count;
  mean_new /= new_count;
  if (mean_new == 0.0)
    throw degenerate_weights_error("compute_gamma: zero mean new-class weight norm");
  if (mean_old == 0.0)
    throw degenerate_weights_error("compute_gamma: zero mean old-class weight norm");
  return RescoreState{mean_old / mean_new, old_count, new_count};
}

std::vector<double> rescore_logits(const RescoreState& state, const std::vector<double>& logits) {
  if (static_cast<int>(logits.size()) != state.old_count + state.new_count)
    throw input_error("rescore_logits: expected " +
                      std::to_string(state.old_count + state.new_count) + " logits, got " +
                      std::to_string(logits.size()));
  std::vector<double> out = logits;
  for (int i = state.old_count; i < state.old_count + state.new_count; ++i)
    out[static_cast<size_t>(i)] *= state.gamma;
  return out;
}

DeaModel::DeaModel(const ExtractorConfig& arch, int initial_classes, int reduction,
                   uint64_t seed)
    : arch_(arch), reduction_(reduction), seed_(seed) {
  if (initial_classes <= 0) throw input_error("model needs a positive initial class count");
  std::mt19937_64 rng(mix_seed(seed, 1));
  extractors_.emplace_back(arch, rng);
  fusion_ = FusionModule(arch.feature_channels(), reduction, rng);
  classifier_ = GrowingClassifier(initial_classes, arch.feature_channels(), rng);
  classes_per_step_ = {initial_classes};
  std::vector<int> ids(static_cast<size_t>(initial_classes));
  for (int i = 0; i < initial_classes; ++i) ids[static_cast<size_t>(i)] = i;
  step_class_ids_ = {std::move(ids)};
}

DeaModel DeaModel::restore(const ExtractorConfig& arch, int reduction, uint64_t seed,
                           std::vector<Extractor> extractors, FusionModule fusion,
                           GrowingClassifier classifier, std::optional<RescoreState> rescore,
                           std::vector<int> classes_per_step,
                           std::vector<std::vector<int>> step_class_ids) {
  if (extractors.empty()) throw checkpoint_error("restore: no extractors");
  if (classes_per_step.size() != step_class_ids.size())
    throw checkpoint_error("restore: step metadata mismatch");
  DeaModel m;
  m.arch_ = arch;
  m.reduction_ = reduction;
  m.seed_ = seed;
  m.extractors_ = std::move(extractors);
  m.fusion_ = std::move(fusion);
  m.classifier_ = std::move(classifier);
  m.rescore_ = rescore;
  m.classes_per_step_ = std::move(classes_per_step);
  m.step_class_ids_ = std::move(step_class_ids);
  // Restored state is "end of step t": old extractors frozen, the rest live.
  for (size_t i = 0; i + 1 < m.extractors_.size(); ++i) m.extractors_[i].set_trainable(false);
  m.extractors_.back().set_trainable(true);
  m.fusion_.set_trainable(true);
  m.classifier_.set_trainable(true);
  return m;
}

int DeaModel::fused_channels() const {
  int c = 0;
  for (const Extractor& e : extractors_) c += e.out_channels();
  return c;
}

void DeaModel::expand(int new_class_count) {
  if (new_class_count <= 0) throw input_error("expand: new class count must be positive");
  teacher_fusion_ = fusion_.frozen_copy();
  teacher_classifier_ = classifier_.frozen_copy();
  for (Extractor& e : extractors_) e.set_trainable(false);

  std::mt19937_64 rng(mix_seed(seed_, static_cast<uint64_t>(extractors_.size() + 1)));
  extractors_.emplace_back(arch_, rng);
  int channels = fused_channels();
  fusion_ = FusionModule::grown_from(fusion_, channels, reduction_, rng);
  classifier_ = classifier_.grown(new_class_count, channels, rng);
  rescore_.reset();
  classes_per_step_.push_back(new_class_count);

  int next_id = 0;
  for (const auto& ids : step_class_ids_)
    for (int id : ids) next_id = std::max(next_id, id + 1);
  std::vector<int> fresh(static_cast<size_t>(new_class_count));
  for (int i = 0; i < new_class_count; ++i) fresh[static_cast<size_t>(i)] = next_id + i;
  step_class_ids_.push_back(std::move(fresh));
}

void DeaModel::set_step_class_ids(std::vector<std::vector<int>> ids) {
  if (ids.size() != classes_per_step_.size())
    throw internal_error("set_step_class_ids: step count mismatch");
  for (size_t t = 0; t < ids.size(); ++t)
    if (static_cast<int>(ids[t].size()) != classes_per_step_[t])
      throw internal_error("set_step_class_ids: class count mismatch at step " +
                           std::to_string(t + 1));
  step_class_ids_ = std::move(ids);
}

std::vector<Tensor> DeaModel::extract_all(const Tensor& image) const {
  std::vector<Tensor> maps;
  maps.reserve(extractors_.size());
  for (size_t i = 0; i + 1 < extractors_.size(); ++i) {
    NoGrad guard;
    maps.push_back(extractors_[i].forward(image));
  }
  maps.push_back(extractors_.back().forward(image));
  return maps;
}

Tensor DeaModel::concat_features(const Tensor& image) const {
  return concat_channels(extract_all(image));
}

Tensor DeaModel::fused_pooled(const std::vector<Tensor>& maps) const {
  return global_avg_pool(fusion_.fuse(concat_channels(maps)));
}

Tensor DeaModel::training_logits(const std::vector<Tensor>& maps) const {
  return classifier_.forward(fused_pooled(maps));
}

std::vector<double> DeaModel::forward(const Tensor& image, bool apply_rescore) const {
  NoGrad guard;
  Tensor logits = training_logits(extract_all(image));
  std::vector<double> values = logits.data();
  if (apply_rescore && step() >= 2) {
    if (!rescore_)
      throw state_error("re-scoring requested before compute_gamma at step " +
                        std::to_string(step()));
    values = rescore_logits(*rescore_, values);
  }
  return values;
}

std::vector<double> DeaModel::teacher_logits(const std::vector<Tensor>& maps) const {
  if (!has_teacher()) throw state_error("no frozen previous pipeline at step 1");
  NoGrad guard;
  std::vector<Tensor> old_maps(maps.begin(), maps.end() - 1);
  Tensor fused = teacher_fusion_->fuse(concat_channels(old_maps));
  Tensor logits = teacher_classifier_->forward(global_avg_pool(fused));
  return logits.data();
}

RescoreState DeaModel::compute_gamma_now() {
  if (step() < 2) throw state_error("compute_gamma is defined for steps >= 2");
  int new_count = classes_per_step_.back();
  int old_count = classifier_.num_classes() - new_count;
  rescore_ = compute_gamma(classifier_, old_count, new_count);
  return *rescore_;
}

std::vector<Tensor> DeaModel::trainable_parameters() const {
  std::vector<Tensor> out = extractors_.back().parameters();
  auto fusion_params = fusion_.parameters();
  out.insert(out.end(), fusion_params.begin(), fusion_params.end());
  auto clf_params = classifier_.parameters();
  out.insert(out.end(), clf_params.begin(), clf_params.end());
  return out;
}

std::vector<Tensor> DeaModel::all_parameters() const {
  std::vector<Tensor> out;
  for (const Extractor& e : extractors_) {
    auto p = e.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  auto fusion_params = fusion_.parameters();
  out.insert(out.end(), fusion_params.begin(), fusion_params.end());
  auto clf_params = classifier_.parameters();
  out.insert(out.end(), clf_params.begin(), clf_params.end());
  return out;
}

int64_t DeaModel::parameter_count() const { return tcil::parameter_count(all_parameters()); }

uint64_t DeaModel::extractor_checksum(int i) const {
  return parameter_checksum(extractors_[static_cast<size_t>(i)].parameters());
}

}  // namespace tcil
