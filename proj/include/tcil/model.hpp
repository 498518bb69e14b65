#pragma once

#include <optional>
#include <vector>

#include "tcil/nn.hpp"
#include "tcil/tensor.hpp"

namespace tcil {

// Attention-based fusion over the concatenated feature map: channel
// attention (shared MLP over avg- and max-pooled channel vectors), then
// spatial attention (7x7 conv over the channelwise avg/max maps), both
// applied as broadcast products.
struct FusionModule {
  Mlp channel_mlp;
  Conv2dLayer spatial_conv;  // 2 -> 1, kernel 7, pad 3
  int channels = 0;

  FusionModule() = default;
  FusionModule(int channels, int reduction, std::mt19937_64& rng);

  // Fusion for the grown channel count, warm-started from the previous
  // module: old channels keep their attention behavior at step start, the
  // new extractor's channels get fresh parameters.
  static FusionModule grown_from(const FusionModule& prev, int channels, int reduction,
                                 std::mt19937_64& rng);

  Tensor channel_attention(const Tensor& u) const;  // [C], values in (0,1)
  Tensor spatial_attention(const Tensor& u) const;  // [1,H,W], values in (0,1)
  Tensor fuse(const Tensor& u) const;

  // The two broadcast products alone; lets tests pin attention maps.
  static Tensor combine(const Tensor& u, const Tensor& ac, const Tensor& as);

  std::vector<Tensor> parameters() const;
  void set_trainable(bool trainable);
  FusionModule frozen_copy() const;
};

// Shared classifier over the pooled fused features; grows by rows (classes)
// and columns (feature channels) at each incremental step.
struct GrowingClassifier {
  Tensor weight;  // [classes, feature_dim]
  Tensor bias;    // optional [classes]; the default head is bias-free so the
                  // recency bias lands in the row norms where re-scoring
                  // can measure and correct it

  GrowingClassifier() = default;
  GrowingClassifier(int num_classes, int feature_dim, std::mt19937_64& rng,
                    bool use_bias = false);

  Tensor forward(const Tensor& pooled) const { return linear(pooled, weight, bias); }
  int num_classes() const { return weight.shape()[0]; }
  int feature_dim() const { return weight.shape()[1]; }

  // Old block copied verbatim; new input columns of old rows start at zero,
  // new rows get a fresh random init.
  GrowingClassifier grown(int new_classes, int new_feature_dim, std::mt19937_64& rng) const;

  std::vector<Tensor> parameters() const {
    return bias.defined() ? std::vector<Tensor>{weight, bias} : std::vector<Tensor>{weight};
  }
  void set_trainable(bool trainable);
  GrowingClassifier frozen_copy() const;
};

struct RescoreState {
  double gamma = 1.0;
  int old_count = 0;
  int new_count = 0;
};

// gamma = mean ||w_old|| / mean ||w_new||, Euclidean row norms, bias excluded.
RescoreState compute_gamma(const GrowingClassifier& classifier, int old_count, int new_count);

// (o_old, gamma * o_new); within-block order is preserved for gamma > 0.
std::vector<double> rescore_logits(const RescoreState& state, const std::vector<double>& logits);

// Frozen pipeline pieces of a completed step: its fusion module, its
// classifier and the re-scoring coefficient computed at its end. Retained
// both as the distillation teacher and for re-scored inference, where each
// past step contributes its own new-class logit slice.
struct StepHead {
  FusionModule fusion;
  GrowingClassifier classifier;
  double gamma = 1.0;
};

// The dynamically expandable model: one frozen extractor per past task plus
// the trainable newest one, a per-step fusion module sized to the grown
// channel count, and the growing classifier. All previous steps' fusion
// modules and classifiers are retained frozen.
class DeaModel {
 public:
  DeaModel() = default;
  DeaModel(const ExtractorConfig& arch, int initial_classes, int reduction, uint64_t seed);

  // Rebuilds a model from checkpointed pieces; shapes may be pruned.
  static DeaModel restore(const ExtractorConfig& arch, int reduction, uint64_t seed,
                          std::vector<Extractor> extractors, FusionModule fusion,
                          GrowingClassifier classifier, std::vector<StepHead> history,
                          std::optional<RescoreState> rescore,
                          std::vector<int> classes_per_step,
                          std::vector<std::vector<int>> step_class_ids);

  void expand(int new_class_count);

  int step() const { return static_cast<int>(extractors_.size()); }
  int num_classes() const { return classifier_.num_classes(); }
  int fused_channels() const;
  const std::vector<int>& classes_per_step() const { return classes_per_step_; }
  const std::vector<int>& new_classes_this_step() const { return step_class_ids_.back(); }
  const std::vector<std::vector<int>>& class_ids_per_step() const { return step_class_ids_; }
  void set_step_class_ids(std::vector<std::vector<int>> ids);

  // Feature maps of every extractor; frozen ones are evaluated off-tape.
  std::vector<Tensor> extract_all(const Tensor& image) const;
  Tensor concat_features(const Tensor& image) const;  // u_t
  Tensor fused_pooled(const std::vector<Tensor>& maps) const;
  Tensor training_logits(const std::vector<Tensor>& maps) const;

  // Inference path (off-tape). Without re-scoring the logits come from the
  // current classifier alone. Re-scored inference composes the frozen
  // per-step heads: step k contributes its own new-class slice, scaled by
  // its gamma, so the old blocks cannot drift with later training. Requires
  // compute_gamma_now() at steps >= 2; no-op at step 1.
  std::vector<double> forward(const Tensor& image, bool apply_rescore) const;

  bool has_teacher() const { return !history_.empty(); }
  int teacher_num_classes() const { return history_.back().classifier.num_classes(); }
  std::vector<double> teacher_logits(const std::vector<Tensor>& maps) const;

  int num_heads() const { return static_cast<int>(history_.size()); }
  StepHead& head(int i) { return history_[static_cast<size_t>(i)]; }
  const StepHead& head(int i) const { return history_[static_cast<size_t>(i)]; }

  RescoreState compute_gamma_now();
  const std::optional<RescoreState>& rescore_state() const { return rescore_; }
  void set_rescore_state(const RescoreState& s) { rescore_ = s; }

  int num_extractors() const { return static_cast<int>(extractors_.size()); }
  Extractor& extractor(int i) { return extractors_[static_cast<size_t>(i)]; }
  const Extractor& extractor(int i) const { return extractors_[static_cast<size_t>(i)]; }
  FusionModule& fusion() { return fusion_; }
  const FusionModule& fusion() const { return fusion_; }
  GrowingClassifier& classifier() { return classifier_; }
  const GrowingClassifier& classifier() const { return classifier_; }
  const ExtractorConfig& arch() const { return arch_; }
  int reduction() const { return reduction_; }
  uint64_t seed() const { return seed_; }

  std::vector<Tensor> trainable_parameters() const;
  std::vector<Tensor> all_parameters() const;
  int64_t parameter_count() const;
  uint64_t extractor_checksum(int i) const;

 private:
  ExtractorConfig arch_;
  int reduction_ = 16;
  uint64_t seed_ = 0;
  std::vector<Extractor> extractors_;
  FusionModule fusion_;
  GrowingClassifier classifier_;
  std::optional<FusionModule> teacher_fusion_;
  std::optional<GrowingClassifier> teacher_classifier_;
  std::optional<RescoreState> rescore_;
  std::vector<int> classes_per_step_;
  // Actual class ids per step, assigned by the trainer from the stream;
  // defaults to contiguous ids so the model is usable standalone.
  std::vector<std::vector<int>> step_class_ids_;
};

uint64_t mix_seed(uint64_t seed, uint64_t tag);

}  // namespace tcil
