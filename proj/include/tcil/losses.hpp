#pragma once

#include <vector>

#include "tcil/tensor.hpp"

namespace tcil {

enum class FeatureKdOn { maps, pooled };

struct KdConfig {
  double temperature = 2.0;
  double lambda = 0.5;  // feature-level weight; 0 in the non-rehearsal setting
  double mu = 0.5;      // logit-level weight
  double alpha = 1.0;
  double beta = 1.0;
  FeatureKdOn feature_kd_on = FeatureKdOn::maps;
  // Soft-target gradients scale as 1/T^2; the cited distillation recipe
  // multiplies the loss by T^2 to compensate. Off gives the bare divergence.
  bool t2_compensation = true;

  void validate() const;
};

struct LossBundle {
  double clf = 0.0;
  double feat_kd = 0.0;   // batch-averaged sum of L_f over exemplar samples
  double logit_kd = 0.0;  // batch-averaged sum of L_l over all samples
  double div = 0.0;
  double total = 0.0;
};

// Cross-entropy of softmax(logits) against the label.
Tensor classification_loss(const Tensor& logits, int label);

// Euclidean distance between the flattened student and teacher features.
Tensor feature_kd_loss(const Tensor& student_feat, const Tensor& teacher_feat);

// KL(q || q_hat) over the first |teacher| classes, with temperature-softened
// softmaxes; q comes from the student, q_hat from the frozen teacher. With
// t2_compensation the value is scaled by T^2.
Tensor logit_kd_loss(const Tensor& student_logits, const std::vector<double>& teacher_logits,
                     double temperature, bool t2_compensation = false);

// Target index for the auxiliary (|C_t|+1)-way head: position within the new
// class batch, or the trailing "other" bucket for any old-class sample.
int divergence_target(int label, const std::vector<int>& new_classes);
Tensor divergence_loss(const Tensor& aux_logits, int label, const std::vector<int>& new_classes);

// Per-batch sums of the loss parts; undefined tensors stand for empty sums.
struct BatchLossTerms {
  Tensor clf_sum;
  Tensor feat_sum;
  Tensor logit_sum;
  Tensor div_sum;
  int batch_size = 0;
  bool kd_active = false;    // step >= 2
  bool memory_empty = true;  // rehearsal memory holds no exemplars
};

struct TotalLoss {
  Tensor value;  // scalar on the tape, for backward
  LossBundle bundle;
};

// L = L_clf + alpha * (lambda * sum L_f + mu * sum L_l) + beta * L_div,
// every sum divided by the batch size.
TotalLoss total_loss(const BatchLossTerms& terms, const KdConfig& config);

}  // namespace tcil
