#include "tcil/losses.hpp"

#include <algorithm>
#include <cmath>

#include "tcil/errors.hpp"

namespace tcil {

void KdConfig::validate() const {
  if (temperature <= 0.0) throw config_error("temperature must be > 0");
  if (lambda < 0.0 || mu < 0.0) throw config_error("distillation weights must be >= 0");
}

Tensor classification_loss(const Tensor& logits, int label) {
  return cross_entropy(logits, label);
}

Tensor feature_kd_loss(const Tensor& student_feat, const Tensor& teacher_feat) {
  if (!same_shape(student_feat.shape(), teacher_feat.shape()))
    throw input_error("feature_kd_loss: student " + shape_str(student_feat.shape()) +
                      " vs teacher " + shape_str(teacher_feat.shape()));
  return l2_distance(student_feat, teacher_feat);
}

Tensor logit_kd_loss(const Tensor& student_logits, const std::vector<double>& teacher_logits,
                     double temperature, bool t2_compensation) {
  if (temperature <= 0.0) throw config_error("logit_kd_loss: temperature must be > 0");
  int k = static_cast<int>(teacher_logits.size());
  if (k == 0) throw input_error("logit_kd_loss: empty teacher logits");
  if (student_logits.shape()[0] < k)
    throw input_error("logit_kd_loss: student has fewer logits than the teacher");

  // Teacher side is constant: softened log-probabilities.
  std::vector<double> teacher_logp(static_cast<size_t>(k));
  double mx = *std::max_element(teacher_logits.begin(), teacher_logits.end());
  double lse = 0.0;
  for (double v : teacher_logits) lse += std::exp((v - mx) / temperature);
  lse = mx / temperature + std::log(lse);
  for (int i = 0; i < k; ++i) teacher_logp[static_cast<size_t>(i)] = teacher_logits[static_cast<size_t>(i)] / temperature - lse;

  Tensor student_logp = log_softmax(scale(slice_prefix(student_logits, k), 1.0 / temperature));
  Tensor q = exp_elem(student_logp);
  Tensor kl = sum(mul(q, sub_const(student_logp, teacher_logp)));
  return t2_compensation ? scale(kl, temperature * temperature) : kl;
}

int divergence_target(int label, const std::vector<int>& new_classes) {
  auto it = std::find(new_classes.begin(), new_classes.end(), label);
  if (it == new_classes.end()) return static_cast<int>(new_classes.size());  // "other"
  return static_cast<int>(it - new_classes.begin());
}

Tensor divergence_loss(const Tensor& aux_logits, int label, const std::vector<int>& new_classes) {
  if (aux_logits.shape()[0] != static_cast<int>(new_classes.size()) + 1)
    throw input_error("divergence_loss: head must have |C_t|+1 outputs");
  return cross_entropy(aux_logits, divergence_target(label, new_classes));
}

TotalLoss total_loss(const BatchLossTerms& terms, const KdConfig& config) {
  config.validate();
  if (terms.batch_size <= 0) throw input_error("total_loss: empty batch");
  if (terms.kd_active && config.lambda > 0.0 && terms.memory_empty)
    throw config_error("lambda > 0 with an empty rehearsal memory");

  double inv_b = 1.0 / terms.batch_size;
  TotalLoss out;
  if (!terms.clf_sum.defined()) throw input_error("total_loss: missing classification term");

  Tensor total = scale(terms.clf_sum, inv_b);
  out.bundle.clf = total.scalar();
  if (terms.feat_sum.defined()) {
    out.bundle.feat_kd = terms.feat_sum.scalar() * inv_b;
    total = add(total, scale(terms.feat_sum, config.alpha * config.lambda * inv_b));
  }
  if (terms.logit_sum.defined()) {
    out.bundle.logit_kd = terms.logit_sum.scalar() * inv_b;
    total = add(total, scale(terms.logit_sum, config.alpha * config.mu * inv_b));
  }
  if (terms.div_sum.defined()) {
    out.bundle.div = terms.div_sum.scalar() * inv_b;
    total = add(total, scale(terms.div_sum, config.beta * inv_b));
  }
  out.value = total;
  out.bundle.total = total.scalar();
  return out;
}

}  // namespace tcil
