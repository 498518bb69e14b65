#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "tcil/errors.hpp"
#include "tcil/losses.hpp"

using namespace tcil;
using tcil::testing::check_gradient;
using tcil::testing::test_rng;

TEST_CASE("classification loss") {
  SUBCASE("uniform logits give ln K") {
    Tensor logits = Tensor::full({4}, 0.3);
    CHECK(classification_loss(logits, 2).scalar() == doctest::Approx(std::log(4.0)));
  }
  SUBCASE("a dominant logit drives the loss to zero") {
    Tensor logits = Tensor::from({3}, {100.0, 0.0, 0.0});
    CHECK(classification_loss(logits, 0).scalar() == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("hand-evaluated softmax cross-entropy") {
    Tensor logits = Tensor::from({3}, {1.0, 2.0, 3.0});
    // -ln(e^3 / (e^1 + e^2 + e^3))
    double expect = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
    CHECK(classification_loss(logits, 2).scalar() == doctest::Approx(expect).epsilon(1e-12));
    CHECK(classification_loss(logits, 2).scalar() == doctest::Approx(0.40760596444438).epsilon(1e-9));
  }
  SUBCASE("label out of range") {
    Tensor logits = Tensor::from({3}, {1.0, 2.0, 3.0});
    CHECK_THROWS_AS(classification_loss(logits, 3), Error);
    CHECK_THROWS_AS(classification_loss(logits, -1), Error);
  }
  SUBCASE("gradient matches finite differences") {
    auto rng = test_rng(1);
    Tensor logits = Tensor::randn({6}, rng, 1.0, true);
    auto res = check_gradient(logits, [&] { return classification_loss(logits, 4); });
    CHECK(res.max_rel_error <= 1e-4);
  }
  SUBCASE("non-negative on random inputs") {
    auto rng = test_rng(2);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor logits = Tensor::randn({5}, rng, 3.0);
      CHECK(classification_loss(logits, static_cast<int>(rng() % 5)).scalar() >= 0.0);
    }
  }
}

TEST_CASE("feature-level distillation") {
  SUBCASE("identical features give exactly zero") {
    Tensor a = Tensor::from({2, 2}, {1.0, -2.0, 3.0, 0.5});
    CHECK(feature_kd_loss(a, a).scalar() == 0.0);
  }
  SUBCASE("unit offset gives one") {
    Tensor t = Tensor::from({4}, {1.0, 2.0, 3.0, 4.0});
    Tensor s = Tensor::from({4}, {2.0, 2.0, 3.0, 4.0});
    CHECK(feature_kd_loss(s, t).scalar() == doctest::Approx(1.0));
  }
  SUBCASE("matches the flattened difference norm on random maps") {
    auto rng = test_rng(3);
    Tensor s = Tensor::randn({2, 2}, rng, 1.0);
    Tensor t = Tensor::randn({2, 2}, rng, 1.0);
    double expect = 0.0;
    for (int i = 0; i < 4; ++i) {
      double d = s.data()[static_cast<size_t>(i)] - t.data()[static_cast<size_t>(i)];
      expect += d * d;
    }
    expect = std::sqrt(expect);
    CHECK(std::abs(feature_kd_loss(s, t).scalar() - expect) <= 1e-7);
  }
  SUBCASE("shape mismatch is an input error") {
    Tensor a = Tensor::zeros({2, 2});
    Tensor b = Tensor::zeros({4});
    CHECK_THROWS_AS(feature_kd_loss(a, b), Error);
  }
}

TEST_CASE("logit-level distillation") {
  SUBCASE("matching prefix gives zero") {
    Tensor student = Tensor::from({4}, {0.5, -1.0, 2.0, 9.0});
    std::vector<double> teacher{0.5, -1.0, 2.0};
    CHECK(logit_kd_loss(student, teacher, 2.0).scalar() <= 1e-9);
  }
  SUBCASE("hand-evaluated KL: point mass vs uniform") {
    Tensor student = Tensor::from({2}, {500.0, -500.0});
    std::vector<double> teacher{0.0, 0.0};
    CHECK(logit_kd_loss(student, teacher, 1.0).scalar() == doctest::Approx(std::log(2.0)));
  }
  SUBCASE("temperature flattens both distributions") {
    auto rng = test_rng(4);
    Tensor student = Tensor::randn({5}, rng, 2.0);
    std::vector<double> teacher{1.0, -2.0, 0.5, 3.0, -1.0};
    double l1 = logit_kd_loss(student, teacher, 1.0).scalar();
    double l10 = logit_kd_loss(student, teacher, 10.0).scalar();
    double l_inf = logit_kd_loss(student, teacher, 1e6).scalar();
    CHECK(l10 < l1);
    CHECK(l_inf <= 1e-9);
  }
  SUBCASE("KL is non-negative over random pairs") {
    auto rng = test_rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      Tensor student = Tensor::randn({6}, rng, 2.0);
      std::vector<double> teacher(4);
      std::normal_distribution<double> d(0.0, 2.0);
      for (double& v : teacher) v = d(rng);
      CHECK(logit_kd_loss(student, teacher, 2.0).scalar() >= 0.0);
    }
  }
  SUBCASE("zero at equality within 1e-9") {
    auto rng = test_rng(6);
    Tensor student = Tensor::randn({4}, rng, 2.0);
    std::vector<double> teacher = student.data();
    CHECK(logit_kd_loss(student, teacher, 2.0).scalar() <= 1e-9);
  }
  SUBCASE("temperature must be positive") {
    Tensor student = Tensor::from({2}, {1.0, 2.0});
    CHECK_THROWS_AS(logit_kd_loss(student, {1.0, 2.0}, 0.0), Error);
    CHECK_THROWS_AS(logit_kd_loss(student, {1.0, 2.0}, -1.0), Error);
  }
  SUBCASE("teacher longer than student is an input error") {
    Tensor student = Tensor::from({2}, {1.0, 2.0});
    CHECK_THROWS_AS(logit_kd_loss(student, {1.0, 2.0, 3.0}, 2.0), Error);
  }
  SUBCASE("student gradient matches finite differences") {
    auto rng = test_rng(7);
    Tensor student = Tensor::randn({6}, rng, 1.0, true);
    std::vector<double> teacher{0.5, -0.3, 1.2, 0.1};
    auto res = check_gradient(student, [&] { return logit_kd_loss(student, teacher, 2.0); });
    CHECK(res.max_rel_error <= 1e-4);
  }
}

TEST_CASE("divergence loss") {
  std::vector<int> new_classes{12, 14, 19};
  SUBCASE("new-task samples map to their position") {
    CHECK(divergence_target(14, new_classes) == 1);
    CHECK(divergence_target(19, new_classes) == 2);
  }
  SUBCASE("old samples map to the trailing other bucket") {
    CHECK(divergence_target(3, new_classes) == 3);
  }
  SUBCASE("uniform aux logits over 11 categories give ln 11") {
    std::vector<int> ten(10);
    for (int i = 0; i < 10; ++i) ten[static_cast<size_t>(i)] = 100 + i;
    Tensor aux = Tensor::full({11}, -0.2);
    CHECK(divergence_loss(aux, 3, ten).scalar() == doctest::Approx(std::log(11.0)));
  }
  SUBCASE("old-class sample evaluates CE against the other bucket") {
    Tensor aux = Tensor::from({4}, {1.0, 0.0, -1.0, 2.0});
    double z = std::exp(1.0) + std::exp(0.0) + std::exp(-1.0) + std::exp(2.0);
    double expect = std::log(z) - 2.0;  // target is index 3
    CHECK(divergence_loss(aux, 7, new_classes).scalar() == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("head size must be |C_t|+1") {
    Tensor aux = Tensor::zeros({3});
    CHECK_THROWS_AS(divergence_loss(aux, 12, new_classes), Error);
  }
}

TEST_CASE("total loss") {
  SUBCASE("paper defaults") {
    KdConfig config;
    CHECK(config.lambda == 0.5);
    CHECK(config.mu == 0.5);
    CHECK(config.alpha == 1.0);
    CHECK(config.beta == 1.0);
    CHECK(config.temperature == 2.0);
  }
  SUBCASE("all extra weights zero reduces to the classification loss") {
    KdConfig config;
    config.lambda = config.mu = config.beta = 0.0;
    BatchLossTerms terms;
    terms.clf_sum = Tensor::from({1}, {3.2});
    terms.feat_sum = Tensor::from({1}, {10.0});
    terms.logit_sum = Tensor::from({1}, {20.0});
    terms.div_sum = Tensor::from({1}, {5.0});
    terms.batch_size = 2;
    terms.kd_active = true;
    terms.memory_empty = false;
    auto out = total_loss(terms, config);
    CHECK(out.bundle.total == doctest::Approx(1.6));
    CHECK(out.bundle.clf == doctest::Approx(1.6));
  }
  SUBCASE("hand-built two-sample batch matches the weighted sum") {
    KdConfig config;  // lambda=mu=0.5, alpha=beta=1
    BatchLossTerms terms;
    terms.clf_sum = Tensor::from({1}, {1.4});
    terms.feat_sum = Tensor::from({1}, {0.8});
    terms.logit_sum = Tensor::from({1}, {2.2});
    terms.div_sum = Tensor::from({1}, {3.0});
    terms.batch_size = 2;
    terms.kd_active = true;
    terms.memory_empty = false;
    auto out = total_loss(terms, config);
    double expect = 1.4 / 2 + 1.0 * (0.5 * 0.8 / 2 + 0.5 * 2.2 / 2) + 1.0 * 3.0 / 2;
    CHECK(std::abs(out.bundle.total - expect) <= 1e-7);
    CHECK(out.value.scalar() == doctest::Approx(out.bundle.total));
    // bundle identity: total = clf + alpha(lambda feat + mu logit) + beta div
    double identity = out.bundle.clf +
                      config.alpha * (config.lambda * out.bundle.feat_kd +
                                      config.mu * out.bundle.logit_kd) +
                      config.beta * out.bundle.div;
    CHECK(std::abs(out.bundle.total - identity) <= 1e-12);
  }
  SUBCASE("duplicating every sample leaves the bundle unchanged") {
    KdConfig config;
    BatchLossTerms once;
    once.clf_sum = Tensor::from({1}, {1.7});
    once.feat_sum = Tensor::from({1}, {0.6});
    once.logit_sum = Tensor::from({1}, {1.1});
    once.div_sum = Tensor::from({1}, {0.9});
    once.batch_size = 3;
    once.kd_active = true;
    once.memory_empty = false;
    BatchLossTerms twice = once;
    twice.clf_sum = Tensor::from({1}, {2 * 1.7});
    twice.feat_sum = Tensor::from({1}, {2 * 0.6});
    twice.logit_sum = Tensor::from({1}, {2 * 1.1});
    twice.div_sum = Tensor::from({1}, {2 * 0.9});
    twice.batch_size = 6;
    auto a = total_loss(once, config).bundle;
    auto b = total_loss(twice, config).bundle;
    CHECK(std::abs(a.clf - b.clf) <= 1e-7);
    CHECK(std::abs(a.feat_kd - b.feat_kd) <= 1e-7);
    CHECK(std::abs(a.logit_kd - b.logit_kd) <= 1e-7);
    CHECK(std::abs(a.div - b.div) <= 1e-7);
    CHECK(std::abs(a.total - b.total) <= 1e-7);
  }
  SUBCASE("lambda > 0 with an empty memory is a configuration error") {
    KdConfig config;  // lambda 0.5
    BatchLossTerms terms;
    terms.clf_sum = Tensor::from({1}, {1.0});
    terms.batch_size = 1;
    terms.kd_active = true;
    terms.memory_empty = true;
    CHECK_THROWS_AS(total_loss(terms, config), Error);
    // Step 1 has no distillation at all, so the same config is fine there.
    terms.kd_active = false;
    CHECK_NOTHROW(total_loss(terms, config));
  }
  SUBCASE("empty batch is an input error") {
    KdConfig config;
    BatchLossTerms terms;
    terms.clf_sum = Tensor::from({1}, {1.0});
    terms.batch_size = 0;
    CHECK_THROWS_AS(total_loss(terms, config), Error);
  }
}
