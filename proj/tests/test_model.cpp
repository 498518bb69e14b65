#include <doctest.h>

#include <cmath>
#include <numeric>

#include "grad_check.hpp"
#include "tcil/errors.hpp"
#include "tcil/model.hpp"
#include "tcil/nn.hpp"

using namespace tcil;
using tcil::testing::check_gradient;
using tcil::testing::test_rng;

namespace {

ExtractorConfig small_arch() {
  ExtractorConfig arch;
  arch.in_channels = 3;
  arch.image_size = 8;
  arch.channels = {4, 8, 64};
  return arch;
}

GrowingClassifier classifier_with_norms(const std::vector<double>& norms, int dim) {
  auto rng = test_rng(0);
  GrowingClassifier clf(static_cast<int>(norms.size()), dim, rng, /*use_bias=*/true);
  for (size_t r = 0; r < norms.size(); ++r) {
    for (int c = 0; c < dim; ++c) clf.weight.data()[r * static_cast<size_t>(dim) + c] = 0.0;
    clf.weight.data()[r * static_cast<size_t>(dim)] = norms[r];
    clf.bias.data()[r] = 7.0;  // bias must not enter the norms
  }
  return clf;
}

std::vector<double> softmax_of(const std::vector<double>& logits) {
  double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) z += out[i] = std::exp(logits[i] - mx);
  for (double& v : out) v /= z;
  return out;
}

}  // namespace

TEST_CASE("expand grows channels, rows and copies the old block") {
  DeaModel model(small_arch(), 10, 16, 123);
  CHECK(model.fused_channels() == 64);
  CHECK(model.num_classes() == 10);

  GrowingClassifier before = model.classifier().frozen_copy();
  model.expand(10);
  CHECK(model.step() == 2);
  CHECK(model.fused_channels() == 128);
  CHECK(model.num_classes() == 20);
  CHECK(model.fusion().channels == 128);

  // Old block copied exactly; widened columns of old rows start at zero.
  const auto& w = model.classifier().weight;
  for (int r = 0; r < 10; ++r)
    for (int c = 0; c < 128; ++c) {
      double expect = c < 64 ? before.weight.data()[static_cast<size_t>(r) * 64 + c] : 0.0;
      CHECK(w.data()[static_cast<size_t>(r) * 128 + c] == expect);
    }
  CHECK_THROWS_AS(model.expand(0), Error);
}

TEST_CASE("old extractors are frozen and bit-identical through training updates") {
  DeaModel model(small_arch(), 4, 16, 9);
  uint64_t before = model.extractor_checksum(0);
  model.expand(4);
  CHECK_FALSE(model.extractor(0).convs[0].weight.requires_grad());
  CHECK(model.extractor(1).convs[0].weight.requires_grad());

  // A few SGD steps on the trainable parameters must not touch F_1.
  auto rng = test_rng(1);
  Sgd opt(model.trainable_parameters(), {0.1, 0.9, 5e-4});
  for (int it = 0; it < 3; ++it) {
    Tensor image = Tensor::randn({3, 8, 8}, rng, 1.0);
    opt.zero_grad();
    Tensor logits = model.training_logits(model.extract_all(image));
    backward(cross_entropy(logits, it % 8));
    opt.step();
  }
  CHECK(model.extractor_checksum(0) == before);
  CHECK(model.extractor_checksum(1) != before);
}

TEST_CASE("concat keeps extractor order and shapes") {
  DeaModel model(small_arch(), 4, 16, 31);
  auto rng = test_rng(2);
  Tensor image = Tensor::randn({3, 8, 8}, rng, 1.0);

  Tensor u1 = model.concat_features(image);
  Tensor f1 = model.extractor(0).forward(image);
  CHECK(u1.shape() == f1.shape());
  CHECK(u1.data() == f1.data());

  model.expand(4);
  Tensor u2 = model.concat_features(image);
  CHECK(u2.shape() == Shape{128, 1, 1});
  for (int i = 0; i < 64; ++i)
    CHECK(u2.data()[static_cast<size_t>(i)] == f1.data()[static_cast<size_t>(i)]);
}

TEST_CASE("fused channel count is t * C_f") {
  DeaModel model(small_arch(), 2, 16, 5);
  for (int t = 2; t <= 4; ++t) {
    model.expand(2);
    CHECK(model.fused_channels() == t * 64);
  }
}

TEST_CASE("channel attention") {
  auto rng = test_rng(4);
  SUBCASE("zero MLP weights give sigma(0) = 0.5") {
    FusionModule fusion(8, 2, rng);
    for (Tensor p : {fusion.channel_mlp.fc1.weight, fusion.channel_mlp.fc1.bias,
                     fusion.channel_mlp.fc2.weight, fusion.channel_mlp.fc2.bias})
      std::fill(p.data().begin(), p.data().end(), 0.0);
    Tensor u = Tensor::randn({8, 3, 3}, rng, 1.0);
    Tensor a = fusion.channel_attention(u);
    for (double v : a.data()) CHECK(v == doctest::Approx(0.5));
  }
  SUBCASE("constant map through an identity MLP evaluates to sigma(2c)") {
    FusionModule fusion(2, 1, rng);  // hidden dim 2
    auto& mlp = fusion.channel_mlp;
    std::fill(mlp.fc1.weight.data().begin(), mlp.fc1.weight.data().end(), 0.0);
    std::fill(mlp.fc2.weight.data().begin(), mlp.fc2.weight.data().end(), 0.0);
    std::fill(mlp.fc1.bias.data().begin(), mlp.fc1.bias.data().end(), 0.0);
    std::fill(mlp.fc2.bias.data().begin(), mlp.fc2.bias.data().end(), 0.0);
    mlp.fc1.weight.data()[0] = 1.0;  // identity
    mlp.fc1.weight.data()[3] = 1.0;
    mlp.fc2.weight.data()[0] = 1.0;
    mlp.fc2.weight.data()[3] = 1.0;
    double c = 0.7;
    Tensor u = Tensor::full({2, 4, 4}, c);
    double expect = 1.0 / (1.0 + std::exp(-2.0 * c));  // avg and max branch agree
    Tensor a = fusion.channel_attention(u);
    for (double v : a.data()) CHECK(v == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("values stay in (0,1) on random inputs") {
    FusionModule fusion(16, 4, rng);
    for (int trial = 0; trial < 5; ++trial) {
      Tensor u = Tensor::randn({16, 4, 4}, rng, 2.0);
      Tensor a = fusion.channel_attention(u);
      for (double v : a.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
      }
    }
  }
}

TEST_CASE("spatial attention") {
  auto rng = test_rng(6);
  SUBCASE("zero conv gives 0.5 everywhere") {
    FusionModule fusion(8, 2, rng);
    std::fill(fusion.spatial_conv.weight.data().begin(),
              fusion.spatial_conv.weight.data().end(), 0.0);
    std::fill(fusion.spatial_conv.bias.data().begin(), fusion.spatial_conv.bias.data().end(),
              0.0);
    Tensor u = Tensor::randn({8, 5, 5}, rng, 1.0);
    Tensor a = fusion.spatial_attention(u);
    CHECK(a.shape() == Shape{1, 5, 5});
    for (double v : a.data()) CHECK(v == doctest::Approx(0.5));
  }
  SUBCASE("shape contract and 1x1 degenerate input") {
    FusionModule fusion(128, 16, rng);
    Tensor u = Tensor::randn({128, 8, 8}, rng, 1.0);
    CHECK(fusion.spatial_attention(u).shape() == Shape{1, 8, 8});
    Tensor tiny = Tensor::randn({128, 1, 1}, rng, 1.0);
    Tensor a = fusion.spatial_attention(tiny);
    CHECK(a.shape() == Shape{1, 1, 1});
    for (double v : a.data()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("fuse") {
  auto rng = test_rng(8);
  SUBCASE("pinned-to-one attentions make fuse the identity, exactly") {
    Tensor u = Tensor::randn({4, 3, 3}, rng, 1.0);
    Tensor ones_c = Tensor::full({4}, 1.0);
    Tensor ones_s = Tensor::full({1, 3, 3}, 1.0);
    Tensor f = FusionModule::combine(u, ones_c, ones_s);
    CHECK(f.data() == u.data());
  }
  SUBCASE("zero-weight nets scale by 0.25") {
    FusionModule fusion(4, 2, rng);
    for (Tensor p : fusion.parameters()) std::fill(p.data().begin(), p.data().end(), 0.0);
    Tensor u = Tensor::randn({4, 3, 3}, rng, 1.0);
    Tensor f = fusion.fuse(u);
    for (int64_t i = 0; i < u.size(); ++i)
      CHECK(f.data()[static_cast<size_t>(i)] ==
            doctest::Approx(0.25 * u.data()[static_cast<size_t>(i)]).epsilon(1e-12));
  }
  SUBCASE("channel mismatch is a configuration error") {
    FusionModule fusion(4, 2, rng);
    Tensor u = Tensor::randn({6, 3, 3}, rng, 1.0);
    CHECK_THROWS_AS(fusion.fuse(u), Error);
  }
  SUBCASE("gradient through fuse matches finite differences on a [4,3,3] input") {
    FusionModule fusion(4, 2, rng);
    Tensor u = Tensor::randn({4, 3, 3}, rng, 1.0, true);
    Tensor probe = Tensor::randn({4, 3, 3}, rng, 1.0);
    auto res = check_gradient(u, [&] { return sum(mul(fusion.fuse(u), probe)); });
    CHECK(res.max_rel_error <= 1e-4);
  }
}

TEST_CASE("attention gradients match finite differences") {
  auto rng = test_rng(10);
  FusionModule fusion(6, 2, rng);
  Tensor u = Tensor::randn({6, 3, 3}, rng, 1.0, true);
  Tensor probe_c = Tensor::randn({6}, rng, 1.0);
  auto rc = check_gradient(u, [&] { return sum(mul(fusion.channel_attention(u), probe_c)); });
  CHECK(rc.max_rel_error <= 1e-4);
  Tensor probe_s = Tensor::randn({1, 3, 3}, rng, 1.0);
  auto rs = check_gradient(u, [&] { return sum(mul(fusion.spatial_attention(u), probe_s)); });
  CHECK(rs.max_rel_error <= 1e-4);
}

TEST_CASE("full forward gradient matches finite differences") {
  ExtractorConfig arch;
  arch.in_channels = 2;
  arch.image_size = 8;
  arch.channels = {3, 4, 5};
  DeaModel model(arch, 3, 2, 77);
  auto rng = test_rng(11);
  Tensor image = Tensor::randn({2, 8, 8}, rng, 1.0, true);
  Tensor probe = Tensor::randn({3}, rng, 1.0);
  auto res = check_gradient(image, [&] {
    return sum(mul(model.training_logits({model.extractor(0).forward(image)}), probe));
  });
  CHECK(res.max_rel_error <= 1e-4);
}

TEST_CASE("compute_gamma follows the weight-norm ratio") {
  SUBCASE("equal norms give gamma 1") {
    auto clf = classifier_with_norms({2.0, 2.0, 2.0, 2.0}, 6);
    CHECK(compute_gamma(clf, 2, 2).gamma == doctest::Approx(1.0));
  }
  SUBCASE("old {1,1}, new {2,2} gives 0.5") {
    auto clf = classifier_with_norms({1.0, 1.0, 2.0, 2.0}, 4);
    RescoreState s = compute_gamma(clf, 2, 2);
    CHECK(s.gamma == doctest::Approx(0.5));
    CHECK(s.old_count == 2);
    CHECK(s.new_count == 2);
  }
  SUBCASE("old {3}, new {1,2} gives 2.0") {
    auto clf = classifier_with_norms({3.0, 1.0, 2.0}, 4);
    CHECK(compute_gamma(clf, 1, 2).gamma == doctest::Approx(2.0));
  }
  SUBCASE("zero new-class norms are degenerate") {
    auto clf = classifier_with_norms({1.0, 0.0, 0.0}, 4);
    CHECK_THROWS_AS(compute_gamma(clf, 1, 2), Error);
  }
  SUBCASE("gamma * mean_new equals mean_old to 1e-9") {
    auto rng = test_rng(13);
    GrowingClassifier clf(12, 20, rng);
    RescoreState s = compute_gamma(clf, 7, 5);
    double mean_old = 0.0, mean_new = 0.0;
    for (int r = 0; r < 12; ++r) {
      double n = 0.0;
      for (int c = 0; c < 20; ++c) {
        double w = clf.weight.data()[static_cast<size_t>(r) * 20 + c];
        n += w * w;
      }
      (r < 7 ? mean_old : mean_new) += std::sqrt(n);
    }
    mean_old /= 7.0;
    mean_new /= 5.0;
    CHECK(std::abs(s.gamma * mean_new - mean_old) <= 1e-9);
  }
}

TEST_CASE("rescore_logits") {
  SUBCASE("gamma 1 is the identity") {
    RescoreState s{1.0, 2, 2};
    std::vector<double> logits{0.3, -1.0, 2.0, 5.0};
    CHECK(rescore_logits(s, logits) == logits);
  }
  SUBCASE("direct application") {
    RescoreState s{0.5, 2, 2};
    CHECK(rescore_logits(s, {2.0, 1.0, 4.0, 6.0}) == std::vector<double>{2.0, 1.0, 2.0, 3.0});
  }
  SUBCASE("length mismatch is an input error") {
    RescoreState s{0.5, 2, 2};
    CHECK_THROWS_AS(rescore_logits(s, {1.0, 2.0, 3.0}), Error);
  }
  SUBCASE("within-block argsort is invariant for positive gamma") {
    auto rng = test_rng(17);
    std::uniform_real_distribution<double> logit(-5.0, 5.0);
    std::uniform_real_distribution<double> gamma_dist(0.05, 20.0);
    for (int trial = 0; trial < 1000; ++trial) {
      int old_n = 1 + static_cast<int>(rng() % 6);
      int new_n = 1 + static_cast<int>(rng() % 6);
      std::vector<double> logits(static_cast<size_t>(old_n + new_n));
      for (double& v : logits) v = logit(rng);
      RescoreState s{gamma_dist(rng), old_n, new_n};
      auto rescored = rescore_logits(s, logits);

      auto argsort = [](const std::vector<double>& v, int lo, int hi) {
        std::vector<int> idx(static_cast<size_t>(hi - lo));
        std::iota(idx.begin(), idx.end(), lo);
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
          return v[static_cast<size_t>(a)] < v[static_cast<size_t>(b)];
        });
        return idx;
      };
      CHECK(argsort(logits, 0, old_n) == argsort(rescored, 0, old_n));
      CHECK(argsort(logits, old_n, old_n + new_n) == argsort(rescored, old_n, old_n + new_n));
    }
  }
}

TEST_CASE("forward softmax, re-scoring and state errors") {
  ExtractorConfig arch;
  arch.in_channels = 2;
  arch.image_size = 8;
  arch.channels = {3, 4, 6};
  DeaModel model(arch, 3, 2, 55);
  auto rng = test_rng(19);
  Tensor image = Tensor::randn({2, 8, 8}, rng, 1.0);

  SUBCASE("softmax of logits sums to 1") {
    auto probs = softmax_of(model.forward(image, false));
    double s = 0.0;
    for (double p : probs) s += p;
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
  SUBCASE("re-scoring at step 1 is the identity") {
    CHECK(model.forward(image, true) == model.forward(image, false));
  }
  SUBCASE("re-scoring before compute_gamma is a state error") {
    model.expand(3);
    CHECK_THROWS_AS(model.forward(image, true), Error);
    model.compute_gamma_now();
    auto raw = model.forward(image, false);
    auto rescored = model.forward(image, true);
    double gamma = model.rescore_state()->gamma;
    for (int i = 0; i < 3; ++i) {
      CHECK(rescored[static_cast<size_t>(i)] == raw[static_cast<size_t>(i)]);
      CHECK(rescored[static_cast<size_t>(3 + i)] ==
            doctest::Approx(gamma * raw[static_cast<size_t>(3 + i)]));
    }
  }
  SUBCASE("gamma 1 re-scoring leaves logits unchanged") {
    model.expand(3);
    model.compute_gamma_now();
    RescoreState forced{1.0, 3, 3};
    model.set_rescore_state(forced);
    CHECK(model.forward(image, true) == model.forward(image, false));
  }
}

TEST_CASE("monotone parameter growth before pruning") {
  DeaModel model(small_arch(), 2, 16, 3);
  int64_t prev = model.parameter_count();
  for (int t = 2; t <= 4; ++t) {
    model.expand(2);
    int64_t now = model.parameter_count();
    CHECK(now > prev);
    prev = now;
  }
}
