#include <cmath>
#include <numeric>

#include "doctest.h"
#include "milscreen/milnet.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace milscreen;
using testsupport::gaussian;
using testsupport::random_bag;

using oracle::max_grad_error;

TEST_CASE("single-tile bag attends fully") {
  Rng rng(1);
  const auto model = init_gma(6, 3, 0, 4);
  const auto fwd = gma_forward(random_bag(1, 6, 0, rng), model);
  CHECK(fwd.attention.size() == 1);
  CHECK(fwd.attention(0) == 1.0);
}

TEST_CASE("identical tiles get uniform attention") {
  Rng rng(2);
  FeatureBag bag = random_bag(1, 5, 0, rng);
  bag.features = bag.features.replicate(7, 1).eval();
  const auto fwd = gma_forward(bag, init_gma(5, 4, 0, 9));
  CHECK((fwd.attention.array() - 1.0 / 7.0).abs().maxCoeff() <= 1e-12);
}

TEST_CASE("hand-evaluated gating example") {
  auto model = GmaModel<double>::zeros(2, 1, 0);
  model.V << 1, 0;
  model.w_attn << 1;
  FeatureBag bag;
  bag.features.resize(2, 2);
  bag.features << 1, 0, 0, 0;
  const auto fwd = gma_forward(bag, model);
  CHECK(fwd.attention_logits(0) == doctest::Approx(std::tanh(1.0) * 0.5));
  CHECK(std::abs(fwd.attention_logits(0) - 0.380797) < 1e-6);
  CHECK(std::abs(fwd.attention(0) - 0.594) < 1e-3);
  CHECK(std::abs(fwd.attention(1) - 0.406) < 1e-3);
}

TEST_CASE("gma_forward errors") {
  const auto model = init_gma(4, 2, 0, 1);
  FeatureBag empty;
  empty.features.resize(0, 4);
  CHECK_THROWS_WITH_AS(gma_forward(empty, model), doctest::Contains("empty bag"), DomainError);
  Rng rng(3);
  CHECK_THROWS_AS(gma_forward(random_bag(3, 5, 0, rng), model), ShapeError);
}

TEST_CASE("attention is a distribution and the model is permutation invariant") {
  Rng rng(4);
  std::uniform_int_distribution<int> size(1, 64);
  for (int trial = 0; trial < 50; ++trial) {
    const auto model = init_gma(8, 4, 0, static_cast<std::uint64_t>(trial));
    FeatureBag bag = random_bag(size(rng), 8, 0, rng);
    const auto fwd = gma_forward(bag, model);
    CHECK(std::abs(fwd.attention.sum() - 1.0) <= 1e-12);
    CHECK(fwd.attention.minCoeff() >= 0.0);
    CHECK(fwd.attention.maxCoeff() <= 1.0);

    std::vector<int> order(static_cast<std::size_t>(bag.size()));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    FeatureBag perm = bag;
    for (std::size_t k = 0; k < order.size(); ++k) {
      perm.features.row(static_cast<Eigen::Index>(k)) = bag.features.row(order[k]);
    }
    const auto pf = gma_forward(perm, model);
    CHECK((pf.logits - fwd.logits).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("attention scores shifted by a constant leave the embedding unchanged") {
  Rng rng(5);
  const FeatureBag bag = random_bag(9, 6, 0, rng);
  const auto fwd = gma_forward(bag, init_gma(6, 3, 0, 2));
  const Vectord shifted = softmax((fwd.attention_logits.array() + 4.25).matrix());
  const Vectord z = bag.features.transpose() * shifted;
  CHECK((z - fwd.embedding).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("multimodal fusion examples") {
  Rng rng(6);
  FeatureBag bag = random_bag(4, 3, 2, rng);
  auto model = init_gma(3, 2, 2, 7);
  model.W_fuse.setZero();
  model.W_fuse(0, 1) = 1.0;
  model.W_fuse(1, 0) = 1.0;
  model.b_fuse.setZero();
  const auto mm = multimodal_forward(bag, model);
  CHECK(mm.logits(0) == mm.histology_probs(1));
  CHECK(mm.logits(1) == mm.histology_probs(0));

  // covariate columns zero: covariates do not matter
  FeatureBag other = bag;
  other.covariates << 100.0, -3.0;
  CHECK((multimodal_forward(other, model).logits - mm.logits).cwiseAbs().maxCoeff() == 0.0);

  // s = (0.3, 0.7) with one covariate
  auto hand = GmaModel<double>::zeros(1, 1, 1);
  hand.b_cls << std::log(0.3), std::log(0.7);
  hand.W_fuse << 1, 0, 0, 0, 1, 2;
  FeatureBag one;
  one.features = Tensor2Dd::Zero(1, 1);
  one.covariates = Vectord::Ones(1);
  const auto out = multimodal_forward(one, hand);
  CHECK(out.logits(0) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(out.logits(1) == doctest::Approx(2.7).epsilon(1e-12));

  bag.covariates = Vectord::Zero(3);
  CHECK_THROWS_AS(multimodal_forward(bag, model), ShapeError);
}

TEST_CASE("tile supervised scoring") {
  auto scorer = TileScorer<double>::zeros(1);
  scorer.W << 0, 1;  // margin = h
  auto logit = [](double p) { return std::log(p / (1 - p)); };
  FeatureBag bag;
  bag.features.resize(3, 1);
  bag.features << logit(0.2), logit(0.8), logit(0.9);
  const bool keep[] = {false, true, true};
  CHECK(tile_supervised_score(bag, scorer, keep) == doctest::Approx(0.85).epsilon(1e-12));
  const bool all[] = {true, true, true};
  CHECK(tile_supervised_score(bag, scorer, all) == tile_supervised_score(bag, scorer));
  const bool none[] = {false, false, false};
  CHECK_THROWS_WITH(tile_supervised_score(bag, scorer, none), doctest::Contains("no tiles after mask"));

  FeatureBag two;
  two.features.resize(2, 1);
  two.features << logit(0.2), logit(0.8);
  CHECK(tile_supervised_score(two, scorer) == doctest::Approx(0.5).epsilon(1e-12));

  FeatureBag same;
  same.features = Tensor2Dd::Constant(4, 1, 0.3);
  CHECK(tile_supervised_score(same, scorer) == doctest::Approx(sigmoid(0.3)).epsilon(1e-14));
}

TEST_CASE("weighted cross entropy") {
  Vectord z = Vectord::Zero(2);
  CHECK(weighted_ce_loss(z, 1, 0.7).loss == doctest::Approx(0.7 * std::log(2.0)).epsilon(1e-14));
  CHECK(std::abs(weighted_ce_loss(z, 1, 0.7).loss - 0.485203) < 1e-6);
  CHECK(std::abs(weighted_ce_loss(z, 0, 0.7).loss - 0.207944) < 1e-6);
  Vectord sure(2);
  sure << -15.0, 15.0;
  CHECK(weighted_ce_loss(sure, 1, 0.7).loss <= 1e-12);
  Vectord bad(2);
  bad << 0.0, INFINITY;
  CHECK_THROWS_AS(weighted_ce_loss(bad, 1, 0.7), DomainError);

  // gradient of the loss matches finite differences
  Vectord l(2);
  l << 0.3, -1.1;
  const auto r = weighted_ce_loss(l, 0, 0.7);
  const Tensor2Dd fd = finite_diff_grad(
      [](const Tensor2Dd& x) { return weighted_ce_loss(x.row(0).transpose().eval(), 0, 0.7).loss; },
      Tensor2Dd(l.transpose()), 1e-6);
  CHECK(max_relative_error(fd.row(0).transpose(), r.grad) < 1e-8);
}

TEST_CASE("gma_backward matches finite differences for every head") {
  Rng rng(7);
  int instance = 0;
  for (const int b : {1, 2, 5}) {
    for (int rep = 0; rep < 3; ++rep, ++instance) {
      const FeatureBag bag = random_bag(b, 8, 3, rng);
      const auto model = init_gma(8, 4, 3, 100 + static_cast<std::uint64_t>(instance));
      const int label = instance % 2;
      CHECK(max_grad_error(bag, model, label, LossHead<double>::histology_only()) <= 1e-4);
      CHECK(max_grad_error(bag, model, label, LossHead<double>::fused_only()) <= 1e-4);
      CHECK(max_grad_error(bag, model, label, LossHead<double>::joint(0.4)) <= 1e-4);
    }
  }
}

TEST_CASE("saturated correct prediction has vanishing gradient") {
  Rng rng(8);
  const FeatureBag bag = random_bag(4, 5, 0, rng);
  auto model = init_gma(5, 3, 0, 1);
  model.W_cls.setZero();
  model.b_cls << -30.0, 30.0;
  const auto bw = gma_backward(bag, model, 1, 0.7);
  double norm = 0.0;
  bw.grads.for_each([&](std::string_view, const Tensor2Dd& g) { norm += g.squaredNorm(); });
  CHECK(std::sqrt(norm) <= 1e-8);
}

TEST_CASE("single-tile bag has no attention-path gradient") {
  Rng rng(9);
  const FeatureBag bag = random_bag(1, 6, 0, rng);
  const auto bw = gma_backward(bag, init_gma(6, 3, 0, 2), 0, 0.7);
  CHECK(bw.grads.V.cwiseAbs().maxCoeff() <= 1e-15);
  CHECK(bw.grads.U.cwiseAbs().maxCoeff() <= 1e-15);
  CHECK(bw.grads.w_attn.cwiseAbs().maxCoeff() <= 1e-15);
  CHECK(bw.grads.W_cls.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("signed attention") {
  auto model = init_gma(3, 2, 0, 5);
  const Vectord diff = (model.W_cls.row(1) - model.W_cls.row(0)).transpose();
  FeatureBag bag;
  bag.features.resize(2, 3);
  bag.features.row(0) = diff.transpose();
  bag.features.row(1) = -diff.transpose();
  const auto sa = signed_attention(bag, model);
  CHECK(sa[0].positive);
  CHECK_FALSE(sa[1].positive);
  CHECK(std::abs(sa[0].attention + sa[1].attention - 1.0) <= 1e-12);

  model.W_cls.row(1) = model.W_cls.row(0);
  for (const auto& s : signed_attention(bag, model)) CHECK_FALSE(s.positive);
}

TEST_CASE("float instantiation agrees with double") {
  Rng rng(10);
  const FeatureBag bag = random_bag(6, 8, 0, rng);
  const auto md = init_gma<double>(8, 4, 0, 3);
  const auto mf = init_gma<float>(8, 4, 0, 3);
  const auto fd = gma_forward(bag, md);
  const auto ff = gma_forward(bag, mf);
  CHECK((fd.logits - ff.logits.cast<double>()).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("tile backward gradient") {
  Rng rng(11);
  const auto scorer = init_tile_scorer(5, 4);
  const Tensor2Dd h = gaussian(1, 5, rng);
  const auto tb = tile_backward(h.row(0), scorer, 1, 0.7);
  TileScorer<double> probe = scorer;
  const Tensor2Dd fd = finite_diff_grad(
      [&](const Tensor2Dd& w) {
        probe.W = w;
        return tile_backward(h.row(0), probe, 1, 0.7).loss;
      },
      scorer.W, 1e-6);
  CHECK(max_relative_error(tb.grads.W, fd) < 1e-6);
}

TEST_CASE("dataset validation") {
  Rng rng(12);
  Dataset ds;
  ds.feature_dim = 4;
  ds.n_covariates = 1;
  ds.bags.push_back(random_bag(3, 4, 1, rng));
  CHECK_NOTHROW(ds.validate());
  ds.bags[0].tile_groups = {0, 1};
  CHECK_THROWS(ds.validate());
  ds.bags[0].tile_groups = {0, 1, 1};
  CHECK_NOTHROW(ds.validate());
  ds.bags.push_back(random_bag(3, 5, 1, rng));
  CHECK_THROWS_AS(ds.validate(), ShapeError);
  CHECK(group_name(kWitnessGroup) == "witness");
  CHECK(group_name(kBackgroundGroup) == "background");
}

TEST_CASE("fresh fusion head passes the histology scores through") {
  Rng rng(31);
  const FeatureBag bag = random_bag(6, 8, 3, rng);
  const auto model = init_gma(8, 4, 3, 77);
  const Vectord s = softmax(gma_forward(bag, model).logits);
  const auto fused = multimodal_forward(bag, model);
  CHECK(max_relative_error(fused.logits, s) <= 1e-15);
  CHECK(model.W_fuse.rightCols(3).isZero());
}
