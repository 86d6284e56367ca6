#pragma once

// Gated-attention MIL network, multimodal fusion head, tile-level baseline and
// the weighted cross-entropy they are trained with. Gradients are derived by
// hand; tests check them against numkit::finite_diff_grad.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "milscreen/errors.hpp"
#include "milscreen/numkit.hpp"
#include "milscreen/rng.hpp"

namespace milscreen {

inline constexpr std::uint8_t kBackgroundGroup = 0;
inline constexpr std::uint8_t kWitnessGroup = 1;

std::string group_name(std::uint8_t group);

/// One slide: B tile feature rows plus slide-level metadata.
struct FeatureBag {
  std::string slide_id;
  std::string patient_id;
  int label = 0;  // 1 = EGFR mutant
  Tensor2Dd features;
  Vectord covariates;
  std::vector<std::uint8_t> tile_groups;  // empty when untagged, else one per tile
  std::uint32_t tile_count_total = 0;

  Eigen::Index size() const { return features.rows(); }
  bool has_groups() const { return !tile_groups.empty(); }

  friend bool operator==(const FeatureBag& a, const FeatureBag& b) {
    return a.slide_id == b.slide_id && a.patient_id == b.patient_id && a.label == b.label &&
           identical(a.features, b.features) && identical(a.covariates, b.covariates) &&
           a.tile_groups == b.tile_groups && a.tile_count_total == b.tile_count_total;
  }
};

struct Dataset {
  std::uint32_t feature_dim = 0;
  std::uint32_t n_covariates = 0;
  std::vector<FeatureBag> bags;

  /// Throws ShapeError/DomainError when a bag breaks the dataset invariants.
  void validate() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Parameters of the gated attention network with classifier and fusion head.
/// The same type doubles as the gradient container.
template <class Scalar>
struct GmaModel {
  Tensor2D<Scalar> V;       // D2 x D1, tanh branch
  Tensor2D<Scalar> U;       // D2 x D1, sigmoid gate
  Tensor2D<Scalar> w_attn;  // 1 x D2
  Tensor2D<Scalar> W_cls;   // 2 x D1
  Tensor2D<Scalar> b_cls;   // 2 x 1
  Tensor2D<Scalar> W_fuse;  // 2 x (2 + n_covariates)
  Tensor2D<Scalar> b_fuse;  // 2 x 1

  Eigen::Index feature_dim() const { return V.cols(); }
  Eigen::Index hidden_dim() const { return V.rows(); }
  Eigen::Index n_covariates() const { return W_fuse.cols() - 2; }

  static GmaModel zeros(Eigen::Index d1, Eigen::Index d2, Eigen::Index n_cov) {
    GmaModel m;
    m.V = Tensor2D<Scalar>::Zero(d2, d1);
    m.U = Tensor2D<Scalar>::Zero(d2, d1);
    m.w_attn = Tensor2D<Scalar>::Zero(1, d2);
    m.W_cls = Tensor2D<Scalar>::Zero(2, d1);
    m.b_cls = Tensor2D<Scalar>::Zero(2, 1);
    m.W_fuse = Tensor2D<Scalar>::Zero(2, 2 + n_cov);
    m.b_fuse = Tensor2D<Scalar>::Zero(2, 1);
    return m;
  }

  /// Calls f(name, tensor) for every parameter tensor, in a fixed order.
  template <class F>
  void for_each(F&& f) {
    f("V", V), f("U", U), f("w_attn", w_attn), f("W_cls", W_cls), f("b_cls", b_cls),
        f("W_fuse", W_fuse), f("b_fuse", b_fuse);
  }
  template <class F>
  void for_each(F&& f) const {
    f("V", V), f("U", U), f("w_attn", w_attn), f("W_cls", W_cls), f("b_cls", b_cls),
        f("W_fuse", W_fuse), f("b_fuse", b_fuse);
  }

  bool is_finite() const {
    bool ok = true;
    for_each([&](std::string_view, const Tensor2D<Scalar>& t) { ok = ok && all_finite(t); });
    return ok;
  }

  friend bool operator==(const GmaModel& a, const GmaModel& b) {
    return identical(a.V, b.V) && identical(a.U, b.U) && identical(a.w_attn, b.w_attn) &&
           identical(a.W_cls, b.W_cls) && identical(a.b_cls, b.b_cls) &&
           identical(a.W_fuse, b.W_fuse) && identical(a.b_fuse, b.b_fuse);
  }
};

/// Walks parameters and their gradients in lockstep: f(name, param, grad).
template <class Scalar, class F>
void for_each_pair(GmaModel<Scalar>& params, const GmaModel<Scalar>& grads, F&& f) {
  f("V", params.V, grads.V), f("U", params.U, grads.U), f("w_attn", params.w_attn, grads.w_attn),
      f("W_cls", params.W_cls, grads.W_cls), f("b_cls", params.b_cls, grads.b_cls),
      f("W_fuse", params.W_fuse, grads.W_fuse), f("b_fuse", params.b_fuse, grads.b_fuse);
}

/// Per-tile linear classifier used by the tile-supervised baseline.
template <class Scalar>
struct TileScorer {
  Tensor2D<Scalar> W;  // 2 x D1
  Tensor2D<Scalar> b;  // 2 x 1

  Eigen::Index feature_dim() const { return W.cols(); }

  static TileScorer zeros(Eigen::Index d1) {
    return {Tensor2D<Scalar>::Zero(2, d1), Tensor2D<Scalar>::Zero(2, 1)};
  }

  template <class F>
  void for_each(F&& f) {
    f("W", W), f("b", b);
  }
  template <class F>
  void for_each(F&& f) const {
    f("W", W), f("b", b);
  }

  friend bool operator==(const TileScorer& a, const TileScorer& b) {
    return identical(a.W, b.W) && identical(a.b, b.b);
  }
};

namespace detail {

template <class Scalar>
void fill_uniform(Tensor2D<Scalar>& t, Scalar bound, Rng& rng) {
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    t.data()[i] = Scalar((2.0 * uniform01(rng) - 1.0)) * bound;
  }
}

template <class Scalar>
const auto& features_as(const FeatureBag& bag) {
  if constexpr (std::is_same_v<Scalar, double>) {
    return bag.features;
  } else {
    static thread_local Tensor2D<Scalar> converted;
    converted = bag.features.template cast<Scalar>();
    return converted;
  }
}

}  // namespace detail

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per tensor, biases included.
/// The fusion head instead starts as identity on the two histology scores with
/// zero covariate weights, so the fused output begins equal to the histology one.
template <class Scalar = double>
GmaModel<Scalar> init_gma(Eigen::Index d1, Eigen::Index d2, Eigen::Index n_cov,
                          std::uint64_t seed) {
  Rng rng(seed);
  auto m = GmaModel<Scalar>::zeros(d1, d2, n_cov);
  using std::sqrt;
  const Scalar in1 = Scalar(1) / sqrt(Scalar(d1));
  const Scalar in2 = Scalar(1) / sqrt(Scalar(d2));
  detail::fill_uniform(m.V, in1, rng);
  detail::fill_uniform(m.U, in1, rng);
  detail::fill_uniform(m.w_attn, in2, rng);
  detail::fill_uniform(m.W_cls, in1, rng);
  detail::fill_uniform(m.b_cls, in1, rng);
  m.W_fuse(0, 0) = Scalar(1);
  m.W_fuse(1, 1) = Scalar(1);
  return m;
}

template <class Scalar = double>
TileScorer<Scalar> init_tile_scorer(Eigen::Index d1, std::uint64_t seed) {
  Rng rng(seed);
  auto s = TileScorer<Scalar>::zeros(d1);
  using std::sqrt;
  const Scalar bound = Scalar(1) / sqrt(Scalar(d1));
  detail::fill_uniform(s.W, bound, rng);
  detail::fill_uniform(s.b, bound, rng);
  return s;
}

template <class Scalar>
struct GmaForward {
  Vector<Scalar> logits;     // 2
  Vector<Scalar> attention;  // B, sums to 1
  Vector<Scalar> embedding;  // D1

  // cached intermediates for the backward pass
  Tensor2D<Scalar> tanh_branch;     // B x D2
  Tensor2D<Scalar> sigmoid_branch;  // B x D2
  Vector<Scalar> attention_logits;  // B
};

namespace detail {

template <class Scalar>
void check_bag(const FeatureBag& bag, const GmaModel<Scalar>& model) {
  if (bag.features.rows() == 0) throw DomainError("gma_forward: empty bag");
  if (bag.features.cols() != model.feature_dim()) {
    throw ShapeError("gma_forward: bag features " + shape_str(bag.features) +
                     " do not match model D1=" + std::to_string(model.feature_dim()));
  }
}

}  // namespace detail

/// a_k = softmax_k(w_attn . (tanh(V h_k) * sigm(U h_k))), z = sum_k a_k h_k,
/// logits = W_cls z + b_cls.
template <class Scalar>
GmaForward<Scalar> gma_forward(const FeatureBag& bag, const GmaModel<Scalar>& model) {
  detail::check_bag(bag, model);
  const auto& H = detail::features_as<Scalar>(bag);
  GmaForward<Scalar> out;
  out.tanh_branch = activate(H * model.V.transpose(), Activation::tanh);
  out.sigmoid_branch = activate(H * model.U.transpose(), Activation::sigmoid);
  out.attention_logits =
      out.tanh_branch.cwiseProduct(out.sigmoid_branch) * model.w_attn.transpose();
  out.attention = softmax(out.attention_logits);
  out.embedding = H.transpose() * out.attention;
  out.logits = model.W_cls * out.embedding + model.b_cls.col(0);
  return out;
}

template <class Scalar>
struct MultimodalForward {
  GmaForward<Scalar> histology;
  Vector<Scalar> histology_probs;  // softmax of histology logits
  Vector<Scalar> fusion_input;     // (s_neg, s_pos, covariates...)
  Vector<Scalar> logits;           // 2
};

/// Histology class probabilities concatenated with the covariates, fed to a
/// linear fusion layer.
template <class Scalar>
MultimodalForward<Scalar> multimodal_forward(const FeatureBag& bag,
                                             const GmaModel<Scalar>& model) {
  if (bag.covariates.size() != model.n_covariates()) {
    throw ShapeError("multimodal_forward: bag has " + std::to_string(bag.covariates.size()) +
                     " covariates, fusion layer expects " +
                     std::to_string(model.n_covariates()));
  }
  MultimodalForward<Scalar> out;
  out.histology = gma_forward(bag, model);
  out.histology_probs = softmax(out.histology.logits);
  out.fusion_input.resize(2 + model.n_covariates());
  out.fusion_input.head(2) = out.histology_probs;
  out.fusion_input.tail(model.n_covariates()) = bag.covariates.template cast<Scalar>();
  out.logits = model.W_fuse * out.fusion_input + model.b_fuse.col(0);
  return out;
}

template <class Scalar>
struct LossResult {
  Scalar loss;
  Vector<Scalar> grad;  // d loss / d logits
};

/// Class-weighted cross-entropy on two logits; negatives weigh 1 - pos_weight.
template <class Derived>
LossResult<typename Derived::Scalar> weighted_ce_loss(const Eigen::MatrixBase<Derived>& logits,
                                                      int label, double pos_weight) {
  using Scalar = typename Derived::Scalar;
  if (logits.size() != 2) throw ShapeError("weighted_ce_loss: expected 2 logits");
  if (!all_finite(logits)) throw DomainError("weighted_ce_loss: non-finite logits");
  if (label != 0 && label != 1) throw DomainError("weighted_ce_loss: label must be 0 or 1");
  if (!(pos_weight > 0.0 && pos_weight < 1.0)) {
    throw DomainError("weighted_ce_loss: pos_weight must lie in (0,1)");
  }
  const Scalar weight = Scalar(label == 1 ? pos_weight : 1.0 - pos_weight);
  const Vector<Scalar> v = logits.reshaped();
  LossResult<Scalar> r;
  r.loss = weight * (log_sum_exp(v) - v(label));
  r.grad = softmax(v);
  r.grad(label) -= Scalar(1);
  r.grad *= weight;
  return r;
}

/// Which logits the loss is taken on. joint(alpha) is the fused-plus-histology
/// objective (the auxiliary-modality term of the joint loss is absent here).
template <class Scalar>
struct LossHead {
  Scalar histology = Scalar(1);
  Scalar fused = Scalar(0);

  static LossHead histology_only() { return {Scalar(1), Scalar(0)}; }
  static LossHead fused_only() { return {Scalar(0), Scalar(1)}; }
  static LossHead joint(Scalar alpha) { return {alpha, alpha}; }
};

template <class Scalar>
struct GmaBackward {
  Scalar loss;
  GmaModel<Scalar> grads;
};

/// Loss and exact gradient with respect to every GmaModel tensor.
template <class Scalar>
GmaBackward<Scalar> gma_backward(const FeatureBag& bag, const GmaModel<Scalar>& model,
                                 int label, double pos_weight,
                                 LossHead<Scalar> head = LossHead<Scalar>::histology_only()) {
  const auto& H = detail::features_as<Scalar>(bag);
  GmaBackward<Scalar> out{Scalar(0), GmaModel<Scalar>::zeros(model.feature_dim(),
                                                             model.hidden_dim(),
                                                             model.n_covariates())};
  GmaForward<Scalar> fwd;
  Vector<Scalar> d_logits = Vector<Scalar>::Zero(2);

  if (head.fused != Scalar(0)) {
    MultimodalForward<Scalar> mm = multimodal_forward(bag, model);
    const auto fused = weighted_ce_loss(mm.logits, label, pos_weight);
    out.loss += head.fused * fused.loss;
    const Vector<Scalar> d_fused = head.fused * fused.grad;
    out.grads.W_fuse = d_fused * mm.fusion_input.transpose();
    out.grads.b_fuse = d_fused;
    const Vector<Scalar> d_probs = (model.W_fuse.transpose() * d_fused).head(2);
    const Vector<Scalar>& s = mm.histology_probs;
    d_logits += (s.array() * (d_probs.array() - s.dot(d_probs))).matrix();
    fwd = std::move(mm.histology);
  } else {
    fwd = gma_forward(bag, model);
  }
  if (head.histology != Scalar(0)) {
    const auto hist = weighted_ce_loss(fwd.logits, label, pos_weight);
    out.loss += head.histology * hist.loss;
    d_logits += head.histology * hist.grad;
  }

  out.grads.W_cls = d_logits * fwd.embedding.transpose();
  out.grads.b_cls = d_logits;
  const Vector<Scalar> d_embedding = model.W_cls.transpose() * d_logits;

  const Vector<Scalar>& a = fwd.attention;
  const Vector<Scalar> d_attention = H * d_embedding;
  const Vector<Scalar> d_scores = (a.array() * (d_attention.array() - a.dot(d_attention))).matrix();

  const Tensor2D<Scalar> gated = fwd.tanh_branch.cwiseProduct(fwd.sigmoid_branch);
  out.grads.w_attn = d_scores.transpose() * gated;
  const Tensor2D<Scalar> d_gated = d_scores * model.w_attn;  // B x D2
  const Tensor2D<Scalar> d_pre_tanh =
      d_gated.cwiseProduct(fwd.sigmoid_branch)
          .cwiseProduct((Scalar(1) - fwd.tanh_branch.array().square()).matrix());
  const Tensor2D<Scalar> d_pre_sigm =
      d_gated.cwiseProduct(fwd.tanh_branch)
          .cwiseProduct(
              (fwd.sigmoid_branch.array() * (Scalar(1) - fwd.sigmoid_branch.array())).matrix());
  out.grads.V = d_pre_tanh.transpose() * H;
  out.grads.U = d_pre_sigm.transpose() * H;
  return out;
}

/// Scalar loss only (used by gradient checks and monitoring).
template <class Scalar>
Scalar gma_loss(const FeatureBag& bag, const GmaModel<Scalar>& model, int label,
                double pos_weight, LossHead<Scalar> head = LossHead<Scalar>::histology_only()) {
  Scalar loss = Scalar(0);
  if (head.fused != Scalar(0)) {
    const auto mm = multimodal_forward(bag, model);
    loss += head.fused * weighted_ce_loss(mm.logits, label, pos_weight).loss;
    if (head.histology != Scalar(0)) {
      loss += head.histology * weighted_ce_loss(mm.histology.logits, label, pos_weight).loss;
    }
    return loss;
  }
  return head.histology * weighted_ce_loss(gma_forward(bag, model).logits, label, pos_weight).loss;
}

template <class Scalar>
struct SignedAttention {
  bool positive;
  Scalar attention;
};

/// Tile sign is + iff h_k . (W_cls[1] - W_cls[0]) > 0; exact zero counts as -.
template <class Scalar>
std::vector<SignedAttention<Scalar>> signed_attention(const FeatureBag& bag,
                                                      const GmaModel<Scalar>& model) {
  const auto fwd = gma_forward(bag, model);
  const auto& H = detail::features_as<Scalar>(bag);
  const Vector<Scalar> direction = (model.W_cls.row(1) - model.W_cls.row(0)).transpose();
  const Vector<Scalar> proj = H * direction;
  std::vector<SignedAttention<Scalar>> out(static_cast<std::size_t>(H.rows()));
  for (Eigen::Index k = 0; k < H.rows(); ++k) {
    out[static_cast<std::size_t>(k)] = {proj(k) > Scalar(0), fwd.attention(k)};
  }
  return out;
}

/// Positive-class probability of every tile.
template <class Scalar>
Vector<Scalar> tile_probabilities(const FeatureBag& bag, const TileScorer<Scalar>& scorer) {
  if (bag.features.cols() != scorer.feature_dim()) {
    throw ShapeError("tile_probabilities: bag features " + shape_str(bag.features) +
                     " do not match scorer D1=" + std::to_string(scorer.feature_dim()));
  }
  const auto& H = detail::features_as<Scalar>(bag);
  // softmax over two logits is the sigmoid of their difference
  const Vector<Scalar> margin =
      H * (scorer.W.row(1) - scorer.W.row(0)).transpose() +
      Vector<Scalar>::Constant(H.rows(), scorer.b(1, 0) - scorer.b(0, 0));
  return margin.unaryExpr([](Scalar x) { return sigmoid(x); });
}

/// Mean positive probability over the kept tiles.
template <class Scalar>
Scalar tile_supervised_score(const FeatureBag& bag, const TileScorer<Scalar>& scorer,
                             std::span<const bool> keep) {
  const Vector<Scalar> p = tile_probabilities(bag, scorer);
  if (static_cast<Eigen::Index>(keep.size()) != p.size()) {
    throw ShapeError("tile_supervised_score: mask length " + std::to_string(keep.size()) +
                     " for " + std::to_string(p.size()) + " tiles");
  }
  Scalar sum = Scalar(0);
  std::size_t n = 0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    if (keep[static_cast<std::size_t>(k)]) {
      sum += p(k);
      ++n;
    }
  }
  if (n == 0) throw DomainError("tile_supervised_score: no tiles after mask");
  return sum / Scalar(n);
}

template <class Scalar>
Scalar tile_supervised_score(const FeatureBag& bag, const TileScorer<Scalar>& scorer) {
  if (bag.features.rows() == 0) throw DomainError("tile_supervised_score: no tiles after mask");
  return tile_probabilities(bag, scorer).mean();
}

template <class Scalar>
struct TileBackward {
  Scalar loss;
  TileScorer<Scalar> grads;
};

/// Weighted cross-entropy of one tile carrying its slide's label.
template <class Scalar, class Derived>
TileBackward<Scalar> tile_backward(const Eigen::MatrixBase<Derived>& tile,
                                   const TileScorer<Scalar>& scorer, int label,
                                   double pos_weight) {
  const Vector<Scalar> h = tile.reshaped().template cast<Scalar>();
  if (h.size() != scorer.feature_dim()) throw ShapeError("tile_backward: feature length mismatch");
  const Vector<Scalar> logits = scorer.W * h + scorer.b.col(0);
  const auto ce = weighted_ce_loss(logits, label, pos_weight);
  return {ce.loss, {ce.grad * h.transpose(), ce.grad}};
}

}  // namespace milscreen
