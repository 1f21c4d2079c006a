#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "milforge/common.hpp"
#include "milforge/rng.hpp"
#include "milforge/tape.hpp"
#include "milforge/tensor.hpp"

namespace milforge {

enum class ModelKind { maxpool, meanpool, abmil, clamsb, pathmil };
enum class PeMode { none, twod };

ModelKind parse_model_kind(const std::string& s);
PeMode parse_pe_mode(const std::string& s);
const char* to_string(ModelKind k);
const char* to_string(PeMode p);

inline constexpr std::size_t kEmbedDim = 512;
inline constexpr std::size_t kAttnHidden = 256;

struct ModelConfig {
  ModelKind kind = ModelKind::clamsb;
  std::uint32_t num_classes = 2;
  std::uint32_t feature_dim = 0;
  PeMode pe = PeMode::none;
  float sigma = 100.0f;  // 2DPE sinusoid input scale
  std::uint32_t heads = 8;
};

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Tensor<T> v) : name(std::move(n)) {
    grad = Tensor<T>::zeros(v.shape);
    value = std::move(v);
  }
};

namespace init {

// uniform(-a, a) with a = 1/sqrt(fan_in), for weights and biases alike.
template <typename T>
Tensor<T> affine(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  const T a = static_cast<T>(1.0 / std::sqrt(double(fan_in)));
  return Tensor<T>::uniform(std::move(shape), a, rng);
}

}  // namespace init

// Gated attention network (embedder + gates U, V + branch matrix W). abmil
// drops the sigmoid gate and uses one shared branch; clamsb/pathmil use one
// branch per class.
template <typename T>
struct AttentionNet {
  Param<T> embed_w;   // 512 x D
  Param<T> embed_b;   // 512
  bool gated = true;
  Param<T> gate_u;    // 256 x 512 (gated only)
  Param<T> gate_v;    // 256 x 512
  Param<T> branches;  // n_branches x 256

  struct Bound {
    typename Tape<T>::Id embed_w, embed_b, gate_u, gate_v, branches;
    bool gated;
  };
  Bound bind(Tape<T>& t) {
    Bound b;
    b.embed_w = t.param(embed_w.value, &embed_w.grad, "embed_w");
    b.embed_b = t.param(embed_b.value, &embed_b.grad, "embed_b");
    if (gated) b.gate_u = t.param(gate_u.value, &gate_u.grad, "gate_u");
    b.gate_v = t.param(gate_v.value, &gate_v.grad, "gate_v");
    b.branches = t.param(branches.value, &branches.grad, "branches");
    b.gated = gated;
    return b;
  }
};

template <typename T>
struct SelfAttentionLayer {
  Param<T> norm_gain, norm_bias;
  Param<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct TransformerStack {
  SelfAttentionLayer<T> layer[2];
  Param<T> cls;                    // 512
  Param<T> final_gain, final_bias; // 512
};

// ------------------------------------------------------------- building ----

namespace blocks {

// h = H * embed_w^T + embed_b, rows independent.
template <typename T>
typename Tape<T>::Id fc_embed(Tape<T>& t, typename Tape<T>::Id H,
                              const typename AttentionNet<T>::Bound& net) {
  return ops::linear(t, H, net.embed_w, net.embed_b);
}

template <typename T>
struct Scores {
  typename Tape<T>::Id s;      // K x C pre-softmax gated scores
  typename Tape<T>::Id alpha;  // K x C, each column softmaxed over instances
};

// s[k,c] = W_c (tanh(V h_k) ⊙ sigm(U h_k)); alpha = column softmax of s.
// Row k of s is a function of h_k alone. The single-branch (abmil) variant
// broadcasts its one column across C.
template <typename T>
Scores<T> gated_scores(Tape<T>& t, typename Tape<T>::Id h,
                       const typename AttentionNet<T>::Bound& net, std::size_t num_classes) {
  auto g = ops::tanh_op(t, ops::linear(t, h, net.gate_v));
  typename Tape<T>::Id act = g;
  if (net.gated) {
    auto u = ops::sigmoid_op(t, ops::linear(t, h, net.gate_u));
    act = ops::mul(t, g, u);
  }
  auto s = ops::linear(t, act, net.branches);  // K x n_branches
  if (t.value(s).cols() != num_classes) {
    std::vector<typename Tape<T>::Id> copies(num_classes, s);
    s = ops::concat_cols(t, copies);
  }
  return {s, ops::softmax_cols(t, s)};
}

// M = alpha^T h: one pooled 512-vector per attention branch.
template <typename T>
typename Tape<T>::Id attention_pool(Tape<T>& t, typename Tape<T>::Id h, typename Tape<T>::Id alpha) {
  return ops::matmul_tn(t, alpha, h);
}

// Instance classifier: sigmoid of the pre-softmax scores, so row k depends
// on instance k only (the softmax would couple instances).
template <typename T>
typename Tape<T>::Id instance_probs(Tape<T>& t, typename Tape<T>::Id s) {
  return ops::sigmoid_op(t, s);
}

// Sinusoidal offsets for per-bag-normalized 2-D coordinates. Row 0 (CLS)
// gets a zero offset. Coordinates are shifted by the per-axis minimum and
// divided by the larger axis range, so translation cannot change the output
// and the aspect ratio is preserved; a degenerate bag maps every position
// to 0.
template <typename T>
Tensor<T> two_d_pe_offsets(const Tensor<T>& coords, T sigma) {
  if (coords.ndim() != 2 || coords.cols() != 2)
    throw DimensionError("2dpe: coords must be K x 2, got " + coords.shape_str());
  const std::size_t k = coords.rows();
  static const std::vector<double> inv_div = [] {
    std::vector<double> v(kEmbedDim / 2);
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = 1.0 / std::pow(10000.0, double(2 * i) / double(kEmbedDim));
    return v;
  }();

  double min_x = coords.at(0, 0), max_x = min_x;
  double min_y = coords.at(0, 1), max_y = min_y;
  for (std::size_t i = 1; i < k; ++i) {
    min_x = std::min(min_x, double(coords.at(i, 0)));
    max_x = std::max(max_x, double(coords.at(i, 0)));
    min_y = std::min(min_y, double(coords.at(i, 1)));
    max_y = std::max(max_y, double(coords.at(i, 1)));
  }
  double max_scale = std::max(max_x - min_x, max_y - min_y);
  if (max_scale <= 0.0) max_scale = 1.0;

  Tensor<T> offsets = Tensor<T>::zeros({k + 1, kEmbedDim});
  for (std::size_t i = 0; i < k; ++i) {
    const double px = double(sigma) * (double(coords.at(i, 0)) - min_x) / max_scale;
    const double py = double(sigma) * (double(coords.at(i, 1)) - min_y) / max_scale;
    T* row = offsets.ptr() + (i + 1) * kEmbedDim;
    for (std::size_t j = 0; j < kEmbedDim / 2; ++j) {
      const double ax = px * inv_div[j], ay = py * inv_div[j];
      row[2 * j] = static_cast<T>(std::sin(ax) + std::sin(ay));
      row[2 * j + 1] = static_cast<T>(std::cos(ax) + std::cos(ay));
    }
  }
  return offsets;
}

// hl (CLS at row 0) + positional offsets.
template <typename T>
typename Tape<T>::Id two_d_pos_enc(Tape<T>& t, typename Tape<T>::Id hl, const Tensor<T>& coords, T sigma) {
  if (t.value(hl).rows() != coords.rows() + 1)
    throw DimensionError("2dpe: expected CLS row, got " + t.value(hl).shape_str() + " for " +
                         std::to_string(coords.rows()) + " coordinates");
  return ops::add(t, hl, t.leaf(two_d_pe_offsets(coords, sigma), "pe_offsets"));
}

template <typename T>
struct BoundLayer {
  typename Tape<T>::Id norm_gain, norm_bias, wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
BoundLayer<T> bind_layer(Tape<T>& t, SelfAttentionLayer<T>& l) {
  return {t.param(l.norm_gain.value, &l.norm_gain.grad), t.param(l.norm_bias.value, &l.norm_bias.grad),
          t.param(l.wq.value, &l.wq.grad), t.param(l.bq.value, &l.bq.grad),
          t.param(l.wk.value, &l.wk.grad), t.param(l.bk.value, &l.bk.grad),
          t.param(l.wv.value, &l.wv.grad), t.param(l.bv.value, &l.bv.grad),
          t.param(l.wo.value, &l.wo.grad), t.param(l.bo.value, &l.bo.grad)};
}

// Standard multi-head scaled dot-product self-attention over all rows.
template <typename T>
typename Tape<T>::Id self_attention(Tape<T>& t, typename Tape<T>::Id x, const BoundLayer<T>& l,
                                    std::size_t heads) {
  const std::size_t width = t.value(x).cols();
  if (width % heads != 0)
    throw DimensionError("self_attention: width not divisible by head count");
  const std::size_t hd = width / heads;
  auto q = ops::linear(t, x, l.wq, l.bq);
  auto k = ops::linear(t, x, l.wk, l.bk);
  auto v = ops::linear(t, x, l.wv, l.bv);
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(double(hd)));
  std::vector<typename Tape<T>::Id> outs;
  outs.reserve(heads);
  for (std::size_t hidx = 0; hidx < heads; ++hidx) {
    const std::size_t c0 = hidx * hd, c1 = c0 + hd;
    auto qh = ops::slice_cols(t, q, c0, c1);
    auto kh = ops::slice_cols(t, k, c0, c1);
    auto vh = ops::slice_cols(t, v, c0, c1);
    auto att = ops::softmax_rows(t, ops::scale(t, ops::matmul_nt(t, qh, kh), inv_sqrt));
    outs.push_back(ops::matmul(t, att, vh));
  }
  return ops::linear(t, ops::concat_cols(t, outs), l.wo, l.bo);
}

// Pre-norm residual attention layer: x + SelfAttn(LayerNorm(x)).
template <typename T>
typename Tape<T>::Id residual_attention(Tape<T>& t, typename Tape<T>::Id x, const BoundLayer<T>& l,
                                        std::size_t heads) {
  auto normed = ops::layer_norm(t, x, l.norm_gain, l.norm_bias);
  return ops::add(t, x, self_attention(t, normed, l, heads));
}

}  // namespace blocks

// ------------------------------------------------------------- the model ---

template <typename T>
class MilModel {
 public:
  ModelConfig config;
  AttentionNet<T> attn;
  std::optional<TransformerStack<T>> stack;
  Param<T> head_w, head_b;

  static MilModel make(const ModelConfig& cfg, std::uint64_t seed) {
    if (cfg.feature_dim == 0) throw ConfigError("model: feature_dim must be set");
    if (cfg.num_classes < 2) throw ConfigError("model: need at least 2 classes");
    if (cfg.pe == PeMode::twod && cfg.kind != ModelKind::pathmil)
      throw ConfigError("model: positional encoding requires the pathmil kind");
    MilModel m;
    m.config = cfg;
    Rng rng(Rng::mix(seed, 0x30de1));
    const std::size_t D = cfg.feature_dim, C = cfg.num_classes;

    m.attn.embed_w = {"embed.w", init::affine<T>({kEmbedDim, D}, D, rng)};
    m.attn.embed_b = {"embed.b", init::affine<T>({kEmbedDim}, D, rng)};
    const bool with_attention =
        cfg.kind == ModelKind::abmil || cfg.kind == ModelKind::clamsb || cfg.kind == ModelKind::pathmil;
    if (with_attention) {
      m.attn.gated = cfg.kind != ModelKind::abmil;
      if (m.attn.gated)
        m.attn.gate_u = {"attn.u", init::affine<T>({kAttnHidden, kEmbedDim}, kEmbedDim, rng)};
      m.attn.gate_v = {"attn.v", init::affine<T>({kAttnHidden, kEmbedDim}, kEmbedDim, rng)};
      const std::size_t branches = m.attn.gated ? C : 1;
      m.attn.branches = {"attn.w", init::affine<T>({branches, kAttnHidden}, kAttnHidden, rng)};
    }
    if (cfg.kind == ModelKind::pathmil) {
      TransformerStack<T> st;
      for (int li = 0; li < 2; ++li) {
        auto& l = st.layer[li];
        const std::string p = "trans.l" + std::to_string(li) + ".";
        l.norm_gain = {p + "norm.gain", Tensor<T>::full({kEmbedDim}, T(1))};
        l.norm_bias = {p + "norm.bias", Tensor<T>::zeros({kEmbedDim})};
        l.wq = {p + "wq", init::affine<T>({kEmbedDim, kEmbedDim}, kEmbedDim, rng)};
        l.bq = {p + "bq", init::affine<T>({kEmbedDim}, kEmbedDim, rng)};
        l.wk = {p + "wk", init::affine<T>({kEmbedDim, kEmbedDim}, kEmbedDim, rng)};
        l.bk = {p + "bk", init::affine<T>({kEmbedDim}, kEmbedDim, rng)};
        l.wv = {p + "wv", init::affine<T>({kEmbedDim, kEmbedDim}, kEmbedDim, rng)};
        l.bv = {p + "bv", init::affine<T>({kEmbedDim}, kEmbedDim, rng)};
        l.wo = {p + "wo", init::affine<T>({kEmbedDim, kEmbedDim}, kEmbedDim, rng)};
        l.bo = {p + "bo", init::affine<T>({kEmbedDim}, kEmbedDim, rng)};
      }
      st.cls = {"trans.cls", Tensor<T>::normal({kEmbedDim}, T(0.02), rng)};
      st.final_gain = {"trans.final.gain", Tensor<T>::full({kEmbedDim}, T(1))};
      st.final_bias = {"trans.final.bias", Tensor<T>::zeros({kEmbedDim})};
      m.stack = std::move(st);
    }

    std::size_t head_in = kEmbedDim;
    if (cfg.kind == ModelKind::pathmil) head_in = kEmbedDim + kEmbedDim * C;
    m.head_w = {"head.w", init::affine<T>({C, head_in}, head_in, rng)};
    m.head_b = {"head.b", init::affine<T>({C}, head_in, rng)};
    return m;
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out{&attn.embed_w, &attn.embed_b};
    const bool with_attention = config.kind == ModelKind::abmil ||
                                config.kind == ModelKind::clamsb ||
                                config.kind == ModelKind::pathmil;
    if (with_attention) {
      if (attn.gated) out.push_back(&attn.gate_u);
      out.push_back(&attn.gate_v);
      out.push_back(&attn.branches);
    }
    if (stack) {
      for (auto& l : stack->layer)
        for (Param<T>* p : {&l.norm_gain, &l.norm_bias, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo})
          out.push_back(p);
      out.push_back(&stack->cls);
      out.push_back(&stack->final_gain);
      out.push_back(&stack->final_bias);
    }
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
  }

  void zero_grads() {
    for (Param<T>* p : params()) std::fill(p->grad.data.begin(), p->grad.data.end(), T(0));
  }

  struct Forward {
    typename Tape<T>::Id logits = 0;    // {C}
    typename Tape<T>::Id embedded = 0;  // K x 512
    typename Tape<T>::Id scores = 0;    // K x C (attention kinds only)
    typename Tape<T>::Id alpha = 0;     // K x C
    bool has_scores = false;
  };

  // One bag forward. coords are consumed only by pathmil with pe=2d; a 2d
  // model on a coordinate-free bag is a configuration error.
  Forward forward(Tape<T>& t, const Tensor<T>& features, const Tensor<T>* coords) {
    if (features.ndim() != 2 || features.cols() != config.feature_dim)
      throw DimensionError("model: bag features " + features.shape_str() + " do not match D=" +
                           std::to_string(config.feature_dim));
    const std::size_t C = config.num_classes;
    Forward f;
    auto net = attn.bind(t);
    auto H = t.leaf(features, "bag_features");
    f.embedded = blocks::fc_embed(t, H, net);

    auto head_wid = t.param(head_w.value, &head_w.grad, "head_w");
    auto head_bid = t.param(head_b.value, &head_b.grad, "head_b");

    switch (config.kind) {
      case ModelKind::maxpool:
      case ModelKind::meanpool: {
        auto pooled = config.kind == ModelKind::maxpool ? ops::max_rows(t, f.embedded)
                                                        : ops::mean_rows(t, f.embedded);
        auto logits = ops::linear(t, pooled, head_wid, head_bid);  // 1 x C
        f.logits = ops::reshape(t, logits, {C});
        break;
      }
      case ModelKind::abmil: {
        auto sc = blocks::gated_scores(t, f.embedded, net, C);
        f.scores = sc.s;
        f.alpha = sc.alpha;
        f.has_scores = true;
        // Pool on the single shared branch; the broadcast columns are
        // identical, so column 0 is the branch itself.
        auto a1 = ops::slice_cols(t, sc.alpha, 0, 1);
        auto M = blocks::attention_pool(t, f.embedded, a1);  // 1 x 512
        f.logits = ops::reshape(t, ops::linear(t, M, head_wid, head_bid), {C});
        break;
      }
      case ModelKind::clamsb: {
        auto sc = blocks::gated_scores(t, f.embedded, net, C);
        f.scores = sc.s;
        f.alpha = sc.alpha;
        f.has_scores = true;
        auto M = blocks::attention_pool(t, f.embedded, sc.alpha);  // C x 512
        // Per-class affine: logits[c] = <head_w[c], M[c]> + head_b[c].
        auto prod = ops::mul(t, M, head_wid);
        f.logits = ops::add(t, ops::sum_rows(t, prod), head_bid);
        break;
      }
      case ModelKind::pathmil: {
        if (config.pe == PeMode::twod && coords == nullptr)
          throw ConfigError("model: pathmil with pe=2d needs bag coordinates (build with pe=none instead)");
        auto sc = blocks::gated_scores(t, f.embedded, net, C);
        f.scores = sc.s;
        f.alpha = sc.alpha;
        f.has_scores = true;
        auto M = blocks::attention_pool(t, f.embedded, sc.alpha);  // C x 512

        auto& st = *stack;
        auto cls_id = t.param(st.cls.value, &st.cls.grad, "cls");
        auto x = ops::concat_rows(t, ops::reshape(t, cls_id, {std::size_t(1), kEmbedDim}), f.embedded);
        auto l0 = blocks::bind_layer(t, st.layer[0]);
        auto l1 = blocks::bind_layer(t, st.layer[1]);
        x = blocks::residual_attention(t, x, l0, config.heads);
        if (config.pe == PeMode::twod)
          x = blocks::two_d_pos_enc(t, x, *coords, static_cast<T>(config.sigma));
        x = blocks::residual_attention(t, x, l1, config.heads);
        auto fg = t.param(st.final_gain.value, &st.final_gain.grad);
        auto fb = t.param(st.final_bias.value, &st.final_bias.grad);
        auto hpp = ops::take_row(t, ops::layer_norm(t, x, fg, fb), 0);  // 1 x 512

        auto z = ops::concat_cols(t, {hpp, ops::reshape(t, M, {std::size_t(1), kEmbedDim * C})});
        f.logits = ops::reshape(t, ops::linear(t, z, head_wid, head_bid), {C});
        break;
      }
    }
    return f;
  }

  // Snapshot / restore of all parameter values (best-epoch checkpointing).
  std::vector<Tensor<T>> snapshot() {
    std::vector<Tensor<T>> out;
    for (Param<T>* p : params()) out.push_back(p->value);
    return out;
  }
  void restore(const std::vector<Tensor<T>>& snap) {
    auto ps = params();
    if (snap.size() != ps.size()) throw DimensionError("model: snapshot arity mismatch");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (snap[i].shape != ps[i]->value.shape) throw DimensionError("model: snapshot shape mismatch");
      ps[i]->value = snap[i];
    }
  }
};

// Checkpoint file: magic "MILW", u32 version, config block, then named f32
// parameter blobs with shape prefixes (little-endian throughout).
void save_checkpoint(const std::string& path, MilModel<float>& model);
MilModel<float> load_checkpoint(const std::string& path);

}  // namespace milforge
