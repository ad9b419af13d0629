#pragma once

// Vision Transformer with LoRA-adapted attention and a two-layer
// classification head on the CLS token.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "evl/mhsa.hpp"

namespace evl {

template <class T> struct EncoderBlock {
  LayerNorm<T> norm1;
  MultiHeadSelfAttention<T> attn;
  LayerNorm<T> norm2;
  Linear<T> fc1, fc2;

  /// Pre-norm residual block.
  Var<T> operator()(const Var<T> &x) const {
    Var<T> h = add(x, attn(norm1(x)));
    return add(h, fc2(gelu(fc1(norm2(h)))));
  }
};

/// Parameter groups: "vit" (pretrained-equivalent base), "lora", "head".
template <class T> class ViTModel {
public:
  /// Called with (boundary index, token shape) at the embedding output
  /// (index 0) and after each encoder block (index i + 1).
  using ShapeAudit = std::function<void(std::size_t, const Shape &)>;

  ViTModel(ParamRegistry<T> &reg, const ViTConfig &cfg, std::uint64_t seed) : cfg_(cfg), reg_(&reg) {
    cfg_.validate();
    const bool base_trainable = !cfg_.frozen;
    const std::size_t d = cfg_.d_model;
    const std::size_t patch_dim = 3 * cfg_.patch_size * cfg_.patch_size;
    patch_proj_ = Linear<T>(reg, "vit.patch", patch_dim, d, base_trainable, "vit");
    cls_ = reg.add("vit.cls", Tensor<T>({d}), base_trainable, "vit");
    pos_ = reg.add("vit.pos", Tensor<T>({cfg_.tokens(), d}), base_trainable, "vit");
    const auto active = cfg_.lora.active_blocks(cfg_.depth);
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      const std::string p = "vit.blocks." + std::to_string(i);
      EncoderBlock<T> b;
      b.norm1 = LayerNorm<T>(reg, p + ".norm1", d, base_trainable, "vit", static_cast<T>(cfg_.ln_eps));
      b.attn = MultiHeadSelfAttention<T>(reg, p + ".attn", d, cfg_.n_heads, base_trainable, "vit");
      b.norm2 = LayerNorm<T>(reg, p + ".norm2", d, base_trainable, "vit", static_cast<T>(cfg_.ln_eps));
      b.fc1 = Linear<T>(reg, p + ".mlp.fc1", d, cfg_.mlp_hidden, base_trainable, "vit");
      b.fc2 = Linear<T>(reg, p + ".mlp.fc2", cfg_.mlp_hidden, d, base_trainable, "vit");
      blocks_.push_back(std::move(b));
    }
    head_fc1_ = Linear<T>(reg, "head.fc1", d, cfg_.head_hidden, true, "head");
    head_fc2_ = Linear<T>(reg, "head.fc2", cfg_.head_hidden, cfg_.n_classes, true, "head");

    load_pseudo_pretrained(seed);
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      if (active[i]) blocks_[i].attn.attach_lora(reg, cfg_.lora, seed);
    }
    auto head_rng = stream_for(seed, "head");
    head_fc1_.init_glorot(head_rng);
    head_fc2_.init_glorot(head_rng);
    dropout_rng_.seed(seed ^ 0x5eedULL);
  }

  ViTModel(const ViTModel &) = delete;
  ViTModel &operator=(const ViTModel &) = delete;

  /// Deterministic stand-in for pretrained weights: every "vit" group tensor
  /// is redrawn from a stream derived from (seed, name). Matrices ~ N(0,
  /// 0.02), layer-norm scales 1, shifts and biases 0.
  void load_pseudo_pretrained(std::uint64_t seed) {
    for (auto &e : reg_->entries()) {
      if (e.group != "vit") continue;
      const std::string &n = e.name;
      auto ends_with = [&](const std::string &s) { return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0; };
      if (ends_with(".gamma")) {
        e.var.mutable_value().fill(T(1));
      } else if (ends_with(".beta") || ends_with(".bias")) {
        e.var.mutable_value().fill(T(0));
      } else {
        auto rng = stream_for(seed, n);
        fill_normal(e.var, rng, 0.02);
      }
    }
  }

  /// Patch embedding: [N, 3, S, S] -> [N, T, d_model] with CLS prepended and
  /// positional embeddings added.
  Var<T> embed(const Var<T> &images) const {
    const auto &s = images.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != cfg_.image_size || s[3] != cfg_.image_size) {
      throw ValidationError("vit: expected images [N,3," + std::to_string(cfg_.image_size) + "," +
                            std::to_string(cfg_.image_size) + "], got " + shape_str(s));
    }
    Var<T> tokens = patch_proj_(patchify(images, cfg_.patch_size));
    return add_broadcast(prepend_token(tokens, cls_), pos_);
  }

  Var<T> encode(Var<T> tokens) const {
    if (audit) audit(0, tokens.shape());
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      tokens = blocks_[i](tokens);
      if (audit) audit(i + 1, tokens.shape());
    }
    return tokens;
  }

  /// Final-block CLS state, [N, d_model].
  Var<T> cls_features(const Var<T> &images) const { return select_token(encode(embed(images)), 0); }

  Var<T> head(const Var<T> &cls, bool training) {
    Var<T> h = relu(head_fc1_(cls));
    if (training && cfg_.head_dropout > 0.0) h = dropout(h, static_cast<T>(cfg_.head_dropout), dropout_rng_);
    return head_fc2_(h);
  }

  /// Logits [N, n_classes]; softmax is left to the loss / probability view.
  Var<T> forward(const Var<T> &images, bool training = false) { return head(cls_features(images), training); }

  void merge_adapters() {
    for (auto &b : blocks_) b.attn.merge_adapters();
  }
  void unmerge_adapters() {
    for (auto &b : blocks_) b.attn.unmerge_adapters();
  }

  const ViTConfig &config() const { return cfg_; }
  std::vector<EncoderBlock<T>> &blocks() { return blocks_; }
  Linear<T> &patch_projection() { return patch_proj_; }
  Var<T> &cls_token() { return cls_; }
  Var<T> &positional() { return pos_; }
  Linear<T> &head_hidden() { return head_fc1_; }
  Linear<T> &head_output() { return head_fc2_; }

  ShapeAudit audit;

private:
  ViTConfig cfg_;
  ParamRegistry<T> *reg_;
  Linear<T> patch_proj_;
  Var<T> cls_, pos_;
  std::vector<EncoderBlock<T>> blocks_;
  Linear<T> head_fc1_, head_fc2_;
  std::mt19937_64 dropout_rng_;
};

} // namespace evl
