#pragma once

#include <vector>

#include "medbridge/nn.hpp"

namespace medbridge {

// Per-expert trainable linear map f_k -> f_fuse. Applied to the frozen and
// query candidates (hence to their mix) and to the gate pooling, so the
// weighted sum over experts stays well-typed when expert widths differ.
struct FusionProj {
  Mat w, b;    // f_k x f_fuse, 1 x f_fuse
  Mat gw, gb;  // gradients

  void init(Rng& rng, int f_in, int f_fuse);
  Vec apply(const Vec& x) const { return w.transpose() * x + b.row(0).transpose(); }
  // Accumulates parameter grads, returns dx.
  Vec backward(const Vec& x, const Vec& dy);
};

// Mean over all raw query outputs of one expert: rows of each view's Q x f
// query block, pooled over (views, queries).
Vec pool_query_outputs(const std::vector<Mat>& per_view_query_tokens);

// Trainable affine map from the concatenated reduced gate input (K * f_fuse)
// to K logits. Zero-initialized: gating starts uniform.
struct GateParams {
  Mat w, b;    // (K * f_fuse) x K, 1 x K
  Mat gw, gb;

  void init(int in_dim, int num_experts);
};

// g = softmax(W^T input + b). Non-finite logits are surfaced as a numeric
// error rather than clamped.
Vec gate(const Vec& input, const GateParams& p);
// Accumulates gate parameter grads, returns d(input). probs is the forward output.
Vec gate_backward(const Vec& input, const GateParams& p, const Vec& probs, const Vec& dprobs,
                  Mat& gw, Mat& gb);

// v = sum_k g_k a_k over per-expert class tokens of equal dimension.
Vec fuse(const Vec& gate_weights, const std::vector<Vec>& class_tokens);

}  // namespace medbridge
