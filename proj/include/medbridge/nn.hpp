#pragma once

#include <string>
#include <vector>

#include "medbridge/core.hpp"

namespace medbridge {

// Tokens are rows: a sequence of S tokens of width f is an S x f matrix.
// Weight matrices map row vectors on the right: y = x * W + b, with b a
// 1 x out row broadcast over the sequence.
//
// The same parameter structs serve three roles: frozen values (no gradient
// struct at all, so freezing is structural), trainable values, and gradient
// accumulators for the trainable case. Backward functions take a nullable
// gradient struct; passing nullptr computes input gradients only, which is
// exactly what backpropagation through a frozen suffix layer needs.

constexpr double kLnEps = 1e-5;

struct LnCache {
  Mat xhat;     // normalized input
  Vec inv_std;  // per row
};

Mat layernorm(const Mat& x, const Mat& gamma, const Mat& beta, LnCache* cache);
// Returns dx; accumulates dgamma/dbeta when non-null.
Mat layernorm_backward(const Mat& dy, const Mat& gamma, const LnCache& c, Mat* dgamma, Mat* dbeta);

Mat gelu(const Mat& x);
Mat gelu_grad(const Mat& x);

// Row-wise softmax, max-subtracted.
Mat softmax_rows(const Mat& x);
// dX given the forward output P and upstream dP.
Mat softmax_rows_backward(const Mat& p, const Mat& dp);

inline Mat linear(const Mat& x, const Mat& w, const Mat& b) {
  return (x * w).rowwise() + b.row(0);
}

// Pre-norm self-attention sublayer: y = x + Wo(MHSA(LN(x))).
struct AttnP {
  Mat ln_w, ln_b;          // 1 x f
  Mat wq, wk, wv, wo;      // f x f
  Mat bq, bk, bv, bo;      // 1 x f
  void zeros_like(const AttnP& o);
};

struct AttnCache {
  LnCache ln;
  Mat xn;                  // LN(x)
  Mat q, k, v;             // S x f
  std::vector<Mat> probs;  // per head, S x S
  Mat concat;              // attention output before Wo
};

Mat attn_forward(const AttnP& p, int heads, const Mat& x, AttnCache* cache);
Mat attn_backward(const AttnP& p, int heads, const AttnCache& c, const Mat& dy, AttnP* dp);

// Pre-norm feed-forward sublayer: y = x + W2(gelu(W1(LN(x)))), hidden 4f.
struct FfnP {
  Mat ln_w, ln_b;  // 1 x f
  Mat w1, b1;      // f x 4f, 1 x 4f
  Mat w2, b2;      // 4f x f, 1 x f
  void zeros_like(const FfnP& o);
};

struct FfnCache {
  LnCache ln;
  Mat xn;
  Mat h_pre;  // before gelu
  Mat h;      // after gelu
};

Mat ffn_forward(const FfnP& p, const Mat& x, FfnCache* cache);
Mat ffn_backward(const FfnP& p, const FfnCache& c, const Mat& dy, FfnP* dp);

// One transformer block = attention sublayer then feed-forward sublayer.
struct BlockP {
  AttnP attn;
  FfnP ffn;
};

struct BlockCache {
  AttnCache attn;
  FfnCache ffn;
  Mat mid;  // output of the attention sublayer (input to ffn backward)
};

Mat block_forward(const BlockP& b, int heads, const Mat& x, BlockCache* cache);
// Input gradient only; block parameters stay untouched (frozen path).
Mat block_backward_input(const BlockP& b, int heads, const BlockCache& c, const Mat& dy);

// Initializers. Attention/FFN weights use 1/sqrt(fan_in); biases zero; LN at
// identity. zero_out_proj puts the residual branch at exact zero, so the
// sublayer starts as the identity map.
void init_attn(Rng& rng, AttnP& p, int f, bool zero_out_proj);
void init_ffn(Rng& rng, FfnP& p, int f);

// Named trainable leaves, for the optimizer, gradient clipping, checkpoints
// and parameter counting. value and grad always have identical shapes.
struct ParamRef {
  std::string name;
  Mat* value;
  Mat* grad;
};
using ParamList = std::vector<ParamRef>;

void collect_attn(const std::string& prefix, AttnP& value, AttnP& grad, ParamList& out);
std::int64_t param_count(const ParamList& params);
void zero_grads(const ParamList& params);
double global_grad_norm(const ParamList& params);

// Frozen-side byte hashes (identity checks).
std::uint64_t hash_attn(const AttnP& p, std::uint64_t h);
std::uint64_t hash_ffn(const FfnP& p, std::uint64_t h);

}  // namespace medbridge
