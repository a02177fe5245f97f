#pragma once

#include <vector>

#include "medbridge/backbone.hpp"
#include "medbridge/nn.hpp"

namespace medbridge {

// The Q trainable query vectors of one expert. The same bank is replicated
// into every view's suffix run, so the parameter count is Q*f regardless of
// the number of views.
struct QueryBank {
  std::string expert_id;
  Mat queries;  // Q x f
  Mat grad;

  void init(Rng& rng, int num_queries, int f);
  // Adds the backbone's seed directions on top of the base init, cycling
  // through orientations, so queries start out attending to salient texture.
  void init(Rng& rng, int num_queries, const VisionBackbone& backbone);
  int num_queries() const { return int(queries.rows()); }
};

// One view's trip through the joint suffix.
struct ViewEncoding {
  SuffixOut out;
  SuffixCache cache;  // filled only when requested
};

// Concatenates [M frozen; Q queries] per view and runs the shared suffix.
// Views are independent of each other here; the bank is shared across them.
std::vector<ViewEncoding> inject_and_encode(const VisionBackbone& backbone,
                                            const std::vector<FrozenTokens>& prefix_tokens,
                                            const QueryBank& bank, bool with_cache);

enum class Reduce { class_token, mean, max };

struct ReduceCache {
  Reduce mode = Reduce::mean;
  Eigen::Index rows = 0;
  std::vector<Eigen::Index> argmax;  // max mode only
};

// Collapses a token matrix (rows = tokens) to one vector: the class-token row,
// the column mean, or the column max (first maximum wins on ties).
Vec reduce_tokens(const Mat& tokens, Reduce mode, ReduceCache* cache);
Mat reduce_tokens_backward(const ReduceCache& c, Eigen::Index cols, const Vec& dv);

// Trainable pre-norm self-attention over the N per-view vectors, one block
// per (expert, path). The zero-initialized output projection makes the block
// an exact identity at the start of training, so aggregation begins as plain
// max-pooling.
struct CrossViewAttention {
  int heads = 4;
  AttnP p;
  AttnP g;

  void init(Rng& rng, int f, int num_heads);
};

struct AggregateCache {
  AttnCache attn;
  Mat y;                             // attention output, N x f
  std::vector<Eigen::Index> argmax;  // winning view per feature column
};

// Self-attention across views followed by elementwise max over the N outputs.
Vec aggregate_views(const Mat& view_vectors, const CrossViewAttention& cva, AggregateCache* cache);
// Returns d(view_vectors); accumulates parameter gradients into cva.g.
Mat aggregate_views_backward(CrossViewAttention& cva, const AggregateCache& c, const Vec& dout);

struct MixConfig {
  double alpha = 0.7;
  void validate() const { require(alpha >= 0.0 && alpha <= 1.0, ErrKind::config, "alpha must be in [0,1]"); }
};

// a_k = alpha * m_bar + (1 - alpha) * q_bar.
Vec mix(const Vec& m_bar, const Vec& q_bar, const MixConfig& cfg);

}  // namespace medbridge
