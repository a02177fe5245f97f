#include "medbridge/query_encoder.hpp"

namespace medbridge {

void QueryBank::init(Rng& rng, int num_queries, int f) {
  require(num_queries >= 1, ErrKind::config, "query bank: need at least one query");
  queries.resize(num_queries, f);
  fill_normal(rng, queries, 0.02);
  grad = Mat::Zero(num_queries, f);
}

void QueryBank::init(Rng& rng, int num_queries, const VisionBackbone& backbone) {
  init(rng, num_queries, backbone.spec().embed_dim);
  const Mat dirs = backbone.query_seed_directions();
  if (dirs.rows() == 0) return;
  // The base init's small noise keeps same-orientation queries distinct.
  for (int i = 0; i < num_queries; ++i) queries.row(i) += dirs.row(i % dirs.rows());
}

std::vector<ViewEncoding> inject_and_encode(const VisionBackbone& backbone,
                                            const std::vector<FrozenTokens>& prefix_tokens,
                                            const QueryBank& bank, bool with_cache) {
  require(bank.num_queries() >= 1, ErrKind::precondition, "inject: empty query bank");
  require(bank.queries.cols() == backbone.spec().embed_dim, ErrKind::shape,
          "inject: query width does not match backbone");
  const int M = backbone.spec().token_count();
  const int Q = bank.num_queries();

  std::vector<ViewEncoding> out(prefix_tokens.size());
  for (std::size_t i = 0; i < prefix_tokens.size(); ++i) {
    const FrozenTokens& ft = prefix_tokens[i];
    require(ft.tokens.rows() == M, ErrKind::shape, "inject: prefix token count mismatch");
    Mat joint(M + Q, backbone.spec().embed_dim);
    joint.topRows(M) = ft.tokens;
    joint.bottomRows(Q) = bank.queries;
    out[i].out = backbone.run_suffix(joint, ft.layer_index, Q, with_cache ? &out[i].cache : nullptr);
  }
  return out;
}

Vec reduce_tokens(const Mat& tokens, Reduce mode, ReduceCache* cache) {
  require(tokens.rows() > 0, ErrKind::precondition, "reduce: empty token matrix");
  if (cache) {
    cache->mode = mode;
    cache->rows = tokens.rows();
    cache->argmax.clear();
  }
  switch (mode) {
    case Reduce::class_token:
      return tokens.row(0).transpose();
    case Reduce::mean:
      return tokens.colwise().mean().transpose();
    case Reduce::max: {
      Vec v(tokens.cols());
      for (Eigen::Index c = 0; c < tokens.cols(); ++c) {
        Eigen::Index best = 0;
        for (Eigen::Index r = 1; r < tokens.rows(); ++r)
          if (tokens(r, c) > tokens(best, c)) best = r;
        v[c] = tokens(best, c);
        if (cache) cache->argmax.push_back(best);
      }
      return v;
    }
  }
  fail(ErrKind::precondition, "reduce: unknown mode");
}

Mat reduce_tokens_backward(const ReduceCache& c, Eigen::Index cols, const Vec& dv) {
  Mat dt = Mat::Zero(c.rows, cols);
  switch (c.mode) {
    case Reduce::class_token:
      dt.row(0) = dv.transpose();
      break;
    case Reduce::mean:
      dt.rowwise() += (dv / double(c.rows)).transpose();
      break;
    case Reduce::max:
      for (Eigen::Index col = 0; col < cols; ++col) dt(c.argmax[std::size_t(col)], col) = dv[col];
      break;
  }
  return dt;
}

void CrossViewAttention::init(Rng& rng, int f, int num_heads) {
  require(num_heads > 0 && f % num_heads == 0, ErrKind::config,
          "cross-view attention: heads must divide feature width");
  heads = num_heads;
  init_attn(rng, p, f, /*zero_out_proj=*/true);
  g.zeros_like(p);
}

Vec aggregate_views(const Mat& view_vectors, const CrossViewAttention& cva,
                    AggregateCache* cache) {
  require(view_vectors.rows() >= 1, ErrKind::precondition, "aggregate: no views");
  AggregateCache local;
  AggregateCache& c = cache ? *cache : local;
  c.y = attn_forward(cva.p, cva.heads, view_vectors, cache ? &c.attn : nullptr);
  c.argmax.assign(std::size_t(c.y.cols()), 0);
  Vec out(c.y.cols());
  for (Eigen::Index col = 0; col < c.y.cols(); ++col) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < c.y.rows(); ++r)
      if (c.y(r, col) > c.y(best, col)) best = r;
    c.argmax[std::size_t(col)] = best;
    out[col] = c.y(best, col);
  }
  return out;
}

Mat aggregate_views_backward(CrossViewAttention& cva, const AggregateCache& c, const Vec& dout) {
  Mat dy = Mat::Zero(c.y.rows(), c.y.cols());
  for (Eigen::Index col = 0; col < c.y.cols(); ++col)
    dy(c.argmax[std::size_t(col)], col) = dout[col];
  return attn_backward(cva.p, cva.heads, c.attn, dy, &cva.g);
}

Vec mix(const Vec& m_bar, const Vec& q_bar, const MixConfig& cfg) {
  cfg.validate();
  require(m_bar.size() == q_bar.size(), ErrKind::shape, "mix: dimension mismatch");
  return cfg.alpha * m_bar + (1.0 - cfg.alpha) * q_bar;
}

}  // namespace medbridge
