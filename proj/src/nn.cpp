#include "medbridge/nn.hpp"

#include <cmath>

namespace medbridge {

Mat layernorm(const Mat& x, const Mat& gamma, const Mat& beta, LnCache* cache) {
  Vec mu = x.rowwise().mean();
  Mat xc = x.colwise() - mu;
  Vec var = xc.array().square().rowwise().mean().matrix();
  Vec inv_std = (var.array() + kLnEps).rsqrt().matrix();
  Mat xhat = (xc.array().colwise() * inv_std.array()).matrix();
  Mat y = ((xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array())
              .matrix();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Mat layernorm_backward(const Mat& dy, const Mat& gamma, const LnCache& c, Mat* dgamma,
                       Mat* dbeta) {
  if (dgamma) dgamma->row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  if (dbeta) dbeta->row(0) += dy.colwise().sum();
  Mat dxhat = (dy.array().rowwise() * gamma.row(0).array()).matrix();
  const double f = double(dy.cols());
  Vec s1 = dxhat.rowwise().sum();
  Vec s2 = (dxhat.array() * c.xhat.array()).rowwise().sum().matrix();
  Mat dx = dxhat * f;
  dx.colwise() -= s1;
  dx -= (c.xhat.array().colwise() * s2.array()).matrix();
  dx.array().colwise() *= (c.inv_std.array() / f);
  return dx;
}

Mat gelu(const Mat& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); });
}

Mat gelu_grad(const Mat& x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return x.unaryExpr([](double v) {
    return 0.5 * (1.0 + std::erf(v * M_SQRT1_2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
  });
}

Mat softmax_rows(const Mat& x) {
  Vec mx = x.rowwise().maxCoeff();
  Mat e = (x.colwise() - mx).array().exp().matrix();
  Vec z = e.rowwise().sum();
  return (e.array().colwise() / z.array()).matrix();
}

Mat softmax_rows_backward(const Mat& p, const Mat& dp) {
  Vec dot = (p.array() * dp.array()).rowwise().sum().matrix();
  return (p.array() * (dp.colwise() - dot).array()).matrix();
}

void AttnP::zeros_like(const AttnP& o) {
  ln_w = Mat::Zero(o.ln_w.rows(), o.ln_w.cols());
  ln_b = Mat::Zero(o.ln_b.rows(), o.ln_b.cols());
  wq = Mat::Zero(o.wq.rows(), o.wq.cols());
  wk = Mat::Zero(o.wk.rows(), o.wk.cols());
  wv = Mat::Zero(o.wv.rows(), o.wv.cols());
  wo = Mat::Zero(o.wo.rows(), o.wo.cols());
  bq = Mat::Zero(o.bq.rows(), o.bq.cols());
  bk = Mat::Zero(o.bk.rows(), o.bk.cols());
  bv = Mat::Zero(o.bv.rows(), o.bv.cols());
  bo = Mat::Zero(o.bo.rows(), o.bo.cols());
}

void FfnP::zeros_like(const FfnP& o) {
  ln_w = Mat::Zero(o.ln_w.rows(), o.ln_w.cols());
  ln_b = Mat::Zero(o.ln_b.rows(), o.ln_b.cols());
  w1 = Mat::Zero(o.w1.rows(), o.w1.cols());
  b1 = Mat::Zero(o.b1.rows(), o.b1.cols());
  w2 = Mat::Zero(o.w2.rows(), o.w2.cols());
  b2 = Mat::Zero(o.b2.rows(), o.b2.cols());
}

Mat attn_forward(const AttnP& p, int heads, const Mat& x, AttnCache* cache) {
  const Eigen::Index f = x.cols();
  require(f == p.wq.rows(), ErrKind::shape, "attn: token width mismatch");
  require(heads > 0 && f % heads == 0, ErrKind::shape, "attn: heads must divide width");
  const Eigen::Index d = f / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(double(d));

  AttnCache local;
  AttnCache& c = cache ? *cache : local;
  c.xn = layernorm(x, p.ln_w, p.ln_b, &c.ln);
  c.q = linear(c.xn, p.wq, p.bq);
  c.k = linear(c.xn, p.wk, p.bk);
  c.v = linear(c.xn, p.wv, p.bv);
  c.probs.assign(std::size_t(heads), Mat());
  c.concat.resize(x.rows(), f);
  for (int h = 0; h < heads; ++h) {
    auto qh = c.q.middleCols(h * d, d);
    auto kh = c.k.middleCols(h * d, d);
    auto vh = c.v.middleCols(h * d, d);
    Mat scores = qh * kh.transpose() * inv_sqrt_d;
    c.probs[std::size_t(h)] = softmax_rows(scores);
    c.concat.middleCols(h * d, d) = c.probs[std::size_t(h)] * vh;
  }
  return x + linear(c.concat, p.wo, p.bo);
}

Mat attn_backward(const AttnP& p, int heads, const AttnCache& c, const Mat& dy, AttnP* dp) {
  const Eigen::Index f = dy.cols();
  const Eigen::Index d = f / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(double(d));

  // Residual: dy flows both straight through and into the sublayer.
  Mat dconcat = dy * p.wo.transpose();
  if (dp) {
    dp->wo += c.concat.transpose() * dy;
    dp->bo.row(0) += dy.colwise().sum();
  }
  Mat dq(dy.rows(), f), dk(dy.rows(), f), dv(dy.rows(), f);
  for (int h = 0; h < heads; ++h) {
    auto qh = c.q.middleCols(h * d, d);
    auto kh = c.k.middleCols(h * d, d);
    auto vh = c.v.middleCols(h * d, d);
    const Mat& ph = c.probs[std::size_t(h)];
    auto doh = dconcat.middleCols(h * d, d);
    Mat dph = doh * vh.transpose();
    dv.middleCols(h * d, d) = ph.transpose() * doh;
    Mat ds = softmax_rows_backward(ph, dph) * inv_sqrt_d;
    dq.middleCols(h * d, d) = ds * kh;
    dk.middleCols(h * d, d) = ds.transpose() * qh;
  }
  Mat dxn = dq * p.wq.transpose() + dk * p.wk.transpose() + dv * p.wv.transpose();
  if (dp) {
    dp->wq += c.xn.transpose() * dq;
    dp->wk += c.xn.transpose() * dk;
    dp->wv += c.xn.transpose() * dv;
    dp->bq.row(0) += dq.colwise().sum();
    dp->bk.row(0) += dk.colwise().sum();
    dp->bv.row(0) += dv.colwise().sum();
  }
  Mat dx = layernorm_backward(dxn, p.ln_w, c.ln, dp ? &dp->ln_w : nullptr,
                              dp ? &dp->ln_b : nullptr);
  return dx + dy;
}

Mat ffn_forward(const FfnP& p, const Mat& x, FfnCache* cache) {
  FfnCache local;
  FfnCache& c = cache ? *cache : local;
  c.xn = layernorm(x, p.ln_w, p.ln_b, &c.ln);
  c.h_pre = linear(c.xn, p.w1, p.b1);
  c.h = gelu(c.h_pre);
  return x + linear(c.h, p.w2, p.b2);
}

Mat ffn_backward(const FfnP& p, const FfnCache& c, const Mat& dy, FfnP* dp) {
  Mat dh = dy * p.w2.transpose();
  if (dp) {
    dp->w2 += c.h.transpose() * dy;
    dp->b2.row(0) += dy.colwise().sum();
  }
  Mat dh_pre = (dh.array() * gelu_grad(c.h_pre).array()).matrix();
  Mat dxn = dh_pre * p.w1.transpose();
  if (dp) {
    dp->w1 += c.xn.transpose() * dh_pre;
    dp->b1.row(0) += dh_pre.colwise().sum();
  }
  Mat dx = layernorm_backward(dxn, p.ln_w, c.ln, dp ? &dp->ln_w : nullptr,
                              dp ? &dp->ln_b : nullptr);
  return dx + dy;
}

Mat block_forward(const BlockP& b, int heads, const Mat& x, BlockCache* cache) {
  if (!cache) {
    Mat mid = attn_forward(b.attn, heads, x, nullptr);
    return ffn_forward(b.ffn, mid, nullptr);
  }
  cache->mid = attn_forward(b.attn, heads, x, &cache->attn);
  return ffn_forward(b.ffn, cache->mid, &cache->ffn);
}

Mat block_backward_input(const BlockP& b, int heads, const BlockCache& c, const Mat& dy) {
  Mat dmid = ffn_backward(b.ffn, c.ffn, dy, nullptr);
  return attn_backward(b.attn, heads, c.attn, dmid, nullptr);
}

namespace {
void fill_fan_in(Rng& rng, Mat& m) {
  fill_normal(rng, m, 1.0 / std::sqrt(double(m.rows())));
}
}  // namespace

void init_attn(Rng& rng, AttnP& p, int f, bool zero_out_proj) {
  p.ln_w = Mat::Ones(1, f);
  p.ln_b = Mat::Zero(1, f);
  p.wq.resize(f, f);
  p.wk.resize(f, f);
  p.wv.resize(f, f);
  p.wo.resize(f, f);
  fill_fan_in(rng, p.wq);
  fill_fan_in(rng, p.wk);
  fill_fan_in(rng, p.wv);
  if (zero_out_proj)
    p.wo.setZero();
  else
    fill_fan_in(rng, p.wo);
  p.bq = Mat::Zero(1, f);
  p.bk = Mat::Zero(1, f);
  p.bv = Mat::Zero(1, f);
  p.bo = Mat::Zero(1, f);
}

void init_ffn(Rng& rng, FfnP& p, int f) {
  p.ln_w = Mat::Ones(1, f);
  p.ln_b = Mat::Zero(1, f);
  p.w1.resize(f, 4 * f);
  p.w2.resize(4 * f, f);
  fill_fan_in(rng, p.w1);
  fill_fan_in(rng, p.w2);
  p.b1 = Mat::Zero(1, 4 * f);
  p.b2 = Mat::Zero(1, f);
}

void collect_attn(const std::string& prefix, AttnP& value, AttnP& grad, ParamList& out) {
  out.push_back({prefix + ".ln_w", &value.ln_w, &grad.ln_w});
  out.push_back({prefix + ".ln_b", &value.ln_b, &grad.ln_b});
  out.push_back({prefix + ".wq", &value.wq, &grad.wq});
  out.push_back({prefix + ".wk", &value.wk, &grad.wk});
  out.push_back({prefix + ".wv", &value.wv, &grad.wv});
  out.push_back({prefix + ".wo", &value.wo, &grad.wo});
  out.push_back({prefix + ".bq", &value.bq, &grad.bq});
  out.push_back({prefix + ".bk", &value.bk, &grad.bk});
  out.push_back({prefix + ".bv", &value.bv, &grad.bv});
  out.push_back({prefix + ".bo", &value.bo, &grad.bo});
}

std::int64_t param_count(const ParamList& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.value->size();
  return n;
}

void zero_grads(const ParamList& params) {
  for (const auto& p : params) p.grad->setZero();
}

double global_grad_norm(const ParamList& params) {
  double sq = 0.0;
  for (const auto& p : params) sq += p.grad->squaredNorm();
  return std::sqrt(sq);
}

std::uint64_t hash_attn(const AttnP& p, std::uint64_t h) {
  h = hash_matrix(p.ln_w, h);
  h = hash_matrix(p.ln_b, h);
  h = hash_matrix(p.wq, h);
  h = hash_matrix(p.wk, h);
  h = hash_matrix(p.wv, h);
  h = hash_matrix(p.wo, h);
  h = hash_matrix(p.bq, h);
  h = hash_matrix(p.bk, h);
  h = hash_matrix(p.bv, h);
  h = hash_matrix(p.bo, h);
  return h;
}

std::uint64_t hash_ffn(const FfnP& p, std::uint64_t h) {
  h = hash_matrix(p.ln_w, h);
  h = hash_matrix(p.ln_b, h);
  h = hash_matrix(p.w1, h);
  h = hash_matrix(p.b1, h);
  h = hash_matrix(p.w2, h);
  h = hash_matrix(p.b2, h);
  return h;
}

}  // namespace medbridge
