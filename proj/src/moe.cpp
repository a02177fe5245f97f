#include "medbridge/moe.hpp"

#include <cmath>

namespace medbridge {

void FusionProj::init(Rng& rng, int f_in, int f_fuse) {
  require(f_in > 0 && f_fuse > 0, ErrKind::config, "fusion projection: bad dimensions");
  w.resize(f_in, f_fuse);
  fill_normal(rng, w, 1.0 / std::sqrt(double(f_in)));
  b = Mat::Zero(1, f_fuse);
  gw = Mat::Zero(f_in, f_fuse);
  gb = Mat::Zero(1, f_fuse);
}

Vec FusionProj::backward(const Vec& x, const Vec& dy) {
  gw += x * dy.transpose();
  gb.row(0) += dy.transpose();
  return w * dy;
}

Vec pool_query_outputs(const std::vector<Mat>& per_view_query_tokens) {
  require(!per_view_query_tokens.empty(), ErrKind::precondition, "pool: no views");
  Vec acc = Vec::Zero(per_view_query_tokens.front().cols());
  double count = 0.0;
  for (const Mat& m : per_view_query_tokens) {
    require(m.cols() == acc.size(), ErrKind::shape, "pool: width mismatch across views");
    acc += m.colwise().sum().transpose();
    count += double(m.rows());
  }
  return acc / count;
}

void GateParams::init(int in_dim, int num_experts) {
  require(in_dim > 0 && num_experts > 0, ErrKind::config, "gate: bad dimensions");
  w = Mat::Zero(in_dim, num_experts);
  b = Mat::Zero(1, num_experts);
  gw = Mat::Zero(in_dim, num_experts);
  gb = Mat::Zero(1, num_experts);
}

Vec gate(const Vec& input, const GateParams& p) {
  require(input.size() == p.w.rows(), ErrKind::shape, "gate: input dimension mismatch");
  Vec logits = p.w.transpose() * input + p.b.row(0).transpose();
  require(logits.allFinite(), ErrKind::numeric, "gate: non-finite logits");
  return softmax_rows(logits.transpose()).transpose();
}

Vec gate_backward(const Vec& input, const GateParams& p, const Vec& probs, const Vec& dprobs,
                  Mat& gw, Mat& gb) {
  Vec dlogits =
      softmax_rows_backward(probs.transpose(), dprobs.transpose()).transpose();
  gw += input * dlogits.transpose();
  gb.row(0) += dlogits.transpose();
  return p.w * dlogits;
}

Vec fuse(const Vec& gate_weights, const std::vector<Vec>& class_tokens) {
  require(std::size_t(gate_weights.size()) == class_tokens.size(), ErrKind::shape,
          "fuse: one weight per expert required");
  require(!class_tokens.empty(), ErrKind::precondition, "fuse: no experts");
  Vec v = Vec::Zero(class_tokens.front().size());
  for (std::size_t k = 0; k < class_tokens.size(); ++k) {
    require(class_tokens[k].size() == v.size(), ErrKind::shape, "fuse: dimension mismatch");
    v += gate_weights[Eigen::Index(k)] * class_tokens[k];
  }
  return v;
}

}  // namespace medbridge
