#include "medbridge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

namespace medbridge {

Vec similarity_logits(const Vec& v, const Mat& z, double scale) {
  require(v.size() == z.cols(), ErrKind::shape, "similarity: dimension mismatch");
  require(scale > 0.0, ErrKind::precondition, "similarity: scale must be positive");
  double nv = v.norm() + kSimEps;
  Vec s(z.rows());
  for (Eigen::Index l = 0; l < z.rows(); ++l) {
    double nz = z.row(l).norm() + kSimEps;
    s[l] = scale * v.dot(z.row(l).transpose()) / (nv * nz);
  }
  return s;
}

void similarity_backward(const Vec& v, const Mat& z, double scale, const Vec& ds, Vec& dv,
                         Mat& dz) {
  double vn = v.norm();
  double nv = vn + kSimEps;
  double inv_vn = vn > 0.0 ? 1.0 / vn : 0.0;  // d|v|/dv = v/|v|; zero vector has zero dot anyway
  for (Eigen::Index l = 0; l < z.rows(); ++l) {
    Vec zl = z.row(l).transpose();
    double zn = zl.norm();
    double nz = zn + kSimEps;
    double inv_zn = zn > 0.0 ? 1.0 / zn : 0.0;
    double dot = v.dot(zl);
    double c = scale / (nv * nz);
    // s = scale * dot / (nv * nz)
    dv += ds[l] * (c * zl - (c * dot / nv) * inv_vn * v);
    dz.row(l) += (ds[l] * (c * v - (c * dot / nz) * inv_zn * zl)).transpose();
  }
}

double sigmoid(double s) {
  if (s >= 0.0) return 1.0 / (1.0 + std::exp(-s));
  double e = std::exp(s);
  return e / (1.0 + e);
}

double multilabel_bce(const Vec& s, const std::vector<int>& y) {
  require(std::size_t(s.size()) == y.size(), ErrKind::shape, "bce: label arity mismatch");
  require(s.size() > 0, ErrKind::precondition, "bce: empty logits");
  double total = 0.0;
  for (Eigen::Index l = 0; l < s.size(); ++l) {
    double sl = s[l];
    double yl = double(y[std::size_t(l)]);
    total += std::max(sl, 0.0) - sl * yl + std::log1p(std::exp(-std::abs(sl)));
  }
  return total / double(s.size());
}

Vec multilabel_bce_grad(const Vec& s, const std::vector<int>& y) {
  Vec g(s.size());
  for (Eigen::Index l = 0; l < s.size(); ++l)
    g[l] = (sigmoid(s[l]) - double(y[std::size_t(l)])) / double(s.size());
  return g;
}

double rank_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), ErrKind::shape, "auc: size mismatch");
  std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos = 0.0, neg = 0.0, pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    double avg_rank = 0.5 * double(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        pos += 1.0;
        pos_rank_sum += avg_rank;
      } else {
        neg += 1.0;
      }
    }
    i = j;
  }
  require(pos > 0.0 && neg > 0.0, ErrKind::precondition, "auc: class has a single label value");
  return (pos_rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

namespace {
struct Counts {
  long tp = 0, fp = 0, tn = 0, fn = 0;
};

Counts confusion(const std::vector<double>& scores, const std::vector<int>& labels, double thr) {
  Counts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    bool pred = scores[i] >= thr;
    if (pred && labels[i]) ++c.tp;
    else if (pred && !labels[i]) ++c.fp;
    else if (!pred && labels[i]) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double f1_of(const Counts& c) {
  double denom = double(2 * c.tp + c.fp + c.fn);
  return denom > 0.0 ? 2.0 * double(c.tp) / denom : 0.0;
}
}  // namespace

F1Result f1_threshold_search(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size() && !scores.empty(), ErrKind::precondition,
          "f1 search: empty or mismatched inputs");
  bool has_pos = false, has_neg = false;
  for (int l : labels) (l ? has_pos : has_neg) = true;
  require(has_pos && has_neg, ErrKind::precondition, "f1 search: class has a single label value");

  std::vector<double> uniq = scores;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

  std::vector<double> candidates;
  candidates.push_back(-std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i + 1 < uniq.size(); ++i)
    candidates.push_back(0.5 * (uniq[i] + uniq[i + 1]));
  candidates.push_back(std::numeric_limits<double>::infinity());

  F1Result best;
  bool first = true;
  for (double t : candidates) {  // ascending; ties keep the lower threshold
    double f1 = f1_of(confusion(scores, labels, t));
    if (first || f1 > best.f1) {
      best.threshold = t;
      best.f1 = f1;
      first = false;
    }
  }
  Counts c = confusion(scores, labels, best.threshold);
  best.acc = double(c.tp + c.tn) / double(scores.size());
  return best;
}

MetricsReport compute_metrics(const Mat& scores, const std::vector<std::vector<int>>& labels,
                              const std::vector<std::string>& class_names) {
  const std::size_t n = labels.size();
  const std::size_t L = class_names.size();
  require(std::size_t(scores.rows()) == n && std::size_t(scores.cols()) == L, ErrKind::shape,
          "metrics: scores shape mismatch");
  require(n > 0, ErrKind::precondition, "metrics: no records");

  MetricsReport rep;
  rep.per_class.resize(L);
  double sum_auc = 0, sum_f1 = 0, sum_acc = 0;
  int evaluable = 0;
  for (std::size_t l = 0; l < L; ++l) {
    ClassMetrics& cm = rep.per_class[l];
    cm.name = class_names[l];
    std::vector<double> s(n);
    std::vector<int> y(n);
    int pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      require(labels[i].size() == L, ErrKind::shape, "metrics: label arity mismatch");
      s[i] = scores(Eigen::Index(i), Eigen::Index(l));
      y[i] = labels[i][l];
      pos += y[i];
    }
    if (pos == 0 || std::size_t(pos) == n) {
      cm.skipped = true;
      continue;
    }
    cm.auc = 100.0 * rank_auc(s, y);
    F1Result f = f1_threshold_search(s, y);
    cm.f1 = 100.0 * f.f1;
    cm.acc = 100.0 * f.acc;
    cm.threshold = f.threshold;
    sum_auc += cm.auc;
    sum_f1 += cm.f1;
    sum_acc += cm.acc;
    ++evaluable;
  }
  if (evaluable == 0) fail(ErrKind::metrics, "no evaluable class");
  rep.macro_auc = sum_auc / evaluable;
  rep.macro_f1 = sum_f1 / evaluable;
  rep.macro_acc = sum_acc / evaluable;
  return rep;
}

namespace {
std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}
std::string raw(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

std::string MetricsReport::serialize() const {
  std::ostringstream out;
  out << "macro_auc: " << pct(macro_auc) << "\n";
  out << "macro_f1: " << pct(macro_f1) << "\n";
  out << "macro_acc: " << pct(macro_acc) << "\n";
  out << "classes: " << per_class.size() << "\n";
  std::string skipped;
  for (const auto& cm : per_class)
    if (cm.skipped) skipped += (skipped.empty() ? "" : ",") + cm.name;
  out << "skipped_classes: " << (skipped.empty() ? "-" : skipped) << "\n";
  if (!gate_mean.empty()) {
    out << "gate_mean:";
    for (std::size_t k = 0; k < gate_mean.size(); ++k)
      out << " " << (k < gate_names.size() ? gate_names[k] : std::to_string(k)) << "="
          << pct(100.0 * gate_mean[k]);
    out << "\n";
  }
  for (const auto& cm : per_class) {
    out << "[class " << cm.name << "]\n";
    if (cm.skipped) {
      out << "skipped: true\n";
      continue;
    }
    out << "auc: " << pct(cm.auc) << "\n";
    out << "f1: " << pct(cm.f1) << "\n";
    out << "acc: " << pct(cm.acc) << "\n";
    out << "threshold: " << raw(cm.threshold) << "\n";
  }
  return out.str();
}

}  // namespace medbridge
