#pragma once

#include <string>
#include <vector>

#include "medbridge/core.hpp"

namespace medbridge {

constexpr double kSimEps = 1e-8;

// Cosine-similarity logits: s_l = scale * (v . z_l) / ((|v|+eps)(|z_l|+eps)).
// z holds one class feature per row.
Vec similarity_logits(const Vec& v, const Mat& z, double scale);

// Accumulates d(loss)/dv into dv and d(loss)/dz into dz given upstream ds.
// Exact gradient of the guarded forward above.
void similarity_backward(const Vec& v, const Mat& z, double scale, const Vec& ds, Vec& dv,
                         Mat& dz);

// Numerically stable sigmoid.
double sigmoid(double s);

// Mean over classes of the stable binary cross-entropy
//   max(s,0) - s*y + log(1 + exp(-|s|)).
double multilabel_bce(const Vec& s, const std::vector<int>& y);
// d(bce)/ds = (sigmoid(s) - y) / L.
Vec multilabel_bce_grad(const Vec& s, const std::vector<int>& y);

// Mann-Whitney rank AUC with ties counted 0.5. Requires at least one positive
// and one negative.
double rank_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct F1Result {
  double threshold = 0.0;
  double f1 = 0.0;
  double acc = 0.0;
};

// Sweeps midpoints between consecutive sorted unique scores plus -inf/+inf
// sentinels, predicting positive at score >= threshold. Maximizes F1; equal
// F1 resolves to the lower threshold. ACC is computed at the chosen
// threshold. Requires at least one positive and one negative label.
F1Result f1_threshold_search(const std::vector<double>& scores, const std::vector<int>& labels);

struct ClassMetrics {
  std::string name;
  bool skipped = false;   // all-0 or all-1 labels in the eval set
  double auc = 0.0;       // percent
  double f1 = 0.0;        // percent
  double acc = 0.0;       // percent
  double threshold = 0.0; // raw logit scale
};

struct MetricsReport {
  double macro_auc = 0.0;  // percent, unweighted mean over non-skipped classes
  double macro_f1 = 0.0;
  double macro_acc = 0.0;
  std::vector<ClassMetrics> per_class;
  std::vector<double> gate_mean;          // optional, one entry per expert
  std::vector<std::string> gate_names;    // expert ids for gate_mean

  std::string serialize() const;
};

// scores: one row per record, one column per class; labels parallel.
// Classes with a single label value are skipped and listed; if every class is
// skipped this is a metrics error ("no evaluable class").
MetricsReport compute_metrics(const Mat& scores, const std::vector<std::vector<int>>& labels,
                              const std::vector<std::string>& class_names);

}  // namespace medbridge
