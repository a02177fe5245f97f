#pragma once

#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "medbridge/config.hpp"
#include "medbridge/data.hpp"
#include "medbridge/model.hpp"

namespace medbridge {

// Adam with decoupled weight decay. Slots are allocated on first step and
// keyed by position in the parameter list, which is stable for a model.
struct AdamW {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  struct Slot {
    Mat m, v;
  };
  std::vector<Slot> slots;
  std::int64_t steps = 0;

  void step(const ParamList& params);
};

// Samples each record's views once and keeps them while the byte budget
// lasts, so epochs after the first skip the decode and resize work. View
// geometry depends only on (focal seed, record index), never on the epoch.
class ViewProvider {
 public:
  ViewProvider(FocalConfig focal, std::size_t budget_bytes);

  // Returns a reference either into the cache or into `fallback` (used when
  // the budget is exhausted), so batches can hold several records at once.
  const std::vector<Image>& views(const ImageRecord& rec, std::size_t record_index,
                                  std::vector<Image>& fallback);

  const FocalConfig& focal() const { return focal_; }
  std::size_t cached_records() const { return cache_.size(); }
  std::size_t cached_bytes() const { return used_; }

 private:
  FocalConfig focal_;
  std::size_t budget_ = 0;
  std::size_t used_ = 0;
  std::unordered_map<std::size_t, std::vector<Image>> cache_;
};

struct TrainResult {
  int best_epoch = 0;                  // 1-based
  MetricsReport best_val;
  std::vector<double> epoch_mean_loss; // mean total loss per epoch
  std::vector<MetricsReport> val_reports;
  int train_records = 0;               // after data_fraction subsampling
};

// Runs the full adaptation loop: seeded subsampling and shuffling, AdamW over
// the trainable parameters, per-epoch validation, selection of the best
// validation macro-AUC epoch. On return the model holds the selected epoch's
// parameters. step_log, when given, receives one JSON line per step. The
// providers are passed in so repeated runs over the same data reuse decoded
// views (view geometry is independent of the training seed).
TrainResult train_adapter(AdaptationModel& model, const RunConfig& cfg, const Dataset& train_ds,
                          const Dataset& val_ds, ViewProvider& train_views,
                          ViewProvider& val_views, std::ostream* step_log);

// Evaluation over a manifest in record order. Builds prompts from the
// dataset's own class names, so the label space may differ from training.
MetricsReport evaluate_model(AdaptationModel& model, const Dataset& ds, ViewProvider& provider,
                             int batch_size);

// Checkpoints hold the trainable tensors, the config snapshot, and identity
// hashes of every frozen tower.
void save_checkpoint(AdaptationModel& model, const RunConfig& cfg, const TrainResult& result,
                     const std::string& path);

struct LoadedCheckpoint {
  RunConfig cfg;
  std::unique_ptr<AdaptationModel> model;
  nlohmann::json meta;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// Replaces the model's trainable parameters with a checkpoint's, verifying
// that the frozen towers are identical. Used for continued adaptation.
void init_from_checkpoint(AdaptationModel& model, const std::string& path);

// Seeded nested subsample: the fraction-F subset is the first max(1,
// round(F*n)) indices of one shared permutation, so smaller fractions are
// subsets of larger ones.
std::vector<std::size_t> fraction_indices(std::size_t n, double fraction, std::uint64_t seed);

struct SweepRow {
  double fraction = 0.0;
  int train_records = 0;
  MetricsReport report;
};
std::vector<SweepRow> sweep(const RunConfig& cfg, const Dataset& train_ds, const Dataset& val_ds,
                            const Dataset& eval_ds, const std::vector<double>& fractions,
                            std::ostream* progress);

struct AblateRow {
  std::string setting;
  MetricsReport report;
};
// axis: views | alpha | queries | experts. The grid is comma-separated; the
// experts axis separates settings with ';' and experts within one setting
// with ',' ("A;A,B").
std::vector<AblateRow> ablate(const RunConfig& cfg, const Dataset& train_ds,
                              const Dataset& val_ds, const Dataset& eval_ds,
                              const std::string& axis, const std::string& grid,
                              std::ostream* progress);

}  // namespace medbridge
