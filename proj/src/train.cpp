#include "medbridge/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace medbridge {

using nlohmann::json;

void AdamW::step(const ParamList& params) {
  if (slots.empty()) {
    slots.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      slots[i].m = Mat::Zero(params[i].value->rows(), params[i].value->cols());
      slots[i].v = Mat::Zero(params[i].value->rows(), params[i].value->cols());
    }
  }
  require(slots.size() == params.size(), ErrKind::state, "optimizer does not match the model");
  ++steps;
  const double bc1 = 1.0 - std::pow(beta1, double(steps));
  const double bc2 = 1.0 - std::pow(beta2, double(steps));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat& value = *params[i].value;
    const Mat& g = *params[i].grad;
    Slot& s = slots[i];
    // Vector-shaped parameters (biases, layernorm gains) are not decayed.
    if (value.rows() > 1 && value.cols() > 1) value *= (1.0 - learning_rate * weight_decay);
    s.m = beta1 * s.m + (1.0 - beta1) * g;
    s.v = (beta2 * s.v.array() + (1.0 - beta2) * g.array().square()).matrix();
    value.array() -=
        learning_rate * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + eps);
  }
}

ViewProvider::ViewProvider(FocalConfig focal, std::size_t budget_bytes)
    : focal_(focal), budget_(budget_bytes) {
  focal_.validate();
}

namespace {

std::size_t views_bytes(const std::vector<Image>& views) {
  std::size_t n = 0;
  for (const Image& v : views) n += v.data.size() * sizeof(float) + sizeof(Image);
  return n;
}

}  // namespace

const std::vector<Image>& ViewProvider::views(const ImageRecord& rec, std::size_t record_index,
                                              std::vector<Image>& fallback) {
  auto it = cache_.find(record_index);
  if (it != cache_.end()) return it->second;

  FocalConfig cfg = focal_;
  cfg.rng_seed = mix_seed(focal_.rng_seed, "record", std::uint64_t(record_index));
  Image image = decode_image(rec.image_path);
  ViewSet set = sample_views(image, cfg);

  const std::size_t cost = views_bytes(set.views);
  if (used_ + cost <= budget_) {
    used_ += cost;
    auto [pos, inserted] = cache_.emplace(record_index, std::move(set.views));
    (void)inserted;
    return pos->second;
  }
  fallback = std::move(set.views);
  return fallback;
}

namespace {

constexpr std::size_t kTrainViewBudget = std::size_t(2560) * 1024 * 1024;
constexpr std::size_t kEvalViewBudget = std::size_t(768) * 1024 * 1024;

struct BatchBuffers {
  std::vector<std::vector<Image>> fallback;
  std::vector<RecordInput> inputs;
};

// Assembles RecordInputs for the records named by `order[start..start+count)`.
void fill_batch(BatchBuffers& buf, const Dataset& ds, ViewProvider& provider,
                const std::vector<std::size_t>& order, std::size_t start, std::size_t count,
                bool use_reports) {
  buf.inputs.clear();
  buf.fallback.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t idx = order[start + i];
    const ImageRecord& rec = ds.records[idx];
    RecordInput in;
    in.views = &provider.views(rec, idx, buf.fallback[i]);
    in.labels = &rec.labels;
    in.report = (use_reports && rec.has_report) ? &rec.report : nullptr;
    buf.inputs.push_back(in);
  }
}

std::vector<Mat> snapshot_params(const ParamList& params) {
  std::vector<Mat> out;
  out.reserve(params.size());
  for (const ParamRef& p : params) out.push_back(*p.value);
  return out;
}

void restore_params(const ParamList& params, const std::vector<Mat>& snap) {
  require(snap.size() == params.size(), ErrKind::state, "parameter snapshot mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) *params[i].value = snap[i];
}

std::string hash_to_hex(std::uint64_t h) { return hash_hex(h); }

}  // namespace

std::vector<std::size_t> fraction_indices(std::size_t n, double fraction, std::uint64_t seed) {
  require(fraction > 0.0 && fraction <= 1.0, ErrKind::config, "data_fraction must be in (0,1]");
  require(n > 0, ErrKind::data, "no records to subsample");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  Rng rng(mix_seed(seed, "fraction"));
  rng.shuffle(idx);
  std::size_t count = std::size_t(std::llround(fraction * double(n)));
  count = std::clamp<std::size_t>(count, 1, n);
  idx.resize(count);
  return idx;
}

MetricsReport evaluate_model(AdaptationModel& model, const Dataset& ds, ViewProvider& provider,
                             int batch_size) {
  require(!ds.records.empty(), ErrKind::data, "evaluation manifest has no records");
  require(batch_size >= 1, ErrKind::config, "batch_size must be at least 1");
  const std::size_t n = ds.records.size();
  const int L = ds.labels.size();
  const int K = model.num_experts();

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));

  Mat scores(Eigen::Index(n), L);
  Vec gate_sum = Vec::Zero(K);
  std::vector<std::vector<int>> labels;
  labels.reserve(n);
  for (const auto& rec : ds.records) labels.push_back(rec.labels);

  BatchBuffers buf;
  for (std::size_t start = 0; start < n; start += std::size_t(batch_size)) {
    const std::size_t count = std::min(std::size_t(batch_size), n - start);
    fill_batch(buf, ds, provider, order, start, count, false);
    BatchResult r = model.process_batch(buf.inputs, ds.labels, false);
    scores.middleRows(Eigen::Index(start), Eigen::Index(count)) = r.scores;
    gate_sum += r.gate_mean * double(count);
  }

  std::vector<std::string> names = ds.labels.class_names;
  MetricsReport report = compute_metrics(scores, labels, names);
  report.gate_mean.assign(K, 0.0);
  report.gate_names.clear();
  for (int k = 0; k < K; ++k) {
    report.gate_mean[std::size_t(k)] = gate_sum[k] / double(n);
    report.gate_names.push_back(model.expert(k).backbone.spec().expert_id);
  }
  return report;
}

TrainResult train_adapter(AdaptationModel& model, const RunConfig& cfg, const Dataset& train_ds,
                          const Dataset& val_ds, ViewProvider& train_views,
                          ViewProvider& val_views, std::ostream* step_log) {
  require(!train_ds.records.empty(), ErrKind::data, "training manifest has no records");
  require(!val_ds.records.empty(), ErrKind::data, "validation manifest has no records");
  require(train_ds.labels.class_names == val_ds.labels.class_names, ErrKind::data,
          "training and validation label spaces differ");

  const TrainConfig& tc = cfg.train;
  std::vector<std::size_t> subset =
      fraction_indices(train_ds.records.size(), tc.data_fraction, tc.seed);

  AdamW opt;
  opt.learning_rate = tc.learning_rate;
  opt.weight_decay = tc.weight_decay;
  ParamList params = model.trainable();
  const bool use_reports = cfg.model.lambda_report != 0.0;

  TrainResult result;
  result.train_records = int(subset.size());
  double best_auc = -1.0;
  std::vector<Mat> best_snapshot;

  BatchBuffers buf;
  std::int64_t global_step = 0;
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::vector<std::size_t> order = subset;
    Rng erng(mix_seed(tc.seed, "epoch", std::uint64_t(epoch)));
    erng.shuffle(order);

    double loss_sum = 0.0;
    std::int64_t steps_this_epoch = 0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(tc.batch_size)) {
      const std::size_t count = std::min(std::size_t(tc.batch_size), order.size() - start);
      fill_batch(buf, train_ds, train_views, order, start, count, use_reports);
      zero_grads(params);
      BatchResult r = model.process_batch(buf.inputs, train_ds.labels, true);
      ++steps_this_epoch;
      ++global_step;
      if (!std::isfinite(r.total))
        fail(ErrKind::numeric, "non-finite loss at epoch " + std::to_string(epoch) + " step " +
                                   std::to_string(steps_this_epoch) + " (first record '" +
                                   train_ds.records[order[start]].id + "')");
      double gn = global_grad_norm(params);
      if (tc.clip_norm > 0.0 && gn > tc.clip_norm) {
        const double s = tc.clip_norm / gn;
        for (const ParamRef& p : params) *p.grad *= s;
      }
      opt.step(params);
      loss_sum += r.total;
      if (step_log != nullptr) {
        json line = {{"epoch", epoch},
                     {"step", global_step},
                     {"loss", r.total},
                     {"image_loss", r.image_loss},
                     {"report_loss", r.report_loss},
                     {"grad_norm", gn},
                     {"lr", tc.learning_rate}};
        *step_log << line.dump() << "\n";
      }
    }
    result.epoch_mean_loss.push_back(loss_sum / double(steps_this_epoch));

    MetricsReport val = evaluate_model(model, val_ds, val_views, tc.batch_size);
    result.val_reports.push_back(val);
    if (val.macro_auc > best_auc) {
      best_auc = val.macro_auc;
      result.best_epoch = epoch;
      result.best_val = val;
      best_snapshot = snapshot_params(params);
    }
  }

  restore_params(params, best_snapshot);
  return result;
}

void save_checkpoint(AdaptationModel& model, const RunConfig& cfg, const TrainResult& result,
                     const std::string& path) {
  Archive a;
  json hashes = json::object();
  for (int k = 0; k < model.num_experts(); ++k)
    hashes[model.expert(k).backbone.spec().expert_id] =
        hash_to_hex(model.expert(k).backbone.param_hash());
  a.meta = {{"format", "medbridge.checkpoint"},
            {"version", 1},
            {"config", config_to_json(cfg)},
            {"expert_hashes", hashes},
            {"text_hash", hash_to_hex(model.text_encoder().param_hash())},
            {"best_epoch", result.best_epoch},
            {"best_val_macro_auc", result.best_val.macro_auc}};
  model.export_trainable(a);
  save_archive(a, path, "f64");
}

namespace {

void verify_hashes(AdaptationModel& model, const json& meta, const std::string& path) {
  try {
    const json& hashes = meta.at("expert_hashes");
    for (int k = 0; k < model.num_experts(); ++k) {
      const std::string id = model.expert(k).backbone.spec().expert_id;
      if (!hashes.contains(id))
        fail(ErrKind::checkpoint, "checkpoint '" + path + "' lacks expert '" + id + "'");
      if (hashes.at(id).get<std::string>() !=
          hash_to_hex(model.expert(k).backbone.param_hash()))
        fail(ErrKind::checkpoint,
             "checkpoint '" + path + "' was trained against a different expert '" + id + "'");
    }
    if (meta.at("text_hash").get<std::string>() !=
        hash_to_hex(model.text_encoder().param_hash()))
      fail(ErrKind::checkpoint,
           "checkpoint '" + path + "' was trained against a different text encoder");
  } catch (const json::exception& e) {
    fail(ErrKind::checkpoint, "checkpoint '" + path + "' has malformed metadata: " + e.what());
  }
}

}  // namespace

LoadedCheckpoint load_checkpoint(const std::string& path) {
  Archive a = load_archive(path);
  LoadedCheckpoint out;
  out.meta = a.meta;
  try {
    require(a.meta.at("format").get<std::string>() == "medbridge.checkpoint", ErrKind::checkpoint,
            "'" + path + "' is not a checkpoint");
    out.cfg = config_from_json(a.meta.at("config"));
  } catch (const json::exception& e) {
    fail(ErrKind::checkpoint, "checkpoint '" + path + "' has malformed metadata: " + e.what());
  }
  out.model = build_model(out.cfg);
  verify_hashes(*out.model, a.meta, path);
  out.model->import_trainable(a);
  return out;
}

void init_from_checkpoint(AdaptationModel& model, const std::string& path) {
  Archive a = load_archive(path);
  verify_hashes(model, a.meta, path);
  model.import_trainable(a);
}

std::vector<SweepRow> sweep(const RunConfig& cfg, const Dataset& train_ds, const Dataset& val_ds,
                            const Dataset& eval_ds, const std::vector<double>& fractions,
                            std::ostream* progress) {
  require(!fractions.empty(), ErrKind::usage, "sweep needs at least one fraction");
  for (double f : fractions)
    require(f > 0.0 && f <= 1.0, ErrKind::usage, "sweep fractions must be in (0,1]");

  ViewProvider train_views(cfg.focal, kTrainViewBudget);
  ViewProvider val_views(cfg.focal, kEvalViewBudget);
  ViewProvider eval_views(cfg.focal, kEvalViewBudget);

  std::vector<SweepRow> rows;
  for (double f : fractions) {
    RunConfig c = cfg;
    c.train.data_fraction = f;
    auto model = build_model(c);
    TrainResult r = train_adapter(*model, c, train_ds, val_ds, train_views, val_views, nullptr);
    SweepRow row;
    row.fraction = f;
    row.train_records = r.train_records;
    row.report = evaluate_model(*model, eval_ds, eval_views, c.train.batch_size);
    rows.push_back(std::move(row));
    if (progress != nullptr)
      *progress << "fraction " << f << ": macro_auc " << rows.back().report.macro_auc << "\n";
  }
  return rows;
}

namespace {

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    require(pos == s.size(), ErrKind::usage, what + " '" + s + "' is not a number");
    return v;
  } catch (const std::exception&) {
    fail(ErrKind::usage, what + " '" + s + "' is not a number");
  }
}

int parse_int(const std::string& s, const std::string& what) {
  const double v = parse_double(s, what);
  require(v == std::floor(v), ErrKind::usage, what + " '" + s + "' is not an integer");
  return int(v);
}

}  // namespace

std::vector<AblateRow> ablate(const RunConfig& cfg, const Dataset& train_ds,
                              const Dataset& val_ds, const Dataset& eval_ds,
                              const std::string& axis, const std::string& grid,
                              std::ostream* progress) {
  require(!grid.empty(), ErrKind::usage, "ablation grid is empty");

  std::vector<std::pair<std::string, RunConfig>> settings;
  if (axis == "views") {
    for (const std::string& s : split_list(grid, ',')) {
      RunConfig c = cfg;
      c.focal.num_views = parse_int(s, "views value");
      settings.emplace_back(s, c);
    }
  } else if (axis == "alpha") {
    for (const std::string& s : split_list(grid, ',')) {
      RunConfig c = cfg;
      c.model.alpha = parse_double(s, "alpha value");
      settings.emplace_back(s, c);
    }
  } else if (axis == "queries") {
    for (const std::string& s : split_list(grid, ',')) {
      RunConfig c = cfg;
      c.model.num_queries = parse_int(s, "queries value");
      settings.emplace_back(s, c);
    }
  } else if (axis == "experts") {
    for (const std::string& s : split_list(grid, ';')) {
      RunConfig c = cfg.with_experts(split_list(s, ','));
      settings.emplace_back(s, c);
    }
  } else {
    fail(ErrKind::usage, "unknown ablation axis '" + axis + "'");
  }

  std::vector<AblateRow> rows;
  for (auto& [name, c] : settings) {
    c.validate();
    ViewProvider train_views(c.focal, kTrainViewBudget);
    ViewProvider val_views(c.focal, kEvalViewBudget);
    ViewProvider eval_views(c.focal, kEvalViewBudget);
    auto model = build_model(c);
    TrainResult r = train_adapter(*model, c, train_ds, val_ds, train_views, val_views, nullptr);
    AblateRow row;
    row.setting = name;
    row.report = evaluate_model(*model, eval_ds, eval_views, c.train.batch_size);
    rows.push_back(std::move(row));
    if (progress != nullptr)
      *progress << axis << " " << name << ": macro_auc " << rows.back().report.macro_auc << "\n";
  }
  return rows;
}

}  // namespace medbridge
