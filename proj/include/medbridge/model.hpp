#pragma once

#include <memory>
#include <string>
#include <vector>

#include "medbridge/backbone.hpp"
#include "medbridge/metrics.hpp"
#include "medbridge/moe.hpp"
#include "medbridge/query_encoder.hpp"
#include "medbridge/text_pathway.hpp"

namespace medbridge {

// What the gate pools per expert: the raw per-view query outputs (default) or
// the already aggregated query candidate.
enum class GateSource { raw, aggregated };

struct ModelConfig {
  int num_queries = 16;
  double alpha = 0.7;
  int fuse_dim = 512;
  int cva_heads = 4;
  double scale = 1.0;          // cosine logit scale
  double lambda_report = 1.0;  // weight of the report auxiliary loss
  Reduce frozen_reduce = Reduce::class_token;
  Reduce query_reduce = Reduce::mean;
  GateSource gate_source = GateSource::raw;

  void validate() const;
};

// One frozen expert plus everything trainable that hangs off it.
struct ExpertAdapter {
  VisionBackbone backbone;
  QueryBank bank;
  CrossViewAttention cva_frozen;
  CrossViewAttention cva_query;
  FusionProj proj;
};

// Forward state of one record's vision pass, kept only when gradients are
// needed. Sized by (experts, views); freed as soon as the record is done.
struct VisionTrace {
  struct PerExpert {
    std::vector<ViewEncoding> enc;
    std::vector<ReduceCache> red_frozen, red_query;
    Mat stack_frozen, stack_query;  // N x f_k
    AggregateCache agg_frozen, agg_query;
    Vec m_bar, q_bar, mixed;  // f_k
    Vec pooled;               // f_k, gate source before projection
    Vec pooled_proj;          // f_fuse
    Vec cand_proj;            // f_fuse, projected mixed candidate
  };
  std::vector<PerExpert> experts;
  Vec gate_input;  // K * f_fuse
  Vec gate_probs;  // K
};

struct RecordInput {
  const std::vector<Image>* views = nullptr;
  const std::vector<int>* labels = nullptr;
  const std::string* report = nullptr;  // nullptr when the record has none
};

struct BatchResult {
  double total = 0.0;
  double image_loss = 0.0;
  double report_loss = 0.0;
  Mat scores;  // B x L cosine logits
  Vec gate_mean;  // mean gate weights over the batch, K
};

// The adapter stack: frozen experts and text encoder, plus the five trainable
// groups (query banks, cross-view attention, fusion projections, gate, text
// projection). Forward/backward are per record; batching is a mean on top.
class AdaptationModel {
 public:
  AdaptationModel(std::vector<VisionBackbone> backbones, TextEncoder text_encoder,
                  const ModelConfig& cfg, std::uint64_t seed);

  // The prompt cache points into this object, so it must stay put.
  AdaptationModel(const AdaptationModel&) = delete;
  AdaptationModel& operator=(const AdaptationModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  int num_experts() const { return int(experts_.size()); }
  const ExpertAdapter& expert(int k) const { return experts_[std::size_t(k)]; }
  const TextEncoder& text_encoder() const { return text_; }

  // Fused vision embedding for one record's views. The trace always receives
  // the light forward state (gate weights, candidates); with_grad additionally
  // keeps the suffix caches required by the backward pass.
  Vec encode_record(const std::vector<Image>& views, VisionTrace& trace, bool with_grad) const;
  // Backpropagates d(loss)/d(fused) into every trainable gradient buffer.
  void encode_record_backward(const VisionTrace& trace, const Vec& dfused);

  // Frozen EOT embeddings (rows, L x f_text) for the label prompts, and their
  // trainable projections (L x f_fuse). The EOT half is cached; the projected
  // half must be recomputed whenever the projection changes.
  Mat label_eot(const LabelSpace& labels);
  Mat project_rows(const Mat& eot) const;
  void project_rows_backward(const Mat& eot, const Mat& dz);

  const Vec& report_eot(const std::string& report);
  TextProjection& text_proj() { return text_proj_; }

  // Mean loss over a batch; with_grad accumulates into all trainable grads
  // (records are backpropagated one at a time to bound memory).
  BatchResult process_batch(const std::vector<RecordInput>& batch, const LabelSpace& labels,
                            bool with_grad);

  // Named references to exactly the trainable parameters, checkpoint order.
  ParamList trainable();
  std::int64_t trainable_count();
  std::int64_t total_count() const;

  std::uint64_t frozen_hash() const;          // all experts + text encoder
  std::vector<std::uint64_t> expert_hashes() const;
  std::uint64_t trainable_hash();

  void export_trainable(Archive& a);
  void import_trainable(const Archive& a);

 private:
  std::vector<ExpertAdapter> experts_;
  TextEncoder text_;
  TextPathway pathway_;
  GateParams gate_;
  TextProjection text_proj_;
  ModelConfig cfg_;
};

}  // namespace medbridge
