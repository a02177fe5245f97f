#include "medbridge/model.hpp"

#include <cmath>

namespace medbridge {

void ModelConfig::validate() const {
  require(num_queries >= 1, ErrKind::config, "num_queries must be at least 1");
  require(alpha >= 0.0 && alpha <= 1.0, ErrKind::config, "alpha must be in [0,1]");
  require(fuse_dim >= 1, ErrKind::config, "fuse_dim must be positive");
  require(cva_heads >= 1, ErrKind::config, "cva_heads must be positive");
  require(scale > 0.0, ErrKind::config, "scale must be positive");
  require(lambda_report >= 0.0, ErrKind::config, "lambda_report must be nonnegative");
}

AdaptationModel::AdaptationModel(std::vector<VisionBackbone> backbones, TextEncoder text_encoder,
                                 const ModelConfig& cfg, std::uint64_t seed)
    : text_(std::move(text_encoder)), pathway_(text_), cfg_(cfg) {
  cfg_.validate();
  require(!backbones.empty(), ErrKind::config, "need at least one expert");
  experts_.reserve(backbones.size());
  for (auto& bb : backbones) {
    const int f = bb.spec().embed_dim;
    require(f % cfg_.cva_heads == 0, ErrKind::config,
            "cva_heads must divide the expert width (expert '" + bb.spec().expert_id + "')");
    ExpertAdapter ex{std::move(bb), {}, {}, {}, {}};
    Rng rng(mix_seed(seed, "adapter." + ex.backbone.spec().expert_id));
    ex.bank.expert_id = ex.backbone.spec().expert_id;
    ex.bank.init(rng, cfg_.num_queries, ex.backbone);
    ex.cva_frozen.init(rng, f, cfg_.cva_heads);
    ex.cva_query.init(rng, f, cfg_.cva_heads);
    ex.proj.init(rng, f, cfg_.fuse_dim);
    experts_.push_back(std::move(ex));
  }
  gate_.init(int(experts_.size()) * cfg_.fuse_dim, int(experts_.size()));
  Rng trng(mix_seed(seed, "text_proj"));
  text_proj_.init(trng, text_.spec().embed_dim, cfg_.fuse_dim);
}

Vec AdaptationModel::encode_record(const std::vector<Image>& views, VisionTrace& t,
                                   bool with_grad) const {
  require(!views.empty(), ErrKind::precondition, "record has no views");
  const int K = int(experts_.size());
  const int N = int(views.size());
  t.experts.assign(std::size_t(K), {});
  std::vector<Vec> candidates(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    const ExpertAdapter& ex = experts_[std::size_t(k)];
    VisionTrace::PerExpert& te = t.experts[std::size_t(k)];
    const int f = ex.backbone.spec().embed_dim;

    std::vector<FrozenTokens> prefix;
    prefix.reserve(std::size_t(N));
    for (const Image& view : views) prefix.push_back(ex.backbone.run_prefix(view));
    te.enc = inject_and_encode(ex.backbone, prefix, ex.bank, with_grad);

    te.stack_frozen.resize(N, f);
    te.stack_query.resize(N, f);
    te.red_frozen.resize(std::size_t(N));
    te.red_query.resize(std::size_t(N));
    for (int v = 0; v < N; ++v) {
      const SuffixOut& out = te.enc[std::size_t(v)].out;
      te.stack_frozen.row(v) =
          reduce_tokens(out.frozen, cfg_.frozen_reduce,
                        with_grad ? &te.red_frozen[std::size_t(v)] : nullptr)
              .transpose();
      te.stack_query.row(v) = reduce_tokens(out.query, cfg_.query_reduce,
                                            with_grad ? &te.red_query[std::size_t(v)] : nullptr)
                                  .transpose();
    }

    te.m_bar = aggregate_views(te.stack_frozen, ex.cva_frozen, with_grad ? &te.agg_frozen : nullptr);
    te.q_bar = aggregate_views(te.stack_query, ex.cva_query, with_grad ? &te.agg_query : nullptr);
    te.mixed = mix(te.m_bar, te.q_bar, MixConfig{cfg_.alpha});
    te.cand_proj = ex.proj.apply(te.mixed);

    if (cfg_.gate_source == GateSource::raw) {
      std::vector<Mat> query_blocks;
      query_blocks.reserve(std::size_t(N));
      for (int v = 0; v < N; ++v) query_blocks.push_back(te.enc[std::size_t(v)].out.query);
      te.pooled = pool_query_outputs(query_blocks);
    } else {
      te.pooled = te.q_bar;
    }
    te.pooled_proj = ex.proj.apply(te.pooled);
    candidates[std::size_t(k)] = te.cand_proj;
  }

  t.gate_input.resize(Eigen::Index(K) * cfg_.fuse_dim);
  for (int k = 0; k < K; ++k)
    t.gate_input.segment(Eigen::Index(k) * cfg_.fuse_dim, cfg_.fuse_dim) =
        t.experts[std::size_t(k)].pooled_proj;
  t.gate_probs = gate(t.gate_input, gate_);
  return fuse(t.gate_probs, candidates);
}

void AdaptationModel::encode_record_backward(const VisionTrace& t, const Vec& dfused) {
  const int K = int(experts_.size());
  require(int(t.experts.size()) == K, ErrKind::state, "trace does not match the model");

  Vec dgate(K);
  for (int k = 0; k < K; ++k) dgate[k] = t.experts[std::size_t(k)].cand_proj.dot(dfused);
  Vec dgate_input = gate_backward(t.gate_input, gate_, t.gate_probs, dgate, gate_.gw, gate_.gb);

  for (int k = 0; k < K; ++k) {
    ExpertAdapter& ex = experts_[std::size_t(k)];
    const VisionTrace::PerExpert& te = t.experts[std::size_t(k)];
    const int f = ex.backbone.spec().embed_dim;
    const int N = int(te.enc.size());
    const int Q = ex.bank.num_queries();

    Vec dcand = t.gate_probs[k] * dfused;
    Vec dmixed = ex.proj.backward(te.mixed, dcand);
    Vec dpooled =
        ex.proj.backward(te.pooled, dgate_input.segment(Eigen::Index(k) * cfg_.fuse_dim, cfg_.fuse_dim));

    Vec dm = cfg_.alpha * dmixed;
    Vec dq = (1.0 - cfg_.alpha) * dmixed;
    if (cfg_.gate_source == GateSource::aggregated) dq += dpooled;

    Mat dstack_frozen = aggregate_views_backward(ex.cva_frozen, te.agg_frozen, dm);
    Mat dstack_query = aggregate_views_backward(ex.cva_query, te.agg_query, dq);

    // In raw gate mode the pooled vector is the mean over every query token
    // of every view, so each token row receives an equal share.
    Vec pool_share;
    if (cfg_.gate_source == GateSource::raw) pool_share = dpooled / double(N * Q);

    for (int v = 0; v < N; ++v) {
      Mat dfrozen = reduce_tokens_backward(te.red_frozen[std::size_t(v)], f,
                                           dstack_frozen.row(v).transpose());
      Mat dquery =
          reduce_tokens_backward(te.red_query[std::size_t(v)], f, dstack_query.row(v).transpose());
      if (cfg_.gate_source == GateSource::raw) dquery.rowwise() += pool_share.transpose();
      Mat djoint = ex.backbone.suffix_backward(te.enc[std::size_t(v)].cache, dfrozen, dquery);
      ex.bank.grad += djoint.bottomRows(Q);
    }
  }
}

Mat AdaptationModel::label_eot(const LabelSpace& labels) { return pathway_.label_embeddings(labels); }

Mat AdaptationModel::project_rows(const Mat& eot) const {
  Mat z(eot.rows(), cfg_.fuse_dim);
  for (Eigen::Index l = 0; l < eot.rows(); ++l)
    z.row(l) = text_proj_.apply(eot.row(l).transpose()).transpose();
  return z;
}

void AdaptationModel::project_rows_backward(const Mat& eot, const Mat& dz) {
  require(eot.rows() == dz.rows(), ErrKind::shape, "text gradient shape mismatch");
  for (Eigen::Index l = 0; l < eot.rows(); ++l)
    text_proj_.backward(eot.row(l).transpose(), dz.row(l).transpose());
}

const Vec& AdaptationModel::report_eot(const std::string& report) {
  return pathway_.eot_embedding(report);
}

BatchResult AdaptationModel::process_batch(const std::vector<RecordInput>& batch,
                                           const LabelSpace& labels, bool with_grad) {
  require(!batch.empty(), ErrKind::precondition, "empty batch");
  const int B = int(batch.size());
  const int L = labels.size();
  const int K = int(experts_.size());
  const bool use_reports = cfg_.lambda_report != 0.0;

  Mat eot = label_eot(labels);
  Mat z = project_rows(eot);
  Mat dz;
  if (with_grad) dz = Mat::Zero(z.rows(), z.cols());

  int report_count = 0;
  if (use_reports) {
    for (const RecordInput& rec : batch)
      if (rec.report != nullptr && !rec.report->empty()) ++report_count;
  }

  BatchResult r;
  r.scores.resize(B, L);
  r.gate_mean = Vec::Zero(K);
  double image_sum = 0.0;
  double report_sum = 0.0;

  for (int i = 0; i < B; ++i) {
    const RecordInput& rec = batch[std::size_t(i)];
    require(rec.views != nullptr && rec.labels != nullptr, ErrKind::precondition,
            "batch record is incomplete");
    require(int(rec.labels->size()) == L, ErrKind::shape, "record label arity mismatch");

    VisionTrace trace;
    Vec v = encode_record(*rec.views, trace, with_grad);
    Vec s = similarity_logits(v, z, cfg_.scale);
    r.scores.row(i) = s.transpose();
    r.gate_mean += trace.gate_probs;
    image_sum += multilabel_bce(s, *rec.labels);

    if (with_grad) {
      Vec ds = multilabel_bce_grad(s, *rec.labels) / double(B);
      Vec dv = Vec::Zero(cfg_.fuse_dim);
      similarity_backward(v, z, cfg_.scale, ds, dv, dz);
      encode_record_backward(trace, dv);
    }

    if (use_reports && rec.report != nullptr && !rec.report->empty()) {
      const Vec& er = report_eot(*rec.report);
      Vec zr = text_proj_.apply(er);
      Vec sr = similarity_logits(zr, z, cfg_.scale);
      report_sum += multilabel_bce(sr, *rec.labels);
      if (with_grad) {
        Vec dsr =
            cfg_.lambda_report * multilabel_bce_grad(sr, *rec.labels) / double(report_count);
        Vec dzr = Vec::Zero(cfg_.fuse_dim);
        similarity_backward(zr, z, cfg_.scale, dsr, dzr, dz);
        text_proj_.backward(er, dzr);
      }
    }
  }

  if (with_grad) project_rows_backward(eot, dz);

  r.image_loss = image_sum / double(B);
  r.report_loss = report_count > 0 ? report_sum / double(report_count) : 0.0;
  r.total = r.image_loss + cfg_.lambda_report * r.report_loss;
  r.gate_mean /= double(B);
  return r;
}

ParamList AdaptationModel::trainable() {
  ParamList out;
  for (auto& ex : experts_) {
    const std::string p = "expert." + ex.backbone.spec().expert_id + ".";
    out.push_back({p + "queries", &ex.bank.queries, &ex.bank.grad});
    collect_attn(p + "cva_frozen", ex.cva_frozen.p, ex.cva_frozen.g, out);
    collect_attn(p + "cva_query", ex.cva_query.p, ex.cva_query.g, out);
    out.push_back({p + "proj_w", &ex.proj.w, &ex.proj.gw});
    out.push_back({p + "proj_b", &ex.proj.b, &ex.proj.gb});
  }
  out.push_back({"gate.w", &gate_.w, &gate_.gw});
  out.push_back({"gate.b", &gate_.b, &gate_.gb});
  out.push_back({"text_proj.w", &text_proj_.w, &text_proj_.gw});
  out.push_back({"text_proj.b", &text_proj_.b, &text_proj_.gb});
  return out;
}

std::int64_t AdaptationModel::trainable_count() { return param_count(trainable()); }

std::int64_t AdaptationModel::total_count() const {
  std::int64_t n = text_.param_count();
  for (const auto& ex : experts_) n += ex.backbone.param_count();
  // Recount the trainable side without the non-const trainable() accessor.
  for (const auto& ex : experts_) {
    n += ex.bank.queries.size();
    n += ex.proj.w.size() + ex.proj.b.size();
    for (const AttnP* a : {&ex.cva_frozen.p, &ex.cva_query.p})
      n += a->ln_w.size() + a->ln_b.size() + a->wq.size() + a->wk.size() + a->wv.size() +
           a->wo.size() + a->bq.size() + a->bk.size() + a->bv.size() + a->bo.size();
  }
  n += gate_.w.size() + gate_.b.size();
  n += text_proj_.w.size() + text_proj_.b.size();
  return n;
}

std::uint64_t AdaptationModel::frozen_hash() const {
  std::uint64_t h = text_.param_hash();
  for (const auto& ex : experts_) {
    std::uint64_t eh = ex.backbone.param_hash();
    h = fnv1a64(&eh, sizeof eh, h);
  }
  return h;
}

std::vector<std::uint64_t> AdaptationModel::expert_hashes() const {
  std::vector<std::uint64_t> out;
  out.reserve(experts_.size());
  for (const auto& ex : experts_) out.push_back(ex.backbone.param_hash());
  return out;
}

std::uint64_t AdaptationModel::trainable_hash() {
  std::uint64_t h = 1469598103934665603ull;
  for (const ParamRef& p : trainable()) {
    h = fnv1a64(p.name.data(), p.name.size(), h);
    h = hash_matrix(*p.value, h);
  }
  return h;
}

void AdaptationModel::export_trainable(Archive& a) {
  for (const ParamRef& p : trainable()) a.add(p.name, *p.value);
}

void AdaptationModel::import_trainable(const Archive& a) {
  ParamList params = trainable();
  require(a.tensors.size() == params.size(), ErrKind::checkpoint,
          "checkpoint holds " + std::to_string(a.tensors.size()) + " tensors, model expects " +
              std::to_string(params.size()));
  for (const ParamRef& p : params) {
    const Mat* t = a.find(p.name);
    if (t == nullptr) fail(ErrKind::checkpoint, "checkpoint is missing tensor '" + p.name + "'");
    require(t->rows() == p.value->rows() && t->cols() == p.value->cols(), ErrKind::checkpoint,
            "tensor '" + p.name + "' has the wrong shape");
    *p.value = *t;
  }
}

}  // namespace medbridge
