#include "medbridge/config.hpp"

#include <fstream>
#include <set>

namespace medbridge {

using nlohmann::json;

void TrainConfig::validate() const {
  require(learning_rate > 0.0, ErrKind::config, "learning_rate must be positive");
  require(batch_size >= 1, ErrKind::config, "batch_size must be at least 1");
  require(epochs >= 1, ErrKind::config, "epochs must be at least 1");
  require(weight_decay >= 0.0, ErrKind::config, "weight_decay must be nonnegative");
  require(data_fraction > 0.0 && data_fraction <= 1.0, ErrKind::config,
          "data_fraction must be in (0,1]");
}

void RunConfig::validate() const {
  require(!experts.empty(), ErrKind::config, "need at least one expert");
  std::set<std::string> ids;
  for (const auto& ex : experts) {
    require(!ex.id.empty(), ErrKind::config, "expert id must be non-empty");
    require(ids.insert(ex.id).second, ErrKind::config, "duplicate expert id '" + ex.id + "'");
    ex.spec.validate();
    require(ex.spec.input_resolution == focal.target_resolution, ErrKind::config,
            "expert '" + ex.id + "' resolution differs from focal target_resolution");
  }
  text.spec.validate();
  focal.validate();
  model.validate();
  train.validate();
}

RunConfig RunConfig::with_experts(const std::vector<std::string>& ids) const {
  require(!ids.empty(), ErrKind::usage, "expert subset is empty");
  RunConfig out = *this;
  out.experts.clear();
  for (const auto& ex : experts) {
    for (const auto& id : ids)
      if (ex.id == id) {
        out.experts.push_back(ex);
        break;
      }
  }
  require(out.experts.size() == ids.size(), ErrKind::usage,
          "expert subset names an unknown or duplicate expert");
  return out;
}

RunConfig default_config() {
  RunConfig cfg;
  ExpertConfig a;
  a.id = "A";
  a.seed = 101;
  a.spec.expert_id = "A";
  ExpertConfig b;
  b.id = "B";
  b.seed = 202;
  b.spec.expert_id = "B";
  cfg.experts = {a, b};
  return cfg;
}

namespace {

const char* focal_mode_name(FocalMode m) { return m == FocalMode::sliding ? "sliding" : "random"; }

FocalMode focal_mode_from(const std::string& s) {
  if (s == "sliding") return FocalMode::sliding;
  if (s == "random") return FocalMode::random;
  fail(ErrKind::config, "unknown focal mode '" + s + "'");
}

const char* reduce_name(Reduce r) {
  switch (r) {
    case Reduce::class_token: return "class_token";
    case Reduce::mean: return "mean";
    case Reduce::max: return "max";
  }
  return "mean";
}

Reduce reduce_from(const std::string& s) {
  if (s == "class_token") return Reduce::class_token;
  if (s == "mean") return Reduce::mean;
  if (s == "max") return Reduce::max;
  fail(ErrKind::config, "unknown reduction '" + s + "'");
}

const char* gate_source_name(GateSource g) {
  return g == GateSource::raw ? "raw" : "aggregated";
}

GateSource gate_source_from(const std::string& s) {
  if (s == "raw") return GateSource::raw;
  if (s == "aggregated") return GateSource::aggregated;
  fail(ErrKind::config, "unknown gate_source '" + s + "'");
}

// Typed readers so every config mistake surfaces as a config error naming the
// offending key rather than a JSON exception.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail(ErrKind::config, where_ + " must be an object");
  }
  ~Section() = default;

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        fail(ErrKind::config, "unknown key '" + where_ + "." + it.key() + "'");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      fail(ErrKind::config, "key '" + where_ + "." + key + "' has the wrong type");
    }
  }

  void get_enum(const std::string& key, std::string& out) { get(key, out); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

ExpertConfig expert_from_json(const json& j, int index) {
  ExpertConfig ex;
  ex.spec = BackboneSpec{};
  Section s(j, "experts." + std::to_string(index));
  s.get("id", ex.id);
  s.get("seed", ex.seed);
  s.get("weights", ex.weights);
  s.get("depth", ex.spec.depth);
  s.get("split", ex.spec.split);
  s.get("embed_dim", ex.spec.embed_dim);
  s.get("num_heads", ex.spec.num_heads);
  s.get("patch_size", ex.spec.patch_size);
  s.get("input_resolution", ex.spec.input_resolution);
  s.finish();
  ex.spec.expert_id = ex.id;
  return ex;
}

json expert_to_json(const ExpertConfig& ex) {
  json j;
  j["id"] = ex.id;
  j["seed"] = ex.seed;
  j["weights"] = ex.weights;
  j["depth"] = ex.spec.depth;
  j["split"] = ex.spec.split;
  j["embed_dim"] = ex.spec.embed_dim;
  j["num_heads"] = ex.spec.num_heads;
  j["patch_size"] = ex.spec.patch_size;
  j["input_resolution"] = ex.spec.input_resolution;
  return j;
}

}  // namespace

json config_to_json(const RunConfig& cfg) {
  json j;
  j["experts"] = json::array();
  for (const auto& ex : cfg.experts) j["experts"].push_back(expert_to_json(ex));
  j["text"] = {{"seed", cfg.text.seed},
               {"weights", cfg.text.weights},
               {"vocab_size", cfg.text.spec.vocab_size},
               {"depth", cfg.text.spec.depth},
               {"embed_dim", cfg.text.spec.embed_dim},
               {"num_heads", cfg.text.spec.num_heads},
               {"max_sequence_length", cfg.text.spec.max_sequence_length}};
  j["focal"] = {{"num_views", cfg.focal.num_views},
                {"crop_size", cfg.focal.crop_size},
                {"stride", cfg.focal.stride},
                {"mode", focal_mode_name(cfg.focal.mode)},
                {"target_resolution", cfg.focal.target_resolution},
                {"rng_seed", cfg.focal.rng_seed}};
  j["model"] = {{"num_queries", cfg.model.num_queries},
                {"alpha", cfg.model.alpha},
                {"fuse_dim", cfg.model.fuse_dim},
                {"cva_heads", cfg.model.cva_heads},
                {"scale", cfg.model.scale},
                {"lambda_report", cfg.model.lambda_report},
                {"frozen_reduce", reduce_name(cfg.model.frozen_reduce)},
                {"query_reduce", reduce_name(cfg.model.query_reduce)},
                {"gate_source", gate_source_name(cfg.model.gate_source)}};
  j["train"] = {{"learning_rate", cfg.train.learning_rate},
                {"batch_size", cfg.train.batch_size},
                {"epochs", cfg.train.epochs},
                {"weight_decay", cfg.train.weight_decay},
                {"clip_norm", cfg.train.clip_norm},
                {"data_fraction", cfg.train.data_fraction},
                {"seed", cfg.train.seed}};
  return j;
}

RunConfig config_from_json(const json& j) {
  RunConfig cfg = default_config();
  Section root(j, "config");
  if (root.has("experts")) {
    const json& arr = root.raw("experts");
    if (!arr.is_array() || arr.empty())
      fail(ErrKind::config, "'experts' must be a non-empty array");
    cfg.experts.clear();
    for (int i = 0; i < int(arr.size()); ++i)
      cfg.experts.push_back(expert_from_json(arr[std::size_t(i)], i));
  }
  if (root.has("text")) {
    Section s(root.raw("text"), "text");
    s.get("seed", cfg.text.seed);
    s.get("weights", cfg.text.weights);
    s.get("vocab_size", cfg.text.spec.vocab_size);
    s.get("depth", cfg.text.spec.depth);
    s.get("embed_dim", cfg.text.spec.embed_dim);
    s.get("num_heads", cfg.text.spec.num_heads);
    s.get("max_sequence_length", cfg.text.spec.max_sequence_length);
    s.finish();
  }
  if (root.has("focal")) {
    Section s(root.raw("focal"), "focal");
    s.get("num_views", cfg.focal.num_views);
    s.get("crop_size", cfg.focal.crop_size);
    s.get("stride", cfg.focal.stride);
    std::string mode = focal_mode_name(cfg.focal.mode);
    s.get_enum("mode", mode);
    cfg.focal.mode = focal_mode_from(mode);
    s.get("target_resolution", cfg.focal.target_resolution);
    s.get("rng_seed", cfg.focal.rng_seed);
    s.finish();
  }
  if (root.has("model")) {
    Section s(root.raw("model"), "model");
    s.get("num_queries", cfg.model.num_queries);
    s.get("alpha", cfg.model.alpha);
    s.get("fuse_dim", cfg.model.fuse_dim);
    s.get("cva_heads", cfg.model.cva_heads);
    s.get("scale", cfg.model.scale);
    s.get("lambda_report", cfg.model.lambda_report);
    std::string fr = reduce_name(cfg.model.frozen_reduce);
    std::string qr = reduce_name(cfg.model.query_reduce);
    std::string gs = gate_source_name(cfg.model.gate_source);
    s.get_enum("frozen_reduce", fr);
    s.get_enum("query_reduce", qr);
    s.get_enum("gate_source", gs);
    cfg.model.frozen_reduce = reduce_from(fr);
    cfg.model.query_reduce = reduce_from(qr);
    cfg.model.gate_source = gate_source_from(gs);
    s.finish();
  }
  if (root.has("train")) {
    Section s(root.raw("train"), "train");
    s.get("learning_rate", cfg.train.learning_rate);
    s.get("batch_size", cfg.train.batch_size);
    s.get("epochs", cfg.train.epochs);
    s.get("weight_decay", cfg.train.weight_decay);
    s.get("clip_norm", cfg.train.clip_norm);
    s.get("data_fraction", cfg.train.data_fraction);
    s.get("seed", cfg.train.seed);
    s.finish();
  }
  root.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrKind::io, "cannot open config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrKind::config, "config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

namespace {

// Collects dotted paths of every leaf in the default schema, for resolving
// unqualified override keys.
void collect_leaves(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it)
      collect_leaves(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
  } else if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i)
      collect_leaves(j[i], prefix + "." + std::to_string(i), out);
  } else {
    out.push_back(prefix);
  }
}

std::string leaf_name(const std::string& path) {
  auto pos = path.find_last_of('.');
  return pos == std::string::npos ? path : path.substr(pos + 1);
}

}  // namespace

void apply_override(json& cfg, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    fail(ErrKind::usage, "override '" + assignment + "' is not of the form key=value");
  std::string key = assignment.substr(0, eq);
  const std::string value_str = assignment.substr(eq + 1);

  if (key.find('.') == std::string::npos) {
    std::vector<std::string> leaves;
    collect_leaves(config_to_json(default_config()), "", leaves);
    std::vector<std::string> hits;
    for (const auto& leaf : leaves)
      if (leaf_name(leaf) == key && leaf.rfind("experts.", 0) != 0) hits.push_back(leaf);
    if (hits.empty()) fail(ErrKind::usage, "override key '" + key + "' is not in the schema");
    std::set<std::string> unique_hits(hits.begin(), hits.end());
    if (unique_hits.size() > 1)
      fail(ErrKind::usage, "override key '" + key + "' is ambiguous; qualify it (" +
                               *unique_hits.begin() + ", ...)");
    key = *unique_hits.begin();
  }

  json value;
  try {
    value = json::parse(value_str);
    if (value.is_object() || value.is_array())
      fail(ErrKind::usage, "override '" + key + "' must be a scalar");
  } catch (const json::exception&) {
    value = value_str;  // bare words are strings ("random", "mean")
  }

  json* node = &cfg;
  std::string walked;
  std::string part;
  std::string rest = key;
  while (!rest.empty()) {
    auto dot = rest.find('.');
    part = rest.substr(0, dot);
    rest = dot == std::string::npos ? "" : rest.substr(dot + 1);
    walked = walked.empty() ? part : walked + "." + part;
    const bool last = rest.empty();
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(part);
      } catch (const std::exception&) {
        fail(ErrKind::usage, "override path '" + walked + "' indexes an array without a number");
      }
      if (idx >= node->size())
        fail(ErrKind::usage, "override path '" + walked + "' is out of range");
      node = &(*node)[idx];
    } else {
      if (!node->is_object()) *node = json::object();
      node = &(*node)[part];
    }
    if (last) *node = value;
  }
}

std::uint64_t config_hash(const RunConfig& cfg) {
  const std::string s = config_to_json(cfg).dump();
  return fnv1a64(s);
}

std::unique_ptr<AdaptationModel> build_model(const RunConfig& cfg) {
  cfg.validate();
  std::vector<VisionBackbone> backbones;
  backbones.reserve(cfg.experts.size());
  for (const auto& ex : cfg.experts) {
    if (ex.weights.empty())
      backbones.push_back(VisionBackbone::synthetic(ex.spec, ex.seed));
    else
      backbones.push_back(VisionBackbone::from_file(ex.spec, ex.weights));
  }
  TextEncoder text = cfg.text.weights.empty()
                         ? TextEncoder::synthetic(cfg.text.spec, cfg.text.seed)
                         : TextEncoder::from_archive(cfg.text.spec, load_archive(cfg.text.weights));
  return std::make_unique<AdaptationModel>(std::move(backbones), std::move(text), cfg.model,
                                           cfg.train.seed);
}

}  // namespace medbridge
