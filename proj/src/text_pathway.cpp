#include "medbridge/text_pathway.hpp"

#include <cmath>
#include <unordered_set>

namespace medbridge {

LabelSpace LabelSpace::create(std::vector<std::string> names) {
  std::unordered_set<std::string> seen;
  for (const auto& n : names) {
    require(!n.empty(), ErrKind::data, "label space: empty class name");
    require(seen.insert(n).second, ErrKind::data, "label space: duplicate class name '" + n + "'");
  }
  LabelSpace ls;
  ls.class_names = std::move(names);
  return ls;
}

std::vector<std::string> build_prompts(const LabelSpace& labels) {
  std::vector<std::string> prompts;
  prompts.reserve(labels.class_names.size());
  for (const auto& name : labels.class_names) prompts.push_back("a radiology image with " + name);
  return prompts;
}

void TextProjection::init(Rng& rng, int f_text, int f_fuse) {
  require(f_text > 0 && f_fuse > 0, ErrKind::config, "text projection: bad dimensions");
  w.resize(f_text, f_fuse);
  fill_normal(rng, w, 1.0 / std::sqrt(double(f_text)));
  b = Mat::Zero(1, f_fuse);
  gw = Mat::Zero(f_text, f_fuse);
  gb = Mat::Zero(1, f_fuse);
}

Vec TextProjection::backward(const Vec& e, const Vec& dz) {
  gw += e * dz.transpose();
  gb.row(0) += dz.transpose();
  return w * dz;
}

const Vec& TextPathway::eot_embedding(const std::string& text) {
  auto it = cache_.find(text);
  if (it != cache_.end()) return it->second;
  Vec e = enc_->encode(tokenize(text, enc_->spec()));
  return cache_.emplace(text, std::move(e)).first->second;
}

Mat TextPathway::label_embeddings(const LabelSpace& labels) {
  Mat out(labels.size(), enc_->spec().embed_dim);
  auto prompts = build_prompts(labels);
  for (int l = 0; l < labels.size(); ++l) {
    try {
      out.row(l) = eot_embedding(prompts[std::size_t(l)]).transpose();
    } catch (const Error& e) {
      fail(e.kind(), e.raw() + " (class '" + labels.class_names[std::size_t(l)] + "')");
    }
  }
  return out;
}

}  // namespace medbridge
