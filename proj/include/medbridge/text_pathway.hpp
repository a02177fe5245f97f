#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "medbridge/backbone.hpp"

namespace medbridge {

struct LabelSpace {
  std::vector<std::string> class_names;

  // Validates: each name non-empty, all names unique. An empty list is legal
  // at this level; dataset loading enforces at least one class.
  static LabelSpace create(std::vector<std::string> names);
  int size() const { return int(class_names.size()); }
};

// "a radiology image with <class>", verbatim, one prompt per class in order.
std::vector<std::string> build_prompts(const LabelSpace& labels);

// Trainable linear map f_text -> f_fuse; the only trainable piece of the text
// side (the encoder itself is frozen).
struct TextProjection {
  Mat w, b;
  Mat gw, gb;

  void init(Rng& rng, int f_text, int f_fuse);
  Vec apply(const Vec& e) const { return w.transpose() * e + b.row(0).transpose(); }
  Vec backward(const Vec& e, const Vec& dz);  // accumulates grads, returns de (unused, frozen)
};

// Frozen-encoder EOT embeddings with a write-once cache keyed by the exact
// input string. Identical results to re-encoding every time; the projection
// on top is re-applied each step so gradients stay correct.
class TextPathway {
 public:
  explicit TextPathway(const TextEncoder& enc) : enc_(&enc) {}

  // Cached frozen embedding (f_text). Throws tokenization errors.
  const Vec& eot_embedding(const std::string& text);

  // Stacked embeddings for the label prompts; tokenization failures carry the
  // class name. Rows follow the label order.
  Mat label_embeddings(const LabelSpace& labels);

  std::size_t cache_size() const { return cache_.size(); }

 private:
  const TextEncoder* enc_;
  std::unordered_map<std::string, Vec> cache_;
};

}  // namespace medbridge
