#pragma once

#include <string>
#include <vector>

#include "medbridge/archive.hpp"
#include "medbridge/image.hpp"
#include "medbridge/nn.hpp"

namespace medbridge {

struct BackboneSpec {
  std::string expert_id;
  int depth = 6;             // T
  int split = 3;             // T1: queries are injected after this many layers
  int embed_dim = 64;        // f
  int num_heads = 4;
  int patch_size = 32;
  int input_resolution = 224;

  int grid() const { return input_resolution / patch_size; }
  int token_count() const { return grid() * grid() + 1; }  // M: patches + class token
  void validate() const;
};

struct FrozenTokens {
  Mat tokens;          // M x f
  int layer_index = 0; // how many layers have been applied
};

struct SuffixCache {
  std::vector<BlockCache> blocks;
  LnCache final_ln;
};

struct SuffixOut {
  Mat frozen;  // M x f, after the final layer norm
  Mat query;   // Q x f
};

// Frozen ViT-style encoder with split execution. All parameters are plain
// matrices without gradient storage: nothing in the optimizer can ever touch
// them, so the freezing guarantee is structural. Forward passes are const.
class VisionBackbone {
 public:
  static VisionBackbone synthetic(const BackboneSpec& spec, std::uint64_t seed);
  static VisionBackbone from_archive(const BackboneSpec& spec, const Archive& a);
  static VisionBackbone from_file(const BackboneSpec& spec, const std::string& path);

  const BackboneSpec& spec() const { return spec_; }

  // Patch embedding + class token + positional embedding. The view must be
  // square at input_resolution; grayscale images count as 3 logical channels.
  Mat embed(const Image& view) const;

  // Applies transformer blocks [first, last), no final norm. Exposed so the
  // prefix/suffix split can be checked against a straight-through run.
  Mat run_layers(const Mat& tokens, int first, int last) const;

  FrozenTokens run_prefix(const Image& view) const;

  // Joint sequence [M frozen; Q query] entering at layer `split`. Applies the
  // remaining layers jointly, then the final layer norm, and splits the
  // result. Pass a cache to enable suffix_backward.
  SuffixOut run_suffix(const Mat& joint, int layer_index, int num_query,
                       SuffixCache* cache) const;

  // Gradient w.r.t. the joint input sequence. Frozen parameters receive no
  // gradient by construction (the block backward has no parameter outputs).
  Mat suffix_backward(const SuffixCache& cache, const Mat& dfrozen, const Mat& dquery) const;

  // Rows are token-space directions whose attention logits at the injection
  // layer follow the patches' texture-energy channels (one row per tracked
  // orientation). Query banks seeded with these start out attending to
  // salient texture instead of uniformly. Empty when the width carries no
  // energy channels.
  Mat query_seed_directions() const;

  std::uint64_t param_hash() const;
  std::int64_t param_count() const;
  void export_archive(Archive& a) const;

 private:
  BackboneSpec spec_;
  Mat patch_w_;   // (patch^2 * 3) x f
  Mat patch_b_;   // 1 x f
  Mat cls_;       // 1 x f
  Mat pos_;       // M x f
  std::vector<BlockP> blocks_;
  Mat final_ln_w_, final_ln_b_;

  Mat patchify(const Image& view) const;
};

struct TextEncoderSpec {
  int vocab_size = 8192;
  int depth = 6;
  int embed_dim = 256;  // f_text
  int num_heads = 8;
  int max_sequence_length = 77;

  int eot_token_id() const { return vocab_size - 1; }
  void validate() const;
};

// Lowercased whitespace tokenization onto a fixed hashed id range:
// word -> 1 + fnv1a64(word) mod (vocab-2), id 0 reserved, EOT = vocab-1.
// Input is head-truncated to max_sequence_length-1 words, EOT appended.
std::vector<int> tokenize(const std::string& text, const TextEncoderSpec& spec);

class TextEncoder {
 public:
  static TextEncoder synthetic(const TextEncoderSpec& spec, std::uint64_t seed);
  static TextEncoder from_archive(const TextEncoderSpec& spec, const Archive& a);

  const TextEncoderSpec& spec() const { return spec_; }

  // Final-layer hidden state at the EOT position. The sequence must contain
  // exactly one EOT token and fit max_sequence_length.
  Vec encode(const std::vector<int>& token_ids) const;

  std::uint64_t param_hash() const;
  std::int64_t param_count() const;
  void export_archive(Archive& a) const;

 private:
  TextEncoderSpec spec_;
  Mat token_embed_;  // vocab x f_text
  Mat pos_;          // max_seq x f_text
  std::vector<BlockP> blocks_;
  Mat final_ln_w_, final_ln_b_;
};

}  // namespace medbridge
