#include "medbridge/backbone.hpp"

#include <cctype>
#include <cmath>

namespace medbridge {

namespace {

// Residual write-back scales for synthetic vision blocks. With plain fan-in
// init each block adds a unit-scale random mixture to the stream, and after a
// few layers that drowns whatever the patch embedding extracted. Pretrained
// towers keep inputs linearly decodable through depth, so the stand-in damps
// the output projections (attention out, FFN second layer) and leaves the
// rest alone. Blocks after the split are damped less: the injected query
// tokens can only read the frozen features through those same output
// projections, and over-damping them starves that path.
constexpr double kPrefixResidualDamp = 0.1;
constexpr double kSuffixResidualDamp = 0.2;

// Dimension layout of the synthetic vision features. Widths that allow it
// reserve one channel per orientation for rectified texture energy; the first
// block's feed-forward is wired to fill those channels (see wire_energy_ffn).
// Two band slots are repurposed as a paired level anchor (see kLevelGain).
// Narrow widths, used by tiny test configs, get the plain cyclic bank.
struct BankLayout {
  int band_dims = 0;     // oriented band-pass dims, in groups of 16
  int energy_base = -1;  // first of 8 energy channels, -1 when absent
  int anchor_dim = -1;   // first of the two level-anchor dims
  static BankLayout of(int f) {
    BankLayout l;
    if (f >= 48 && f % 16 == 0) {
      l.band_dims = f - 16;
      l.energy_base = l.band_dims;
      l.anchor_dim = 14;
    }
    return l;
  }
};

// Periods (in pixels at the model's input resolution) for the band-pass
// groups. Values straddle the two-pixel Nyquist edge because a downscaled
// crop leaves small findings close to it.
constexpr double kBandPeriods[] = {2.3, 2.0, 2.7, 3.4, 1.8, 2.5, 3.0, 4.2};

// Response of the paired level-anchor filters to a flat unit-level image.
// Sized so the pair dominates each patch token's variance the way
// low-frequency content dominates pretrained patch embeddings. With the
// anchor in place, layer norm neither blows the band dims of near-flat
// patches up to unit scale nor saturates them on findings, and because the
// pair sums to zero it leaves the token mean alone. Per-token normalization
// then divides band responses by local level, a contrast normalization.
constexpr double kLevelGain = 10.0;

// Synthetic patch embedding: an oriented quadrature filter bank plus a few
// smooth level/gradient filters. The frozen experts stand in for pretrained
// vision towers, whose patch embeddings are dominated by oriented band-pass
// structure; a plain Gaussian random projection has almost no overlap with
// narrow-band texture and buries small high-frequency findings in background
// variance. Column order cycles orientations fastest so any prefix of the
// bank still spans all orientations; seeded jitter keeps experts distinct.
// Energy channels get zero columns here: the first block writes them.
Mat make_patch_filters(Rng& rng, int P, int f, const BankLayout& layout) {
  struct Desc {
    int kind;  // 0 = band-pass, 1..8 = smooth variants, 9/10 = anchor, -1 = reserved
    double theta = 0, period = 0, phase = 0;
  };
  std::vector<Desc> cycle;
  if (layout.energy_base >= 0) {
    for (int gidx = 0; gidx < layout.band_dims / 16; ++gidx) {
      const double period = kBandPeriods[gidx % 8];
      for (int j = 0; j < 8; ++j)
        for (int q = 0; q < 2; ++q) cycle.push_back({0, j * M_PI / 8, period, q * M_PI / 2});
    }
    // One quadrature pair gives way to the level anchor; its orientation
    // keeps full coverage through the other period groups.
    cycle[std::size_t(layout.anchor_dim)] = {9};
    cycle[std::size_t(layout.anchor_dim) + 1] = {10};
    for (int j = 0; j < 8; ++j) cycle.push_back({-1});
    for (int k = 1; k <= 8; ++k) cycle.push_back({k});
  } else {
    for (double period : {2.3, 2.0, 2.7})
      for (int j = 0; j < 8; ++j)
        for (int q = 0; q < 2; ++q) cycle.push_back({0, j * M_PI / 8, period, q * M_PI / 2});
    for (int k = 1; k <= 8; ++k) cycle.push_back({k});
  }

  Mat w = Mat::Zero(P * P * 3, f);
  Eigen::ArrayXXd g(P, P);
  for (int i = 0; i < f; ++i) {
    const Desc& d = cycle[std::size_t(i) % cycle.size()];
    if (d.kind < 0) continue;
    const double cx = 0.5 * (P - 1) + rng.uniform(-0.15 * P, 0.15 * P);
    const double cy = 0.5 * (P - 1) + rng.uniform(-0.15 * P, 0.15 * P);
    bool unit_l2 = true;  // otherwise normalized to level_gain on a flat image
    double level_gain = 1.0;
    if (d.kind == 0) {
      const double theta = d.theta + rng.uniform(-0.06, 0.06);
      const double period = d.period * (1.0 + rng.uniform(-0.06, 0.06));
      const double phase = d.phase + rng.uniform(-0.15, 0.15);
      const double kx = std::cos(theta) * 2.0 * M_PI / period;
      const double ky = std::sin(theta) * 2.0 * M_PI / period;
      // Flat support with a short cosine taper at the patch border. Over flat
      // support a quadrature pair's energy is position independent: moving a
      // texture inside the patch only rotates the pair's phase. A centered
      // Gaussian envelope would fade findings that land near a patch corner.
      const double half = 0.5 * (P - 1);
      const double flat = 0.75 * half;
      auto win = [&](double t) {
        const double a = std::abs(t);
        if (a <= flat) return 1.0;
        return 0.5 * (1.0 + std::cos(M_PI * (a - flat) / (half - flat)));
      };
      for (int py = 0; py < P; ++py)
        for (int px = 0; px < P; ++px) {
          const double dx = px - half, dy = py - half;
          g(py, px) = win(dx) * win(dy) * std::cos(kx * dx + ky * dy + phase);
        }
      // Project out constant and linear trends. Smooth background is locally
      // linear over a patch, and the odd-phase filters' first moment would
      // otherwise turn background gradients into band responses that compete
      // with genuine texture.
      double s1 = 0, sx = 0, sy = 0, sxx = 0, syy = 0;
      for (int py = 0; py < P; ++py)
        for (int px = 0; px < P; ++px) {
          const double dx = px - half, dy = py - half;
          s1 += g(py, px);
          sx += g(py, px) * dx;
          sy += g(py, px) * dy;
          sxx += dx * dx;
          syy += dy * dy;
        }
      const double c0 = s1 / (P * P);
      const double cx1 = sx / sxx;
      const double cy1 = sy / syy;
      for (int py = 0; py < P; ++py)
        for (int px = 0; px < P; ++px) {
          const double dx = px - half, dy = py - half;
          g(py, px) -= c0 + cx1 * dx + cy1 * dy;
        }
    } else if (d.kind <= 3 || d.kind >= 9) {
      const double widths[3] = {0.5, 0.25, 0.12};
      const double width = d.kind >= 9 ? 0.5 : widths[d.kind - 1];
      const double env = width * P * (1.0 + rng.uniform(-0.1, 0.1));
      for (int py = 0; py < P; ++py)
        for (int px = 0; px < P; ++px) {
          const double dx = px - cx, dy = py - cy;
          g(py, px) = std::exp(-(dx * dx + dy * dy) / (2 * env * env));
        }
      // Kinds 9 and 10 are the excitatory/inhibitory level-anchor pair; the
      // plain blobs keep unit flat response.
      if (d.kind == 9) level_gain = kLevelGain;
      if (d.kind == 10) level_gain = -kLevelGain;
      unit_l2 = false;
    } else if (d.kind <= 7) {
      const double dirs[4][2] = {{1, 0}, {0, 1}, {M_SQRT1_2, M_SQRT1_2}, {M_SQRT1_2, -M_SQRT1_2}};
      const double* dir = dirs[d.kind - 4];
      const double env = 0.45 * P;
      for (int py = 0; py < P; ++py)
        for (int px = 0; px < P; ++px) {
          const double dx = px - cx, dy = py - cy;
          g(py, px) = (dir[0] * dx + dir[1] * dy) / P *
                      std::exp(-(dx * dx + dy * dy) / (2 * env * env));
        }
      g -= g.mean();
    } else {
      // Center-surround difference of Gaussians, zero response to a flat image.
      const double s1 = 0.12 * P, s2 = 0.30 * P;
      Eigen::ArrayXXd a(P, P), b(P, P);
      for (int py = 0; py < P; ++py)
        for (int px = 0; px < P; ++px) {
          const double r2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
          a(py, px) = std::exp(-r2 / (2 * s1 * s1));
          b(py, px) = std::exp(-r2 / (2 * s2 * s2));
        }
      g = a / a.sum() - b / b.sum();
    }
    if (unit_l2)
      g /= std::sqrt(g.square().sum());
    else
      g *= level_gain / (std::sqrt(3.0) * g.sum());  // flat unit image -> level_gain
    // Grayscale inputs are replicated across channels, so each channel gets
    // the same filter scaled to keep the column's total norm.
    for (int py = 0; py < P; ++py)
      for (int px = 0; px < P; ++px)
        for (int c = 0; c < 3; ++c)
          w((py * P + px) * 3 + c, i) = g(py, px) / std::sqrt(3.0);
  }
  return w;
}

// Wires the first block's feed-forward to rectify each oriented quadrature
// pair into its orientation's energy channel: gelu(g(x - theta)) +
// gelu(g(-x - theta)) is an even function close to g * max(0, |x| - theta),
// and both hidden units write the same channel. Pretrained towers learn the
// same thresholded local-energy (complex-cell) units in their early layers,
// and without them no linear readout can see a random-phase texture: its
// conditional mean is zero, so only a rectified statistic separates finding
// from background. The input gain matters because post-norm band responses
// are small (the level anchor owns the token variance); without it the gelu
// would sit in its smooth region and pass a shrunken, distorted copy. The
// dead zone sits just above the band response of background, whose remaining
// source is the slope kinks of the smooth background field.
void wire_energy_ffn(FfnP& ffn, const BankLayout& layout) {
  constexpr double kGain = 10.0;   // sharpens gelu into a near-exact rectifier
  constexpr double kTheta = 0.11;  // dead-zone half-width, post-norm units
  constexpr double kWrite = 0.5;   // per rectified unit, summed over the pair
  for (int d = 0; d < layout.band_dims; ++d) {
    if (d == layout.anchor_dim || d == layout.anchor_dim + 1) continue;
    const int orient = (d % 16) / 2;
    for (int s = 0; s < 2; ++s) {
      const int h = 2 * d + s;  // 2 * band_dims <= hidden width 4f, always
      ffn.w1.col(h).setZero();
      ffn.w1(d, h) = s == 0 ? kGain : -kGain;
      ffn.b1(0, h) = -kGain * kTheta;
      ffn.w2.row(h).setZero();
      ffn.w2(h, layout.energy_base + orient) = kWrite;
    }
  }
}

// Turns head 0 of a suffix block into a texture-saliency head. Its keys read
// the energy channels and its queries read the selector slots (the trailing
// smooth dims), so a token whose selector slot o is positive attends to the
// patches with the most orientation-o energy. Pretrained towers contain
// comparably specialized heads; a plain random head cannot express this
// selectivity, because a 16-dim random projection of 64 unit-scale channels
// buries any single channel (the query seed directions rely on this head).
// Query and key sides use different dims on purpose: query tokens carry
// selectors but no energy, so they never become their own attention targets.
void wire_saliency_head(AttnP& attn, const BankLayout& layout, int num_heads, int f) {
  const int dh = f / num_heads;
  if (dh < 8) return;
  // Coupling sets the attention temperature: the selector spike times the
  // energy value times kCouple squared (per column) has to clear the random
  // head logits by several nats before the read approximates a hard max
  // over patches instead of a soft blend with background.
  constexpr double kCouple = 1.5;
  const int selector_base = layout.energy_base + 8;
  for (int c = 0; c < dh; ++c) {
    attn.wq.col(c).setZero();
    attn.wk.col(c).setZero();
    attn.wv.col(c).setZero();
  }
  const int spread = dh / 8;
  for (int o = 0; o < 8; ++o)
    for (int s = 0; s < spread; ++s) {
      const int c = o * spread + s;
      attn.wq(selector_base + o, c) = kCouple;
      attn.wk(layout.energy_base + o, c) = kCouple;
      // The head's values carry the energy channels themselves, so a read of
      // the selected patches lands in a consistent, decodable direction
      // instead of a random projection of their full content.
      attn.wv(layout.energy_base + o, c) = 1.0;
    }
}

}  // namespace

void BackboneSpec::validate() const {
  require(!expert_id.empty(), ErrKind::config, "backbone: expert_id must be non-empty");
  require(depth > 0, ErrKind::config, "backbone: depth must be positive");
  require(split > 0 && split < depth, ErrKind::config, "backbone: need 0 < split < depth");
  require(embed_dim > 0, ErrKind::config, "backbone: embed_dim must be positive");
  require(num_heads > 0 && embed_dim % num_heads == 0, ErrKind::config,
          "backbone: num_heads must divide embed_dim");
  require(patch_size > 0, ErrKind::config, "backbone: patch_size must be positive");
  require(input_resolution > 0 && input_resolution % patch_size == 0, ErrKind::config,
          "backbone: input_resolution must be a positive multiple of patch_size");
}

VisionBackbone VisionBackbone::synthetic(const BackboneSpec& spec, std::uint64_t seed) {
  spec.validate();
  VisionBackbone b;
  b.spec_ = spec;
  const int f = spec.embed_dim;
  Rng rng(mix_seed(seed, "vision_backbone"));
  const BankLayout layout = BankLayout::of(f);
  b.patch_w_ = make_patch_filters(rng, spec.patch_size, f, layout);
  b.patch_b_ = Mat::Zero(1, f);
  b.cls_.resize(1, f);
  fill_normal(rng, b.cls_, 0.02);
  if (layout.anchor_dim >= 0) {
    // The class token carries the same level-anchor pair as a typical patch.
    // Without it, its norm would inflate the tiny init noise in its band dims
    // to unit scale, and the first block's rectifier would hand the class
    // token a large constant energy signature that outshines real findings.
    b.cls_(0, layout.anchor_dim) = 0.42 * kLevelGain;
    b.cls_(0, layout.anchor_dim + 1) = -0.42 * kLevelGain;
  }
  b.pos_.resize(spec.token_count(), f);
  fill_normal(rng, b.pos_, 0.02);
  b.blocks_.resize(std::size_t(spec.depth));
  for (int i = 0; i < spec.depth; ++i) {
    auto& blk = b.blocks_[std::size_t(i)];
    init_attn(rng, blk.attn, f, /*zero_out_proj=*/false);
    init_ffn(rng, blk.ffn, f);
    const double damp = i < spec.split ? kPrefixResidualDamp : kSuffixResidualDamp;
    blk.attn.wo *= damp;
    blk.ffn.w2 *= damp;
    // The energy channels carry exactly what the first block's rectifier puts
    // there. Random cross-talk into a reserved channel is an artifact of the
    // random stand-in, not something a pretrained tower does, and it buries
    // the per-view energy baseline under depth noise.
    for (int c = layout.energy_base; c >= 0 && c < layout.energy_base + 8; ++c) {
      blk.attn.wo.col(c).setZero();
      blk.ffn.w2.col(c).setZero();
    }
    if (layout.energy_base >= 0 && i >= spec.split) {
      wire_saliency_head(blk.attn, layout, spec.num_heads, f);
      // The saliency head's reads are the payload of the suffix. Damping is
      // there to keep random mixing from burying the stream, so the
      // structured head's output mixing goes back to full strength.
      blk.attn.wo.topRows(f / spec.num_heads) /= damp;
    }
  }
  if (layout.energy_base >= 0) wire_energy_ffn(b.blocks_[0].ffn, layout);
  b.final_ln_w_ = Mat::Ones(1, f);
  b.final_ln_b_ = Mat::Zero(1, f);
  return b;
}

namespace {

// Fetches a named tensor and insists on its shape; the dimension header is
// validated before any value is used.
const Mat& archive_tensor(const Archive& a, const std::string& name, Eigen::Index rows,
                          Eigen::Index cols) {
  const Mat* m = a.find(name);
  if (!m) fail(ErrKind::config, "weight archive: missing tensor '" + name + "'");
  if (m->rows() != rows || m->cols() != cols)
    fail(ErrKind::config, "weight archive: tensor '" + name + "' has shape " +
                              std::to_string(m->rows()) + "x" + std::to_string(m->cols()) +
                              ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  return *m;
}

void load_block(const Archive& a, const std::string& prefix, BlockP& blk, int f) {
  blk.attn.ln_w = archive_tensor(a, prefix + ".attn.ln_w", 1, f);
  blk.attn.ln_b = archive_tensor(a, prefix + ".attn.ln_b", 1, f);
  blk.attn.wq = archive_tensor(a, prefix + ".attn.wq", f, f);
  blk.attn.wk = archive_tensor(a, prefix + ".attn.wk", f, f);
  blk.attn.wv = archive_tensor(a, prefix + ".attn.wv", f, f);
  blk.attn.wo = archive_tensor(a, prefix + ".attn.wo", f, f);
  blk.attn.bq = archive_tensor(a, prefix + ".attn.bq", 1, f);
  blk.attn.bk = archive_tensor(a, prefix + ".attn.bk", 1, f);
  blk.attn.bv = archive_tensor(a, prefix + ".attn.bv", 1, f);
  blk.attn.bo = archive_tensor(a, prefix + ".attn.bo", 1, f);
  blk.ffn.ln_w = archive_tensor(a, prefix + ".ffn.ln_w", 1, f);
  blk.ffn.ln_b = archive_tensor(a, prefix + ".ffn.ln_b", 1, f);
  blk.ffn.w1 = archive_tensor(a, prefix + ".ffn.w1", f, 4 * f);
  blk.ffn.b1 = archive_tensor(a, prefix + ".ffn.b1", 1, 4 * f);
  blk.ffn.w2 = archive_tensor(a, prefix + ".ffn.w2", 4 * f, f);
  blk.ffn.b2 = archive_tensor(a, prefix + ".ffn.b2", 1, f);
}

void export_block(Archive& a, const std::string& prefix, const BlockP& blk) {
  a.add(prefix + ".attn.ln_w", blk.attn.ln_w);
  a.add(prefix + ".attn.ln_b", blk.attn.ln_b);
  a.add(prefix + ".attn.wq", blk.attn.wq);
  a.add(prefix + ".attn.wk", blk.attn.wk);
  a.add(prefix + ".attn.wv", blk.attn.wv);
  a.add(prefix + ".attn.wo", blk.attn.wo);
  a.add(prefix + ".attn.bq", blk.attn.bq);
  a.add(prefix + ".attn.bk", blk.attn.bk);
  a.add(prefix + ".attn.bv", blk.attn.bv);
  a.add(prefix + ".attn.bo", blk.attn.bo);
  a.add(prefix + ".ffn.ln_w", blk.ffn.ln_w);
  a.add(prefix + ".ffn.ln_b", blk.ffn.ln_b);
  a.add(prefix + ".ffn.w1", blk.ffn.w1);
  a.add(prefix + ".ffn.b1", blk.ffn.b1);
  a.add(prefix + ".ffn.w2", blk.ffn.w2);
  a.add(prefix + ".ffn.b2", blk.ffn.b2);
}

}  // namespace

Mat VisionBackbone::query_seed_directions() const {
  const BankLayout layout = BankLayout::of(spec_.embed_dim);
  if (layout.energy_base < 0 || spec_.embed_dim / spec_.num_heads < 8)
    return Mat(0, spec_.embed_dim);
  // One standardized selector spike per orientation. Through the saliency
  // head a query carrying spike o attends to the patches with the most
  // orientation-o energy; standardization makes the block layer norm a
  // no-op on the seed, so the spike arrives at the head at full height.
  Mat dirs = Mat::Zero(8, spec_.embed_dim);
  const int selector_base = layout.energy_base + 8;
  for (int j = 0; j < 8; ++j) {
    Vec d = Vec::Zero(spec_.embed_dim);
    d(selector_base + j) = 1.0;
    const double mean = d.mean();
    const double sd = std::sqrt((d.array() - mean).square().mean());
    dirs.row(j) = ((d.array() - mean) / sd).transpose();
  }
  return dirs;
}

VisionBackbone VisionBackbone::from_archive(const BackboneSpec& spec, const Archive& a) {
  spec.validate();
  VisionBackbone b;
  b.spec_ = spec;
  const int f = spec.embed_dim;
  const int pd = spec.patch_size * spec.patch_size * 3;
  b.patch_w_ = archive_tensor(a, "vision.patch_embed", pd, f);
  b.patch_b_ = archive_tensor(a, "vision.patch_bias", 1, f);
  b.cls_ = archive_tensor(a, "vision.cls_token", 1, f);
  b.pos_ = archive_tensor(a, "vision.pos_embed", spec.token_count(), f);
  b.blocks_.resize(std::size_t(spec.depth));
  for (int i = 0; i < spec.depth; ++i)
    load_block(a, "vision.layer" + std::to_string(i), b.blocks_[std::size_t(i)], f);
  b.final_ln_w_ = archive_tensor(a, "vision.final_ln.w", 1, f);
  b.final_ln_b_ = archive_tensor(a, "vision.final_ln.b", 1, f);
  return b;
}

VisionBackbone VisionBackbone::from_file(const BackboneSpec& spec, const std::string& path) {
  return from_archive(spec, load_archive(path));
}

void VisionBackbone::export_archive(Archive& a) const {
  a.add("vision.patch_embed", patch_w_);
  a.add("vision.patch_bias", patch_b_);
  a.add("vision.cls_token", cls_);
  a.add("vision.pos_embed", pos_);
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    export_block(a, "vision.layer" + std::to_string(i), blocks_[i]);
  a.add("vision.final_ln.w", final_ln_w_);
  a.add("vision.final_ln.b", final_ln_b_);
}

Mat VisionBackbone::patchify(const Image& view) const {
  const int res = spec_.input_resolution;
  if (view.height != res || view.width != res)
    fail(ErrKind::shape, "view resolution " + std::to_string(view.width) + "x" +
                             std::to_string(view.height) + " does not match backbone input " +
                             std::to_string(res));
  const int P = spec_.patch_size;
  const int g = spec_.grid();
  Mat out(g * g, P * P * 3);
  for (int pr = 0; pr < g; ++pr) {
    for (int pc = 0; pc < g; ++pc) {
      Eigen::Index col = 0;
      for (int py = 0; py < P; ++py)
        for (int px = 0; px < P; ++px)
          for (int c = 0; c < 3; ++c)
            out(pr * g + pc, col++) = double(view.value(pr * P + py, pc * P + px, c));
    }
  }
  return out;
}

Mat VisionBackbone::embed(const Image& view) const {
  Mat patches = patchify(view);
  Mat x(spec_.token_count(), spec_.embed_dim);
  x.row(0) = cls_.row(0);
  x.bottomRows(patches.rows()) = linear(patches, patch_w_, patch_b_);
  x += pos_;
  return x;
}

Mat VisionBackbone::run_layers(const Mat& tokens, int first, int last) const {
  require(0 <= first && first <= last && last <= spec_.depth, ErrKind::precondition,
          "run_layers: bad layer range");
  Mat x = tokens;
  for (int i = first; i < last; ++i)
    x = block_forward(blocks_[std::size_t(i)], spec_.num_heads, x, nullptr);
  return x;
}

FrozenTokens VisionBackbone::run_prefix(const Image& view) const {
  FrozenTokens t;
  t.tokens = run_layers(embed(view), 0, spec_.split);
  t.layer_index = spec_.split;
  return t;
}

SuffixOut VisionBackbone::run_suffix(const Mat& joint, int layer_index, int num_query,
                                     SuffixCache* cache) const {
  require(num_query >= 1, ErrKind::precondition, "run_suffix: need at least one query token");
  if (layer_index != spec_.split)
    fail(ErrKind::state, "run_suffix: tokens are at layer " + std::to_string(layer_index) +
                             ", expected " + std::to_string(spec_.split));
  const int M = spec_.token_count();
  require(joint.rows() == M + num_query && joint.cols() == spec_.embed_dim, ErrKind::shape,
          "run_suffix: joint sequence shape mismatch");

  Mat x = joint;
  if (cache) cache->blocks.resize(std::size_t(spec_.depth - spec_.split));
  for (int i = spec_.split; i < spec_.depth; ++i) {
    BlockCache* bc = cache ? &cache->blocks[std::size_t(i - spec_.split)] : nullptr;
    x = block_forward(blocks_[std::size_t(i)], spec_.num_heads, x, bc);
  }
  x = layernorm(x, final_ln_w_, final_ln_b_, cache ? &cache->final_ln : nullptr);

  SuffixOut out;
  out.frozen = x.topRows(M);
  out.query = x.bottomRows(num_query);
  return out;
}

Mat VisionBackbone::suffix_backward(const SuffixCache& cache, const Mat& dfrozen,
                                    const Mat& dquery) const {
  Mat dx(dfrozen.rows() + dquery.rows(), dfrozen.cols());
  dx.topRows(dfrozen.rows()) = dfrozen;
  dx.bottomRows(dquery.rows()) = dquery;
  dx = layernorm_backward(dx, final_ln_w_, cache.final_ln, nullptr, nullptr);
  for (int i = spec_.depth - 1; i >= spec_.split; --i)
    dx = block_backward_input(blocks_[std::size_t(i)], spec_.num_heads,
                              cache.blocks[std::size_t(i - spec_.split)], dx);
  return dx;
}

std::uint64_t VisionBackbone::param_hash() const {
  std::uint64_t h = fnv1a64(spec_.expert_id);
  int dims[6] = {spec_.depth, spec_.split,      spec_.embed_dim,
                 spec_.num_heads, spec_.patch_size, spec_.input_resolution};
  h = fnv1a64(dims, sizeof dims, h);
  h = hash_matrix(patch_w_, h);
  h = hash_matrix(patch_b_, h);
  h = hash_matrix(cls_, h);
  h = hash_matrix(pos_, h);
  for (const auto& blk : blocks_) {
    h = hash_attn(blk.attn, h);
    h = hash_ffn(blk.ffn, h);
  }
  h = hash_matrix(final_ln_w_, h);
  h = hash_matrix(final_ln_b_, h);
  return h;
}

namespace {

std::int64_t count_block(const BlockP& blk) {
  const AttnP& a = blk.attn;
  const FfnP& f = blk.ffn;
  return a.ln_w.size() + a.ln_b.size() + a.wq.size() + a.wk.size() + a.wv.size() + a.wo.size() +
         a.bq.size() + a.bk.size() + a.bv.size() + a.bo.size() + f.ln_w.size() + f.ln_b.size() +
         f.w1.size() + f.b1.size() + f.w2.size() + f.b2.size();
}

}  // namespace

std::int64_t VisionBackbone::param_count() const {
  std::int64_t n = patch_w_.size() + patch_b_.size() + cls_.size() + pos_.size() +
                   final_ln_w_.size() + final_ln_b_.size();
  for (const auto& blk : blocks_) n += count_block(blk);
  return n;
}

void TextEncoderSpec::validate() const {
  require(vocab_size > 3, ErrKind::config, "text: vocab_size too small");
  require(depth > 0, ErrKind::config, "text: depth must be positive");
  require(embed_dim > 0, ErrKind::config, "text: embed_dim must be positive");
  require(num_heads > 0 && embed_dim % num_heads == 0, ErrKind::config,
          "text: num_heads must divide embed_dim");
  require(max_sequence_length > 1, ErrKind::config, "text: max_sequence_length too small");
  require(eot_token_id() < vocab_size, ErrKind::config, "text: eot id out of range");
}

std::vector<int> tokenize(const std::string& text, const TextEncoderSpec& spec) {
  std::vector<int> ids;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    if (int(ids.size()) < spec.max_sequence_length - 1) {
      std::uint64_t h = fnv1a64(word);
      ids.push_back(1 + int(h % std::uint64_t(spec.vocab_size - 2)));
    }
    word.clear();
  };
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch)))
      flush();
    else
      word.push_back(char(std::tolower(static_cast<unsigned char>(ch))));
  }
  flush();
  ids.push_back(spec.eot_token_id());
  return ids;
}

TextEncoder TextEncoder::synthetic(const TextEncoderSpec& spec, std::uint64_t seed) {
  spec.validate();
  TextEncoder e;
  e.spec_ = spec;
  const int f = spec.embed_dim;
  Rng rng(mix_seed(seed, "text_encoder"));
  e.token_embed_.resize(spec.vocab_size, f);
  fill_normal(rng, e.token_embed_, 0.02);
  e.pos_.resize(spec.max_sequence_length, f);
  fill_normal(rng, e.pos_, 0.02);
  e.blocks_.resize(std::size_t(spec.depth));
  // Text blocks keep full-strength writes: a prompt's identity reaches the
  // end-of-text position only through attention reads, and damping them
  // collapses all label embeddings onto nearly the same vector.
  for (auto& blk : e.blocks_) {
    init_attn(rng, blk.attn, f, /*zero_out_proj=*/false);
    init_ffn(rng, blk.ffn, f);
  }
  e.final_ln_w_ = Mat::Ones(1, f);
  e.final_ln_b_ = Mat::Zero(1, f);
  return e;
}

TextEncoder TextEncoder::from_archive(const TextEncoderSpec& spec, const Archive& a) {
  spec.validate();
  TextEncoder e;
  e.spec_ = spec;
  const int f = spec.embed_dim;
  e.token_embed_ = archive_tensor(a, "text.token_embed", spec.vocab_size, f);
  e.pos_ = archive_tensor(a, "text.pos_embed", spec.max_sequence_length, f);
  e.blocks_.resize(std::size_t(spec.depth));
  for (int i = 0; i < spec.depth; ++i)
    load_block(a, "text.layer" + std::to_string(i), e.blocks_[std::size_t(i)], f);
  e.final_ln_w_ = archive_tensor(a, "text.final_ln.w", 1, f);
  e.final_ln_b_ = archive_tensor(a, "text.final_ln.b", 1, f);
  return e;
}

void TextEncoder::export_archive(Archive& a) const {
  a.add("text.token_embed", token_embed_);
  a.add("text.pos_embed", pos_);
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    export_block(a, "text.layer" + std::to_string(i), blocks_[i]);
  a.add("text.final_ln.w", final_ln_w_);
  a.add("text.final_ln.b", final_ln_b_);
}

Vec TextEncoder::encode(const std::vector<int>& token_ids) const {
  const int S = int(token_ids.size());
  if (S > spec_.max_sequence_length)
    fail(ErrKind::tokenize, "sequence of " + std::to_string(S) + " tokens exceeds max length " +
                                std::to_string(spec_.max_sequence_length));
  int eot_pos = -1, eot_count = 0;
  for (int i = 0; i < S; ++i) {
    int id = token_ids[std::size_t(i)];
    require(id >= 0 && id < spec_.vocab_size, ErrKind::tokenize, "token id out of vocabulary");
    if (id == spec_.eot_token_id()) {
      eot_pos = i;
      ++eot_count;
    }
  }
  if (eot_count != 1) fail(ErrKind::tokenize, "sequence must contain exactly one EOT token");

  Mat x(S, spec_.embed_dim);
  for (int i = 0; i < S; ++i)
    x.row(i) = token_embed_.row(token_ids[std::size_t(i)]) + pos_.row(i);
  for (const auto& blk : blocks_) x = block_forward(blk, spec_.num_heads, x, nullptr);
  x = layernorm(x, final_ln_w_, final_ln_b_, nullptr);
  return x.row(eot_pos).transpose();
}

std::uint64_t TextEncoder::param_hash() const {
  int dims[5] = {spec_.vocab_size, spec_.depth, spec_.embed_dim, spec_.num_heads,
                 spec_.max_sequence_length};
  std::uint64_t h = fnv1a64(dims, sizeof dims);
  h = hash_matrix(token_embed_, h);
  h = hash_matrix(pos_, h);
  for (const auto& blk : blocks_) {
    h = hash_attn(blk.attn, h);
    h = hash_ffn(blk.ffn, h);
  }
  h = hash_matrix(final_ln_w_, h);
  h = hash_matrix(final_ln_b_, h);
  return h;
}

std::int64_t TextEncoder::param_count() const {
  std::int64_t n = token_embed_.size() + pos_.size() + final_ln_w_.size() + final_ln_b_.size();
  for (const auto& blk : blocks_) n += count_block(blk);
  return n;
}

}  // namespace medbridge
