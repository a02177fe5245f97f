#include "medbridge/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace medbridge {
namespace {

// Reads one whitespace/comment-delimited token from a netpbm header.
std::string next_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {  // comment to end of line
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(char(c));
  }
  if (tok.empty()) fail(ErrKind::io, path + ": truncated header");
  return tok;
}

int parse_pnm_int(std::istream& in, const std::string& path) {
  std::string tok = next_token(in, path);
  for (char ch : tok)
    if (!std::isdigit(static_cast<unsigned char>(ch)))
      fail(ErrKind::io, path + ": bad header token '" + tok + "'");
  long v = std::strtol(tok.c_str(), nullptr, 10);
  if (v <= 0 || v > 1 << 20) fail(ErrKind::io, path + ": header value out of range");
  return int(v);
}

struct Taps {
  // For one output index: first source index and the normalized weights.
  std::vector<int> start;
  std::vector<std::vector<double>> weights;
};

Taps make_taps(int in_size, int out_size) {
  Taps t;
  t.start.resize(out_size);
  t.weights.resize(out_size);
  double scale = double(in_size) / out_size;
  double support = std::max(1.0, scale);  // widen the kernel when shrinking
  for (int i = 0; i < out_size; ++i) {
    double center = (i + 0.5) * scale - 0.5;
    int lo = int(std::ceil(center - support));
    int hi = int(std::floor(center + support));
    std::vector<double> w;
    double total = 0.0;
    for (int j = lo; j <= hi; ++j) {
      double d = std::abs(j - center) / std::max(1.0, scale);
      double wv = 1.0 - d;
      if (wv <= 0.0) {
        w.push_back(0.0);
        continue;
      }
      w.push_back(wv);
      total += wv;
    }
    // Trim zero-weight edges so the inner loop stays tight.
    int first = 0;
    while (first < int(w.size()) && w[first] == 0.0) ++first;
    int last = int(w.size()) - 1;
    while (last >= first && w[last] == 0.0) --last;
    t.start[i] = lo + first;
    std::vector<double> ww(w.begin() + first, w.begin() + last + 1);
    for (double& x : ww) x /= total;
    t.weights[i] = std::move(ww);
  }
  return t;
}

inline int clamp_idx(int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); }

}  // namespace

Image decode_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrKind::io, path + ": cannot open");
  std::string magic = next_token(in, path);
  int channels;
  if (magic == "P5")
    channels = 1;
  else if (magic == "P6")
    channels = 3;
  else
    fail(ErrKind::io, path + ": unsupported format (expected binary PGM/PPM)");
  int width = parse_pnm_int(in, path);
  int height = parse_pnm_int(in, path);
  int maxval = parse_pnm_int(in, path);
  if (maxval > 65535) fail(ErrKind::io, path + ": maxval out of range");
  // The single whitespace byte ending the maxval token separates header and
  // raster; a token terminated by end of file means the raster is absent.
  if (in.eof()) fail(ErrKind::io, path + ": missing raster separator");

  int bytes_per_sample = maxval > 255 ? 2 : 1;
  std::size_t nsamples = std::size_t(width) * height * channels;
  std::vector<unsigned char> raw(nsamples * bytes_per_sample);
  in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  if (std::size_t(in.gcount()) != raw.size()) fail(ErrKind::io, path + ": truncated raster");

  Image img(height, width, channels);
  float inv = 1.0f / float(maxval);
  if (bytes_per_sample == 1) {
    for (std::size_t i = 0; i < nsamples; ++i) img.data[i] = float(raw[i]) * inv;
  } else {
    for (std::size_t i = 0; i < nsamples; ++i) {
      unsigned v = (unsigned(raw[2 * i]) << 8) | unsigned(raw[2 * i + 1]);  // big-endian
      img.data[i] = float(v) * inv;
    }
  }
  return img;
}

void write_pnm(const Image& img, const std::string& path, int bits) {
  require(bits == 8 || bits == 16, ErrKind::precondition, "write_pnm: bits must be 8 or 16");
  require(img.channels == 1 || img.channels == 3, ErrKind::precondition,
          "write_pnm: 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrKind::io, path + ": cannot write");
  int maxval = bits == 8 ? 255 : 65535;
  out << (img.channels == 1 ? "P5" : "P6") << "\n"
      << img.width << " " << img.height << "\n"
      << maxval << "\n";
  std::vector<unsigned char> raw;
  raw.reserve(img.data.size() * (bits / 8));
  for (float f : img.data) {
    double v = std::clamp(double(f), 0.0, 1.0) * maxval;
    unsigned q = unsigned(std::lround(v));
    if (bits == 8) {
      raw.push_back(static_cast<unsigned char>(q));
    } else {
      raw.push_back(static_cast<unsigned char>(q >> 8));
      raw.push_back(static_cast<unsigned char>(q & 0xff));
    }
  }
  out.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
  if (!out) fail(ErrKind::io, path + ": write failed");
}

Image resize_bilinear(const Image& src, int out_h, int out_w) {
  require(out_h > 0 && out_w > 0, ErrKind::precondition, "resize: empty target");
  require(src.height > 0 && src.width > 0, ErrKind::precondition, "resize: empty source");
  Taps tx = make_taps(src.width, out_w);
  Taps ty = make_taps(src.height, out_h);
  int C = src.channels;

  // Horizontal pass into an intermediate (src.height x out_w) buffer, then
  // vertical. Separability keeps the cost linear in kernel width.
  Image mid(src.height, out_w, C);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const auto& w = tx.weights[x];
      int s0 = tx.start[x];
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < w.size(); ++k)
          acc += w[k] * src.plane(y, clamp_idx(s0 + int(k), src.width), c);
        mid.plane(y, x, c) = float(acc);
      }
    }
  }
  Image out(out_h, out_w, C);
  for (int y = 0; y < out_h; ++y) {
    const auto& w = ty.weights[y];
    int s0 = ty.start[y];
    for (int x = 0; x < out_w; ++x) {
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < w.size(); ++k)
          acc += w[k] * mid.plane(clamp_idx(s0 + int(k), src.height), x, c);
        out.plane(y, x, c) = float(acc);
      }
    }
  }
  return out;
}

Image extract_crop(const Image& src, int x, int y, int w, int h) {
  require(w > 0 && h > 0, ErrKind::precondition, "extract_crop: empty window");
  if (x < 0 || y < 0 || x + w > src.width || y + h > src.height)
    fail(ErrKind::geometry, "crop window exceeds image bounds");
  Image out(h, w, src.channels);
  for (int r = 0; r < h; ++r) {
    const float* s = &src.data[(std::size_t(y + r) * src.width + x) * src.channels];
    float* d = &out.data[std::size_t(r) * w * src.channels];
    std::copy(s, s + std::size_t(w) * src.channels, d);
  }
  return out;
}

}  // namespace medbridge
