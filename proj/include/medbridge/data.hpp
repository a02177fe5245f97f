#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "medbridge/image.hpp"
#include "medbridge/text_pathway.hpp"

namespace medbridge {

// One manifest row. Pixels are decoded on demand; this is metadata only.
struct ImageRecord {
  std::string id;
  std::string image_path;  // resolved against the manifest's directory
  std::vector<int> labels;
  bool has_report = false;
  std::string report;
};

struct Dataset {
  LabelSpace labels;
  std::vector<ImageRecord> records;
};

// Manifest: UTF-8 JSON lines. Line 1 is {"classes": [...]} and each further
// line is {"id", "image", "labels": [0/1 per class], "report"?}. Rows with
// the wrong label arity (or any other defect) are rejected with their line
// number; image paths must resolve at load time.
class ManifestReader {
 public:
  explicit ManifestReader(const std::string& path);

  const LabelSpace& labels() const { return labels_; }
  // Streams the next record; false at end of file.
  bool next(ImageRecord& out);

 private:
  std::ifstream in_;
  std::string path_;
  std::string dir_;
  LabelSpace labels_;
  int line_ = 1;
};

Dataset read_manifest(const std::string& path);

// Writes records as they are; image paths are emitted verbatim (the generator
// uses paths relative to the manifest).
void write_manifest(const std::string& path, const LabelSpace& labels,
                    const std::vector<ImageRecord>& records);

struct SyntheticSpec {
  int image_size = 1024;
  int num_classes = 4;   // L
  int lesion_size = 32;
  double prevalence = 0.3;
  double shift_knob = 0.0;  // 0 = domain A; raises background level, lowers contrast
  std::uint64_t seed = 0;

  // Texture parameters. The defaults are tuned so a native-resolution crop
  // keeps most of the grating amplitude while a full-image downscale to the
  // backbone resolution crushes it; widening the period narrows that gap.
  double grating_period = 6.0;  // pixels per cycle at native resolution
  double grating_amp = 0.45;
  double noise_sigma = 0.01;    // white noise on top of the smooth background
  int background_cell = 256;    // value-noise lattice spacing in pixels

  void validate() const;
};

// Deterministic record synthesis: smooth value-noise background plus white
// noise; each class present with probability `prevalence` stamps one
// Hann-windowed oriented grating (orientation c*180/L degrees for class c) of
// lesion_size at a random in-bounds position. The patterns are zero-mean, so
// they survive a native-resolution crop but wash out of an aggressive global
// downscale. Everything derives from (seed, split, index).
struct SynthRecord {
  Image image;
  std::vector<int> labels;
  std::string report;
};
SynthRecord synth_record(const SyntheticSpec& spec, const std::string& split, int index);

// Names used by the generator, in class order ("atelectasis", "edema", ...).
std::vector<std::string> synth_class_names(int num_classes);

// Writes images under <out_dir>/images/<split>/ and the manifest to
// <out_dir>/<split>.jsonl; returns the manifest path.
std::string generate_synthetic(const SyntheticSpec& spec, int count, const std::string& split,
                               const std::string& out_dir);

}  // namespace medbridge
