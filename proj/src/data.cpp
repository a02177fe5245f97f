#include "medbridge/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "json.hpp"
#include "medbridge/core.hpp"

namespace medbridge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string parent_dir(const std::string& path) {
  auto pos = path.find_last_of('/');
  if (pos == std::string::npos) return ".";
  if (pos == 0) return "/";
  return path.substr(0, pos);
}

std::string resolve_path(const std::string& dir, const std::string& rel) {
  if (!rel.empty() && rel.front() == '/') return rel;
  return dir + "/" + rel;
}

json parse_line(const std::string& line, int line_no) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    fail(ErrKind::parse, "manifest line " + std::to_string(line_no) + ": " + e.what());
  }
  if (!j.is_object())
    fail(ErrKind::parse, "manifest line " + std::to_string(line_no) + ": expected a JSON object");
  return j;
}

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed, int line_no) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key()))
      fail(ErrKind::parse,
           "manifest line " + std::to_string(line_no) + ": unknown key '" + it.key() + "'");
  }
}

}  // namespace

ManifestReader::ManifestReader(const std::string& path) : in_(path), path_(path) {
  if (!in_) fail(ErrKind::io, "cannot open manifest '" + path + "'");
  dir_ = parent_dir(path);
  std::string header_line;
  if (!std::getline(in_, header_line))
    fail(ErrKind::parse, "manifest line 1: missing header");
  json header = parse_line(header_line, 1);
  reject_unknown_keys(header, {"classes"}, 1);
  if (!header.contains("classes") || !header["classes"].is_array())
    fail(ErrKind::parse, "manifest line 1: header needs a 'classes' array");
  std::vector<std::string> names;
  for (const auto& c : header["classes"]) {
    if (!c.is_string()) fail(ErrKind::parse, "manifest line 1: class names must be strings");
    names.push_back(c.get<std::string>());
  }
  if (names.empty()) fail(ErrKind::data, "manifest '" + path + "' declares no classes");
  labels_ = LabelSpace::create(names);
}

bool ManifestReader::next(ImageRecord& out) {
  std::string line;
  if (!std::getline(in_, line)) return false;
  ++line_;
  if (line.empty() && in_.peek() == std::ifstream::traits_type::eof()) return false;
  json j = parse_line(line, line_);
  reject_unknown_keys(j, {"id", "image", "labels", "report"}, line_);
  for (const char* key : {"id", "image", "labels"}) {
    if (!j.contains(key))
      fail(ErrKind::parse,
           "manifest line " + std::to_string(line_) + ": missing key '" + std::string(key) + "'");
  }
  if (!j["id"].is_string() || !j["image"].is_string())
    fail(ErrKind::parse, "manifest line " + std::to_string(line_) + ": 'id' and 'image' must be strings");
  if (!j["labels"].is_array())
    fail(ErrKind::parse, "manifest line " + std::to_string(line_) + ": 'labels' must be an array");
  const auto& arr = j["labels"];
  if (int(arr.size()) != labels_.size())
    fail(ErrKind::parse, "manifest line " + std::to_string(line_) + ": expected " +
                             std::to_string(labels_.size()) + " labels, got " +
                             std::to_string(arr.size()));
  out.labels.clear();
  for (const auto& v : arr) {
    if (!v.is_number_integer() || (v.get<int>() != 0 && v.get<int>() != 1))
      fail(ErrKind::parse, "manifest line " + std::to_string(line_) + ": labels must be 0 or 1");
    out.labels.push_back(v.get<int>());
  }
  out.id = j["id"].get<std::string>();
  out.image_path = resolve_path(dir_, j["image"].get<std::string>());
  if (!fs::exists(out.image_path))
    fail(ErrKind::data, "manifest line " + std::to_string(line_) + ": image '" + out.image_path +
                            "' does not exist");
  out.has_report = j.contains("report");
  if (out.has_report) {
    if (!j["report"].is_string())
      fail(ErrKind::parse, "manifest line " + std::to_string(line_) + ": 'report' must be a string");
    out.report = j["report"].get<std::string>();
  } else {
    out.report.clear();
  }
  return true;
}

Dataset read_manifest(const std::string& path) {
  ManifestReader reader(path);
  Dataset ds;
  ds.labels = reader.labels();
  ImageRecord rec;
  while (reader.next(rec)) ds.records.push_back(rec);
  return ds;
}

void write_manifest(const std::string& path, const LabelSpace& labels,
                    const std::vector<ImageRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrKind::io, "cannot write manifest '" + path + "'");
  json header;
  header["classes"] = labels.class_names;
  out << header.dump() << "\n";
  for (const auto& rec : records) {
    require(int(rec.labels.size()) == labels.size(), ErrKind::data,
            "record '" + rec.id + "' has wrong label arity");
    json j;
    j["id"] = rec.id;
    j["image"] = rec.image_path;
    j["labels"] = rec.labels;
    if (rec.has_report) j["report"] = rec.report;
    out << j.dump() << "\n";
  }
  if (!out) fail(ErrKind::io, "short write on manifest '" + path + "'");
}

void SyntheticSpec::validate() const {
  require(image_size >= 64, ErrKind::config, "image_size must be at least 64");
  require(num_classes >= 1, ErrKind::config, "need at least one class");
  require(lesion_size >= 10, ErrKind::config, "lesion_size must be at least 10");
  require(lesion_size * 4 <= image_size, ErrKind::config,
          "lesion_size must be small relative to image_size");
  require(prevalence > 0.0 && prevalence < 1.0, ErrKind::config, "prevalence must be in (0,1)");
  require(shift_knob >= 0.0 && shift_knob <= 1.0, ErrKind::config, "shift_knob must be in [0,1]");
  require(grating_period >= 2.0, ErrKind::config, "grating_period must be at least 2 pixels");
  require(grating_amp > 0.0 && grating_amp <= 1.0, ErrKind::config, "grating_amp must be in (0,1]");
  require(noise_sigma >= 0.0, ErrKind::config, "noise_sigma must be non-negative");
  require(background_cell >= 16, ErrKind::config, "background_cell must be at least 16");
}

namespace {

// Class names for generated data. Past the list, classes get numeric names.
const char* kClassNames[] = {"atelectasis", "edema",        "consolidation", "nodule",
                             "effusion",    "pneumothorax", "fibrosis",      "opacity"};

std::string synth_class_name(int c) {
  if (c < int(sizeof(kClassNames) / sizeof(kClassNames[0]))) return kClassNames[c];
  return "lesion" + std::to_string(c);
}

}  // namespace

std::vector<std::string> synth_class_names(int num_classes) {
  std::vector<std::string> names;
  names.reserve(std::size_t(num_classes));
  for (int c = 0; c < num_classes; ++c) names.push_back(synth_class_name(c));
  return names;
}

SynthRecord synth_record(const SyntheticSpec& spec, const std::string& split, int index) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, split, std::uint64_t(index)));
  const int size = spec.image_size;
  const double knob = spec.shift_knob;

  // Smooth background: bilinear value noise over a coarse lattice. The shift
  // knob raises the overall level, imitating a brighter acquisition protocol.
  const double bg_lo = 0.30 + 0.12 * knob;
  const double bg_hi = 0.55 + 0.12 * knob;
  const int cell = spec.background_cell;
  const int nodes = (size + cell - 1) / cell + 1;
  std::vector<double> lattice(std::size_t(nodes) * std::size_t(nodes));
  for (auto& v : lattice) v = rng.uniform(bg_lo, bg_hi);

  std::vector<double> pix(std::size_t(size) * std::size_t(size));
  for (int y = 0; y < size; ++y) {
    const double fy = double(y) / cell;
    const int iy = int(fy);
    const double ty = fy - iy;
    for (int x = 0; x < size; ++x) {
      const double fx = double(x) / cell;
      const int ix = int(fx);
      const double tx = fx - ix;
      const double* row0 = &lattice[std::size_t(iy) * nodes];
      const double* row1 = row0 + nodes;
      const double top = row0[ix] + tx * (row0[ix + 1] - row0[ix]);
      const double bot = row1[ix] + tx * (row1[ix + 1] - row1[ix]);
      pix[std::size_t(y) * size + x] = top + ty * (bot - top);
    }
  }
  if (spec.noise_sigma > 0.0)
    for (auto& v : pix) v += rng.normal(0.0, spec.noise_sigma);

  // Each class stamps one zero-mean oriented grating under a Hann window.
  // All classes share the grating period, so a downscale attenuates every
  // class about equally; only the orientation differs.
  const double amp = spec.grating_amp * (1.0 - 0.35 * knob);
  const int ls = spec.lesion_size;
  SynthRecord rec;
  rec.labels.assign(std::size_t(spec.num_classes), 0);
  std::vector<std::string> present;
  for (int c = 0; c < spec.num_classes; ++c) {
    const bool positive = rng.uniform() < spec.prevalence;
    if (!positive) continue;
    rec.labels[std::size_t(c)] = 1;
    present.push_back(synth_class_name(c));
    const int x0 = int(rng.below(std::uint64_t(size - ls + 1)));
    const int y0 = int(rng.below(std::uint64_t(size - ls + 1)));
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    const double theta = double(c) * M_PI / spec.num_classes;
    const double kx = std::cos(theta) * 2.0 * M_PI / spec.grating_period;
    const double ky = std::sin(theta) * 2.0 * M_PI / spec.grating_period;
    for (int dy = 0; dy < ls; ++dy) {
      const double wy = 0.5 * (1.0 - std::cos(2.0 * M_PI * (dy + 0.5) / ls));
      double* row = &pix[std::size_t(y0 + dy) * size + x0];
      for (int dx = 0; dx < ls; ++dx) {
        const double wx = 0.5 * (1.0 - std::cos(2.0 * M_PI * (dx + 0.5) / ls));
        row[dx] += amp * wx * wy * std::cos(kx * dx + ky * dy + phase);
      }
    }
  }

  rec.image.height = size;
  rec.image.width = size;
  rec.image.channels = 1;
  rec.image.data.resize(pix.size());
  for (std::size_t i = 0; i < pix.size(); ++i)
    rec.image.data[i] = float(std::clamp(pix[i], 0.0, 1.0));

  if (present.empty()) {
    rec.report = "no acute findings.";
  } else {
    rec.report = "findings include ";
    for (std::size_t i = 0; i < present.size(); ++i) {
      if (i) rec.report += ", ";
      rec.report += present[i];
    }
    rec.report += ".";
  }
  return rec;
}

std::string generate_synthetic(const SyntheticSpec& spec, int count, const std::string& split,
                               const std::string& out_dir) {
  spec.validate();
  require(count >= 1, ErrKind::config, "count must be positive");
  const std::string image_dir = out_dir + "/images/" + split;
  std::error_code ec;
  fs::create_directories(image_dir, ec);
  if (ec) fail(ErrKind::io, "cannot create '" + image_dir + "': " + ec.message());

  LabelSpace labels = LabelSpace::create(synth_class_names(spec.num_classes));
  std::vector<ImageRecord> records;
  records.reserve(std::size_t(count));
  for (int i = 0; i < count; ++i) {
    SynthRecord rec = synth_record(spec, split, i);
    char name[64];
    std::snprintf(name, sizeof(name), "%s-%06d", split.c_str(), i);
    const std::string rel = "images/" + split + "/" + std::string(name) + ".pgm";
    write_pnm(rec.image, out_dir + "/" + rel, 8);
    ImageRecord meta;
    meta.id = name;
    meta.image_path = rel;  // kept relative so the dataset directory is movable
    meta.labels = rec.labels;
    meta.has_report = true;
    meta.report = rec.report;
    records.push_back(std::move(meta));
  }
  const std::string manifest_path = out_dir + "/" + split + ".jsonl";
  write_manifest(manifest_path, labels, records);
  return manifest_path;
}

}  // namespace medbridge
