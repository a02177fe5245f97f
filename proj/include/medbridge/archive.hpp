#pragma once

#include <string>
#include <utility>
#include <vector>

#include "medbridge/core.hpp"

#include "json.hpp"

namespace medbridge {

// Named-tensor container used for both external weight files (f32) and
// checkpoints (f64 plus a meta object). Layout:
//
//   bytes 0..7   magic "MBARCH01"
//   bytes 8..15  little-endian u64: length of the JSON header
//   header       {"meta": {...}, "tensors": [{"name","dtype","rows","cols"}...]}
//   data         raw arrays in header order, column-major, little-endian
//
// dtype is "f32" or "f64" per tensor. Tensors load into doubles either way.
struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Mat>> tensors;  // insertion order preserved

  const Mat* find(const std::string& name) const;
  void add(const std::string& name, const Mat& m) { tensors.emplace_back(name, m); }
};

void save_archive(const Archive& a, const std::string& path, const std::string& dtype = "f64");
Archive load_archive(const std::string& path);

}  // namespace medbridge
