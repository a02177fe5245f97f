#include "medbridge/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace medbridge {

static_assert(std::endian::native == std::endian::little,
              "archive code assumes a little-endian host");

namespace {
constexpr char kMagic[8] = {'M', 'B', 'A', 'R', 'C', 'H', '0', '1'};
}

const Mat* Archive::find(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return &m;
  return nullptr;
}

void save_archive(const Archive& a, const std::string& path, const std::string& dtype) {
  require(dtype == "f32" || dtype == "f64", ErrKind::precondition, "archive dtype must be f32/f64");
  nlohmann::json header;
  header["meta"] = a.meta;
  auto& list = header["tensors"] = nlohmann::json::array();
  for (const auto& [name, m] : a.tensors)
    list.push_back({{"name", name}, {"dtype", dtype}, {"rows", m.rows()}, {"cols", m.cols()}});
  std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrKind::io, path + ": cannot write");
  out.write(kMagic, 8);
  std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(hs.data(), std::streamsize(hs.size()));
  for (const auto& [name, m] : a.tensors) {
    if (dtype == "f64") {
      out.write(reinterpret_cast<const char*>(m.data()),
                std::streamsize(sizeof(double) * std::size_t(m.size())));
    } else {
      std::vector<float> buf(std::size_t(m.size()));
      for (Eigen::Index i = 0; i < m.size(); ++i) buf[std::size_t(i)] = float(m.data()[i]);
      out.write(reinterpret_cast<const char*>(buf.data()),
                std::streamsize(sizeof(float) * buf.size()));
    }
  }
  if (!out) fail(ErrKind::io, path + ": write failed");
}

Archive load_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrKind::io, path + ": cannot open");
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0)
    fail(ErrKind::io, path + ": not a tensor archive");
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (in.gcount() != 8 || hlen == 0 || hlen > (1u << 26))
    fail(ErrKind::io, path + ": bad header length");
  std::string hs(hlen, '\0');
  in.read(hs.data(), std::streamsize(hlen));
  if (std::uint64_t(in.gcount()) != hlen) fail(ErrKind::io, path + ": truncated header");

  nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
  if (header.is_discarded() || !header.contains("tensors") || !header["tensors"].is_array())
    fail(ErrKind::io, path + ": malformed archive header");

  Archive a;
  a.meta = header.value("meta", nlohmann::json::object());
  for (const auto& e : header["tensors"]) {
    if (!e.contains("name") || !e.contains("dtype") || !e.contains("rows") || !e.contains("cols"))
      fail(ErrKind::io, path + ": malformed tensor entry");
    std::string name = e["name"].get<std::string>();
    std::string dtype = e["dtype"].get<std::string>();
    auto rows = e["rows"].get<std::int64_t>();
    auto cols = e["cols"].get<std::int64_t>();
    if (rows < 0 || cols < 0 || rows * cols > (std::int64_t(1) << 32))
      fail(ErrKind::io, path + ": tensor dims out of range");
    Mat m(rows, cols);
    std::size_t n = std::size_t(m.size());
    if (dtype == "f64") {
      in.read(reinterpret_cast<char*>(m.data()), std::streamsize(sizeof(double) * n));
      if (std::size_t(in.gcount()) != sizeof(double) * n)
        fail(ErrKind::io, path + ": truncated tensor data");
    } else if (dtype == "f32") {
      std::vector<float> buf(n);
      in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(sizeof(float) * n));
      if (std::size_t(in.gcount()) != sizeof(float) * n)
        fail(ErrKind::io, path + ": truncated tensor data");
      for (std::size_t i = 0; i < n; ++i) m.data()[i] = double(buf[i]);
    } else {
      fail(ErrKind::io, path + ": unknown dtype '" + dtype + "'");
    }
    a.tensors.emplace_back(std::move(name), std::move(m));
  }
  return a;
}

}  // namespace medbridge
