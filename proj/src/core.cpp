#include "medbridge/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace medbridge {

const char* err_kind_name(ErrKind k) {
  switch (k) {
    case ErrKind::usage: return "usage error";
    case ErrKind::config: return "configuration error";
    case ErrKind::shape: return "shape error";
    case ErrKind::state: return "state error";
    case ErrKind::precondition: return "precondition error";
    case ErrKind::geometry: return "geometry error";
    case ErrKind::io: return "I/O error";
    case ErrKind::parse: return "parse error";
    case ErrKind::data: return "data error";
    case ErrKind::tokenize: return "tokenization error";
    case ErrKind::numeric: return "numeric error";
    case ErrKind::metrics: return "metrics error";
    case ErrKind::checkpoint: return "checkpoint error";
  }
  return "error";
}

std::uint64_t hash_matrix(const Mat& m, std::uint64_t h) {
  // Shape goes into the hash so reshapes of the same bytes differ.
  std::int64_t dims[2] = {m.rows(), m.cols()};
  h = fnv1a64(dims, sizeof dims, h);
  // Column-major contiguous for MatrixXd.
  return fnv1a64(m.data(), sizeof(double) * std::size_t(m.size()), h);
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

std::uint64_t Rng::below(std::uint64_t n) {
  require(n > 0, ErrKind::precondition, "Rng::below(0)");
  if ((n & (n - 1)) == 0) return next_u64() & (n - 1);
  std::uint64_t limit = ~std::uint64_t(0) - (~std::uint64_t(0) % n);
  for (;;) {
    std::uint64_t v = next_u64();
    if (v < limit) return v % n;
  }
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  // Box-Muller on (0,1] x [0,1).
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

std::vector<std::size_t> Rng::sample_without_replacement(std::size_t n, std::size_t k) {
  require(k <= n, ErrKind::precondition, "sample_without_replacement: k > n");
  // Partial Fisher-Yates over an index vector, then sort the prefix.
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + std::size_t(below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

void fill_normal(Rng& rng, Mat& m, double stddev) {
  double* p = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) p[i] = rng.normal(0.0, stddev);
}

}  // namespace medbridge
