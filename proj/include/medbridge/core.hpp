#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace medbridge {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Error taxonomy. One exception type with a category keeps catch sites and the
// CLI exit-code mapping simple; tests match on the category.
enum class ErrKind {
  usage,         // bad flags / malformed --set
  config,        // schema violations, dimension mismatches
  shape,         // runtime tensor shape mismatch
  state,         // operation applied at the wrong pipeline stage
  precondition,  // contract violation (e.g. Q = 0)
  geometry,      // crop does not fit the image
  io,            // unreadable / malformed files
  parse,         // manifest or config text that does not parse
  data,          // semantically invalid data (label arity, empty set)
  tokenize,      // text does not fit the encoder
  numeric,       // non-finite values where finite ones are required
  metrics,       // no evaluable class etc.
  checkpoint,    // archive corrupt or expert hash mismatch
};

const char* err_kind_name(ErrKind k);

class Error : public std::runtime_error {
 public:
  Error(ErrKind kind, const std::string& msg)
      : std::runtime_error(std::string(err_kind_name(kind)) + ": " + msg),
        kind_(kind),
        raw_(msg) {}
  ErrKind kind() const { return kind_; }
  const std::string& raw() const { return raw_; }  // message without the category prefix

 private:
  ErrKind kind_;
  std::string raw_;
};

[[noreturn]] inline void fail(ErrKind k, const std::string& msg) { throw Error(k, msg); }

inline void require(bool ok, ErrKind k, const std::string& msg) {
  if (!ok) fail(k, msg);
}

// 64-bit FNV-1a. Used for parameter/identity hashes and the tokenizer's word
// bucketing; stable across platforms by construction.
constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t h = kFnvOffset) {
  return fnv1a64(s.data(), s.size(), h);
}

std::uint64_t hash_matrix(const Mat& m, std::uint64_t h = kFnvOffset);
std::string hash_hex(std::uint64_t h);

// splitmix64; good avalanche, used to derive independent stream seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix64(seed ^ splitmix64(a ^ splitmix64(b)));
}

inline std::uint64_t mix_seed(std::uint64_t seed, const std::string& tag, std::uint64_t b = 0) {
  return mix_seed(seed, fnv1a64(tag), b);
}

// Deterministic RNG. The mt19937_64 engine is fully specified by the
// standard, so its stream is portable; the distributions on top are
// hand-rolled because std::normal_distribution and friends are
// implementation-defined, and seeded reproducibility is a contract here
// (synthetic weights, synthetic data, crop subsets).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1), 53-bit mantissa.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling keeps it exactly uniform.
  std::uint64_t below(std::uint64_t n);

  // Standard normal via Box-Muller; the spare value is cached.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // k distinct indices from [0, n), in increasing order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  // In-place Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = std::size_t(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Fills a matrix with i.i.d. normal(0, stddev) draws, column-major order.
void fill_normal(Rng& rng, Mat& m, double stddev);

}  // namespace medbridge
