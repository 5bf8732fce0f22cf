#pragma once

// Independent reference implementations used as oracles by the tests and the acceptance run. Nothing here
// calls into the library's math paths.

#include "watchped/episode.hpp"
#include "watchped/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <limits>
#include <random>
#include <vector>

namespace testutil {

using watchped::Index;
using watchped::Shape;
using watchped::Tensor;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

inline Index rand_int(std::mt19937_64& rng, Index lo, Index hi) {
  return std::uniform_int_distribution<Index>(lo, hi)(rng);
}

// Nested-loop cross-correlation over [C,H,W] with [O,C,kh,kw] kernels.
inline Tensor conv2d_oracle(const Tensor& in, const Tensor& k, Index stride, Index pad) {
  const Index c = in.dim(0), h = in.dim(1), w = in.dim(2);
  const Index o = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const Index ho = (h + 2 * pad - kh) / stride + 1;
  const Index wo = (w + 2 * pad - kw) / stride + 1;
  Tensor out({o, ho, wo});
  for (Index oc = 0; oc < o; ++oc)
    for (Index y = 0; y < ho; ++y)
      for (Index x = 0; x < wo; ++x) {
        double acc = 0.0;
        for (Index ic = 0; ic < c; ++ic)
          for (Index i = 0; i < kh; ++i)
            for (Index j = 0; j < kw; ++j) {
              const Index sy = y * stride + i - pad;
              const Index sx = x * stride + j - pad;
              if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
              acc += in.at({ic, sy, sx}) * k.at({oc, ic, i, j});
            }
        out.at({oc, y, x}) = acc;
      }
  return out;
}

inline Tensor pool_oracle(const Tensor& in, bool max_mode, Index kh, Index kw) {
  const Index c = in.dim(0), ho = in.dim(1) / kh, wo = in.dim(2) / kw;
  Tensor out({c, ho, wo});
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < ho; ++y)
      for (Index x = 0; x < wo; ++x) {
        double best = -std::numeric_limits<double>::infinity();
        double total = 0.0;
        for (Index i = 0; i < kh; ++i)
          for (Index j = 0; j < kw; ++j) {
            const double v = in.at({ch, y * kh + i, x * kw + j});
            best = std::max(best, v);
            total += v;
          }
        out.at({ch, y, x}) = max_mode ? best : total / static_cast<double>(kh * kw);
      }
  return out;
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  std::filesystem::path p = std::filesystem::temp_directory_path() / ("watchped_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Relative path -> bytes for every regular file below root.
inline std::vector<std::pair<std::string, std::string>> tree_bytes(const std::filesystem::path& root) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.emplace_back(std::filesystem::relative(e.path(), root).generic_string(), file_bytes(e.path()));
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Probability that a random positive outscores a random negative, ties worth one half.
inline double auc_pairs(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  return wins / pairs;
}

struct Confusion {
  int tp = 0, fp = 0, tn = 0, fn = 0;
};

inline Confusion confusion(const std::vector<double>& s, const std::vector<int>& y, double thr) {
  Confusion c;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] >= thr && y[i]) ++c.tp;
    if (s[i] >= thr && !y[i]) ++c.fp;
    if (s[i] < thr && !y[i]) ++c.tn;
    if (s[i] < thr && y[i]) ++c.fn;
  }
  return c;
}

// Exhaustive nearest neighbour: smallest |dt|, earliest on ties.
inline std::ptrdiff_t nearest_oracle(const std::vector<watchped::SensorSample>& s, watchped::TimestampMs t) {
  std::ptrdiff_t best = 0;
  for (std::size_t i = 1; i < s.size(); ++i) {
    if (std::abs(s[i].timestamp_ms - t) < std::abs(s[best].timestamp_ms - t)) best = static_cast<std::ptrdiff_t>(i);
  }
  return best;
}

}  // namespace testutil
