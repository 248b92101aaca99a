#pragma once

// Brute-force reference implementations shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <queue>
#include <random>
#include <utility>
#include <vector>

#include "dhseg/backend.hpp"
#include "dhseg/postproc.hpp"

namespace dhseg::oracles {

inline ProbabilityMap random_map(int h, int w, std::mt19937& rng) {
  // Two or three clusters plus uniform noise, so Otsu has something to split.
  ProbabilityMap m(h, w);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::normal_distribution<float> n(0.0f, 0.08f);
  const float centers[3] = {u(rng) * 0.4f, 0.3f + u(rng) * 0.4f, 0.6f + u(rng) * 0.4f};
  for (auto& v : m.values()) {
    const unsigned pick = rng() % 4;
    v = pick == 3 ? u(rng) : std::clamp(centers[pick] + n(rng), 0.0f, 1.0f);
  }
  return m;
}

inline BinaryMask random_mask(int h, int w, std::mt19937& rng, int density_percent) {
  BinaryMask m(h, w);
  for (auto& v : m.values()) v = static_cast<int>(rng() % 100) < density_percent;
  return m;
}

// Blobby masks: random rectangles and noise.
inline BinaryMask blob_mask(int h, int w, std::mt19937& rng) {
  BinaryMask m = random_mask(h, w, rng, 8);
  for (int i = 0; i < 6; ++i) {
    const int y0 = static_cast<int>(rng() % static_cast<unsigned>(h)), x0 = static_cast<int>(rng() % static_cast<unsigned>(w));
    const int hh = 2 + static_cast<int>(rng() % 10), ww = 2 + static_cast<int>(rng() % 10);
    for (int y = y0; y < std::min(h, y0 + hh); ++y)
      for (int x = x0; x < std::min(w, x0 + ww); ++x) m(y, x) = 1;
  }
  return m;
}

// Exhaustive Otsu in exact integer arithmetic: between-class variance for the
// split at k is proportional to (S0*N - S*n0)^2 / (n0*n1).
inline int otsu_oracle(const ProbabilityMap& m) {
  long long hist[256] = {};
  for (float v : m.values()) ++hist[std::min(255, static_cast<int>(std::floor(v * 256.0f)))];
  long long n = 0, s = 0;
  for (int b = 0; b < 256; ++b) {
    n += hist[b];
    s += b * hist[b];
  }
  __int128 best_num = -1, best_den = 1;
  int best = -1;
  long long n0 = 0, s0 = 0;
  for (int k = 1; k < 256; ++k) {
    n0 += hist[k - 1];
    s0 += (k - 1) * hist[k - 1];
    const long long n1 = n - n0;
    if (n0 == 0 || n1 == 0) continue;
    const __int128 diff = static_cast<__int128>(s0) * n - static_cast<__int128>(s) * n0;
    const __int128 num = diff * diff, den = static_cast<__int128>(n0) * n1;
    if (best < 0 || num * best_den > best_num * den) {
      best_num = num;
      best_den = den;
      best = k;
    }
  }
  return best;
}

inline BinaryMask hysteresis_oracle(const ProbabilityMap& m, float lo, float hi) {
  const int h = m.height(), w = m.width();
  BinaryMask out(h, w), seen(h, w);
  for (int sy = 0; sy < h; ++sy)
    for (int sx = 0; sx < w; ++sx) {
      if (seen(sy, sx) || m(sy, sx) < lo) continue;
      std::vector<std::pair<int, int>> comp{{sy, sx}};
      seen(sy, sx) = 1;
      float peak = m(sy, sx);
      for (size_t i = 0; i < comp.size(); ++i) {
        const auto [y, x] = comp[i];
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = y + dy, nx = x + dx;
            if (!m.contains(ny, nx) || seen(ny, nx) || m(ny, nx) < lo) continue;
            seen(ny, nx) = 1;
            peak = std::max(peak, m(ny, nx));
            comp.push_back({ny, nx});
          }
      }
      if (peak >= hi)
        for (const auto& [y, x] : comp) out(y, x) = 1;
    }
  return out;
}

inline std::vector<std::pair<int, int>> selem_offsets(StructuringElement s) {
  std::vector<std::pair<int, int>> o;
  for (int dy = -s.radius; dy <= s.radius; ++dy)
    for (int dx = -s.radius; dx <= s.radius; ++dx)
      if (s.shape == SelemShape::square || dx * dx + dy * dy <= s.radius * s.radius) o.push_back({dy, dx});
  return o;
}

inline BinaryMask minkowski(const BinaryMask& m, StructuringElement s, bool dilate) {
  const auto offs = selem_offsets(s);
  BinaryMask out(m.height(), m.width());
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      bool any = false, all = true;
      for (const auto& [dy, dx] : offs) {
        const bool v = m.contains(y + dy, x + dx) && m(y + dy, x + dx);
        any |= v;
        all &= v;
      }
      out(y, x) = dilate ? any : all;
    }
  return out;
}

inline BinaryMask complement(const BinaryMask& m) {
  BinaryMask out = m;
  for (auto& v : out.values()) v = !v;
  return out;
}

inline bool subset(const BinaryMask& a, const BinaryMask& b) {
  for (size_t i = 0; i < a.values().size(); ++i)
    if (a.values()[i] && !b.values()[i]) return false;
  return true;
}

// BFS labeling in raster order of first pixel.
inline LabelMap bfs_labels(const BinaryMask& m, int connectivity) {
  LabelMap lab(m.height(), m.width());
  int next = 0;
  for (int sy = 0; sy < m.height(); ++sy)
    for (int sx = 0; sx < m.width(); ++sx) {
      if (!m(sy, sx) || lab(sy, sx)) continue;
      ++next;
      std::queue<std::pair<int, int>> q;
      q.push({sy, sx});
      lab(sy, sx) = next;
      while (!q.empty()) {
        const auto [y, x] = q.front();
        q.pop();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if ((dy == 0 && dx == 0) || (connectivity == 4 && dy != 0 && dx != 0)) continue;
            const int ny = y + dy, nx = x + dx;
            if (m.contains(ny, nx) && m(ny, nx) && !lab(ny, nx)) {
              lab(ny, nx) = next;
              q.push({ny, nx});
            }
          }
      }
    }
  return lab;
}

inline BinaryMask rect_mask(Size2 s, int x0, int y0, int x1, int y1) {
  BinaryMask m(s.height, s.width);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m(y, x) = 1;
  return m;
}

// Plain sampling formula for the 2x upsample, written independently of both backends.
inline float upsample_at(const Tensor& x, int n, int c, int oy, int ox) {
  auto coord = [](int o, int extent, int& i0, int& i1, float& f) {
    const float s = std::clamp((o + 0.5f) / 2.0f - 0.5f, 0.0f, float(extent - 1));
    i0 = int(std::floor(s));
    i1 = std::min(i0 + 1, extent - 1);
    f = s - float(i0);
  };
  int y0, y1, x0, x1;
  float fy, fx;
  coord(oy, x.h(), y0, y1, fy);
  coord(ox, x.w(), x0, x1, fx);
  const float top = x.at(n, c, y0, x0) * (1 - fx) + x.at(n, c, y0, x1) * fx;
  const float bot = x.at(n, c, y1, x0) * (1 - fx) + x.at(n, c, y1, x1) * fx;
  return top * (1 - fy) + bot * fy;
}

}  // namespace dhseg::oracles
