// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

// Independent reference implementations shared by the unit and acceptance tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

struct Staple {
  std::vector<double> w;       // posterior per pixel
  std::vector<double> p, q;    // sensitivity, specificity per rater
  std::vector<double> loglik;  // per E-step
};

inline double clampr(double r) { return std::min(std::max(r, 1e-6), 1.0 - 1e-6); }

// Plain-probability STAPLE with explicit loops: q is specificity, so the
// library's false-positive rate equals 1 - q.
inline Staple staple(const std::vector<std::vector<std::uint8_t>>& d, double p0, double fp0, double prior, int iters) {
  const std::size_t J = d.size(), N = d[0].size();
  Staple s;
  s.p.assign(J, p0);
  s.q.assign(J, 1.0 - fp0);
  s.w.assign(N, prior);
  auto estep = [&] {
    double ll = 0;
    for (std::size_t i = 0; i < N; ++i) {
      double a = prior, b = 1.0 - prior;
      for (std::size_t j = 0; j < J; ++j) {
        const double pj = clampr(s.p[j]), fj = clampr(1.0 - s.q[j]);
        if (d[j][i]) {
          a *= pj;
          b *= fj;
        } else {
          a *= 1.0 - pj;
          b *= 1.0 - fj;
        }
      }
      s.w[i] = a / (a + b);
      ll += std::log(a + b);
    }
    s.loglik.push_back(ll);
  };
  for (int it = 0; it < iters; ++it) {
    estep();
    double sw = 0, sv = 0;
    for (double v : s.w) {
      sw += v;
      sv += 1.0 - v;
    }
    for (std::size_t j = 0; j < J; ++j) {
      double num_p = 0, num_q = 0;
      for (std::size_t i = 0; i < N; ++i) {
        if (d[j][i])
          num_p += s.w[i];
        else
          num_q += 1.0 - s.w[i];
      }
      if (sw > 0) s.p[j] = clampr(num_p / sw);
      if (sv > 0) s.q[j] = clampr(num_q / sv);
    }
  }
  estep();
  return s;
}

inline double dice(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  double inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    sa += a[i] ? 1 : 0;
    sb += b[i] ? 1 : 0;
  }
  if (sa + sb == 0) return 1.0;
  return 2 * inter / (sa + sb);
}

inline double iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  double inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : inter / uni;
}

// Disk of radius r centred in a side x side grid.
inline std::vector<std::uint8_t> disk(int side, double r) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(side) * side);
  const double c = (side - 1) / 2.0;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) m[y * side + x] = (x - c) * (x - c) + (y - c) * (y - c) <= r * r ? 1 : 0;
  return m;
}

}  // namespace oracle
