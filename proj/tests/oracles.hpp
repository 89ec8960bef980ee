#pragma once

// Independent reference implementations used to check the library. They
// follow textbook definitions directly and favour clarity over speed.

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "xqeval/detector.hpp"
#include "xqeval/perturb.hpp"

namespace xqoracle {

using namespace xqeval;

inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = (double(i) + double(j)) / 2.0 + 1.0;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = double(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(average_ranks(a), average_ranks(b));
}

/// Exact Shapley values by enumerating all 2^n coalitions.
inline std::vector<double> brute_force_shapley(const Detector& detector, const Document& doc,
                                               const std::string& mask) {
  const std::size_t n = doc.size();
  const Label target = detector.predict_one(doc.text).label;
  std::vector<double> value(std::size_t{1} << n);
  for (std::size_t s = 0; s < value.size(); ++s) {
    std::vector<bool> kept(n);
    for (std::size_t i = 0; i < n; ++i) kept[i] = (s >> i) & 1U;
    value[s] = detector.predict_one(render_masked(doc, kept, mask)).toward(target);
  }
  auto fact = [](std::size_t k) {
    double f = 1;
    for (std::size_t i = 2; i <= k; ++i) f *= double(i);
    return f;
  };
  std::vector<double> phi(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < value.size(); ++s) {
      if ((s >> i) & 1U) continue;
      const auto size = static_cast<std::size_t>(__builtin_popcountll(s));
      const double w = fact(size) * fact(n - size - 1) / fact(n);
      phi[i] += w * (value[s | (std::size_t{1} << i)] - value[s]);
    }
  }
  return phi;
}

/// Krippendorff's alpha from the coincidence matrix, straight from the
/// definition. `rows` are raters, columns units; NaN marks a missing value.
/// `interval` selects delta = (a-b)^2, otherwise nominal.
inline double krippendorff_alpha(const std::vector<std::vector<double>>& rows, bool interval) {
  const std::size_t units = rows.empty() ? 0 : rows[0].size();
  std::map<double, std::size_t> index;
  for (const auto& r : rows) {
    for (double v : r) {
      if (!std::isnan(v)) index.emplace(v, 0);
    }
  }
  std::vector<double> values;
  for (auto& [v, i] : index) {
    i = values.size();
    values.push_back(v);
  }
  const std::size_t k = values.size();
  std::vector<std::vector<double>> o(k, std::vector<double>(k, 0.0));
  for (std::size_t u = 0; u < units; ++u) {
    std::vector<std::size_t> present;
    for (const auto& r : rows) {
      if (!std::isnan(r[u])) present.push_back(index[r[u]]);
    }
    const std::size_t m = present.size();
    if (m < 2) continue;
    for (std::size_t a = 0; a < m; ++a) {
      for (std::size_t b = 0; b < m; ++b) {
        if (a != b) o[present[a]][present[b]] += 1.0 / double(m - 1);
      }
    }
  }
  std::vector<double> nc(k, 0.0);
  double n = 0;
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t d = 0; d < k; ++d) nc[c] += o[c][d];
    n += nc[c];
  }
  auto delta = [&](std::size_t c, std::size_t d) {
    if (interval) return (values[c] - values[d]) * (values[c] - values[d]);
    return c == d ? 0.0 : 1.0;
  };
  double observed = 0, expected = 0;
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t d = 0; d < k; ++d) {
      observed += o[c][d] * delta(c, d);
      expected += nc[c] * nc[d] * delta(c, d);
    }
  }
  observed /= n;
  expected /= n * (n - 1);
  return 1.0 - observed / expected;
}

/// Two-sided exact McNemar p-value from the binomial pmf summed in long double.
inline long double mcnemar(unsigned b, unsigned c) {
  const unsigned n = b + c;
  if (n == 0) return 1.0L;
  const unsigned lo = std::min(b, c);
  long double total = 0;
  for (unsigned k = 0; k <= lo; ++k) {
    long double binom = 1;
    for (unsigned j = 1; j <= k; ++j) binom = binom * (n - k + j) / j;
    total += binom * std::pow(0.5L, (long double)n);
  }
  return std::min<long double>(1.0L, 2.0L * total);
}

}  // namespace xqoracle
