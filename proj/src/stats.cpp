#include "brainage/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "brainage/error.hpp"

namespace brainage {

std::vector<double> average_ranks(const std::vector<double>& values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && values[idx[j + 1]] == values[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

PairedComparison wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                      const std::string& label_a, const std::string& label_b) {
  if (a.size() != b.size()) {
    throw ValidationError("paired lists differ in length (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
  }
  PairedComparison r;
  r.label_a = label_a;
  r.label_b = label_b;
  r.a = a;
  r.b = b;
  std::vector<double> mag;
  std::vector<bool> pos;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (!std::isfinite(d)) throw ValidationError("non-finite paired value at index " + std::to_string(i));
    if (d == 0.0) continue;
    mag.push_back(std::abs(d));
    pos.push_back(d > 0.0);
  }
  const std::size_t n = mag.size();
  r.n_effective = n;
  if (n < 5) {
    throw InsufficientDataError("signed-rank test needs >= 5 nonzero differences, got " + std::to_string(n));
  }
  const std::vector<double> ranks = average_ranks(mag);
  for (std::size_t i = 0; i < n; ++i) (pos[i] ? r.w_plus : r.w_minus) += ranks[i];
  r.statistic = std::min(r.w_plus, r.w_minus);

  if (n <= kWilcoxonExactMax) {
    // Average ranks are multiples of 1/2, so doubled ranks are integers and the
    // null distribution of 2*W+ is a subset-sum count.
    std::vector<int> twice(n);
    int total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      twice[i] = static_cast<int>(std::lround(2.0 * ranks[i]));
      total += twice[i];
    }
    std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
    count[0] = 1.0;
    int reach = 0;
    for (int t : twice) {
      for (int s = reach; s >= 0; --s) {
        if (count[static_cast<std::size_t>(s)] != 0.0) count[static_cast<std::size_t>(s + t)] += count[static_cast<std::size_t>(s)];
      }
      reach += t;
    }
    const int w = static_cast<int>(std::lround(2.0 * r.w_plus));
    double lower = 0.0;
    double upper = 0.0;
    for (int s = 0; s <= total; ++s) {
      if (s <= w) lower += count[static_cast<std::size_t>(s)];
      if (s >= w) upper += count[static_cast<std::size_t>(s)];
    }
    const double all = std::ldexp(1.0, static_cast<int>(n));
    r.p_value = std::min(1.0, 2.0 * std::min(lower, upper) / all);
    r.exact = true;
    return r;
  }

  const auto nn = static_cast<double>(n);
  const double mean = nn * (nn + 1.0) / 4.0;
  double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0;
  std::vector<double> sorted = mag;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && sorted[j] == sorted[i]) ++j;
    const auto t = static_cast<double>(j - i);
    var -= (t * t * t - t) / 48.0;
    i = j;
  }
  if (var <= 0.0) {
    r.z = 0.0;
    r.p_value = 1.0;
    return r;
  }
  r.z = (r.w_plus - mean) / std::sqrt(var);
  r.p_value = std::min(1.0, std::erfc(std::abs(*r.z) / std::sqrt(2.0)));
  return r;
}

CorrectionResult holm_bonferroni(const std::vector<double>& p_values, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
  if (p_values.empty()) throw ValidationError("Holm correction needs at least one p-value");
  for (std::size_t i = 0; i < p_values.size(); ++i) {
    const double p = p_values[i];
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("p-value " + std::to_string(i) + " outside [0, 1]");
  }
  CorrectionResult r;
  r.alpha = alpha;
  r.p_values = p_values;
  const std::size_t m = p_values.size();
  r.order.resize(m);
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(),
                   [&](std::size_t i, std::size_t j) { return p_values[i] < p_values[j]; });
  r.reject.assign(m, false);
  r.adjusted.assign(m, 0.0);
  bool stopped = false;
  double running = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t i = r.order[k];
    const double thr = alpha / static_cast<double>(m - k);
    r.thresholds.push_back(thr);
    if (!stopped && p_values[i] <= thr) {
      r.reject[i] = true;
    } else {
      stopped = true;
    }
    running = std::max(running, std::min(1.0, static_cast<double>(m - k) * p_values[i]));
    r.adjusted[i] = running;
  }
  return r;
}

}  // namespace brainage
