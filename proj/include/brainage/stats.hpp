#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace brainage {

struct PairedComparison {
  std::string label_a;
  std::string label_b;
  std::vector<double> a;
  std::vector<double> b;
  double w_plus = 0.0;   // rank sum of positive differences a - b
  double w_minus = 0.0;
  double statistic = 0.0;  // min(w_plus, w_minus)
  double p_value = 1.0;    // two-sided
  std::size_t n_effective = 0;
  bool exact = false;
  std::optional<double> z;
};

// Largest n_effective handled by exact enumeration of the null distribution.
inline constexpr std::size_t kWilcoxonExactMax = 12;

// Signed-rank test on a - b. Zero differences are dropped, ties get average
// ranks. Exact null distribution for n_effective <= 12, otherwise a normal
// approximation with tie-corrected variance. Needs >= 5 nonzero differences.
PairedComparison wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                      const std::string& label_a = "A", const std::string& label_b = "B");

// Average ranks (1-based) of `values`.
std::vector<double> average_ranks(const std::vector<double>& values);

struct CorrectionResult {
  std::vector<double> p_values;     // input order
  std::vector<std::size_t> order;   // indices sorted by ascending p
  std::vector<double> thresholds;   // alpha / (m - i + 1) along `order`
  std::vector<bool> reject;         // input order
  std::vector<double> adjusted;     // Holm-adjusted p, input order
  double alpha = 0.05;
};

CorrectionResult holm_bonferroni(const std::vector<double>& p_values, double alpha = 0.05);

}  // namespace brainage
