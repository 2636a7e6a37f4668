#pragma once

// Domain-gap measures: inter-class variance (ICV) of class-name text features
// and the survey-based indefinable-boundary (IB) score, with level binning.

#include <cmath>
#include <optional>
#include <string>

#include "cdvito/autodiff.hpp"
#include "cdvito/error.hpp"

namespace cdvito {

enum class IcvLevel { small, medium, large };
enum class IbLevel { slight, moderate, significant };

inline std::string to_string(IcvLevel l) {
  switch (l) {
    case IcvLevel::small: return "small";
    case IcvLevel::medium: return "medium";
    case IcvLevel::large: return "large";
  }
  return "?";
}

inline std::string to_string(IbLevel l) {
  switch (l) {
    case IbLevel::slight: return "slight";
    case IbLevel::moderate: return "moderate";
    case IbLevel::significant: return "significant";
  }
  return "?";
}

// Mean of S = F F^T divided by D: sum_ij S_ij / (N^2 D). Features are used as
// given. Empty for N < 2, where the measure is not applicable.
inline std::optional<double> icv(const ad::Matrix& features) {
  const std::size_t n = features.rows(), d = features.cols();
  if (n < 2) return std::nullopt;
  if (d == 0) throw ShapeError("icv: zero-dimensional features");
  // sum_ij f_i . f_j = |sum_i f_i|^2, but the pairwise form keeps S explicit.
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += features(i, k) * features(j, k);
      total += s;
    }
  }
  return total / (static_cast<double>(n) * static_cast<double>(n) * static_cast<double>(d));
}

inline constexpr double kIcvLow = 0.112;
inline constexpr double kIcvHigh = 0.190;

// Values within this distance of a bin edge count as on the edge; the
// published bounds and values are three-decimal and an edge such as
// 0.112 + 0.078 / 3 does not round-trip exactly in binary.
inline constexpr double kIcvEdgeSlack = 1e-12;

// [low, high] split into equal thirds; each edge belongs to the lower bin and
// values outside the range clamp to the extreme levels.
inline IcvLevel icv_level(double value, double low = kIcvLow, double high = kIcvHigh) {
  if (!(low < high)) throw ContractError("icv_level: low bound must be below high bound");
  const double third = (high - low) / 3.0;
  if (value <= low + third + kIcvEdgeSlack) return IcvLevel::small;
  if (value <= low + 2.0 * third + kIcvEdgeSlack) return IcvLevel::medium;
  return IcvLevel::large;
}

// Weighted survey score 0*p_slight + 2*p_moderate + 6*p_significant.
inline double ib_score(double p_slight, double p_moderate, double p_significant) {
  if (p_slight < 0.0 || p_moderate < 0.0 || p_significant < 0.0)
    throw ValidationError("ib_score: percentages must be non-negative");
  if (std::abs(p_slight + p_moderate + p_significant - 1.0) > 1e-6)
    throw ValidationError("ib_score: percentages must sum to 1");
  return 0.0 * p_slight + 2.0 * p_moderate + 6.0 * p_significant;
}

// [0,2) slight, [2,4) moderate, [4,6] significant.
inline IbLevel ib_level(double value) {
  if (!(value >= 0.0 && value <= 6.0)) throw ValidationError("ib_level: value outside [0, 6]");
  if (value < 2.0) return IbLevel::slight;
  if (value < 4.0) return IbLevel::moderate;
  return IbLevel::significant;
}

struct DomainGapReport {
  std::string dataset_id;
  std::optional<double> icv_value;
  std::optional<IcvLevel> icv_level;
  std::optional<double> ib_value;
  std::optional<IbLevel> ib_level;
  std::string style;  // free-text annotation
};

}  // namespace cdvito
