#pragma once

// Continuous one-parameter normal-ogive kernel and response normalization.

#include <cmath>
#include <numbers>
#include <span>
#include <string>

#include "perm/error.hpp"

namespace perm {

namespace detail {
inline void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) throw Error(ErrorCode::kDomain, std::string(what) + " must be finite");
}
}  // namespace detail

/// Standard normal CDF via erfc, which keeps full relative accuracy in the
/// lower tail (Phi(-6) ~ 1e-9 is not computed as 1 - something).
inline double std_normal_cdf(double x) {
  detail::require_finite(x, "std_normal_cdf argument");
  return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

inline double std_normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

/// P(Z <= a - d) for Z ~ N(0,1): probability that a student of the given
/// ability reaches at least the normalized average score on an item of the
/// given difficulty.
inline double ogive_probability(double ability, double difficulty) {
  detail::require_finite(ability, "ability");
  detail::require_finite(difficulty, "difficulty");
  return std_normal_cdf(ability - difficulty);
}

/// z-score in raw-reward units; fitted once on the Stage-1 corpus.
struct Normalizer {
  double mean = 0.0;
  double sd = 1.0;
  std::size_t count = 0;

  bool usable() const { return count >= 2 && sd > 0.0 && std::isfinite(sd) && std::isfinite(mean); }
};

/// Sample mean and (n-1) standard deviation.
inline Normalizer fit_normalizer(std::span<const double> raw_rewards) {
  if (raw_rewards.size() < 2) {
    throw Error(ErrorCode::kInsufficientData, "normalizer needs at least 2 samples, got " +
                                                  std::to_string(raw_rewards.size()));
  }
  double mean = 0.0;
  for (double x : raw_rewards) {
    detail::require_finite(x, "raw reward");
    mean += x;
  }
  mean /= static_cast<double>(raw_rewards.size());
  double ss = 0.0;
  for (double x : raw_rewards) ss += (x - mean) * (x - mean);
  const double var = ss / static_cast<double>(raw_rewards.size() - 1);
  if (!(var > 0.0)) throw Error(ErrorCode::kInsufficientData, "raw rewards have zero variance");
  return Normalizer{mean, std::sqrt(var), raw_rewards.size()};
}

inline double normalize(double raw_reward, const Normalizer& n) {
  detail::require_finite(raw_reward, "raw reward");
  if (!n.usable()) throw Error(ErrorCode::kInvalidArgument, "normalizer not fitted");
  return (raw_reward - n.mean) / n.sd;
}

inline double denormalize(double response, const Normalizer& n) {
  if (!n.usable()) throw Error(ErrorCode::kInvalidArgument, "normalizer not fitted");
  return response * n.sd + n.mean;
}

}  // namespace perm
