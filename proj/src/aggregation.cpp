#include "spfl/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace spfl {

namespace {

void require_nonempty(const std::vector<std::vector<float>>& updates,
                      const char* who) {
  if (updates.empty())
    throw std::invalid_argument(std::string(who) + ": empty update list");
  for (const auto& u : updates)
    if (u.size() != updates[0].size())
      throw std::invalid_argument(std::string(who) + ": length mismatch");
}

}  // namespace

std::string to_string(Aggregator a) {
  switch (a) {
    case Aggregator::FedAvg: return "FedAvg";
    case Aggregator::Median: return "Median";
    case Aggregator::RFA: return "RFA";
    case Aggregator::RLR: return "RLR";
  }
  return "?";
}

std::vector<float> fedavg(const std::vector<std::vector<float>>& updates,
                          const std::vector<double>& weights) {
  require_nonempty(updates, "fedavg");
  const size_t m = updates[0].size();
  std::vector<double> w(updates.size(), 1.0);
  if (!weights.empty()) {
    if (weights.size() != updates.size())
      throw std::invalid_argument("fedavg: weight count mismatch");
    w = weights;
  }
  double total = 0.0;
  for (double v : w) {
    if (v < 0.0) throw std::invalid_argument("fedavg: negative weight");
    total += v;
  }
  if (total <= 0.0) throw std::invalid_argument("fedavg: weights sum to zero");
  std::vector<double> acc(m, 0.0);
  for (size_t i = 0; i < updates.size(); ++i)
    for (size_t j = 0; j < m; ++j) acc[j] += w[i] * updates[i][j];
  std::vector<float> out(m);
  for (size_t j = 0; j < m; ++j)
    out[j] = static_cast<float>(acc[j] / total);
  return out;
}

std::vector<float> coordinate_median(
    const std::vector<std::vector<float>>& updates) {
  require_nonempty(updates, "coordinate_median");
  const size_t n = updates.size();
  const size_t m = updates[0].size();
  std::vector<float> out(m);
  std::vector<float> col(n);
  for (size_t j = 0; j < m; ++j) {
    for (size_t i = 0; i < n; ++i) col[i] = updates[i][j];
    size_t mid = n / 2;
    std::nth_element(col.begin(), col.begin() + mid, col.end());
    if (n % 2 == 1) {
      out[j] = col[mid];
    } else {
      float hi = col[mid];
      float lo = *std::max_element(col.begin(), col.begin() + mid);
      out[j] = (lo + hi) / 2.0f;
    }
  }
  return out;
}

double geomedian_objective(const std::vector<std::vector<float>>& updates,
                           const std::vector<float>& m) {
  double total = 0.0;
  for (const auto& u : updates) {
    double d = 0.0;
    for (size_t j = 0; j < m.size(); ++j) {
      double diff = static_cast<double>(u[j]) - m[j];
      d += diff * diff;
    }
    total += std::sqrt(d);
  }
  return total;
}

GeoMedianResult geometric_median(const std::vector<std::vector<float>>& updates,
                                 int iters, double eps) {
  require_nonempty(updates, "geometric_median");
  if (eps <= 0.0)
    throw std::invalid_argument("geometric_median: eps must be > 0");
  const size_t n = updates.size();
  const size_t m = updates[0].size();
  std::vector<double> cur(m, 0.0);
  for (const auto& u : updates)
    for (size_t j = 0; j < m; ++j) cur[j] += u[j];
  for (size_t j = 0; j < m; ++j) cur[j] /= static_cast<double>(n);

  GeoMedianResult result;
  result.converged = false;
  std::vector<double> next(m);
  for (int it = 0; it < iters; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    double wsum = 0.0;
    for (const auto& u : updates) {
      double d = 0.0;
      for (size_t j = 0; j < m; ++j) {
        double diff = static_cast<double>(u[j]) - cur[j];
        d += diff * diff;
      }
      d = std::max(std::sqrt(d), eps);
      double w = 1.0 / d;
      wsum += w;
      for (size_t j = 0; j < m; ++j) next[j] += w * u[j];
    }
    double move = 0.0;
    for (size_t j = 0; j < m; ++j) {
      next[j] /= wsum;
      double diff = next[j] - cur[j];
      move += diff * diff;
    }
    cur.swap(next);
    result.iterations = it + 1;
    if (std::sqrt(move) <= eps * 1e-3) {
      result.converged = true;
      break;
    }
  }
  result.value.resize(m);
  for (size_t j = 0; j < m; ++j)
    result.value[j] = static_cast<float>(cur[j]);
  return result;
}

std::vector<float> rlr_aggregate(const std::vector<std::vector<float>>& deltas,
                                 int theta, double eta) {
  require_nonempty(deltas, "rlr_aggregate");
  if (theta < 0) throw std::invalid_argument("rlr_aggregate: theta < 0");
  const size_t n = deltas.size();
  const size_t m = deltas[0].size();
  std::vector<float> out(m);
  for (size_t j = 0; j < m; ++j) {
    int signs = 0;
    double mean = 0.0;
    for (size_t i = 0; i < n; ++i) {
      float v = deltas[i][j];
      signs += v > 0.0f ? 1 : (v < 0.0f ? -1 : 0);
      mean += v;
    }
    mean /= static_cast<double>(n);
    double rate = std::abs(signs) >= theta ? eta : -eta;
    out[j] = static_cast<float>(rate * mean);
  }
  return out;
}

}  // namespace spfl
