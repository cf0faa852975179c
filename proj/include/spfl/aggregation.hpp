#pragma once

#include <string>
#include <vector>

namespace spfl {

enum class Aggregator { FedAvg, Median, RFA, RLR };

std::string to_string(Aggregator a);

struct AggregatorConfig {
  Aggregator method = Aggregator::FedAvg;
  std::vector<double> weights;  // empty = equal
  double eta = 1.0;             // global learning rate (RLR)
  int theta = 4;                // RLR sign threshold
  int weiszfeld_iters = 100;
  double weiszfeld_eps = 1e-6;
};

// Weighted arithmetic mean per coordinate.
std::vector<float> fedavg(const std::vector<std::vector<float>>& updates,
                          const std::vector<double>& weights = {});

// Per-coordinate median; even counts take the mean of the two central values.
std::vector<float> coordinate_median(
    const std::vector<std::vector<float>>& updates);

struct GeoMedianResult {
  std::vector<float> value;
  bool converged = false;
  int iterations = 0;
};

// Smoothed Weiszfeld iteration started from the arithmetic mean.
GeoMedianResult geometric_median(const std::vector<std::vector<float>>& updates,
                                 int iters, double eps);

// Sum of Euclidean distances from m to every update (double accumulation).
double geomedian_objective(const std::vector<std::vector<float>>& updates,
                           const std::vector<float>& m);

// Robust learning rate. `deltas` are client updates relative to the current
// global model. Per coordinate the step is +eta*mean when the absolute sign
// sum reaches theta, otherwise -eta*mean; returns the step to add to the
// global model.
std::vector<float> rlr_aggregate(const std::vector<std::vector<float>>& deltas,
                                 int theta, double eta);

}  // namespace spfl
