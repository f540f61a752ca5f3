#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

namespace cimdd {

/// Binary classification metrics with class 1 (fake) as the positive class.
/// Zero-division convention: an empty denominator gives 0.
struct Metrics {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0;

  std::size_t total() const { return tp + fp + fn + tn; }
  nlohmann::json to_json() const;
  static const std::vector<std::string>& csv_columns();
  std::vector<std::string> csv_values() const;
};

/// Throws DataError on length mismatch or labels outside {0, 1}.
Metrics evaluate_metrics(const std::vector<int>& predictions, const std::vector<int>& labels);

}  // namespace cimdd
