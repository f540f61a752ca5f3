#include "cimdd/metrics.hpp"

#include <cstdio>

#include "cimdd/error.hpp"

namespace cimdd {

namespace {

double ratio(std::size_t a, std::size_t b) { return b == 0 ? 0.0 : double(a) / double(b); }

double harmonic(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

Metrics evaluate_metrics(const std::vector<int>& pred, const std::vector<int>& labels) {
  if (pred.size() != labels.size())
    throw DataError("metrics: " + std::to_string(pred.size()) + " predictions for " + std::to_string(labels.size()) +
                    " labels");
  Metrics m;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], y = labels[i];
    if ((p != 0 && p != 1) || (y != 0 && y != 1))
      throw DataError("metrics: entry " + std::to_string(i) + " is not a 0/1 label");
    if (p == 1 && y == 1) ++m.tp;
    else if (p == 1) ++m.fp;
    else if (y == 1) ++m.fn;
    else ++m.tn;
  }
  m.accuracy = ratio(m.tp + m.tn, m.total());
  m.precision = ratio(m.tp, m.tp + m.fp);
  m.recall = ratio(m.tp, m.tp + m.fn);
  m.f1 = harmonic(m.precision, m.recall);
  // Class 0 viewed as positive.
  const double p0 = ratio(m.tn, m.tn + m.fn), r0 = ratio(m.tn, m.tn + m.fp);
  m.macro_precision = (m.precision + p0) / 2.0;
  m.macro_recall = (m.recall + r0) / 2.0;
  m.macro_f1 = (m.f1 + harmonic(p0, r0)) / 2.0;
  return m;
}

nlohmann::json Metrics::to_json() const {
  return {{"accuracy", accuracy},
          {"precision", precision},
          {"recall", recall},
          {"f1", f1},
          {"macro_precision", macro_precision},
          {"macro_recall", macro_recall},
          {"macro_f1", macro_f1},
          {"tp", tp},
          {"fp", fp},
          {"fn", fn},
          {"tn", tn}};
}

const std::vector<std::string>& Metrics::csv_columns() {
  static const std::vector<std::string> c{"accuracy",        "precision",    "recall",   "f1", "macro_precision",
                                          "macro_recall",    "macro_f1",     "tp",       "fp", "fn",
                                          "tn"};
  return c;
}

std::vector<std::string> Metrics::csv_values() const {
  return {fmt(accuracy),     fmt(precision),       fmt(recall),          fmt(f1),
          fmt(macro_precision), fmt(macro_recall), fmt(macro_f1),        std::to_string(tp),
          std::to_string(fp), std::to_string(fn),  std::to_string(tn)};
}

}  // namespace cimdd
