#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>

namespace phenocnn {

struct ConfusionMatrix {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t tn = 0;
  std::int64_t fn = 0;

  std::int64_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionMatrix&) const = default;
};

/// A score that may be undefined (zero denominator). std::nullopt is the
/// undefined marker; it is never silently turned into 0 or NaN.
using Metric = std::optional<double>;

inline ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("confusion: length mismatch");
  if (predictions.empty()) throw std::invalid_argument("confusion: empty input");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int p = predictions[i];
    const int y = labels[i];
    if ((p != 0 && p != 1) || (y != 0 && y != 1)) throw std::invalid_argument("confusion: values must be 0/1");
    if (p == 1 && y == 1) ++cm.tp;
    if (p == 1 && y == 0) ++cm.fp;
    if (p == 0 && y == 0) ++cm.tn;
    if (p == 0 && y == 1) ++cm.fn;
  }
  return cm;
}

/// TP / (TP + FP).
inline Metric ppv(const ConfusionMatrix& cm) {
  if (cm.tp + cm.fp == 0) return std::nullopt;
  return static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fp);
}

/// TP / (TP + FN).
inline Metric sensitivity(const ConfusionMatrix& cm) {
  if (cm.tp + cm.fn == 0) return std::nullopt;
  return static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fn);
}

/// Harmonic mean of two rates; 0 when both are 0.
inline double f1_from(double ppv_value, double sensitivity_value) {
  const double denom = ppv_value + sensitivity_value;
  return denom == 0.0 ? 0.0 : 2.0 * ppv_value * sensitivity_value / denom;
}

/// 2TP / (2TP + FP + FN): equals the harmonic mean of PPV and sensitivity
/// whenever both are defined, is 0 when nothing was found, and is undefined
/// only when there are neither predicted nor actual positives.
inline Metric f1(const ConfusionMatrix& cm) {
  const std::int64_t denom = 2 * cm.tp + cm.fp + cm.fn;
  if (denom == 0) return std::nullopt;
  const auto p = ppv(cm);
  const auto s = sensitivity(cm);
  if (p && s) return f1_from(*p, *s);
  return 0.0;
}

struct MetricTriple {
  Metric ppv;
  Metric sensitivity;
  Metric f1;
};

inline MetricTriple metric_triple(const ConfusionMatrix& cm) { return {ppv(cm), sensitivity(cm), f1(cm)}; }

/// Integer percentage (0..100) or "NA".
inline std::string format_percent(const Metric& m) {
  if (!m) return "NA";
  return std::to_string(static_cast<long>(std::lround(*m * 100.0)));
}

inline std::string format_decimal(const Metric& m) {
  if (!m) return "NA";
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << *m;
  return os.str();
}

/// One metric report row: phenotype,model,ppv,sensitivity,f1 as integer
/// percentages, then the same three at full precision, then the counts.
struct MetricRow {
  std::string phenotype;
  std::string model;
  ConfusionMatrix cm;

  static constexpr const char* kHeader = "phenotype,model,ppv,sensitivity,f1,ppv_exact,sensitivity_exact,f1_exact,tp,fp,tn,fn";

  std::string to_csv() const {
    const auto m = metric_triple(cm);
    std::ostringstream os;
    os << phenotype << ',' << model << ',' << format_percent(m.ppv) << ',' << format_percent(m.sensitivity) << ','
       << format_percent(m.f1) << ',' << format_decimal(m.ppv) << ',' << format_decimal(m.sensitivity) << ','
       << format_decimal(m.f1) << ',' << cm.tp << ',' << cm.fp << ',' << cm.tn << ',' << cm.fn;
    return os.str();
  }
};

}  // namespace phenocnn
