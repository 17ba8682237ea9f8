#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace retinet {

// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::vector<std::string> class_names);

  static ConfusionMatrix from_pairs(std::vector<std::string> class_names,
                                    std::span<const int> truth, std::span<const int> predicted);

  // DataError when either label is out of range.
  void update(int true_label, int pred_label);

  // Adds counts from a shard over the same classes (ConfigError otherwise).
  void merge(const ConfusionMatrix& other);

  [[nodiscard]] std::size_t num_classes() const noexcept { return class_names_.size(); }
  [[nodiscard]] const std::vector<std::string>& class_names() const noexcept { return class_names_; }
  [[nodiscard]] std::uint64_t at(std::size_t true_label, std::size_t pred_label) const;
  [[nodiscard]] std::uint64_t row_sum(std::size_t true_label) const;
  [[nodiscard]] std::uint64_t col_sum(std::size_t pred_label) const;
  [[nodiscard]] std::uint64_t trace() const;
  [[nodiscard]] std::uint64_t total() const noexcept { return total_; }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::vector<std::string> class_names_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

ConfusionMatrix merge(ConfusionMatrix a, const ConfusionMatrix& b);

struct ClassMetrics {
  std::string name;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::uint64_t support = 0;
  // Set when a zero denominator forced one of the metrics to 0.
  bool degenerate = false;

  friend bool operator==(const ClassMetrics&, const ClassMetrics&) = default;
};

struct AggregateMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  friend bool operator==(const AggregateMetrics&, const AggregateMetrics&) = default;
};

struct ClassificationReport {
  std::vector<ClassMetrics> classes;
  double accuracy = 0.0;
  std::uint64_t total = 0;
  AggregateMetrics macro;     // unweighted mean over classes
  AggregateMetrics weighted;  // support-weighted mean
  bool degenerate = false;    // any class degenerate

  friend bool operator==(const ClassificationReport&, const ClassificationReport&) = default;
};

// precision = diag/colsum, recall = diag/rowsum, F1 = 2PR/(P+R), accuracy =
// trace/total. DataError on an empty matrix.
ClassificationReport compute_report(const ConfusionMatrix& cm);

enum class ReportFormat { text, json, csv };

ReportFormat parse_report_format(std::string_view name);  // ConfigError on unknown names

inline constexpr std::string_view kReportSchema = "retinet.report/v1";

std::string render_report(const ClassificationReport& report, ReportFormat format);

// Inverses of the json/csv renderings (DataError on malformed input).
ClassificationReport parse_report_json(std::string_view text);
ClassificationReport parse_report_csv(std::string_view text);

// Header row of predicted class names, one row per true class.
std::string render_confusion_csv(const ConfusionMatrix& cm);

}  // namespace retinet
