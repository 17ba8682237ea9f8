#include "retinet/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <sstream>

#include "retinet/error.hpp"

namespace retinet {

using nlohmann::json;

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> class_names)
    : class_names_(std::move(class_names)), counts_(class_names_.size() * class_names_.size(), 0) {
  if (class_names_.empty()) throw ConfigError("confusion matrix needs at least one class");
}

ConfusionMatrix ConfusionMatrix::from_pairs(std::vector<std::string> class_names,
                                            std::span<const int> truth,
                                            std::span<const int> predicted) {
  if (truth.size() != predicted.size()) {
    throw DataError("from_pairs: " + std::to_string(truth.size()) + " labels vs " +
                    std::to_string(predicted.size()) + " predictions");
  }
  ConfusionMatrix cm(std::move(class_names));
  for (std::size_t i = 0; i < truth.size(); ++i) cm.update(truth[i], predicted[i]);
  return cm;
}

void ConfusionMatrix::update(int true_label, int pred_label) {
  const auto n = static_cast<int>(num_classes());
  if (true_label < 0 || true_label >= n || pred_label < 0 || pred_label >= n) {
    throw DataError("confusion matrix update (" + std::to_string(true_label) + ", " +
                    std::to_string(pred_label) + ") outside " + std::to_string(n) + " classes");
  }
  ++counts_[static_cast<std::size_t>(true_label) * num_classes() + static_cast<std::size_t>(pred_label)];
  ++total_;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.class_names_ != class_names_) throw ConfigError("cannot merge confusion matrices over different classes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  total_ += other.total_;
}

std::uint64_t ConfusionMatrix::at(std::size_t t, std::size_t p) const {
  if (t >= num_classes() || p >= num_classes()) throw DataError("confusion matrix index out of range");
  return counts_[t * num_classes() + p];
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t t) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < num_classes(); ++p) s += at(t, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t p) const {
  std::uint64_t s = 0;
  for (std::size_t t = 0; t < num_classes(); ++t) s += at(t, p);
  return s;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t s = 0;
  for (std::size_t k = 0; k < num_classes(); ++k) s += at(k, k);
  return s;
}

ConfusionMatrix merge(ConfusionMatrix a, const ConfusionMatrix& b) {
  a.merge(b);
  return a;
}

ClassificationReport compute_report(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw DataError("cannot compute a report from an empty confusion matrix");
  ClassificationReport r;
  r.total = cm.total();
  const auto total = static_cast<double>(cm.total());
  r.accuracy = static_cast<double>(cm.trace()) / total;
  const auto n = static_cast<double>(cm.num_classes());
  for (std::size_t k = 0; k < cm.num_classes(); ++k) {
    ClassMetrics m;
    m.name = cm.class_names()[k];
    m.support = cm.row_sum(k);
    const auto diag = static_cast<double>(cm.at(k, k));
    const std::uint64_t predicted = cm.col_sum(k);
    if (predicted > 0) {
      m.precision = diag / static_cast<double>(predicted);
    } else {
      m.degenerate = true;
    }
    if (m.support > 0) {
      m.recall = diag / static_cast<double>(m.support);
    } else {
      m.degenerate = true;
    }
    if (m.precision + m.recall > 0.0) {
      m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    } else {
      m.degenerate = true;
    }
    const double w = static_cast<double>(m.support) / total;
    r.macro.precision += m.precision / n;
    r.macro.recall += m.recall / n;
    r.macro.f1 += m.f1 / n;
    r.weighted.precision += w * m.precision;
    r.weighted.recall += w * m.recall;
    r.weighted.f1 += w * m.f1;
    r.degenerate = r.degenerate || m.degenerate;
    r.classes.push_back(std::move(m));
  }
  return r;
}

ReportFormat parse_report_format(std::string_view name) {
  if (name == "text") return ReportFormat::text;
  if (name == "json") return ReportFormat::json;
  if (name == "csv") return ReportFormat::csv;
  throw ConfigError("unknown report format '" + std::string(name) + "' (expected text, json or csv)");
}

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string exact(double v) { return fmt("%.17g", v); }

std::string render_text(const ClassificationReport& r) {
  std::size_t width = 12;
  for (const auto& c : r.classes) width = std::max(width, c.name.size() + 2);
  std::ostringstream out;
  const auto pad = [&](const std::string& s) { return s + std::string(width - std::min(width, s.size()), ' '); };
  const auto col = [](const std::string& s) {
    return std::string(s.size() < 11 ? 11 - s.size() : 0, ' ') + s;
  };
  out << pad("") << col("Accuracy") << col("Recall") << col("Precision") << col("F1-Score")
      << col("Support") << '\n';
  for (const auto& c : r.classes) {
    out << pad(c.name) << col("-") << col(fmt("%.4f", c.recall)) << col(fmt("%.4f", c.precision))
        << col(fmt("%.4f", c.f1)) << col(std::to_string(c.support)) << (c.degenerate ? "  (degenerate)" : "")
        << '\n';
  }
  const auto agg = [&](const char* name, const AggregateMetrics& a) {
    out << pad(name) << col(fmt("%.4f", r.accuracy)) << col(fmt("%.4f", a.recall))
        << col(fmt("%.4f", a.precision)) << col(fmt("%.4f", a.f1)) << col(std::to_string(r.total))
        << '\n';
  };
  agg("macro avg", r.macro);
  agg("weighted avg", r.weighted);
  return out.str();
}

json aggregate_json(const AggregateMetrics& a) {
  return {{"precision", a.precision}, {"recall", a.recall}, {"f1", a.f1}};
}

std::string render_json(const ClassificationReport& r) {
  json classes = json::array();
  for (const auto& c : r.classes) {
    classes.push_back({{"name", c.name},
                       {"precision", c.precision},
                       {"recall", c.recall},
                       {"f1", c.f1},
                       {"support", c.support},
                       {"degenerate", c.degenerate}});
  }
  const json j = {{"schema", kReportSchema},
                  {"accuracy", r.accuracy},
                  {"total", r.total},
                  {"degenerate", r.degenerate},
                  {"classes", classes},
                  {"macro", aggregate_json(r.macro)},
                  {"weighted", aggregate_json(r.weighted)}};
  return j.dump(2) + "\n";
}

std::string render_csv(const ClassificationReport& r) {
  std::ostringstream out;
  out << "scope,name,accuracy,precision,recall,f1,support,degenerate\n";
  for (const auto& c : r.classes) {
    out << "class," << c.name << ",," << exact(c.precision) << ',' << exact(c.recall) << ','
        << exact(c.f1) << ',' << c.support << ',' << (c.degenerate ? 1 : 0) << '\n';
  }
  const auto agg = [&](const char* scope, const AggregateMetrics& a) {
    out << scope << ",," << exact(r.accuracy) << ',' << exact(a.precision) << ','
        << exact(a.recall) << ',' << exact(a.f1) << ',' << r.total << ','
        << (r.degenerate ? 1 : 0) << '\n';
  };
  agg("macro", r.macro);
  agg("weighted", r.weighted);
  return out.str();
}

AggregateMetrics aggregate_from_json(const json& j) {
  return {j.at("precision").get<double>(), j.at("recall").get<double>(), j.at("f1").get<double>()};
}

std::vector<std::string> split_csv_row(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

double parse_double(const std::string& s, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw DataError("report csv line " + std::to_string(line) + ": bad number '" + s + "'");
  }
  return v;
}

std::uint64_t parse_u64(const std::string& s, std::size_t line) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw DataError("report csv line " + std::to_string(line) + ": bad integer '" + s + "'");
  }
  return v;
}

}  // namespace

std::string render_report(const ClassificationReport& report, ReportFormat format) {
  switch (format) {
    case ReportFormat::text: return render_text(report);
    case ReportFormat::json: return render_json(report);
    case ReportFormat::csv: return render_csv(report);
  }
  throw ConfigError("unknown report format");
}

ClassificationReport parse_report_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    if (j.at("schema").get<std::string>() != kReportSchema) throw DataError("report json: unexpected schema");
    ClassificationReport r;
    r.accuracy = j.at("accuracy").get<double>();
    r.total = j.at("total").get<std::uint64_t>();
    r.degenerate = j.at("degenerate").get<bool>();
    for (const auto& c : j.at("classes")) {
      r.classes.push_back({c.at("name").get<std::string>(), c.at("precision").get<double>(),
                           c.at("recall").get<double>(), c.at("f1").get<double>(),
                           c.at("support").get<std::uint64_t>(), c.at("degenerate").get<bool>()});
    }
    r.macro = aggregate_from_json(j.at("macro"));
    r.weighted = aggregate_from_json(j.at("weighted"));
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("report json: ") + e.what());
  }
}

ClassificationReport parse_report_csv(std::string_view text) {
  ClassificationReport r;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  bool saw_macro = false, saw_weighted = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line != "scope,name,accuracy,precision,recall,f1,support,degenerate") {
        throw DataError("report csv: unexpected header");
      }
      continue;
    }
    if (line.empty()) continue;
    const auto cells = split_csv_row(line);
    if (cells.size() != 8) throw DataError("report csv line " + std::to_string(lineno) + ": expected 8 fields");
    const bool degenerate = parse_u64(cells[7], lineno) != 0;
    if (cells[0] == "class") {
      r.classes.push_back({cells[1], parse_double(cells[3], lineno), parse_double(cells[4], lineno),
                           parse_double(cells[5], lineno), parse_u64(cells[6], lineno), degenerate});
    } else if (cells[0] == "macro" || cells[0] == "weighted") {
      const AggregateMetrics a{parse_double(cells[3], lineno), parse_double(cells[4], lineno),
                               parse_double(cells[5], lineno)};
      r.accuracy = parse_double(cells[2], lineno);
      r.total = parse_u64(cells[6], lineno);
      r.degenerate = degenerate;
      (cells[0] == "macro" ? r.macro : r.weighted) = a;
      (cells[0] == "macro" ? saw_macro : saw_weighted) = true;
    } else {
      throw DataError("report csv line " + std::to_string(lineno) + ": unknown scope '" + cells[0] + "'");
    }
  }
  if (!saw_macro || !saw_weighted) throw DataError("report csv: missing aggregate rows");
  return r;
}

std::string render_confusion_csv(const ConfusionMatrix& cm) {
  std::ostringstream out;
  out << "true\\pred";
  for (const auto& name : cm.class_names()) out << ',' << name;
  out << '\n';
  for (std::size_t t = 0; t < cm.num_classes(); ++t) {
    out << cm.class_names()[t];
    for (std::size_t p = 0; p < cm.num_classes(); ++p) out << ',' << cm.at(t, p);
    out << '\n';
  }
  return out.str();
}

}  // namespace retinet
