#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace densegrade {

using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

// rows = true class, columns = predicted class
inline ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted,
                                 int num_classes) {
  if (truth.size() != predicted.size())
    throw std::invalid_argument("confusion: " + std::to_string(truth.size()) + " truth vs " +
                                std::to_string(predicted.size()) + " predicted labels");
  ConfusionMatrix m(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= num_classes || predicted[i] < 0 || predicted[i] >= num_classes)
      throw std::invalid_argument("confusion: label out of range at sample " + std::to_string(i));
    m[truth[i]][predicted[i]]++;
  }
  return m;
}

struct ClassMetrics {
  std::string label;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::optional<double> auc;
  std::size_t support = 0;
  bool degenerate = false;  // a zero denominator was reported as 0
};

inline std::vector<ClassMetrics> per_class_prf(const ConfusionMatrix& m) {
  const std::size_t k = m.size();
  std::vector<ClassMetrics> out(k);
  for (std::size_t c = 0; c < k; ++c) {
    if (m[c].size() != k) throw std::invalid_argument("per_class_prf: ragged confusion matrix");
    const std::size_t tp = m[c][c];
    std::size_t fp = 0, fn = 0;
    for (std::size_t r = 0; r < k; ++r) {
      if (r != c) {
        fp += m[r][c];
        fn += m[c][r];
      }
    }
    ClassMetrics& cm = out[c];
    cm.support = tp + fn;
    if (tp + fp == 0) {
      cm.precision = 0.0;
      cm.degenerate = true;
    } else {
      cm.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    }
    if (tp + fn == 0) {
      cm.recall = 0.0;
      cm.degenerate = true;
    } else {
      cm.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    }
    cm.f1 = (cm.precision + cm.recall) > 0.0
                ? 2.0 * cm.precision * cm.recall / (cm.precision + cm.recall)
                : 0.0;
  }
  return out;
}

// One-vs-rest AUC by the rank (Mann-Whitney) formulation; tied scores get
// average ranks, which credits each tied positive/negative pair with 1/2.
// Classes absent from the truth labels (or spanning all of it) have no
// defined ROC and are reported as missing.
inline std::vector<std::optional<double>> auc_roc_ovr(std::span<const double> scores,
                                                      std::size_t num_classes,
                                                      std::span<const int> truth) {
  const std::size_t n = truth.size();
  if (scores.size() != n * num_classes)
    throw std::invalid_argument("auc_roc_ovr: score matrix size " +
                                std::to_string(scores.size()) + " does not match " +
                                std::to_string(n) + " x " + std::to_string(num_classes));
  std::vector<std::optional<double>> aucs(num_classes);
  std::vector<std::size_t> order(n);
  std::vector<double> ranks(n);
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t positives = 0;
    for (int t : truth) positives += static_cast<std::size_t>(t) == c;
    if (positives == 0 || positives == n) continue;  // AUC undefined

    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return scores[a * num_classes + c] < scores[b * num_classes + c];
    });
    // average ranks over tie groups (1-based ranks)
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && scores[order[j + 1] * num_classes + c] == scores[order[i] * num_classes + c])
        ++j;
      const double avg_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg_rank;
      i = j + 1;
    }
    double rank_sum = 0.0;
    for (std::size_t s = 0; s < n; ++s)
      if (static_cast<std::size_t>(truth[s]) == c) rank_sum += ranks[s];
    const double p = static_cast<double>(positives);
    const double neg = static_cast<double>(n - positives);
    aucs[c] = (rank_sum - p * (p + 1.0) / 2.0) / (p * neg);
  }
  return aucs;
}

struct MetricsReport {
  std::string task;
  std::vector<std::string> labels;
  ConfusionMatrix matrix;
  std::vector<ClassMetrics> per_class;
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::optional<double> macro_auc;
  std::size_t total = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["task"] = task;
    j["total"] = total;
    j["accuracy"] = accuracy;
    j["macro"] = {{"precision", macro_precision},
                  {"recall", macro_recall},
                  {"f1", macro_f1},
                  {"auc_roc", macro_auc ? nlohmann::ordered_json(*macro_auc)
                                        : nlohmann::ordered_json(nullptr)}};
    j["classes"] = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      const auto& cm = per_class[c];
      nlohmann::ordered_json e;
      e["label"] = labels.at(c);
      e["precision"] = cm.precision;
      e["recall"] = cm.recall;
      e["f1"] = cm.f1;
      e["auc_roc"] = cm.auc ? nlohmann::ordered_json(*cm.auc) : nlohmann::ordered_json(nullptr);
      e["support"] = cm.support;
      e["degenerate"] = cm.degenerate;
      j["classes"].push_back(std::move(e));
    }
    j["confusion"] = matrix;
    return j;
  }

  static MetricsReport from_json(const nlohmann::ordered_json& j) {
    MetricsReport r;
    r.task = j.at("task").get<std::string>();
    r.total = j.at("total").get<std::size_t>();
    r.accuracy = j.at("accuracy").get<double>();
    r.macro_precision = j.at("macro").at("precision").get<double>();
    r.macro_recall = j.at("macro").at("recall").get<double>();
    r.macro_f1 = j.at("macro").at("f1").get<double>();
    if (!j.at("macro").at("auc_roc").is_null())
      r.macro_auc = j.at("macro").at("auc_roc").get<double>();
    for (const auto& e : j.at("classes")) {
      r.labels.push_back(e.at("label").get<std::string>());
      ClassMetrics cm;
      cm.label = r.labels.back();
      cm.precision = e.at("precision").get<double>();
      cm.recall = e.at("recall").get<double>();
      cm.f1 = e.at("f1").get<double>();
      if (!e.at("auc_roc").is_null()) cm.auc = e.at("auc_roc").get<double>();
      cm.support = e.at("support").get<std::size_t>();
      cm.degenerate = e.at("degenerate").get<bool>();
      r.per_class.push_back(std::move(cm));
    }
    r.matrix = j.at("confusion").get<ConfusionMatrix>();
    return r;
  }

  std::string to_json_string() const { return to_json().dump(2) + "\n"; }

  // aligned table at 4 decimals, one row per class
  std::string to_text() const {
    std::ostringstream os;
    std::size_t label_width = 5;
    for (const auto& l : labels) label_width = std::max(label_width, l.size());
    os << std::left << std::setw(static_cast<int>(label_width) + 2) << "Class" << std::right
       << std::setw(10) << "Precision" << std::setw(9) << "Recall" << std::setw(10) << "F1-Score"
       << std::setw(9) << "AUC-ROC" << std::setw(9) << "Support" << "\n";
    os << std::fixed << std::setprecision(4);
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      const auto& cm = per_class[c];
      os << std::left << std::setw(static_cast<int>(label_width) + 2) << labels[c] << std::right
         << std::setw(10) << cm.precision << std::setw(9) << cm.recall << std::setw(10) << cm.f1;
      if (cm.auc)
        os << std::setw(9) << *cm.auc;
      else
        os << std::setw(9) << "-";
      os << std::setw(9) << cm.support;
      if (cm.degenerate) os << "  (degenerate)";
      os << "\n";
    }
    os << "\naccuracy " << accuracy << "  (" << total << " samples)\n";
    os << "macro    " << macro_precision << " / " << macro_recall << " / " << macro_f1;
    if (macro_auc) os << " / " << *macro_auc;
    os << "\n";
    return os.str();
  }
};

inline MetricsReport summarize(const std::string& task, std::vector<std::string> labels,
                               const ConfusionMatrix& matrix,
                               const std::vector<std::optional<double>>& aucs) {
  const std::size_t k = matrix.size();
  if (labels.size() != k || aucs.size() != k)
    throw std::invalid_argument("summarize: labels/aucs do not match matrix size");
  MetricsReport report;
  report.task = task;
  report.labels = std::move(labels);
  report.matrix = matrix;
  report.per_class = per_class_prf(matrix);

  std::size_t total = 0, correct = 0;
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t c = 0; c < k; ++c) {
      total += matrix[r][c];
      if (r == c) correct += matrix[r][c];
    }
  report.total = total;
  report.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;

  double sp = 0, sr = 0, sf = 0, sa = 0;
  std::size_t auc_defined = 0;
  for (std::size_t c = 0; c < k; ++c) {
    report.per_class[c].label = report.labels[c];
    report.per_class[c].auc = aucs[c];
    sp += report.per_class[c].precision;
    sr += report.per_class[c].recall;
    sf += report.per_class[c].f1;
    if (aucs[c]) {
      sa += *aucs[c];
      ++auc_defined;
    }
  }
  if (k > 0) {
    report.macro_precision = sp / static_cast<double>(k);
    report.macro_recall = sr / static_cast<double>(k);
    report.macro_f1 = sf / static_cast<double>(k);
  }
  if (auc_defined > 0) report.macro_auc = sa / static_cast<double>(auc_defined);
  return report;
}

}  // namespace densegrade
