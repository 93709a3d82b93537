#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "densegrade/metrics.hpp"
#include "densegrade/rng.hpp"

using namespace densegrade;

namespace {

TEST(Confusion, PerfectPredictionsAreDiagonal) {
  std::vector<int> truth = {0, 1, 2, 1, 0};
  auto m = confusion(truth, truth, 3);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      if (r != c) EXPECT_EQ(m[r][c], 0u);
  EXPECT_EQ(m[0][0], 2u);
  EXPECT_EQ(m[1][1], 2u);
  EXPECT_EQ(m[2][2], 1u);
}

TEST(Confusion, HandCase) {
  std::vector<int> truth = {0, 0, 1};
  std::vector<int> pred = {0, 1, 1};
  auto m = confusion(truth, pred, 2);
  EXPECT_EQ(m, (ConfusionMatrix{{1, 1}, {0, 1}}));
}

TEST(Confusion, LengthMismatchIsError) {
  std::vector<int> truth = {0, 1};
  std::vector<int> pred = {0};
  EXPECT_THROW(confusion(truth, pred, 2), std::invalid_argument);
}

TEST(Confusion, RowSumsMatchDirectTally) {
  RngStream rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const int k = 3 + static_cast<int>(rng.next_below(5));
    std::vector<int> truth, pred;
    for (int i = 0; i < 200; ++i) {
      truth.push_back(static_cast<int>(rng.next_below(k)));
      pred.push_back(static_cast<int>(rng.next_below(k)));
    }
    auto m = confusion(truth, pred, k);
    std::map<int, std::size_t> tally;
    for (int t : truth) tally[t]++;
    for (int c = 0; c < k; ++c) {
      std::size_t row = 0;
      for (int j = 0; j < k; ++j) row += m[c][j];
      EXPECT_EQ(row, tally[c]);
    }
  }
}

TEST(PerClassPrf, TableRowReconstruction) {
  // class 0 with TP=55, FP=1, FN=2 (support 57): the unique integer counts
  // consistent with the published per-class row
  ConfusionMatrix m = {{55, 2}, {1, 100}};
  auto metrics = per_class_prf(m);
  EXPECT_EQ(metrics[0].support, 57u);
  EXPECT_NEAR(metrics[0].precision, 0.9821, 5e-5);
  EXPECT_NEAR(metrics[0].recall, 0.9649, 5e-5);
  EXPECT_NEAR(metrics[0].f1, 0.9735, 5e-5);
}

TEST(PerClassPrf, PerfectClassifier) {
  ConfusionMatrix m = {{5, 0, 0}, {0, 7, 0}, {0, 0, 3}};
  for (const auto& cm : per_class_prf(m)) {
    EXPECT_DOUBLE_EQ(cm.precision, 1.0);
    EXPECT_DOUBLE_EQ(cm.recall, 1.0);
    EXPECT_DOUBLE_EQ(cm.f1, 1.0);
    EXPECT_FALSE(cm.degenerate);
  }
}

TEST(PerClassPrf, ZeroDenominatorsAreFlagged) {
  // class 2 never occurs and is never predicted
  ConfusionMatrix m = {{4, 1, 0}, {0, 5, 0}, {0, 0, 0}};
  auto metrics = per_class_prf(m);
  EXPECT_TRUE(metrics[2].degenerate);
  EXPECT_DOUBLE_EQ(metrics[2].precision, 0.0);
  EXPECT_DOUBLE_EQ(metrics[2].recall, 0.0);
  EXPECT_DOUBLE_EQ(metrics[2].f1, 0.0);
}

// brute-force per-sample counting oracle
struct PrfOracle {
  double precision, recall, f1;
  std::size_t support;
};
PrfOracle prf_oracle(std::span<const int> truth, std::span<const int> pred, int cls) {
  std::size_t tp = 0, fp = 0, fn = 0, support = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == cls) ++support;
    if (truth[i] == cls && pred[i] == cls) ++tp;
    if (truth[i] != cls && pred[i] == cls) ++fp;
    if (truth[i] == cls && pred[i] != cls) ++fn;
  }
  PrfOracle o{};
  o.support = support;
  o.precision = (tp + fp) ? static_cast<double>(tp) / (tp + fp) : 0.0;
  o.recall = (tp + fn) ? static_cast<double>(tp) / (tp + fn) : 0.0;
  o.f1 = (o.precision + o.recall) > 0 ? 2 * o.precision * o.recall / (o.precision + o.recall) : 0.0;
  return o;
}

TEST(PerClassPrf, MatchesBruteForceOracleExactly) {
  RngStream rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 5;
    std::vector<int> truth, pred;
    const int n = 20 + static_cast<int>(rng.next_below(60));
    for (int i = 0; i < n; ++i) {
      truth.push_back(static_cast<int>(rng.next_below(k)));
      pred.push_back(static_cast<int>(rng.next_below(k)));
    }
    auto metrics = per_class_prf(confusion(truth, pred, k));
    for (int c = 0; c < k; ++c) {
      auto oracle = prf_oracle(truth, pred, c);
      EXPECT_EQ(metrics[c].precision, oracle.precision) << "trial " << trial;
      EXPECT_EQ(metrics[c].recall, oracle.recall) << "trial " << trial;
      EXPECT_EQ(metrics[c].f1, oracle.f1) << "trial " << trial;
      EXPECT_EQ(metrics[c].support, oracle.support) << "trial " << trial;
    }
  }
}

TEST(AucRoc, HandCaseBinaryScores) {
  // binary task with class-1 scores [0.1, 0.4, 0.35, 0.8]; 3 of the 4
  // positive/negative pairs are ordered correctly -> 0.75
  std::vector<double> scores = {0.9, 0.1, 0.6, 0.4, 0.65, 0.35, 0.2, 0.8};
  std::vector<int> truth = {0, 0, 1, 1};
  auto aucs = auc_roc_ovr(scores, 2, truth);
  ASSERT_TRUE(aucs[1].has_value());
  EXPECT_DOUBLE_EQ(*aucs[1], 0.75);
}

TEST(AucRoc, PerfectSeparation) {
  std::vector<double> scores = {0.9, 0.1, 0.8, 0.2, 0.1, 0.9, 0.3, 0.7};
  std::vector<int> truth = {0, 0, 1, 1};
  auto aucs = auc_roc_ovr(scores, 2, truth);
  EXPECT_DOUBLE_EQ(*aucs[0], 1.0);
  EXPECT_DOUBLE_EQ(*aucs[1], 1.0);
}

TEST(AucRoc, AllTiedScoresGiveHalf) {
  std::vector<double> scores(8, 0.5);
  std::vector<int> truth = {0, 1, 0, 1};
  auto aucs = auc_roc_ovr(scores, 2, truth);
  EXPECT_DOUBLE_EQ(*aucs[0], 0.5);
  EXPECT_DOUBLE_EQ(*aucs[1], 0.5);
}

TEST(AucRoc, AbsentClassIsMissingNotZero) {
  std::vector<double> scores = {0.5, 0.3, 0.2, 0.4, 0.5, 0.1};
  std::vector<int> truth = {0, 0};
  auto aucs = auc_roc_ovr(scores, 3, truth);
  EXPECT_FALSE(aucs[1].has_value());
  EXPECT_FALSE(aucs[2].has_value());
  EXPECT_FALSE(aucs[0].has_value());  // class 0 spans all samples: no negatives
}

// trapezoidal area under the threshold-swept ROC curve, the independent
// second route kept as the test oracle
double trapezoid_auc(std::span<const double> scores, std::span<const int> truth, int cls) {
  std::vector<double> uniq(scores.begin(), scores.end());
  std::sort(uniq.begin(), uniq.end(), std::greater<>());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::size_t pos = 0, neg = 0;
  for (int t : truth) (t == cls ? pos : neg)++;
  if (pos == 0 || neg == 0) return std::nan("");
  double area = 0.0, prev_fpr = 0.0, prev_tpr = 0.0;
  for (double thr : uniq) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (scores[i] >= thr) (truth[i] == cls ? tp : fp)++;
    }
    const double tpr = static_cast<double>(tp) / pos;
    const double fpr = static_cast<double>(fp) / neg;
    area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
    prev_fpr = fpr;
    prev_tpr = tpr;
  }
  area += (1.0 - prev_fpr) * (1.0 + prev_tpr) / 2.0;
  return area;
}

TEST(AucRoc, MannWhitneyEqualsTrapezoidalOracle) {
  RngStream rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 10 + static_cast<int>(rng.next_below(40));
    std::vector<int> truth;
    std::vector<double> col;  // scores for the checked class
    for (int i = 0; i < n; ++i) {
      truth.push_back(static_cast<int>(rng.next_below(2)));
      // quantized scores so ties actually occur
      col.push_back(static_cast<double>(rng.next_below(8)) / 8.0);
    }
    std::vector<double> scores(2 * n);
    for (int i = 0; i < n; ++i) {
      scores[i * 2 + 1] = col[i];
      scores[i * 2 + 0] = 1.0 - col[i];
    }
    auto aucs = auc_roc_ovr(scores, 2, truth);
    const double oracle = trapezoid_auc(col, truth, 1);
    if (std::isnan(oracle)) {
      EXPECT_FALSE(aucs[1].has_value());
    } else {
      ASSERT_TRUE(aucs[1].has_value());
      EXPECT_NEAR(*aucs[1], oracle, 1e-12) << "trial " << trial;
    }
  }
}

TEST(AucRoc, InvariantUnderMonotoneTransform) {
  RngStream rng(4);
  const int n = 50;
  std::vector<int> truth;
  std::vector<double> scores(2 * n);
  for (int i = 0; i < n; ++i) {
    truth.push_back(static_cast<int>(rng.next_below(2)));
    const double s = rng.next_double();
    scores[i * 2] = 1 - s;
    scores[i * 2 + 1] = s;
  }
  auto base = auc_roc_ovr(scores, 2, truth);
  std::vector<double> warped(2 * n);
  for (int i = 0; i < 2 * n; ++i) warped[i] = std::exp(3.0 * scores[i]);  // strictly monotone
  auto transformed = auc_roc_ovr(warped, 2, truth);
  EXPECT_NEAR(*base[1], *transformed[1], 1e-12);
}

TEST(Summarize, DiagonalMatrixUnitAucs) {
  ConfusionMatrix m = {{4, 0}, {0, 6}};
  std::vector<std::optional<double>> aucs = {1.0, 1.0};
  auto report = summarize("fine18", {"a", "b"}, m, aucs);
  EXPECT_DOUBLE_EQ(report.accuracy, 1.0);
  EXPECT_DOUBLE_EQ(report.macro_f1, 1.0);
  EXPECT_DOUBLE_EQ(*report.macro_auc, 1.0);
  EXPECT_EQ(report.total, 10u);
}

TEST(Summarize, JsonRoundTripIsLossless) {
  ConfusionMatrix m = {{7, 2, 0}, {1, 5, 1}, {0, 3, 9}};
  std::vector<std::optional<double>> aucs = {0.987654321012345, std::nullopt, 1.0 / 3.0};
  auto report = summarize("quality3", {"Bad", "Good", "Mixed"}, m, aucs);
  auto j = nlohmann::ordered_json::parse(report.to_json_string());
  auto back = MetricsReport::from_json(j);
  EXPECT_EQ(back.task, report.task);
  EXPECT_EQ(back.matrix, report.matrix);
  EXPECT_EQ(back.total, report.total);
  EXPECT_EQ(back.accuracy, report.accuracy);  // bitwise: doubles survive dump/parse
  EXPECT_EQ(back.macro_f1, report.macro_f1);
  ASSERT_EQ(back.per_class.size(), report.per_class.size());
  for (std::size_t c = 0; c < back.per_class.size(); ++c) {
    EXPECT_EQ(back.per_class[c].precision, report.per_class[c].precision);
    EXPECT_EQ(back.per_class[c].recall, report.per_class[c].recall);
    EXPECT_EQ(back.per_class[c].f1, report.per_class[c].f1);
    EXPECT_EQ(back.per_class[c].auc.has_value(), report.per_class[c].auc.has_value());
    if (back.per_class[c].auc) EXPECT_EQ(*back.per_class[c].auc, *report.per_class[c].auc);
    EXPECT_EQ(back.per_class[c].support, report.per_class[c].support);
  }
  // serialization is deterministic
  EXPECT_EQ(report.to_json_string(), back.to_json_string());
}

TEST(Summarize, AccuracyMatchesCountingOracle) {
  RngStream rng(5);
  std::vector<int> truth, pred;
  for (int i = 0; i < 1000; ++i) {
    truth.push_back(static_cast<int>(rng.next_below(4)));
    pred.push_back(static_cast<int>(rng.next_below(4)));
  }
  std::size_t matches = 0;
  for (int i = 0; i < 1000; ++i) matches += truth[i] == pred[i];

  auto report = summarize("fine18", {"a", "b", "c", "d"}, confusion(truth, pred, 4),
                          std::vector<std::optional<double>>(4));
  EXPECT_DOUBLE_EQ(report.accuracy, static_cast<double>(matches) / 1000.0);
}

TEST(Summarize, MicroRecallEqualsAccuracy) {
  RngStream rng(6);
  std::vector<int> truth, pred;
  for (int i = 0; i < 500; ++i) {
    truth.push_back(static_cast<int>(rng.next_below(5)));
    pred.push_back(static_cast<int>(rng.next_below(5)));
  }
  auto m = confusion(truth, pred, 5);
  auto metrics = per_class_prf(m);
  double tp_total = 0, support_total = 0;
  for (const auto& cm : metrics) {
    tp_total += cm.recall * static_cast<double>(cm.support);
    support_total += static_cast<double>(cm.support);
  }
  auto report = summarize("fine18", {"a", "b", "c", "d", "e"}, m,
                          std::vector<std::optional<double>>(5));
  EXPECT_NEAR(tp_total / support_total, report.accuracy, 1e-12);
}

TEST(Summarize, LabelPermutationEquivariance) {
  std::vector<int> truth = {0, 0, 1, 1, 2, 2, 2};
  std::vector<int> pred = {0, 1, 1, 1, 2, 0, 2};
  auto report = summarize("quality3", {"Bad", "Good", "Mixed"}, confusion(truth, pred, 3),
                          std::vector<std::optional<double>>(3));

  // permute classes by sigma: new = sigma[old]
  std::array<int, 3> sigma = {2, 0, 1};
  std::vector<int> truth_p, pred_p;
  for (int t : truth) truth_p.push_back(sigma[t]);
  for (int p : pred) pred_p.push_back(sigma[p]);
  auto permuted = summarize("quality3", {"Mixed", "Bad", "Good"}, confusion(truth_p, pred_p, 3),
                            std::vector<std::optional<double>>(3));

  EXPECT_DOUBLE_EQ(report.accuracy, permuted.accuracy);
  EXPECT_DOUBLE_EQ(report.macro_f1, permuted.macro_f1);
  for (int c = 0; c < 3; ++c) {
    EXPECT_DOUBLE_EQ(report.per_class[c].precision, permuted.per_class[sigma[c]].precision);
    EXPECT_DOUBLE_EQ(report.per_class[c].recall, permuted.per_class[sigma[c]].recall);
    EXPECT_EQ(report.per_class[c].support, permuted.per_class[sigma[c]].support);
  }
}

TEST(Summarize, TextTableIsFourDecimalAligned) {
  ConfusionMatrix m = {{55, 2}, {1, 100}};
  std::vector<std::optional<double>> aucs = {0.9998, 1.0};
  auto report = summarize("fine18", {"Banana_Mixed", "Other"}, m, aucs);
  const std::string text = report.to_text();
  EXPECT_NE(text.find("0.9821"), std::string::npos);
  EXPECT_NE(text.find("0.9649"), std::string::npos);
  EXPECT_NE(text.find("0.9735"), std::string::npos);
  EXPECT_NE(text.find("Banana_Mixed"), std::string::npos);
}

}  // namespace
