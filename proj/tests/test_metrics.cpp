#include "dicom/analysis.hpp"
#include "dicom/metrics.hpp"
#include "support.hpp"

#include <set>

namespace dicom {
namespace {

using V = std::vector<double>;
using L = std::vector<int>;

// Threshold sweep counted from scratch at every distinct score.
double aupr_oracle(const V& s, const L& y) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  const double pos = std::count(y.begin(), y.end(), 1);
  double ap = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0, pred = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) {
        ++pred;
        tp += y[i];
      }
    }
    const double recall = tp / pos;
    ap += (recall - prev_recall) * (tp / pred);
    prev_recall = recall;
  }
  return ap;
}

// Rank-sum statistic with mid-ranks for ties.
double auc_oracle(const V& s, const L& y) {
  const std::size_t n = s.size();
  double rank_sum = 0.0;
  double pos = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!y[i]) continue;
    ++pos;
    double below = 0, equal = 0;
    for (std::size_t j = 0; j < n; ++j) {
      below += s[j] < s[i];
      equal += s[j] == s[i];
    }
    rank_sum += below + (equal + 1.0) / 2.0;
  }
  const double neg = static_cast<double>(n) - pos;
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double rand_oracle(const L& a, const L& b) {
  double agree = 0, total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      agree += ((a[i] == a[j]) == (b[i] == b[j]));
      ++total;
    }
  }
  return agree / total;
}

double silhouette_oracle(const Mat& x, const L& c) {
  const int n = static_cast<int>(x.rows());
  std::set<int> ids(c.begin(), c.end());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double own = 0;
    int own_n = 0;
    for (int j = 0; j < n; ++j) {
      if (j != i && c[j] == c[i]) {
        own += (x.row(i) - x.row(j)).norm();
        ++own_n;
      }
    }
    if (own_n == 0) continue;
    const double a = own / own_n;
    double b = std::numeric_limits<double>::infinity();
    for (int k : ids) {
      if (k == c[i]) continue;
      double d = 0;
      int m = 0;
      for (int j = 0; j < n; ++j) {
        if (c[j] == k) {
          d += (x.row(i) - x.row(j)).norm();
          ++m;
        }
      }
      b = std::min(b, d / m);
    }
    total += (b - a) / std::max(a, b);
  }
  return total / n;
}

double soc_oracle(const V& curve) {
  if (curve.size() == 1) return curve[0];
  V m(curve.size());
  double best = -1;
  for (std::size_t i = 0; i < curve.size(); ++i) m[i] = best = std::max(best, curve[i]);
  double area = 0;
  for (std::size_t i = 1; i < m.size(); ++i) area += 0.5 * (m[i - 1] + m[i]);
  return area / static_cast<double>(m.size() - 1);
}

TEST(Aupr, PerfectRanking) {
  EXPECT_EQ(aupr(V{0.9, 0.1}, L{1, 0}), 1.0);
  EXPECT_EQ(auc(V{0.9, 0.1}, L{1, 0}), 1.0);
}

TEST(Aupr, PositiveAtRankTwo) {
  EXPECT_EQ(aupr(V{0.9, 0.8}, L{0, 1}), aupr_oracle(V{0.9, 0.8}, L{0, 1}));
  EXPECT_EQ(aupr(V{0.9, 0.8}, L{0, 1}), 0.5);
  EXPECT_EQ(auc(V{0.9, 0.8}, L{0, 1}), 0.0);
}

TEST(Auc, AllTiedIsHalf) {
  EXPECT_EQ(auc(V(6, 0.3), L{0, 1, 0, 1, 0, 1}), 0.5);
}

TEST(Metrics, SingleClassIsUndefined) {
  test::expect_error([] { aupr(V{0.1, 0.2}, L{1, 1}); }, "metrics.undefined");
  test::expect_error([] { auc(V{0.1, 0.2}, L{0, 0}); }, "metrics.undefined");
  test::expect_error([] { auc(V{0.1}, L{0, 1}); }, "metrics.shape");
}

TEST(Accuracy, CountsMatches) {
  EXPECT_EQ(accuracy(L{1, 0, 2, 2}, L{1, 1, 2, 0}), 0.5);
}

TEST(Metrics, RandomInstancesMatchOracles) {
  Rng rng(1);
  int checked = 0;
  while (checked < 200) {
    const int n = 2 + static_cast<int>(rng() % 11);
    V s(n);
    L y(n);
    const bool ties = rng() % 2;
    for (int i = 0; i < n; ++i) {
      s[i] = ties ? std::floor(uniform(rng, 0, 4)) / 4.0 : uniform(rng, 0, 1);
      y[i] = static_cast<int>(rng() % 2);
    }
    const int pos = std::count(y.begin(), y.end(), 1);
    if (pos == 0 || pos == n) continue;
    ++checked;
    const double ap = aupr(s, y), roc = auc(s, y);
    EXPECT_NEAR(ap, aupr_oracle(s, y), 1e-10);
    EXPECT_NEAR(roc, auc_oracle(s, y), 1e-10);
    EXPECT_GE(ap, 0.0);
    EXPECT_LE(ap, 1.0);

    // Strictly monotone transforms leave both unchanged.
    V t(n), neg(n);
    for (int i = 0; i < n; ++i) {
      t[i] = std::exp(3.0 * s[i]) - 7.0;
      neg[i] = -s[i];
    }
    EXPECT_NEAR(aupr(t, y), ap, 1e-12);
    EXPECT_NEAR(auc(t, y), roc, 1e-12);
    if (!ties && std::set<double>(s.begin(), s.end()).size() == s.size()) {
      EXPECT_NEAR(roc + auc(neg, y), 1.0, 1e-12);
    }
  }
}

TEST(MacroAupr, PerfectOneHotPredictorScoresOne) {
  Mat scores = Mat::Zero(6, 3);
  const L y{0, 1, 2, 2, 1, 0};
  for (int i = 0; i < 6; ++i) scores(i, y[i]) = 1.0;
  EXPECT_EQ(macro_aupr(scores, y), 1.0);
  EXPECT_EQ(macro_auc(scores, y), 1.0);
}

TEST(RandIndex, Examples) {
  EXPECT_EQ(rand_index(L{0, 0, 1, 1}, L{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(rand_index(L{0, 0, 1, 1}, L{0, 1, 0, 1}), rand_oracle(L{0, 0, 1, 1}, L{0, 1, 0, 1}));
  EXPECT_NEAR(rand_index(L{0, 0, 1, 1}, L{0, 1, 0, 1}), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(rand_index(L{2, 0, 1, 1, 0}, L{2, 0, 1, 1, 0}), 1.0);
  test::expect_error([] { rand_index(L{0}, L{0}); }, "analysis.too_few_points");
}

TEST(RandIndex, RandomInstancesMatchPairCounting) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 11);
    L a(n), b(n);
    for (int i = 0; i < n; ++i) {
      a[i] = static_cast<int>(rng() % 3);
      b[i] = static_cast<int>(rng() % 4);
    }
    const double r = rand_index(a, b);
    EXPECT_NEAR(r, rand_oracle(a, b), 1e-10);
    L relabeled(n);
    for (int i = 0; i < n; ++i) relabeled[i] = 7 - b[i];
    EXPECT_NEAR(rand_index(a, relabeled), r, 1e-15);
  }
}

TEST(Silhouette, DuplicatedPairsScoreOne) {
  Mat x(4, 2);
  x << 0, 0, 0, 0, 5, 5, 5, 5;
  EXPECT_EQ(silhouette(x, L{0, 0, 1, 1}), 1.0);
  EXPECT_EQ(silhouette(x, L{1, 1, 0, 0}), 1.0);
  test::expect_error([&] { silhouette(x, L{0, 0, 0, 0}); }, "analysis.single_cluster");
}

TEST(Silhouette, RandomLabelsOnOneBlobAreNearZero) {
  Rng rng(3);
  const Mat x = test::random_matrix(rng, 200, 5);
  L c(200);
  for (auto& v : c) v = static_cast<int>(rng() % 2);
  EXPECT_LT(std::abs(silhouette(x, c)), 0.1);
}

TEST(Silhouette, RandomInstancesMatchAllPairsOracle) {
  Rng rng(4);
  int checked = 0;
  while (checked < 200) {
    const int n = 2 + static_cast<int>(rng() % 11);
    const Mat x = test::random_matrix(rng, n, 3);
    L c(n);
    for (auto& v : c) v = static_cast<int>(rng() % 3);
    if (std::set<int>(c.begin(), c.end()).size() < 2) continue;
    ++checked;
    const double s = silhouette(x, c);
    EXPECT_NEAR(s, silhouette_oracle(x, c), 1e-10);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);

    // Relabeling and rigid motions leave it unchanged.
    L swapped(n);
    for (int i = 0; i < n; ++i) swapped[i] = (c[i] + 1) % 3;
    EXPECT_NEAR(silhouette(x, swapped), s, 1e-12);
    const Eigen::Matrix3d q = Eigen::Quaterniond::UnitRandom().toRotationMatrix();
    Mat moved = x * q.transpose();
    moved.rowwise() += RowVec::Constant(3, 4.2);
    EXPECT_NEAR(silhouette(moved, c), s, 1e-10);
  }
}

TEST(Soc, Examples) {
  EXPECT_EQ(soc(V{0.5, 0.5, 0.5, 0.5}), 0.5);
  EXPECT_EQ(soc(V{0.5}), 0.5);
  EXPECT_EQ(soc(V{0.0, 1.0, 1.0}), soc_oracle(V{0.0, 1.0, 1.0}));
  EXPECT_EQ(soc(V{0.0, 1.0, 1.0}), 0.75);
  test::expect_error([] { soc(V{}); }, "analysis.empty");
  test::expect_error([] { soc(V{0.2, 1.5}); }, "analysis.range");
}

TEST(Soc, RandomCurvesMatchOracleAndAreMonotone) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 12);
    V c(n), run(n), bigger(n);
    double best = 0.0;
    for (int i = 0; i < n; ++i) {
      c[i] = uniform(rng, 0, 1);
      run[i] = best = std::max(best, c[i]);
      bigger[i] = std::min(1.0, c[i] + uniform(rng, 0, 0.2));
    }
    const double s = soc(c);
    EXPECT_NEAR(s, soc_oracle(c), 1e-10);
    EXPECT_EQ(soc(run), s);
    EXPECT_GE(soc(bigger), s - 1e-15);
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
  }
}

}  // namespace
}  // namespace dicom
