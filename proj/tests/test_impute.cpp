#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <vector>

#include "lgrowth/errors.hpp"
#include "lgrowth/fit.hpp"
#include "lgrowth/impute.hpp"
#include "lgrowth/missing.hpp"
#include "lgrowth/model.hpp"
#include "lgrowth/rng.hpp"

using namespace lgrowth;

namespace {

using BoolArray = Eigen::Array<bool, Eigen::Dynamic, 1>;

LongitudinalDataset make_dataset(const Eigen::MatrixXd& y,
                                 const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>& mask) {
  LongitudinalDataset data;
  data.y = y;
  data.mask = mask;
  return data;
}

// Sorted per-leaf row sets; the partition signature of a fitted tree.
std::vector<std::vector<int>> leaf_partition(const RegressionTree& tree) {
  std::vector<std::vector<int>> leaves;
  for (const TreeNode& node : tree.nodes)
    if (node.var < 0) {
      std::vector<int> rows = node.rows;
      std::sort(rows.begin(), rows.end());
      leaves.push_back(std::move(rows));
    }
  std::sort(leaves.begin(), leaves.end());
  return leaves;
}

double sse_of(const Eigen::VectorXd& y, const std::vector<int>& rows) {
  double sum = 0.0, sumsq = 0.0;
  for (int r : rows) {
    sum += y(r);
    sumsq += y(r) * y(r);
  }
  return sumsq - sum * sum / static_cast<double>(rows.size());
}

}  // namespace

TEST_CASE("gower distance hand examples") {
  Eigen::VectorXd ranges(2);
  ranges << 1.0, 10.0;
  BoolArray both = BoolArray::Constant(2, true);

  Eigen::VectorXd a(2), b(2);
  a << 0.3, 4.0;
  const auto zero = gower_distance(a, both, a, both, ranges);
  REQUIRE(zero.has_value());
  CHECK(*zero == 0.0);

  BoolArray a_obs = both;
  a_obs(1) = false;  // a = (0, NA)
  a << 0.0, 0.0;
  b << 1.0, 5.0;
  const auto single = gower_distance(a, a_obs, b, both, ranges);
  REQUIRE(single.has_value());
  CHECK(*single == doctest::Approx(1.0));

  const auto pair = gower_distance(a, both, b, both, ranges);
  REQUIRE(pair.has_value());
  CHECK(*pair == doctest::Approx(0.75));  // (1.0 + 0.5) / 2

  BoolArray none = BoolArray::Constant(2, false);
  CHECK(!gower_distance(a, none, b, both, ranges).has_value());

  // Zero-range variables drop out of the average.
  Eigen::VectorXd degenerate_ranges(2);
  degenerate_ranges << 0.0, 10.0;
  const auto partial = gower_distance(a, both, b, both, degenerate_ranges);
  REQUIRE(partial.has_value());
  CHECK(*partial == doctest::Approx(0.5));
}

TEST_CASE("knn four-row toy dataset matches hand computation") {
  Eigen::MatrixXd y(4, 4);
  y << 1, 2, 3, 0,  // y(0,3) missing
      1, 2, 3, 4,   //
      0, 0, 0, 0,   //
      2, 4, 6, 8;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> mask =
      Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(4, 4, true);
  mask(0, 3) = false;
  const LongitudinalDataset data = make_dataset(y, mask);

  // Ranges (2,4,6,8); distances from row 0: d01 = 0, d02 = d03 = 0.5.
  SUBCASE("k=1 copies the nearest donor") {
    const ImputationSet set = impute_knn(data, 1);
    REQUIRE(set.completed.size() == 1);
    CHECK(set.completed[0].y(0, 3) == doctest::Approx(4.0));
  }
  SUBCASE("k=2 averages the two nearest, tie to the lowest row") {
    const ImputationSet set = impute_knn(data, 2);
    CHECK(set.completed[0].y(0, 3) == doctest::Approx(2.0));  // mean(4, 0)
    CHECK(set.warnings.empty());
    CHECK(set.hyper.at("k") == 2.0);
    CHECK(set.method == "knn");
  }
  SUBCASE("k equal to all donors is plain donor-mean imputation") {
    const ImputationSet set = impute_knn(data, 3);
    CHECK(set.completed[0].y(0, 3) == doctest::Approx(4.0));  // mean(4, 0, 8)
  }
  SUBCASE("k beyond the donor count falls back with a warning") {
    const ImputationSet set = impute_knn(data, 10);
    CHECK(set.completed[0].y(0, 3) == doctest::Approx(4.0));
    CHECK(set.warnings.at("knn_donor_fallback") == 1);
  }
  SUBCASE("weighted mean leans hard toward the zero-distance donor") {
    KnnOptions options;
    options.weighted = true;
    const ImputationSet set = impute_knn(data, 2, options);
    CHECK(set.completed[0].y(0, 3) > 3.99);
    CHECK(set.completed[0].y(0, 3) <= 4.0);
  }
  SUBCASE("observed cells pass through bitwise") {
    const ImputationSet set = impute_knn(data, 2);
    for (int i = 0; i < 4; ++i)
      for (int t = 0; t < 4; ++t)
        if (mask(i, t)) CHECK(set.completed[0].y(i, t) == y(i, t));
    CHECK(set.completed[0].mask.all());
  }
}

TEST_CASE("knn skips incomparable donor pairs") {
  const double na = std::numeric_limits<double>::quiet_NaN();
  Eigen::MatrixXd y(4, 4);
  y << 5, na, na, na,  //
      na, 7, 7, 7,     //
      4, 6, na, na,    //
      6, 8, 9, 10;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> mask(4, 4);
  for (int i = 0; i < 4; ++i)
    for (int t = 0; t < 4; ++t) mask(i, t) = std::isfinite(y(i, t));
  const LongitudinalDataset data = make_dataset(y, mask);

  SUBCASE("imputed cells join later columns' distances by default") {
    const ImputationSet set = impute_knn(data, 1);
    const Eigen::MatrixXd& c = set.completed[0].y;
    // Column y1 first: row 1 shares nothing observed with row 0 (the pair is
    // skipped), row 2 at distance 0.5 beats row 3 at 2.5/3, so y(1,1)=4.
    CHECK(c(1, 0) == doctest::Approx(4.0));
    // From column y2 on, row 1's filled y1=4 makes it comparable to row 0:
    // rows 1, 2, 3 all sit at distance 0.5 on y1 and the tie takes row 1.
    CHECK(c(0, 1) == doctest::Approx(7.0));
    // Donors observed on y3/y4 are rows 1 and 3; row 1 now wins on distance
    // (shared y1 imputed-vs-observed plus matching y2) for rows 0 and 2.
    CHECK(c(0, 2) == doctest::Approx(7.0));
    CHECK(c(0, 3) == doctest::Approx(7.0));
    CHECK(c(2, 2) == doctest::Approx(7.0));
    CHECK(c(2, 3) == doctest::Approx(7.0));
  }
  SUBCASE("frozen distances use only originally observed cells") {
    KnnOptions options;
    options.use_imputed_distances = false;
    const ImputationSet set = impute_knn(data, 1, options);
    const Eigen::MatrixXd& c = set.completed[0].y;
    // Row 0 shares no observed variable with row 1, so row 1 never donates to
    // it; rows 2 and 3 tie at distance 0.5 on y1 and the tie goes to row 2.
    CHECK(c(0, 1) == doctest::Approx(6.0));
    CHECK(c(0, 2) == doctest::Approx(9.0));   // row 3 is the only eligible donor
    CHECK(c(0, 3) == doctest::Approx(10.0));
    CHECK(c(1, 0) == doctest::Approx(4.0));   // row 2 nearer than row 3 on y2
    CHECK(c(2, 2) == doctest::Approx(7.0));   // row 1 nearer than row 3
    CHECK(c(2, 3) == doctest::Approx(7.0));
  }
}

TEST_CASE("knn six-row exhaustive oracle") {
  // Brute-force reimplementation: all pairwise Gower distances, all donor
  // rankings, computed with plain nested loops sharing no code with the
  // library implementation.
  Rng rng(7777);
  Eigen::MatrixXd y(6, 4);
  for (int i = 0; i < 6; ++i)
    for (int t = 0; t < 4; ++t) y(i, t) = std::round(10.0 * rng.normal()) / 2.0;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> mask =
      Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(6, 4, true);
  mask(0, 2) = false;
  mask(1, 3) = false;
  mask(2, 1) = false;
  mask(4, 3) = false;
  const LongitudinalDataset data = make_dataset(y, mask);

  for (int k = 1; k <= 5; ++k) {
    const ImputationSet set = impute_knn(data, k);
    Eigen::VectorXd lo(4), hi(4);
    for (int v = 0; v < 4; ++v) {
      lo(v) = std::numeric_limits<double>::infinity();
      hi(v) = -lo(v);
      for (int i = 0; i < 6; ++i)
        if (mask(i, v)) {
          lo(v) = std::min(lo(v), y(i, v));
          hi(v) = std::max(hi(v), y(i, v));
        }
    }
    // Columns are imputed left to right; cells filled for earlier columns
    // join the comparable set for later columns' distances.
    Eigen::MatrixXd wy = y;
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> wmask = mask;
    for (int t = 0; t < 4; ++t) {
      std::vector<std::pair<int, double>> fills;
      for (int i = 0; i < 6; ++i) {
        if (mask(i, t)) continue;
        std::vector<std::pair<double, int>> ranked;
        for (int j = 0; j < 6; ++j) {
          if (j == i || !mask(j, t)) continue;
          double acc = 0.0;
          int used = 0;
          for (int v = 0; v < 4; ++v) {
            if (!wmask(i, v) || !wmask(j, v) || hi(v) - lo(v) <= 0.0) continue;
            acc += std::fabs(wy(i, v) - wy(j, v)) / (hi(v) - lo(v));
            ++used;
          }
          if (used > 0) ranked.emplace_back(acc / used, j);
        }
        std::sort(ranked.begin(), ranked.end());
        const int take = std::min<int>(k, static_cast<int>(ranked.size()));
        double mean = 0.0;
        for (int q = 0; q < take; ++q) mean += y(ranked[q].second, t);
        mean /= take;
        fills.emplace_back(i, mean);
      }
      for (const auto& [i, value] : fills) {
        wy(i, t) = value;
        wmask(i, t) = true;
      }
    }
    for (int i = 0; i < 6; ++i)
      for (int t = 0; t < 4; ++t) {
        if (mask(i, t)) continue;
        CHECK(set.completed[0].y(i, t) == doctest::Approx(wy(i, t)).epsilon(1e-12));
        CHECK(set.completed[0].y(i, t) >= lo(t) - 1e-12);
        CHECK(set.completed[0].y(i, t) <= hi(t) + 1e-12);
      }
  }
}

TEST_CASE("cart splits the classic two-group teaching example first") {
  // Response sits at 8 for scores above 5 and at 3 otherwise.
  const int n = 10;
  Eigen::MatrixXd x(n, 2);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = i + 1;                    // "homework score" 1..10
    x(i, 1) = (i * 37 % 11) * 0.5;      // distractor
    y(i) = x(i, 0) > 5 ? 8.0 + 0.01 * i : 3.0 + 0.01 * i;
  }
  Rng rng(1);
  const RegressionTree tree = fit_cart(x, y, 2, 1, rng);
  REQUIRE(tree.nodes.size() == 3);
  CHECK(tree.nodes[0].var == 0);
  CHECK(tree.nodes[0].threshold == doctest::Approx(5.5));

  Eigen::RowVectorXd probe(2);
  probe << 7.0, 7.0;
  const int leaf = terminal_node(tree, probe);
  CHECK(tree.nodes[leaf].mean == doctest::Approx(8.0).epsilon(0.01));
  CHECK(terminal_node(tree, probe) == leaf);  // routing is deterministic
}

TEST_CASE("cart on a constant response is a single node") {
  Eigen::MatrixXd x(8, 2);
  Eigen::VectorXd y = Eigen::VectorXd::Constant(8, 4.2);
  for (int i = 0; i < 8; ++i) {
    x(i, 0) = i;
    x(i, 1) = 8 - i;
  }
  Rng rng(2);
  const RegressionTree tree = fit_cart(x, y, 0, 1, rng);
  REQUIRE(tree.nodes.size() == 1);
  CHECK(tree.nodes[0].var == -1);
  CHECK(tree.nodes[0].mean == doctest::Approx(4.2));
  Eigen::RowVectorXd probe(2);
  probe << 100.0, -3.0;
  CHECK(terminal_node(tree, probe) == 0);
}

TEST_CASE("cart first split equals the exhaustive SSE minimizer on ten points") {
  Eigen::MatrixXd x(10, 2);
  Eigen::VectorXd y(10);
  x << 0.1, 4.4, 1.2, 0.7, 2.3, 3.1, 3.4, 2.2, 4.5, 5.8, 5.6, 1.3, 6.7, 4.9, 7.8, 0.2, 8.9, 3.3,
      9.1, 2.8;
  y << 2.0, 1.7, 2.4, 6.1, 5.8, 6.6, 6.0, 2.1, 2.2, 6.3;
  Rng rng(3);
  const RegressionTree tree = fit_cart(x, y, 2, 1, rng);
  REQUIRE(tree.nodes.size() == 3);

  double best_sse = std::numeric_limits<double>::infinity();
  int best_var = -1;
  double best_threshold = 0.0;
  for (int v = 0; v < 2; ++v) {
    std::vector<double> values;
    for (int i = 0; i < 10; ++i) values.push_back(x(i, v));
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    for (std::size_t q = 0; q + 1 < values.size(); ++q) {
      const double threshold = 0.5 * (values[q] + values[q + 1]);
      std::vector<int> left, right;
      for (int i = 0; i < 10; ++i) (x(i, v) <= threshold ? left : right).push_back(i);
      const double total = sse_of(y, left) + sse_of(y, right);
      if (total < best_sse) {
        best_sse = total;
        best_var = v;
        best_threshold = threshold;
      }
    }
  }
  CHECK(tree.nodes[0].var == best_var);
  CHECK(tree.nodes[0].threshold == doctest::Approx(best_threshold));
}

TEST_CASE("cart invariants: partition, strict SSE decrease, caps") {
  Rng data_rng(909);
  const int n = 120;
  Eigen::MatrixXd x(n, 3);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    for (int v = 0; v < 3; ++v) x(i, v) = data_rng.normal();
    y(i) = 2.0 * x(i, 0) - x(i, 1) + 0.3 * data_rng.normal();
  }
  Rng rng(4);
  const RegressionTree tree = fit_cart(x, y, 8, 5, rng);

  // Terminal rows partition the training set.
  std::vector<int> all_rows;
  int leaves = 0;
  for (const TreeNode& node : tree.nodes)
    if (node.var < 0) {
      ++leaves;
      CHECK(static_cast<int>(node.rows.size()) >= 5);
      all_rows.insert(all_rows.end(), node.rows.begin(), node.rows.end());
    }
  std::sort(all_rows.begin(), all_rows.end());
  REQUIRE(static_cast<int>(all_rows.size()) == n);
  for (int i = 0; i < n; ++i) CHECK(all_rows[i] == i);
  CHECK(leaves <= 8);
  CHECK(leaves == 8);  // rich signal: the cap binds

  // Every split strictly decreased the within-node SSE.
  for (int id = 0; id < static_cast<int>(tree.nodes.size()); ++id) {
    const TreeNode& node = tree.nodes[id];
    if (node.var < 0) continue;
    const double parent = sse_of(y, subtree_rows(tree, id));
    const double children =
        sse_of(y, subtree_rows(tree, node.left)) + sse_of(y, subtree_rows(tree, node.right));
    CHECK(parent - children > 0.0);
  }

  // Routing training rows reproduces the stored partition.
  for (const TreeNode& node : tree.nodes)
    if (node.var < 0)
      for (int r : node.rows) {
        const Eigen::RowVectorXd probe = x.row(r);
        CHECK(&tree.nodes[terminal_node(tree, probe)] == &node);
      }
}

TEST_CASE("cart partition is invariant to monotone predictor transforms") {
  Rng data_rng(616);
  const int n = 80;
  Eigen::MatrixXd x(n, 2);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = data_rng.normal();
    x(i, 1) = data_rng.normal();
    y(i) = x(i, 0) * x(i, 0) + x(i, 1) + 0.1 * data_rng.normal();
  }
  Eigen::MatrixXd warped = x;
  for (int i = 0; i < n; ++i) {
    warped(i, 0) = std::exp(x(i, 0) / 3.0);
    warped(i, 1) = std::pow(x(i, 1), 3.0);
  }
  Rng rng_a(5), rng_b(5);
  const RegressionTree plain = fit_cart(x, y, 6, 5, rng_a);
  const RegressionTree transformed = fit_cart(warped, y, 6, 5, rng_b);
  CHECK(leaf_partition(plain) == leaf_partition(transformed));
}

TEST_CASE("forest with one tree, full mtry, and no bootstrap equals cart") {
  Rng data_rng(133);
  const int n = 60;
  Eigen::MatrixXd x(n, 3);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    for (int v = 0; v < 3; ++v) x(i, v) = data_rng.normal();
    y(i) = x(i, 0) - 2.0 * x(i, 2) + 0.2 * data_rng.normal();
  }
  ForestOptions options;
  options.n_trees = 1;
  options.mtry = 3;
  options.min_leaf = 5;
  options.bootstrap = false;
  Rng rng_f(9), rng_c(9);
  const Forest forest = fit_forest(x, y, options, rng_f);
  const RegressionTree cart = fit_cart(x, y, 0, 5, rng_c);
  for (int i = 0; i < n; ++i) {
    const Eigen::RowVectorXd probe = x.row(i);
    CHECK(predict_forest(forest, probe) == doctest::Approx(predict_tree(cart, probe)).epsilon(1e-14));
  }
}

TEST_CASE("forest bootstraps have size n and default mtry is p over three") {
  Rng data_rng(47);
  const int n = 50;
  Eigen::MatrixXd x(n, 6);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    for (int v = 0; v < 6; ++v) x(i, v) = data_rng.normal();
    y(i) = x.row(i).sum() + 0.3 * data_rng.normal();
  }
  Rng rng(11);
  const Forest forest = fit_forest(x, y, ForestOptions{}, rng);
  CHECK(forest.mtry == 2);
  REQUIRE(static_cast<int>(forest.trees.size()) == 10);
  for (const RegressionTree& tree : forest.trees) {
    int total = 0;
    for (const TreeNode& node : tree.nodes)
      if (node.var < 0) total += static_cast<int>(node.rows.size());
    CHECK(total == n);  // every bootstrap draw lands in exactly one leaf
    for (const TreeNode& node : tree.nodes)
      for (int r : node.rows) {
        CHECK(r >= 0);
        CHECK(r < n);
      }
  }
}

TEST_CASE("subtree rows walk the descendant leaves, deduplicated") {
  RegressionTree tree;
  tree.nodes.resize(3);
  tree.nodes[0].var = 0;
  tree.nodes[0].threshold = 1.0;
  tree.nodes[0].left = 1;
  tree.nodes[0].right = 2;
  tree.nodes[1].rows = {3, 1, 1};
  tree.nodes[2].rows = {0, 2};
  CHECK(subtree_rows(tree, 0) == std::vector<int>{0, 1, 2, 3});
  CHECK(subtree_rows(tree, 1) == std::vector<int>{1, 3});
  CHECK(subtree_rows(tree, 2) == std::vector<int>{0, 2});
}

TEST_CASE("missforest leaves complete data untouched") {
  GcmSpec spec;
  Rng rng(808);
  const LongitudinalDataset data = generate_cohort(spec, ErrorDistribution::normal(), 60, rng);
  Rng impute_rng(1);
  const ImputationSet set = impute_missforest(data, 10, impute_rng);
  REQUIRE(set.completed.size() == 1);
  CHECK((set.completed[0].y.array() == data.y.array()).all());
  CHECK(set.method == "missforest");
}

TEST_CASE("missforest imputes inside the observed range and preserves observed cells") {
  GcmSpec spec;
  Rng rng(909);
  LongitudinalDataset complete = generate_cohort(spec, ErrorDistribution::normal(), 200, rng);
  const LongitudinalDataset data = mcar_uniform(complete, 0.15, rng);
  Rng impute_rng(2);
  const ImputationSet set = impute_missforest(data, 10, impute_rng);
  const Eigen::MatrixXd& c = set.completed[0].y;
  for (int t = 0; t < 4; ++t) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int i = 0; i < 200; ++i)
      if (data.mask(i, t)) {
        lo = std::min(lo, data.y(i, t));
        hi = std::max(hi, data.y(i, t));
      }
    for (int i = 0; i < 200; ++i) {
      if (data.mask(i, t)) {
        CHECK(c(i, t) == data.y(i, t));
      } else {
        CHECK(c(i, t) >= lo);
        CHECK(c(i, t) <= hi);
      }
    }
  }
}

TEST_CASE("missforest imputed means track observed means under MCAR") {
  GcmSpec spec;
  Rng rng(321);
  LongitudinalDataset complete = generate_cohort(spec, ErrorDistribution::normal(), 1000, rng);
  const LongitudinalDataset data = mcar_uniform(complete, 0.10, rng);
  Rng impute_rng(3);
  const ImputationSet set = impute_missforest(data, 10, impute_rng);
  const Eigen::MatrixXd& c = set.completed[0].y;
  for (int t = 0; t < 4; ++t) {
    double observed_mean = 0.0, imputed_mean = 0.0;
    int n_obs = 0, n_mis = 0;
    for (int i = 0; i < 1000; ++i) {
      if (data.mask(i, t)) {
        observed_mean += data.y(i, t);
        ++n_obs;
      } else {
        imputed_mean += c(i, t);
        ++n_mis;
      }
    }
    if (n_mis == 0) continue;
    observed_mean /= n_obs;
    imputed_mean /= n_mis;
    CHECK(std::fabs(imputed_mean - observed_mean) < 0.10 * std::fabs(observed_mean));
  }
}

TEST_CASE("missforest is deterministic given the stream") {
  GcmSpec spec;
  Rng rng(555);
  LongitudinalDataset complete = generate_cohort(spec, ErrorDistribution::normal(), 150, rng);
  const LongitudinalDataset data = mcar_uniform(complete, 0.2, rng);
  Rng a(77), b(77), c(78);
  const ImputationSet sa = impute_missforest(data, 10, a);
  const ImputationSet sb = impute_missforest(data, 10, b);
  const ImputationSet sc = impute_missforest(data, 10, c);
  CHECK((sa.completed[0].y.array() == sb.completed[0].y.array()).all());
  CHECK(!(sa.completed[0].y.array() == sc.completed[0].y.array()).all());
}

TEST_CASE("mice with a single observed donor value propagates it everywhere") {
  Eigen::MatrixXd y(12, 4);
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> mask =
      Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(12, 4, true);
  Rng rng(15);
  for (int i = 0; i < 12; ++i)
    for (int t = 0; t < 4; ++t) y(i, t) = rng.normal();
  for (int i = 0; i < 12; ++i) mask(i, 3) = false;
  mask(4, 3) = true;
  y(4, 3) = 42.0;
  const LongitudinalDataset data = make_dataset(y, mask);

  Rng chain_rng(99);
  const ImputationSet set = mice_impute(data, MiceEngine::kCart, 2, 2, MiceHyper{}, chain_rng);
  REQUIRE(set.completed.size() == 2);
  for (const LongitudinalDataset& completed : set.completed)
    for (int i = 0; i < 12; ++i) CHECK(completed.y(i, 3) == 42.0);
}

TEST_CASE("mice imputations are members of the observed value set") {
  GcmSpec spec;
  Rng rng(246);
  LongitudinalDataset complete = generate_cohort(spec, ErrorDistribution::normal(), 120, rng);
  const LongitudinalDataset data = apply_missingness(complete, Mechanism::kMar, 0.25, 0.8, rng);

  for (const MiceEngine engine : {MiceEngine::kCart, MiceEngine::kRf}) {
    Rng chain_rng(engine == MiceEngine::kCart ? 31 : 32);
    const ImputationSet set = mice_impute(data, engine, 3, 2, MiceHyper{}, chain_rng);
    REQUIRE(set.completed.size() == 3);
    for (int t = 0; t < 4; ++t) {
      std::set<double> observed;
      for (int i = 0; i < 120; ++i)
        if (data.mask(i, t)) observed.insert(data.y(i, t));
      for (const LongitudinalDataset& completed : set.completed)
        for (int i = 0; i < 120; ++i) {
          if (data.mask(i, t)) {
            CHECK(completed.y(i, t) == data.y(i, t));
          } else {
            CHECK(observed.count(completed.y(i, t)) == 1);
          }
        }
    }
  }
}

TEST_CASE("mice chains from different seeds are exchangeable") {
  GcmSpec spec;
  Rng rng(135);
  LongitudinalDataset complete = generate_cohort(spec, ErrorDistribution::normal(), 300, rng);
  const LongitudinalDataset data = apply_missingness(complete, Mechanism::kMar, 0.15, 0.8, rng);

  const auto pooled_slope_var = [&](uint64_t seed) {
    Rng chain_rng(seed);
    const ImputationSet set = mice_impute(data, MiceEngine::kCart, 20, 5, MiceHyper{}, chain_rng);
    double theta_bar = 0.0, within = 0.0;
    std::vector<double> thetas;
    for (const LongitudinalDataset& completed : set.completed) {
      const FitResult fit = fit_fiml(completed, spec);
      REQUIRE(fit.converged);
      thetas.push_back(fit.theta(3));
      theta_bar += fit.theta(3);
      within += fit.se(3) * fit.se(3);
    }
    const int m = static_cast<int>(thetas.size());
    theta_bar /= m;
    within /= m;
    double between = 0.0;
    for (double th : thetas) between += (th - theta_bar) * (th - theta_bar);
    between /= (m - 1);
    const double total = within + (1.0 + 1.0 / m) * between;
    return std::make_pair(theta_bar, std::sqrt(total));
  };

  const auto [est_a, se_a] = pooled_slope_var(101);
  const auto [est_b, se_b] = pooled_slope_var(202);
  CHECK(std::fabs(est_a - est_b) < 2.0 * std::max(se_a, se_b));
}

TEST_CASE("mice pooling attenuates the slope variance relative to direct ML") {
  GcmSpec spec;
  const double truth = 1.0;
  double mice_abs_rb = 0.0, fiml_abs_rb = 0.0;
  const int reps = 6;
  for (int rep = 0; rep < reps; ++rep) {
    Rng rng(91000 + rep);
    LongitudinalDataset complete = generate_cohort(spec, ErrorDistribution::normal(), 500, rng);
    const LongitudinalDataset data = apply_missingness(complete, Mechanism::kMar, 0.15, 0.8, rng);

    const FitResult direct = fit_fiml(data, spec);
    REQUIRE(direct.converged);
    fiml_abs_rb += std::fabs(direct.theta(3) - truth);

    Rng chain_rng(rng.derive(4));
    const ImputationSet set = mice_impute(data, MiceEngine::kCart, 20, 5, MiceHyper{}, chain_rng);
    double pooled = 0.0;
    for (const LongitudinalDataset& completed : set.completed)
      pooled += fit_fiml(completed, spec).theta(3);
    pooled /= static_cast<double>(set.completed.size());
    mice_abs_rb += std::fabs(pooled - truth);
  }
  CHECK(mice_abs_rb / reps > fiml_abs_rb / reps);
}

TEST_CASE("imputers reject unlearnable input") {
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(10, 4);
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> mask =
      Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(10, 4, true);
  mask.col(3).setConstant(false);  // nothing ever observed at the last occasion
  Rng data_rng(5);
  for (int i = 0; i < 10; ++i)
    for (int t = 0; t < 4; ++t) y(i, t) = data_rng.normal();
  const LongitudinalDataset data = make_dataset(y, mask);
  Rng rng(6);
  CHECK_THROWS_AS(impute_knn(data, 3), DataError);
  CHECK_THROWS_AS(impute_missforest(data, 10, rng), DataError);
  CHECK_THROWS_AS(mice_impute(data, MiceEngine::kCart, 1, 1, MiceHyper{}, rng), DataError);
  CHECK_THROWS_AS(impute_knn(data, 0), ConfigError);
  CHECK_THROWS_AS(mice_impute(data, MiceEngine::kCart, 0, 1, MiceHyper{}, rng), ConfigError);
}
