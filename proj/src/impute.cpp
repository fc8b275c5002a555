#include "lgrowth/impute.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include "lgrowth/errors.hpp"

namespace lgrowth {

namespace {

// Imputation works on a plain variable matrix: the y columns, optionally
// followed by the always-observed auxiliary covariate.
struct VariableMatrix {
  Eigen::MatrixXd values;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> observed;
  int n_targets = 0;  // leading columns eligible for imputation
};

VariableMatrix variable_matrix(const LongitudinalDataset& data, bool include_aux) {
  const bool aux = include_aux && data.covariates.count("aux") > 0;
  VariableMatrix vm;
  vm.n_targets = static_cast<int>(data.t());
  const int p = vm.n_targets + (aux ? 1 : 0);
  vm.values.resize(data.n(), p);
  vm.observed.resize(data.n(), p);
  vm.values.leftCols(vm.n_targets) = data.y;
  vm.observed.leftCols(vm.n_targets) = data.mask;
  if (aux) {
    vm.values.col(vm.n_targets) = data.covariates.at("aux");
    vm.observed.col(vm.n_targets).setConstant(true);
  }
  return vm;
}

Eigen::VectorXd observed_ranges(const VariableMatrix& vm) {
  const int p = static_cast<int>(vm.values.cols());
  Eigen::VectorXd ranges = Eigen::VectorXd::Zero(p);
  for (int v = 0; v < p; ++v) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < vm.values.rows(); ++i)
      if (vm.observed(i, v)) {
        lo = std::min(lo, vm.values(i, v));
        hi = std::max(hi, vm.values(i, v));
      }
    ranges(v) = hi > lo ? hi - lo : 0.0;
  }
  return ranges;
}

// Missing-cell count per target column; throws if a column has nothing to
// learn from.
std::vector<int> missing_counts(const LongitudinalDataset& data) {
  const int t_count = static_cast<int>(data.t());
  std::vector<int> counts(t_count, 0);
  for (int t = 0; t < t_count; ++t) {
    int observed = 0;
    for (int i = 0; i < static_cast<int>(data.n()); ++i)
      data.mask(i, t) ? ++observed : ++counts[t];
    if (observed == 0)
      throw DataError("impute: column y" + std::to_string(t + 1) +
                      " has no observed values to learn from");
  }
  return counts;
}

std::vector<int> visit_order(const std::vector<int>& counts) {
  std::vector<int> order;
  for (int t = 0; t < static_cast<int>(counts.size()); ++t)
    if (counts[t] > 0) order.push_back(t);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return counts[a] < counts[b]; });
  return order;
}

LongitudinalDataset completed_copy(const LongitudinalDataset& data, const Eigen::MatrixXd& values) {
  LongitudinalDataset out = data;
  out.y = values.leftCols(data.t());
  out.mask.setConstant(true);
  return out;
}

Eigen::MatrixXd drop_column(const Eigen::MatrixXd& m, int col) {
  Eigen::MatrixXd out(m.rows(), m.cols() - 1);
  out.leftCols(col) = m.leftCols(col);
  out.rightCols(m.cols() - 1 - col) = m.rightCols(m.cols() - 1 - col);
  return out;
}

}  // namespace

// ---------- regression trees ----------

namespace {

struct SplitCandidate {
  double reduction = 0.0;
  int var = -1;
  double threshold = 0.0;
  bool valid = false;
};

SplitCandidate best_split(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                          const std::vector<int>& rows, const std::vector<int>& vars,
                          int min_leaf, bool min_leaf_gates_split) {
  const int n = static_cast<int>(rows.size());
  SplitCandidate best;
  // Two leaf-size conventions: bound each child (the rpart minbucket rule) or
  // only gate which nodes may split, children unconstrained (the forest
  // nodesize rule).
  if (min_leaf_gates_split ? n <= min_leaf : n < 2 * min_leaf) return best;
  double sum = 0.0, sumsq = 0.0;
  for (int r : rows) {
    sum += y(r);
    sumsq += y(r) * y(r);
  }
  const double sse_parent = sumsq - sum * sum / n;
  const double tol = 1e-12 * std::max(1.0, sse_parent);

  std::vector<std::pair<double, int>> order(n);
  for (int v : vars) {
    for (int i = 0; i < n; ++i) order[i] = {x(rows[i], v), rows[i]};
    std::sort(order.begin(), order.end());
    double lsum = 0.0, lsumsq = 0.0;
    for (int i = 1; i < n; ++i) {
      const double yv = y(order[i - 1].second);
      lsum += yv;
      lsumsq += yv * yv;
      if (order[i - 1].first == order[i].first) continue;  // not a distinct boundary
      if (!min_leaf_gates_split && (i < min_leaf || n - i < min_leaf)) continue;
      const double rsum = sum - lsum;
      const double rsumsq = sumsq - lsumsq;
      const double sse_children =
          (lsumsq - lsum * lsum / i) + (rsumsq - rsum * rsum / (n - i));
      const double reduction = sse_parent - sse_children;
      // Strict > keeps the first-scanned candidate on ties: the lowest
      // variable index, then the smallest threshold.
      if (reduction > tol && reduction > best.reduction) {
        best.reduction = reduction;
        best.var = v;
        best.threshold = 0.5 * (order[i - 1].first + order[i].first);
        best.valid = true;
      }
    }
  }
  return best;
}

double rows_mean(const Eigen::VectorXd& y, const std::vector<int>& rows) {
  double acc = 0.0;
  for (int r : rows) acc += y(r);
  return acc / static_cast<double>(rows.size());
}

}  // namespace

RegressionTree fit_cart(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                        int max_terminal_nodes, int min_leaf, Rng& rng, int mtry,
                        bool min_leaf_gates_split) {
  const int n = static_cast<int>(x.rows());
  const int p = static_cast<int>(x.cols());
  if (n < 1 || y.size() != n) throw ConfigError("cart: predictor/response sizes disagree");
  if (min_leaf < 1) throw ConfigError("cart: min_leaf must be at least 1");
  if (max_terminal_nodes < 0) throw ConfigError("cart: negative terminal-node cap");

  RegressionTree tree;
  tree.max_terminal_nodes = max_terminal_nodes;
  tree.min_leaf = min_leaf;

  const auto candidate_vars = [&]() {
    std::vector<int> vars(p);
    std::iota(vars.begin(), vars.end(), 0);
    if (mtry > 0 && mtry < p) {
      for (int i = 0; i < mtry; ++i) {
        const int j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(p - i)));
        std::swap(vars[i], vars[j]);
      }
      vars.resize(mtry);
      std::sort(vars.begin(), vars.end());
    }
    return vars;
  };

  TreeNode root;
  root.rows.resize(n);
  std::iota(root.rows.begin(), root.rows.end(), 0);
  root.mean = rows_mean(y, root.rows);
  tree.nodes.push_back(std::move(root));

  struct FrontierEntry {
    int node;
    SplitCandidate split;
  };
  std::vector<FrontierEntry> frontier;
  frontier.push_back({0, best_split(x, y, tree.nodes[0].rows, candidate_vars(), min_leaf, min_leaf_gates_split)});

  int leaves = 1;
  while (max_terminal_nodes == 0 || leaves < max_terminal_nodes) {
    int pick = -1;
    for (int idx = 0; idx < static_cast<int>(frontier.size()); ++idx)
      if (frontier[idx].split.valid &&
          (pick < 0 || frontier[idx].split.reduction > frontier[pick].split.reduction))
        pick = idx;  // strict > ties to the earliest entry = lowest node id
    if (pick < 0) break;

    const int id = frontier[pick].node;
    const SplitCandidate chosen = frontier[pick].split;
    frontier.erase(frontier.begin() + pick);

    TreeNode left, right;
    for (int r : tree.nodes[id].rows)
      (x(r, chosen.var) <= chosen.threshold ? left.rows : right.rows).push_back(r);
    left.mean = rows_mean(y, left.rows);
    right.mean = rows_mean(y, right.rows);

    const int left_id = static_cast<int>(tree.nodes.size());
    const int right_id = left_id + 1;
    tree.nodes[id].var = chosen.var;
    tree.nodes[id].threshold = chosen.threshold;
    tree.nodes[id].left = left_id;
    tree.nodes[id].right = right_id;
    tree.nodes[id].rows.clear();
    tree.nodes[id].rows.shrink_to_fit();
    tree.nodes.push_back(std::move(left));
    tree.nodes.push_back(std::move(right));

    frontier.push_back({left_id, best_split(x, y, tree.nodes[left_id].rows, candidate_vars(), min_leaf, min_leaf_gates_split)});
    frontier.push_back({right_id, best_split(x, y, tree.nodes[right_id].rows, candidate_vars(), min_leaf, min_leaf_gates_split)});
    ++leaves;
  }
  return tree;
}

int terminal_node(const RegressionTree& tree, const Eigen::RowVectorXd& x) {
  if (tree.nodes.empty()) throw ConfigError("cart: empty tree");
  int id = 0;
  while (tree.nodes[id].var >= 0) {
    const TreeNode& node = tree.nodes[id];
    id = x(node.var) <= node.threshold ? node.left : node.right;
  }
  return id;
}

double predict_tree(const RegressionTree& tree, const Eigen::RowVectorXd& x) {
  return tree.nodes[terminal_node(tree, x)].mean;
}

std::vector<int> subtree_rows(const RegressionTree& tree, int node) {
  std::vector<int> out;
  std::vector<int> stack{node};
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    const TreeNode& current = tree.nodes[id];
    if (current.var < 0) {
      out.insert(out.end(), current.rows.begin(), current.rows.end());
    } else {
      stack.push_back(current.right);
      stack.push_back(current.left);
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

Forest fit_forest(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const ForestOptions& options,
                  Rng& rng) {
  const int n = static_cast<int>(x.rows());
  const int p = static_cast<int>(x.cols());
  if (options.n_trees < 1) throw ConfigError("forest: need at least one tree");
  Forest forest;
  forest.mtry = options.mtry > 0 ? options.mtry : std::max(1, p / 3);

  Eigen::MatrixXd xb(n, p);
  Eigen::VectorXd yb(n);
  std::vector<int> sample(n);
  for (int k = 0; k < options.n_trees; ++k) {
    if (options.bootstrap) {
      for (int i = 0; i < n; ++i)
        sample[i] = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
    } else {
      std::iota(sample.begin(), sample.end(), 0);
    }
    for (int i = 0; i < n; ++i) {
      xb.row(i) = x.row(sample[i]);
      yb(i) = y(sample[i]);
    }
    RegressionTree tree =
        fit_cart(xb, yb, options.max_terminal_nodes, options.min_leaf, rng, forest.mtry,
                 options.min_leaf_gates_split);
    for (TreeNode& node : tree.nodes)
      for (int& r : node.rows) r = sample[r];  // back to original training rows
    forest.trees.push_back(std::move(tree));
  }
  return forest;
}

double predict_forest(const Forest& forest, const Eigen::RowVectorXd& x) {
  double acc = 0.0;
  for (const RegressionTree& tree : forest.trees) acc += predict_tree(tree, x);
  return acc / static_cast<double>(forest.trees.size());
}

// ---------- distances ----------

std::optional<double> gower_distance(const Eigen::VectorXd& a,
                                     const Eigen::Array<bool, Eigen::Dynamic, 1>& a_observed,
                                     const Eigen::VectorXd& b,
                                     const Eigen::Array<bool, Eigen::Dynamic, 1>& b_observed,
                                     const Eigen::VectorXd& ranges) {
  double acc = 0.0;
  int used = 0;
  for (int v = 0; v < static_cast<int>(a.size()); ++v) {
    if (!a_observed(v) || !b_observed(v) || !(ranges(v) > 0.0)) continue;
    acc += std::fabs(a(v) - b(v)) / ranges(v);
    ++used;
  }
  if (used == 0) return std::nullopt;
  return acc / used;
}

// ---------- KNN ----------

ImputationSet impute_knn(const LongitudinalDataset& data, int k, const KnnOptions& options) {
  data.validate();
  if (k < 1) throw ConfigError("knn: k must be at least 1");
  (void)missing_counts(data);  // rejects unlearnable columns
  const VariableMatrix vm = variable_matrix(data, options.include_aux);
  const Eigen::VectorXd ranges = observed_ranges(vm);
  const int n = static_cast<int>(data.n());

  LongitudinalDataset completed = data;
  int fallbacks = 0;
  // Working copies: imputed cells of already-finished columns feed later
  // columns' distances when use_imputed_distances is set.
  Eigen::MatrixXd work = vm.values;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> comparable = vm.observed;

  std::vector<std::pair<double, int>> neighbors;  // (distance, row), sorted
  std::vector<std::pair<int, double>> column_fills;
  for (int t = 0; t < vm.n_targets; ++t) {
    column_fills.clear();
    for (int i = 0; i < n; ++i) {
      if (data.mask(i, t)) continue;

      neighbors.clear();
      const Eigen::VectorXd a = work.row(i).transpose();
      const Eigen::Array<bool, Eigen::Dynamic, 1> a_obs = comparable.row(i).transpose();
      for (int j = 0; j < n; ++j) {
        if (j == i || !data.mask(j, t)) continue;  // donors observed on the target
        const auto d = gower_distance(a, a_obs, work.row(j).transpose(),
                                      comparable.row(j).transpose(), ranges);
        if (d) neighbors.emplace_back(*d, j);
      }
      std::sort(neighbors.begin(), neighbors.end());  // ties fall to the lowest row

      double acc = 0.0, wacc = 0.0;
      int taken = 0;
      for (const auto& [d, j] : neighbors) {
        if (taken == k) break;
        const double w = options.weighted ? 1.0 / (d + 1e-6) : 1.0;
        acc += w * data.y(j, t);
        wacc += w;
        ++taken;
      }
      if (taken == 0)
        throw DataError("knn: no comparable donor observed on y" + std::to_string(t + 1) +
                        " for row " + std::to_string(i));
      if (static_cast<int>(neighbors.size()) < k) ++fallbacks;
      column_fills.emplace_back(i, acc / wacc);
    }

    for (const auto& [i, value] : column_fills) {
      completed.y(i, t) = value;
      if (options.use_imputed_distances) {
        work(i, t) = value;
        comparable(i, t) = true;
      }
    }
  }
  completed.mask.setConstant(true);

  ImputationSet out;
  out.completed.push_back(std::move(completed));
  out.method = "knn";
  out.hyper = {{"k", static_cast<double>(k)}, {"weighted", options.weighted ? 1.0 : 0.0}};
  if (fallbacks > 0) out.warnings["knn_donor_fallback"] = fallbacks;
  return out;
}

// ---------- missForest ----------

ImputationSet impute_missforest(const LongitudinalDataset& data, int n_trees, Rng& rng,
                                const MissForestOptions& options) {
  data.validate();
  if (n_trees < 1) throw ConfigError("missforest: need at least one tree");
  if (options.max_sweeps < 1) throw ConfigError("missforest: need at least one sweep");
  const std::vector<int> counts = missing_counts(data);
  const std::vector<int> order = visit_order(counts);

  ImputationSet out;
  out.method = "missforest";
  out.hyper = {{"n_trees", static_cast<double>(n_trees)},
               {"max_sweeps", static_cast<double>(options.max_sweeps)},
               {"min_leaf", static_cast<double>(options.min_leaf)}};
  if (order.empty()) {  // nothing missing: zero sweeps, returned unchanged
    out.completed.push_back(data);
    return out;
  }

  const VariableMatrix vm = variable_matrix(data, options.include_aux);
  const int n = static_cast<int>(data.n());
  Eigen::MatrixXd comp = vm.values;
  for (int t : order) {
    double mean = 0.0;
    int observed = 0;
    for (int i = 0; i < n; ++i)
      if (data.mask(i, t)) {
        mean += data.y(i, t);
        ++observed;
      }
    mean /= observed;
    for (int i = 0; i < n; ++i)
      if (!data.mask(i, t)) comp(i, t) = mean;
  }

  ForestOptions forest_options;
  forest_options.n_trees = n_trees;
  forest_options.min_leaf = options.min_leaf;
  // Candidate variables per split follow the missForest package convention:
  // the square root of the column count of the matrix being imputed
  // (response included), clamped to the predictor count.
  const int total_cols = static_cast<int>(vm.values.cols());
  forest_options.mtry =
      options.mtry > 0
          ? options.mtry
          : std::clamp(static_cast<int>(std::sqrt(static_cast<double>(total_cols))), 1,
                       total_cols - 1);
  forest_options.min_leaf_gates_split = true;  // forest nodesize convention

  double prev_delta = std::numeric_limits<double>::infinity();
  for (int sweep = 1; sweep <= options.max_sweeps; ++sweep) {
    const Eigen::MatrixXd snapshot = comp;
    for (int t : order) {
      const Eigen::MatrixXd predictors = drop_column(comp, t);
      const int n_fit = n - counts[t];
      Eigen::MatrixXd x_fit(n_fit, predictors.cols());
      Eigen::VectorXd y_fit(n_fit);
      int r = 0;
      for (int i = 0; i < n; ++i)
        if (data.mask(i, t)) {
          x_fit.row(r) = predictors.row(i);
          y_fit(r) = data.y(i, t);
          ++r;
        }
      const Forest forest = fit_forest(x_fit, y_fit, forest_options, rng);
      for (int i = 0; i < n; ++i)
        if (!data.mask(i, t)) comp(i, t) = predict_forest(forest, predictors.row(i));
    }

    double num = 0.0, den = 0.0;
    for (int t : order)
      for (int i = 0; i < n; ++i)
        if (!data.mask(i, t)) {
          const double diff = comp(i, t) - snapshot(i, t);
          num += diff * diff;
          den += comp(i, t) * comp(i, t);
        }
    const double delta = den > 0.0 ? num / den : 0.0;
    if (delta > prev_delta) {
      comp = snapshot;  // keep the matrix from before the change grew
      break;
    }
    prev_delta = delta;
    if (delta == 0.0) break;
  }

  out.completed.push_back(completed_copy(data, comp));
  return out;
}

// ---------- MICE with tree engines ----------

ImputationSet mice_impute(const LongitudinalDataset& data, MiceEngine engine, int m, int sweeps,
                          const MiceHyper& hyper, Rng& rng) {
  data.validate();
  if (m < 1) throw ConfigError("mice: number of chains must be at least 1");
  if (sweeps < 1) throw ConfigError("mice: number of sweeps must be at least 1");
  const std::vector<int> counts = missing_counts(data);
  const std::vector<int> order = visit_order(counts);
  const int n = static_cast<int>(data.n());

  ImputationSet out;
  out.method = engine == MiceEngine::kCart ? "micecart" : "miceforest";
  out.hyper = {{"chains", static_cast<double>(m)},
               {"sweeps", static_cast<double>(sweeps)},
               {"min_leaf", static_cast<double>(hyper.min_leaf)}};
  out.hyper[engine == MiceEngine::kCart ? "max_terminal_nodes" : "n_trees"] =
      static_cast<double>(engine == MiceEngine::kCart ? hyper.max_terminal_nodes : hyper.n_trees);

  // Observed donor values per target column, in row order.
  std::vector<std::vector<double>> observed_values(order.size());
  std::vector<std::vector<int>> observed_rows(order.size());
  for (std::size_t oi = 0; oi < order.size(); ++oi)
    for (int i = 0; i < n; ++i)
      if (data.mask(i, order[oi])) {
        observed_values[oi].push_back(data.y(i, order[oi]));
        observed_rows[oi].push_back(i);
      }

  int parent_fallbacks = 0;
  for (int chain = 0; chain < m; ++chain) {
    Rng chain_rng = rng.derive(static_cast<std::uint64_t>(chain));
    const VariableMatrix vm = variable_matrix(data, hyper.include_aux);
    Eigen::MatrixXd comp = vm.values;
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
      const int t = order[oi];
      for (int i = 0; i < n; ++i)
        if (!data.mask(i, t))
          comp(i, t) = observed_values[oi][chain_rng.uniform_int(observed_values[oi].size())];
    }

    ForestOptions forest_options;
    forest_options.n_trees = hyper.n_trees;
    forest_options.min_leaf = hyper.min_leaf;

    for (int sweep = 0; sweep < sweeps; ++sweep) {
      for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const int t = order[oi];
        const Eigen::MatrixXd predictors = drop_column(comp, t);

        // The engine is trained on the rows whose response is genuinely
        // observed; imputed values enter only through the predictor columns.
        const std::vector<int>& obs = observed_rows[oi];
        const int n_obs = static_cast<int>(obs.size());
        Eigen::MatrixXd x_fit(n_obs, predictors.cols());
        Eigen::VectorXd y_fit(n_obs);
        for (int r = 0; r < n_obs; ++r) {
          x_fit.row(r) = predictors.row(obs[r]);
          y_fit(r) = data.y(obs[r], t);
        }

        RegressionTree cart_tree;
        Forest forest;
        if (engine == MiceEngine::kCart)
          cart_tree = fit_cart(x_fit, y_fit, hyper.max_terminal_nodes, hyper.min_leaf,
                               chain_rng, 0);
        else
          forest = fit_forest(x_fit, y_fit, forest_options, chain_rng);

        std::vector<int> donors;
        for (int i = 0; i < n; ++i) {
          if (data.mask(i, t)) continue;
          donors.clear();
          if (engine == MiceEngine::kCart) {
            // Parents of each node, for the empty-donor climb.
            const RegressionTree& tree = cart_tree;
            std::vector<int> parent(tree.nodes.size(), -1);
            for (int id = 0; id < static_cast<int>(tree.nodes.size()); ++id)
              if (tree.nodes[id].var >= 0) {
                parent[tree.nodes[id].left] = id;
                parent[tree.nodes[id].right] = id;
              }
            int node = terminal_node(tree, predictors.row(i));
            while (true) {
              donors.clear();
              for (int r : subtree_rows(tree, node)) donors.push_back(obs[r]);
              if (!donors.empty()) break;
              ++parent_fallbacks;
              if (parent[node] < 0) {  // degenerate tree: whole column
                donors = observed_rows[oi];
                break;
              }
              node = parent[node];
            }
          } else {
            // Predictive draw: one tree uniformly, then one donor uniformly
            // from the terminal node that tree routes the row to.
            const RegressionTree& tree =
                forest.trees[chain_rng.uniform_int(forest.trees.size())];
            for (int r : subtree_rows(tree, terminal_node(tree, predictors.row(i))))
              donors.push_back(obs[r]);
            if (donors.empty()) {  // unreachable: leaves retain training rows
              ++parent_fallbacks;
              donors = observed_rows[oi];
            }
          }
          comp(i, t) = data.y(donors[chain_rng.uniform_int(donors.size())], t);
        }
      }
    }
    out.completed.push_back(completed_copy(data, comp));
  }
  if (parent_fallbacks > 0) out.warnings["mice_parent_fallback"] = parent_fallbacks;
  return out;
}

}  // namespace lgrowth
