#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lgrowth/model.hpp"
#include "lgrowth/rng.hpp"

namespace lgrowth {

// ---------- regression trees and forests ----------

struct TreeNode {
  int var = -1;  // split variable index; -1 marks a terminal node
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  std::vector<int> rows;  // training rows (terminal nodes only)
  double mean = 0.0;      // mean response over the training rows
};

struct RegressionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  int max_terminal_nodes = 0;   // 0 = unlimited
  int min_leaf = 5;
};

// Greedy best-first growth: repeatedly split the frontier node whose best
// admissible split yields the largest SSE reduction.  Ties break to the
// lowest variable index, then the smallest threshold, then the lowest node
// id.  mtry > 0 samples that many candidate variables per node from rng;
// mtry = 0 considers all variables and never touches rng.
// min_leaf bounds both children of every split; with min_leaf_gates_split it
// instead marks nodes of at most min_leaf rows terminal while children stay
// unconstrained (the usual random-forest nodesize convention).
RegressionTree fit_cart(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                        int max_terminal_nodes, int min_leaf, Rng& rng, int mtry = 0,
                        bool min_leaf_gates_split = false);

// Unique terminal node reached by threshold routing (x_v <= threshold goes
// left); returns its node id.
int terminal_node(const RegressionTree& tree, const Eigen::RowVectorXd& x);

double predict_tree(const RegressionTree& tree, const Eigen::RowVectorXd& x);

// Training rows of every terminal node under `node`, deduplicated, ascending.
std::vector<int> subtree_rows(const RegressionTree& tree, int node);

struct ForestOptions {
  int n_trees = 10;
  int mtry = 0;  // 0 = max(1, floor(p/3))
  int min_leaf = 5;
  int max_terminal_nodes = 0;
  bool bootstrap = true;  // disabled only in equivalence tests
  bool min_leaf_gates_split = false;  // see fit_cart
};

struct Forest {
  std::vector<RegressionTree> trees;
  int mtry = 0;
};

// Each tree is fit on a bootstrap resample of size n (drawn with
// replacement); terminal-node row lists refer to original training rows.
Forest fit_forest(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                  const ForestOptions& options, Rng& rng);

double predict_forest(const Forest& forest, const Eigen::RowVectorXd& x);

// ---------- distances ----------

// Mean over co-observed variables of |a_v - b_v| / range_v.  Variables with
// range <= 0 are excluded.  Returns nullopt when no variable is co-observed
// (the pair is incomparable and must be excluded from neighbor searches).
std::optional<double> gower_distance(const Eigen::VectorXd& a,
                                     const Eigen::Array<bool, Eigen::Dynamic, 1>& a_observed,
                                     const Eigen::VectorXd& b,
                                     const Eigen::Array<bool, Eigen::Dynamic, 1>& b_observed,
                                     const Eigen::VectorXd& ranges);

// ---------- imputation ----------

struct ImputationSet {
  std::vector<LongitudinalDataset> completed;  // M copies, mask all true
  std::string method;
  std::map<std::string, double> hyper;
  std::uint64_t seed = 0;
  std::map<std::string, int> warnings;
};

struct KnnOptions {
  bool weighted = false;     // inverse-distance weighting of the k donors
  bool include_aux = false;  // let the auxiliary covariate enter the distance
  // Variables are imputed column by column; when true (the VIM-style default)
  // cells imputed for earlier columns take part in later columns' distances.
  bool use_imputed_distances = true;
};

// Fill each missing cell with the (optionally weighted) mean of that variable
// over the k nearest donors under Gower distance; donors must be observed on
// the target variable.  Fewer than k eligible donors falls back to all of
// them with a warning count.  Deterministic: ties break to the lowest row.
ImputationSet impute_knn(const LongitudinalDataset& data, int k, const KnnOptions& options = {});

// mtry = 0 resolves to the missForest package convention: floor(sqrt(column
// count of the imputation matrix, response included)), clamped to predictors.
struct MissForestOptions {
  int max_sweeps = 10;
  int min_leaf = 5;
  int mtry = 0;  // 0 = the package convention above
  bool include_aux = false;
};

// Iterative forest imputation: seed missing cells with observed means, then
// refit per variable (ascending missingness) until the normalized change over
// imputed cells first increases — returning the pre-increase matrix — or the
// sweep cap is reached.
ImputationSet impute_missforest(const LongitudinalDataset& data, int n_trees, Rng& rng,
                                const MissForestOptions& options = {});

enum class MiceEngine { kCart, kRf };

struct MiceHyper {
  int max_terminal_nodes = 5;  // cart engine
  int n_trees = 10;            // rf engine
  int min_leaf = 5;
  bool include_aux = false;
};

// Chained-equation multiple imputation with tree engines.  Each of the M
// chains initializes missing cells by uniform draws from the observed values,
// then per sweep refits the engine on the observed-response rows per
// incomplete variable (predictors come from the current completed data) and
// imputes by drawing uniformly from the donors in the routed terminal node —
// for rf, picking one tree uniformly first (a predictive draw).  Empty cart
// donor sets climb to the parent node with a warning count.
// Chain m draws from rng.derive(m), so chains are independent and the parent
// stream is left untouched.
ImputationSet mice_impute(const LongitudinalDataset& data, MiceEngine engine, int m, int sweeps,
                          const MiceHyper& hyper, Rng& rng);

}  // namespace lgrowth
