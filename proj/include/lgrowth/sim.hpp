#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "lgrowth/analysis.hpp"
#include "lgrowth/fit.hpp"
#include "lgrowth/impute.hpp"
#include "lgrowth/missing.hpp"
#include "lgrowth/model.hpp"

namespace lgrowth {

enum class Method : int {
  kFiml = 0,
  kTsre = 1,
  kKnn = 2,
  kMissForest = 3,
  kMiceCart = 4,
  kMiceForest = 5,
};

std::string to_string(Method method);
Method method_from_string(const std::string& label);
std::vector<Method> all_methods();
bool is_imputation_method(Method method);

// Tunable method settings; the defaults mirror the selected study settings
// (k = 5, 10 trees, 5 terminal nodes, M = 20 chains, 5 sweeps).
struct MethodHyper {
  int knn_k = 5;
  int missforest_trees = 10;
  int micecart_nodes = 5;
  int miceforest_trees = 10;
  int mice_m = 20;
  int mice_sweeps = 5;
  int min_leaf = 5;
};

struct Condition {
  int n = 500;
  Mechanism mechanism = Mechanism::kNone;
  double mr = 0.0;
  ErrorDistribution dist = ErrorDistribution::normal();
  std::vector<Method> methods = all_methods();
  int reps = 100;
  std::uint64_t base_seed = 0;
};

void validate_condition(const Condition& condition);

// The full factorial design: 5 sample sizes x {MAR, MNAR} x {5%, 15%, 30%}
// x 4 error distributions, plus 5 x 4 complete-data cells = 140 conditions.
std::vector<Condition> full_study_conditions();

// Dispatches one imputation method on one dataset.  knn is deterministic and
// never reads the stream; the provenance of the randomized methods records
// the stream's seed.
ImputationSet impute_with(const LongitudinalDataset& data, Method method,
                          const MethodHyper& hyper, Rng& rng);

// One method applied to one incomplete dataset.  Direct estimators fit the
// incomplete data; imputation methods complete it (M copies for the chained
// methods), fit each copy by complete-data ML, and pool.  Throws
// NonConvergenceError when pooling has too few surviving chains.
FitResult apply_method(const LongitudinalDataset& data, Method method, const MethodHyper& hyper,
                       Rng& rng, const GcmSpec& spec_shape);

struct MethodOutcome {
  FitResult fit;
  bool ok = false;
  std::string error;  // failure note when !ok
};

struct ReplicationResult {
  std::vector<MethodOutcome> outcomes;  // parallel to Condition::methods
};

// One replication: generate a cohort, inject missingness once, then apply
// every requested method to the same incomplete dataset (imputation methods
// are followed by a complete-data ML fit per copy, pooled across copies).
// Deterministic given (base_seed, condition_index, rep_index); per-method
// work draws from derived streams so methods never perturb one another.
ReplicationResult run_replication(const Condition& condition, int rep_index,
                                  const MethodHyper& hyper = {}, int condition_index = 0);

struct MethodMetrics {
  Method method = Method::kFiml;
  int n_reps = 0;    // replications contributing to the metrics
  int failures = 0;  // replications dropped for this method
  std::array<MetricRecord, kNumParams> records{};
};

struct ConditionSummary {
  Condition condition;
  int condition_id = 0;  // 1-based row in the grid
  std::vector<MethodMetrics> methods;
  double wall_seconds = 0.0;  // diagnostic only; never serialized
};

// Runs the whole grid with replication-level parallelism.  Summaries come
// back in input order and are a pure function of (grid, seeds): scheduling
// and the parallelism degree never change the numbers.
std::vector<ConditionSummary> run_grid(const std::vector<Condition>& grid, int parallelism,
                                       const MethodHyper& hyper = {}, bool progress = false);

struct SweepEntry {
  int level = 0;
  ConditionSummary summary;
};

// Re-runs one condition at each hyperparameter level of an ML method (k for
// knn, trees for the forests, terminal nodes for micecart) with common random
// numbers across levels.
std::vector<SweepEntry> hyperparameter_sweep(const Condition& condition, Method method,
                                             const std::vector<int>& levels,
                                             const MethodHyper& base_hyper = {},
                                             int parallelism = 1);
std::vector<int> default_sweep_levels(Method method);

struct GridConfig {
  std::vector<Condition> conditions;
  int reps = 100;
  std::uint64_t base_seed = 0;
  bool base_seed_set = false;  // whether the JSON pinned base_seed explicitly
  std::string output_dir;
  int parallelism = 1;
  MethodHyper hyper;
};

// Parses the grid JSON {conditions, reps, base_seed, output_dir, parallelism,
// hyperparameter overrides}; unknown keys are rejected by name.
GridConfig parse_grid_config(const std::string& json_text);

// Long-format report: one row per (condition, method, parameter).
void write_report_csv(std::ostream& out, const std::vector<ConditionSummary>& summaries);

// Round-trippable per-condition summary record.
std::string condition_summary_json(const ConditionSummary& summary);
ConditionSummary condition_summary_from_json(const std::string& json_text);

}  // namespace lgrowth
