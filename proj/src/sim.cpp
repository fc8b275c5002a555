#include "lgrowth/sim.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <exception>
#include <iostream>
#include <limits>
#include <mutex>
#include <numeric>
#include <ostream>
#include <set>
#include <thread>
#include <utility>

#include <json.hpp>

#include "lgrowth/errors.hpp"
#include "lgrowth/impute.hpp"
#include "lgrowth/io.hpp"

namespace lgrowth {
namespace {

using nlohmann::json;

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();
constexpr double kMnarTargetCorr = 0.8;

// Stream-key stages within a replication.
constexpr std::uint32_t kStageData = 0;
constexpr std::uint32_t kStageMissingness = 1;
constexpr std::uint32_t kStageMethod = 2;

const std::array<std::pair<Method, const char*>, 6>& method_table() {
  static const std::array<std::pair<Method, const char*>, 6> table{{
      {Method::kFiml, "fiml"},
      {Method::kTsre, "tsre"},
      {Method::kKnn, "knn"},
      {Method::kMissForest, "missforest"},
      {Method::kMiceCart, "micecart"},
      {Method::kMiceForest, "miceforest"},
  }};
  return table;
}

void validate_hyper(const MethodHyper& hyper) {
  if (hyper.knn_k < 1) throw ConfigError("knn_k must be at least 1");
  if (hyper.missforest_trees < 1) throw ConfigError("missforest_trees must be at least 1");
  if (hyper.miceforest_trees < 1) throw ConfigError("miceforest_trees must be at least 1");
  if (hyper.micecart_nodes < 0)
    throw ConfigError("micecart_nodes must be nonnegative (0 = unlimited)");
  if (hyper.mice_m < 1) throw ConfigError("m (imputation chains) must be at least 1");
  if (hyper.mice_sweeps < 1) throw ConfigError("sweeps must be at least 1");
  if (hyper.min_leaf < 1) throw ConfigError("min_leaf must be at least 1");
}

ConditionSummary summarize_condition(const Condition& condition, int condition_id,
                                     const std::vector<ReplicationResult>& reps) {
  const ThetaVector truth = theta_from_spec(GcmSpec{});
  const auto& names = parameter_names();

  ConditionSummary summary;
  summary.condition = condition;
  summary.condition_id = condition_id;
  summary.methods.resize(condition.methods.size());
  for (std::size_t mi = 0; mi < condition.methods.size(); ++mi) {
    MethodMetrics& mm = summary.methods[mi];
    mm.method = condition.methods[mi];
    std::array<std::vector<double>, kNumParams> estimates;
    for (const ReplicationResult& rep : reps) {
      const MethodOutcome& outcome = rep.outcomes[mi];
      if (outcome.ok) {
        ++mm.n_reps;
        for (int p = 0; p < kNumParams; ++p) estimates[p].push_back(outcome.fit.theta(p));
      } else {
        ++mm.failures;
      }
    }
    for (int p = 0; p < kNumParams; ++p) {
      MetricRecord& record = mm.records[p];
      record.parameter = names[p];
      record.n_reps = mm.n_reps;
      if (mm.n_reps > 0) {
        record.rb = relative_bias(estimates[p], truth(p));
        record.mse = mse(estimates[p], truth(p));
      } else {
        record.rb = kNan;
        record.mse = kNan;
      }
    }
  }
  return summary;
}

// ---------- JSON helpers ----------

int as_int(const json& value, const std::string& key) {
  if (!value.is_number_integer())
    throw ConfigError("key \"" + key + "\" must be an integer");
  return value.get<int>();
}

double as_number(const json& value, const std::string& key) {
  if (!value.is_number()) throw ConfigError("key \"" + key + "\" must be a number");
  return value.get<double>();
}

std::string as_string(const json& value, const std::string& key) {
  if (!value.is_string()) throw ConfigError("key \"" + key + "\" must be a string");
  return value.get<std::string>();
}

Condition parse_condition(const json& item, std::size_t index, const GridConfig& grid) {
  const std::string context = "conditions[" + std::to_string(index) + "]";
  if (!item.is_object()) throw ConfigError(context + " must be a JSON object");
  static const std::set<std::string> known{"n", "mechanism", "mr", "dist", "methods", "reps"};
  for (const auto& entry : item.items()) {
    if (!known.count(entry.key()))
      throw ConfigError("unknown condition key \"" + entry.key() + "\" in " + context);
  }
  Condition condition;
  condition.reps = grid.reps;
  condition.base_seed = grid.base_seed;
  if (!item.contains("n")) throw ConfigError(context + " is missing required key \"n\"");
  condition.n = as_int(item["n"], context + ".n");
  if (item.contains("mechanism"))
    condition.mechanism = mechanism_from_string(as_string(item["mechanism"], context + ".mechanism"));
  if (item.contains("mr")) condition.mr = as_number(item["mr"], context + ".mr");
  if (item.contains("dist"))
    condition.dist = error_distribution_from_string(as_string(item["dist"], context + ".dist"));
  if (item.contains("reps")) condition.reps = as_int(item["reps"], context + ".reps");
  if (item.contains("methods")) {
    const json& methods = item["methods"];
    if (!methods.is_array())
      throw ConfigError(context + ".methods must be an array of method names");
    condition.methods.clear();
    for (const json& m : methods)
      condition.methods.push_back(method_from_string(as_string(m, context + ".methods[]")));
    std::sort(condition.methods.begin(), condition.methods.end(),
              [](Method a, Method b) { return static_cast<int>(a) < static_cast<int>(b); });
  }
  validate_condition(condition);
  return condition;
}

}  // namespace

std::string to_string(Method method) {
  for (const auto& [m, label] : method_table()) {
    if (m == method) return label;
  }
  throw ConfigError("unknown method id " + std::to_string(static_cast<int>(method)));
}

Method method_from_string(const std::string& label) {
  for (const auto& [m, name] : method_table()) {
    if (label == name) return m;
  }
  throw ConfigError("unknown method \"" + label +
                    "\"; expected one of fiml, tsre, knn, missforest, micecart, miceforest");
}

std::vector<Method> all_methods() {
  std::vector<Method> methods;
  methods.reserve(method_table().size());
  for (const auto& [m, label] : method_table()) methods.push_back(m);
  return methods;
}

bool is_imputation_method(Method method) {
  return method != Method::kFiml && method != Method::kTsre;
}

ImputationSet impute_with(const LongitudinalDataset& data, Method method,
                          const MethodHyper& hyper, Rng& rng) {
  validate_hyper(hyper);
  switch (method) {
    case Method::kKnn:
      return impute_knn(data, hyper.knn_k);
    case Method::kMissForest: {
      MissForestOptions options;
      options.min_leaf = hyper.min_leaf;
      ImputationSet set = impute_missforest(data, hyper.missforest_trees, rng, options);
      set.seed = rng.seed();
      return set;
    }
    case Method::kMiceCart: {
      MiceHyper mice;
      mice.max_terminal_nodes = hyper.micecart_nodes;
      mice.min_leaf = hyper.min_leaf;
      ImputationSet set =
          mice_impute(data, MiceEngine::kCart, hyper.mice_m, hyper.mice_sweeps, mice, rng);
      set.seed = rng.seed();
      return set;
    }
    case Method::kMiceForest: {
      MiceHyper mice;
      mice.n_trees = hyper.miceforest_trees;
      mice.min_leaf = hyper.min_leaf;
      ImputationSet set =
          mice_impute(data, MiceEngine::kRf, hyper.mice_m, hyper.mice_sweeps, mice, rng);
      set.seed = rng.seed();
      return set;
    }
    default:
      throw ConfigError("method " + to_string(method) + " is not an imputation method");
  }
}

FitResult apply_method(const LongitudinalDataset& data, Method method, const MethodHyper& hyper,
                       Rng& rng, const GcmSpec& spec_shape) {
  if (method == Method::kFiml) {
    FitResult fit = fit_fiml(data, spec_shape);
    fit.method = to_string(method);
    return fit;
  }
  if (method == Method::kTsre) {
    FitResult fit = fit_tsre(data, spec_shape);
    fit.method = to_string(method);
    return fit;
  }
  const ImputationSet set = impute_with(data, method, hyper, rng);
  std::vector<FitResult> fits;
  fits.reserve(set.completed.size());
  for (const LongitudinalDataset& completed : set.completed) {
    fits.push_back(fit_fiml(completed, spec_shape));
  }
  const PooledFit pooled = pool_rubin(fits);  // throws when too few chains survive
  FitResult out;
  out.method = to_string(method);
  out.theta = pooled.theta_bar;
  out.se = pooled.se_pooled;
  out.loglik = kNan;  // not an observed-data likelihood
  out.converged = true;
  return out;
}

void validate_condition(const Condition& condition) {
  if (condition.n < 10)
    throw ConfigError("condition sample size must be at least 10, got " +
                      std::to_string(condition.n));
  if (condition.reps < 1) throw ConfigError("condition must request at least one replication");
  if (condition.reps >= (1 << 24))
    throw ConfigError("replication count exceeds the stream address space (2^24)");
  validate_missing_rate(condition.mr);
  if (condition.mechanism == Mechanism::kNone && condition.mr != 0.0)
    throw ConfigError("mechanism 'none' requires a zero missing rate, got mr = " +
                      format_double(condition.mr));
  if (condition.mechanism != Mechanism::kNone && condition.mr == 0.0)
    throw ConfigError("a nonzero missing rate is required under mechanism '" +
                      to_string(condition.mechanism) +
                      "'; use mechanism 'none' for complete data");
  if (condition.methods.empty()) throw ConfigError("condition requests no methods");
  std::set<int> seen;
  for (Method method : condition.methods) {
    if (!seen.insert(static_cast<int>(method)).second)
      throw ConfigError("duplicate method in condition: " + to_string(method));
  }
}

std::vector<Condition> full_study_conditions() {
  const std::array<int, 5> sizes{100, 200, 500, 1000, 5000};
  const std::array<ErrorDistribution, 4> dists{
      ErrorDistribution::normal(), ErrorDistribution::lognormal(),
      ErrorDistribution::student_t5(), ErrorDistribution::contaminated()};
  const std::array<double, 3> rates{0.05, 0.15, 0.30};

  std::vector<Condition> grid;
  grid.reserve(140);
  for (int n : sizes) {
    for (Mechanism mechanism : {Mechanism::kNone, Mechanism::kMar, Mechanism::kMnar}) {
      const std::vector<double> mrs =
          mechanism == Mechanism::kNone ? std::vector<double>{0.0}
                                        : std::vector<double>(rates.begin(), rates.end());
      for (double mr : mrs) {
        for (const ErrorDistribution& dist : dists) {
          Condition condition;
          condition.n = n;
          condition.mechanism = mechanism;
          condition.mr = mr;
          condition.dist = dist;
          grid.push_back(std::move(condition));
        }
      }
    }
  }
  return grid;
}

ReplicationResult run_replication(const Condition& condition, int rep_index,
                                  const MethodHyper& hyper, int condition_index) {
  validate_condition(condition);
  validate_hyper(hyper);
  if (rep_index < 0) throw ConfigError("replication index must be nonnegative");
  if (condition_index < 0) throw ConfigError("condition index must be nonnegative");

  const Rng base(condition.base_seed);
  const auto cond = static_cast<std::uint32_t>(condition_index);
  const auto rep = static_cast<std::uint32_t>(rep_index);

  const GcmSpec spec{};
  Rng data_rng = base.derive(stream_key(cond, rep, kStageData, 0));
  const LongitudinalDataset cohort = generate_cohort(spec, condition.dist, condition.n, data_rng);

  Rng miss_rng = base.derive(stream_key(cond, rep, kStageMissingness, 0));
  const LongitudinalDataset incomplete =
      apply_missingness(cohort, condition.mechanism, condition.mr, kMnarTargetCorr, miss_rng);

  ReplicationResult result;
  result.outcomes.resize(condition.methods.size());
  for (std::size_t mi = 0; mi < condition.methods.size(); ++mi) {
    const Method method = condition.methods[mi];
    MethodOutcome& outcome = result.outcomes[mi];
    Rng method_rng =
        base.derive(stream_key(cond, rep, kStageMethod, static_cast<std::uint32_t>(method)));
    try {
      outcome.fit = apply_method(incomplete, method, hyper, method_rng, spec);
      outcome.ok = outcome.fit.converged;
      if (!outcome.ok) outcome.error = "estimator did not converge";
    } catch (const std::exception& e) {
      outcome.fit = FitResult{};
      outcome.fit.method = to_string(method);
      outcome.ok = false;
      outcome.error = e.what();
    }
  }
  return result;
}

std::vector<ConditionSummary> run_grid(const std::vector<Condition>& grid, int parallelism,
                                       const MethodHyper& hyper, bool progress) {
  if (parallelism < 1) throw ConfigError("parallelism must be at least 1");
  if (grid.size() > 65535)
    throw ConfigError("grid exceeds the condition address space (65535 conditions)");
  validate_hyper(hyper);
  for (const Condition& condition : grid) validate_condition(condition);

  struct Task {
    int condition = 0;
    int rep = 0;
  };
  std::vector<Task> tasks;
  std::vector<std::vector<ReplicationResult>> slots(grid.size());
  for (std::size_t ci = 0; ci < grid.size(); ++ci) {
    slots[ci].resize(grid[ci].reps);
    for (int rep = 0; rep < grid[ci].reps; ++rep)
      tasks.push_back({static_cast<int>(ci), rep});
  }
  std::vector<double> task_seconds(tasks.size(), 0.0);

  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;
  std::mutex progress_mutex;
  const std::size_t progress_step = std::max<std::size_t>(1, tasks.size() / 20);

  const auto worker = [&]() {
    for (;;) {
      const std::size_t index = next.fetch_add(1);
      if (index >= tasks.size()) return;
      const Task task = tasks[index];
      try {
        const auto start = std::chrono::steady_clock::now();
        slots[task.condition][task.rep] =
            run_replication(grid[task.condition], task.rep, hyper, task.condition);
        task_seconds[index] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      } catch (...) {
        const std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
      const std::size_t finished = done.fetch_add(1) + 1;
      if (progress && (finished % progress_step == 0 || finished == tasks.size())) {
        const std::lock_guard<std::mutex> lock(progress_mutex);
        std::cerr << "progress: " << finished << "/" << tasks.size() << " replications\n";
      }
    }
  };

  const int n_workers =
      static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(parallelism),
                                             std::max<std::size_t>(1, tasks.size())));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    threads.reserve(n_workers);
    for (int w = 0; w < n_workers; ++w) threads.emplace_back(worker);
    for (std::thread& thread : threads) thread.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  std::vector<ConditionSummary> summaries;
  summaries.reserve(grid.size());
  std::size_t task_index = 0;
  for (std::size_t ci = 0; ci < grid.size(); ++ci) {
    ConditionSummary summary = summarize_condition(grid[ci], static_cast<int>(ci) + 1, slots[ci]);
    double seconds = 0.0;
    for (int rep = 0; rep < grid[ci].reps; ++rep) seconds += task_seconds[task_index++];
    summary.wall_seconds = seconds;
    summaries.push_back(std::move(summary));
  }
  return summaries;
}

std::vector<int> default_sweep_levels(Method method) {
  switch (method) {
    case Method::kKnn: {
      std::vector<int> levels(14);
      std::iota(levels.begin(), levels.end(), 5);
      return levels;
    }
    case Method::kMissForest:
    case Method::kMiceForest:
      return {10, 50, 100};
    case Method::kMiceCart:
      return {5, 10, 15};
    default:
      throw ConfigError("method " + to_string(method) + " has no hyperparameter to sweep");
  }
}

std::vector<SweepEntry> hyperparameter_sweep(const Condition& condition, Method method,
                                             const std::vector<int>& levels,
                                             const MethodHyper& base_hyper, int parallelism) {
  if (!is_imputation_method(method))
    throw ConfigError("hyperparameter sweeps apply to the machine-learning methods only, not " +
                      to_string(method));
  if (levels.empty()) throw ConfigError("sweep requires at least one level");

  Condition swept = condition;
  swept.methods = {method};
  validate_condition(swept);

  std::vector<SweepEntry> entries;
  entries.reserve(levels.size());
  for (int level : levels) {
    MethodHyper hyper = base_hyper;
    switch (method) {
      case Method::kKnn:
        hyper.knn_k = level;
        break;
      case Method::kMissForest:
        hyper.missforest_trees = level;
        break;
      case Method::kMiceCart:
        hyper.micecart_nodes = level;
        break;
      case Method::kMiceForest:
        hyper.miceforest_trees = level;
        break;
      default:
        break;
    }
    std::vector<ConditionSummary> summaries = run_grid({swept}, parallelism, hyper, false);
    entries.push_back({level, std::move(summaries.front())});
  }
  return entries;
}

GridConfig parse_grid_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("grid config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("grid config must be a JSON object");

  static const std::set<std::string> known{
      "conditions", "reps",          "base_seed",       "output_dir",
      "parallelism", "m",            "sweeps",          "knn_k",
      "missforest_trees", "micecart_nodes", "miceforest_trees", "min_leaf"};
  for (const auto& entry : root.items()) {
    if (!known.count(entry.key()))
      throw ConfigError("unknown grid config key \"" + entry.key() + "\"");
  }

  GridConfig config;
  if (root.contains("reps")) config.reps = as_int(root["reps"], "reps");
  if (config.reps < 1) throw ConfigError("reps must be at least 1");
  if (root.contains("base_seed")) {
    const json& seed = root["base_seed"];
    if (!seed.is_number_integer() || (seed.is_number_integer() && !seed.is_number_unsigned() &&
                                      seed.get<std::int64_t>() < 0))
      throw ConfigError("key \"base_seed\" must be a nonnegative integer");
    config.base_seed = seed.get<std::uint64_t>();
    config.base_seed_set = true;
  }
  if (root.contains("output_dir")) config.output_dir = as_string(root["output_dir"], "output_dir");
  if (root.contains("parallelism")) config.parallelism = as_int(root["parallelism"], "parallelism");
  if (config.parallelism < 1) throw ConfigError("parallelism must be at least 1");

  if (root.contains("m")) config.hyper.mice_m = as_int(root["m"], "m");
  if (root.contains("sweeps")) config.hyper.mice_sweeps = as_int(root["sweeps"], "sweeps");
  if (root.contains("knn_k")) config.hyper.knn_k = as_int(root["knn_k"], "knn_k");
  if (root.contains("missforest_trees"))
    config.hyper.missforest_trees = as_int(root["missforest_trees"], "missforest_trees");
  if (root.contains("micecart_nodes"))
    config.hyper.micecart_nodes = as_int(root["micecart_nodes"], "micecart_nodes");
  if (root.contains("miceforest_trees"))
    config.hyper.miceforest_trees = as_int(root["miceforest_trees"], "miceforest_trees");
  if (root.contains("min_leaf")) config.hyper.min_leaf = as_int(root["min_leaf"], "min_leaf");
  validate_hyper(config.hyper);

  if (!root.contains("conditions"))
    throw ConfigError("grid config is missing required key \"conditions\"");
  const json& conditions = root["conditions"];
  if (!conditions.is_array()) throw ConfigError("key \"conditions\" must be an array");
  config.conditions.reserve(conditions.size());
  for (std::size_t i = 0; i < conditions.size(); ++i)
    config.conditions.push_back(parse_condition(conditions[i], i, config));
  return config;
}

void write_report_csv(std::ostream& out, const std::vector<ConditionSummary>& summaries) {
  out << "condition_id,n,mechanism,mr,dist,method,parameter,rb_percent,mse,n_reps,failures\n";
  for (const ConditionSummary& summary : summaries) {
    const Condition& condition = summary.condition;
    for (const MethodMetrics& mm : summary.methods) {
      for (const MetricRecord& record : mm.records) {
        out << summary.condition_id << ',' << condition.n << ',' << to_string(condition.mechanism)
            << ',' << format_double(condition.mr) << ',' << to_string(condition.dist.kind) << ','
            << to_string(mm.method) << ',' << record.parameter << ',' << format_double(record.rb)
            << ',' << format_double(record.mse) << ',' << record.n_reps << ',' << mm.failures
            << '\n';
      }
    }
  }
}

std::string condition_summary_json(const ConditionSummary& summary) {
  json j;
  j["condition_id"] = summary.condition_id;
  j["n"] = summary.condition.n;
  j["mechanism"] = to_string(summary.condition.mechanism);
  j["mr"] = summary.condition.mr;
  j["dist"] = to_string(summary.condition.dist.kind);
  j["reps"] = summary.condition.reps;
  j["base_seed"] = summary.condition.base_seed;
  json methods = json::array();
  for (const MethodMetrics& mm : summary.methods) {
    json jm;
    jm["method"] = to_string(mm.method);
    jm["n_reps"] = mm.n_reps;
    jm["failures"] = mm.failures;
    json metrics;
    for (const MetricRecord& record : mm.records) {
      json jr;
      jr["rb_percent"] = record.rb;
      jr["mse"] = record.mse;
      metrics[record.parameter] = std::move(jr);
    }
    jm["metrics"] = std::move(metrics);
    methods.push_back(std::move(jm));
  }
  j["methods"] = std::move(methods);
  return j.dump(2) + "\n";
}

ConditionSummary condition_summary_from_json(const std::string& json_text) {
  try {
    const json j = json::parse(json_text);
    ConditionSummary summary;
    summary.condition_id = j.at("condition_id").get<int>();
    summary.condition.n = j.at("n").get<int>();
    summary.condition.mechanism = mechanism_from_string(j.at("mechanism").get<std::string>());
    summary.condition.mr = j.at("mr").get<double>();
    summary.condition.dist = error_distribution_from_string(j.at("dist").get<std::string>());
    summary.condition.reps = j.at("reps").get<int>();
    summary.condition.base_seed = j.at("base_seed").get<std::uint64_t>();
    summary.condition.methods.clear();

    const auto& names = parameter_names();
    for (const json& jm : j.at("methods")) {
      MethodMetrics mm;
      mm.method = method_from_string(jm.at("method").get<std::string>());
      mm.n_reps = jm.at("n_reps").get<int>();
      mm.failures = jm.at("failures").get<int>();
      const json& metrics = jm.at("metrics");
      for (int p = 0; p < kNumParams; ++p) {
        const json& jr = metrics.at(names[p]);
        MetricRecord& record = mm.records[p];
        record.parameter = names[p];
        record.n_reps = mm.n_reps;
        const json& rb = jr.at("rb_percent");
        record.rb = rb.is_null() ? kNan : rb.get<double>();
        const json& ms = jr.at("mse");
        record.mse = ms.is_null() ? kNan : ms.get<double>();
      }
      summary.condition.methods.push_back(mm.method);
      summary.methods.push_back(std::move(mm));
    }
    return summary;
  } catch (const std::exception& e) {
    throw DataError(std::string("condition summary record: ") + e.what());
  }
}

}  // namespace lgrowth
