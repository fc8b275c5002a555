#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lgrowth/errors.hpp"
#include "lgrowth/io.hpp"
#include "lgrowth/sim.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lgrowth;

namespace {

std::uint64_t entropy_seed() {
  std::random_device device;
  return (static_cast<std::uint64_t>(device()) << 32) ^ device();
}

// Every random stream in the binary flows from one resolved seed.  When the
// flag is omitted the seed is drawn from entropy and printed, so any run can
// be reproduced after the fact.
struct SeedFlag {
  std::optional<std::uint64_t> value;

  std::uint64_t resolve() {
    if (!value) {
      value = entropy_seed();
      std::cerr << "seed: " << *value << "\n";
    }
    return *value;
  }
};

// Hyperparameter overrides shared by fit, impute, and sweep.
struct HyperFlags {
  std::optional<int> m, sweeps, k, trees, nodes, min_leaf;

  void attach(CLI::App* cmd) {
    cmd->add_option("--m", m, "imputation chains for micecart/miceforest (default 20)");
    cmd->add_option("--sweeps", sweeps, "chained-equation sweeps per chain (default 5)");
    cmd->add_option("--k", k, "donor count for knn (default 5)");
    cmd->add_option("--trees", trees, "trees for missforest/miceforest (default 10)");
    cmd->add_option("--nodes", nodes, "terminal-node cap for micecart (default 5)");
    cmd->add_option("--min-leaf", min_leaf, "minimum rows per terminal node (default 5)");
  }

  MethodHyper apply(MethodHyper base) const {
    if (m) base.mice_m = *m;
    if (sweeps) base.mice_sweeps = *sweeps;
    if (k) base.knn_k = *k;
    if (trees) {
      base.missforest_trees = *trees;
      base.miceforest_trees = *trees;
    }
    if (nodes) base.micecart_nodes = *nodes;
    if (min_leaf) base.min_leaf = *min_leaf;
    return base;
  }
};

std::string slurp(const fs::path& path, bool config_input) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    const std::string message = "cannot open '" + path.string() + "' for reading";
    if (config_input) throw ConfigError(message);
    throw DataError(message);
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw DataError("write to '" + path.string() + "' failed");
}

json fit_record(const FitResult& fit) {
  json record;
  record["method"] = fit.method;
  json theta, se;
  const auto& names = parameter_names();
  for (int p = 0; p < kNumParams; ++p) {
    theta[names[p]] = fit.theta(p);
    se[names[p]] = fit.se(p);
  }
  record["theta"] = std::move(theta);
  record["se"] = std::move(se);
  // The log-likelihood is defined for direct ML only; non-finite serializes
  // as null as well.
  record["loglik"] = fit.method == "fiml" ? json(fit.loglik) : json(nullptr);
  record["converged"] = fit.converged;
  record["boundary"] = fit.boundary;
  return record;
}

json provenance_json(const ImputationSet& set) {
  json j;
  j["method"] = set.method;
  j["hyper"] = json(set.hyper);
  j["seed"] = set.seed;
  j["warnings"] = json(set.warnings);
  return j;
}

GcmSpec spec_for(const LongitudinalDataset& data) {
  GcmSpec spec;
  spec.n_occasions = static_cast<int>(data.t());
  spec.lambda = growth_loadings(spec.n_occasions);
  return spec;
}

// ---------- subcommands ----------

struct SimulateArgs {
  std::string grid_path;
  SeedFlag seed;
  std::optional<std::string> output_dir;
  std::optional<int> parallelism;
  std::optional<int> reps;
};

int cmd_simulate(SimulateArgs& args) {
  GridConfig config = parse_grid_config(slurp(args.grid_path, /*config_input=*/true));

  std::uint64_t seed = 0;
  if (args.seed.value) {
    seed = *args.seed.value;
  } else if (config.base_seed_set) {
    seed = config.base_seed;
  } else {
    seed = args.seed.resolve();  // entropy; printed
  }
  for (Condition& condition : config.conditions) condition.base_seed = seed;

  if (args.reps) {
    for (Condition& condition : config.conditions) {
      condition.reps = *args.reps;
      validate_condition(condition);
    }
  }
  const int parallelism = args.parallelism.value_or(config.parallelism);
  const fs::path out_dir =
      args.output_dir.value_or(config.output_dir.empty() ? "out" : config.output_dir);

  const std::vector<ConditionSummary> summaries =
      run_grid(config.conditions, parallelism, config.hyper, /*progress=*/true);

  fs::create_directories(out_dir);
  {
    std::ostringstream csv;
    write_report_csv(csv, summaries);
    write_text_file(out_dir / "report.csv", csv.str());
  }
  const std::size_t width = std::max<std::size_t>(3, std::to_string(summaries.size()).size());
  double wall = 0.0;
  for (const ConditionSummary& summary : summaries) {
    std::string id = std::to_string(summary.condition_id);
    if (id.size() < width) id.insert(0, width - id.size(), '0');
    write_text_file(out_dir / ("condition_" + id + ".json"), condition_summary_json(summary));
    wall += summary.wall_seconds;
  }
  std::cerr << "report: " << (out_dir / "report.csv").string() << " (" << summaries.size()
            << " conditions, " << wall << "s simulation time)\n";
  return 0;
}

struct FitArgs {
  std::string data_path;
  std::string method = "fiml";
  std::string na_token = "NA";
  SeedFlag seed;
  HyperFlags hyper;
};

int cmd_fit(FitArgs& args) {
  const LongitudinalDataset data = read_dataset_csv(args.data_path, args.na_token);
  const GcmSpec spec = spec_for(data);
  const MethodHyper hyper = args.hyper.apply(MethodHyper{});

  std::vector<Method> methods;
  const bool all = args.method == "all";
  if (all) {
    methods = all_methods();
  } else {
    methods.push_back(method_from_string(args.method));
  }

  json records = json::array();
  bool any_failed = false;
  for (Method method : methods) {
    FitResult fit;
    if (is_imputation_method(method)) {
      // Randomized methods resolve the seed lazily so direct estimators never
      // force an entropy draw (knn consumes no randomness but shares the
      // stream plumbing).
      Rng rng(method == Method::kKnn ? 0 : args.seed.resolve());
      const ImputationSet set = impute_with(data, method, hyper, rng);
      std::vector<FitResult> fits;
      fits.reserve(set.completed.size());
      for (const LongitudinalDataset& completed : set.completed)
        fits.push_back(fit_fiml(completed, spec));
      try {
        const PooledFit pooled = pool_rubin(fits);
        fit.method = to_string(method);
        fit.theta = pooled.theta_bar;
        fit.se = pooled.se_pooled;
        fit.converged = true;
      } catch (const NonConvergenceError& e) {
        if (!all) throw;
        fit = FitResult{};
        fit.method = to_string(method);
        std::cerr << "non-convergence (" << fit.method << "): " << e.what() << "\n";
      }
      std::cerr << "provenance: " << provenance_json(set).dump() << "\n";
    } else {
      Rng unused(0);
      fit = apply_method(data, method, hyper, unused, spec);
    }
    any_failed = any_failed || !fit.converged;
    records.push_back(fit_record(fit));
  }

  if (all) {
    std::cout << records.dump(2) << "\n";
  } else {
    std::cout << records.front().dump(2) << "\n";
  }
  return any_failed ? 4 : 0;
}

struct ImputeArgs {
  std::string data_path;
  std::string method;
  std::string na_token = "NA";
  std::string output_dir = ".";
  SeedFlag seed;
  HyperFlags hyper;
};

int cmd_impute(ImputeArgs& args) {
  const Method method = method_from_string(args.method);
  if (!is_imputation_method(method))
    throw ConfigError("method '" + args.method + "' is an estimator, not an imputation method");
  const LongitudinalDataset data = read_dataset_csv(args.data_path, args.na_token);
  const MethodHyper hyper = args.hyper.apply(MethodHyper{});

  Rng rng(method == Method::kKnn ? 0 : args.seed.resolve());
  const ImputationSet set = impute_with(data, method, hyper, rng);

  const fs::path out_dir(args.output_dir);
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < set.completed.size(); ++i) {
    write_dataset_csv((out_dir / ("imputed_" + std::to_string(i + 1) + ".csv")).string(),
                      set.completed[i], args.na_token);
  }
  write_text_file(out_dir / "provenance.json", provenance_json(set).dump(2) + "\n");
  std::cerr << "wrote " << set.completed.size() << " completed dataset(s) to "
            << out_dir.string() << "\n";
  return 0;
}

struct SweepArgs {
  int n = 500;
  std::string mechanism = "none";
  double mr = 0.0;
  std::string dist = "normal";
  std::string method;
  std::vector<int> levels;
  int reps = 100;
  SeedFlag seed;
  std::optional<int> parallelism;
  std::string output_dir = "sweep";
  HyperFlags hyper;
};

int cmd_sweep(SweepArgs& args) {
  Condition condition;
  condition.n = args.n;
  condition.mechanism = mechanism_from_string(args.mechanism);
  condition.mr = args.mr;
  condition.dist = error_distribution_from_string(args.dist);
  condition.reps = args.reps;
  condition.base_seed = args.seed.resolve();

  const Method method = method_from_string(args.method);
  const std::vector<int> levels =
      args.levels.empty() ? default_sweep_levels(method) : args.levels;
  const MethodHyper hyper = args.hyper.apply(MethodHyper{});
  const std::vector<SweepEntry> entries =
      hyperparameter_sweep(condition, method, levels, hyper, args.parallelism.value_or(1));

  const fs::path out_dir(args.output_dir);
  fs::create_directories(out_dir);

  // Plot-ready long format: the standard report columns prefixed by the level.
  std::ostringstream csv;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    std::ostringstream one;
    write_report_csv(one, {entries[i].summary});
    std::istringstream lines(one.str());
    std::string line;
    bool header = true;
    while (std::getline(lines, line)) {
      if (header) {
        if (i == 0) csv << "level," << line << "\n";
        header = false;
      } else {
        csv << entries[i].level << ',' << line << "\n";
      }
    }
    write_text_file(out_dir / ("sweep_level_" + std::to_string(entries[i].level) + ".json"),
                    condition_summary_json(entries[i].summary));
  }
  write_text_file(out_dir / "sweep.csv", csv.str());
  std::cerr << "wrote " << entries.size() << " level(s) to " << out_dir.string() << "\n";
  return 0;
}

struct ReportArgs {
  std::string input_dir;
  std::optional<std::string> output_path;
};

int cmd_report(ReportArgs& args) {
  const fs::path in_dir(args.input_dir);
  if (!fs::is_directory(in_dir))
    throw DataError("'" + in_dir.string() + "' is not a directory");

  std::vector<fs::path> files;
  for (const fs::directory_entry& entry : fs::directory_iterator(in_dir)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && name.rfind("condition_", 0) == 0 &&
        name.size() > 15 && name.substr(name.size() - 5) == ".json")
      files.push_back(entry.path());
  }
  if (files.empty())
    throw DataError("no condition_*.json summaries found in '" + in_dir.string() + "'");

  std::vector<ConditionSummary> summaries;
  summaries.reserve(files.size());
  for (const fs::path& file : files) {
    try {
      summaries.push_back(condition_summary_from_json(slurp(file, /*config_input=*/false)));
    } catch (const DataError& e) {
      throw DataError(file.string() + ": " + e.what());
    }
  }
  std::sort(summaries.begin(), summaries.end(),
            [](const ConditionSummary& a, const ConditionSummary& b) {
              return a.condition_id < b.condition_id;
            });
  for (std::size_t i = 1; i < summaries.size(); ++i) {
    if (summaries[i].condition_id == summaries[i - 1].condition_id)
      throw DataError("duplicate condition_id " + std::to_string(summaries[i].condition_id) +
                      " in '" + in_dir.string() + "'");
  }

  std::ostringstream csv;
  write_report_csv(csv, summaries);
  if (args.output_path) {
    write_text_file(*args.output_path, csv.str());
  } else {
    std::cout << csv.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Monte Carlo toolkit for missing-data methods on linear growth curve models"};
  app.require_subcommand(1);
  int rc = 0;

  SimulateArgs simulate_args;
  CLI::App* simulate = app.add_subcommand("simulate", "run a simulation grid and write reports");
  simulate->add_option("--grid", simulate_args.grid_path, "grid config JSON")->required();
  simulate->add_option("--seed", simulate_args.seed.value,
                       "base seed (overrides the grid file; omitted and absent from the grid: "
                       "entropy, printed)");
  simulate->add_option("--output", simulate_args.output_dir,
                       "output directory (overrides the grid file; default 'out')");
  simulate->add_option("--parallelism", simulate_args.parallelism,
                       "worker threads (overrides the grid file)");
  simulate->add_option("--reps", simulate_args.reps,
                       "replications per condition (overrides the grid file)");
  simulate->callback([&]() { rc = cmd_simulate(simulate_args); });

  FitArgs fit_args;
  CLI::App* fit = app.add_subcommand("fit", "fit an incomplete dataset (CSV) and print JSON");
  fit->add_option("--data", fit_args.data_path, "dataset CSV (header id,y1..yT[,aux])")
      ->required();
  fit->add_option("--method", fit_args.method,
                  "fiml|tsre|knn|missforest|micecart|miceforest|all (default fiml)");
  fit->add_option("--na-token", fit_args.na_token, "missing-cell token (default NA)");
  fit->add_option("--seed", fit_args.seed.value,
                  "seed for randomized imputation methods (omitted: entropy, printed)");
  fit_args.hyper.attach(fit);
  fit->callback([&]() { rc = cmd_fit(fit_args); });

  ImputeArgs impute_args;
  CLI::App* impute =
      app.add_subcommand("impute", "complete a dataset and write imputed CSV files");
  impute->add_option("--data", impute_args.data_path, "dataset CSV (header id,y1..yT[,aux])")
      ->required();
  impute->add_option("--method", impute_args.method, "knn|missforest|micecart|miceforest")
      ->required();
  impute->add_option("--na-token", impute_args.na_token, "missing-cell token (default NA)");
  impute->add_option("--output", impute_args.output_dir, "output directory (default '.')");
  impute->add_option("--seed", impute_args.seed.value,
                     "seed for randomized methods (omitted: entropy, printed)");
  impute_args.hyper.attach(impute);
  impute->callback([&]() { rc = cmd_impute(impute_args); });

  SweepArgs sweep_args;
  CLI::App* sweep =
      app.add_subcommand("sweep", "re-run one condition across hyperparameter levels");
  sweep->add_option("--n", sweep_args.n, "subjects per replication (default 500)");
  sweep->add_option("--mechanism", sweep_args.mechanism, "none|MAR|MNAR (default none)");
  sweep->add_option("--mr", sweep_args.mr, "missing rate (default 0)");
  sweep->add_option("--dist", sweep_args.dist,
                    "normal|lognormal|t5|contaminated (default normal)");
  sweep->add_option("--method", sweep_args.method, "knn|missforest|micecart|miceforest")
      ->required();
  sweep->add_option("--levels", sweep_args.levels,
                    "comma-separated hyperparameter levels (default: the study's levels)")
      ->delimiter(',');
  sweep->add_option("--reps", sweep_args.reps, "replications per level (default 100)");
  sweep->add_option("--seed", sweep_args.seed.value, "base seed (omitted: entropy, printed)");
  sweep->add_option("--parallelism", sweep_args.parallelism, "worker threads (default 1)");
  sweep->add_option("--output", sweep_args.output_dir, "output directory (default 'sweep')");
  sweep_args.hyper.attach(sweep);
  sweep->callback([&]() { rc = cmd_sweep(sweep_args); });

  ReportArgs report_args;
  CLI::App* report =
      app.add_subcommand("report", "rebuild a report CSV from condition summary JSON files");
  report->add_option("--input", report_args.input_dir, "directory of condition_*.json files")
      ->required();
  report->add_option("--output", report_args.output_path,
                     "output CSV path (omitted: standard output)");
  report->callback([&]() { rc = cmd_report(report_args); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NonConvergenceError& e) {
    std::cerr << "non-convergence: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
