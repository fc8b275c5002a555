#include "lgrowth/missing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "lgrowth/errors.hpp"
#include "lgrowth/stats.hpp"

namespace lgrowth {

std::string to_string(Mechanism mechanism) {
  switch (mechanism) {
    case Mechanism::kNone: return "none";
    case Mechanism::kMar: return "MAR";
    case Mechanism::kMnar: return "MNAR";
  }
  throw ConfigError("unknown mechanism");
}

Mechanism mechanism_from_string(const std::string& label) {
  if (label == "none") return Mechanism::kNone;
  if (label == "MAR") return Mechanism::kMar;
  if (label == "MNAR") return Mechanism::kMnar;
  throw ConfigError("unknown mechanism '" + label + "' (expected none, MAR, or MNAR)");
}

void validate_missing_rate(double mr) {
  if (!(mr >= 0.0 && mr < 0.45))
    throw ConfigError("missing rate " + std::to_string(mr) +
                      " out of range: the deepest cutoff level 1 - 2*mr must stay inside (0,1), "
                      "so mr must lie in [0, 0.45)");
}

LongitudinalDataset apply_mar(const LongitudinalDataset& data, double mr) {
  validate_missing_rate(mr);
  data.validate();
  if (!data.fully_observed()) throw DataError("apply_mar: input must be fully observed");
  LongitudinalDataset out = data;
  if (mr == 0.0) return out;

  const Eigen::Index n = data.n();
  const Eigen::Index t_count = data.t();
  std::vector<Eigen::Index> at_risk(n);
  std::iota(at_risk.begin(), at_risk.end(), Eigen::Index{0});

  for (Eigen::Index t = 0; t + 1 < t_count; ++t) {
    // Share of the original cohort that remains observed past occasion t.
    const double level = 1.0 - (2.0 * static_cast<double>(t + 1) / static_cast<double>(t_count - 1)) * mr;
    const auto keep = static_cast<std::size_t>(
        std::llround(level * static_cast<double>(n)));
    if (keep >= at_risk.size()) continue;
    // Rank the still-observed subjects on y_t; ties resolve by row order.
    std::sort(at_risk.begin(), at_risk.end(), [&](Eigen::Index a, Eigen::Index b) {
      if (data.y(a, t) != data.y(b, t)) return data.y(a, t) < data.y(b, t);
      return a < b;
    });
    for (std::size_t r = keep; r < at_risk.size(); ++r)
      for (Eigen::Index s = t + 1; s < t_count; ++s) out.mask(at_risk[r], s) = false;
    at_risk.resize(keep);
  }
  return out;
}

double mnar_loading(double target_corr, double sigma2_s) {
  if (!(target_corr > 0.0 && target_corr < 1.0))
    throw ConfigError("mnar loading: target correlation must lie in (0,1)");
  if (!(sigma2_s > 0.0)) throw ConfigError("mnar loading: slope variance must be positive");
  // corr = r sigma_s / sqrt(r^2 sigma_s^2 + 1)  =>  r = corr / (sigma_s sqrt(1 - corr^2)).
  return target_corr / (std::sqrt(sigma2_s) * std::sqrt(1.0 - target_corr * target_corr));
}

LongitudinalDataset apply_mnar(const LongitudinalDataset& data, double mr, double target_corr,
                               Rng& rng) {
  validate_missing_rate(mr);
  data.validate();
  if (!data.fully_observed()) throw DataError("apply_mnar: input must be fully observed");
  LongitudinalDataset out = data;
  if (mr == 0.0) return out;
  if (!data.truth.has_value())
    throw DataError("apply_mnar: dataset carries no generating random effects");

  const Eigen::Index n = data.n();
  const Eigen::Index t_count = data.t();
  const GcmSpec& spec = data.truth->spec;
  const double sigma2_s = spec.psi(1, 1);
  const double beta_s = spec.beta(1);
  const double r = mnar_loading(target_corr, sigma2_s);

  Eigen::VectorXd aux(n);
  for (Eigen::Index i = 0; i < n; ++i)
    aux(i) = r * data.truth->random_effects(i, 1) + rng.normal();

  const double aux_mean = r * beta_s;
  const double aux_sd = std::sqrt(r * r * sigma2_s + 1.0);
  for (Eigen::Index t = 1; t < t_count; ++t) {
    const double level =
        1.0 - (2.0 * static_cast<double>(t) / static_cast<double>(t_count - 1)) * mr;
    const double threshold = aux_mean + aux_sd * norm_quantile(level);
    for (Eigen::Index i = 0; i < n; ++i)
      if (aux(i) > threshold) out.mask(i, t) = false;
  }
  out.covariates["aux"] = std::move(aux);
  return out;
}

LongitudinalDataset apply_missingness(const LongitudinalDataset& data, Mechanism mechanism,
                                      double mr, double target_corr, Rng& rng) {
  switch (mechanism) {
    case Mechanism::kNone:
      if (mr != 0.0) throw ConfigError("mechanism none requires mr = 0");
      return data;
    case Mechanism::kMar:
      return apply_mar(data, mr);
    case Mechanism::kMnar:
      return apply_mnar(data, mr, target_corr, rng);
  }
  throw ConfigError("unknown mechanism");
}

double realized_missing_rate(const LongitudinalDataset& data) {
  const auto total = static_cast<double>(data.mask.size());
  const auto observed = static_cast<double>(data.mask.count());
  return (total - observed) / total;
}

Eigen::VectorXd occasion_missing_rates(const LongitudinalDataset& data) {
  Eigen::VectorXd rates(data.t());
  for (Eigen::Index t = 0; t < data.t(); ++t) {
    const auto observed = static_cast<double>(data.mask.col(t).count());
    rates(t) = 1.0 - observed / static_cast<double>(data.n());
  }
  return rates;
}

LongitudinalDataset mcar_uniform(const LongitudinalDataset& data, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("mcar rate must lie in [0,1)");
  LongitudinalDataset out = data;
  for (Eigen::Index i = 0; i < out.n(); ++i) {
    for (Eigen::Index t = 0; t < out.t(); ++t)
      if (rng.uniform01() < rate) out.mask(i, t) = false;
    if (!out.mask.row(i).any()) out.mask(i, 0) = true;
  }
  return out;
}

}  // namespace lgrowth
