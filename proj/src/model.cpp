#include "paleorec/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace paleorec::model {

namespace {

// Gamma(1, 1e-20) on each precision exp(rho), i.e. a nearly flat log-gamma
// prior on rho itself.
constexpr double kHyperShape = 1.0;
constexpr double kHyperRate = 1e-20;

constexpr double kLogTwoPi = 1.8378770664093454836;

std::string join_years(const std::vector<int>& years, std::size_t limit = 8) {
    std::ostringstream out;
    for (std::size_t i = 0; i < years.size() && i < limit; ++i) {
        if (i > 0) out << ", ";
        out << years[i];
    }
    if (years.size() > limit) out << ", ... (" << years.size() << " total)";
    return out.str();
}

}  // namespace

std::string kind_name(ModelKind kind) {
    switch (kind) {
        case ModelKind::kNoForcing: return "nf";
        case ModelKind::kWithForcing: return "wf";
        case ModelKind::kMixed: return "mixed";
    }
    throw std::invalid_argument("kind_name: unknown model kind");
}

ModelKind parse_kind(const std::string& name) {
    if (name == "nf") return ModelKind::kNoForcing;
    if (name == "wf") return ModelKind::kWithForcing;
    if (name == "mixed") return ModelKind::kMixed;
    throw std::invalid_argument("unknown model kind '" + name + "' (expected nf, wf or mixed)");
}

LatentGaussianModel::LatentGaussianModel(int latent_count, int latent_start_year,
                                         std::vector<std::string> parameter_names,
                                         std::vector<double> prior_precisions,
                                         std::vector<std::string> hyper_names,
                                         std::vector<HyperKind> hyper_kinds,
                                         std::vector<ObservationRow> rows)
    : latent_start_year_(latent_start_year),
      latent_count_(latent_count),
      rows_(std::move(rows)),
      parameter_names_(std::move(parameter_names)),
      prior_precisions_(std::move(prior_precisions)),
      hyper_names_(std::move(hyper_names)),
      hyper_kinds_(std::move(hyper_kinds)) {
    if (latent_count_ < 0 || latent_count_ > static_cast<int>(parameter_names_.size())) {
        throw std::invalid_argument("latent block size exceeds the parameter count");
    }
    if (prior_precisions_.size() != parameter_names_.size()) {
        throw std::invalid_argument("need one prior precision per parameter");
    }
    if (hyper_kinds_.empty()) {
        hyper_kinds_.assign(hyper_names_.size(), HyperKind::kLogPrecision);
    }
    if (hyper_kinds_.size() != hyper_names_.size()) {
        throw std::invalid_argument("need one kind per hyperparameter");
    }
    for (double prec : prior_precisions_) {
        if (!(prec >= 0.0) || !std::isfinite(prec)) {
            throw std::invalid_argument("prior precisions must be finite and non-negative");
        }
    }
    const int m = parameter_count();
    const int h = hyper_count();
    for (const ObservationRow& row : rows_) {
        if (!std::isfinite(row.value)) {
            throw std::invalid_argument("observation rows must have finite values");
        }
        if (row.precision_hyper >= h || (row.precision_hyper < 0 && !(row.fixed_precision > 0.0))) {
            throw std::invalid_argument("every observation row needs a valid precision source");
        }
        if (row.precision_hyper >= 0 &&
            hyper_kinds_[row.precision_hyper] != HyperKind::kLogPrecision) {
            throw std::invalid_argument("an observation row's precision must be a log precision");
        }
        for (const auto& [index, coeff] : row.terms) {
            if (index < 0 || index >= m || !std::isfinite(coeff)) {
                throw std::invalid_argument("observation row references an invalid parameter");
            }
        }
        if (row.has_slope()) {
            if (row.slope_hyper >= h || hyper_kinds_[row.slope_hyper] != HyperKind::kSlope) {
                throw std::invalid_argument("an observation row's slope must be a slope hyper");
            }
            if (row.slope_target < 0 || row.slope_target >= m) {
                throw std::invalid_argument("observation row scales an invalid parameter");
            }
            ++proxy_rows_;
        } else if (row.precision_hyper < 0) {
            ++calibration_rows_;
        } else {
            ++process_rows_;
        }
    }
}

int LatentGaussianModel::parameter_index(const std::string& name) const {
    const auto it = std::find(parameter_names_.begin(), parameter_names_.end(), name);
    if (it == parameter_names_.end()) {
        throw std::invalid_argument("unknown parameter '" + name + "'");
    }
    return static_cast<int>(it - parameter_names_.begin());
}

int LatentGaussianModel::hyper_index(const std::string& name) const {
    const auto it = std::find(hyper_names_.begin(), hyper_names_.end(), name);
    if (it == hyper_names_.end()) {
        throw std::invalid_argument("unknown hyperparameter '" + name + "'");
    }
    return static_cast<int>(it - hyper_names_.begin());
}

int LatentGaussianModel::latent_index(int year) const {
    if (year < latent_start_year_ || year >= latent_start_year_ + latent_count_) {
        throw std::out_of_range("year " + std::to_string(year) + " lies outside the latent span");
    }
    return year - latent_start_year_;
}

double LatentGaussianModel::log_hyper_prior(const Eigen::VectorXd& psi) const {
    if (psi.size() != hyper_count()) {
        throw std::invalid_argument("log_hyper_prior: hyperparameter dimension mismatch");
    }
    double lp = 0.0;
    for (Eigen::Index k = 0; k < psi.size(); ++k) {
        if (hyper_kinds_[static_cast<std::size_t>(k)] == HyperKind::kLogPrecision) {
            lp += kHyperShape * std::log(kHyperRate) - std::lgamma(kHyperShape) +
                  kHyperShape * psi[k] - kHyperRate * std::exp(psi[k]);
        } else {
            lp += -0.5 * (std::log(kSlopeVariance) + kLogTwoPi) -
                  0.5 * psi[k] * psi[k] / kSlopeVariance;
        }
    }
    return lp;
}

double LatentGaussianModel::log_joint(const Eigen::VectorXd& theta,
                                      const Eigen::VectorXd& psi) const {
    if (theta.size() != parameter_count()) {
        throw std::invalid_argument("log_joint: parameter dimension mismatch");
    }
    if (psi.size() != hyper_count()) {
        throw std::invalid_argument("log_joint: hyperparameter dimension mismatch");
    }

    double lp = log_hyper_prior(psi);
    for (int j = 0; j < parameter_count(); ++j) {
        const double prec = prior_precisions_[j];
        if (prec <= 0.0) continue;
        lp += 0.5 * (std::log(prec) - kLogTwoPi) - 0.5 * prec * theta[j] * theta[j];
    }
    for (const ObservationRow& row : rows_) {
        const double log_tau =
            row.precision_hyper >= 0 ? psi[row.precision_hyper] : std::log(row.fixed_precision);
        const double tau = std::exp(log_tau);
        const double resid = row.value - row.mean(theta, psi);
        lp += 0.5 * (log_tau - kLogTwoPi) - 0.5 * tau * resid * resid;
    }
    return lp;
}

std::string LatentGaussianModel::summary_json() const {
    nlohmann::ordered_json j;
    j["kind"] = kind_name(kind_);
    j["latent"] = {{"start_year", latent_start_year_},
                   {"end_year", latent_start_year_ + latent_count_ - 1},
                   {"count", latent_count_}};
    bool uniform_prior = true;
    for (int p = latent_count_; p < parameter_count(); ++p) {
        uniform_prior = uniform_prior && prior_precisions_[p] == kFixedEffectPrecision;
    }
    j["fixed_effects"] = {{"count", fixed_count()},
                          {"prior", uniform_prior ? "normal(0, variance 3)"
                                                  : "normal(0, per-parameter variance)"},
                          {"names", std::vector<std::string>(parameter_names_.begin() + latent_count_,
                                                             parameter_names_.end())}};
    std::vector<std::string> precisions, slopes;
    for (std::size_t k = 0; k < hyper_names_.size(); ++k) {
        (hyper_kinds_[k] == HyperKind::kLogPrecision ? precisions : slopes)
            .push_back(hyper_names_[k]);
    }
    j["hyperparameters"] = {
        {"count", hyper_count()},
        {"log_precisions",
         {{"names", precisions}, {"prior", "log-gamma(1, 1e-20) on rho = -log(sigma^2)"}}},
        {"slopes", {{"names", slopes}, {"prior", "normal(0, variance 3)"}}}};
    j["rows"] = {{"proxy", proxy_rows_},
                 {"process", process_rows_},
                 {"calibration", calibration_rows_},
                 {"total", rows_.size()}};
    return j.dump(2);
}

LatentGaussianModel assemble(ModelKind kind, const std::vector<reduce::ReducedProxy>& rps,
                             const ForcingSet* forcings, const splines::SplineBasis* basis,
                             const TimeSeries& calibration, const YearInterval& calibration_window,
                             double calibration_precision) {
    if (rps.empty()) throw std::invalid_argument("assemble: need at least one reduced proxy");
    const bool wants_forcings = kind != ModelKind::kNoForcing;
    const bool wants_splines = kind != ModelKind::kWithForcing;
    if (wants_forcings && forcings == nullptr) {
        throw std::invalid_argument("assemble: model kind '" + kind_name(kind) +
                                    "' requires a forcing set");
    }
    if (wants_splines && basis == nullptr) {
        throw std::invalid_argument("assemble: model kind '" + kind_name(kind) +
                                    "' requires a spline basis");
    }
    if (calibration_precision <= 0.0) {
        throw std::invalid_argument("assemble: calibration precision must be positive");
    }

    std::vector<const reduce::ReducedProxy*> sorted;
    sorted.reserve(rps.size());
    for (const auto& rp : rps) sorted.push_back(&rp);
    std::sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) {
        return a->nest_index < b->nest_index;
    });
    for (std::size_t i = 1; i < sorted.size(); ++i) {
        if (sorted[i]->nest_index == sorted[i - 1]->nest_index) {
            throw std::invalid_argument("assemble: duplicate reduced proxy for nest " +
                                        std::to_string(sorted[i]->nest_index));
        }
    }

    int span_first = calibration_window.first;
    int span_last = calibration_window.last;
    for (const auto* rp : sorted) {
        span_first = std::min(span_first, rp->series.start_year());
        span_last = std::max(span_last, rp->series.end_year());
    }

    LatentGaussianModel lgm;
    lgm.kind_ = kind;
    lgm.latent_start_year_ = span_first;
    lgm.latent_count_ = span_last - span_first + 1;

    for (int year = span_first; year <= span_last; ++year) {
        lgm.parameter_names_.push_back("T_" + std::to_string(year));
        lgm.prior_precisions_.push_back(0.0);
    }
    const int alpha0_base = static_cast<int>(lgm.parameter_names_.size());
    for (const auto* rp : sorted) {
        lgm.parameter_names_.push_back("alpha0_nest" + std::to_string(rp->nest_index));
    }
    const int beta0_index = static_cast<int>(lgm.parameter_names_.size());
    lgm.parameter_names_.push_back("beta0");
    int forcing_base = -1;
    if (wants_forcings) {
        forcing_base = static_cast<int>(lgm.parameter_names_.size());
        lgm.parameter_names_.push_back("beta1_solar");
        lgm.parameter_names_.push_back("beta2_volcanic");
        lgm.parameter_names_.push_back("beta3_co2");
    }
    int spline_base = -1;
    if (wants_splines) {
        if (basis->matrix.rows() != lgm.latent_count_) {
            throw std::invalid_argument(
                "assemble: spline basis grid has " + std::to_string(basis->matrix.rows()) +
                " rows but the latent span has " + std::to_string(lgm.latent_count_) + " years");
        }
        spline_base = static_cast<int>(lgm.parameter_names_.size());
        for (int k = 1; k <= basis->basis_count; ++k) {
            lgm.parameter_names_.push_back("gamma_" + std::to_string(k));
        }
    }

    lgm.prior_precisions_.resize(lgm.parameter_names_.size(),
                                 LatentGaussianModel::kFixedEffectPrecision);

    lgm.hyper_names_.push_back("rho_process");
    lgm.hyper_kinds_.push_back(HyperKind::kLogPrecision);
    for (const auto* rp : sorted) {
        lgm.hyper_names_.push_back("rho_nest" + std::to_string(rp->nest_index));
        lgm.hyper_kinds_.push_back(HyperKind::kLogPrecision);
    }
    const int slope_base = static_cast<int>(lgm.hyper_names_.size());
    for (const auto* rp : sorted) {
        lgm.hyper_names_.push_back("alpha1_nest" + std::to_string(rp->nest_index));
        lgm.hyper_kinds_.push_back(HyperKind::kSlope);
    }

    if (wants_forcings) {
        std::vector<int> missing;
        for (int year = span_first; year <= span_last; ++year) {
            if (!forcings->solar.has_value(year) || !forcings->volcanic_transformed.has_value(year) ||
                !forcings->co2_transformed.has_value(year)) {
                missing.push_back(year);
            }
        }
        if (!missing.empty()) {
            throw std::invalid_argument("assemble: forcings do not cover the latent span; missing " +
                                        join_years(missing));
        }
    }

    // Proxy rows: RP_t = alpha0 + alpha1 * T_t + noise, one noise precision
    // and one slope per nest.
    for (std::size_t order = 0; order < sorted.size(); ++order) {
        const auto* rp = sorted[order];
        const int alpha0 = alpha0_base + static_cast<int>(order);
        std::vector<int> gaps;
        for (int year = rp->series.start_year(); year <= rp->series.end_year(); ++year) {
            if (!rp->series.has_value(year)) {
                gaps.push_back(year);
                continue;
            }
            ObservationRow row;
            row.value = rp->series.at_year(year);
            row.precision_hyper = 1 + static_cast<int>(order);
            row.terms = {{alpha0, 1.0}};
            row.slope_hyper = slope_base + static_cast<int>(order);
            row.slope_target = lgm.latent_index(year);
            lgm.rows_.push_back(std::move(row));
            ++lgm.proxy_rows_;
        }
        if (!gaps.empty()) {
            throw std::invalid_argument("assemble: reduced proxy for nest " +
                                        std::to_string(rp->nest_index) + " has gaps at " +
                                        join_years(gaps));
        }
    }

    // Process rows: T_t minus its process-level mean is N(0, sigma_eta^2).
    for (int year = span_first; year <= span_last; ++year) {
        ObservationRow row;
        row.value = 0.0;
        row.precision_hyper = 0;
        row.terms.reserve(wants_splines ? 9 : 5);
        row.terms.emplace_back(lgm.latent_index(year), 1.0);
        row.terms.emplace_back(beta0_index, -1.0);
        if (wants_forcings) {
            row.terms.emplace_back(forcing_base, -forcings->solar.at_year(year));
            row.terms.emplace_back(forcing_base + 1, -forcings->volcanic_transformed.at_year(year));
            row.terms.emplace_back(forcing_base + 2, -forcings->co2_transformed.at_year(year));
        }
        if (wants_splines) {
            const Eigen::Index t = year - span_first;
            for (int k = 0; k < basis->basis_count; ++k) {
                const double b = basis->matrix(t, k);
                if (b != 0.0) row.terms.emplace_back(spline_base + k, -b);
            }
        }
        lgm.rows_.push_back(std::move(row));
        ++lgm.process_rows_;
    }

    // Calibration rows clamp T to the instrumental anomalies.
    for (int year = calibration_window.first; year <= calibration_window.last; ++year) {
        if (!calibration.has_value(year)) continue;
        ObservationRow row;
        row.value = calibration.at_year(year);
        row.fixed_precision = calibration_precision;
        row.terms = {{lgm.latent_index(year), 1.0}};
        lgm.rows_.push_back(std::move(row));
        ++lgm.calibration_rows_;
    }
    if (lgm.calibration_rows_ == 0) {
        throw std::invalid_argument(
            "assemble: the instrumental record has no values inside the calibration window");
    }

    return lgm;
}

}  // namespace paleorec::model
