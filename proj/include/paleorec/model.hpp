#pragma once

#include <Eigen/Dense>

#include <string>
#include <utility>
#include <vector>

#include "paleorec/reduce.hpp"
#include "paleorec/splines.hpp"
#include "paleorec/timeseries.hpp"

// The hierarchical reconstruction model flattened into latent-Gaussian form:
// a latent annual temperature block, fixed effects (per-nest proxy
// intercepts, forcing coefficients, spline coefficients), Gaussian
// observation rows, and a hyperparameter vector holding the log noise
// precisions together with the per-nest proxy slopes. Keeping the slopes out
// of the Gaussian layer keeps every conditional (theta | psi, y) exactly
// Gaussian; a slope times the latent temperature inside theta would make the
// observation mean bilinear, and its conditional mode then sits on a
// spurious low-volume peak that misrepresents where the posterior mass is.
namespace paleorec::model {

enum class ModelKind { kNoForcing, kWithForcing, kMixed };

// Observation precision used to pin the latent temperature to the
// instrumental record over the calibration window.
inline constexpr double kDefaultCalibrationPrecision = 1e4;

std::string kind_name(ModelKind kind);
ModelKind parse_kind(const std::string& name);

// What one entry of psi means: the negative log of a noise variance, or a
// proxy slope scaling the latent temperature inside an observation mean.
enum class HyperKind { kLogPrecision, kSlope };

// One Gaussian observation: value = linear terms [+ slope * theta] + noise.
// The noise precision is exp(psi[precision_hyper]), or fixed_precision when
// precision_hyper < 0. The optional slope term psi[slope_hyper] *
// theta[slope_target] carries a proxy slope times latent temperature; given
// psi the mean stays linear in theta.
struct ObservationRow {
    double value = 0.0;
    int precision_hyper = -1;
    double fixed_precision = 0.0;
    std::vector<std::pair<int, double>> terms;
    int slope_hyper = -1;
    int slope_target = -1;

    bool has_slope() const { return slope_hyper >= 0; }
    double mean(const Eigen::VectorXd& theta, const Eigen::VectorXd& psi) const {
        double m = 0.0;
        for (const auto& [index, coeff] : terms) m += coeff * theta[index];
        if (has_slope()) m += psi[slope_hyper] * theta[slope_target];
        return m;
    }
};

class LatentGaussianModel {
public:
    // General form: the first latent_count parameters are the latent block,
    // the rest are fixed effects; prior_precisions holds one Gaussian prior
    // precision per parameter, 0 meaning flat. An empty hyper_kinds vector
    // means every hyperparameter is a log precision. assemble() builds the
    // reconstruction model; tests build small instances directly.
    LatentGaussianModel(int latent_count, int latent_start_year,
                        std::vector<std::string> parameter_names,
                        std::vector<double> prior_precisions, std::vector<std::string> hyper_names,
                        std::vector<HyperKind> hyper_kinds, std::vector<ObservationRow> rows);

    LatentGaussianModel(int latent_count, int latent_start_year,
                        std::vector<std::string> parameter_names,
                        std::vector<double> prior_precisions, std::vector<std::string> hyper_names,
                        std::vector<ObservationRow> rows)
        : LatentGaussianModel(latent_count, latent_start_year, std::move(parameter_names),
                              std::move(prior_precisions), std::move(hyper_names), {},
                              std::move(rows)) {}

    int latent_start_year() const { return latent_start_year_; }
    int latent_count() const { return latent_count_; }
    YearInterval latent_span() const {
        return {latent_start_year_, latent_start_year_ + latent_count_ - 1};
    }
    int fixed_count() const { return static_cast<int>(parameter_names_.size()) - latent_count_; }
    int parameter_count() const { return static_cast<int>(parameter_names_.size()); }
    int hyper_count() const { return static_cast<int>(hyper_names_.size()); }

    const std::vector<ObservationRow>& rows() const { return rows_; }
    const std::vector<std::string>& parameter_names() const { return parameter_names_; }
    const std::vector<std::string>& hyper_names() const { return hyper_names_; }
    const std::vector<HyperKind>& hyper_kinds() const { return hyper_kinds_; }
    HyperKind hyper_kind(int hyper) const { return hyper_kinds_[hyper]; }
    ModelKind kind() const { return kind_; }

    int parameter_index(const std::string& name) const;  // throws on unknown names
    int hyper_index(const std::string& name) const;      // throws on unknown names
    int latent_index(int year) const;                    // throws outside the latent span

    // Gaussian prior precision of one parameter; 0 means flat. assemble()
    // leaves the latent block flat (it is constrained through the process
    // rows) and puts 1/3 on every fixed effect.
    double prior_precision(int parameter) const { return prior_precisions_[parameter]; }

    double log_hyper_prior(const Eigen::VectorXd& psi) const;
    // Exact log of hyper prior + parameter prior + observation likelihood.
    double log_joint(const Eigen::VectorXd& theta, const Eigen::VectorXd& psi) const;

    std::string summary_json() const;

    static constexpr double kFixedEffectVariance = 3.0;
    static constexpr double kFixedEffectPrecision = 1.0 / kFixedEffectVariance;
    // Proxy slopes share the fixed-effect prior even though they live in psi.
    static constexpr double kSlopeVariance = kFixedEffectVariance;

private:
    LatentGaussianModel() = default;

    friend LatentGaussianModel assemble(ModelKind, const std::vector<reduce::ReducedProxy>&,
                                        const ForcingSet*, const splines::SplineBasis*,
                                        const TimeSeries&, const YearInterval&, double);

    ModelKind kind_ = ModelKind::kWithForcing;
    int latent_start_year_ = 1;
    int latent_count_ = 0;
    std::vector<ObservationRow> rows_;
    std::vector<std::string> parameter_names_;
    std::vector<double> prior_precisions_;
    std::vector<std::string> hyper_names_;
    std::vector<HyperKind> hyper_kinds_;
    int calibration_rows_ = 0;
    int process_rows_ = 0;
    int proxy_rows_ = 0;
};

// Builds the model from fitted reduced proxies, transformed forcings (WF and
// Mixed), a spline basis over the latent span (NF and Mixed), and the
// instrumental record clamped over the calibration window with the given
// fixed precision. The proxy list may arrive in any order; assembly sorts by
// nest index. The hyper vector is laid out as [rho_process, rho_nest...,
// alpha1_nest...] with nests ascending.
LatentGaussianModel assemble(ModelKind kind, const std::vector<reduce::ReducedProxy>& rps,
                             const ForcingSet* forcings, const splines::SplineBasis* basis,
                             const TimeSeries& calibration, const YearInterval& calibration_window,
                             double calibration_precision = kDefaultCalibrationPrecision);

}  // namespace paleorec::model
