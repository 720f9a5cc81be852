#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "paleorec/timeseries.hpp"

// Supervised dimension reduction: each proxy nest's "large p, small n"
// calibration panel is condensed into a single predictor series by one of
// five methods (lasso, sparse PLS, sliced inverse regression, principal
// component regression, supervised PCR).
namespace paleorec::reduce {

enum class Method { kLasso, kSpls, kSir, kPcr, kSpcr };

inline constexpr std::array<Method, 5> kAllMethods = {Method::kLasso, Method::kSpls, Method::kSir,
                                                      Method::kPcr, Method::kSpcr};

std::string method_name(Method m);
Method parse_method(const std::string& name);

// A fitted reduction. Prediction is intercept + (X * weights) * coefficients
// where X holds proxy columns standardized with column_means/column_sds.
// The hyperparameter fields are filled per method; unused ones stay at their
// defaults.
struct ReductionModel {
    Method method = Method::kLasso;
    Eigen::MatrixXd weights;       // p x K map from standardized proxies to scores
    Eigen::VectorXd coefficients;  // K regression coefficients on the scores
    double intercept = 0.0;
    std::vector<double> column_means;
    std::vector<double> column_sds;

    double lambda = 0.0;            // lasso penalty
    double eta = 0.0;               // sparse-PLS threshold fraction
    int components = 0;             // PLS components / SIR directions / PC count
    int slices = 0;                 // SIR
    double screen_threshold = 0.0;  // supervised PCR correlation cutoff
    std::vector<Eigen::Index> surviving_columns;  // supervised PCR screen
    bool threshold_reached = true;  // PCR adjusted-R^2 target attained
    int effective_predictors = 0;   // for adjusted R^2 of the calibration fit

    Eigen::VectorXd predict(const Eigen::MatrixXd& standardized) const;
};

struct CalibrationFit {
    double r2 = 0.0;
    double adjusted_r2 = 0.0;
};

struct ReducedProxy {
    int nest_index = 0;
    Method method = Method::kLasso;
    TimeSeries series;  // standardized over the calibration window, gap-free
    CalibrationFit calibration_fit;
    ReductionModel model;
};

// Coordinate descent for (1/(2n))||y_c - X b||^2 + lambda ||b||_1 with y
// centered internally (the intercept is not penalized). Iterates until the
// largest coefficient change falls below 1e-10.
Eigen::VectorXd lasso_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda);

// Penalty at and above which the lasso solution is exactly zero.
double lasso_lambda_max(const Eigen::MatrixXd& X, const Eigen::VectorXd& y);

// 100 log-spaced penalties from lambda_max down to 1e-4 * lambda_max,
// largest first.
std::vector<double> lasso_lambda_grid(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                      int points = 100);

// K-fold cross validation over an ordered candidate list. fit_predict gets
// the training rows and the held-out rows and returns one prediction column
// per candidate. Candidates must be ordered simplest first: the earliest
// index among ties on mean held-out squared error wins.
struct CvResult {
    std::size_t best_index = 0;
    std::vector<double> mean_squared_error;  // per candidate
};

CvResult cv_select(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, std::size_t candidates,
                   const std::function<Eigen::MatrixXd(const Eigen::MatrixXd&, const Eigen::VectorXd&,
                                                       const Eigen::MatrixXd&)>& fit_predict,
                   int folds, std::uint64_t seed);

// Sparse partial least squares: each direction soft-thresholds the current
// covariance X^T y at eta * max|X^T y|, is normalized, and the matrix is
// deflated by the projection onto the extracted score.
ReductionModel spls_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double eta,
                        int n_components);

// Sliced inverse regression with a ridge-regularized covariance. ridge < 0
// requests the default 0.01 * trace(cov) / p. Directions are unit-norm,
// ordered by decreasing eigenvalue; retained = count of eigenvalues at or
// above 10% of the largest.
struct SirResult {
    Eigen::MatrixXd directions;   // p x retained
    Eigen::VectorXd eigenvalues;  // all, decreasing
    int retained = 0;
    int slices = 0;
};

SirResult sir_directions(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int n_slices = 10,
                         double ridge = -1.0);

// Smallest PC count whose regression on y reaches adjusted R^2 >= r2_min;
// falls back to the adjusted-R^2 maximizer (threshold_reached = false) when
// no count reaches it.
struct PcrSelection {
    int k = 0;
    double adjusted_r2 = 0.0;
    bool threshold_reached = true;
};

PcrSelection pcr_select(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double r2_min = 0.70);

// Correlation screen at a cross-validated threshold followed by PCR on the
// surviving columns.
ReductionModel spcr_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                        const std::vector<double>& threshold_grid, std::uint64_t seed);

// Method dispatcher used by the pipeline; applies each method's default
// hyperparameter search.
ReductionModel fit_reduction(Method method, const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                             std::uint64_t seed);

// Fits a nest's calibration matrix against the target temperature over the
// calibration window and stamps the nest's column statistics into the model,
// making it self-contained for later application.
ReductionModel fit_nest_reduction(const ProxyNest& nest, const TimeSeries& target,
                                  const YearInterval& calibration, Method method,
                                  std::uint64_t seed);

// Applies a fitted model to the nest's full observation window: members are
// infilled, standardized with the model's recorded column statistics, mapped
// through the fitted combination, and the result is standardized over the
// calibration window. Errors if any observation year has every member
// missing.
ReducedProxy build_reduced_proxy(const ProxyNest& nest, const ReductionModel& model,
                                 const TimeSeries& target, const YearInterval& calibration);

}  // namespace paleorec::reduce
