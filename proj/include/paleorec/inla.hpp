#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "paleorec/model.hpp"
#include "paleorec/scoring.hpp"

// Deterministic nested-Laplace inference for the latent-Gaussian
// reconstruction model: the exact Gaussian conditional of the parameters at
// fixed hyperparameters, numerical optimisation plus a small design of
// integration points over the hyperparameters, and Gaussian mixture
// posterior marginals assembled from the two.
namespace paleorec::inla {

// Conditional posterior of theta at fixed psi. Every observation mean is
// linear in theta given psi, so the conditional is exact and the Newton
// solve converges in one step; the iteration count is reported for the day a
// non-quadratic likelihood joins.
struct GaussianConditional {
    Eigen::VectorXd mode;
    Eigen::VectorXd marginal_sd;
    double log_det_precision = 0.0;
    int newton_iterations = 0;
};

// One integration point of the hyperparameter design: location in psi and in
// standardised z coordinates, the log posterior density, the normalised
// integration weight, and the Gaussian conditional evaluated there.
struct HyperPoint {
    Eigen::VectorXd psi;
    Eigen::VectorXd z;
    double log_posterior = 0.0;
    double weight = 0.0;
    Eigen::VectorXd mode;
    Eigen::VectorXd marginal_sd;
};

struct ExploreConfig {
    // Finite-difference step (relative, with an absolute floor) and BFGS
    // stopping rule for the mode search; the search stops once the gradient
    // norm falls below gradient_tol * max(1, |log posterior|).
    double fd_relative_step = 1e-4;
    double gradient_tol = 1e-6;
    int max_iterations = 200;
    // Dense grid settings used when psi has one or two dimensions.
    double grid_step = 1.0;
    double grid_extent = 2.5;
    // Radius multiplier for the composite design used in higher dimensions;
    // must exceed 1 so the centre point keeps positive weight.
    double ccd_radius_scale = 1.1;
    int threads = 1;
    // Optional warm start for the mode search; empty means zeros.
    Eigen::VectorXd initial_psi;
};

// Mode, marginal standard deviations and log-determinant of the conditional
// precision at one psi.
GaussianConditional gaussian_conditional(const model::LatentGaussianModel& lgm,
                                         const Eigen::VectorXd& psi);

// Dense conditional covariance of theta at one psi; intended for small
// models and diagnostics.
Eigen::MatrixXd conditional_covariance_dense(const model::LatentGaussianModel& lgm,
                                             const Eigen::VectorXd& psi);

// Unnormalised log posterior of psi with theta integrated out; the Laplace
// step is exact because the conditional is Gaussian.
double log_hyper_posterior(const model::LatentGaussianModel& lgm, const Eigen::VectorXd& psi);

// Finds the posterior mode of psi, curvature-standardises the axes, and
// returns the integration design with normalised weights: a dense grid for
// one or two hyperparameters, a composite (centre + axial + scaled corner)
// design above that. Throws if the mode search does not converge.
std::vector<HyperPoint> explore_hyper(const model::LatentGaussianModel& lgm,
                                      const ExploreConfig& config = {});

// A weighted Gaussian mixture: the posterior marginal of one scalar
// parameter after mixing the conditionals over the hyper design.
class PosteriorMarginal {
public:
    PosteriorMarginal(Eigen::VectorXd means, Eigen::VectorXd sds, Eigen::VectorXd weights);

    double pdf(double x) const;
    double cdf(double x) const;
    // Inverse cdf by bisection; |cdf(quantile(p)) - p| <= 1e-8.
    double quantile(double p) const;
    double mean() const;
    double variance() const;
    double sd() const;
    double sample(std::mt19937_64& gen) const;

    int components() const { return static_cast<int>(means_.size()); }

private:
    Eigen::VectorXd means_;
    Eigen::VectorXd sds_;
    Eigen::VectorXd weights_;
    double mean_ = 0.0;
    double variance_ = 0.0;
};

PosteriorMarginal marginal(const std::vector<HyperPoint>& points, int parameter);
PosteriorMarginal marginal(const model::LatentGaussianModel& lgm,
                           const std::vector<HyperPoint>& points, const std::string& parameter);

// Joint posterior draws of the selected parameters. Each draw first picks a
// hyper point by weight, then samples the Gaussian conditional there; draw i
// uses its own RNG substream of `seed`, so the result is independent of how
// draws are batched.
Eigen::MatrixXd sample_posterior(const model::LatentGaussianModel& lgm,
                                 const std::vector<HyperPoint>& points,
                                 const std::vector<int>& parameters, int n_draws,
                                 std::uint64_t seed);

// Posterior summary of the latent temperature block: mixture mean, sd and
// the 2.5/10/90/97.5 percent quantiles for every year.
scoring::Reconstruction reconstruct(const model::LatentGaussianModel& lgm,
                                    const std::vector<HyperPoint>& points, int threads = 1);

// A tabulated univariate density on an evenly spaced grid.
struct DensityCurve {
    std::vector<double> value;
    std::vector<double> density;
};

// Smooth marginal density of one hyperparameter (on the log-precision
// scale), produced by spline interpolation of the explored log posterior.
// Only available for designs over one or two hyperparameters; composite
// designs carry their integration weights instead.
DensityCurve hyper_marginal(const std::vector<HyperPoint>& points, int hyper, int resolution = 201);

}  // namespace paleorec::inla
