#include "paleorec/gibbs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

#include "paleorec/model.hpp"

namespace paleorec::gibbs {

namespace {

constexpr double kCoefficientPrecision = model::LatentGaussianModel::kFixedEffectPrecision;
constexpr double kPrecisionShape = 1.0;
constexpr double kPrecisionRate = 1e-20;

// Draws from N(mean, precision^-1) for a small dense precision matrix.
template <int N>
Eigen::Matrix<double, N, 1> draw_gaussian(const Eigen::Matrix<double, N, N>& precision,
                                          const Eigen::Matrix<double, N, 1>& shift,
                                          std::mt19937_64& gen) {
    const Eigen::LLT<Eigen::Matrix<double, N, N>> llt(precision);
    if (llt.info() != Eigen::Success) {
        throw std::runtime_error("a coefficient full conditional lost positive definiteness");
    }
    const Eigen::Matrix<double, N, 1> mean = llt.solve(shift);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::Matrix<double, N, 1> z;
    for (int i = 0; i < N; ++i) z[i] = normal(gen);
    return mean + llt.matrixU().solve(z);
}

double draw_variance(double ssr, double n, std::mt19937_64& gen) {
    std::gamma_distribution<double> gamma(kPrecisionShape + 0.5 * n,
                                          1.0 / (kPrecisionRate + 0.5 * ssr));
    const double tau = gamma(gen);
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw std::runtime_error("a variance full conditional degenerated");
    }
    return 1.0 / tau;
}

double quantile_sorted(const std::vector<double>& sorted, double p) {
    const double pos = p * (static_cast<double>(sorted.size()) - 1.0);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

}  // namespace

Chain gibbs_wf(const reduce::ReducedProxy& rp, const ForcingSet& forcings,
               const TimeSeries& calibration, int iterations, int burn_in, std::uint64_t seed) {
    if (iterations <= 0) {
        throw std::invalid_argument("gibbs_wf: the iteration count must be positive");
    }
    if (burn_in < 0 || burn_in >= iterations) {
        throw std::invalid_argument(
            "gibbs_wf: burn-in must be non-negative and smaller than the iteration count");
    }
    if (calibration.count_valid() == 0) {
        throw std::invalid_argument("gibbs_wf: the instrumental record has no values");
    }

    const int t0 = std::min(rp.series.start_year(), calibration.first_valid_year());
    const int t1 = std::max(rp.series.end_year(), calibration.last_valid_year());
    const int n_years = t1 - t0 + 1;

    Eigen::MatrixXd f(n_years, 4);
    {
        std::vector<int> missing;
        for (int year = t0; year <= t1; ++year) {
            if (!forcings.solar.has_value(year) || !forcings.volcanic_transformed.has_value(year) ||
                !forcings.co2_transformed.has_value(year)) {
                missing.push_back(year);
                continue;
            }
            const int t = year - t0;
            f(t, 0) = 1.0;
            f(t, 1) = forcings.solar.at_year(year);
            f(t, 2) = forcings.volcanic_transformed.at_year(year);
            f(t, 3) = forcings.co2_transformed.at_year(year);
        }
        if (!missing.empty()) {
            std::ostringstream msg;
            msg << "gibbs_wf: forcings do not cover the temperature span; missing " << missing[0];
            if (missing.size() > 1) msg << " and " << missing.size() - 1 << " more";
            throw std::invalid_argument(msg.str());
        }
    }

    std::vector<bool> observed(n_years, false), clamped(n_years, false);
    Eigen::VectorXd rp_value = Eigen::VectorXd::Zero(n_years);
    Eigen::VectorXd cal_value = Eigen::VectorXd::Zero(n_years);
    int n_obs = 0;
    for (int year = t0; year <= t1; ++year) {
        const int t = year - t0;
        if (rp.series.covers(year) && rp.series.has_value(year)) {
            observed[t] = true;
            rp_value[t] = rp.series.at_year(year);
            ++n_obs;
        }
        if (calibration.covers(year) && calibration.has_value(year)) {
            clamped[t] = true;
            cal_value[t] = calibration.at_year(year);
        }
    }
    if (n_obs == 0) throw std::invalid_argument("gibbs_wf: the reduced proxy has no values");

    const Eigen::Matrix4d ftf = f.transpose() * f;
    const double tau_cal = model::kDefaultCalibrationPrecision;

    Chain chain;
    chain.iterations = iterations;
    chain.burn_in = burn_in;
    chain.seed = seed;
    chain.start_year = t0;
    const std::string nest = std::to_string(rp.nest_index);
    chain.coefficient_names = {"alpha0_nest" + nest, "alpha1_nest" + nest,
                               "beta0",             "beta1_solar",
                               "beta2_volcanic",    "beta3_co2"};
    chain.variance_names = {"sigma2_process", "sigma2_nest" + nest};
    const int kept = iterations - burn_in;
    chain.coefficients.resize(kept, 6);
    chain.variances.resize(kept, 2);
    chain.temperature.resize(kept, n_years);

    std::mt19937_64 gen(seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    Eigen::Vector2d alpha(0.0, 1.0);
    Eigen::Vector4d beta = Eigen::Vector4d::Zero();
    Eigen::VectorXd temp = Eigen::VectorXd::Zero(n_years);
    for (int t = 0; t < n_years; ++t) {
        if (clamped[t]) temp[t] = cal_value[t];
    }
    double var_process = 1.0;
    double var_proxy = 1.0;

    for (int iter = 0; iter < iterations; ++iter) {
        const double tau_eta = 1.0 / var_process;
        const double tau_eps = 1.0 / var_proxy;

        // Proxy link coefficients given T: a bivariate Gaussian regression.
        {
            double s1 = 0.0, st = 0.0, stt = 0.0, sy = 0.0, sty = 0.0;
            for (int t = 0; t < n_years; ++t) {
                if (!observed[t]) continue;
                s1 += 1.0;
                st += temp[t];
                stt += temp[t] * temp[t];
                sy += rp_value[t];
                sty += temp[t] * rp_value[t];
            }
            Eigen::Matrix2d prec;
            prec << kCoefficientPrecision + tau_eps * s1, tau_eps * st, tau_eps * st,
                kCoefficientPrecision + tau_eps * stt;
            const Eigen::Vector2d shift(tau_eps * sy, tau_eps * sty);
            alpha = draw_gaussian<2>(prec, shift, gen);
        }

        // Forcing coefficients given T.
        {
            const Eigen::Matrix4d prec =
                kCoefficientPrecision * Eigen::Matrix4d::Identity() + tau_eta * ftf;
            const Eigen::Vector4d shift = tau_eta * (f.transpose() * temp);
            beta = draw_gaussian<4>(prec, shift, gen);
        }

        // Temperature block: conditionally independent across years.
        const Eigen::VectorXd process_mean = f * beta;
        for (int t = 0; t < n_years; ++t) {
            double prec = tau_eta;
            double shift = tau_eta * process_mean[t];
            if (observed[t]) {
                prec += tau_eps * alpha[1] * alpha[1];
                shift += tau_eps * alpha[1] * (rp_value[t] - alpha[0]);
            }
            if (clamped[t]) {
                prec += tau_cal;
                shift += tau_cal * cal_value[t];
            }
            temp[t] = shift / prec + normal(gen) / std::sqrt(prec);
        }

        // Variances from their gamma full conditionals.
        {
            double ssr_eta = 0.0;
            for (int t = 0; t < n_years; ++t) {
                const double r = temp[t] - process_mean[t];
                ssr_eta += r * r;
            }
            var_process = draw_variance(ssr_eta, n_years, gen);

            double ssr_eps = 0.0;
            for (int t = 0; t < n_years; ++t) {
                if (!observed[t]) continue;
                const double r = rp_value[t] - alpha[0] - alpha[1] * temp[t];
                ssr_eps += r * r;
            }
            var_proxy = draw_variance(ssr_eps, n_obs, gen);
        }

        if (iter < burn_in) continue;
        const int row = iter - burn_in;
        chain.coefficients(row, 0) = alpha[0];
        chain.coefficients(row, 1) = alpha[1];
        for (int j = 0; j < 4; ++j) chain.coefficients(row, 2 + j) = beta[j];
        chain.variances(row, 0) = var_process;
        chain.variances(row, 1) = var_proxy;
        chain.temperature.row(row) = temp.transpose();
    }
    return chain;
}

double effective_sample_size(const std::vector<double>& draws) {
    const std::size_t n = draws.size();
    if (n < 2) return 0.0;
    const double mu = [&] {
        double s = 0.0;
        for (double d : draws) s += d;
        return s / static_cast<double>(n);
    }();
    const auto autocov = [&](std::size_t lag) {
        double s = 0.0;
        for (std::size_t i = 0; i + lag < n; ++i) s += (draws[i] - mu) * (draws[i + lag] - mu);
        return s / static_cast<double>(n);
    };
    const double gamma0 = autocov(0);
    if (!(gamma0 > 0.0)) return 0.0;
    // Sum of autocovariances over initial positive pairs.
    double pair_sum = 0.0;
    for (std::size_t m = 0; 2 * m + 1 < n; ++m) {
        const double pair = autocov(2 * m) + autocov(2 * m + 1);
        if (pair <= 0.0) break;
        pair_sum += pair;
    }
    const double tau_int = std::max(1.0, -1.0 + 2.0 * pair_sum / gamma0);
    return static_cast<double>(n) / tau_int;
}

ParameterSummary series_summary(const std::string& name, const std::vector<double>& draws) {
    if (draws.empty()) throw std::invalid_argument("cannot summarise an empty chain");
    ParameterSummary out;
    out.name = name;
    const double n = static_cast<double>(draws.size());
    double s = 0.0;
    for (double d : draws) s += d;
    out.mean = s / n;
    double ss = 0.0;
    for (double d : draws) ss += (d - out.mean) * (d - out.mean);
    out.sd = std::sqrt(ss / n);
    std::vector<double> sorted = draws;
    std::sort(sorted.begin(), sorted.end());
    out.q025 = quantile_sorted(sorted, 0.025);
    out.q975 = quantile_sorted(sorted, 0.975);
    out.ess = effective_sample_size(draws);
    out.degenerate = !(out.sd > 0.0);
    return out;
}

std::vector<ParameterSummary> chain_summary(const Chain& chain) {
    if (chain.kept() == 0) throw std::invalid_argument("cannot summarise an empty chain");
    std::vector<ParameterSummary> out;
    const auto column = [&](const Eigen::MatrixXd& m, int j) {
        std::vector<double> v(m.rows());
        for (Eigen::Index i = 0; i < m.rows(); ++i) v[i] = m(i, j);
        return v;
    };
    for (std::size_t j = 0; j < chain.coefficient_names.size(); ++j) {
        out.push_back(series_summary(chain.coefficient_names[j],
                                     column(chain.coefficients, static_cast<int>(j))));
    }
    for (std::size_t j = 0; j < chain.variance_names.size(); ++j) {
        out.push_back(
            series_summary(chain.variance_names[j], column(chain.variances, static_cast<int>(j))));
    }
    return out;
}

double potential_scale_reduction(const std::vector<std::vector<double>>& chains) {
    if (chains.size() < 2) {
        throw std::invalid_argument("scale reduction needs at least two chains");
    }
    const std::size_t n = chains.front().size();
    if (n < 2) throw std::invalid_argument("scale reduction needs chains of length at least two");
    for (const auto& c : chains) {
        if (c.size() != n) {
            throw std::invalid_argument("scale reduction needs equally long chains");
        }
    }
    const double nc = static_cast<double>(chains.size());
    const double nn = static_cast<double>(n);
    std::vector<double> means;
    double within = 0.0;
    for (const auto& c : chains) {
        double s = 0.0;
        for (double d : c) s += d;
        const double mu = s / nn;
        means.push_back(mu);
        double ss = 0.0;
        for (double d : c) ss += (d - mu) * (d - mu);
        within += ss / (nn - 1.0);
    }
    within /= nc;
    double grand = 0.0;
    for (double mu : means) grand += mu;
    grand /= nc;
    double between = 0.0;  // B/n in the usual notation
    for (double mu : means) between += (mu - grand) * (mu - grand);
    between /= (nc - 1.0);
    if (!(within > 0.0)) {
        return between > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
    }
    return std::sqrt((nn - 1.0) / nn + between / within);
}

}  // namespace paleorec::gibbs
