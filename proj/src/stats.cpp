#include "paleorec/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

namespace paleorec::stats {

namespace {
const boost::math::normal_distribution<double> kStdNormal(0.0, 1.0);
}

double normal_pdf(double x) { return boost::math::pdf(kStdNormal, x); }

double normal_cdf(double x) { return boost::math::cdf(kStdNormal, x); }

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        throw std::domain_error("normal_quantile: p must lie strictly in (0, 1)");
    }
    return boost::math::quantile(kStdNormal, p);
}

double pearson_pvalue(double r, std::size_t n) {
    if (n < 3) throw std::invalid_argument("pearson_pvalue: need n >= 3");
    const double denom = 1.0 - r * r;
    if (denom <= 0.0) return 0.0;
    const double t = std::abs(r) * std::sqrt(static_cast<double>(n - 2) / denom);
    boost::math::students_t_distribution<double> dist(static_cast<double>(n - 2));
    return 2.0 * boost::math::cdf(boost::math::complement(dist, t));
}

double mean(const std::vector<double>& x) {
    if (x.empty()) throw std::invalid_argument("mean: empty input");
    return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double variance(const std::vector<double>& x) {
    const double m = mean(x);
    double acc = 0.0;
    for (double v : x) acc += (v - m) * (v - m);
    return acc / static_cast<double>(x.size());
}

double sd(const std::vector<double>& x) { return std::sqrt(variance(x)); }

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw std::invalid_argument("pearson: need two equal-length series of size >= 2");
    }
    const double mx = mean(x), my = mean(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw std::invalid_argument("pearson: zero-variance input");
    }
    return sxy / std::sqrt(sxx * syy);
}

std::vector<double> average_ranks(const std::vector<double>& x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });

    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // mean of ranks i+1..j+1
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

std::vector<std::size_t> benjamini_hochberg(const std::vector<double>& pvalues, double q) {
    if (!(q > 0.0 && q < 1.0)) {
        throw std::invalid_argument("benjamini_hochberg: level must lie in (0, 1)");
    }
    const std::size_t m = pvalues.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return pvalues[a] < pvalues[b]; });

    // Largest k with p_(k) <= k q / m; everything at or below passes.
    std::size_t cutoff = 0;
    for (std::size_t k = 1; k <= m; ++k) {
        if (pvalues[order[k - 1]] <= static_cast<double>(k) * q / static_cast<double>(m)) {
            cutoff = k;
        }
    }
    std::vector<std::size_t> kept;
    for (std::size_t k = 0; k < cutoff; ++k) kept.push_back(order[k]);
    std::sort(kept.begin(), kept.end());
    return kept;
}

double adjusted_r2(double r2, std::size_t n, std::size_t p) {
    if (n <= p + 1) throw std::invalid_argument("adjusted_r2: need n > p + 1");
    const double nn = static_cast<double>(n);
    return 1.0 - (1.0 - r2) * (nn - 1.0) / (nn - static_cast<double>(p) - 1.0);
}

}  // namespace paleorec::stats
