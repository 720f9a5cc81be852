#pragma once

#include <cstddef>
#include <utility>
#include <vector>

// Scalar statistics shared across the library: normal distribution
// helpers, ranking, correlation tests and multiple-test control.
namespace paleorec::stats {

double normal_pdf(double x);
double normal_cdf(double x);

// Inverse standard-normal CDF. Throws std::domain_error unless 0 < p < 1.
double normal_quantile(double p);

// Two-sided p-value of a Pearson correlation r computed on n pairs,
// via the t statistic r*sqrt((n-2)/(1-r^2)). |r| == 1 maps to p = 0.
double pearson_pvalue(double r, std::size_t n);

double mean(const std::vector<double>& x);
// Population variance (1/n). Series of length < 1 throws.
double variance(const std::vector<double>& x);
double sd(const std::vector<double>& x);
double pearson(const std::vector<double>& x, const std::vector<double>& y);

// Average ranks (1-based); ties receive the mean of the ranks they span.
std::vector<double> average_ranks(const std::vector<double>& x);

// Benjamini-Hochberg step-up selection at level q. Returns the indices of
// hypotheses that pass, in their original order.
std::vector<std::size_t> benjamini_hochberg(const std::vector<double>& pvalues, double q);

// Adjusted R^2 for a model with p predictors (excluding intercept) fit on n points.
double adjusted_r2(double r2, std::size_t n, std::size_t p);

}  // namespace paleorec::stats
