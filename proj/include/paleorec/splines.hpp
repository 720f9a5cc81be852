#pragma once

#include <Eigen/Dense>

#include <vector>

#include "paleorec/timeseries.hpp"

// Cubic B-spline bases on open uniform knot vectors, plus the adjusted-R^2
// rule that picks the basis count from calibration data and scales it to the
// full reconstruction interval.
namespace paleorec::splines {

// Cubic B-spline basis evaluated on a grid. Rows sum to one; each basis
// function is non-negative with local support.
struct SplineBasis {
    std::vector<double> grid;    // evaluation points (ascending)
    std::vector<double> knots;   // open uniform knot vector, boundary knots repeated 4x
    int basis_count = 0;         // K
    Eigen::MatrixXd matrix;      // grid.size() x K
};

// Build a K-function cubic basis over the grid's span. K >= 4 required.
SplineBasis bspline_basis(const std::vector<double>& grid, int basis_count);

// Convenience overload over consecutive calendar years.
SplineBasis bspline_basis(const YearInterval& years, int basis_count);

struct BasisSelection {
    int k_calibration = 0;   // basis count chosen on the calibration window
    int k_full = 0;          // scaled to the full interval, density-preserving
    double adjusted_r2 = 0.0;
    bool threshold_reached = true;  // false -> fell back to the adjusted-R^2 maximum
};

// Smallest K whose regression of the calibration series on the basis attains
// adjusted R^2 >= r2_min, searched up to n/2; if the threshold is never
// reached, returns the argmax with threshold_reached = false. k_full scales
// k_calibration by the ratio of year spans (last - first), rounded to
// nearest, so basis density per year is preserved.
BasisSelection select_k(const TimeSeries& calibration_temps, const YearInterval& full_interval,
                        double r2_min = 0.70);

}  // namespace paleorec::splines
