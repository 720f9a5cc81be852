#include "paleorec/splines.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "paleorec/stats.hpp"

namespace paleorec::splines {

namespace {

constexpr int kDegree = 3;
constexpr int kOrder = kDegree + 1;

// Cox-de Boor recursion for basis function i of degree d at x. The last
// basis function owns the right endpoint so the evaluation interval is
// closed; elsewhere knot spans are half-open [t_i, t_{i+1}).
double cox_de_boor(const std::vector<double>& t, int i, int d, double x, double domain_end) {
    if (d == 0) {
        const bool at_end = (x == domain_end) && (t[i + 1] >= domain_end) && (t[i] < t[i + 1]);
        return (x >= t[i] && x < t[i + 1]) || at_end ? 1.0 : 0.0;
    }
    double left = 0.0, right = 0.0;
    const double dl = t[i + d] - t[i];
    if (dl > 0.0) left = (x - t[i]) / dl * cox_de_boor(t, i, d - 1, x, domain_end);
    const double dr = t[i + d + 1] - t[i + 1];
    if (dr > 0.0) {
        right = (t[i + d + 1] - x) / dr * cox_de_boor(t, i + 1, d - 1, x, domain_end);
    }
    return left + right;
}

}  // namespace

SplineBasis bspline_basis(const std::vector<double>& grid, int basis_count) {
    if (basis_count < kOrder) {
        throw std::invalid_argument("bspline_basis: cubic basis needs K >= 4");
    }
    if (static_cast<int>(grid.size()) < basis_count) {
        throw std::invalid_argument("bspline_basis: grid shorter than basis count");
    }
    if (!std::is_sorted(grid.begin(), grid.end())) {
        throw std::invalid_argument("bspline_basis: grid must be ascending");
    }
    const double a = grid.front(), b = grid.back();
    if (a == b) throw std::invalid_argument("bspline_basis: degenerate grid span");

    SplineBasis basis;
    basis.grid = grid;
    basis.basis_count = basis_count;

    // Open uniform knot vector: boundary knots repeated `order` times,
    // K - order interior knots equally spaced.
    const int interior = basis_count - kOrder;
    basis.knots.assign(kOrder, a);
    for (int j = 1; j <= interior; ++j) {
        basis.knots.push_back(a + (b - a) * static_cast<double>(j) /
                                      static_cast<double>(interior + 1));
    }
    basis.knots.insert(basis.knots.end(), kOrder, b);

    basis.matrix.resize(static_cast<Eigen::Index>(grid.size()),
                        static_cast<Eigen::Index>(basis_count));
    for (std::size_t r = 0; r < grid.size(); ++r) {
        for (int k = 0; k < basis_count; ++k) {
            basis.matrix(static_cast<Eigen::Index>(r), k) =
                cox_de_boor(basis.knots, k, kDegree, grid[r], b);
        }
    }
    return basis;
}

SplineBasis bspline_basis(const YearInterval& years, int basis_count) {
    std::vector<double> grid(static_cast<std::size_t>(years.length()));
    for (int i = 0; i < years.length(); ++i) {
        grid[static_cast<std::size_t>(i)] = static_cast<double>(years.first + i);
    }
    return bspline_basis(grid, basis_count);
}

BasisSelection select_k(const TimeSeries& calibration_temps, const YearInterval& full_interval,
                        double r2_min) {
    const std::size_t n = calibration_temps.size();
    if (calibration_temps.count_valid() != n) {
        throw std::invalid_argument("select_k: calibration series has missing values");
    }
    if (n < 2 * kOrder) throw std::invalid_argument("select_k: calibration series too short");

    std::vector<double> grid(n);
    Eigen::VectorXd y(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        grid[i] = static_cast<double>(calibration_temps.start_year() + static_cast<int>(i));
        y(static_cast<Eigen::Index>(i)) = calibration_temps.values()[i];
    }
    const double y_mean = y.mean();
    const double tss = (y.array() - y_mean).square().sum();

    const int k_max = static_cast<int>(n) / 2;
    BasisSelection best;
    best.adjusted_r2 = -std::numeric_limits<double>::infinity();

    for (int k = kOrder; k <= k_max; ++k) {
        const SplineBasis basis = bspline_basis(grid, k);
        // Basis columns sum to 1 per row, so they already span the intercept.
        const Eigen::VectorXd coef = basis.matrix.colPivHouseholderQr().solve(y);
        const double rss = (y - basis.matrix * coef).squaredNorm();
        double adj;
        if (tss == 0.0) {
            adj = 0.0;  // degenerate constant response; R^2 undefined, flag below
        } else {
            // k columns including the implicit intercept -> k - 1 predictors.
            adj = stats::adjusted_r2(1.0 - rss / tss, n, static_cast<std::size_t>(k - 1));
        }
        if (adj > best.adjusted_r2) {
            best.adjusted_r2 = adj;
            best.k_calibration = k;
        }
        if (tss > 0.0 && adj >= r2_min) {
            best.adjusted_r2 = adj;
            best.k_calibration = k;
            best.threshold_reached = true;
            break;
        }
        if (k == k_max) best.threshold_reached = false;
    }
    if (tss == 0.0) {
        best.k_calibration = kOrder;
        best.adjusted_r2 = 0.0;
        best.threshold_reached = false;
    }

    const double cal_span =
        static_cast<double>(calibration_temps.end_year() - calibration_temps.start_year());
    const double full_span = static_cast<double>(full_interval.last - full_interval.first);
    best.k_full = std::max(
        kOrder, static_cast<int>(std::lround(best.k_calibration * full_span / cal_span)));
    return best;
}

}  // namespace paleorec::splines
