#include "paleorec/reduce.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

#include "paleorec/rng.hpp"
#include "paleorec/stats.hpp"

namespace paleorec::reduce {

namespace {

double soft_threshold(double z, double lambda) {
    if (z > lambda) return z - lambda;
    if (z < -lambda) return z + lambda;
    return 0.0;
}

void require_finite(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const char* who) {
    if (!X.allFinite() || !y.allFinite()) {
        throw std::invalid_argument(std::string(who) + ": non-finite entries");
    }
    if (X.rows() != y.size()) {
        throw std::invalid_argument(std::string(who) + ": row count does not match the response");
    }
    if (X.rows() == 0 || X.cols() == 0) {
        throw std::invalid_argument(std::string(who) + ": empty design matrix");
    }
}

// Flips each column so its largest-magnitude entry is positive, removing the
// sign ambiguity of eigen/singular vectors.
void fix_column_signs(Eigen::MatrixXd& m) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        Eigen::Index imax = 0;
        m.col(j).cwiseAbs().maxCoeff(&imax);
        if (m(imax, j) < 0.0) m.col(j) = -m.col(j);
    }
}

// Least squares of centered y on mean-zero scores; the intercept is the
// response mean.
Eigen::VectorXd score_regression(const Eigen::MatrixXd& scores, const Eigen::VectorXd& centered_y) {
    return scores.colPivHouseholderQr().solve(centered_y);
}

Eigen::VectorXd coordinate_descent(const Eigen::MatrixXd& X, const Eigen::VectorXd& yc,
                                   double lambda, Eigen::VectorXd beta) {
    const auto n = static_cast<double>(X.rows());
    const Eigen::Index p = X.cols();
    Eigen::VectorXd col_sq(p);
    for (Eigen::Index j = 0; j < p; ++j) col_sq[j] = X.col(j).squaredNorm() / n;

    Eigen::VectorXd r = yc - X * beta;
    constexpr int kMaxSweeps = 100000;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        double max_delta = 0.0;
        for (Eigen::Index j = 0; j < p; ++j) {
            if (col_sq[j] == 0.0) continue;
            const double z = X.col(j).dot(r) / n + col_sq[j] * beta[j];
            const double updated = soft_threshold(z, lambda) / col_sq[j];
            const double delta = updated - beta[j];
            if (delta != 0.0) {
                r -= X.col(j) * delta;
                beta[j] = updated;
                max_delta = std::max(max_delta, std::abs(delta));
            }
        }
        if (max_delta < 1e-10) return beta;
    }
    throw std::runtime_error("lasso_fit: coordinate descent did not converge");
}

// Warm-started solutions along a decreasing penalty grid; column g holds the
// coefficients at grid[g].
Eigen::MatrixXd lasso_path(const Eigen::MatrixXd& X, const Eigen::VectorXd& yc,
                           const std::vector<double>& grid) {
    Eigen::MatrixXd path(X.cols(), static_cast<Eigen::Index>(grid.size()));
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(X.cols());
    for (std::size_t g = 0; g < grid.size(); ++g) {
        beta = coordinate_descent(X, yc, grid[g], std::move(beta));
        path.col(static_cast<Eigen::Index>(g)) = beta;
    }
    return path;
}

struct PcrModel {
    Eigen::MatrixXd loadings;  // columns x k
    Eigen::VectorXd coefficients;
    PcrSelection selection;
};

// PC scores, the adjusted-R^2 selection rule, and the regression on the
// selected scores, shared by pcr and the supervised variant.
PcrModel fit_pcr_model(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double r2_min) {
    require_finite(X, y, "pcr_select");
    const Eigen::Index n = X.rows();
    if (n <= 2) throw std::invalid_argument("pcr_select: need more than 2 rows");

    const Eigen::VectorXd yc = y.array() - y.mean();
    const double tss = yc.squaredNorm();
    if (tss == 0.0) throw std::invalid_argument("pcr_select: constant response");

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd& sv = svd.singularValues();
    Eigen::Index rank = 0;
    while (rank < sv.size() && sv[rank] > sv[0] * 1e-12) ++rank;
    const Eigen::Index k_max = std::min(rank, n - 2);
    if (k_max < 1) throw std::invalid_argument("pcr_select: design matrix has no usable components");

    // Scores are orthogonal, so the residual sum of squares drops by an
    // independent amount per added component.
    Eigen::VectorXd coef(k_max);
    double rss = tss;
    int best_k = 1;
    double best_adj = -std::numeric_limits<double>::infinity();
    int chosen_k = 0;
    double chosen_adj = 0.0;
    for (Eigen::Index k = 0; k < k_max; ++k) {
        const Eigen::VectorXd score = svd.matrixU().col(k) * sv[k];
        const double ss = score.squaredNorm();
        coef[k] = score.dot(yc) / ss;
        rss -= coef[k] * coef[k] * ss;
        const double r2 = 1.0 - std::max(rss, 0.0) / tss;
        const double adj = 1.0 - (1.0 - r2) * static_cast<double>(n - 1) /
                                     static_cast<double>(n - (k + 1) - 1);
        if (adj > best_adj) {
            best_adj = adj;
            best_k = static_cast<int>(k + 1);
        }
        if (adj >= r2_min) {
            chosen_k = static_cast<int>(k + 1);
            chosen_adj = adj;
            break;
        }
    }

    PcrModel model;
    if (chosen_k > 0) {
        model.selection = {chosen_k, chosen_adj, true};
    } else {
        model.selection = {best_k, best_adj, false};
    }
    const Eigen::Index k = model.selection.k;
    model.loadings = svd.matrixV().leftCols(k);
    model.coefficients = coef.head(k);
    // Tie the sign convention to the loadings and keep predictions unchanged.
    for (Eigen::Index j = 0; j < k; ++j) {
        Eigen::Index imax = 0;
        model.loadings.col(j).cwiseAbs().maxCoeff(&imax);
        if (model.loadings(imax, j) < 0.0) {
            model.loadings.col(j) = -model.loadings.col(j);
            model.coefficients[j] = -model.coefficients[j];
        }
    }
    return model;
}

// |Pearson correlation| of each column against y; zero-variance columns get 0.
Eigen::VectorXd abs_correlations(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
    const Eigen::VectorXd yc = y.array() - y.mean();
    const double sy = yc.norm();
    Eigen::VectorXd out(X.cols());
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
        const Eigen::VectorXd xc = X.col(j).array() - X.col(j).mean();
        const double sx = xc.norm();
        out[j] = (sx == 0.0 || sy == 0.0) ? 0.0 : std::abs(xc.dot(yc) / (sx * sy));
    }
    return out;
}

ReductionModel spcr_from_survivors(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                   const std::vector<Eigen::Index>& kept, double threshold) {
    Eigen::MatrixXd sub(X.rows(), static_cast<Eigen::Index>(kept.size()));
    for (std::size_t j = 0; j < kept.size(); ++j) sub.col(static_cast<Eigen::Index>(j)) = X.col(kept[j]);
    const PcrModel pcr = fit_pcr_model(sub, y, 0.70);

    ReductionModel model;
    model.method = Method::kSpcr;
    model.weights = Eigen::MatrixXd::Zero(X.cols(), pcr.loadings.cols());
    for (std::size_t j = 0; j < kept.size(); ++j) {
        model.weights.row(kept[j]) = pcr.loadings.row(static_cast<Eigen::Index>(j));
    }
    model.coefficients = pcr.coefficients;
    model.intercept = y.mean();
    model.screen_threshold = threshold;
    model.surviving_columns = kept;
    model.components = pcr.selection.k;
    model.threshold_reached = pcr.selection.threshold_reached;
    model.effective_predictors = pcr.selection.k;
    return model;
}

}  // namespace

std::string method_name(Method m) {
    switch (m) {
        case Method::kLasso: return "lasso";
        case Method::kSpls: return "spls";
        case Method::kSir: return "sir";
        case Method::kPcr: return "pcr";
        case Method::kSpcr: return "spcr";
    }
    throw std::invalid_argument("method_name: unknown method");
}

Method parse_method(const std::string& name) {
    for (Method m : kAllMethods) {
        if (method_name(m) == name) return m;
    }
    throw std::invalid_argument("unknown reduction method '" + name + "'");
}

Eigen::VectorXd ReductionModel::predict(const Eigen::MatrixXd& standardized) const {
    if (standardized.cols() != weights.rows()) {
        throw std::invalid_argument("ReductionModel::predict: column count does not match the fit");
    }
    return ((standardized * weights) * coefficients).array() + intercept;
}

Eigen::VectorXd lasso_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda) {
    require_finite(X, y, "lasso_fit");
    if (lambda < 0.0) throw std::invalid_argument("lasso_fit: negative penalty");
    const Eigen::VectorXd yc = y.array() - y.mean();
    return coordinate_descent(X, yc, lambda, Eigen::VectorXd::Zero(X.cols()));
}

double lasso_lambda_max(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
    require_finite(X, y, "lasso_lambda_max");
    const Eigen::VectorXd yc = y.array() - y.mean();
    return (X.transpose() * yc).cwiseAbs().maxCoeff() / static_cast<double>(X.rows());
}

std::vector<double> lasso_lambda_grid(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                      int points) {
    if (points < 1) throw std::invalid_argument("lasso_lambda_grid: need at least one point");
    const double top = lasso_lambda_max(X, y);
    if (top <= 0.0) return {0.0};
    std::vector<double> grid(static_cast<std::size_t>(points));
    const double log_top = std::log(top);
    const double log_bottom = std::log(top * 1e-4);
    for (int g = 0; g < points; ++g) {
        const double t = points == 1 ? 0.0 : static_cast<double>(g) / (points - 1);
        grid[static_cast<std::size_t>(g)] = std::exp(log_top + t * (log_bottom - log_top));
    }
    return grid;
}

CvResult cv_select(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, std::size_t candidates,
                   const std::function<Eigen::MatrixXd(const Eigen::MatrixXd&, const Eigen::VectorXd&,
                                                       const Eigen::MatrixXd&)>& fit_predict,
                   int folds, std::uint64_t seed) {
    require_finite(X, y, "cv_select");
    if (candidates == 0) throw std::invalid_argument("cv_select: empty candidate grid");
    if (folds < 2) throw std::invalid_argument("cv_select: need at least 2 folds");
    const Eigen::Index n = X.rows();
    if (n < folds) throw std::invalid_argument("cv_select: more folds than rows");

    const std::vector<std::size_t> order = rng::shuffled_indices(static_cast<std::size_t>(n), seed);
    std::vector<int> fold_of(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < order.size(); ++i) fold_of[order[i]] = static_cast<int>(i % folds);

    std::vector<double> sse(candidates, 0.0);
    for (int f = 0; f < folds; ++f) {
        std::vector<Eigen::Index> train, test;
        for (Eigen::Index i = 0; i < n; ++i) {
            (fold_of[static_cast<std::size_t>(i)] == f ? test : train).push_back(i);
        }
        Eigen::MatrixXd Xtr(static_cast<Eigen::Index>(train.size()), X.cols());
        Eigen::VectorXd ytr(static_cast<Eigen::Index>(train.size()));
        for (std::size_t i = 0; i < train.size(); ++i) {
            Xtr.row(static_cast<Eigen::Index>(i)) = X.row(train[i]);
            ytr[static_cast<Eigen::Index>(i)] = y[train[i]];
        }
        Eigen::MatrixXd Xte(static_cast<Eigen::Index>(test.size()), X.cols());
        for (std::size_t i = 0; i < test.size(); ++i) {
            Xte.row(static_cast<Eigen::Index>(i)) = X.row(test[i]);
        }
        const Eigen::MatrixXd pred = fit_predict(Xtr, ytr, Xte);
        if (pred.rows() != Xte.rows() || pred.cols() != static_cast<Eigen::Index>(candidates)) {
            throw std::logic_error("cv_select: fit_predict returned a misshapen prediction matrix");
        }
        for (std::size_t c = 0; c < candidates; ++c) {
            for (std::size_t i = 0; i < test.size(); ++i) {
                const double err =
                    pred(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) - y[test[i]];
                sse[c] += err * err;
            }
        }
    }

    CvResult out;
    out.mean_squared_error.resize(candidates);
    for (std::size_t c = 0; c < candidates; ++c) {
        out.mean_squared_error[c] = sse[c] / static_cast<double>(n);
    }
    // Strict comparison keeps the earliest (simplest) candidate on ties.
    out.best_index = 0;
    for (std::size_t c = 1; c < candidates; ++c) {
        if (out.mean_squared_error[c] < out.mean_squared_error[out.best_index]) out.best_index = c;
    }
    return out;
}

ReductionModel spls_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double eta,
                        int n_components) {
    require_finite(X, y, "spls_fit");
    if (eta < 0.0 || eta >= 1.0) throw std::invalid_argument("spls_fit: eta must lie in [0, 1)");
    const Eigen::Index n = X.rows();
    const Eigen::Index p = X.cols();
    if (n_components < 1) throw std::invalid_argument("spls_fit: need at least one component");
    if (n_components > std::min<Eigen::Index>(n - 1, p)) {
        throw std::invalid_argument("spls_fit: component count exceeds min(n - 1, p)");
    }

    const Eigen::VectorXd yc = y.array() - y.mean();
    Eigen::MatrixXd work = X;
    // Maps original columns to the columns of the deflated matrix, so scores
    // can be reproduced directly from new data.
    Eigen::MatrixXd composite = Eigen::MatrixXd::Identity(p, p);
    Eigen::MatrixXd weights(p, n_components);
    Eigen::MatrixXd scores(n, n_components);

    int extracted = 0;
    for (int k = 0; k < n_components; ++k) {
        const Eigen::VectorXd c = work.transpose() * yc;
        const double top = c.cwiseAbs().maxCoeff();
        if (top == 0.0) {
            if (k == 0) {
                throw std::invalid_argument(
                    "spls_fit: response is constant or orthogonal to every column");
            }
            break;
        }
        Eigen::VectorXd w(p);
        for (Eigen::Index j = 0; j < p; ++j) w[j] = soft_threshold(c[j], eta * top);
        w.normalize();

        const Eigen::VectorXd t = work * w;
        const double tt = t.squaredNorm();
        if (tt <= 1e-300) break;

        weights.col(k) = composite * w;
        scores.col(k) = t;

        const Eigen::VectorXd load = work.transpose() * t / tt;
        work -= t * load.transpose();
        composite -= weights.col(k) * load.transpose();
        ++extracted;
    }

    ReductionModel model;
    model.method = Method::kSpls;
    model.weights = weights.leftCols(extracted);
    model.coefficients = score_regression(scores.leftCols(extracted), yc);
    model.intercept = y.mean();
    model.eta = eta;
    model.components = extracted;
    model.effective_predictors = extracted;
    return model;
}

SirResult sir_directions(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int n_slices,
                         double ridge) {
    require_finite(X, y, "sir_directions");
    if (n_slices < 2) throw std::invalid_argument("sir_directions: need at least 2 slices");
    const Eigen::Index n = X.rows();
    const Eigen::Index p = X.cols();

    const Eigen::MatrixXd centered = X.rowwise() - X.colwise().mean();
    Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
    if (ridge < 0.0) ridge = 0.01 * cov.trace() / static_cast<double>(p);
    cov.diagonal().array() += ridge;

    std::vector<Eigen::Index> by_response(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) by_response[static_cast<std::size_t>(i)] = i;
    std::stable_sort(by_response.begin(), by_response.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return y[a] < y[b]; });

    Eigen::MatrixXd between = Eigen::MatrixXd::Zero(p, p);
    for (int h = 0; h < n_slices; ++h) {
        const auto lo = static_cast<Eigen::Index>(static_cast<long long>(h) * n / n_slices);
        const auto hi = static_cast<Eigen::Index>(static_cast<long long>(h + 1) * n / n_slices);
        if (hi - lo < 2) {
            throw std::invalid_argument(
                "sir_directions: a slice has fewer than 2 points; reduce the slice count");
        }
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(p);
        for (Eigen::Index i = lo; i < hi; ++i) {
            mean += centered.row(by_response[static_cast<std::size_t>(i)]);
        }
        mean /= static_cast<double>(hi - lo);
        between += (static_cast<double>(hi - lo) / static_cast<double>(n)) * mean * mean.transpose();
    }

    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> solver(between, cov);
    if (solver.info() != Eigen::Success) {
        throw std::runtime_error("sir_directions: generalized eigendecomposition failed");
    }

    SirResult out;
    out.slices = n_slices;
    out.eigenvalues = solver.eigenvalues().reverse().cwiseMax(0.0);
    const double top = out.eigenvalues[0];
    int retained = 0;
    for (Eigen::Index j = 0; j < out.eigenvalues.size(); ++j) {
        if (top > 0.0 && out.eigenvalues[j] >= 0.1 * top) ++retained;
    }
    retained = std::max(retained, 1);

    out.retained = retained;
    out.directions.resize(p, retained);
    for (int j = 0; j < retained; ++j) {
        out.directions.col(j) = solver.eigenvectors().col(p - 1 - j).normalized();
    }
    fix_column_signs(out.directions);
    return out;
}

PcrSelection pcr_select(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double r2_min) {
    return fit_pcr_model(X, y, r2_min).selection;
}

ReductionModel spcr_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                        const std::vector<double>& threshold_grid, std::uint64_t seed) {
    require_finite(X, y, "spcr_fit");
    if (threshold_grid.empty()) throw std::invalid_argument("spcr_fit: empty threshold grid");

    // Largest threshold first: the sparsest screen is the simplest model.
    std::vector<double> grid = threshold_grid;
    std::sort(grid.begin(), grid.end(), std::greater<>());

    const Eigen::VectorXd full_cor = abs_correlations(X, y);
    if ((full_cor.array() >= grid.back()).count() == 0) {
        throw std::invalid_argument(
            "spcr_fit: no proxy column passes the loosest screening threshold");
    }

    const auto fit_predict = [&grid](const Eigen::MatrixXd& Xtr, const Eigen::VectorXd& ytr,
                                     const Eigen::MatrixXd& Xte) {
        Eigen::MatrixXd pred(Xte.rows(), static_cast<Eigen::Index>(grid.size()));
        const Eigen::VectorXd cor = abs_correlations(Xtr, ytr);
        for (std::size_t g = 0; g < grid.size(); ++g) {
            std::vector<Eigen::Index> kept;
            for (Eigen::Index j = 0; j < cor.size(); ++j) {
                if (cor[j] >= grid[g]) kept.push_back(j);
            }
            if (kept.empty()) {
                // An empty screen degrades to the intercept-only prediction.
                pred.col(static_cast<Eigen::Index>(g)).setConstant(ytr.mean());
                continue;
            }
            const ReductionModel sub = spcr_from_survivors(Xtr, ytr, kept, grid[g]);
            pred.col(static_cast<Eigen::Index>(g)) = sub.predict(Xte);
        }
        return pred;
    };

    const CvResult cv = cv_select(X, y, grid.size(), fit_predict, 10, seed);
    const double threshold = grid[cv.best_index];

    std::vector<Eigen::Index> kept;
    for (Eigen::Index j = 0; j < full_cor.size(); ++j) {
        if (full_cor[j] >= threshold) kept.push_back(j);
    }
    if (kept.empty()) {
        // The cross-validated threshold can in principle beat looser ones on
        // held-out error yet keep nothing on the full data; fall back to the
        // loosest screen rather than fitting an empty model.
        for (Eigen::Index j = 0; j < full_cor.size(); ++j) {
            if (full_cor[j] >= grid.back()) kept.push_back(j);
        }
    }
    return spcr_from_survivors(X, y, kept, threshold);
}

ReductionModel fit_reduction(Method method, const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                             std::uint64_t seed) {
    require_finite(X, y, "fit_reduction");
    const Eigen::Index n = X.rows();
    const Eigen::Index p = X.cols();

    switch (method) {
        case Method::kLasso: {
            const std::vector<double> grid = lasso_lambda_grid(X, y);
            const auto fit_predict = [&grid](const Eigen::MatrixXd& Xtr, const Eigen::VectorXd& ytr,
                                             const Eigen::MatrixXd& Xte) {
                const Eigen::VectorXd yc = ytr.array() - ytr.mean();
                const Eigen::MatrixXd path = lasso_path(Xtr, yc, grid);
                Eigen::MatrixXd pred = Xte * path;
                pred.array() += ytr.mean();
                return pred;
            };
            const CvResult cv = cv_select(X, y, grid.size(), fit_predict, 10, seed);

            ReductionModel model;
            model.method = Method::kLasso;
            model.lambda = grid[cv.best_index];
            model.weights = lasso_fit(X, y, model.lambda);
            model.coefficients = Eigen::VectorXd::Ones(1);
            model.intercept = y.mean();
            model.effective_predictors =
                static_cast<int>((model.weights.array() != 0.0).count());
            return model;
        }
        case Method::kSpls: {
            const int k_max = static_cast<int>(std::min<Eigen::Index>({5, n - 1, p}));
            std::vector<std::pair<int, double>> candidates;
            for (int k = 1; k <= k_max; ++k) {
                for (int e = 9; e >= 0; --e) candidates.emplace_back(k, 0.1 * e);
            }
            const auto fit_predict = [&candidates](const Eigen::MatrixXd& Xtr,
                                                   const Eigen::VectorXd& ytr,
                                                   const Eigen::MatrixXd& Xte) {
                Eigen::MatrixXd pred(Xte.rows(), static_cast<Eigen::Index>(candidates.size()));
                for (std::size_t c = 0; c < candidates.size(); ++c) {
                    const ReductionModel m =
                        spls_fit(Xtr, ytr, candidates[c].second, candidates[c].first);
                    pred.col(static_cast<Eigen::Index>(c)) = m.predict(Xte);
                }
                return pred;
            };
            const CvResult cv =
                cv_select(X, y, candidates.size(), fit_predict, 10, seed);
            const auto [k, eta] = candidates[cv.best_index];
            return spls_fit(X, y, eta, k);
        }
        case Method::kSir: {
            const SirResult sir = sir_directions(X, y);
            const Eigen::VectorXd yc = y.array() - y.mean();
            ReductionModel model;
            model.method = Method::kSir;
            model.weights = sir.directions;
            model.coefficients = score_regression(X * sir.directions, yc);
            model.intercept = y.mean();
            model.components = sir.retained;
            model.slices = sir.slices;
            model.effective_predictors = sir.retained;
            return model;
        }
        case Method::kPcr: {
            const PcrModel pcr = fit_pcr_model(X, y, 0.70);
            ReductionModel model;
            model.method = Method::kPcr;
            model.weights = pcr.loadings;
            model.coefficients = pcr.coefficients;
            model.intercept = y.mean();
            model.components = pcr.selection.k;
            model.threshold_reached = pcr.selection.threshold_reached;
            model.effective_predictors = pcr.selection.k;
            return model;
        }
        case Method::kSpcr: {
            const std::vector<double> grid = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
            return spcr_fit(X, y, grid, seed);
        }
    }
    throw std::invalid_argument("fit_reduction: unknown method");
}

ReductionModel fit_nest_reduction(const ProxyNest& nest, const TimeSeries& target,
                                  const YearInterval& calibration, Method method,
                                  std::uint64_t seed) {
    if (nest.members.empty()) {
        throw std::invalid_argument("fit_nest_reduction: nest " + std::to_string(nest.index) +
                                    " has no members");
    }
    Eigen::VectorXd y(calibration.length());
    for (int year = calibration.first; year <= calibration.last; ++year) {
        if (!target.has_value(year)) {
            throw std::invalid_argument("fit_nest_reduction: target temperature is missing in " +
                                        std::to_string(year));
        }
        y[year - calibration.first] = target.at_year(year);
    }
    ReductionModel model = fit_reduction(method, nest.calibration_matrix, y, seed);
    model.column_means = nest.column_means;
    model.column_sds = nest.column_sds;
    return model;
}

ReducedProxy build_reduced_proxy(const ProxyNest& nest, const ReductionModel& model,
                                 const TimeSeries& target, const YearInterval& calibration) {
    if (nest.members.empty()) {
        throw std::invalid_argument("build_reduced_proxy: nest " + std::to_string(nest.index) +
                                    " has no members");
    }
    const YearInterval window = nest.observation;
    const auto n_years = static_cast<Eigen::Index>(window.length());
    const auto n_members = static_cast<Eigen::Index>(nest.members.size());
    if (model.column_means.size() != nest.members.size() ||
        model.column_sds.size() != nest.members.size()) {
        throw std::invalid_argument(
            "build_reduced_proxy: model column statistics do not match the nest");
    }

    for (int year = window.first; year <= window.last; ++year) {
        const bool any = std::any_of(nest.members.begin(), nest.members.end(),
                                     [year](const TimeSeries& s) { return s.has_value(year); });
        if (!any) {
            throw std::invalid_argument("build_reduced_proxy: every member of nest " +
                                        std::to_string(nest.index) + " is missing in year " +
                                        std::to_string(year));
        }
    }

    Eigen::MatrixXd standardized(n_years, n_members);
    for (Eigen::Index j = 0; j < n_members; ++j) {
        const std::vector<double> filled =
            infill_window(nest.members[static_cast<std::size_t>(j)], window);
        const double m = model.column_means[static_cast<std::size_t>(j)];
        const double s = model.column_sds[static_cast<std::size_t>(j)];
        for (Eigen::Index t = 0; t < n_years; ++t) {
            standardized(t, j) = (filled[static_cast<std::size_t>(t)] - m) / s;
        }
    }

    const Eigen::VectorXd raw = model.predict(standardized);

    // The calibration fit is judged on the matrix the model was fitted to.
    Eigen::VectorXd y(calibration.length());
    for (int year = calibration.first; year <= calibration.last; ++year) {
        if (!target.has_value(year)) {
            throw std::invalid_argument("build_reduced_proxy: target temperature is missing in " +
                                        std::to_string(year));
        }
        y[year - calibration.first] = target.at_year(year);
    }
    const Eigen::VectorXd fitted = model.predict(nest.calibration_matrix);
    const Eigen::VectorXd yc = y.array() - y.mean();
    const double tss = yc.squaredNorm();
    if (tss == 0.0) {
        throw std::invalid_argument("build_reduced_proxy: constant calibration temperature");
    }
    CalibrationFit fit;
    fit.r2 = 1.0 - (y - fitted).squaredNorm() / tss;
    const int n_cal = calibration.length();
    if (n_cal > model.effective_predictors + 1) {
        fit.adjusted_r2 = stats::adjusted_r2(fit.r2, n_cal, model.effective_predictors);
    } else {
        fit.adjusted_r2 = std::numeric_limits<double>::quiet_NaN();
    }

    if (!window.contains(calibration.first) || !window.contains(calibration.last)) {
        throw std::invalid_argument(
            "build_reduced_proxy: observation window does not cover the calibration window");
    }
    const Eigen::Index cal_offset = calibration.first - window.first;
    const Eigen::VectorXd cal_slice = raw.segment(cal_offset, calibration.length());
    const double cal_mean = cal_slice.mean();
    const double cal_sd =
        std::sqrt((cal_slice.array() - cal_mean).square().sum() / cal_slice.size());
    if (cal_sd == 0.0) {
        throw std::runtime_error(
            "build_reduced_proxy: reduced proxy is constant over the calibration window");
    }

    std::vector<double> values(static_cast<std::size_t>(n_years));
    for (Eigen::Index t = 0; t < n_years; ++t) {
        values[static_cast<std::size_t>(t)] = (raw[t] - cal_mean) / cal_sd;
    }

    ReducedProxy out{nest.index, model.method,
                     TimeSeries(window.first, std::move(values),
                                "nest" + std::to_string(nest.index) + "_" + method_name(model.method)),
                     fit, model};
    return out;
}

}  // namespace paleorec::reduce
