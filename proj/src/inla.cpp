#include "paleorec/inla.hpp"

#include <Eigen/Sparse>

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "paleorec/parallel.hpp"
#include "paleorec/rng.hpp"
#include "paleorec/stats.hpp"

namespace paleorec::inla {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454836;

std::string format_vector(const Eigen::VectorXd& v) {
    std::ostringstream out;
    out << "[";
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (i > 0) out << ", ";
        out << v[i];
    }
    out << "]";
    return out.str();
}

// Natural cubic interpolation through strictly increasing nodes.
class CubicSpline {
public:
    CubicSpline(std::vector<double> x, std::vector<double> y)
        : x_(std::move(x)), y_(std::move(y)) {
        const std::size_t n = x_.size();
        if (n < 2 || y_.size() != n) {
            throw std::invalid_argument("cubic spline needs at least two nodes");
        }
        for (std::size_t i = 1; i < n; ++i) {
            if (!(x_[i] > x_[i - 1])) {
                throw std::invalid_argument("cubic spline nodes must be strictly increasing");
            }
        }
        m_.assign(n, 0.0);
        if (n > 2) {
            // Tridiagonal system for the interior second derivatives.
            const std::size_t k = n - 2;
            std::vector<double> diag(k), upper(k), rhs(k);
            for (std::size_t i = 0; i < k; ++i) {
                const double h0 = x_[i + 1] - x_[i];
                const double h1 = x_[i + 2] - x_[i + 1];
                diag[i] = 2.0 * (h0 + h1);
                upper[i] = h1;
                rhs[i] = 6.0 * ((y_[i + 2] - y_[i + 1]) / h1 - (y_[i + 1] - y_[i]) / h0);
            }
            for (std::size_t i = 1; i < k; ++i) {
                const double h0 = x_[i + 1] - x_[i];  // sub-diagonal entry of row i
                const double w = h0 / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m_[k] = rhs[k - 1] / diag[k - 1];
            for (std::size_t i = k - 1; i >= 1; --i) {
                m_[i] = (rhs[i - 1] - upper[i - 1] * m_[i + 1]) / diag[i - 1];
            }
        }
    }

    double operator()(double x) const {
        std::size_t i = std::upper_bound(x_.begin(), x_.end(), x) - x_.begin();
        i = std::min(std::max<std::size_t>(i, 1), x_.size() - 1) - 1;
        const double h = x_[i + 1] - x_[i];
        const double a = (x_[i + 1] - x) / h;
        const double b = (x - x_[i]) / h;
        return m_[i] * h * h * a * (a * a - 1.0) / 6.0 + m_[i + 1] * h * h * b * (b * b - 1.0) / 6.0 +
               y_[i] * a + y_[i + 1] * b;
    }

private:
    std::vector<double> x_;
    std::vector<double> y_;
    std::vector<double> m_;
};

// Sparse machinery for one model: the precision pattern with cached symbolic
// factorisation, grouped static contributions that scale with each
// exp(psi[k]), per-call refill slots for the slope rows, and the
// selected-inversion tables for marginal variances. One workspace serves one
// thread; the heavy symbolic work happens once in the constructor.
class Workspace {
public:
    struct Conditional {
        Eigen::VectorXd mode;
        Eigen::VectorXd sd;
        double log_det = 0.0;
        int iterations = 0;
    };

    explicit Workspace(const model::LatentGaussianModel& lgm)
        : lgm_(&lgm), m_(lgm.parameter_count()) {
        build_pattern();
        if (!arrow_) ldlt_.analyzePattern(q_);
        b_.resize(m_);
        cond_.mode.resize(m_);
    }

    const model::LatentGaussianModel& lgm() const { return *lgm_; }

    const Conditional& conditional(const Eigen::VectorXd& psi, bool want_sd) {
        solve_conditional(psi);
        if (want_sd) {
            auto tk0 = std::chrono::steady_clock::now();
            cond_.sd.resize(m_);
            if (arrow_) {
                marginal_sd_arrow();
            } else {
                run_takahashi();
                for (int i = 0; i < m_; ++i) {
                    const double v = zdiag_[i];
                    if (!(v > 0.0) || !std::isfinite(v)) {
                        throw std::runtime_error(
                            "selected inversion produced a non-positive variance for parameter "
                            "'" +
                            lgm_->parameter_names()[i] + "'");
                    }
                    cond_.sd[i] = std::sqrt(v);
                }
            }
            prof_ns(4) += std::chrono::duration_cast<std::chrono::nanoseconds>(
                              std::chrono::steady_clock::now() - tk0)
                              .count();
        }
        return cond_;
    }

    // Marginal variances under the block factorisation: the border block is
    // the dense inverse of the Schur complement, and each latent adds its
    // border coupling's quadratic form on top of 1/d.
    void marginal_sd_arrow() {
        if (bw_ > 0) sigma_b_ = llt_s_.solve(Eigen::MatrixXd::Identity(bw_, bw_));
        for (int j = 0; j < bw_; ++j) {
            const double var = sigma_b_(j, j);
            if (!(var > 0.0) || !std::isfinite(var)) {
                throw std::runtime_error(
                    "selected inversion produced a non-positive variance for parameter '" +
                    lgm_->parameter_names()[n_lat_ + j] + "'");
            }
            cond_.sd[n_lat_ + j] = std::sqrt(var);
        }
        const int* outer = q_.outerIndexPtr();
        const int* inner = q_.innerIndexPtr();
        const double* v = q_.valuePtr();
        for (int t = 0; t < n_lat_; ++t) {
            const double invd = invd_[t];
            double quad = 0.0;
            for (int a = outer[t] + 1; a < outer[t + 1]; ++a) {
                const double ua = v[a] * invd;
                const int ra = inner[a] - n_lat_;
                quad += ua * ua * sigma_b_(ra, ra);
                for (int b = outer[t] + 1; b < a; ++b) {
                    quad += 2.0 * ua * v[b] * invd * sigma_b_(ra, inner[b] - n_lat_);
                }
            }
            const double var = invd + quad;
            if (!(var > 0.0) || !std::isfinite(var)) {
                throw std::runtime_error(
                    "selected inversion produced a non-positive variance for parameter '" +
                    lgm_->parameter_names()[t] + "'");
            }
            cond_.sd[t] = std::sqrt(var);
        }
    }

    double log_hyper_posterior(const Eigen::VectorXd& psi, bool want_sd = false) {
        conditional(psi, want_sd);
        auto t0 = std::chrono::steady_clock::now();
        // Joint density at the conditional mode from the sufficient
        // statistics collected in build_pattern; equal to
        // lgm_->log_joint(cond_.mode, psi) without the per-row walk.
        double sum_log_tau = 0.0;
        double c0 = fixed_sy_;
        for (std::size_t h = 0; h < hyper_rows_.size(); ++h) {
            sum_log_tau += hyper_rows_[h] * psi[static_cast<Eigen::Index>(h)];
            // The guard keeps slope axes out: their exp() can overflow and
            // would otherwise turn 0 * inf into NaN.
            if (hyper_sy_[h] != 0.0) c0 += taus_[h] * hyper_sy_[h];
        }
        const double j = lgm_->log_hyper_prior(psi) + lp_const_ + 0.5 * sum_log_tau -
                         0.5 * (c0 - b_.dot(cond_.mode));
        prof_ns(3) += std::chrono::duration_cast<std::chrono::nanoseconds>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
        return j - 0.5 * cond_.log_det + 0.5 * m_ * kLogTwoPi;
    }

    const Conditional& last() const { return cond_; }

    // Transforms iid standard normals into a draw of theta - mode using the
    // factor from the most recent conditional() call.
    Eigen::VectorXd noise_from_factor(Eigen::VectorXd z) const {
        if (arrow_) {
            Eigen::VectorXd x(m_);
            if (bw_ > 0) {
                x.tail(bw_) =
                    llt_s_.matrixL().transpose().solve(z.tail(bw_));
            }
            const int* outer = q_.outerIndexPtr();
            const int* inner = q_.innerIndexPtr();
            const double* v = q_.valuePtr();
            for (int t = 0; t < n_lat_; ++t) {
                double dot = 0.0;
                for (int p = outer[t] + 1; p < outer[t + 1]; ++p) {
                    dot += v[p] * x[inner[p]];
                }
                x[t] = z[t] * std::sqrt(invd_[t]) - invd_[t] * dot;
            }
            return x;
        }
        z.array() /= ldlt_.vectorD().array().sqrt();
        ldlt_.matrixU().solveInPlace(z);
        return z;
    }

    Eigen::MatrixXd dense_covariance(const Eigen::VectorXd& psi) {
        solve_conditional(psi);
        Eigen::MatrixXd dense = Eigen::MatrixXd(q_).selfadjointView<Eigen::Lower>();
        return dense.ldlt().solve(Eigen::MatrixXd::Identity(m_, m_));
    }

private:
    struct SlotVal {
        int slot;
        double val;
    };

    struct SlopeRow {
        double value;
        double fixed_prec;
        int hyper;
        int slope_hyper;
        int count;
        int param_off;
        int slot_off;
        int s_pos;
    };

    void build_pattern() {
        const auto& rows = lgm_->rows();
        std::vector<Eigen::Triplet<double>> trips;
        trips.reserve(m_ + rows.size() * 8);
        for (int i = 0; i < m_; ++i) trips.emplace_back(i, i, 0.0);

        std::vector<int> params;
        std::vector<double> coeff;
        for (const auto& row : rows) {
            gather_row(row, params, coeff);
            for (std::size_t a = 0; a < params.size(); ++a) {
                for (std::size_t b = 0; b <= a; ++b) {
                    trips.emplace_back(std::max(params[a], params[b]),
                                       std::min(params[a], params[b]), 0.0);
                }
            }
        }
        q_.resize(m_, m_);
        q_.setFromTriplets(trips.begin(), trips.end());

        diag_slot_.resize(m_);
        for (int i = 0; i < m_; ++i) diag_slot_[i] = slot(i, i);

        static_vals_.assign(q_.nonZeros(), 0.0);
        static_b_ = Eigen::VectorXd::Zero(m_);
        for (int i = 0; i < m_; ++i) static_vals_[diag_slot_[i]] += lgm_->prior_precision(i);

        const int n_hyper = lgm_->hyper_count();
        std::vector<std::vector<SlotVal>> hyper_vals(n_hyper), hyper_b(n_hyper);
        std::size_t max_count = 0;
        for (const auto& row : rows) {
            gather_row(row, params, coeff);
            max_count = std::max(max_count, params.size());
            if (row.has_slope()) {
                SlopeRow dyn;
                dyn.value = row.value;
                dyn.fixed_prec = row.fixed_precision;
                dyn.hyper = row.precision_hyper;
                dyn.slope_hyper = row.slope_hyper;
                dyn.count = static_cast<int>(params.size());
                dyn.param_off = static_cast<int>(dyn_params_.size());
                dyn.slot_off = static_cast<int>(dyn_slots_.size());
                dyn.s_pos = position_of(params, row.slope_target);
                for (std::size_t a = 0; a < params.size(); ++a) {
                    dyn_params_.push_back(params[a]);
                    dyn_base_.push_back(coeff[a]);
                    for (std::size_t b = 0; b <= a; ++b) {
                        dyn_slots_.push_back(slot(std::max(params[a], params[b]),
                                                  std::min(params[a], params[b])));
                    }
                }
                dyn_rows_.push_back(dyn);
                continue;
            }
            if (row.precision_hyper < 0) {
                const double tau = row.fixed_precision;
                for (std::size_t a = 0; a < params.size(); ++a) {
                    if (row.value != 0.0) static_b_[params[a]] += tau * coeff[a] * row.value;
                    for (std::size_t b = 0; b <= a; ++b) {
                        static_vals_[slot(std::max(params[a], params[b]),
                                          std::min(params[a], params[b]))] +=
                            tau * coeff[a] * coeff[b];
                    }
                }
            } else {
                auto& vals = hyper_vals[row.precision_hyper];
                auto& bvals = hyper_b[row.precision_hyper];
                for (std::size_t a = 0; a < params.size(); ++a) {
                    if (row.value != 0.0) bvals.push_back({params[a], coeff[a] * row.value});
                    for (std::size_t b = 0; b <= a; ++b) {
                        vals.push_back({slot(std::max(params[a], params[b]),
                                             std::min(params[a], params[b])),
                                        coeff[a] * coeff[b]});
                    }
                }
            }
        }
        hyper_vals_.resize(n_hyper);
        hyper_b_.resize(n_hyper);
        for (int h = 0; h < n_hyper; ++h) {
            hyper_vals_[h] = merge_slots(std::move(hyper_vals[h]));
            hyper_b_[h] = merge_slots(std::move(hyper_b[h]));
        }
        g_scratch_.resize(std::max<std::size_t>(max_count, 1));
        taus_.assign(static_cast<std::size_t>(n_hyper), 0.0);

        // When no observation touches two latent parameters at once, the
        // precision is an arrow matrix: a diagonal latent block bordered by
        // the dense fixed-effect corner. Its factorisation reduces to one
        // pass over the border plus a small dense Cholesky, far cheaper
        // than the general simplicial algorithm.
        n_lat_ = lgm_->latent_count();
        bw_ = m_ - n_lat_;
        arrow_ = true;
        for (const auto& row : rows) {
            gather_row(row, params, coeff);
            int latents = 0;
            for (int idx : params) latents += idx < n_lat_ ? 1 : 0;
            if (latents > 1) {
                arrow_ = false;
                break;
            }
        }
        if (arrow_) {
            const int* outer = q_.outerIndexPtr();
            const int* inner = q_.innerIndexPtr();
            for (int t = 0; t < n_lat_; ++t) {
                if (inner[outer[t]] != t) throw std::logic_error("arrow pattern lost its diagonal");
            }
            dvals_.resize(n_lat_);
            invd_.resize(n_lat_);
            schur_.resize(bw_, bw_);
        }

        // Sufficient statistics for the joint density at the conditional
        // mode. With all means linear in theta the quadratic part collapses
        // to -(c0(psi) - b . mode)/2 where c0 sums tau * value^2 over the
        // rows, so the per-row walk happens once here instead of per
        // evaluation.
        hyper_rows_.assign(static_cast<std::size_t>(n_hyper), 0.0);
        hyper_sy_.assign(static_cast<std::size_t>(n_hyper), 0.0);
        lp_const_ = -0.5 * static_cast<double>(rows.size()) * kLogTwoPi;
        for (int i = 0; i < m_; ++i) {
            const double prec = lgm_->prior_precision(i);
            if (prec > 0.0) lp_const_ += 0.5 * (std::log(prec) - kLogTwoPi);
        }
        fixed_sy_ = 0.0;
        for (const auto& row : rows) {
            if (row.precision_hyper >= 0) {
                hyper_rows_[row.precision_hyper] += 1.0;
                hyper_sy_[row.precision_hyper] += row.value * row.value;
            } else {
                lp_const_ += 0.5 * std::log(row.fixed_precision);
                fixed_sy_ += row.fixed_precision * row.value * row.value;
            }
        }
    }

    static void gather_row(const model::ObservationRow& row, std::vector<int>& params,
                           std::vector<double>& coeff) {
        params.clear();
        coeff.clear();
        for (const auto& [index, c] : row.terms) {
            const int pos = position_or_append(params, coeff, index);
            coeff[pos] += c;
        }
        if (row.has_slope()) position_or_append(params, coeff, row.slope_target);
    }

    static int position_or_append(std::vector<int>& params, std::vector<double>& coeff,
                                  int index) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i] == index) return static_cast<int>(i);
        }
        params.push_back(index);
        coeff.push_back(0.0);
        return static_cast<int>(params.size()) - 1;
    }

    static int position_of(const std::vector<int>& params, int index) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i] == index) return static_cast<int>(i);
        }
        throw std::logic_error("slope target missing from the gathered row");
    }

    static std::vector<SlotVal> merge_slots(std::vector<SlotVal> entries) {
        std::sort(entries.begin(), entries.end(),
                  [](const SlotVal& a, const SlotVal& b) { return a.slot < b.slot; });
        std::vector<SlotVal> merged;
        merged.reserve(entries.size());
        for (const SlotVal& e : entries) {
            if (!merged.empty() && merged.back().slot == e.slot) {
                merged.back().val += e.val;
            } else {
                merged.push_back(e);
            }
        }
        return merged;
    }

    int slot(int r, int c) const {
        const int* inner = q_.innerIndexPtr();
        const int* lo = inner + q_.outerIndexPtr()[c];
        const int* hi = inner + q_.outerIndexPtr()[c + 1];
        const int* it = std::lower_bound(lo, hi, r);
        if (it == hi || *it != r) throw std::logic_error("precision pattern lookup failed");
        return static_cast<int>(it - inner);
    }

    void assemble(const Eigen::VectorXd& psi) {
        double* v = q_.valuePtr();
        std::copy(static_vals_.begin(), static_vals_.end(), v);
        b_ = static_b_;
        for (std::size_t h = 0; h < hyper_vals_.size(); ++h) {
            const double tau = std::exp(psi[static_cast<Eigen::Index>(h)]);
            taus_[h] = tau;
            for (const SlotVal& e : hyper_vals_[h]) v[e.slot] += tau * e.val;
            for (const SlotVal& e : hyper_b_[h]) b_[e.slot] += tau * e.val;
        }
        for (const SlopeRow& row : dyn_rows_) {
            const double tau = row.hyper >= 0 ? taus_[row.hyper] : row.fixed_prec;
            const int* params = dyn_params_.data() + row.param_off;
            const double* base = dyn_base_.data() + row.param_off;
            const int* slots = dyn_slots_.data() + row.slot_off;
            double* g = g_scratch_.data();
            for (int a = 0; a < row.count; ++a) g[a] = base[a];
            g[row.s_pos] += psi[row.slope_hyper];
            int sp = 0;
            for (int a = 0; a < row.count; ++a) {
                const double ga = tau * g[a];
                b_[params[a]] += ga * row.value;
                for (int b = 0; b <= a; ++b) v[slots[sp++]] += ga * g[b];
            }
        }
    }

    void factorize(const Eigen::VectorXd& psi) {
        if (arrow_) {
            factorize_arrow(psi);
            return;
        }
        ldlt_.factorize(q_);
        const auto& d = ldlt_.vectorD();
        for (int i = 0; i < m_; ++i) {
            if (!(d[i] > 0.0) || !std::isfinite(d[i])) {
                throw std::runtime_error("conditional precision is singular along parameter '" +
                                         lgm_->parameter_names()[i] + "' at psi = " +
                                         format_vector(psi));
            }
        }
        if (ldlt_.info() != Eigen::Success) {
            throw std::runtime_error("conditional precision factorisation failed at psi = " +
                                     format_vector(psi));
        }
        cond_.log_det = d.array().log().sum();
    }

    // Block factorisation of the arrow pattern: the latent diagonal is
    // eliminated in one pass, leaving the dense border's Schur complement
    // for a small Cholesky.
    void factorize_arrow(const Eigen::VectorXd& psi) {
        const int* outer = q_.outerIndexPtr();
        const int* inner = q_.innerIndexPtr();
        const double* v = q_.valuePtr();
        schur_.setZero();
        for (int j = n_lat_; j < m_; ++j) {
            for (int p = outer[j]; p < outer[j + 1]; ++p) {
                schur_(inner[p] - n_lat_, j - n_lat_) = v[p];
            }
        }
        for (int t = 0; t < n_lat_; ++t) {
            const int base = outer[t];
            const int end = outer[t + 1];
            const double d = v[base];
            if (!(d > 0.0) || !std::isfinite(d)) {
                throw std::runtime_error("conditional precision is singular along parameter '" +
                                         lgm_->parameter_names()[t] + "' at psi = " +
                                         format_vector(psi));
            }
            dvals_[t] = d;
            const double invd = 1.0 / d;
            invd_[t] = invd;
            for (int a = base + 1; a < end; ++a) {
                const double wa = v[a] * invd;
                const int ra = inner[a] - n_lat_;
                for (int b = base + 1; b <= a; ++b) {
                    schur_(ra, inner[b] - n_lat_) -= wa * v[b];
                }
            }
        }
        double log_det_s = 0.0;
        if (bw_ > 0) {
            llt_s_.compute(schur_);
            if (llt_s_.info() != Eigen::Success) {
                throw std::runtime_error("conditional precision factorisation failed at psi = " +
                                         format_vector(psi));
            }
            log_det_s = 2.0 * llt_s_.matrixLLT().diagonal().array().log().sum();
        }
        cond_.log_det = dvals_.array().log().sum() + log_det_s;
    }

public:
    static std::atomic<long>& prof_ns(int which) {
        static std::atomic<long> t[6];
        return t[which];
    }
    static void prof_dump() {
        static const char* names[6] = {"assemble", "factorize", "solve",
                                       "joint", "takahashi", "evals"};
        for (int i = 0; i < 6; ++i)
            std::fprintf(stderr, "[ws] %-10s %8.3f ms\n", names[i],
                         prof_ns(i).load() * 1e-6);
        for (int i = 0; i < 6; ++i) prof_ns(i).store(0);
    }

private:
    void solve_conditional(const Eigen::VectorXd& psi) {
        if (psi.size() != lgm_->hyper_count()) {
            throw std::invalid_argument("hyperparameter dimension mismatch");
        }
        // Every observation mean is linear in theta at fixed psi, so the
        // density is an exact quadratic and the single Newton step below
        // lands on the conditional mode; a non-quadratic likelihood would
        // iterate here.
        auto t0 = std::chrono::steady_clock::now();
        assemble(psi);
        auto t1 = std::chrono::steady_clock::now();
        factorize(psi);
        auto t2 = std::chrono::steady_clock::now();
        if (arrow_) {
            solve_arrow(b_, cond_.mode);
        } else {
            cond_.mode = ldlt_.solve(b_);
        }
        auto t3 = std::chrono::steady_clock::now();
        prof_ns(0) += std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
        prof_ns(1) += std::chrono::duration_cast<std::chrono::nanoseconds>(t2 - t1).count();
        prof_ns(2) += std::chrono::duration_cast<std::chrono::nanoseconds>(t3 - t2).count();
        prof_ns(5) += 1000000;
        cond_.iterations = 1;
    }

    void solve_arrow(const Eigen::VectorXd& rhs, Eigen::VectorXd& out) const {
        const int* outer = q_.outerIndexPtr();
        const int* inner = q_.innerIndexPtr();
        const double* v = q_.valuePtr();
        Eigen::VectorXd rhs_b = rhs.tail(bw_);
        for (int t = 0; t < n_lat_; ++t) {
            const double s = rhs[t] * invd_[t];
            for (int p = outer[t] + 1; p < outer[t + 1]; ++p) {
                rhs_b[inner[p] - n_lat_] -= v[p] * s;
            }
        }
        out.resize(m_);
        if (bw_ > 0) out.tail(bw_) = llt_s_.solve(rhs_b);
        for (int t = 0; t < n_lat_; ++t) {
            double dot = 0.0;
            for (int p = outer[t] + 1; p < outer[t + 1]; ++p) {
                dot += v[p] * out[inner[p]];
            }
            out[t] = (rhs[t] - dot) * invd_[t];
        }
    }

    // Selected inversion over the factor pattern: entries of the inverse are
    // filled column by column from the last to the first, each one touching
    // only the nonzero pattern of L. The lookup tables are built once; the
    // per-call work is a value refresh plus flat array walks.
    void build_takahashi() {
        lfactor_ = ldlt_.matrixL();
        col_off_.assign(m_ + 1, 0);
        std::vector<std::vector<int>> rows_by_col(m_), vpos_by_col(m_);
        for (int j = 0; j < m_; ++j) {
            for (Eigen::SparseMatrix<double>::InnerIterator it(lfactor_, j); it; ++it) {
                if (it.row() <= j) continue;  // unit diagonal stays implicit
                rows_by_col[j].push_back(static_cast<int>(it.row()));
                vpos_by_col[j].push_back(static_cast<int>(&it.value() - lfactor_.valuePtr()));
            }
        }
        ent_vpos_.clear();
        pair_off_.assign(m_ + 1, 0);
        std::size_t total_pairs = 0;
        for (int j = 0; j < m_; ++j) {
            col_off_[j] = static_cast<int>(ent_vpos_.size());
            ent_vpos_.insert(ent_vpos_.end(), vpos_by_col[j].begin(), vpos_by_col[j].end());
            pair_off_[j] = total_pairs;
            total_pairs += rows_by_col[j].size() * rows_by_col[j].size();
        }
        col_off_[m_] = static_cast<int>(ent_vpos_.size());
        pair_off_[m_] = total_pairs;

        pair_code_.resize(total_pairs);
        for (int j = 0; j < m_; ++j) {
            const auto& rows = rows_by_col[j];
            const int c = static_cast<int>(rows.size());
            std::size_t p = pair_off_[j];
            for (int ii = 0; ii < c; ++ii) {
                for (int kk = 0; kk < c; ++kk) {
                    const int i = rows[ii];
                    const int k = rows[kk];
                    if (i == k) {
                        pair_code_[p++] = -i - 1;
                        continue;
                    }
                    const int col = std::min(i, k);
                    const int r = std::max(i, k);
                    const auto& target = rows_by_col[col];
                    const auto it = std::lower_bound(target.begin(), target.end(), r);
                    if (it == target.end() || *it != r) {
                        throw std::logic_error("factor pattern is not closed under elimination");
                    }
                    pair_code_[p++] =
                        col_off_[col] + static_cast<int>(it - target.begin());
                }
            }
        }
        zvals_.assign(ent_vpos_.size(), 0.0);
        zdiag_.resize(m_);
        tak_built_ = true;
    }

    void run_takahashi() {
        if (!tak_built_) {
            build_takahashi();
        } else {
            lfactor_ = ldlt_.matrixL();
        }
        const double* lv = lfactor_.valuePtr();
        const auto& d = ldlt_.vectorD();
        for (int j = m_ - 1; j >= 0; --j) {
            const int base = col_off_[j];
            const int c = col_off_[j + 1] - base;
            const std::size_t pbase = pair_off_[j];
            for (int ii = c - 1; ii >= 0; --ii) {
                const int* codes = pair_code_.data() + pbase + static_cast<std::size_t>(ii) * c;
                double s = 0.0;
                for (int kk = 0; kk < c; ++kk) {
                    const double lval = lv[ent_vpos_[base + kk]];
                    const int code = codes[kk];
                    s += lval * (code < 0 ? zdiag_[-code - 1] : zvals_[code]);
                }
                zvals_[base + ii] = -s;
            }
            double s = 0.0;
            for (int kk = 0; kk < c; ++kk) s += lv[ent_vpos_[base + kk]] * zvals_[base + kk];
            zdiag_[j] = 1.0 / d[j] - s;
        }
    }

    const model::LatentGaussianModel* lgm_;
    int m_;

    Eigen::SparseMatrix<double> q_;
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>, Eigen::Lower,
                          Eigen::NaturalOrdering<int>>
        ldlt_;
    std::vector<int> diag_slot_;
    std::vector<double> static_vals_;
    Eigen::VectorXd static_b_;
    std::vector<std::vector<SlotVal>> hyper_vals_;
    std::vector<std::vector<SlotVal>> hyper_b_;
    std::vector<SlopeRow> dyn_rows_;
    std::vector<int> dyn_params_;
    std::vector<double> dyn_base_;
    std::vector<int> dyn_slots_;
    std::vector<double> g_scratch_;
    std::vector<double> taus_;

    bool arrow_ = false;
    int n_lat_ = 0;
    int bw_ = 0;
    Eigen::VectorXd dvals_;
    Eigen::VectorXd invd_;
    Eigen::MatrixXd schur_;
    Eigen::LLT<Eigen::MatrixXd> llt_s_;
    Eigen::MatrixXd sigma_b_;

    double lp_const_ = 0.0;
    double fixed_sy_ = 0.0;
    std::vector<double> hyper_rows_;
    std::vector<double> hyper_sy_;

    Eigen::VectorXd b_;
    Conditional cond_;

    bool tak_built_ = false;
    Eigen::SparseMatrix<double> lfactor_;
    std::vector<int> col_off_;
    std::vector<int> ent_vpos_;
    std::vector<std::size_t> pair_off_;
    std::vector<int> pair_code_;
    std::vector<double> zvals_;
    Eigen::VectorXd zdiag_;
};

// Shared state for the numerical mode search: finite-difference step sizes
// scale with the coordinate magnitude.
Eigen::VectorXd fd_steps(const Eigen::VectorXd& psi, double rel) {
    return rel * (1.0 + psi.array().abs());
}

double guarded_lp(Workspace& ws, const Eigen::VectorXd& psi) {
    try {
        return ws.log_hyper_posterior(psi);
    } catch (const std::runtime_error&) {
        return -std::numeric_limits<double>::infinity();
    }
}

}  // namespace

GaussianConditional gaussian_conditional(const model::LatentGaussianModel& lgm,
                                         const Eigen::VectorXd& psi) {
    Workspace ws(lgm);
    const auto& c = ws.conditional(psi, true);
    GaussianConditional out;
    out.mode = c.mode;
    out.marginal_sd = c.sd;
    out.log_det_precision = c.log_det;
    out.newton_iterations = c.iterations;
    return out;
}

Eigen::MatrixXd conditional_covariance_dense(const model::LatentGaussianModel& lgm,
                                             const Eigen::VectorXd& psi) {
    Workspace ws(lgm);
    return ws.dense_covariance(psi);
}

double log_hyper_posterior(const model::LatentGaussianModel& lgm, const Eigen::VectorXd& psi) {
    Workspace ws(lgm);
    return ws.log_hyper_posterior(psi);
}

std::vector<HyperPoint> explore_hyper(const model::LatentGaussianModel& lgm,
                                      const ExploreConfig& config) {
    const int k = lgm.hyper_count();
    if (k < 1) {
        throw std::invalid_argument("hyper exploration needs at least one hyperparameter");
    }
    if (!(config.fd_relative_step > 0.0) || !(config.gradient_tol > 0.0) ||
        config.max_iterations < 1 || !(config.grid_step > 0.0) || !(config.grid_extent >= 0.0)) {
        throw std::invalid_argument("invalid hyper exploration settings");
    }
    if (!(config.ccd_radius_scale > 1.0)) {
        throw std::invalid_argument(
            "the composite design radius scale must exceed 1 so the centre keeps positive weight");
    }
    if (config.initial_psi.size() != 0 && config.initial_psi.size() != k) {
        throw std::invalid_argument("initial psi has the wrong dimension");
    }

    // Design size drives how many worker states can be useful.
    std::size_t n_points;
    int grid_arm = 0;
    if (k <= 2) {
        grid_arm = static_cast<int>(std::floor(config.grid_extent / config.grid_step + 1e-12));
        const std::size_t per_axis = 2 * grid_arm + 1;
        n_points = k == 1 ? per_axis : per_axis * per_axis;
    } else {
        n_points = 1 + 2 * static_cast<std::size_t>(k) + (std::size_t{1} << std::min(k, 6));
    }
    const int threads = resolve_threads(config.threads);
    const int pool_size =
        std::max(1, std::min<int>(threads, static_cast<int>(std::max(n_points, std::size_t{2} * k))));
    const bool profile = std::getenv("PALEOREC_PROFILE") != nullptr;
    auto prof_t0 = std::chrono::steady_clock::now();
    const auto prof_mark = [&](const char* label) {
        if (!profile) return;
        const auto now = std::chrono::steady_clock::now();
        std::fprintf(stderr, "[profile] %-12s %8.3f ms\n", label,
                     std::chrono::duration<double, std::milli>(now - prof_t0).count());
        prof_t0 = now;
    };
    std::vector<std::unique_ptr<Workspace>> pool;
    pool.reserve(pool_size);
    for (int i = 0; i < pool_size; ++i) pool.push_back(std::make_unique<Workspace>(lgm));
    prof_mark("pool");

    const auto collapsing_precision = [&](const Eigen::VectorXd& p) {
        for (int i = 0; i < k; ++i) {
            if (lgm.hyper_kind(i) == model::HyperKind::kLogPrecision && p[i] > 12.0) return true;
        }
        return false;
    };

    // Central differences, falling back to a one-sided difference (against
    // the value at psi) on an axis whose probe lands where the conditional
    // cannot be evaluated.
    const auto gradient = [&](const Eigen::VectorXd& psi, double f_at_psi) {
        const Eigen::VectorXd h = fd_steps(psi, config.fd_relative_step);
        Eigen::VectorXd lo(k), hi(k);
        parallel_for(static_cast<std::size_t>(2 * k), pool_size, [&](std::size_t idx, int worker) {
            const int axis = static_cast<int>(idx / 2);
            Eigen::VectorXd p = psi;
            if (idx % 2 == 0) {
                p[axis] += h[axis];
                hi[axis] = guarded_lp(*pool[worker], p);
            } else {
                p[axis] -= h[axis];
                lo[axis] = guarded_lp(*pool[worker], p);
            }
        });
        Eigen::VectorXd g(k);
        for (int i = 0; i < k; ++i) {
            const bool hi_ok = std::isfinite(hi[i]);
            const bool lo_ok = std::isfinite(lo[i]);
            if (hi_ok && lo_ok)
                g[i] = -(hi[i] - lo[i]) / (2.0 * h[i]);
            else if (hi_ok)
                g[i] = -(hi[i] - (-f_at_psi)) / h[i];
            else if (lo_ok)
                g[i] = -((-f_at_psi) - lo[i]) / h[i];
            else
                g[i] = 0.0;
        }
        return g;  // gradient of -log posterior
    };

    // Full second-difference curvature of the log posterior at a point
    // whose value is already known.
    const auto fd_curvature = [&](const Eigen::VectorXd& at, double lp_at) {
        const Eigen::VectorXd h2 = fd_steps(at, std::sqrt(config.fd_relative_step));
        struct Task {
            int i;
            int j;
            int si;
            int sj;
        };
        std::vector<Task> tasks;
        for (int i = 0; i < k; ++i) {
            tasks.push_back({i, i, 1, 0});
            tasks.push_back({i, i, -1, 0});
        }
        for (int i = 0; i < k; ++i) {
            for (int j = 0; j < i; ++j) {
                tasks.push_back({i, j, 1, 1});
                tasks.push_back({i, j, 1, -1});
                tasks.push_back({i, j, -1, 1});
                tasks.push_back({i, j, -1, -1});
            }
        }
        std::vector<double> vals(tasks.size());
        parallel_for(tasks.size(), pool_size, [&](std::size_t t, int worker) {
            Eigen::VectorXd p = at;
            p[tasks[t].i] += tasks[t].si * h2[tasks[t].i];
            if (tasks[t].i != tasks[t].j) p[tasks[t].j] += tasks[t].sj * h2[tasks[t].j];
            vals[t] = pool[worker]->log_hyper_posterior(p);
        });
        Eigen::MatrixXd curvature = Eigen::MatrixXd::Zero(k, k);
        std::size_t t = 0;
        for (int i = 0; i < k; ++i) {
            const double plus = vals[t++];
            const double minus = vals[t++];
            curvature(i, i) = (plus - 2.0 * lp_at + minus) / (h2[i] * h2[i]);
        }
        for (int i = 0; i < k; ++i) {
            for (int j = 0; j < i; ++j) {
                const double pp = vals[t++];
                const double pm = vals[t++];
                const double mp = vals[t++];
                const double mm = vals[t++];
                curvature(i, j) = curvature(j, i) = (pp - pm - mp + mm) / (4.0 * h2[i] * h2[j]);
            }
        }
        return curvature;
    };

    // BFGS on the negative log posterior.  The gradient test is relative to
    // the objective's magnitude: below that scale the remaining mode offset
    // moves the evidence by less than double-precision noise in the
    // objective itself.
    const auto small_gradient = [&](const Eigen::VectorXd& grad, double value, double slack) {
        return grad.norm() <= slack * config.gradient_tol * std::max(1.0, std::abs(value));
    };
    Eigen::VectorXd psi =
        config.initial_psi.size() == k ? config.initial_psi : Eigen::VectorXd::Zero(k);
    double f = -pool[0]->log_hyper_posterior(psi);
    if (!std::isfinite(f)) {
        throw std::runtime_error("hyper posterior is not finite at the starting point psi = " +
                                 format_vector(psi));
    }
    Eigen::VectorXd g = gradient(psi, f);
    Eigen::MatrixXd h_inv = Eigen::MatrixXd::Identity(k, k);
    bool converged = small_gradient(g, f, 1.0);
    if (profile)
        std::fprintf(stderr, "[bfgs] start psi = %s f=%.6f |g|=%.3e\n",
                     format_vector(psi).c_str(), f, g.norm());
    const Eigen::VectorXd psi_start = psi;
    Eigen::MatrixXd curvature_start;
    bool have_start_curvature = false;
    if (!converged) {
        // Seed the inverse curvature from second differences at the start,
        // so the first step is a Newton step; an identity start needs many
        // extra iterations to learn the scale gap between the precision
        // axes and the slope axes. A start in an invalid or non-concave
        // region simply leaves the identity in place.
        try {
            curvature_start = fd_curvature(psi, -f);
            have_start_curvature = curvature_start.allFinite();
        } catch (const std::runtime_error&) {
            have_start_curvature = false;
        }
        if (have_start_curvature) {
            const Eigen::LLT<Eigen::MatrixXd> llt0(-curvature_start);
            if (llt0.info() == Eigen::Success) {
                h_inv = llt0.solve(Eigen::MatrixXd::Identity(k, k));
            } else {
                have_start_curvature = false;
            }
        }
    }
    bool reset_tried = false;
    int iterations = 0;
    while (!converged && iterations < config.max_iterations) {
        ++iterations;
        Eigen::VectorXd dir = -h_inv * g;
        if (dir.dot(g) >= 0.0) {
            h_inv.setIdentity();
            dir = -g;
        }
        // A hyperparameter moves by at most 5 per step; a larger jump
        // rescales a variance by more than e^5 and overshoots any plausible
        // mode.
        const double max_move = dir.cwiseAbs().maxCoeff();
        if (max_move > 5.0) dir *= 5.0 / max_move;
        const double slope = g.dot(dir);
        double step = 1.0;
        double f_next = f;
        Eigen::VectorXd psi_next = psi;
        bool accepted = false;
        for (int bt = 0; bt < 60; ++bt) {
            psi_next = psi + step * dir;
            f_next = -guarded_lp(*pool[0], psi_next);
            if (f_next <= f + 1e-4 * step * slope + 4e-16 * (1.0 + std::abs(f))) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            // A failed backtrack with a near-zero gradient means the
            // objective is flat to numerical noise; take the point as the
            // mode.
            if (small_gradient(g, f, 1e3)) {
                converged = true;
                break;
            }
            // One fresh steepest-descent attempt before giving up; a stale
            // curvature estimate is the usual culprit.
            if (!reset_tried) {
                reset_tried = true;
                h_inv.setIdentity();
                continue;
            }
            std::string message =
                "hyper mode search stalled in its line search after " +
                std::to_string(iterations) + " iterations (|grad| = " + std::to_string(g.norm()) +
                ", psi = " + format_vector(psi) + ")";
            if (collapsing_precision(psi))
                message +=
                    "; a noise variance is collapsing toward zero, which usually means a "
                    "reduced proxy fits the record almost perfectly and its precision is "
                    "unidentified";
            throw std::runtime_error(message);
        }
        reset_tried = false;
        const Eigen::VectorXd g_next = gradient(psi_next, f_next);
        const Eigen::VectorXd s = psi_next - psi;
        const Eigen::VectorXd y = g_next - g;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            const Eigen::MatrixXd outer = s * y.transpose() / sy;
            h_inv = (Eigen::MatrixXd::Identity(k, k) - outer) * h_inv *
                        (Eigen::MatrixXd::Identity(k, k) - outer.transpose()) +
                    s * s.transpose() / sy;
        }
        psi = psi_next;
        f = f_next;
        g = g_next;
        converged = small_gradient(g, f, 1.0);
        if (profile)
            std::fprintf(stderr, "[bfgs] it=%d f=%.10f |g|=%.3e step=%.3e |dir|=%.3e\n",
                         iterations, f, g.norm(), step, dir.norm());
    }
    if (profile) std::fprintf(stderr, "[profile] bfgs iterations: %d\n", iterations);
    prof_mark("bfgs");
    if (!converged) {
        std::string message = "hyper mode search did not converge after " +
                              std::to_string(config.max_iterations) +
                              " iterations (|grad| = " + std::to_string(g.norm()) +
                              ", psi = " + format_vector(psi) + ")";
        if (collapsing_precision(psi))
            message +=
                "; a noise variance is collapsing toward zero, which usually means a reduced "
                "proxy fits the record almost perfectly and its precision is unidentified";
        throw std::runtime_error(message);
    }

    // Curvature at the mode for the standardised axes of the integration
    // design. When the mode search barely moved from its start, the
    // curvature measured there is still accurate to second order and is
    // reused instead of being measured again.
    const double lp_mode = pool[0]->log_hyper_posterior(psi);
    const bool near_start =
        have_start_curvature &&
        ((psi - psi_start).cwiseAbs().array() / (1.0 + psi.cwiseAbs().array())).maxCoeff() <=
            0.05;
    const Eigen::MatrixXd curvature = near_start ? curvature_start : fd_curvature(psi, lp_mode);
    prof_mark("hessian");
    Eigen::MatrixXd c = -curvature;
    Eigen::LLT<Eigen::MatrixXd> llt(c);
    if (llt.info() != Eigen::Success) {
        const double scale = c.diagonal().cwiseAbs().maxCoeff() + 1e-300;
        double ridge = 1e-10 * scale;
        for (int attempt = 0; attempt < 20 && llt.info() != Eigen::Success; ++attempt) {
            llt.compute(c + ridge * Eigen::MatrixXd::Identity(k, k));
            ridge *= 10.0;
        }
        if (llt.info() != Eigen::Success) {
            throw std::runtime_error("hyper posterior curvature is not positive definite at psi = " +
                                     format_vector(psi));
        }
    }

    // Integration design in standardised coordinates.
    std::vector<Eigen::VectorXd> zs;
    zs.reserve(n_points);
    if (k <= 2) {
        std::vector<double> axis;
        for (int i = -grid_arm; i <= grid_arm; ++i) axis.push_back(i * config.grid_step);
        if (k == 1) {
            for (double v : axis) {
                Eigen::VectorXd z(1);
                z << v;
                zs.push_back(z);
            }
        } else {
            for (double v0 : axis) {
                for (double v1 : axis) {
                    Eigen::VectorXd z(2);
                    z << v0, v1;
                    zs.push_back(z);
                }
            }
        }
    } else {
        const double radius = config.ccd_radius_scale * std::sqrt(static_cast<double>(k));
        zs.push_back(Eigen::VectorXd::Zero(k));
        for (int axis = 0; axis < k; ++axis) {
            Eigen::VectorXd z = Eigen::VectorXd::Zero(k);
            z[axis] = radius;
            zs.push_back(z);
            z[axis] = -radius;
            zs.push_back(z);
        }
        const int base_bits = std::min(k, 6);
        static const std::vector<std::vector<int>> kGenerators = {
            {0, 1}, {0, 2}, {1, 2}, {0, 3}, {1, 3},
            {2, 3}, {0, 4}, {1, 4}, {2, 4}, {3, 4}};
        if (k - base_bits > static_cast<int>(kGenerators.size())) {
            throw std::invalid_argument("too many hyperparameters for the composite design");
        }
        for (std::size_t mask = 0; mask < (std::size_t{1} << base_bits); ++mask) {
            Eigen::VectorXd z(k);
            for (int bit = 0; bit < base_bits; ++bit) {
                z[bit] = (mask >> bit) & 1 ? config.ccd_radius_scale : -config.ccd_radius_scale;
            }
            for (int extra = base_bits; extra < k; ++extra) {
                int parity = 0;
                for (int bit : kGenerators[extra - base_bits]) parity ^= (mask >> bit) & 1;
                z[extra] = parity ? config.ccd_radius_scale : -config.ccd_radius_scale;
            }
            zs.push_back(z);
        }
    }

    std::vector<HyperPoint> points(zs.size());
    parallel_for(zs.size(), pool_size, [&](std::size_t i, int worker) {
        HyperPoint& pt = points[i];
        pt.z = zs[i];
        pt.psi = psi + llt.matrixU().solve(zs[i]);
        pt.log_posterior = pool[worker]->log_hyper_posterior(pt.psi, true);
        pt.mode = pool[worker]->last().mode;
        pt.marginal_sd = pool[worker]->last().sd;
    });
    prof_mark("design");

    double lp_max = -std::numeric_limits<double>::infinity();
    for (const HyperPoint& pt : points) lp_max = std::max(lp_max, pt.log_posterior);
    double total = 0.0;
    if (k <= 2) {
        for (HyperPoint& pt : points) {
            pt.weight = std::exp(pt.log_posterior - lp_max);
            total += pt.weight;
        }
    } else {
        const double f2 = config.ccd_radius_scale * config.ccd_radius_scale;
        const double n_sphere = static_cast<double>(points.size() - 1);
        const double centre_factor = 1.0 - 1.0 / f2;
        const double sphere_factor = std::exp(0.5 * f2 * k) / (n_sphere * f2);
        for (std::size_t i = 0; i < points.size(); ++i) {
            const double factor = i == 0 ? centre_factor : sphere_factor;
            points[i].weight = factor * std::exp(points[i].log_posterior - lp_max);
            total += points[i].weight;
        }
    }
    for (HyperPoint& pt : points) pt.weight /= total;
    if (profile) Workspace::prof_dump();
    return points;
}

PosteriorMarginal::PosteriorMarginal(Eigen::VectorXd means, Eigen::VectorXd sds,
                                     Eigen::VectorXd weights)
    : means_(std::move(means)), sds_(std::move(sds)), weights_(std::move(weights)) {
    const Eigen::Index n = means_.size();
    if (n == 0 || sds_.size() != n || weights_.size() != n) {
        throw std::invalid_argument("mixture components must share one non-empty size");
    }
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!(sds_[i] > 0.0) || !std::isfinite(sds_[i]) || !std::isfinite(means_[i])) {
            throw std::invalid_argument("mixture components need finite means and positive sds");
        }
        if (!(weights_[i] >= 0.0)) {
            throw std::invalid_argument("mixture weights must be non-negative");
        }
        total += weights_[i];
    }
    if (!(total > 0.0)) throw std::invalid_argument("mixture weights must not all vanish");
    weights_ /= total;
    mean_ = weights_.dot(means_);
    variance_ = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        variance_ += weights_[i] * (sds_[i] * sds_[i] + means_[i] * means_[i]);
    }
    variance_ -= mean_ * mean_;
    variance_ = std::max(variance_, 0.0);
}

double PosteriorMarginal::pdf(double x) const {
    double p = 0.0;
    for (Eigen::Index i = 0; i < means_.size(); ++i) {
        p += weights_[i] * stats::normal_pdf((x - means_[i]) / sds_[i]) / sds_[i];
    }
    return p;
}

double PosteriorMarginal::cdf(double x) const {
    double p = 0.0;
    for (Eigen::Index i = 0; i < means_.size(); ++i) {
        p += weights_[i] * stats::normal_cdf((x - means_[i]) / sds_[i]);
    }
    return p;
}

double PosteriorMarginal::quantile(double p) const {
    if (!(p > 0.0) || !(p < 1.0)) {
        throw std::domain_error("quantile level must lie strictly between 0 and 1");
    }
    double lo = (means_ - 10.0 * sds_).minCoeff();
    double hi = (means_ + 10.0 * sds_).maxCoeff();
    for (int i = 0; i < 200 && hi - lo > 1e-14 * (1.0 + std::abs(lo) + std::abs(hi)); ++i) {
        const double mid = 0.5 * (lo + hi);
        (cdf(mid) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

double PosteriorMarginal::mean() const { return mean_; }
double PosteriorMarginal::variance() const { return variance_; }
double PosteriorMarginal::sd() const { return std::sqrt(variance_); }

double PosteriorMarginal::sample(std::mt19937_64& gen) const {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double u = unif(gen);
    double cum = 0.0;
    Eigen::Index pick = means_.size() - 1;
    for (Eigen::Index i = 0; i < means_.size(); ++i) {
        cum += weights_[i];
        if (u <= cum) {
            pick = i;
            break;
        }
    }
    std::normal_distribution<double> normal(means_[pick], sds_[pick]);
    return normal(gen);
}

PosteriorMarginal marginal(const std::vector<HyperPoint>& points, int parameter) {
    if (points.empty()) throw std::invalid_argument("no hyper points to mix over");
    const Eigen::Index m = points.front().mode.size();
    if (parameter < 0 || parameter >= m) {
        throw std::invalid_argument("unknown parameter id " + std::to_string(parameter));
    }
    const Eigen::Index n = static_cast<Eigen::Index>(points.size());
    Eigen::VectorXd means(n), sds(n), weights(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const HyperPoint& pt = points[i];
        if (pt.mode.size() != m || pt.marginal_sd.size() != m) {
            throw std::invalid_argument("hyper points carry inconsistent conditionals");
        }
        means[i] = pt.mode[parameter];
        sds[i] = pt.marginal_sd[parameter];
        weights[i] = pt.weight;
    }
    return PosteriorMarginal(means, sds, weights);
}

PosteriorMarginal marginal(const model::LatentGaussianModel& lgm,
                           const std::vector<HyperPoint>& points, const std::string& parameter) {
    return marginal(points, lgm.parameter_index(parameter));
}

Eigen::MatrixXd sample_posterior(const model::LatentGaussianModel& lgm,
                                 const std::vector<HyperPoint>& points,
                                 const std::vector<int>& parameters, int n_draws,
                                 std::uint64_t seed) {
    if (points.empty()) throw std::invalid_argument("no hyper points to sample from");
    if (n_draws < 0) throw std::invalid_argument("the draw count must be non-negative");
    const int m = lgm.parameter_count();
    for (const HyperPoint& pt : points) {
        if (pt.mode.size() != m) {
            throw std::invalid_argument("hyper points do not carry conditionals for this model");
        }
    }
    for (int p : parameters) {
        if (p < 0 || p >= m) {
            throw std::invalid_argument("unknown parameter id " + std::to_string(p));
        }
    }
    Eigen::MatrixXd out(n_draws, static_cast<Eigen::Index>(parameters.size()));
    if (n_draws == 0 || parameters.empty()) return out;

    std::vector<double> cum(points.size());
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        total += points[i].weight;
        cum[i] = total;
    }
    if (!(total > 0.0)) throw std::invalid_argument("hyper point weights must not all vanish");
    for (double& c : cum) c /= total;
    cum.back() = 1.0;

    std::vector<int> component(n_draws);
    for (int i = 0; i < n_draws; ++i) {
        std::mt19937_64 gen(rng::substream_seed(seed, static_cast<std::uint64_t>(i)));
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        const double u = unif(gen);
        component[i] =
            static_cast<int>(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
    }

    Workspace ws(lgm);
    for (std::size_t c = 0; c < points.size(); ++c) {
        bool any = false;
        for (int i = 0; i < n_draws && !any; ++i) any = component[i] == static_cast<int>(c);
        if (!any) continue;
        ws.conditional(points[c].psi, false);
        for (int i = 0; i < n_draws; ++i) {
            if (component[i] != static_cast<int>(c)) continue;
            std::mt19937_64 gen(rng::substream_seed(seed, static_cast<std::uint64_t>(i)));
            std::uniform_real_distribution<double> unif(0.0, 1.0);
            unif(gen);  // replay the component pick to stay aligned
            std::normal_distribution<double> normal(0.0, 1.0);
            Eigen::VectorXd z(m);
            for (int j = 0; j < m; ++j) z[j] = normal(gen);
            const Eigen::VectorXd draw = points[c].mode + ws.noise_from_factor(std::move(z));
            for (std::size_t pcol = 0; pcol < parameters.size(); ++pcol) {
                out(i, static_cast<Eigen::Index>(pcol)) = draw[parameters[pcol]];
            }
        }
    }
    return out;
}

scoring::Reconstruction reconstruct(const model::LatentGaussianModel& lgm,
                                    const std::vector<HyperPoint>& points, int threads) {
    if (points.empty()) throw std::invalid_argument("no hyper points to mix over");
    for (const HyperPoint& pt : points) {
        if (pt.mode.size() != lgm.parameter_count() ||
            pt.marginal_sd.size() != lgm.parameter_count()) {
            throw std::invalid_argument("hyper points do not carry conditionals for this model");
        }
    }
    const int n = lgm.latent_count();
    scoring::Reconstruction rec;
    rec.start_year = lgm.latent_start_year();
    rec.mean.resize(n);
    rec.sd.resize(n);
    rec.q025.resize(n);
    rec.q975.resize(n);
    rec.q10.resize(n);
    rec.q90.resize(n);
    const Eigen::Index np = static_cast<Eigen::Index>(points.size());
    parallel_for(static_cast<std::size_t>(n), resolve_threads(threads),
                 [&](std::size_t t, int) {
                     Eigen::VectorXd means(np), sds(np), weights(np);
                     for (Eigen::Index i = 0; i < np; ++i) {
                         means[i] = points[i].mode[static_cast<Eigen::Index>(t)];
                         sds[i] = points[i].marginal_sd[static_cast<Eigen::Index>(t)];
                         weights[i] = points[i].weight;
                     }
                     const PosteriorMarginal mix(std::move(means), std::move(sds),
                                                 std::move(weights));
                     rec.mean[t] = mix.mean();
                     rec.sd[t] = mix.sd();
                     rec.q025[t] = mix.quantile(0.025);
                     rec.q975[t] = mix.quantile(0.975);
                     rec.q10[t] = mix.quantile(0.10);
                     rec.q90[t] = mix.quantile(0.90);
                 });
    return rec;
}

DensityCurve hyper_marginal(const std::vector<HyperPoint>& points, int hyper, int resolution) {
    if (points.size() < 2) throw std::invalid_argument("need at least two hyper points");
    if (resolution < 16) throw std::invalid_argument("resolution is too coarse");
    const int k = static_cast<int>(points.front().psi.size());
    if (hyper < 0 || hyper >= k) {
        throw std::invalid_argument("unknown hyperparameter id " + std::to_string(hyper));
    }
    if (k > 2) {
        throw std::invalid_argument(
            "smooth hyper marginals are only tabulated for one or two hyperparameters; composite "
            "designs carry integration weights instead");
    }
    double lp_max = -std::numeric_limits<double>::infinity();
    for (const HyperPoint& pt : points) lp_max = std::max(lp_max, pt.log_posterior);

    DensityCurve curve;
    curve.value.resize(resolution);
    curve.density.assign(resolution, 0.0);

    if (k == 1) {
        std::vector<std::pair<double, double>> nodes;
        nodes.reserve(points.size());
        for (const HyperPoint& pt : points) {
            nodes.emplace_back(pt.psi[0], pt.log_posterior - lp_max);
        }
        std::sort(nodes.begin(), nodes.end());
        std::vector<double> xs, ys;
        for (const auto& [x, y] : nodes) {
            xs.push_back(x);
            ys.push_back(y);
        }
        const CubicSpline spline(xs, ys);
        const double dv = (xs.back() - xs.front()) / (resolution - 1);
        for (int i = 0; i < resolution; ++i) {
            curve.value[i] = xs.front() + i * dv;
            curve.density[i] = std::exp(spline(curve.value[i]));
        }
    } else {
        // Recover the rectangular design in z, interpolate the log posterior
        // on a fine z lattice, and bin the mass along the requested psi axis.
        const auto axis_values = [&](int axis) {
            std::vector<double> vals;
            for (const HyperPoint& pt : points) vals.push_back(pt.z[axis]);
            std::sort(vals.begin(), vals.end());
            std::vector<double> unique;
            for (double v : vals) {
                if (unique.empty() || v - unique.back() > 1e-9) unique.push_back(v);
            }
            return unique;
        };
        const std::vector<double> u0 = axis_values(0);
        const std::vector<double> u1 = axis_values(1);
        if (u0.size() < 3 || u1.size() < 3 || u0.size() * u1.size() != points.size()) {
            throw std::invalid_argument("smooth hyper marginals need the dense grid design");
        }
        const auto axis_index = [](const std::vector<double>& axis, double v) {
            const auto it = std::lower_bound(axis.begin(), axis.end(), v - 1e-9);
            return static_cast<std::size_t>(it - axis.begin());
        };
        Eigen::MatrixXd lp(u0.size(), u1.size());
        lp.setConstant(std::numeric_limits<double>::quiet_NaN());
        for (const HyperPoint& pt : points) {
            lp(axis_index(u0, pt.z[0]), axis_index(u1, pt.z[1])) = pt.log_posterior - lp_max;
        }
        if (lp.hasNaN()) {
            throw std::invalid_argument("smooth hyper marginals need the dense grid design");
        }

        // The affine map z -> psi[hyper] is exact; recover it from the points.
        Eigen::MatrixXd design(points.size(), 3);
        Eigen::VectorXd target(points.size());
        for (std::size_t i = 0; i < points.size(); ++i) {
            design(i, 0) = 1.0;
            design(i, 1) = points[i].z[0];
            design(i, 2) = points[i].z[1];
            target[i] = points[i].psi[hyper];
        }
        const Eigen::Vector3d affine = design.colPivHouseholderQr().solve(target);

        std::vector<CubicSpline> row_splines;
        row_splines.reserve(u1.size());
        for (std::size_t j = 0; j < u1.size(); ++j) {
            std::vector<double> ys(u0.size());
            for (std::size_t i = 0; i < u0.size(); ++i) ys[i] = lp(i, j);
            row_splines.emplace_back(u0, ys);
        }

        const std::array<double, 4> corners = {
            affine[0] + affine[1] * u0.front() + affine[2] * u1.front(),
            affine[0] + affine[1] * u0.front() + affine[2] * u1.back(),
            affine[0] + affine[1] * u0.back() + affine[2] * u1.front(),
            affine[0] + affine[1] * u0.back() + affine[2] * u1.back()};
        const double vmin = *std::min_element(corners.begin(), corners.end());
        const double vmax = *std::max_element(corners.begin(), corners.end());
        const double dv = (vmax - vmin) / (resolution - 1);
        for (int i = 0; i < resolution; ++i) curve.value[i] = vmin + i * dv;

        const int fine = 121;
        const double step0 = (u0.back() - u0.front()) / (fine - 1);
        const double step1 = (u1.back() - u1.front()) / (fine - 1);
        std::vector<double> column(u1.size());
        for (int a = 0; a < fine; ++a) {
            const double z0 = u0.front() + a * step0;
            for (std::size_t j = 0; j < u1.size(); ++j) column[j] = row_splines[j](z0);
            const CubicSpline col_spline(u1, column);
            for (int b = 0; b < fine; ++b) {
                const double z1 = u1.front() + b * step1;
                const double mass = std::exp(col_spline(z1));
                const double v = affine[0] + affine[1] * z0 + affine[2] * z1;
                const double pos = (v - vmin) / dv;
                const int bin = std::min(std::max(static_cast<int>(std::floor(pos)), 0),
                                         resolution - 2);
                const double frac = std::min(std::max(pos - bin, 0.0), 1.0);
                curve.density[bin] += mass * (1.0 - frac);
                curve.density[bin + 1] += mass * frac;
            }
        }
    }

    double integral = 0.0;
    const double dv = curve.value[1] - curve.value[0];
    for (int i = 0; i + 1 < resolution; ++i) {
        integral += 0.5 * (curve.density[i] + curve.density[i + 1]) * dv;
    }
    if (!(integral > 0.0)) throw std::runtime_error("hyper marginal density vanished");
    for (double& d : curve.density) d /= integral;
    return curve;
}

}  // namespace paleorec::inla
