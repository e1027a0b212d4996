#pragma once

// Linear mixed models with one categorical fixed factor and independent
// random intercepts, fitted by REML:
//
//   y = X beta + sum_j Z_j u_j + e,   u_j ~ N(0, tau_j^2 I),  e ~ N(0, sigma^2 I)
//
// The optimiser works on variance ratios gamma_j = tau_j^2 / sigma^2 with
// sigma^2 and beta profiled out. All n x n algebra is avoided during fitting:
// with W = Z diag(sqrt(gamma)), H = I + W W' is handled through the q x q
// matrix M = I + W'W (Woodbury / Sylvester), which is cheap because random
// factors here have at most a few hundred levels.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "berrypoll/config.hpp"
#include "berrypoll/dataset.hpp"
#include "berrypoll/distributions.hpp"
#include "berrypoll/errors.hpp"
#include "berrypoll/rng.hpp"

namespace berrypoll {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct ModelSpec {
    std::string response;
    std::string fixed_factor;
    std::vector<std::string> random_factors;

    void validate() const {
        if (response.empty()) throw InvalidSpec("model needs a response");
        if (fixed_factor.empty()) throw InvalidSpec("model needs a fixed factor");
        std::set<std::string> seen;
        for (const auto& r : random_factors) {
            if (r.empty()) throw InvalidSpec("empty random factor name");
            if (r == fixed_factor) throw InvalidSpec("'" + r + "' is both fixed and random");
            if (!seen.insert(r).second) throw InvalidSpec("random factor '" + r + "' listed twice");
        }
    }

    /// Keys: response, fixed, random (repeatable or comma-separated).
    static ModelSpec from_config(const KeyValueConfig& kv) {
        ModelSpec s;
        s.response = kv.get_string("response", "");
        s.fixed_factor = kv.get_string("fixed", "");
        for (const auto& entry : kv.get_all("random"))
            for (const auto& part : split(entry, ','))
                if (!trim(part).empty()) s.random_factors.push_back(trim(part));
        s.validate();
        return s;
    }
};

/// Column store the design builder reads from.
class ModelFrame {
public:
    explicit ModelFrame(std::size_t rows = 0) : rows_(rows) {}

    std::size_t rows() const { return rows_; }

    void add_numeric(const std::string& name, std::vector<std::optional<double>> values) {
        check_length(name, values.size());
        numeric_[name] = std::move(values);
    }
    void add_factor(const std::string& name, std::vector<std::string> values) {
        check_length(name, values.size());
        factors_[name] = std::move(values);
    }

    const std::vector<std::optional<double>>* numeric(const std::string& name) const {
        auto it = numeric_.find(name);
        return it == numeric_.end() ? nullptr : &it->second;
    }
    const std::vector<std::string>* factor(const std::string& name) const {
        auto it = factors_.find(name);
        return it == factors_.end() ? nullptr : &it->second;
    }

    std::vector<std::string> numeric_names() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : numeric_) out.push_back(k);
        return out;
    }
    std::vector<std::string> factor_names() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : factors_) out.push_back(k);
        return out;
    }

private:
    void check_length(const std::string& name, std::size_t n) const {
        if (n != rows_) throw InvalidSpec("column '" + name + "' has " + std::to_string(n) + " rows, frame has " +
                                          std::to_string(rows_));
    }

    std::size_t rows_;
    std::map<std::string, std::vector<std::optional<double>>> numeric_;
    std::map<std::string, std::vector<std::string>> factors_;
};

/// Field columns: numeric mass_g and the front-view imaging variables;
/// factors treatment, plant_id, block_id, harvest_date.
inline ModelFrame to_frame(const std::vector<FieldRecord>& records) {
    const std::size_t n = records.size();
    ModelFrame f(n);
    std::vector<std::string> treatment, plant, block, day;
    for (const auto& r : records) {
        treatment.emplace_back(to_string(r.treatment));
        plant.push_back(std::to_string(r.plant_id));
        block.push_back(std::to_string(r.block_id));
        day.push_back(r.harvest_date.iso());
    }
    f.add_factor("treatment", std::move(treatment));
    f.add_factor("plant_id", std::move(plant));
    f.add_factor("block_id", std::move(block));
    f.add_factor("harvest_date", std::move(day));
    for (auto v : kVariables) {
        std::vector<std::optional<double>> col;
        col.reserve(n);
        for (const auto& r : records) col.push_back(variable_value(r, v));
        f.add_numeric(std::string(to_string(v)), std::move(col));
    }
    return f;
}

/// Lab columns: response_value plus powder_loss_g / particle_count (each
/// missing on rows reporting the other); factors level, trial_id,
/// unit_position (aliases dish_position, slide_position), experiment.
inline ModelFrame to_frame(const std::vector<LabRecord>& records) {
    const std::size_t n = records.size();
    ModelFrame f(n);
    std::vector<std::string> level, trial, pos, exp;
    std::vector<std::optional<double>> value, loss, count;
    for (const auto& r : records) {
        level.push_back(level_label(r.level));
        trial.push_back(std::to_string(r.trial_id));
        pos.push_back(std::to_string(r.unit_position));
        exp.emplace_back(to_string(r.experiment));
        value.emplace_back(r.response_value);
        loss.push_back(r.response_name == LabResponse::PowderLossG ? std::optional(r.response_value) : std::nullopt);
        count.push_back(r.response_name == LabResponse::ParticleCount ? std::optional(r.response_value)
                                                                       : std::nullopt);
    }
    f.add_factor("level", std::move(level));
    f.add_factor("trial_id", std::move(trial));
    f.add_factor("unit_position", pos);
    f.add_factor("dish_position", pos);
    f.add_factor("slide_position", std::move(pos));
    f.add_factor("experiment", std::move(exp));
    f.add_numeric("response_value", std::move(value));
    f.add_numeric("powder_loss_g", std::move(loss));
    f.add_numeric("particle_count", std::move(count));
    return f;
}

/// n x q 0/1 matrix stored as one level index per row.
struct IndicatorMatrix {
    std::string name;
    std::vector<std::string> levels;
    std::vector<int> group;

    std::size_t rows() const { return group.size(); }
    std::size_t cols() const { return levels.size(); }

    MatrixXd dense() const {
        MatrixXd z = MatrixXd::Zero(static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols()));
        for (std::size_t i = 0; i < group.size(); ++i) z(static_cast<Eigen::Index>(i), group[i]) = 1.0;
        return z;
    }

    /// Z' A: sums rows of A by group.
    MatrixXd transpose_times(const MatrixXd& a) const {
        MatrixXd out = MatrixXd::Zero(static_cast<Eigen::Index>(cols()), a.cols());
        for (std::size_t i = 0; i < group.size(); ++i) out.row(group[i]) += a.row(static_cast<Eigen::Index>(i));
        return out;
    }

    /// Z B: expands group rows of B back to observations.
    MatrixXd times(const MatrixXd& b) const {
        MatrixXd out(static_cast<Eigen::Index>(rows()), b.cols());
        for (std::size_t i = 0; i < group.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = b.row(group[i]);
        return out;
    }
};

inline IndicatorMatrix make_indicator(std::string name, const std::vector<std::string>& values) {
    IndicatorMatrix z;
    z.name = std::move(name);
    std::set<std::string> levels(values.begin(), values.end());
    z.levels.assign(levels.begin(), levels.end());
    std::map<std::string, int> code;
    for (std::size_t i = 0; i < z.levels.size(); ++i) code[z.levels[i]] = static_cast<int>(i);
    z.group.reserve(values.size());
    for (const auto& v : values) z.group.push_back(code.at(v));
    return z;
}

struct Design {
    ModelSpec spec;
    VectorXd y;
    MatrixXd X;
    std::vector<std::string> fixed_levels;  ///< alphabetical; [0] is the reference
    std::vector<std::string> beta_names;
    std::vector<IndicatorMatrix> Z;
    std::size_t dropped_rows = 0;
};

/// Intercept plus treatment-contrast dummies for the fixed factor, one
/// indicator matrix per random factor. Rows with a missing response are
/// dropped and counted.
inline Design build_design(const ModelFrame& frame, const ModelSpec& spec) {
    spec.validate();
    const auto* resp = frame.numeric(spec.response);
    if (!resp) throw UnknownFactor("no numeric column '" + spec.response + "'");
    const auto* fixed = frame.factor(spec.fixed_factor);
    if (!fixed) throw UnknownFactor("no factor column '" + spec.fixed_factor + "'");
    std::vector<const std::vector<std::string>*> randoms;
    for (const auto& name : spec.random_factors) {
        const auto* col = frame.factor(name);
        if (!col) throw UnknownFactor("no factor column '" + name + "'");
        randoms.push_back(col);
    }

    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < frame.rows(); ++i)
        if ((*resp)[i] && std::isfinite(*(*resp)[i])) keep.push_back(i);

    Design d;
    d.spec = spec;
    d.dropped_rows = frame.rows() - keep.size();
    const auto n = static_cast<Eigen::Index>(keep.size());
    d.y.resize(n);
    std::vector<std::string> fixed_values;
    for (Eigen::Index i = 0; i < n; ++i) {
        d.y(i) = *(*resp)[keep[static_cast<std::size_t>(i)]];
        fixed_values.push_back((*fixed)[keep[static_cast<std::size_t>(i)]]);
    }
    const IndicatorMatrix fz = make_indicator(spec.fixed_factor, fixed_values);
    if (fz.cols() < 2)
        throw SingleLevelFactor("fixed factor '" + spec.fixed_factor + "' has " + std::to_string(fz.cols()) +
                                " observed level(s)");
    d.fixed_levels = fz.levels;
    const auto p = static_cast<Eigen::Index>(fz.cols());
    d.X = MatrixXd::Zero(n, p);
    d.X.col(0).setOnes();
    for (Eigen::Index i = 0; i < n; ++i)
        if (fz.group[static_cast<std::size_t>(i)] > 0) d.X(i, fz.group[static_cast<std::size_t>(i)]) = 1.0;
    d.beta_names.push_back("(intercept)");
    for (std::size_t k = 1; k < fz.levels.size(); ++k) d.beta_names.push_back(spec.fixed_factor + "=" + fz.levels[k]);

    for (std::size_t j = 0; j < randoms.size(); ++j) {
        std::vector<std::string> values;
        values.reserve(keep.size());
        for (auto i : keep) values.push_back((*randoms[j])[i]);
        IndicatorMatrix z = make_indicator(spec.random_factors[j], values);
        if (z.cols() < 2)
            throw SingleLevelFactor("random factor '" + z.name + "' has " + std::to_string(z.cols()) +
                                    " observed level(s)");
        d.Z.push_back(std::move(z));
    }
    return d;
}

// ---------------------------------------------------------------------------
// REML

struct FitOptions {
    int max_iterations = 500;
    double loglik_tol = 1e-10;
    double gradient_tol = 1e-6;
    double pin_threshold = 1e-10;
};

/// Immutable data a fit was computed from; shared by KR and power code.
struct ModelData {
    VectorXd y;
    MatrixXd X;
    std::vector<IndicatorMatrix> Z;
};

struct FitResult {
    VectorXd beta;
    std::vector<std::string> beta_names;
    double sigma2 = 0.0;
    std::vector<std::string> random_names;
    std::vector<double> var_components;  ///< tau_j^2
    VectorXd gamma;                      ///< tau_j^2 / sigma^2
    std::vector<bool> pinned;            ///< component held at the zero boundary
    MatrixXd beta_cov;
    double reml_loglik = 0.0;
    bool converged = false;
    int iterations = 0;
    std::size_t n_obs = 0;
    std::size_t n_fixed = 0;
    std::size_t n_params = 0;  ///< fixed effects + variance parameters
    bool zero_residual = false;  ///< y lies in the column space of X
    std::shared_ptr<const ModelData> data;
};

/// Cross products that depend only on X and Z, reused across responses.
class RemlProblem {
public:
    RemlProblem(MatrixXd X, std::vector<IndicatorMatrix> Z) : X_(std::move(X)), Z_(std::move(Z)) {
        n_ = X_.rows();
        p_ = X_.cols();
        for (const auto& z : Z_) {
            if (static_cast<Eigen::Index>(z.rows()) != n_) throw InvalidSpec("indicator rows do not match X");
            offsets_.push_back(q_);
            q_ += static_cast<Eigen::Index>(z.cols());
        }
        if (n_ <= p_) throw RankDeficientX("need more observations (" + std::to_string(n_) + ") than fixed effects (" +
                                           std::to_string(p_) + ")");
        Eigen::ColPivHouseholderQR<MatrixXd> qr(X_);
        if (qr.rank() < p_) throw RankDeficientX("X has rank " + std::to_string(qr.rank()) + " < " + std::to_string(p_));

        xtx_ = X_.transpose() * X_;
        c_ = MatrixXd::Zero(q_, q_);
        ztx_ = MatrixXd::Zero(q_, p_);
        for (Eigen::Index i = 0; i < n_; ++i) {
            for (std::size_t j = 0; j < Z_.size(); ++j) {
                const Eigen::Index cj = column(j, i);
                ztx_.row(cj) += X_.row(i);
                for (std::size_t k = 0; k < Z_.size(); ++k) c_(cj, column(k, i)) += 1.0;
            }
        }
    }

    const MatrixXd& X() const { return X_; }
    const std::vector<IndicatorMatrix>& Z() const { return Z_; }
    Eigen::Index n() const { return n_; }
    Eigen::Index p() const { return p_; }
    std::size_t r() const { return Z_.size(); }

    /// Profiled restricted log-likelihood at gamma (no derivatives).
    double loglik(const VectorXd& y, const VectorXd& gamma) const {
        const YStats ys = ystats(y);
        return evaluate(ys, gamma, false).loglik;
    }

    FitResult fit(const VectorXd& y, const FitOptions& opt = {}) const {
        if (y.size() != n_) throw InvalidSpec("response length does not match design");
        if (!y.allFinite()) throw InvalidSpec("response contains non-finite values");
        const YStats ys = ystats(y);
        const auto r = static_cast<Eigen::Index>(Z_.size());

        Eval best;
        int iterations = 0;
        bool converged = true;
        if (r == 0) {
            best = evaluate(ys, VectorXd(0), true);
        } else {
            bool have = false;
            for (double start : {0.0, 1.0, 10.0}) {
                auto [e, its, ok] = maximize(ys, VectorXd::Constant(r, start), opt);
                iterations += its;
                if (e.zero_residual) {
                    best = e;
                    converged = true;
                    have = true;
                    break;
                }
                if (!have || e.loglik > best.loglik + 1e-12 || (ok && !converged && e.loglik >= best.loglik - 1e-12)) {
                    best = e;
                    converged = ok;
                    have = true;
                }
            }
        }
        return make_result(y, best, converged, iterations);
    }

private:
    struct YStats {
        VectorXd zty, xty;
        double yty = 0.0;
    };

    struct Eval {
        VectorXd gamma;
        double loglik = -std::numeric_limits<double>::infinity();
        VectorXd grad, proj_grad;
        MatrixXd hess;
        VectorXd beta;
        MatrixXd a_inv;  ///< (X' H^-1 X)^-1
        double s = 0.0;  ///< y' P y (H scale)
        bool zero_residual = false;
    };

    Eigen::Index column(std::size_t factor, Eigen::Index row) const {
        return offsets_[factor] + Z_[factor].group[static_cast<std::size_t>(row)];
    }

    YStats ystats(const VectorXd& y) const {
        YStats ys;
        ys.xty = X_.transpose() * y;
        ys.yty = y.squaredNorm();
        ys.zty = VectorXd::Zero(q_);
        for (Eigen::Index i = 0; i < n_; ++i)
            for (std::size_t j = 0; j < Z_.size(); ++j) ys.zty(column(j, i)) += y(i);
        return ys;
    }

    Eval evaluate(const YStats& ys, const VectorXd& gamma, bool derivs) const {
        Eval e;
        e.gamma = gamma;
        const auto r = static_cast<Eigen::Index>(Z_.size());
        const double dof = static_cast<double>(n_ - p_);

        MatrixXd a, hx_z, hz_z;  // X'H^-1X, Z'H^-1X, Z'H^-1Z
        VectorXd xhy, zhy;
        double yhy = ys.yty;
        double logdet_h = 0.0;
        if (q_ == 0) {
            a = xtx_;
            xhy = ys.xty;
        } else {
            VectorXd d(q_);
            for (std::size_t j = 0; j < Z_.size(); ++j)
                d.segment(offsets_[j], static_cast<Eigen::Index>(Z_[j].cols()))
                    .setConstant(std::sqrt(std::max(0.0, gamma(static_cast<Eigen::Index>(j)))));
            MatrixXd m = d.asDiagonal() * c_ * d.asDiagonal();
            m.diagonal().array() += 1.0;
            Eigen::LLT<MatrixXd> llt(m);
            logdet_h = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
            // S(B) = D M^-1 D B
            auto s_op = [&](const MatrixXd& b) -> MatrixXd {
                return d.asDiagonal() * llt.solve(d.asDiagonal() * b);
            };
            const MatrixXd s_ztx = s_op(ztx_);
            const VectorXd s_zty = s_op(ys.zty);
            a = xtx_ - ztx_.transpose() * s_ztx;
            xhy = ys.xty - ztx_.transpose() * s_zty;
            yhy = ys.yty - ys.zty.dot(s_zty);
            if (derivs) {
                hx_z = ztx_ - c_ * s_ztx;
                hz_z = c_ - c_ * s_op(c_);
                zhy = ys.zty - c_ * s_zty;
            }
        }
        a = 0.5 * (a + a.transpose());
        Eigen::LLT<MatrixXd> a_llt(a);
        if (a_llt.info() != Eigen::Success) throw RankDeficientX("X' V^-1 X is not positive definite");
        const double logdet_a = 2.0 * a_llt.matrixLLT().diagonal().array().log().sum();
        e.beta = a_llt.solve(xhy);
        e.a_inv = a_llt.solve(MatrixXd::Identity(p_, p_));
        e.s = yhy - xhy.dot(e.beta);

        const double scale = std::max(ys.yty, 1e-300);
        if (e.s <= 1e-24 * scale) {
            e.zero_residual = true;
            e.s = 0.0;
            e.loglik = std::numeric_limits<double>::infinity();
            e.grad = e.proj_grad = VectorXd::Zero(r);
            e.hess = MatrixXd::Zero(r, r);
            return e;
        }
        e.loglik = -0.5 * (dof * (std::log(2.0 * std::numbers::pi * e.s / dof) + 1.0) + logdet_h + logdet_a);
        if (!derivs || r == 0) {
            e.grad = e.proj_grad = VectorXd::Zero(r);
            e.hess = MatrixXd::Zero(r, r);
            return e;
        }

        // G = Z'PZ, u = Z'Py
        const MatrixXd g = hz_z - hx_z * e.a_inv * hx_z.transpose();
        const VectorXd u = zhy - hx_z * e.beta;
        e.grad.resize(r);
        e.hess.resize(r, r);
        std::vector<double> au(static_cast<std::size_t>(r));
        for (Eigen::Index j = 0; j < r; ++j) {
            const Eigen::Index oj = offsets_[static_cast<std::size_t>(j)];
            const auto qj = static_cast<Eigen::Index>(Z_[static_cast<std::size_t>(j)].cols());
            au[static_cast<std::size_t>(j)] = u.segment(oj, qj).squaredNorm();
            e.grad(j) = -0.5 * (g.block(oj, oj, qj, qj).trace() - dof * au[static_cast<std::size_t>(j)] / e.s);
        }
        for (Eigen::Index j = 0; j < r; ++j) {
            const Eigen::Index oj = offsets_[static_cast<std::size_t>(j)];
            const auto qj = static_cast<Eigen::Index>(Z_[static_cast<std::size_t>(j)].cols());
            for (Eigen::Index k = j; k < r; ++k) {
                const Eigen::Index ok = offsets_[static_cast<std::size_t>(k)];
                const auto qk = static_cast<Eigen::Index>(Z_[static_cast<std::size_t>(k)].cols());
                const auto gjk = g.block(oj, ok, qj, qk);
                const double b = u.segment(oj, qj).dot(gjk * u.segment(ok, qk));
                const double h = 0.5 * gjk.squaredNorm() +
                                 0.5 * dof *
                                     (-2.0 * b / e.s +
                                      au[static_cast<std::size_t>(j)] * au[static_cast<std::size_t>(k)] / (e.s * e.s));
                e.hess(j, k) = e.hess(k, j) = h;
            }
        }
        e.proj_grad = e.grad;
        for (Eigen::Index j = 0; j < r; ++j)
            if (gamma(j) <= 0.0 && e.grad(j) < 0.0) e.proj_grad(j) = 0.0;
        return e;
    }

    struct Outcome {
        Eval eval;
        int iterations;
        bool converged;
    };

    // Projected Newton ascent on gamma >= 0 with a modified (eigenvalue
    // floored) Hessian and backtracking; components falling below the pin
    // threshold are set to exactly zero.
    Outcome maximize(const YStats& ys, VectorXd gamma, const FitOptions& opt) const {
        const auto r = gamma.size();
        Eval cur = evaluate(ys, gamma, true);
        if (cur.zero_residual) return {cur, 0, true};
        double last_change = std::numeric_limits<double>::infinity();

        auto project = [&](VectorXd g) {
            for (Eigen::Index j = 0; j < r; ++j)
                if (!(g(j) >= opt.pin_threshold)) g(j) = 0.0;
            return g;
        };

        // Newton and scaled-gradient directions over the free components.
        auto directions = [&](const Eval& e, VectorXd& newton, VectorXd& ascent) {
            newton = VectorXd::Zero(r);
            ascent = VectorXd::Zero(r);
            std::vector<Eigen::Index> free;
            for (Eigen::Index j = 0; j < r; ++j)
                if (e.gamma(j) > 0.0 || e.grad(j) > 0.0) free.push_back(j);
            if (free.empty()) return false;
            const auto nf = static_cast<Eigen::Index>(free.size());
            MatrixXd negh(nf, nf);
            VectorXd gf(nf);
            for (Eigen::Index a = 0; a < nf; ++a) {
                gf(a) = e.grad(free[static_cast<std::size_t>(a)]);
                for (Eigen::Index b = 0; b < nf; ++b)
                    negh(a, b) = -e.hess(free[static_cast<std::size_t>(a)], free[static_cast<std::size_t>(b)]);
            }
            Eigen::SelfAdjointEigenSolver<MatrixXd> es(negh);
            VectorXd ev = es.eigenvalues();
            const double floor = 1e-10 * std::max(1.0, ev.cwiseAbs().maxCoeff());
            for (Eigen::Index k = 0; k < nf; ++k) ev(k) = std::max(std::abs(ev(k)), floor);
            const VectorXd step_f = es.eigenvectors() * (es.eigenvectors().transpose() * gf).cwiseQuotient(ev);
            for (Eigen::Index a = 0; a < nf; ++a) {
                const auto j = free[static_cast<std::size_t>(a)];
                newton(j) = step_f(a);
                ascent(j) = gf(a) / std::max(std::abs(e.hess(j, j)), floor);
            }
            return true;
        };

        // Once converged, a few full Newton steps drive the gradient to
        // rounding level; each is kept only if it shrinks the gradient.
        auto polish = [&](Eval e) {
            VectorXd newton, ascent;
            for (int k = 0; k < 4 && directions(e, newton, ascent); ++k) {
                const VectorXd cand = project(e.gamma + newton);
                if ((cand - e.gamma).cwiseAbs().maxCoeff() == 0.0) break;
                Eval next = evaluate(ys, cand, true);
                if (next.zero_residual || !(next.proj_grad.norm() < e.proj_grad.norm()) ||
                    next.loglik < e.loglik - 1e-9 * (1.0 + std::abs(e.loglik)))
                    break;
                e = std::move(next);
            }
            return e;
        };

        for (int it = 1; it <= opt.max_iterations; ++it) {
            const bool grad_small = cur.proj_grad.norm() < opt.gradient_tol;
            if (grad_small && last_change < opt.loglik_tol) return {polish(std::move(cur)), it - 1, true};

            VectorXd newton, ascent;
            if (!directions(cur, newton, ascent)) return {cur, it - 1, true};

            bool moved = false;
            for (const VectorXd* dir : {&newton, &ascent}) {
                double t = 1.0;
                for (int half = 0; half < 60; ++half, t *= 0.5) {
                    const VectorXd cand = project(cur.gamma + t * (*dir));
                    if ((cand - cur.gamma).cwiseAbs().maxCoeff() == 0.0) break;
                    Eval next = evaluate(ys, cand, true);
                    if (next.zero_residual) return {next, it, true};
                    if (next.loglik > cur.loglik) {
                        last_change = next.loglik - cur.loglik;
                        cur = std::move(next);
                        moved = true;
                        break;
                    }
                }
                if (moved) break;
            }
            if (!moved) {
                // No ascent possible in floating point: a stationary point.
                return {cur, it, cur.proj_grad.norm() < opt.gradient_tol * 1e3};
            }
        }
        return {cur, opt.max_iterations,
                cur.proj_grad.norm() < opt.gradient_tol && last_change < opt.loglik_tol};
    }

    FitResult make_result(const VectorXd& y, const Eval& e, bool converged, int iterations) const {
        FitResult f;
        const auto r = Z_.size();
        const double dof = static_cast<double>(n_ - p_);
        f.beta = e.beta;
        f.sigma2 = e.s / dof;
        f.gamma = e.gamma.size() == static_cast<Eigen::Index>(r) ? e.gamma : VectorXd::Zero(static_cast<Eigen::Index>(r));
        for (std::size_t j = 0; j < r; ++j) {
            f.random_names.push_back(Z_[j].name);
            const double g = f.gamma(static_cast<Eigen::Index>(j));
            f.var_components.push_back(g * f.sigma2);
            f.pinned.push_back(g <= 0.0);
        }
        f.beta_cov = f.sigma2 * e.a_inv;
        f.beta_cov = 0.5 * (f.beta_cov + f.beta_cov.transpose());
        f.zero_residual = e.zero_residual;
        f.reml_loglik = e.loglik;
        f.converged = converged;
        f.iterations = iterations;
        f.n_obs = static_cast<std::size_t>(n_);
        f.n_fixed = static_cast<std::size_t>(p_);
        f.n_params = f.n_fixed + r + 1;
        auto data = std::make_shared<ModelData>();
        data->y = y;
        data->X = X_;
        data->Z = Z_;
        f.data = std::move(data);
        return f;
    }

    MatrixXd X_;
    std::vector<IndicatorMatrix> Z_;
    Eigen::Index n_ = 0, p_ = 0, q_ = 0;
    std::vector<Eigen::Index> offsets_;
    MatrixXd xtx_, c_, ztx_;
};

inline FitResult fit_reml(const VectorXd& y, const MatrixXd& X, const std::vector<IndicatorMatrix>& Z,
                          const FitOptions& opt = {}) {
    return RemlProblem(X, Z).fit(y, opt);
}

inline FitResult fit_reml(const Design& d, const FitOptions& opt = {}) {
    FitResult f = fit_reml(d.y, d.X, d.Z, opt);
    f.beta_names = d.beta_names;
    return f;
}

// ---------------------------------------------------------------------------
// Kenward-Roger

struct KrContrast {
    double estimate = 0.0;
    double adj_std_error = 0.0;
    double df = 0.0;
};

struct KrFTest {
    double f_stat = 0.0;  ///< scaled statistic lambda * F
    double num_df = 0.0;
    double den_df = 0.0;
    double scale = 1.0;
    double p_value = 1.0;
};

/// Small-sample inference for the fixed effects of a converged REML fit:
/// bias-adjusted covariance and moment-matched denominator degrees of
/// freedom. Variance parameters are sigma^2 plus every random component not
/// pinned at zero; V is linear in them so second-derivative terms vanish.
class KenwardRoger {
public:
    explicit KenwardRoger(const FitResult& fit) : beta_(fit.beta) {
        if (!fit.converged) throw NotConverged("Kenward-Roger needs a converged fit");
        const ModelData& d = *fit.data;
        const Eigen::Index n = d.X.rows(), p = d.X.cols();
        phi_ = fit.beta_cov;
        if (fit.zero_residual || fit.sigma2 <= 0.0) {
            phi_adj_ = phi_;
            residual_df_ = static_cast<double>(n - p);
            degenerate_ = true;
            return;
        }
        const double s2 = fit.sigma2;

        // H^-1 = I - Z K Z' with K = D M^-1 D, built entrywise from K.
        std::vector<std::size_t> active;
        std::vector<Eigen::Index> offsets;
        Eigen::Index q = 0;
        for (std::size_t j = 0; j < d.Z.size(); ++j) {
            offsets.push_back(q);
            q += static_cast<Eigen::Index>(d.Z[j].cols());
            if (!fit.pinned[j]) active.push_back(j);
        }
        MatrixXd hinv = MatrixXd::Identity(n, n);
        if (q > 0) {
            MatrixXd c = MatrixXd::Zero(q, q);
            for (Eigen::Index i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d.Z.size(); ++j)
                    for (std::size_t k = 0; k < d.Z.size(); ++k)
                        c(offsets[j] + d.Z[j].group[std::size_t(i)], offsets[k] + d.Z[k].group[std::size_t(i)]) += 1.0;
            VectorXd dd(q);
            for (std::size_t j = 0; j < d.Z.size(); ++j)
                dd.segment(offsets[j], static_cast<Eigen::Index>(d.Z[j].cols()))
                    .setConstant(std::sqrt(std::max(0.0, fit.gamma(static_cast<Eigen::Index>(j)))));
            MatrixXd m = dd.asDiagonal() * c * dd.asDiagonal();
            m.diagonal().array() += 1.0;
            const MatrixXd k = dd.asDiagonal() * Eigen::LLT<MatrixXd>(m).solve(MatrixXd(dd.asDiagonal()));
            // rows of K summed over each observation's columns
            MatrixXd krow = MatrixXd::Zero(n, q);
            for (Eigen::Index i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d.Z.size(); ++j)
                    krow.row(i) += k.row(offsets[j] + d.Z[j].group[std::size_t(i)]);
            for (Eigen::Index b = 0; b < n; ++b)
                for (std::size_t j = 0; j < d.Z.size(); ++j)
                    hinv.col(b) -= krow.col(offsets[j] + d.Z[j].group[std::size_t(b)]);
            hinv = 0.5 * (hinv + hinv.transpose());
        }

        const MatrixXd hx = hinv * d.X;
        const MatrixXd a_inv = (d.X.transpose() * hx).ldlt().solve(MatrixXd::Identity(p, p));
        const MatrixXd ph = hinv - hx * a_inv * hx.transpose();

        // parameter 0 is sigma^2 (V_0 = I); then active random components.
        const std::size_t m = 1 + active.size();
        const double s4 = s2 * s2, s6 = s4 * s2;
        std::vector<MatrixXd> zhx;  // Z_j' H^-1 X
        for (auto j : active) zhx.push_back(d.Z[j].transpose_times(hx));

        p_mats_.resize(m);
        p_mats_[0] = -(hx.transpose() * hx) / s4;
        for (std::size_t a = 1; a < m; ++a) p_mats_[a] = -(zhx[a - 1].transpose() * zhx[a - 1]) / s4;

        // B_i = V_i H^-1 X and H^-1 B_i
        std::vector<MatrixXd> b(m), hb(m);
        b[0] = hx;
        for (std::size_t a = 1; a < m; ++a) b[a] = d.Z[active[a - 1]].times(zhx[a - 1]);
        for (std::size_t a = 0; a < m; ++a) hb[a] = hinv * b[a];

        // expected information of the REML likelihood
        MatrixXd info(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
        std::vector<MatrixXd> pz;  // P_H Z_j (n x q_j)
        for (auto j : active) pz.push_back(d.Z[j].transpose_times(ph).transpose());
        info(0, 0) = 0.5 * ph.squaredNorm() / s4;
        for (std::size_t a = 1; a < m; ++a) {
            info(0, Eigen::Index(a)) = info(Eigen::Index(a), 0) = 0.5 * pz[a - 1].squaredNorm() / s4;
            for (std::size_t c2 = a; c2 < m; ++c2) {
                const MatrixXd zpz = d.Z[active[a - 1]].transpose_times(pz[c2 - 1]);
                info(Eigen::Index(a), Eigen::Index(c2)) = info(Eigen::Index(c2), Eigen::Index(a)) =
                    0.5 * zpz.squaredNorm() / s4;
            }
        }
        w_ = info.completeOrthogonalDecomposition().pseudoInverse();

        MatrixXd lambda = MatrixXd::Zero(p, p);
        for (std::size_t a = 0; a < m; ++a)
            for (std::size_t c2 = 0; c2 < m; ++c2) {
                const MatrixXd qac = b[a].transpose() * hb[c2] / s6;
                lambda += w_(Eigen::Index(a), Eigen::Index(c2)) * (qac - p_mats_[a] * phi_ * p_mats_[c2]);
            }
        phi_adj_ = phi_ + 2.0 * phi_ * lambda * phi_;
        phi_adj_ = 0.5 * (phi_adj_ + phi_adj_.transpose());
    }

    const MatrixXd& adjusted_cov() const { return phi_adj_; }
    const MatrixXd& unadjusted_cov() const { return phi_; }

    /// Wald F test of L' beta = 0 for L of size p x l.
    KrFTest ftest(const MatrixXd& l) const {
        const auto ell = static_cast<double>(l.cols());
        KrFTest out;
        out.num_df = ell;
        const VectorXd lb = l.transpose() * beta_;
        if (degenerate_) {
            out.den_df = residual_df_;
            out.f_stat = lb.cwiseAbs().maxCoeff() <= 1e-9 * (1.0 + beta_.cwiseAbs().maxCoeff())
                             ? 0.0
                             : std::numeric_limits<double>::infinity();
            out.p_value = out.f_stat == 0.0 ? 1.0 : 0.0;
            return out;
        }
        const MatrixXd lpl_adj = l.transpose() * phi_adj_ * l;
        const double f = lb.dot(lpl_adj.ldlt().solve(lb)) / ell;

        const MatrixXd theta = l * (l.transpose() * phi_ * l).ldlt().solve(l.transpose());
        const std::size_t m = p_mats_.size();
        std::vector<MatrixXd> u(m);
        for (std::size_t a = 0; a < m; ++a) u[a] = theta * phi_ * p_mats_[a] * phi_;
        double a1 = 0.0, a2 = 0.0;
        for (std::size_t a = 0; a < m; ++a)
            for (std::size_t c = 0; c < m; ++c) {
                const double w = w_(Eigen::Index(a), Eigen::Index(c));
                a1 += w * u[a].trace() * u[c].trace();
                a2 += w * (u[a] * u[c]).trace();
            }

        double den_df, scale;
        if (l.cols() == 1) {
            den_df = 2.0 / a1;
            scale = 1.0;
        } else {
            const double bb = (a1 + 6.0 * a2) / (2.0 * ell);
            const double g = ((ell + 1.0) * a1 - (ell + 4.0) * a2) / ((ell + 2.0) * a2);
            const double denom = 3.0 * ell + 2.0 * (1.0 - g);
            const double c1 = g / denom, c2 = (ell - g) / denom, c3 = (ell + 2.0 - g) / denom;
            const double e_star = 1.0 / (1.0 - a2 / ell);
            const double v_star = (2.0 / ell) * (1.0 + c1 * bb) / ((1.0 - c2 * bb) * (1.0 - c2 * bb) * (1.0 - c3 * bb));
            const double rho = v_star / (2.0 * e_star * e_star);
            den_df = 4.0 + (ell + 2.0) / (ell * rho - 1.0);
            scale = den_df / (e_star * (den_df - 2.0));
        }
        out.den_df = den_df;
        out.scale = scale;
        out.f_stat = scale * f;
        out.p_value = (den_df > 0.0 && std::isfinite(den_df)) ? dist::f_upper_p(out.f_stat, ell, den_df)
                                                               : std::numeric_limits<double>::quiet_NaN();
        return out;
    }

    KrContrast contrast(const VectorXd& c) const {
        if (c.size() != beta_.size()) throw InvalidSpec("contrast length does not match beta");
        KrContrast out;
        out.estimate = c.dot(beta_);
        out.adj_std_error = std::sqrt(std::max(0.0, c.dot(phi_adj_ * c)));
        if (degenerate_) {
            out.df = residual_df_;
            return out;
        }
        out.df = ftest(MatrixXd(c)).den_df;
        return out;
    }

    bool degenerate() const { return degenerate_; }

private:
    VectorXd beta_;
    MatrixXd phi_, phi_adj_, w_;
    std::vector<MatrixXd> p_mats_;
    double residual_df_ = 0.0;
    bool degenerate_ = false;
};

/// Adjusted standard error and denominator df for one contrast.
inline std::pair<double, double> kr_adjust(const FitResult& fit, const VectorXd& contrast) {
    const KrContrast c = KenwardRoger(fit).contrast(contrast);
    return {c.adj_std_error, c.df};
}

/// Omnibus test that every non-reference level effect is zero.
inline KrFTest omnibus_test(const FitResult& fit) {
    const auto p = fit.beta.size();
    MatrixXd l = MatrixXd::Zero(p, p - 1);
    for (Eigen::Index k = 1; k < p; ++k) l(k, k - 1) = 1.0;
    return KenwardRoger(fit).ftest(l);
}

// ---------------------------------------------------------------------------
// pairwise comparisons

struct PairwiseRow {
    std::string level_a, level_b;
    double estimate = 0.0;  ///< mean(a) - mean(b)
    double std_error = 0.0;
    double kr_df = 0.0;
    double t_value = 0.0;
    double p_value = 1.0;
    double p_tukey = 1.0;
    double ci_lo = 0.0, ci_hi = 0.0;
};

struct PairwiseTable {
    std::string factor;
    double confidence = 0.95;
    std::vector<PairwiseRow> rows;
};

inline VectorXd level_contrast(std::size_t p, std::size_t a, std::size_t b) {
    VectorXd c = VectorXd::Zero(static_cast<Eigen::Index>(p));
    if (a > 0) c(static_cast<Eigen::Index>(a)) += 1.0;
    if (b > 0) c(static_cast<Eigen::Index>(b)) -= 1.0;
    return c;
}

/// All unordered level pairs (a before b in level order) with KR standard
/// errors and df, raw two-sided p, Tukey-adjusted p and 95% intervals.
inline PairwiseTable pairwise(const FitResult& fit, const std::vector<std::string>& levels,
                              const std::string& factor = "", double confidence = 0.95) {
    if (!fit.converged) throw NotConverged("pairwise comparisons need a converged fit");
    if (levels.size() != static_cast<std::size_t>(fit.beta.size()))
        throw InvalidSpec("level count does not match the fixed effects");
    const KenwardRoger kr(fit);
    PairwiseTable t;
    t.factor = factor;
    t.confidence = confidence;
    const auto k = static_cast<int>(levels.size());
    const double scale = 1.0 + fit.beta.cwiseAbs().maxCoeff();
    for (std::size_t a = 0; a < levels.size(); ++a)
        for (std::size_t b = a + 1; b < levels.size(); ++b) {
            const KrContrast c = kr.contrast(level_contrast(levels.size(), a, b));
            PairwiseRow row;
            row.level_a = levels[a];
            row.level_b = levels[b];
            row.estimate = c.estimate;
            row.std_error = c.adj_std_error;
            row.kr_df = c.df;
            if (row.std_error > 0.0) {
                row.t_value = c.estimate / c.adj_std_error;
                row.p_value = dist::t_two_sided_p(row.t_value, c.df);
                row.p_tukey = 1.0 - dist::ptukey(std::abs(row.t_value) * std::numbers::sqrt2, k, c.df);
                const double half = dist::t_quantile(0.5 + confidence / 2.0, c.df) * c.adj_std_error;
                row.ci_lo = c.estimate - half;
                row.ci_hi = c.estimate + half;
            } else {
                const bool null = std::abs(c.estimate) <= 1e-9 * scale;
                if (null) row.estimate = 0.0;
                row.t_value = null ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), c.estimate);
                row.p_value = row.p_tukey = null ? 1.0 : 0.0;
                row.ci_lo = row.ci_hi = row.estimate;
            }
            row.p_tukey = std::clamp(row.p_tukey, 0.0, 1.0);
            t.rows.push_back(row);
        }
    return t;
}

inline PairwiseTable pairwise(const FitResult& fit, const Design& d) {
    return pairwise(fit, d.fixed_levels, d.spec.fixed_factor);
}

// ---------------------------------------------------------------------------
// Monte-Carlo power

struct PowerConfig {
    VectorXd beta;                 ///< fixed effects in design column order
    double sigma2 = 1.0;
    std::vector<double> tau2;      ///< one per random factor
    double alpha = 0.05;
    std::size_t n_sims = 1000;
    std::uint64_t seed = 1;
    unsigned jobs = 1;
    bool observed = false;         ///< effects/variances taken from a fit
};

struct PowerResult {
    double power = 0.0;
    double alpha = 0.05;
    std::size_t n_sims = 0;
    std::uint64_t seed = 0;
    double mc_std_error = 0.0;
    std::size_t failures = 0;
    bool valid = true;  ///< false when more than 5% of replicates failed
    std::string label;  ///< "observed power" or "power"
};

/// Simulated response for replicate `replicate`: random effects factor by
/// factor in level order, then residuals in row order, all drawn from
/// Rng::stream(seed, replicate).
inline VectorXd simulate_response(const MatrixXd& x, const std::vector<IndicatorMatrix>& z, const PowerConfig& cfg,
                                  std::uint64_t replicate) {
    Rng rng = Rng::stream(cfg.seed, replicate);
    VectorXd y = x * cfg.beta;
    for (std::size_t j = 0; j < z.size(); ++j) {
        const double sd = std::sqrt(std::max(0.0, cfg.tau2[j]));
        std::vector<double> u(z[j].cols());
        for (auto& v : u) v = rng.normal() * sd;
        for (std::size_t i = 0; i < z[j].rows(); ++i) y(static_cast<Eigen::Index>(i)) += u[static_cast<std::size_t>(z[j].group[i])];
    }
    const double sd = std::sqrt(std::max(0.0, cfg.sigma2));
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) += rng.normal() * sd;
    return y;
}

/// Fraction of simulated datasets in which the omnibus KR F test of the
/// fixed factor rejects at alpha.
inline PowerResult power_mc(const MatrixXd& x, const std::vector<IndicatorMatrix>& z, const PowerConfig& cfg) {
    if (cfg.n_sims < 100) throw InvalidSpec("n_sims must be at least 100");
    if (cfg.beta.size() != x.cols()) throw InvalidSpec("effect vector length does not match the design");
    if (cfg.tau2.size() != z.size()) throw InvalidSpec("need one variance per random factor");
    if (cfg.sigma2 < 0.0) throw InvalidSpec("variances must be >= 0");
    for (double t : cfg.tau2)
        if (t < 0.0) throw InvalidSpec("variances must be >= 0");
    if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0)) throw InvalidSpec("alpha must be in (0, 1)");

    const RemlProblem problem(x, z);
    enum : std::uint8_t { kFail = 0, kAccept = 1, kReject = 2 };
    std::vector<std::uint8_t> outcome(cfg.n_sims, kFail);
    auto run = [&](std::size_t r) {
        try {
            const FitResult fit = problem.fit(simulate_response(x, z, cfg, r));
            if (!fit.converged) return;
            const KrFTest test = omnibus_test(fit);
            if (std::isnan(test.p_value)) return;
            outcome[r] = test.p_value < cfg.alpha ? kReject : kAccept;
        } catch (const Error&) {
        }
    };
    const unsigned jobs = std::max(1u, std::min<unsigned>(cfg.jobs, static_cast<unsigned>(cfg.n_sims)));
    if (jobs == 1) {
        for (std::size_t r = 0; r < cfg.n_sims; ++r) run(r);
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < jobs; ++t)
            pool.emplace_back([&, t] {
                for (std::size_t r = t; r < cfg.n_sims; r += jobs) run(r);
            });
        for (auto& th : pool) th.join();
    }

    PowerResult out;
    out.alpha = cfg.alpha;
    out.n_sims = cfg.n_sims;
    out.seed = cfg.seed;
    out.label = cfg.observed ? "observed power" : "power";
    std::size_t rejected = 0;
    for (auto o : outcome) {
        if (o == kFail) ++out.failures;
        if (o == kReject) ++rejected;
    }
    const std::size_t used = cfg.n_sims - out.failures;
    out.valid = static_cast<double>(out.failures) <= 0.05 * static_cast<double>(cfg.n_sims);
    out.power = used ? static_cast<double>(rejected) / static_cast<double>(used) : 0.0;
    out.mc_std_error = used ? std::sqrt(out.power * (1.0 - out.power) / static_cast<double>(used)) : 0.0;
    return out;
}

inline PowerResult power_mc(const Design& d, const PowerConfig& cfg) { return power_mc(d.X, d.Z, cfg); }

/// Power configuration that reuses a fit's estimates ("observed power").
inline PowerConfig observed_power_config(const FitResult& fit) {
    PowerConfig cfg;
    cfg.beta = fit.beta;
    cfg.sigma2 = fit.sigma2;
    cfg.tau2 = fit.var_components;
    cfg.observed = true;
    return cfg;
}

}  // namespace berrypoll
