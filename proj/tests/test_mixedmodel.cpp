#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "berrypoll/mixedmodel.hpp"
#include "designs.hpp"
#include "oracles.hpp"

using namespace berrypoll;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

std::vector<MatrixXd> dense(const std::vector<IndicatorMatrix>& z) {
    std::vector<MatrixXd> out;
    for (const auto& m : z) out.push_back(m.dense());
    return out;
}

ModelFrame toy_frame() {
    ModelFrame f(8);
    f.add_numeric("y", {1.0, 2.0, 3.0, std::nullopt, 5.0, 6.0, 7.5, 8.0});
    f.add_factor("trt", {"b", "a", "b", "a", "c", "c", "a", "b"});
    f.add_factor("blk", {"1", "1", "2", "2", "3", "3", "4", "4"});
    f.add_factor("one", std::vector<std::string>(8, "x"));
    return f;
}

}  // namespace

TEST(ModelSpec, RejectsEmptyResponseAndDuplicateFactors) {
    EXPECT_THROW((ModelSpec{"", "trt", {}}.validate()), InvalidSpec);
    EXPECT_THROW((ModelSpec{"y", "trt", {"trt"}}.validate()), InvalidSpec);
    EXPECT_THROW((ModelSpec{"y", "trt", {"blk", "blk"}}.validate()), InvalidSpec);
    EXPECT_NO_THROW((ModelSpec{"y", "trt", {"blk"}}.validate()));
}

TEST(BuildDesign, AlphabeticalReferenceAndDroppedRows) {
    const Design d = build_design(toy_frame(), {"y", "trt", {"blk"}});
    EXPECT_EQ(d.dropped_rows, 1u);
    EXPECT_EQ(d.y.size(), 7);
    EXPECT_EQ(d.fixed_levels, (std::vector<std::string>{"a", "b", "c"}));
    EXPECT_EQ(d.beta_names, (std::vector<std::string>{"(intercept)", "trt=b", "trt=c"}));
    EXPECT_EQ(d.X.rows(), 7);
    EXPECT_EQ(d.X.cols(), 3);
    // first kept row is level b
    EXPECT_EQ(d.X(0, 1), 1.0);
    EXPECT_EQ(d.X(0, 2), 0.0);
    ASSERT_EQ(d.Z.size(), 1u);
    EXPECT_EQ(d.Z[0].cols(), 4u);
}

TEST(BuildDesign, ErrorKinds) {
    EXPECT_THROW(build_design(toy_frame(), {"nope", "trt", {}}), UnknownFactor);
    EXPECT_THROW(build_design(toy_frame(), {"y", "nope", {}}), UnknownFactor);
    EXPECT_THROW(build_design(toy_frame(), {"y", "trt", {"nope"}}), UnknownFactor);
    EXPECT_THROW(build_design(toy_frame(), {"y", "one", {}}), SingleLevelFactor);
    EXPECT_THROW(build_design(toy_frame(), {"y", "trt", {"one"}}), SingleLevelFactor);
}

TEST(Reml, RankDeficientDesignIsRejected) {
    MatrixXd x(4, 3);
    x << 1, 1, 1, 1, 1, 1, 1, 0, 0, 1, 0, 0;
    EXPECT_THROW(fit_reml(VectorXd::Ones(4), x, {}), RankDeficientX);
    EXPECT_THROW(fit_reml(VectorXd::Ones(2), MatrixXd::Ones(2, 2), {}), RankDeficientX);
}

TEST(Reml, OlsReductionMatchesQrOracle) {
    Rng rng(11);
    for (int rep = 0; rep < 20; ++rep) {
        const auto p = designs::fixed_only(rng);
        const FitResult f = fit_reml(p.y, p.x, {});
        const oracle::Ols o = oracle::ols(p.y, p.x);
        ASSERT_TRUE(f.converged);
        for (Eigen::Index k = 0; k < o.beta.size(); ++k) EXPECT_LT(oracle::rel_err(f.beta(k), o.beta(k)), 1e-10);
        EXPECT_LT(oracle::rel_err(f.sigma2, o.sigma2), 1e-10);
        EXPECT_EQ(f.n_params, std::size_t(p.x.cols()) + 1);
        const PairwiseTable t = pairwise(f, p.levels);
        std::size_t row = 0;
        for (std::size_t a = 0; a < p.levels.size(); ++a)
            for (std::size_t b = a + 1; b < p.levels.size(); ++b, ++row) {
                const VectorXd c = level_contrast(p.levels.size(), a, b);
                const double se = std::sqrt(c.dot(o.cov * c));
                const double est = c.dot(o.beta);
                EXPECT_LT(oracle::rel_err(t.rows[row].kr_df, o.df), 1e-10);
                EXPECT_LT(oracle::rel_err(t.rows[row].std_error, se), 1e-10);
                EXPECT_LT(oracle::rel_err(t.rows[row].p_value, oracle::t_two_sided(est / se, o.df)), 1e-10);
            }
    }
}

TEST(Reml, BalancedOneWayMatchesAnova) {
    Rng rng(12);
    int checked = 0;
    for (int rep = 0; rep < 50; ++rep) {
        const auto ow = designs::one_way(rng);
        const auto a = oracle::one_way(ow.groups);
        const FitResult f = fit_reml(ow.problem.y, ow.problem.x, ow.problem.z);
        ASSERT_TRUE(f.converged);
        if (a.tau2 >= 0.0) {
            ++checked;
            EXPECT_LT(oracle::rel_err(f.sigma2, a.sigma2), 1e-8) << rep;
            if (a.tau2 > 0.0) EXPECT_LT(oracle::rel_err(f.var_components[0], a.tau2), 1e-8) << rep;
        } else {
            EXPECT_TRUE(f.pinned[0]);
            EXPECT_EQ(f.var_components[0], 0.0);
        }
    }
    EXPECT_GT(checked, 25);
}

TEST(Reml, LoglikMatchesDenseOracleAtRandomPoints) {
    Rng rng(13);
    for (int rep = 0; rep < 64; ++rep) {
        auto r = designs::rcb(rng, 3, 4 + rng.below(4));
        // add a crossed second factor to exercise the multi-component path
        std::vector<std::string> extra;
        for (Eigen::Index i = 0; i < r.problem.y.size(); ++i) extra.push_back(designs::label("d", rng.below(3)));
        r.problem.z.push_back(make_indicator("day", extra));
        VectorXd g0(2), g1(2);
        g0 << rng.uniform(0.0, 5.0), rng.uniform(0.0, 5.0);
        g1 << rng.uniform(0.0, 5.0), rng.uniform(0.0, 5.0);
        const RemlProblem prob(r.problem.x, r.problem.z);
        const auto zd = dense(r.problem.z);
        const double lib = prob.loglik(r.problem.y, g0) - prob.loglik(r.problem.y, g1);
        const double ora = oracle::reml_loglik(r.problem.y, r.problem.x, zd, g0) -
                           oracle::reml_loglik(r.problem.y, r.problem.x, zd, g1);
        EXPECT_NEAR(lib, ora, 1e-8 * (1.0 + std::abs(ora)));
        EXPECT_NEAR(prob.loglik(r.problem.y, g0), oracle::reml_loglik(r.problem.y, r.problem.x, zd, g0), 1e-8);
    }
}

TEST(Reml, MaximumIsNotBeatenByNearbyPoints) {
    Rng rng(14);
    for (int rep = 0; rep < 20; ++rep) {
        auto r = designs::rcb(rng, 4, 6, rng.uniform(0.0, 3.0), 1.0);
        const FitResult f = fit_reml(r.problem.y, r.problem.x, r.problem.z);
        ASSERT_TRUE(f.converged);
        const RemlProblem prob(r.problem.x, r.problem.z);
        const double best = prob.loglik(r.problem.y, f.gamma);
        for (double d : {-1e-3, 1e-3, 0.1}) {
            VectorXd g = f.gamma;
            g(0) = std::max(0.0, g(0) + d);
            EXPECT_LE(prob.loglik(r.problem.y, g), best + 1e-9);
        }
    }
}

TEST(Reml, ScalingResponseScalesEstimates) {
    Rng rng(15);
    auto r = designs::rcb(rng, 4, 8);
    const FitResult f1 = fit_reml(r.problem.y, r.problem.x, r.problem.z);
    const double c = 7.5;
    const FitResult f2 = fit_reml(c * r.problem.y, r.problem.x, r.problem.z);
    EXPECT_LT(oracle::rel_err(f2.sigma2, c * c * f1.sigma2), 1e-7);
    EXPECT_LT(oracle::rel_err(f2.var_components[0], c * c * f1.var_components[0]), 1e-6);
    for (Eigen::Index k = 0; k < f1.beta.size(); ++k) EXPECT_NEAR(f2.beta(k), c * f1.beta(k), 1e-7 * std::abs(c * f1.beta(k)) + 1e-9);
}

TEST(Reml, RowPermutationInvariance) {
    Rng rng(16);
    auto r = designs::rcb(rng, 4, 6);
    const FitResult f1 = fit_reml(r.problem.y, r.problem.x, r.problem.z);
    std::vector<std::size_t> perm(std::size_t(r.problem.y.size()));
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    VectorXd y2(r.problem.y.size());
    MatrixXd x2(r.problem.x.rows(), r.problem.x.cols());
    std::vector<std::string> blk;
    for (std::size_t i = 0; i < perm.size(); ++i) {
        y2(Eigen::Index(i)) = r.problem.y(Eigen::Index(perm[i]));
        x2.row(Eigen::Index(i)) = r.problem.x.row(Eigen::Index(perm[i]));
        blk.push_back(r.problem.z[0].levels[std::size_t(r.problem.z[0].group[perm[i]])]);
    }
    const FitResult f2 = fit_reml(y2, x2, {make_indicator("block", blk)});
    EXPECT_LT(oracle::rel_err(f1.sigma2, f2.sigma2), 1e-8);
    EXPECT_LT(oracle::rel_err(f1.var_components[0], f2.var_components[0]), 1e-7);
}

TEST(Reml, ZeroTrueVarianceHitsBoundaryOften) {
    Rng rng(17);
    int pinned = 0;
    const int reps = 100;
    for (int rep = 0; rep < reps; ++rep) {
        auto r = designs::rcb(rng, 4, 5, 0.0, 1.0);
        const FitResult f = fit_reml(r.problem.y, r.problem.x, r.problem.z);
        ASSERT_TRUE(f.converged);
        if (f.pinned[0]) {
            ++pinned;
            EXPECT_EQ(f.var_components[0], 0.0);
        }
    }
    EXPECT_GE(pinned, 40);
}

TEST(Reml, ZeroResidualFitIsDegenerateButConverged) {
    MatrixXd x = designs::treatment_x({0, 0, 1, 1}, 2);
    VectorXd y(4);
    y << 3, 3, 5, 5;
    const FitResult f = fit_reml(y, x, {make_indicator("b", {"1", "2", "1", "2"})});
    EXPECT_TRUE(f.converged);
    EXPECT_TRUE(f.zero_residual);
    EXPECT_EQ(f.sigma2, 0.0);
    const PairwiseTable t = pairwise(f, std::vector<std::string>{"a", "b"});
    EXPECT_EQ(t.rows[0].p_value, 0.0);
    EXPECT_EQ(t.rows[0].kr_df, 2.0);
}

TEST(KenwardRoger, RcbDfAndPValuesMatchClassical) {
    Rng rng(18);
    for (std::size_t b : {5u, 10u, 20u}) {
        int done = 0;
        while (done < 3) {
            auto r = designs::rcb(rng, 4, b);
            const auto o = oracle::rcb(r.cells);
            if (o.msblock <= o.mse) continue;  // boundary fit pools blocks; the classical analysis does not
            ++done;
            const FitResult f = fit_reml(r.problem.y, r.problem.x, r.problem.z);
            const PairwiseTable t = pairwise(f, r.problem.levels);
            std::size_t row = 0;
            for (std::size_t a = 0; a < 4; ++a)
                for (std::size_t c = a + 1; c < 4; ++c, ++row) {
                    EXPECT_NEAR(t.rows[row].kr_df, o.df, 1e-6 * o.df);
                    EXPECT_NEAR(t.rows[row].p_value, o.p(a, c, b), 1e-6);
                    EXPECT_LT(oracle::rel_err(t.rows[row].std_error, o.se(b)), 1e-6);
                }
        }
    }
}

TEST(KenwardRoger, NoRandomEffectsLeavesCovarianceUnadjusted) {
    Rng rng(19);
    const auto p = designs::fixed_only(rng);
    const FitResult f = fit_reml(p.y, p.x, {});
    const KenwardRoger kr(f);
    EXPECT_LT((kr.adjusted_cov() - kr.unadjusted_cov()).norm(), 1e-10 * kr.unadjusted_cov().norm());
    const KrFTest t = omnibus_test(f);
    EXPECT_NEAR(t.den_df, double(p.x.rows() - p.x.cols()), 1e-8);
    EXPECT_NEAR(t.scale, 1.0, 1e-8);
}

TEST(KenwardRoger, AdjustmentInflatesCovariance) {
    Rng rng(20);
    auto r = designs::rcb(rng, 3, 6);
    // drop one cell so the design is unbalanced
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 1; i < r.problem.y.size(); ++i) keep.push_back(i);
    VectorXd y(Eigen::Index(keep.size()));
    MatrixXd x(Eigen::Index(keep.size()), r.problem.x.cols());
    std::vector<std::string> blk;
    for (std::size_t i = 0; i < keep.size(); ++i) {
        y(Eigen::Index(i)) = r.problem.y(keep[i]);
        x.row(Eigen::Index(i)) = r.problem.x.row(keep[i]);
        blk.push_back(r.problem.z[0].levels[std::size_t(r.problem.z[0].group[std::size_t(keep[i])])]);
    }
    const FitResult f = fit_reml(y, x, {make_indicator("block", blk)});
    ASSERT_FALSE(f.pinned[0]);
    const KenwardRoger kr(f);
    const Eigen::SelfAdjointEigenSolver<MatrixXd> es(kr.adjusted_cov() - kr.unadjusted_cov());
    EXPECT_GT(es.eigenvalues().minCoeff(), -1e-12);
}

TEST(Pairwise, AntisymmetryUnderLevelSwap) {
    Rng rng(21);
    auto r = designs::rcb(rng, 3, 8);
    const FitResult f = fit_reml(r.problem.y, r.problem.x, r.problem.z);
    const KenwardRoger kr(f);
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b) {
            if (a == b) continue;
            const auto ab = kr.contrast(level_contrast(3, a, b));
            const auto ba = kr.contrast(level_contrast(3, b, a));
            EXPECT_DOUBLE_EQ(ab.estimate, -ba.estimate);
            EXPECT_DOUBLE_EQ(ab.adj_std_error, ba.adj_std_error);
            EXPECT_DOUBLE_EQ(ab.df, ba.df);
        }
}

TEST(Pairwise, TukeyAdjustedIsNotSmallerThanRaw) {
    Rng rng(22);
    auto r = designs::rcb(rng, 4, 10);
    const PairwiseTable t = pairwise(fit_reml(r.problem.y, r.problem.x, r.problem.z), r.problem.levels, "trt");
    ASSERT_EQ(t.rows.size(), 6u);
    for (const auto& row : t.rows) {
        EXPECT_GE(row.p_tukey, row.p_value - 1e-12);
        EXPECT_LE(row.ci_lo, row.estimate);
        EXPECT_GE(row.ci_hi, row.estimate);
    }
}

TEST(Pairwise, UnconvergedFitIsRefused) {
    FitResult f;
    f.converged = false;
    EXPECT_THROW(pairwise(f, std::vector<std::string>{"a", "b"}), NotConverged);
}

TEST(Power, DeterministicAcrossJobCounts) {
    Rng rng(23);
    auto r = designs::rcb(rng, 4, 5);
    PowerConfig cfg;
    cfg.beta = VectorXd::Zero(4);
    cfg.beta(1) = 1.5;
    cfg.sigma2 = 1.0;
    cfg.tau2 = {1.0};
    cfg.n_sims = 200;
    cfg.seed = 99;
    const PowerResult a = power_mc(r.problem.x, r.problem.z, cfg);
    cfg.jobs = 3;
    const PowerResult b = power_mc(r.problem.x, r.problem.z, cfg);
    EXPECT_EQ(a.power, b.power);
    EXPECT_EQ(a.failures, b.failures);
    EXPECT_EQ(a.label, "power");
    EXPECT_TRUE(a.valid);
    EXPECT_NEAR(a.mc_std_error, std::sqrt(a.power * (1 - a.power) / double(cfg.n_sims - a.failures)), 1e-15);
}

TEST(Power, RejectsTooFewSimulations) {
    PowerConfig cfg;
    cfg.beta = VectorXd::Zero(2);
    cfg.n_sims = 99;
    EXPECT_THROW(power_mc(designs::treatment_x({0, 0, 1, 1}, 2), {}, cfg), InvalidSpec);
}

TEST(Power, ObservedConfigIsLabelled) {
    Rng rng(24);
    auto r = designs::rcb(rng, 3, 5);
    const FitResult f = fit_reml(r.problem.y, r.problem.x, r.problem.z);
    PowerConfig cfg = observed_power_config(f);
    cfg.n_sims = 100;
    EXPECT_EQ(power_mc(r.problem.x, r.problem.z, cfg).label, "observed power");
}
