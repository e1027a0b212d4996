#include <gtest/gtest.h>

#include <boost/math/distributions/fisher_f.hpp>

#include <cmath>
#include <set>
#include <sstream>

#include "berrypoll/config.hpp"
#include "berrypoll/distributions.hpp"
#include "berrypoll/rng.hpp"
#include "oracles.hpp"

using namespace berrypoll;

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next();
        EXPECT_EQ(x, b.next());
        EXPECT_NE(x, c.next());
    }
}

TEST(Rng, StreamsAreSeedXorIndex) {
    Rng s = Rng::stream(7, 3), d(7 ^ 3);
    EXPECT_EQ(s.next(), d.next());
}

TEST(Rng, BelowStaysInRangeAndCoversIt) {
    Rng r(1);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 2000; ++i) {
        const auto v = r.below(7);
        ASSERT_LT(v, 7u);
        seen.insert(v);
    }
    EXPECT_EQ(seen.size(), 7u);
}

TEST(Rng, MomentsOfNormalAndPoisson) {
    Rng r(2);
    std::vector<double> n, p;
    for (int i = 0; i < 50000; ++i) {
        n.push_back(r.normal(3.0, 2.0));
        p.push_back(double(r.poisson(5.31)));
    }
    const auto on = oracle::two_pass(n), op = oracle::two_pass(p);
    EXPECT_NEAR(on.mean, 3.0, 0.05);
    EXPECT_NEAR(on.sd, 2.0, 0.05);
    EXPECT_NEAR(op.mean, 5.31, 0.05);
    EXPECT_NEAR(op.sd * op.sd, 5.31, 0.15);
}

TEST(Config, ParsesKeyValuesAndComments) {
    const auto kv = KeyValueConfig::parse_string("# comment\nresponse = mass_g\nrandom = plant_id\nrandom=block_id\n\nppi=300\n");
    EXPECT_EQ(kv.get_string("response", ""), "mass_g");
    EXPECT_EQ(kv.get_all("random"), (std::vector<std::string>{"plant_id", "block_id"}));
    EXPECT_DOUBLE_EQ(kv.get_double("ppi", 0), 300.0);
    EXPECT_EQ(kv.get_int("missing", 9), 9);
    EXPECT_FALSE(kv.has("missing"));
}

TEST(Config, BadNumbersAndLinesAreRejected) {
    EXPECT_THROW(KeyValueConfig::parse_string("ppi=abc\n").get_double("ppi", 0), InvalidSpec);
    EXPECT_THROW(KeyValueConfig::parse_string("just words\n"), InvalidSpec);
    EXPECT_THROW(KeyValueConfig::load("/nonexistent/berrypoll.cfg"), InputMissing);
}

TEST(Config, StringHelpers) {
    EXPECT_EQ(trim("  a b \t"), "a b");
    EXPECT_EQ(split("a,,b", ','), (std::vector<std::string>{"a", "", "b"}));
    EXPECT_EQ(parse_double("1e3"), 1000.0);
    EXPECT_FALSE(parse_double("1.0x"));
    EXPECT_EQ(parse_int("-12"), -12);
    EXPECT_FALSE(parse_int("1.5"));
}

TEST(Distributions, StudentTMatchesBoost) {
    for (double df : {1.0, 3.5, 10.0, 57.0, 400.0})
        for (double t : {0.0, 0.5, 1.96, 4.0, -2.5})
            EXPECT_NEAR(dist::t_two_sided_p(t, df), oracle::t_two_sided(t, df), 1e-14);
    EXPECT_NEAR(dist::t_quantile(0.975, 1e9), 1.959963984540054, 1e-8);
}

TEST(Distributions, FUpperTailMatchesBoost) {
    for (double d1 : {1.0, 3.0})
        for (double d2 : {4.0, 20.5, 200.0})
            for (double f : {0.1, 1.0, 3.0, 9.0}) {
                boost::math::fisher_f fd(d1, d2);
                EXPECT_NEAR(dist::f_upper_p(f, d1, d2), boost::math::cdf(boost::math::complement(fd, f)), 1e-14);
            }
}

TEST(Distributions, StudentizedRangeForTwoGroupsIsATest) {
    // with k = 2 the range of two means is |t| * sqrt(2)
    for (double df : {1.5, 5.0, 12.0, 60.0, 400.0})
        for (double q : {0.5, 2.0, 3.5, 5.0})
            EXPECT_NEAR(dist::ptukey(q, 2, df), 1.0 - oracle::t_two_sided(q / std::sqrt(2.0), df), 1e-9);
}

TEST(Distributions, StudentizedRangeTableValues) {
    // upper 5% points from standard tables
    EXPECT_NEAR(1.0 - dist::ptukey(3.877, 3, 10), 0.05, 2e-4);
    EXPECT_NEAR(1.0 - dist::ptukey(3.958, 4, 20), 0.05, 2e-4);
    EXPECT_NEAR(1.0 - dist::ptukey(3.633, 4, 1e9), 0.05, 2e-4);
    EXPECT_NEAR(1.0 - dist::ptukey(4.302, 6, 30), 0.05, 2e-4);
}
