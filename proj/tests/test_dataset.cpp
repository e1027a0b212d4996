#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "berrypoll/dataset.hpp"
#include "berrypoll/rng.hpp"
#include "oracles.hpp"

using namespace berrypoll;

namespace {

std::string field_csv(const std::vector<std::string>& rows) {
    std::string s(kFieldHeader);
    s += '\n';
    for (const auto& r : rows) s += r + '\n';
    return s;
}

std::vector<FieldRecord> parse_field(const std::string& text, const ExperimentWindow& w = {}) {
    std::istringstream in(text);
    return read_field_csv(in, w);
}

std::vector<LabRecord> parse_lab(const std::vector<std::string>& rows) {
    std::string s(kLabHeader);
    s += '\n';
    for (const auto& r : rows) s += r + '\n';
    std::istringstream in(s);
    return read_lab_csv(in);
}

FieldRecord record(const std::string& id, int plant, Treatment t, double mass) {
    FieldRecord r;
    r.berry_id = id;
    r.plant_id = plant;
    r.block_id = assign_block(plant);
    r.treatment = t;
    r.harvest_date = *Date::parse("2020-07-01");
    r.mass_g = mass;
    return r;
}

}  // namespace

TEST(Blocks, RunsOfFive) {
    EXPECT_EQ(assign_block(1), 1);
    EXPECT_EQ(assign_block(5), 1);
    EXPECT_EQ(assign_block(6), 2);
    EXPECT_EQ(assign_block(100), 20);
    EXPECT_THROW(assign_block(0), OutOfRange);
    EXPECT_THROW(assign_block(101), OutOfRange);
}

TEST(Dates, ParseAndShift) {
    EXPECT_EQ(Date::parse("2020-06-27")->plus_days(4).iso(), "2020-07-01");
    EXPECT_FALSE(Date::parse("2020-02-30"));
    EXPECT_FALSE(Date::parse("2020/06/27"));
    EXPECT_FALSE(Date::parse("20-06-27"));
}

TEST(FieldCsv, ParsesWellFormedRows) {
    const auto recs = parse_field(field_csv({"P001-01,1,1,quad_bees,2020-07-01,12.34,a.png,b.png",
                                             "P007-01,7,2,neither,2020-07-02,3.50,,"}));
    ASSERT_EQ(recs.size(), 2u);
    EXPECT_EQ(recs[0].treatment, Treatment::QuadcopterBees);
    EXPECT_DOUBLE_EQ(recs[0].mass_g, 12.34);
    EXPECT_EQ(recs[1].block_id, 2);
    EXPECT_EQ(recs[1].front_image, "");
}

TEST(FieldCsv, EmptyBodyGivesEmptyList) { EXPECT_TRUE(parse_field(field_csv({})).empty()); }

TEST(FieldCsv, WrongBlockIsRowError) {
    try {
        parse_field(field_csv({"P007-01,7,3,quad,2020-07-01,5.00,,"}));
        FAIL();
    } catch (const RowError& e) {
        EXPECT_EQ(e.row(), 1u);
        EXPECT_EQ(e.field(), "block_id");
    }
}

TEST(FieldCsv, ValidationFailures) {
    auto fails_on = [](const std::string& row, const std::string& field) {
        try {
            parse_field(field_csv({row}));
        } catch (const RowError& e) {
            return e.field() == field;
        }
        return false;
    };
    EXPECT_TRUE(fails_on("P1,101,21,quad,2020-07-01,5.00,,", "plant_id"));
    EXPECT_TRUE(fails_on("P1,1,1,drone,2020-07-01,5.00,,", "treatment"));
    EXPECT_TRUE(fails_on("P1,1,1,quad,2020-13-01,5.00,,", "harvest_date"));
    EXPECT_TRUE(fails_on("P1,1,1,quad,2020-07-01,-1.00,,", "mass_g"));
    EXPECT_TRUE(fails_on("P1,1,1,quad,2020-07-01,1.234,,", "mass_g"));
    EXPECT_TRUE(fails_on("P1,1,1,quad,2020-07-01,abc,,", "mass_g"));
    EXPECT_TRUE(fails_on(",1,1,quad,2020-07-01,1.00,,", "berry_id"));
    EXPECT_THROW(parse_field(field_csv({"P1,1,1,quad,2020-07-01,1.00,,", "P1,2,1,quad,2020-07-01,1.00,,"})), RowError);
    EXPECT_THROW(parse_field("berry_id,plant\nx,1\n"), SchemaError);
}

TEST(FieldCsv, ExperimentWindowIsEnforced) {
    ExperimentWindow w{Date::parse("2020-06-27"), Date::parse("2020-07-08")};
    EXPECT_NO_THROW(parse_field(field_csv({"P1,1,1,quad,2020-07-08,1.00,,"}), w));
    EXPECT_THROW(parse_field(field_csv({"P1,1,1,quad,2020-07-09,1.00,,"}), w), RowError);
}

TEST(FieldCsv, RoundTrip) {
    Rng rng(3);
    std::vector<FieldRecord> recs;
    for (int i = 0; i < 300; ++i) {
        const int plant = 1 + int(rng.below(100));
        auto r = record("B" + std::to_string(i), plant, kTreatments[rng.below(4)], double(rng.below(4000)) / 100.0);
        r.harvest_date = Date::parse("2020-06-27")->plus_days(int(rng.below(12)));
        r.front_image = "f" + std::to_string(i) + ".png";
        recs.push_back(r);
    }
    std::ostringstream out;
    write_field_csv(out, recs);
    const auto back = parse_field(out.str());
    ASSERT_EQ(back.size(), recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        EXPECT_EQ(back[i].berry_id, recs[i].berry_id);
        EXPECT_EQ(back[i].plant_id, recs[i].plant_id);
        EXPECT_EQ(back[i].treatment, recs[i].treatment);
        EXPECT_EQ(back[i].harvest_date, recs[i].harvest_date);
        EXPECT_DOUBLE_EQ(back[i].mass_g, recs[i].mass_g);
        EXPECT_EQ(back[i].front_image, recs[i].front_image);
    }
    std::ostringstream again;
    write_field_csv(again, back);
    EXPECT_EQ(again.str(), out.str());
}

TEST(LabCsv, LevelsAndConsistency) {
    const auto recs = parse_lab({"pattern,1,hover,slide,3,particle_count,17", "height,2,1.2,dish,1,powder_loss_g,0.0312"});
    ASSERT_EQ(recs.size(), 2u);
    EXPECT_EQ(std::get<FlightPattern>(recs[0].level), FlightPattern::Hover);
    EXPECT_DOUBLE_EQ(std::get<double>(recs[1].level), 1.2);
    EXPECT_THROW(parse_lab({"height,1,0.6,dish,1,particle_count,3"}), RowError);
    EXPECT_THROW(parse_lab({"pattern,1,loop,slide,1,particle_count,3"}), RowError);
    EXPECT_THROW(parse_lab({"pattern,1,hover,slide,1,particle_count,3.5"}), RowError);
    EXPECT_THROW(parse_lab({"height,0,0.6,dish,1,powder_loss_g,0.1"}), RowError);

    std::ostringstream out;
    write_lab_csv(out, recs);
    std::istringstream in(out.str());
    const auto back = read_lab_csv(in);
    EXPECT_EQ(level_label(back[1].level), "1.2");
    EXPECT_EQ(back[0].response_value, 17.0);
}

TEST(Metrics, CsvRoundTripAndJoin) {
    MetricsRow m;
    m.berry_id = "A";
    m.view = "front";
    m.metrics.morphology = {0.5, 3.25, 2.0, 5.0};
    m.metrics.achenes.count = 1;
    m.metrics.achenes.size_mean_px = 8.5;
    std::ostringstream out;
    write_metrics_header(out);
    write_metrics_row(out, m);
    std::istringstream in(out.str());
    const auto rows = read_metrics_csv(in);
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].metrics.achenes.size_mean_px, 8.5);
    EXPECT_FALSE(rows[0].metrics.achenes.size_std_px);
    EXPECT_FALSE(rows[0].metrics.achenes.nn_dist_mean_px);

    std::vector<FieldRecord> recs{record("A", 1, Treatment::Bees, 1.0)};
    join_metrics(recs, rows);
    ASSERT_TRUE(recs[0].front_metrics);
    EXPECT_DOUBLE_EQ(*variable_value(recs[0], Variable::Symmetry), 3.25);
    EXPECT_FALSE(variable_value(recs[0], Variable::AcheneDistance));

    auto stray = rows;
    stray[0].berry_id = "ZZ";
    try {
        join_metrics(recs, stray);
        FAIL();
    } catch (const JoinError& e) {
        EXPECT_NE(std::string(e.what()).find("ZZ"), std::string::npos);
    }
}

TEST(Summaries, ConstantGroup) {
    std::vector<FieldRecord> recs;
    for (auto t : kTreatments)
        for (int i = 0; i < 4; ++i) recs.push_back(record(std::string(to_string(t)) + std::to_string(i), 1 + i, t, 10.0));
    for (const auto& g : summarize(recs)) {
        EXPECT_EQ(g.n, 4u);
        EXPECT_DOUBLE_EQ(g.get(Variable::Mass)->mean, 10.0);
        EXPECT_DOUBLE_EQ(*g.get(Variable::Mass)->std, 0.0);
        EXPECT_FALSE(g.get(Variable::Area));
    }
}

TEST(Summaries, MissingGroupIsEmptyGroupError) {
    EXPECT_THROW(summarize({record("a", 1, Treatment::Bees, 1.0)}), EmptyGroup);
}

TEST(Summaries, MatchTwoPassOracleAndIgnoreOrder) {
    Rng rng(4);
    std::vector<FieldRecord> recs;
    std::map<Treatment, std::vector<double>> by;
    for (auto t : kTreatments)
        for (int i = 0; i < 1000; ++i) {
            const double m = std::max(0.0, rng.normal(12.0 + 1e6 * (t == Treatment::Bees), 6.0));
            recs.push_back(record(std::string(to_string(t)) + std::to_string(i), 1 + i % 100, t, m));
            by[t].push_back(m);
        }
    const auto s1 = summarize(recs);
    for (const auto& g : s1) {
        const auto o = oracle::two_pass(by[g.treatment]);
        EXPECT_LT(oracle::rel_err(g.get(Variable::Mass)->mean, o.mean), 1e-12);
        EXPECT_LT(oracle::rel_err(*g.get(Variable::Mass)->std, o.sd), 1e-9);
    }
    std::shuffle(recs.begin(), recs.end(), rng);
    const auto s2 = summarize(recs);
    for (std::size_t i = 0; i < s1.size(); ++i) {
        EXPECT_EQ(s1[i].get(Variable::Mass)->mean, s2[i].get(Variable::Mass)->mean);
        EXPECT_EQ(s1[i].get(Variable::Mass)->std, s2[i].get(Variable::Mass)->std);
    }
}

TEST(Boxplot, SmallExactCases) {
    const BoxplotStats b = boxplot({5, 3, 1, 4, 2});
    EXPECT_DOUBLE_EQ(b.q1, 2.0);
    EXPECT_DOUBLE_EQ(b.median, 3.0);
    EXPECT_DOUBLE_EQ(b.q3, 4.0);
    EXPECT_TRUE(b.outliers.empty());
    EXPECT_DOUBLE_EQ(b.whisker_lo, 1.0);
    EXPECT_DOUBLE_EQ(b.whisker_hi, 5.0);

    const BoxplotStats c = boxplot({1, 2, 3, 4, 100});
    EXPECT_EQ(c.outliers, std::vector<double>{100.0});
    EXPECT_DOUBLE_EQ(c.whisker_hi, 4.0);
    EXPECT_THROW(boxplot({}), EmptyGroup);
}

TEST(Boxplot, OrderingChainHoldsOnRandomSamples) {
    Rng rng(5);
    for (int rep = 0; rep < 500; ++rep) {
        std::vector<double> v(1 + rng.below(40));
        for (auto& x : v) x = rng.uniform() < 0.1 ? rng.normal(0, 50) : rng.normal(0, 1);
        const BoxplotStats b = boxplot(v);
        EXPECT_LE(b.min, b.whisker_lo);
        EXPECT_LE(b.whisker_lo, b.q1);
        EXPECT_LE(b.q1, b.median);
        EXPECT_LE(b.median, b.q3);
        EXPECT_LE(b.q3, b.whisker_hi);
        EXPECT_LE(b.whisker_hi, b.max);
    }
}
