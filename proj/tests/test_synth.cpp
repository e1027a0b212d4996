#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "berrypoll/imaging.hpp"
#include "berrypoll/mixedmodel.hpp"
#include "berrypoll/synth.hpp"
#include "oracles.hpp"

using namespace berrypoll;

TEST(SynthBerry, SameSeedSameImage) {
    Rng rng(5);
    const auto s = random_berry_spec(rng, 77);
    const auto a = gen_berry(s), b = gen_berry(s);
    EXPECT_TRUE(a.image == b.image);
    auto t = s;
    t.seed = 78;
    EXPECT_FALSE(gen_berry(t).image == a.image);
}

TEST(SynthBerry, TruthAreaMatchesRenderedMask) {
    Rng rng(11);
    for (int i = 0; i < 30; ++i) {
        const auto s = random_berry_spec(rng, std::uint64_t(i));
        const auto b = gen_berry(s);
        const double rendered = double(b.truth.mask.pixel_count()) / (s.ppi * s.ppi);
        EXPECT_LT(oracle::rel_err(rendered, b.truth.area_in2), 0.01) << "spec " << i;
    }
}

TEST(SynthBerry, TruthSymmetryFollowsSkew) {
    SynthBerrySpec s;
    EXPECT_DOUBLE_EQ(gen_berry(s).truth.symmetry_pct, 0.0);
    s.skew = 0.1;
    EXPECT_NEAR(gen_berry(s).truth.symmetry_pct, 100.0 * 0.1 / 1.05, 1e-12);
}

TEST(SynthBerry, SymmetricBlankBerryMeasuresSymmetric) {
    Rng rng(3);
    for (int i = 0; i < 10; ++i) {
        SynthBerrySpec s;
        s.semi_major_px = rng.uniform(90, 130);
        s.semi_minor_px = s.semi_major_px / rng.uniform(1.25, 1.6);
        s.orientation_deg = rng.uniform(-60, 60);
        s.hue_std_deg = 5.0;
        s.seed = std::uint64_t(i);
        const auto b = gen_berry(s);
        ImagingConfig cfg;
        cfg.ppi = s.ppi;
        const auto r = analyze_image(b.image, cfg);
        EXPECT_LT(r.morphology.symmetry_pct, 0.5) << "spec " << i;
        EXPECT_EQ(r.achenes.count, 0u);
    }
}

TEST(SynthBerry, GridLayoutHasExactSpacing) {
    SynthBerrySpec s;
    s.semi_major_px = 160;
    s.semi_minor_px = 140;
    s.achene_count = 100;
    s.layout = AcheneLayout::Grid;
    s.grid_pitch_px = 20;
    s.achene_diameter_px = 8;
    const auto b = gen_berry(s);
    ASSERT_EQ(b.truth.achene_centers.size(), 100u);
    for (double d : oracle::nn_brute(b.truth.achene_centers)) EXPECT_EQ(d, 20.0);

    ImagingConfig cfg;
    cfg.ppi = s.ppi;
    const auto r = analyze_image(b.image, cfg);
    EXPECT_EQ(r.achenes.count, 100u);
    ASSERT_TRUE(r.achenes.nn_dist_mean_px);
    EXPECT_NEAR(*r.achenes.nn_dist_mean_px, 20.0, 1e-9);
    EXPECT_NEAR(*r.achenes.nn_dist_std_px, 0.0, 1e-9);
}

TEST(SynthBerry, OverfullLayoutsAreRejected) {
    SynthBerrySpec s;
    s.achene_count = 9;
    s.layout = AcheneLayout::Grid;
    s.grid_pitch_px = 9;  // below diameter + 3
    EXPECT_THROW(gen_berry(s), LayoutOverflow);
    s.grid_pitch_px = 80;  // corners of a 3x3 grid at pitch 80 leave the 120x90 ellipse
    EXPECT_THROW(gen_berry(s), LayoutOverflow);
    s.layout = AcheneLayout::Poisson;
    s.achene_count = 600;
    EXPECT_THROW(gen_berry(s), LayoutOverflow);
}

TEST(SynthBerry, DetectorWarnings) {
    SynthBerrySpec s;
    s.achene_count = 3;
    s.achene_diameter_px = 3;
    EXPECT_EQ(detector_warnings(s).size(), 1u);
    s.achene_diameter_px = 8;
    EXPECT_TRUE(detector_warnings(s).empty());
    s.achene_count = 0;
    s.achene_diameter_px = 3;
    EXPECT_TRUE(detector_warnings(s).empty());
}

TEST(SynthBerry, FieldRecordSpecsRenderAtCommonResolutions) {
    SynthDatasetSpec ds;
    ds.seed = 4;
    const auto data = gen_dataset(ds);
    for (double ppi : {100.0, 300.0})
        for (std::size_t i = 0; i < data.field.size(); i += 5)
            for (bool side : {false, true}) {
                const auto s = berry_spec_for_record(data.field[i], side, ppi, i);
                EXPECT_NO_THROW(gen_berry(s)) << "record " << i << " ppi " << ppi;
            }
}

TEST(SynthDataset, FieldDesignShape) {
    SynthDatasetSpec s;
    s.seed = 9;
    const auto d = gen_dataset(s);
    std::map<std::string, std::set<int>> per_treatment;
    std::map<int, std::set<std::string>> per_block;
    std::map<int, std::set<int>> block_plants;
    for (const auto& r : d.field) {
        per_treatment[std::string(to_string(r.treatment))].insert(r.plant_id);
        per_block[r.block_id].insert(std::string(to_string(r.treatment)));
        block_plants[r.block_id].insert(r.plant_id);
        EXPECT_EQ(r.block_id, assign_block(r.plant_id));
        EXPECT_GE(r.harvest_date, s.start_date);
        EXPECT_LT(r.harvest_date, s.start_date.plus_days(s.n_days));
    }
    // plants with zero berries drop out, so allow a little slack
    ASSERT_EQ(per_treatment.size(), 4u);
    for (const auto& [t, plants] : per_treatment) EXPECT_GE(plants.size(), 22u) << t;
    EXPECT_EQ(per_block.size(), 20u);

    Rng rng(1);
    const auto tr = assign_treatments(100, rng);
    std::map<Treatment, int> counts;
    for (int b = 0; b < 20; ++b) {
        std::set<Treatment> seen(tr.begin() + 5 * b, tr.begin() + 5 * b + 5);
        EXPECT_EQ(seen.size(), 4u);
    }
    for (auto t : tr) ++counts[t];
    for (auto t : kTreatments) EXPECT_EQ(counts[t], 25);
}

TEST(SynthDataset, ZeroVarianceGivesTheIntercept) {
    SynthDatasetSpec s;
    s.primary = {13.5, {}, {}, 0.0};
    for (const auto& r : gen_dataset(s).field) EXPECT_DOUBLE_EQ(r.mass_g, 13.5);
    s.design = DesignKind::LabHeight;
    s.primary = {0.8, {}, {}, 0.0};
    s.counts = {40, {}, {}, 0.0};
    for (const auto& r : gen_dataset(s).lab)
        EXPECT_DOUBLE_EQ(r.response_value, r.response_name == LabResponse::PowderLossG ? 0.8 : 40.0);
}

TEST(SynthDataset, EffectsShiftTheirLevel) {
    SynthDatasetSpec s;
    s.primary = {10.0, {{"quad", 2.5}}, {}, 0.0};
    for (const auto& r : gen_dataset(s).field)
        EXPECT_DOUBLE_EQ(r.mass_g, r.treatment == Treatment::Quadcopter ? 12.5 : 10.0);
}

TEST(SynthDataset, LabRecordCounts) {
    SynthDatasetSpec s;
    s.design = DesignKind::LabPattern;
    s.trials = 2;
    s.dishes = 3;
    s.slides = 2;
    const auto d = gen_dataset(s);
    EXPECT_EQ(d.lab.size(), std::size_t(2 * 3 * (3 + 2)));
    EXPECT_TRUE(d.field.empty());
    std::size_t dishes = 0;
    for (const auto& r : d.lab) {
        EXPECT_EQ(r.experiment, LabExperiment::Pattern);
        if (r.unit_kind == UnitKind::Dish) {
            ++dishes;
            EXPECT_EQ(r.response_name, LabResponse::PowderLossG);
        } else {
            EXPECT_EQ(r.response_value, std::round(r.response_value));
        }
    }
    EXPECT_EQ(dishes, 18u);
}

TEST(SynthDataset, SameSeedSameRecords) {
    SynthDatasetSpec s;
    s.seed = 21;
    s.primary.variances = {{"plant_id", 2.0}, {"harvest_date", 1.0}};
    const auto a = gen_dataset(s), b = gen_dataset(s);
    ASSERT_EQ(a.field.size(), b.field.size());
    for (std::size_t i = 0; i < a.field.size(); ++i) {
        EXPECT_EQ(a.field[i].berry_id, b.field[i].berry_id);
        EXPECT_EQ(a.field[i].mass_g, b.field[i].mass_g);
    }
    EXPECT_EQ(a.random_effects, b.random_effects);
}

TEST(SynthDataset, RemlRecoversVarianceComponents) {
    // 100 plants, about 20 berries each, tau^2 = 4 and sigma^2 = 9
    double tau = 0, sig = 0;
    const int reps = 8;
    for (int k = 0; k < reps; ++k) {
        SynthDatasetSpec s;
        s.seed = 100 + std::uint64_t(k);
        s.berries_per_plant = 20;
        s.primary = {40.0, {}, {{"plant_id", 4.0}}, 9.0};
        const auto d = gen_dataset(s);
        const auto fit = fit_reml(build_design(to_frame(d.field), {"mass_g", "treatment", {"plant_id"}}));
        ASSERT_TRUE(fit.converged);
        tau += fit.var_components[0] / reps;
        sig += fit.sigma2 / reps;
    }
    EXPECT_LT(oracle::rel_err(tau, 4.0), 0.15);
    EXPECT_LT(oracle::rel_err(sig, 9.0), 0.05);
}

TEST(SynthDataset, ConfigKeys) {
    const auto kv = KeyValueConfig::parse_string(
        "design = lab_height\nlevels = 0.5, 1.0\ntrials = 2\neffect.0.5 = 0.3\nvariance.trial_id = 0.01\n"
        "count_intercept = 55\nseed = 8\n");
    const auto s = SynthDatasetSpec::from_config(kv);
    EXPECT_EQ(s.design, DesignKind::LabHeight);
    EXPECT_EQ(s.levels.size(), 2u);
    EXPECT_EQ(s.trials, 2);
    EXPECT_DOUBLE_EQ(s.primary.effect("0.5"), 0.3);
    EXPECT_DOUBLE_EQ(s.primary.variance("trial_id"), 0.01);
    EXPECT_DOUBLE_EQ(s.counts.intercept, 55.0);
    EXPECT_EQ(s.seed, 8u);
}

TEST(SynthDataset, ConfigErrors) {
    auto bad = [](const std::string& text) { return SynthDatasetSpec::from_config(KeyValueConfig::parse_string(text)); };
    EXPECT_THROW(bad("design = orchard\n"), InvalidSpec);
    EXPECT_THROW(bad("n_plants = 7\n"), InvalidSpec);
    EXPECT_THROW(bad("n_plants = 105\n"), InvalidSpec);
    EXPECT_THROW(bad("sigma2 = -1\n"), InvalidSpec);
    EXPECT_THROW(bad("variance.plant_id = -0.5\n"), InvalidSpec);
    EXPECT_THROW(bad("design = lab_pattern\nlevels = 0.6\n"), InvalidSpec);
    EXPECT_THROW(bad("design = lab_height\nlevels = hover\n"), InvalidSpec);
    EXPECT_THROW(bad("start_date = 27/06/2020\n"), InvalidSpec);
    EXPECT_THROW(bad("design = lab_height\ndishes = 0\n"), InvalidSpec);
}
