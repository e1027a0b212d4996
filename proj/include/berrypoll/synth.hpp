#pragma once

// Synthetic berries with exact ground truth, and simulated experiment
// datasets drawn from the mixed model the analysis assumes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "berrypoll/config.hpp"
#include "berrypoll/dataset.hpp"
#include "berrypoll/errors.hpp"
#include "berrypoll/imaging.hpp"
#include "berrypoll/rng.hpp"

namespace berrypoll {

inline Rgb hsv_to_rgb(double h_deg, double s, double v) {
    h_deg = std::fmod(h_deg, 360.0);
    if (h_deg < 0.0) h_deg += 360.0;
    const double c = v * s;
    const double hp = h_deg / 60.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(hp)) {
        case 0: r = c, g = x; break;
        case 1: r = x, g = c; break;
        case 2: g = c, b = x; break;
        case 3: g = x, b = c; break;
        case 4: r = x, b = c; break;
        default: r = c, b = x; break;
    }
    const double m = v - c;
    auto q = [m](double t) { return static_cast<std::uint8_t>(std::clamp(std::lround((t + m) * 255.0), 0L, 255L)); };
    return {q(r), q(g), q(b)};
}

// ---------------------------------------------------------------------------
// berries

enum class AcheneLayout { Grid, Poisson };

struct SynthBerrySpec {
    double semi_major_px = 120.0;  ///< along the stem-bottom axis
    double semi_minor_px = 90.0;
    double orientation_deg = 0.0;  ///< clockwise from vertical, calyx end up
    double skew = 0.0;             ///< right half is (1 + skew) times wider
    double base_hue_deg = 0.0;
    double hue_std_deg = 0.0;
    int achene_count = 0;
    double achene_diameter_px = 8.0;
    AcheneLayout layout = AcheneLayout::Poisson;
    double grid_pitch_px = 20.0;
    bool calyx = false;
    Rgb backdrop{240, 240, 240};
    double ppi = 300.0;
    int margin_px = 24;
    std::uint64_t seed = 1;

    void validate() const {
        if (!(semi_major_px > 0.0) || !(semi_minor_px > 0.0)) throw InvalidSpec("ellipse axes must be positive");
        if (!(skew > -1.0)) throw InvalidSpec("skew must exceed -1");
        if (achene_count < 0) throw InvalidSpec("achene count must be >= 0");
        if (achene_count > 0 && !(achene_diameter_px >= 1.0)) throw InvalidSpec("achene diameter must be >= 1 px");
        if (layout == AcheneLayout::Grid && !(grid_pitch_px > 0.0)) throw InvalidSpec("grid pitch must be positive");
        if (!(hue_std_deg >= 0.0)) throw InvalidSpec("hue std must be >= 0");
        if (!(ppi > 0.0)) throw InvalidSpec("ppi must be positive");
        if (margin_px < 2) throw InvalidSpec("margin must be at least 2 px");
    }
};

struct GroundTruth {
    BerryMask mask;
    double orientation_deg = 0.0;  ///< normalised to (-90, 90]
    PointD center;
    PointD stem_point;  ///< calyx end of the axis
    double area_in2 = 0.0;  ///< analytic, from the continuous outline
    double symmetry_pct = 0.0;
    std::vector<PointD> achene_centers;
    std::vector<double> achene_diameters_px;  ///< equivalent diameter of each rendered disk
};

struct SynthBerry {
    RasterImage image;
    GroundTruth truth;
};

/// Warnings for achene sizes the default detector would not accept.
inline std::vector<std::string> detector_warnings(const SynthBerrySpec& s, const AcheneConfig& cfg = {}) {
    std::vector<std::string> out;
    if (s.achene_count > 0 && (s.achene_diameter_px < cfg.d_min || s.achene_diameter_px > cfg.d_max)) {
        out.push_back("achene diameter " + format_shortest(s.achene_diameter_px) + " px is outside the detector range [" +
                      format_shortest(cfg.d_min) + ", " + format_shortest(cfg.d_max) + "]");
    }
    return out;
}

namespace detail {

inline double wrap_orientation(double deg) {
    while (deg > 90.0) deg -= 180.0;
    while (deg <= -90.0) deg += 180.0;
    return deg;
}

/// Pixel offsets of a digital disk of the given diameter centred on a pixel.
inline std::vector<std::pair<int, int>> disk_offsets(double diameter) {
    const double r = diameter / 2.0;
    const int ri = static_cast<int>(std::ceil(r));
    std::vector<std::pair<int, int>> out;
    for (int dy = -ri; dy <= ri; ++dy)
        for (int dx = -ri; dx <= ri; ++dx)
            if (dx * dx + dy * dy <= r * r) out.emplace_back(dx, dy);
    return out;
}

}  // namespace detail

/// Flat-shaded berry: an ellipse in the berry's own frame (u toward the
/// calyx, v to the right) whose right half is widened by `skew`. The image is
/// square with an even side and the ellipse centred on a pixel.
inline SynthBerry gen_berry(const SynthBerrySpec& s) {
    s.validate();
    const double a = s.semi_major_px;
    const double b_left = s.semi_minor_px;
    const double b_right = s.semi_minor_px * (1.0 + s.skew);
    const double reach = std::max({a, b_left, b_right});
    int size = 2 * (static_cast<int>(std::ceil(reach)) + s.margin_px);
    size += size % 2;
    const int c = size / 2;

    const double th = s.orientation_deg * std::numbers::pi / 180.0;
    const PointD up{std::sin(th), -std::cos(th)};
    const PointD right{std::cos(th), std::sin(th)};
    const double calyx_u = a * 0.82;

    auto frame = [&](double x, double y) {
        const double dx = x - c, dy = y - c;
        return std::pair(dx * up.x + dy * up.y, dx * right.x + dy * right.y);
    };
    auto inside = [&](double x, double y) {
        const auto [u, v] = frame(x, y);
        const double bv = v > 0.0 ? b_right : b_left;
        return (u / a) * (u / a) + (v / bv) * (v / bv) <= 1.0;
    };
    auto in_calyx = [&](double x, double y) { return s.calyx && frame(x, y).first > calyx_u; };

    Rng rng(s.seed);
    RasterImage img(size, size, s.ppi, s.backdrop);
    GroundTruth gt;
    gt.mask = BerryMask(size, size);
    gt.center = {double(c), double(c)};
    gt.stem_point = {c + a * up.x, c + a * up.y};
    gt.orientation_deg = detail::wrap_orientation(s.orientation_deg);
    gt.area_in2 = std::numbers::pi * a * (b_left + b_right) / 2.0 / (s.ppi * s.ppi);
    gt.symmetry_pct = 100.0 * std::abs(b_right - b_left) / ((b_right + b_left) / 2.0);

    const Rgb calyx_colour = hsv_to_rgb(110.0, 0.7, 0.55);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            if (!inside(x, y)) continue;
            gt.mask.set(x, y, true);
            if (in_calyx(x, y)) {
                img.at(x, y) = calyx_colour;
            } else {
                const double hue = s.hue_std_deg > 0.0 ? rng.normal(s.base_hue_deg, s.hue_std_deg) : s.base_hue_deg;
                img.at(x, y) = hsv_to_rgb(hue, 0.85, 0.85);
            }
        }

    if (s.achene_count > 0) {
        const auto disk = detail::disk_offsets(s.achene_diameter_px);
        const double equiv = 2.0 * std::sqrt(static_cast<double>(disk.size()) / std::numbers::pi);
        const double keep_out = s.achene_diameter_px / 2.0 + 2.0;
        const auto ring = detail::disk_offsets(2.0 * keep_out);
        auto fits = [&](int cx, int cy) {
            for (auto [dx, dy] : ring) {
                const int x = cx + dx, y = cy + dy;
                if (!inside(x, y) || in_calyx(x, y)) return false;
            }
            return true;
        };
        const double min_gap = s.achene_diameter_px + 3.0;
        std::vector<std::pair<int, int>> centers;
        if (s.layout == AcheneLayout::Grid) {
            const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(s.achene_count))));
            const int rows = (s.achene_count + cols - 1) / cols;
            const int pitch = static_cast<int>(std::lround(s.grid_pitch_px));
            if (pitch < min_gap) throw LayoutOverflow("grid pitch is too small for the achene diameter");
            const int x0 = c - (cols - 1) * pitch / 2;
            const int y0 = c - (rows - 1) * pitch / 2;
            for (int k = 0; k < s.achene_count; ++k) {
                const int cx = x0 + (k % cols) * pitch, cy = y0 + (k / cols) * pitch;
                if (!fits(cx, cy)) throw LayoutOverflow("grid achene at (" + std::to_string(cx) + ", " +
                                                        std::to_string(cy) + ") does not fit on the berry");
                centers.emplace_back(cx, cy);
            }
        } else {
            const int attempts = 400 * s.achene_count + 1000;
            const int lo = c - static_cast<int>(std::ceil(reach)), span = 2 * static_cast<int>(std::ceil(reach)) + 1;
            for (int t = 0; t < attempts && static_cast<int>(centers.size()) < s.achene_count; ++t) {
                const int cx = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
                const int cy = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
                if (!fits(cx, cy)) continue;
                bool clear = true;
                for (auto [ox, oy] : centers)
                    if (std::hypot(double(cx - ox), double(cy - oy)) < min_gap) {
                        clear = false;
                        break;
                    }
                if (clear) centers.emplace_back(cx, cy);
            }
            if (static_cast<int>(centers.size()) < s.achene_count)
                throw LayoutOverflow("placed only " + std::to_string(centers.size()) + " of " +
                                     std::to_string(s.achene_count) + " achenes without overlap");
        }
        const Rgb dark{40, 25, 10};
        for (auto [cx, cy] : centers) {
            for (auto [dx, dy] : disk) img.at(cx + dx, cy + dy) = dark;
            gt.achene_centers.push_back({double(cx), double(cy)});
            gt.achene_diameters_px.push_back(equiv);
        }
    }
    return {std::move(img), std::move(gt)};
}

/// Randomised but well-posed berry parameters for corpora.
inline SynthBerrySpec random_berry_spec(Rng& rng, std::uint64_t seed) {
    SynthBerrySpec s;
    s.semi_major_px = rng.uniform(90.0, 130.0);
    s.semi_minor_px = s.semi_major_px / rng.uniform(1.25, 1.6);
    s.orientation_deg = rng.uniform(-60.0, 60.0);
    s.skew = rng.uniform() < 0.5 ? 0.0 : rng.uniform(0.02, 0.15);
    s.base_hue_deg = rng.uniform(-8.0, 8.0);
    s.hue_std_deg = rng.uniform(2.0, 10.0);
    s.achene_count = static_cast<int>(rng.below(40));
    s.achene_diameter_px = static_cast<double>(6 + rng.below(5));
    s.layout = AcheneLayout::Poisson;
    s.calyx = rng.uniform() < 0.5;
    s.seed = seed;
    return s;
}

// ---------------------------------------------------------------------------
// datasets

enum class DesignKind { Field, LabHeight, LabPattern };

inline std::string_view to_string(DesignKind d) {
    switch (d) {
        case DesignKind::Field: return "field";
        case DesignKind::LabHeight: return "lab_height";
        case DesignKind::LabPattern: return "lab_pattern";
    }
    return "field";
}

/// Linear mixed model for one response: intercept, per-level fixed effects
/// (levels not listed have effect 0), random-intercept variances keyed by
/// factor name, residual variance.
struct ResponseModel {
    double intercept = 0.0;
    std::map<std::string, double> effects;
    std::map<std::string, double> variances;
    double sigma2 = 1.0;

    double effect(const std::string& level) const {
        auto it = effects.find(level);
        return it == effects.end() ? 0.0 : it->second;
    }
    double variance(const std::string& factor) const {
        auto it = variances.find(factor);
        return it == variances.end() ? 0.0 : it->second;
    }
    void validate(const std::string& what) const {
        if (!(sigma2 >= 0.0)) throw InvalidSpec(what + ": residual variance must be >= 0");
        for (const auto& [k, v] : variances)
            if (!(v >= 0.0)) throw InvalidSpec(what + ": variance of '" + k + "' must be >= 0");
    }
};

struct SynthDatasetSpec {
    DesignKind design = DesignKind::Field;

    // field
    int n_plants = 100;
    int n_days = 12;
    double berries_per_plant = 5.31;
    Date start_date{std::chrono::year{2020} / 6 / 27};

    // lab
    std::vector<LabLevel> levels;  ///< default depends on the design
    int dishes = 5;
    int slides = 4;
    int trials = 3;

    ResponseModel primary{12.0, {}, {}, 25.0};  ///< mass_g or powder_loss_g
    ResponseModel counts{40.0, {}, {}, 25.0};   ///< particle_count (lab only)
    std::uint64_t seed = 1;

    std::vector<LabLevel> effective_levels() const {
        if (!levels.empty()) return levels;
        if (design == DesignKind::LabPattern) return {FlightPattern::Straight, FlightPattern::Hover, FlightPattern::Zigzag};
        return {0.6, 0.9, 1.2, 1.5};
    }

    void validate() const {
        primary.validate("primary response");
        counts.validate("count response");
        if (design == DesignKind::Field) {
            if (n_plants < 1 || n_plants > kMaxPlants || n_plants % kPlantsPerBlock != 0)
                throw InvalidSpec("n_plants must be a multiple of 5 between 5 and 100");
            if (n_days < 1) throw InvalidSpec("n_days must be >= 1");
            if (!(berries_per_plant > 0.0)) throw InvalidSpec("berries_per_plant must be positive");
        } else {
            if (dishes < 1 || slides < 1 || trials < 1) throw InvalidSpec("lab design counts must be >= 1");
            for (const auto& l : effective_levels()) {
                const double* h = std::get_if<double>(&l);
                if (design == DesignKind::LabHeight && !(h && *h > 0.0))
                    throw InvalidSpec("height levels must be positive numbers");
                if (design == DesignKind::LabPattern && h) throw InvalidSpec("pattern levels must be flight patterns");
            }
        }
    }

    /// Keys: design, seed, n_plants, n_days, berries_per_plant, start_date,
    /// levels, dishes, slides, trials, intercept, sigma2, effect.<level>,
    /// variance.<factor>, and count_ prefixed forms for the lab count model.
    static SynthDatasetSpec from_config(const KeyValueConfig& kv) {
        SynthDatasetSpec s;
        const std::string d = kv.get_string("design", "field");
        if (d == "field")
            s.design = DesignKind::Field;
        else if (d == "lab_height")
            s.design = DesignKind::LabHeight;
        else if (d == "lab_pattern")
            s.design = DesignKind::LabPattern;
        else
            throw InvalidSpec("unknown design '" + d + "'");
        if (s.design != DesignKind::Field) s.primary = {1.0, {}, {}, 0.04};
        s.seed = static_cast<std::uint64_t>(kv.get_int("seed", 1));
        s.n_plants = static_cast<int>(kv.get_int("n_plants", s.n_plants));
        s.n_days = static_cast<int>(kv.get_int("n_days", s.n_days));
        s.berries_per_plant = kv.get_double("berries_per_plant", s.berries_per_plant);
        if (auto sd = kv.get("start_date")) {
            auto p = Date::parse(*sd);
            if (!p) throw InvalidSpec("start_date is not an ISO-8601 date");
            s.start_date = *p;
        }
        for (const auto& lv : kv.get_strings("levels", {})) {
            if (auto h = parse_double(lv))
                s.levels.emplace_back(*h);
            else if (lv == "straight")
                s.levels.emplace_back(FlightPattern::Straight);
            else if (lv == "hover")
                s.levels.emplace_back(FlightPattern::Hover);
            else if (lv == "zigzag")
                s.levels.emplace_back(FlightPattern::Zigzag);
            else
                throw InvalidSpec("unknown level '" + lv + "'");
        }
        s.dishes = static_cast<int>(kv.get_int("dishes", s.dishes));
        s.slides = static_cast<int>(kv.get_int("slides", s.slides));
        s.trials = static_cast<int>(kv.get_int("trials", s.trials));

        auto read_model = [&](ResponseModel& m, const std::string& prefix) {
            m.intercept = kv.get_double(prefix + "intercept", m.intercept);
            m.sigma2 = kv.get_double(prefix + "sigma2", m.sigma2);
            for (const auto& [key, values] : kv.entries()) {
                const std::string ep = prefix + "effect.", vp = prefix + "variance.";
                if (key.rfind(ep, 0) == 0) m.effects[key.substr(ep.size())] = kv.get_double(key, 0.0);
                if (key.rfind(vp, 0) == 0) m.variances[key.substr(vp.size())] = kv.get_double(key, 0.0);
            }
        };
        read_model(s.primary, "");
        read_model(s.counts, "count_");
        s.validate();
        return s;
    }
};

struct SynthDataset {
    SynthDatasetSpec spec;
    std::vector<FieldRecord> field;
    std::vector<LabRecord> lab;
    /// Realised random intercepts: factor -> level -> value.
    std::map<std::string, std::map<std::string, double>> random_effects;
};

namespace detail {

inline double draw_effect(Rng& rng, std::map<std::string, std::map<std::string, double>>& store, const std::string& factor,
                          const std::string& level, double variance) {
    auto& lv = store[factor];
    auto it = lv.find(level);
    if (it != lv.end()) return it->second;
    const double u = variance > 0.0 ? rng.normal(0.0, std::sqrt(variance)) : 0.0;
    lv.emplace(level, u);
    return u;
}

inline double round_to(double v, double step) { return std::round(v / step) * step; }

}  // namespace detail

/// Treatment for each plant: within every block of five, each treatment once
/// plus one extra rotating through the treatment list, shuffled.
inline std::vector<Treatment> assign_treatments(int n_plants, Rng& rng) {
    std::vector<Treatment> out;
    for (int b = 0; b < n_plants / kPlantsPerBlock; ++b) {
        std::vector<Treatment> block(kTreatments.begin(), kTreatments.end());
        block.push_back(kTreatments[static_cast<std::size_t>(b) % kTreatments.size()]);
        for (std::size_t i = block.size() - 1; i > 0; --i) std::swap(block[i], block[rng.below(i + 1)]);
        out.insert(out.end(), block.begin(), block.end());
    }
    return out;
}

/// Records drawn from the exact mixed model. Random effects are drawn lazily
/// in record order from one stream, so output depends only on its parameters.
inline SynthDataset gen_dataset(const SynthDatasetSpec& spec) {
    spec.validate();
    SynthDataset ds;
    ds.spec = spec;
    Rng rng(spec.seed);
    auto& re = ds.random_effects;

    if (spec.design == DesignKind::Field) {
        const auto& m = spec.primary;
        const auto treatments = assign_treatments(spec.n_plants, rng);
        const double sd = std::sqrt(m.sigma2);
        for (int p = 1; p <= spec.n_plants; ++p) {
            const Treatment t = treatments[static_cast<std::size_t>(p - 1)];
            const int block = assign_block(p);
            const auto n_berries = rng.poisson(spec.berries_per_plant);
            for (std::uint64_t k = 1; k <= n_berries; ++k) {
                FieldRecord r;
                char id[32];
                std::snprintf(id, sizeof id, "P%03d-%02llu", p, static_cast<unsigned long long>(k));
                r.berry_id = id;
                r.plant_id = p;
                r.block_id = block;
                r.treatment = t;
                r.harvest_date = spec.start_date.plus_days(static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_days))));
                double y = m.intercept + m.effect(std::string(to_string(t)));
                y += detail::draw_effect(rng, re, "plant_id", std::to_string(p), m.variance("plant_id"));
                y += detail::draw_effect(rng, re, "block_id", std::to_string(block), m.variance("block_id"));
                y += detail::draw_effect(rng, re, "harvest_date", r.harvest_date.iso(), m.variance("harvest_date"));
                y += sd > 0.0 ? rng.normal(0.0, sd) : 0.0;
                r.mass_g = std::max(0.0, detail::round_to(y, 0.01));
                ds.field.push_back(std::move(r));
            }
        }
        return ds;
    }

    const LabExperiment exp = spec.design == DesignKind::LabHeight ? LabExperiment::Height : LabExperiment::Pattern;
    const auto levels = spec.effective_levels();
    const double sd_loss = std::sqrt(spec.primary.sigma2), sd_count = std::sqrt(spec.counts.sigma2);
    for (int trial = 1; trial <= spec.trials; ++trial)
        for (const auto& level : levels) {
            const std::string label = level_label(level);
            for (int pos = 1; pos <= spec.dishes; ++pos) {
                const auto& m = spec.primary;
                double y = m.intercept + m.effect(label);
                y += detail::draw_effect(rng, re, "dish_position", std::to_string(pos), m.variance("dish_position"));
                y += detail::draw_effect(rng, re, "loss.trial_id", std::to_string(trial), m.variance("trial_id"));
                y += sd_loss > 0.0 ? rng.normal(0.0, sd_loss) : 0.0;
                ds.lab.push_back({exp, trial, level, UnitKind::Dish, pos, LabResponse::PowderLossG,
                                  std::max(0.0, detail::round_to(y, 1e-4))});
            }
            for (int pos = 1; pos <= spec.slides; ++pos) {
                const auto& m = spec.counts;
                double y = m.intercept + m.effect(label);
                y += detail::draw_effect(rng, re, "slide_position", std::to_string(pos), m.variance("slide_position"));
                y += detail::draw_effect(rng, re, "count.trial_id", std::to_string(trial), m.variance("trial_id"));
                y += sd_count > 0.0 ? rng.normal(0.0, sd_count) : 0.0;
                ds.lab.push_back({exp, trial, level, UnitKind::Slide, pos, LabResponse::ParticleCount,
                                  std::max(0.0, std::round(y))});
            }
        }
    return ds;
}

/// Berry drawing for a field record: size grows with mass, orientation and
/// achene layout vary per berry.
inline SynthBerrySpec berry_spec_for_record(const FieldRecord& r, bool side_view, double ppi, std::uint64_t seed) {
    Rng rng(seed);
    SynthBerrySpec s;
    const double scale = std::cbrt(std::max(r.mass_g, 1.0) / 12.0);
    s.semi_major_px = (side_view ? 0.9 : 1.0) * 0.45 * ppi * scale;
    s.semi_minor_px = s.semi_major_px / rng.uniform(1.2, 1.5);
    s.orientation_deg = rng.uniform(-30.0, 30.0);
    s.skew = rng.uniform(0.0, 0.1);
    s.hue_std_deg = rng.uniform(3.0, 8.0);
    s.achene_diameter_px = std::max(5.0, std::round(0.06 * ppi));
    s.achene_count = 10 + static_cast<int>(rng.below(10));
    s.calyx = true;
    // small berries at low resolution cannot hold that many; keep well below
    // the random-packing limit so placement never runs out of attempts
    const double margin = s.achene_diameter_px / 2.0 + 2.0, gap = s.achene_diameter_px + 3.0;
    const double usable = 0.8 * std::numbers::pi * std::max(0.0, s.semi_major_px - margin) *
                          std::max(0.0, s.semi_minor_px - margin);
    const int cap = static_cast<int>(0.3 * usable / (std::numbers::pi * gap * gap / 4.0));
    s.achene_count = std::min(s.achene_count, cap);
    s.ppi = ppi;
    s.seed = seed ^ 0x5bd1e995ULL;
    return s;
}

}  // namespace berrypoll
