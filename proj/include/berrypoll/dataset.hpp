#pragma once

// Field and lab experiment records, CSV ingestion with row validation, and
// the per-treatment summaries behind the berry tables and box plots.

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "berrypoll/config.hpp"
#include "berrypoll/errors.hpp"
#include "berrypoll/imaging.hpp"

namespace berrypoll {

enum class Treatment { QuadcopterBees, Quadcopter, Bees, Neither };

/// Table order: quadcopter+bees, quadcopter, bees, neither.
inline constexpr std::array<Treatment, 4> kTreatments{Treatment::QuadcopterBees, Treatment::Quadcopter,
                                                      Treatment::Bees, Treatment::Neither};

inline std::string_view to_string(Treatment t) {
    switch (t) {
        case Treatment::QuadcopterBees: return "quad_bees";
        case Treatment::Quadcopter: return "quad";
        case Treatment::Bees: return "bees";
        case Treatment::Neither: return "neither";
    }
    return "neither";
}

inline std::string_view display_name(Treatment t) {
    switch (t) {
        case Treatment::QuadcopterBees: return "Quadcopter+Bees";
        case Treatment::Quadcopter: return "Quadcopter";
        case Treatment::Bees: return "Bees";
        case Treatment::Neither: return "Neither";
    }
    return "Neither";
}

inline std::optional<Treatment> parse_treatment(std::string_view s) {
    for (auto t : kTreatments)
        if (to_string(t) == s) return t;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// dates

struct Date {
    std::chrono::year_month_day ymd{};

    static std::optional<Date> parse(std::string_view s) {
        if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
        auto y = parse_int(s.substr(0, 4));
        auto m = parse_int(s.substr(5, 2));
        auto d = parse_int(s.substr(8, 2));
        if (!y || !m || !d || *m < 1 || *m > 12 || *d < 1 || *d > 31) return std::nullopt;
        Date out{std::chrono::year{static_cast<int>(*y)} / static_cast<unsigned>(*m) / static_cast<unsigned>(*d)};
        if (!out.ymd.ok()) return std::nullopt;
        return out;
    }

    std::string iso() const {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                      static_cast<unsigned>(ymd.day()));
        return buf;
    }

    Date plus_days(int n) const {
        return Date{std::chrono::year_month_day{std::chrono::sys_days{ymd} + std::chrono::days{n}}};
    }

    friend auto operator<=>(const Date& a, const Date& b) { return a.ymd <=> b.ymd; }
    friend bool operator==(const Date&, const Date&) = default;
};

struct ExperimentWindow {
    std::optional<Date> first;
    std::optional<Date> last;

    bool contains(const Date& d) const { return (!first || d >= *first) && (!last || d <= *last); }
};

// ---------------------------------------------------------------------------
// record types

struct ViewMetrics {
    MorphologyMetrics morphology;
    AcheneMetrics achenes;
};

struct FieldRecord {
    std::string berry_id;
    int plant_id = 1;
    int block_id = 1;
    Treatment treatment = Treatment::Neither;
    Date harvest_date;
    double mass_g = 0.0;
    std::string front_image;
    std::string side_image;
    std::optional<ViewMetrics> front_metrics;
    std::optional<ViewMetrics> side_metrics;
};

enum class LabExperiment { Height, Pattern };
enum class FlightPattern { Straight, Hover, Zigzag };
enum class UnitKind { Dish, Slide };
enum class LabResponse { PowderLossG, ParticleCount };

inline std::string_view to_string(LabExperiment e) { return e == LabExperiment::Height ? "height" : "pattern"; }
inline std::string_view to_string(UnitKind u) { return u == UnitKind::Dish ? "dish" : "slide"; }
inline std::string_view to_string(LabResponse r) {
    return r == LabResponse::PowderLossG ? "powder_loss_g" : "particle_count";
}
inline std::string_view to_string(FlightPattern p) {
    switch (p) {
        case FlightPattern::Straight: return "straight";
        case FlightPattern::Hover: return "hover";
        case FlightPattern::Zigzag: return "zigzag";
    }
    return "straight";
}

/// Shortest round-trip decimal form.
inline std::string format_shortest(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

/// Height in metres for the height experiment, flight pattern otherwise.
using LabLevel = std::variant<double, FlightPattern>;

inline std::string level_label(const LabLevel& level) {
    if (const double* h = std::get_if<double>(&level)) return format_shortest(*h);
    return std::string(to_string(std::get<FlightPattern>(level)));
}

struct LabRecord {
    LabExperiment experiment = LabExperiment::Height;
    int trial_id = 1;
    LabLevel level = 0.6;
    UnitKind unit_kind = UnitKind::Dish;
    int unit_position = 1;
    LabResponse response_name = LabResponse::PowderLossG;
    double response_value = 0.0;
};

// ---------------------------------------------------------------------------
// CSV plumbing

inline constexpr std::string_view kFieldHeader =
    "berry_id,plant_id,block_id,treatment,harvest_date,mass_g,front_image,side_image";
inline constexpr std::string_view kMetricsHeader =
    "berry_id,view,area_in2,symmetry_pct,hue_mean_deg,hue_std_deg,achene_count,achene_size_px,achene_size_std_px,"
    "achene_nn_dist_px,achene_nn_dist_std_px";
inline constexpr std::string_view kLabHeader =
    "experiment,trial_id,level,unit_kind,unit_position,response_name,response_value";

namespace detail {

inline std::string strip_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
}

/// Reads header + data lines; throws SchemaError if the header differs.
inline std::vector<std::string> read_csv_lines(std::istream& in, std::string_view header) {
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("missing header, expected '" + std::string(header) + "'");
    line = strip_cr(line);
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
    if (line != header)
        throw SchemaError("header mismatch: expected '" + std::string(header) + "', got '" + line + "'");
    std::vector<std::string> rows;
    while (std::getline(in, line)) {
        line = strip_cr(line);
        if (trim(line).empty()) continue;
        rows.push_back(line);
    }
    return rows;
}

inline std::ifstream open_input(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputMissing("cannot open '" + path + "'");
    return in;
}

inline std::vector<std::string> split_row(const std::string& line, std::size_t row, std::size_t expected) {
    auto cells = split(line, ',');
    if (cells.size() != expected)
        throw RowError(row, "<row>",
                       "expected " + std::to_string(expected) + " columns, found " + std::to_string(cells.size()));
    return cells;
}

inline long long require_int(const std::string& s, std::size_t row, const char* field) {
    auto v = parse_int(s);
    if (!v) throw RowError(row, field, "not an integer: '" + s + "'");
    return *v;
}

inline double require_double(const std::string& s, std::size_t row, const char* field) {
    auto v = parse_double(s);
    if (!v || !std::isfinite(*v)) throw RowError(row, field, "not a number: '" + s + "'");
    return *v;
}

inline std::string fmt_fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    std::string s = buf;
    if (s == "-0.00" || s == "-0.000000" || s == "-0") s.erase(0, 1);
    return s;
}

inline std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_fixed(*v, 6) : std::string(); }

}  // namespace detail

inline constexpr int kMaxPlants = 100;
inline constexpr int kPlantsPerBlock = 5;

/// Plants are blocked in consecutive runs of five.
inline int assign_block(int plant_id) {
    if (plant_id < 1 || plant_id > kMaxPlants)
        throw OutOfRange("plant_id " + std::to_string(plant_id) + " outside 1.." + std::to_string(kMaxPlants));
    return (plant_id + kPlantsPerBlock - 1) / kPlantsPerBlock;
}

inline std::vector<FieldRecord> read_field_csv(std::istream& in, const ExperimentWindow& window = {}) {
    const auto lines = detail::read_csv_lines(in, kFieldHeader);
    std::vector<FieldRecord> out;
    out.reserve(lines.size());
    std::set<std::string> seen;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const std::size_t row = i + 1;
        const auto c = detail::split_row(lines[i], row, 8);
        FieldRecord r;
        r.berry_id = trim(c[0]);
        if (r.berry_id.empty()) throw RowError(row, "berry_id", "empty");
        if (!seen.insert(r.berry_id).second) throw RowError(row, "berry_id", "duplicate '" + r.berry_id + "'");

        const long long plant = detail::require_int(c[1], row, "plant_id");
        if (plant < 1 || plant > kMaxPlants) throw RowError(row, "plant_id", "outside 1..100");
        r.plant_id = static_cast<int>(plant);

        const long long block = detail::require_int(c[2], row, "block_id");
        const int expected = assign_block(r.plant_id);
        if (block != expected)
            throw RowError(row, "block_id",
                           "plant " + std::to_string(plant) + " belongs to block " + std::to_string(expected));
        r.block_id = static_cast<int>(block);

        auto t = parse_treatment(trim(c[3]));
        if (!t) throw RowError(row, "treatment", "unknown treatment '" + c[3] + "'");
        r.treatment = *t;

        auto d = Date::parse(trim(c[4]));
        if (!d) throw RowError(row, "harvest_date", "not an ISO-8601 date: '" + c[4] + "'");
        if (!window.contains(*d)) throw RowError(row, "harvest_date", "outside the experiment window");
        r.harvest_date = *d;

        const double mass = detail::require_double(c[5], row, "mass_g");
        if (mass < 0.0) throw RowError(row, "mass_g", "negative mass");
        if (std::abs(mass * 100.0 - std::round(mass * 100.0)) > 1e-6)
            throw RowError(row, "mass_g", "not a multiple of 0.01 g");
        r.mass_g = mass;
        r.front_image = trim(c[6]);
        r.side_image = trim(c[7]);
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<FieldRecord> load_field_csv(const std::string& path, const ExperimentWindow& window = {}) {
    auto in = detail::open_input(path);
    return read_field_csv(in, window);
}

inline void write_field_csv(std::ostream& out, const std::vector<FieldRecord>& records) {
    out << kFieldHeader << '\n';
    for (const auto& r : records) {
        out << r.berry_id << ',' << r.plant_id << ',' << r.block_id << ',' << to_string(r.treatment) << ','
            << r.harvest_date.iso() << ',' << detail::fmt_fixed(r.mass_g, 2) << ',' << r.front_image << ','
            << r.side_image << '\n';
    }
}

inline std::vector<LabRecord> read_lab_csv(std::istream& in) {
    const auto lines = detail::read_csv_lines(in, kLabHeader);
    std::vector<LabRecord> out;
    out.reserve(lines.size());
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const std::size_t row = i + 1;
        const auto c = detail::split_row(lines[i], row, 7);
        LabRecord r;
        const std::string exp = trim(c[0]);
        if (exp == "height")
            r.experiment = LabExperiment::Height;
        else if (exp == "pattern")
            r.experiment = LabExperiment::Pattern;
        else
            throw RowError(row, "experiment", "expected 'height' or 'pattern', got '" + exp + "'");

        const long long trial = detail::require_int(c[1], row, "trial_id");
        if (trial < 1) throw RowError(row, "trial_id", "must be >= 1");
        r.trial_id = static_cast<int>(trial);

        const std::string level = trim(c[2]);
        if (r.experiment == LabExperiment::Height) {
            auto h = parse_double(level);
            if (!h || !(*h > 0.0) || !std::isfinite(*h)) throw RowError(row, "level", "height must be a positive number");
            r.level = *h;
        } else {
            if (level == "straight")
                r.level = FlightPattern::Straight;
            else if (level == "hover")
                r.level = FlightPattern::Hover;
            else if (level == "zigzag")
                r.level = FlightPattern::Zigzag;
            else
                throw RowError(row, "level", "unknown flight pattern '" + level + "'");
        }

        const std::string kind = trim(c[3]);
        if (kind == "dish")
            r.unit_kind = UnitKind::Dish;
        else if (kind == "slide")
            r.unit_kind = UnitKind::Slide;
        else
            throw RowError(row, "unit_kind", "expected 'dish' or 'slide'");

        const long long pos = detail::require_int(c[4], row, "unit_position");
        if (pos < 1) throw RowError(row, "unit_position", "must be >= 1");
        r.unit_position = static_cast<int>(pos);

        const std::string resp = trim(c[5]);
        if (resp == "powder_loss_g")
            r.response_name = LabResponse::PowderLossG;
        else if (resp == "particle_count")
            r.response_name = LabResponse::ParticleCount;
        else
            throw RowError(row, "response_name", "unknown response '" + resp + "'");
        const LabResponse expected =
            r.unit_kind == UnitKind::Dish ? LabResponse::PowderLossG : LabResponse::ParticleCount;
        if (r.response_name != expected)
            throw RowError(row, "response_name",
                           std::string(to_string(r.unit_kind)) + " rows must report " + std::string(to_string(expected)));

        r.response_value = detail::require_double(c[6], row, "response_value");
        if (r.response_value < 0.0) throw RowError(row, "response_value", "must be >= 0");
        if (r.response_name == LabResponse::ParticleCount && r.response_value != std::floor(r.response_value))
            throw RowError(row, "response_value", "particle_count must be an integer");
        out.push_back(r);
    }
    return out;
}

inline std::vector<LabRecord> load_lab_csv(const std::string& path) {
    auto in = detail::open_input(path);
    return read_lab_csv(in);
}

inline void write_lab_csv(std::ostream& out, const std::vector<LabRecord>& records) {
    out << kLabHeader << '\n';
    for (const auto& r : records) {
        out << to_string(r.experiment) << ',' << r.trial_id << ',' << level_label(r.level) << ','
            << to_string(r.unit_kind) << ',' << r.unit_position << ',' << to_string(r.response_name) << ','
            << (r.response_name == LabResponse::ParticleCount ? detail::fmt_fixed(r.response_value, 0)
                                                              : detail::fmt_fixed(r.response_value, 4))
            << '\n';
    }
}

// ---------------------------------------------------------------------------
// imaging metrics rows

struct MetricsRow {
    std::string berry_id;
    std::string view;  ///< "front" or "side"
    ViewMetrics metrics;
};

inline void write_metrics_header(std::ostream& out) { out << kMetricsHeader << '\n'; }

inline void write_metrics_row(std::ostream& out, const MetricsRow& r) {
    const auto& m = r.metrics.morphology;
    const auto& a = r.metrics.achenes;
    out << r.berry_id << ',' << r.view << ',' << detail::fmt_fixed(m.area_in2, 6) << ','
        << detail::fmt_fixed(m.symmetry_pct, 6) << ',' << detail::fmt_fixed(m.hue_mean_deg, 6) << ','
        << detail::fmt_fixed(m.hue_std_deg, 6) << ',' << a.count << ',' << detail::fmt_opt(a.size_mean_px) << ','
        << detail::fmt_opt(a.size_std_px) << ',' << detail::fmt_opt(a.nn_dist_mean_px) << ','
        << detail::fmt_opt(a.nn_dist_std_px) << '\n';
}

inline std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
    const auto lines = detail::read_csv_lines(in, kMetricsHeader);
    std::vector<MetricsRow> out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const std::size_t row = i + 1;
        const auto c = detail::split_row(lines[i], row, 11);
        MetricsRow r;
        r.berry_id = trim(c[0]);
        if (r.berry_id.empty()) throw RowError(row, "berry_id", "empty");
        r.view = trim(c[1]);
        if (r.view != "front" && r.view != "side") throw RowError(row, "view", "expected 'front' or 'side'");
        auto& m = r.metrics.morphology;
        m.area_in2 = detail::require_double(c[2], row, "area_in2");
        m.symmetry_pct = detail::require_double(c[3], row, "symmetry_pct");
        m.hue_mean_deg = detail::require_double(c[4], row, "hue_mean_deg");
        m.hue_std_deg = detail::require_double(c[5], row, "hue_std_deg");
        const long long count = detail::require_int(c[6], row, "achene_count");
        if (count < 0) throw RowError(row, "achene_count", "negative");
        auto& a = r.metrics.achenes;
        a.count = static_cast<std::size_t>(count);
        auto opt = [&](const std::string& s, const char* field) -> std::optional<double> {
            if (trim(s).empty()) return std::nullopt;
            return detail::require_double(s, row, field);
        };
        a.size_mean_px = opt(c[7], "achene_size_px");
        a.size_std_px = opt(c[8], "achene_size_std_px");
        a.nn_dist_mean_px = opt(c[9], "achene_nn_dist_px");
        a.nn_dist_std_px = opt(c[10], "achene_nn_dist_std_px");
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<MetricsRow> load_metrics_csv(const std::string& path) {
    auto in = detail::open_input(path);
    return read_metrics_csv(in);
}

/// Attaches imaging metrics to field records by berry_id and view. Metric
/// rows naming unknown berries raise JoinError listing every such id.
inline void join_metrics(std::vector<FieldRecord>& records, const std::vector<MetricsRow>& metrics) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < records.size(); ++i) index[records[i].berry_id] = i;
    std::vector<std::string> unmatched;
    for (const auto& m : metrics) {
        auto it = index.find(m.berry_id);
        if (it == index.end()) {
            unmatched.push_back(m.berry_id);
            continue;
        }
        auto& rec = records[it->second];
        (m.view == "front" ? rec.front_metrics : rec.side_metrics) = m.metrics;
    }
    if (!unmatched.empty()) {
        std::string list;
        for (const auto& id : unmatched) list += (list.empty() ? "" : ", ") + id;
        throw JoinError("metrics rows without a field record: " + list);
    }
}

// ---------------------------------------------------------------------------
// summaries

enum class Variable { Mass, Area, Symmetry, AcheneSize, AcheneDistance };

inline constexpr std::array<Variable, 5> kVariables{Variable::Mass, Variable::Area, Variable::Symmetry,
                                                    Variable::AcheneSize, Variable::AcheneDistance};

inline std::string_view to_string(Variable v) {
    switch (v) {
        case Variable::Mass: return "mass_g";
        case Variable::Area: return "area_in2";
        case Variable::Symmetry: return "symmetry_pct";
        case Variable::AcheneSize: return "achene_size_px";
        case Variable::AcheneDistance: return "achene_nn_dist_px";
    }
    return "mass_g";
}

/// Value of `v` for a record, using the front view for imaging variables.
inline std::optional<double> variable_value(const FieldRecord& r, Variable v) {
    if (v == Variable::Mass) return r.mass_g;
    if (!r.front_metrics) return std::nullopt;
    const auto& m = *r.front_metrics;
    switch (v) {
        case Variable::Area: return m.morphology.area_in2;
        case Variable::Symmetry: return m.morphology.symmetry_pct;
        case Variable::AcheneSize: return m.achenes.size_mean_px;
        case Variable::AcheneDistance: return m.achenes.nn_dist_mean_px;
        default: return std::nullopt;
    }
}

struct MeanStd {
    std::size_t n = 0;
    double mean = 0.0;
    std::optional<double> std;  ///< absent when n < 2
};

/// Welford accumulator.
class RunningStats {
public:
    void push(double x) {
        ++n_;
        const double d = x - mean_;
        mean_ += d / static_cast<double>(n_);
        m2_ += d * (x - mean_);
    }
    std::size_t count() const { return n_; }
    MeanStd result() const {
        MeanStd out{n_, mean_, std::nullopt};
        if (n_ >= 2) out.std = std::sqrt(m2_ / static_cast<double>(n_ - 1));
        return out;
    }

private:
    std::size_t n_ = 0;
    double mean_ = 0.0;
    double m2_ = 0.0;
};

struct GroupSummary {
    Treatment treatment = Treatment::Neither;
    std::size_t n = 0;
    std::map<Variable, MeanStd> stats;  ///< variables with at least one value

    std::optional<MeanStd> get(Variable v) const {
        auto it = stats.find(v);
        if (it == stats.end()) return std::nullopt;
        return it->second;
    }
};

/// Per-treatment means and sample standard deviations, in table order.
inline std::vector<GroupSummary> summarize(const std::vector<FieldRecord>& records) {
    std::map<Treatment, std::vector<const FieldRecord*>> groups;
    for (const auto& r : records) groups[r.treatment].push_back(&r);
    std::vector<GroupSummary> out;
    for (auto t : kTreatments) {
        auto it = groups.find(t);
        if (it == groups.end()) throw EmptyGroup("no records for treatment '" + std::string(to_string(t)) + "'");
        GroupSummary g;
        g.treatment = t;
        g.n = it->second.size();
        for (auto v : kVariables) {
            // Sorting makes the floating-point result independent of record order.
            std::vector<double> values;
            for (const auto* r : it->second)
                if (auto x = variable_value(*r, v)) values.push_back(*x);
            if (values.empty()) continue;
            std::sort(values.begin(), values.end());
            RunningStats acc;
            for (double x : values) acc.push(x);
            g.stats[v] = acc.result();
        }
        out.push_back(std::move(g));
    }
    return out;
}

struct BoxplotStats {
    Treatment treatment = Treatment::Neither;
    double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
    double whisker_lo = 0, whisker_hi = 0;
    std::vector<double> outliers;
};

/// Type-7 (linear interpolation) quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
    const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

/// Tukey box: whiskers reach the furthest datum within 1.5 IQR of the
/// quartiles, clamped so they never cross them.
inline BoxplotStats boxplot(std::vector<double> values, Treatment t = Treatment::Neither) {
    if (values.empty()) throw EmptyGroup("no values for '" + std::string(to_string(t)) + "'");
    std::sort(values.begin(), values.end());
    BoxplotStats b;
    b.treatment = t;
    b.min = values.front();
    b.max = values.back();
    b.q1 = quantile_sorted(values, 0.25);
    b.median = quantile_sorted(values, 0.5);
    b.q3 = quantile_sorted(values, 0.75);
    const double iqr = b.q3 - b.q1;
    const double lo_fence = b.q1 - 1.5 * iqr, hi_fence = b.q3 + 1.5 * iqr;
    b.whisker_lo = b.q1;
    b.whisker_hi = b.q3;
    for (double v : values) {
        if (v < lo_fence || v > hi_fence) {
            b.outliers.push_back(v);
            continue;
        }
        b.whisker_lo = std::min(b.whisker_lo, v);
        b.whisker_hi = std::max(b.whisker_hi, v);
    }
    return b;
}

inline std::vector<BoxplotStats> boxplot_stats(const std::vector<FieldRecord>& records, Variable v) {
    std::vector<BoxplotStats> out;
    for (auto t : kTreatments) {
        std::vector<double> values;
        for (const auto& r : records)
            if (r.treatment == t)
                if (auto x = variable_value(r, v)) values.push_back(*x);
        out.push_back(boxplot(std::move(values), t));
    }
    return out;
}

}  // namespace berrypoll
