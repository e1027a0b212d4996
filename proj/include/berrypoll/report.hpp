#pragma once

// Per-group summary table, pairwise p-value table, boxplot SVGs and the
// report bundle that ties them to their inputs.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "berrypoll/dataset.hpp"
#include "berrypoll/mixedmodel.hpp"
#include "berrypoll/rng.hpp"
#include "berrypoll/serialize.hpp"

namespace berrypoll {

struct BoxplotSection {
    Variable variable = Variable::Mass;
    std::vector<BoxplotStats> stats;  ///< empty when skipped
    std::string skipped_reason;
};

struct ReportBundle {
    std::vector<GroupSummary> group_summaries;
    std::optional<PairwiseTable> pairwise_table;
    std::optional<PowerResult> power_result;
    std::vector<BoxplotSection> boxplots;
    Provenance provenance;
};

inline ReportBundle make_report(const std::vector<FieldRecord>& records, std::optional<PairwiseTable> pairwise,
                                std::optional<PowerResult> power, Provenance provenance) {
    ReportBundle b;
    b.group_summaries = summarize(records);
    if (pairwise && !pairwise->rows.empty()) b.pairwise_table = std::move(pairwise);
    b.power_result = std::move(power);
    for (auto v : kVariables) {
        BoxplotSection s;
        s.variable = v;
        try {
            s.stats = boxplot_stats(records, v);
        } catch (const EmptyGroup&) {
            s.skipped_reason = "no values in at least one group";
        }
        b.boxplots.push_back(std::move(s));
    }
    b.provenance = std::move(provenance);
    return b;
}

namespace detail {

inline std::string fmt2(double v) { return detail::fmt_fixed(v, 2); }

inline std::string fmt_p(double p) {
    if (std::isnan(p)) return "n/a";
    if (p < 1e-4) return "< 0.0001";
    return detail::fmt_fixed(p, 4);
}

inline std::string variable_title(Variable v) {
    switch (v) {
        case Variable::Mass: return "Mass (g)";
        case Variable::Area: return "Area (in²)";
        case Variable::Symmetry: return "Sym. (%)";
        case Variable::AcheneSize: return "Achene Size (px)";
        case Variable::AcheneDistance: return "Achene Distance (px)";
    }
    return "";
}

inline std::string variable_sigma_title(Variable v) {
    switch (v) {
        case Variable::Mass: return "Mass σ";
        case Variable::Area: return "Area σ";
        case Variable::Symmetry: return "Sym. σ";
        case Variable::AcheneSize: return "Achene Size σ";
        case Variable::AcheneDistance: return "Achene Distance σ";
    }
    return "";
}

/// Display label for a fixed-factor level: treatment codes get their table
/// names, anything else is shown verbatim.
inline std::string level_display(const std::string& level) {
    if (auto t = parse_treatment(level)) return std::string(display_name(*t));
    return level;
}

}  // namespace detail

/// Column headers of the per-group summary table, after the group column.
inline std::vector<std::string> table1_columns() {
    std::vector<std::string> cols;
    for (auto v : kVariables) {
        cols.push_back(detail::variable_title(v));
        cols.push_back(detail::variable_sigma_title(v));
    }
    cols.push_back("# Berries");
    return cols;
}

inline std::vector<std::string> table2_columns() { return {"Group 1", "Group 2", "p-value"}; }

inline std::string render_table1(const std::vector<GroupSummary>& groups) {
    std::ostringstream os;
    os << "| Group |";
    for (const auto& c : table1_columns()) os << ' ' << c << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < table1_columns().size(); ++i) os << "---:|";
    os << '\n';
    for (const auto& g : groups) {
        os << "| " << display_name(g.treatment) << " |";
        for (auto v : kVariables) {
            const auto s = g.get(v);
            os << ' ' << (s ? detail::fmt2(s->mean) : "n/a") << " |";
            os << ' ' << (s && s->std ? detail::fmt2(*s->std) : "n/a") << " |";
        }
        os << ' ' << g.n << " |\n";
    }
    return os.str();
}

/// Pairs in table order of the levels (treatment order when the levels are
/// treatments, otherwise the order the pairwise table lists them in).
inline std::string render_table2(const PairwiseTable& t) {
    std::vector<std::string> levels;
    for (const auto& r : t.rows)
        for (const auto* l : {&r.level_a, &r.level_b})
            if (std::find(levels.begin(), levels.end(), *l) == levels.end()) levels.push_back(*l);
    const bool treatments = std::all_of(levels.begin(), levels.end(), [](const std::string& l) { return parse_treatment(l).has_value(); });
    if (treatments) {
        std::sort(levels.begin(), levels.end(), [](const std::string& a, const std::string& b) {
            return static_cast<int>(*parse_treatment(a)) < static_cast<int>(*parse_treatment(b));
        });
    }
    auto find = [&](const std::string& a, const std::string& b) -> const PairwiseRow* {
        for (const auto& r : t.rows)
            if ((r.level_a == a && r.level_b == b) || (r.level_a == b && r.level_b == a)) return &r;
        return nullptr;
    };
    std::ostringstream os;
    os << "| Group 1 | Group 2 | p-value |\n|---|---|---:|\n";
    for (std::size_t i = 0; i < levels.size(); ++i)
        for (std::size_t j = i + 1; j < levels.size(); ++j) {
            const PairwiseRow* r = find(levels[i], levels[j]);
            if (!r) continue;
            os << "| " << detail::level_display(levels[i]) << " | " << detail::level_display(levels[j]) << " | "
               << detail::fmt_p(r->p_value) << " |\n";
        }
    return os.str();
}

/// Estimates, KR standard errors and df, intervals and Tukey-adjusted p.
inline std::string render_pairwise_detail(const PairwiseTable& t) {
    std::ostringstream os;
    os << "| Level A | Level B | Estimate (A − B) | SE | KR df | t | p | p (Tukey-adjusted) | 95% CI |\n"
       << "|---|---|---:|---:|---:|---:|---:|---:|---|\n";
    for (const auto& r : t.rows) {
        os << "| " << detail::level_display(r.level_a) << " | " << detail::level_display(r.level_b) << " | "
           << detail::fmt_fixed(r.estimate, 3) << " | " << detail::fmt_fixed(r.std_error, 3) << " | " << detail::fmt_fixed(r.kr_df, 2) << " | "
           << detail::fmt_fixed(r.t_value, 3) << " | " << detail::fmt_p(r.p_value) << " | " << detail::fmt_p(r.p_tukey) << " | ["
           << detail::fmt_fixed(r.ci_lo, 3) << ", " << detail::fmt_fixed(r.ci_hi, 3) << "] |\n";
    }
    return os.str();
}

inline std::string boxplot_file_name(Variable v) { return "boxplot_" + std::string(to_string(v)) + ".svg"; }

/// Box-and-whisker plot per treatment with every datum overlaid as a
/// jittered point. Jitter comes from a fixed-seed generator.
inline std::string render_boxplot_svg(const std::vector<FieldRecord>& records, const std::vector<BoxplotStats>& stats,
                                      Variable v) {
    constexpr double W = 640, H = 400, left = 70, right = 20, top = 30, bottom = 50;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& b : stats) {
        lo = std::min(lo, b.min);
        hi = std::max(hi, b.max);
    }
    if (!(hi > lo)) {
        lo -= 1.0;
        hi += 1.0;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
    auto ymap = [&](double val) { return top + (H - top - bottom) * (hi - val) / (hi - lo); };
    const double slot = (W - left - right) / static_cast<double>(stats.size());
    auto f = [](double x) { return detail::fmt_fixed(x, 2); };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
       << ' ' << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
       << detail::variable_title(v) << " by control group</text>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom
       << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double val = lo + (hi - lo) * k / 4.0;
        const double y = ymap(val);
        os << "<line x1=\"" << left - 4 << "\" y1=\"" << f(y) << "\" x2=\"" << left << "\" y2=\"" << f(y)
           << "\" stroke=\"black\"/>\n";
        os << "<text x=\"" << left - 6 << "\" y=\"" << f(y + 4) << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           << "font-size=\"11\">" << f(val) << "</text>\n";
    }
    Rng jitter(0x6a09e667f3bcc908ULL);
    for (std::size_t i = 0; i < stats.size(); ++i) {
        const auto& b = stats[i];
        const double cx = left + slot * (static_cast<double>(i) + 0.5);
        const double bw = slot * 0.4;
        os << "<g class=\"group\" data-treatment=\"" << to_string(b.treatment) << "\">\n";
        os << "<line x1=\"" << f(cx) << "\" y1=\"" << f(ymap(b.whisker_lo)) << "\" x2=\"" << f(cx) << "\" y2=\""
           << f(ymap(b.q1)) << "\" stroke=\"black\"/>\n";
        os << "<line x1=\"" << f(cx) << "\" y1=\"" << f(ymap(b.q3)) << "\" x2=\"" << f(cx) << "\" y2=\""
           << f(ymap(b.whisker_hi)) << "\" stroke=\"black\"/>\n";
        for (double wv : {b.whisker_lo, b.whisker_hi})
            os << "<line x1=\"" << f(cx - bw / 4) << "\" y1=\"" << f(ymap(wv)) << "\" x2=\"" << f(cx + bw / 4)
               << "\" y2=\"" << f(ymap(wv)) << "\" stroke=\"black\"/>\n";
        os << "<rect x=\"" << f(cx - bw / 2) << "\" y=\"" << f(ymap(b.q3)) << "\" width=\"" << f(bw) << "\" height=\""
           << f(ymap(b.q1) - ymap(b.q3)) << "\" fill=\"#f4cccc\" stroke=\"black\"/>\n";
        os << "<line x1=\"" << f(cx - bw / 2) << "\" y1=\"" << f(ymap(b.median)) << "\" x2=\"" << f(cx + bw / 2)
           << "\" y2=\"" << f(ymap(b.median)) << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
        for (const auto& r : records) {
            if (r.treatment != b.treatment) continue;
            const auto val = variable_value(r, v);
            if (!val) continue;
            const double jx = cx + (jitter.uniform() - 0.5) * bw * 0.8;
            os << "<circle cx=\"" << f(jx) << "\" cy=\"" << f(ymap(*val)) << "\" r=\"2\" fill=\"#1f4e79\" "
               << "fill-opacity=\"0.5\"/>\n";
        }
        os << "<text x=\"" << f(cx) << "\" y=\"" << H - bottom + 18
           << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << display_name(b.treatment)
           << "</text>\n";
        os << "</g>\n";
    }
    os << "</svg>\n";
    return os.str();
}

inline std::string render_markdown(const ReportBundle& b) {
    std::ostringstream os;
    os << "# Strawberry pollination field report\n\n";
    os << "## Per-group summary\n\n" << render_table1(b.group_summaries) << '\n';
    os << "## Pairwise comparisons\n\n";
    if (b.pairwise_table) {
        os << "Response factor: " << (b.pairwise_table->factor.empty() ? "n/a" : b.pairwise_table->factor)
           << ". Raw Kenward-Roger p-values.\n\n"
           << render_table2(*b.pairwise_table) << '\n'
           << "Detail (95% confidence intervals; Tukey-adjusted p-values shown alongside the raw ones):\n\n"
           << render_pairwise_detail(*b.pairwise_table) << '\n';
    } else {
        os << "_Skipped: no pairwise comparisons supplied._\n\n";
    }
    os << "## Power\n\n";
    if (b.power_result) {
        const auto& p = *b.power_result;
        os << "| Quantity | Value |\n|---|---:|\n"
           << "| " << p.label << " | " << detail::fmt_fixed(p.power, 3) << " |\n"
           << "| alpha | " << detail::fmt_fixed(p.alpha, 3) << " |\n"
           << "| simulations | " << p.n_sims << " |\n"
           << "| failed replicates | " << p.failures << " |\n"
           << "| Monte-Carlo SE | " << detail::fmt_fixed(p.mc_std_error, 4) << " |\n"
           << "| seed | " << p.seed << " |\n";
        if (!p.valid) os << "\n**Invalid: more than 5% of replicates failed to fit.**\n";
        os << '\n';
    } else {
        os << "_Skipped: no power analysis supplied._\n\n";
    }
    os << "## Boxplots\n\n";
    for (const auto& s : b.boxplots) {
        if (s.stats.empty())
            os << "- " << detail::variable_title(s.variable) << ": _skipped (" << s.skipped_reason << ")_\n";
        else
            os << "- " << detail::variable_title(s.variable) << ": [" << boxplot_file_name(s.variable) << "]("
               << boxplot_file_name(s.variable) << ")\n";
    }
    os << "\n## Provenance\n\n";
    os << "- tool: " << kToolName << ' ' << kToolVersion << '\n';
    os << "- seed: " << (b.provenance.seed ? std::to_string(*b.provenance.seed) : std::string("n/a")) << '\n';
    for (const auto& [name, hash] : b.provenance.inputs) os << "- input `" << name << "`: fnv1a64 " << hash << '\n';
    if (!b.provenance.config.empty()) os << "- config: `" << b.provenance.config.dump() << "`\n";
    return os.str();
}

inline Json to_json(const MeanStd& m) {
    return {{"n", m.n}, {"mean", num(m.mean)}, {"std", m.std ? num(*m.std) : Json(nullptr)}};
}

inline Json to_json(const ReportBundle& b) {
    Json j;
    Json groups = Json::array();
    for (const auto& g : b.group_summaries) {
        Json gj;
        gj["treatment"] = to_string(g.treatment);
        gj["n"] = g.n;
        for (auto v : kVariables) {
            const auto s = g.get(v);
            gj[std::string(to_string(v))] = s ? to_json(*s) : Json(nullptr);
        }
        groups.push_back(gj);
    }
    j["group_summaries"] = groups;
    j["pairwise_table"] = b.pairwise_table ? to_json(*b.pairwise_table) : Json({{"skipped", true}});
    j["power_result"] = b.power_result ? to_json(*b.power_result) : Json({{"skipped", true}});
    Json boxes = Json::array();
    for (const auto& s : b.boxplots) {
        Json bj;
        bj["variable"] = to_string(s.variable);
        if (s.stats.empty()) {
            bj["skipped"] = true;
            bj["reason"] = s.skipped_reason;
        } else {
            Json groups_j = Json::array();
            for (const auto& st : s.stats) {
                Json outl = Json::array();
                for (double o : st.outliers) outl.push_back(num(o));
                groups_j.push_back({{"treatment", to_string(st.treatment)},
                                    {"min", num(st.min)},
                                    {"whisker_lo", num(st.whisker_lo)},
                                    {"q1", num(st.q1)},
                                    {"median", num(st.median)},
                                    {"q3", num(st.q3)},
                                    {"whisker_hi", num(st.whisker_hi)},
                                    {"max", num(st.max)},
                                    {"outliers", outl}});
            }
            bj["groups"] = groups_j;
        }
        boxes.push_back(bj);
    }
    j["boxplot_stats"] = boxes;
    j["provenance"] = to_json(b.provenance);
    return j;
}

}  // namespace berrypoll
