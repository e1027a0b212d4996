#pragma once

// JSON forms of model results, synthetic ground truth and provenance. Keys
// keep insertion order; numbers are rounded to 6 significant digits.

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "berrypoll/errors.hpp"
#include "berrypoll/mixedmodel.hpp"
#include "berrypoll/synth.hpp"

namespace berrypoll {

using Json = nlohmann::ordered_json;

inline constexpr std::string_view kToolName = "berrypoll";
inline constexpr std::string_view kToolVersion = "1.0.0";

/// Rounded to 6 significant digits; non-finite values become null.
inline Json num(double v) {
    if (!std::isfinite(v)) return nullptr;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    double r = std::strtod(buf, nullptr);
    if (r == 0.0) r = 0.0;  // drop negative zero
    return r;
}

inline Json num(const std::optional<double>& v) { return v ? num(*v) : Json(nullptr); }

inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputMissing("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string file_hash(const std::string& path) { return hex64(fnv1a64(read_file(path))); }

inline std::string base_name(const std::string& path) {
    const auto pos = path.find_last_of("/\\");
    return pos == std::string::npos ? path : path.substr(pos + 1);
}

struct Provenance {
    std::vector<std::pair<std::string, std::string>> inputs;  ///< file name, FNV-1a 64 hash
    Json config = Json::object();
    std::optional<std::uint64_t> seed;

    void add_input(const std::string& path) { inputs.emplace_back(base_name(path), file_hash(path)); }
};

inline Json to_json(const Provenance& p) {
    Json j;
    j["tool"] = kToolName;
    j["version"] = kToolVersion;
    j["seed"] = p.seed ? Json(*p.seed) : Json(nullptr);
    Json inputs = Json::array();
    for (const auto& [name, hash] : p.inputs) inputs.push_back({{"file", name}, {"fnv1a64", hash}});
    j["inputs"] = inputs;
    j["config"] = p.config;
    return j;
}

inline Json to_json(const ModelSpec& s) {
    return {{"response", s.response}, {"fixed", s.fixed_factor}, {"random", s.random_factors}};
}

inline Json to_json(const FitResult& f, const Design* design = nullptr) {
    Json j;
    if (design) {
        j["model"] = to_json(design->spec);
        j["levels"] = design->fixed_levels;
        j["dropped_rows"] = design->dropped_rows;
    }
    j["converged"] = f.converged;
    j["iterations"] = f.iterations;
    j["n_obs"] = f.n_obs;
    j["n_params"] = f.n_params;
    j["reml_loglik"] = f.zero_residual ? Json(nullptr) : num(f.reml_loglik);
    j["sigma2"] = num(f.sigma2);
    Json vc = Json::array();
    for (std::size_t k = 0; k < f.var_components.size(); ++k)
        vc.push_back({{"factor", f.random_names[k]}, {"variance", num(f.var_components[k])}, {"at_boundary", f.pinned[k]}});
    j["var_components"] = vc;
    Json beta = Json::array();
    for (Eigen::Index k = 0; k < f.beta.size(); ++k) {
        const std::string name = k < static_cast<Eigen::Index>(f.beta_names.size()) ? f.beta_names[std::size_t(k)]
                                                                                      : "beta" + std::to_string(k);
        beta.push_back({{"name", name}, {"estimate", num(f.beta(k))}, {"std_error", num(std::sqrt(std::max(0.0, f.beta_cov(k, k))))}});
    }
    j["beta"] = beta;
    Json cov = Json::array();
    for (Eigen::Index r = 0; r < f.beta_cov.rows(); ++r) {
        Json row = Json::array();
        for (Eigen::Index c = 0; c < f.beta_cov.cols(); ++c) row.push_back(num(f.beta_cov(r, c)));
        cov.push_back(row);
    }
    j["beta_cov"] = cov;
    return j;
}

inline Json to_json(const KrFTest& t) {
    return {{"f_value", num(t.f_stat)}, {"num_df", num(t.num_df)}, {"den_df", num(t.den_df)},
            {"scale", num(t.scale)}, {"p_value", num(t.p_value)}};
}

inline Json to_json(const PairwiseTable& t) {
    Json j;
    j["factor"] = t.factor;
    j["confidence"] = num(t.confidence);
    j["method"] = "Kenward-Roger";
    Json rows = Json::array();
    for (const auto& r : t.rows)
        rows.push_back({{"level_a", r.level_a},
                        {"level_b", r.level_b},
                        {"estimate", num(r.estimate)},
                        {"std_error", num(r.std_error)},
                        {"kr_df", num(r.kr_df)},
                        {"t_value", num(r.t_value)},
                        {"p_value", num(r.p_value)},
                        {"p_value_tukey_adjusted", num(r.p_tukey)},
                        {"ci_lo", num(r.ci_lo)},
                        {"ci_hi", num(r.ci_hi)}});
    j["rows"] = rows;
    return j;
}

inline double json_double(const Json& j, const char* key) {
    if (!j.contains(key)) throw SchemaError(std::string("JSON is missing '") + key + "'");
    const auto& v = j.at(key);
    if (v.is_null()) return std::numeric_limits<double>::quiet_NaN();
    if (!v.is_number()) throw SchemaError(std::string("JSON field '") + key + "' is not a number");
    return v.get<double>();
}

inline PairwiseTable pairwise_from_json(const Json& j) {
    try {
        const Json& t = j.contains("pairwise") ? j.at("pairwise") : j;
        PairwiseTable out;
        out.factor = t.value("factor", "");
        out.confidence = t.contains("confidence") ? json_double(t, "confidence") : 0.95;
        for (const auto& r : t.at("rows")) {
            PairwiseRow row;
            row.level_a = r.at("level_a").get<std::string>();
            row.level_b = r.at("level_b").get<std::string>();
            row.estimate = json_double(r, "estimate");
            row.std_error = json_double(r, "std_error");
            row.kr_df = json_double(r, "kr_df");
            row.t_value = json_double(r, "t_value");
            row.p_value = json_double(r, "p_value");
            row.p_tukey = json_double(r, "p_value_tukey_adjusted");
            row.ci_lo = json_double(r, "ci_lo");
            row.ci_hi = json_double(r, "ci_hi");
            out.rows.push_back(row);
        }
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("malformed pairwise JSON: ") + e.what());
    }
}

inline Json to_json(const PowerResult& p) {
    return {{"label", p.label},
            {"power", num(p.power)},
            {"alpha", num(p.alpha)},
            {"n_sims", p.n_sims},
            {"seed", p.seed},
            {"mc_std_error", num(p.mc_std_error)},
            {"failures", p.failures},
            {"valid", p.valid}};
}

inline PowerResult power_from_json(const Json& j) {
    try {
        const Json& t = j.contains("power_result") ? j.at("power_result") : j;
        PowerResult p;
        p.label = t.value("label", "power");
        p.power = json_double(t, "power");
        p.alpha = json_double(t, "alpha");
        p.n_sims = t.at("n_sims").get<std::size_t>();
        p.seed = t.at("seed").get<std::uint64_t>();
        p.mc_std_error = json_double(t, "mc_std_error");
        p.failures = t.value("failures", std::size_t{0});
        p.valid = t.value("valid", true);
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("malformed power JSON: ") + e.what());
    }
}

inline Json to_json(const PointD& p) { return Json::array({num(p.x), num(p.y)}); }

inline Json to_json(const GroundTruth& g) {
    Json j;
    j["orientation_deg"] = num(g.orientation_deg);
    j["center"] = to_json(g.center);
    j["stem_point"] = to_json(g.stem_point);
    j["area_in2"] = num(g.area_in2);
    j["symmetry_pct"] = num(g.symmetry_pct);
    j["mask_pixels"] = g.mask.pixel_count();
    j["achene_count"] = g.achene_centers.size();
    Json ach = Json::array();
    for (std::size_t i = 0; i < g.achene_centers.size(); ++i)
        ach.push_back({{"center", to_json(g.achene_centers[i])}, {"diameter_px", num(g.achene_diameters_px[i])}});
    j["achenes"] = ach;
    return j;
}

inline Json to_json(const ResponseModel& m) {
    Json effects = Json::object(), variances = Json::object();
    for (const auto& [k, v] : m.effects) effects[k] = num(v);
    for (const auto& [k, v] : m.variances) variances[k] = num(v);
    return {{"intercept", num(m.intercept)}, {"effects", effects}, {"variances", variances}, {"sigma2", num(m.sigma2)}};
}

/// Truth record of a simulated dataset: the generating model and the
/// realised random intercepts.
inline Json to_json(const SynthDataset& d) {
    Json j;
    j["design"] = to_string(d.spec.design);
    j["seed"] = d.spec.seed;
    j["primary"] = to_json(d.spec.primary);
    if (d.spec.design != DesignKind::Field) j["counts"] = to_json(d.spec.counts);
    Json re = Json::object();
    for (const auto& [factor, levels] : d.random_effects) {
        Json lv = Json::object();
        for (const auto& [level, v] : levels) lv[level] = num(v);
        re[factor] = lv;
    }
    j["random_effects"] = re;
    j["n_records"] = d.spec.design == DesignKind::Field ? d.field.size() : d.lab.size();
    return j;
}

inline void write_json(const std::string& path, const Json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputMissing("cannot write '" + path + "'");
    out << j.dump(2) << '\n';
}

inline Json read_json(const std::string& path) {
    const std::string text = read_file(path);
    try {
        return Json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("'" + path + "' is not valid JSON: " + e.what());
    }
}

}  // namespace berrypoll
