#pragma once

// Command implementations behind the berrypoll executable. Each returns a
// process exit code and writes diagnostics to the supplied log stream.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "berrypoll/config.hpp"
#include "berrypoll/dataset.hpp"
#include "berrypoll/errors.hpp"
#include "berrypoll/image_io.hpp"
#include "berrypoll/imaging.hpp"
#include "berrypoll/mixedmodel.hpp"
#include "berrypoll/report.hpp"
#include "berrypoll/serialize.hpp"
#include "berrypoll/synth.hpp"

namespace berrypoll::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kInputMissing = 2, kValidation = 3, kConvergence = 4 };

inline int exit_code_for(const Error& e) {
    if (e.kind() == "InputMissing") return kInputMissing;
    if (e.kind() == "NotConverged") return kConvergence;
    return kValidation;
}

/// Runs `body`, mapping library failures to exit codes and logging them.
template <typename F>
int guarded(std::ostream& log, F&& body) {
    try {
        return body();
    } catch (const Error& e) {
        log << "error: " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const nlohmann::json::exception& e) {
        log << "error: malformed JSON: " << e.what() << '\n';
        return kValidation;
    } catch (const fs::filesystem_error& e) {
        log << "error: " << e.what() << '\n';
        return kInputMissing;
    }
}

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    unsigned jobs = 1;
};

inline KeyValueConfig load_config(const CommonOptions& c) {
    return c.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(c.config);
}

inline Json config_json(const KeyValueConfig& kv) {
    Json j = Json::object();
    for (const auto& [k, v] : kv.entries()) j[k] = v.size() == 1 ? Json(v.front()) : Json(v);
    return j;
}

inline void write_text(const std::string& path, const std::string& text) {
    if (path == "-") {
        std::cout << text;
        return;
    }
    if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputMissing("cannot write '" + path + "'");
    out << text;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeOptions {
    CommonOptions common;
    std::string image_dir;
};

struct ImageName {
    std::string berry_id;
    std::string view;
};

/// `<berry_id>_front.png` / `<berry_id>_side.jpg`; other names are front views
/// of a berry named after the file stem.
inline ImageName parse_image_name(const fs::path& p) {
    const std::string stem = p.stem().string();
    for (const char* view : {"front", "side"}) {
        const std::string suffix = std::string("_") + view;
        if (stem.size() > suffix.size() && stem.compare(stem.size() - suffix.size(), suffix.size(), suffix) == 0)
            return {stem.substr(0, stem.size() - suffix.size()), view};
    }
    return {stem, "front"};
}

inline bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

inline int cmd_analyze(const AnalyzeOptions& opt, std::ostream& log) {
    return guarded(log, [&] {
        const KeyValueConfig kv = load_config(opt.common);
        const ImagingConfig cfg = ImagingConfig::from_config(kv);
        if (!fs::is_directory(opt.image_dir)) throw InputMissing("image directory '" + opt.image_dir + "' not found");
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(opt.image_dir))
            if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw InputMissing("no PNG or JPEG files in '" + opt.image_dir + "'");

        struct Outcome {
            std::optional<MetricsRow> row;
            std::string error;
            bool unreadable = false;
        };
        std::vector<Outcome> results(files.size());
        auto work = [&](std::size_t i) {
            try {
                const RasterImage img = read_image(files[i].string(), cfg.ppi);
                const ImageAnalysis a = analyze_image(img, cfg);
                const ImageName name = parse_image_name(files[i]);
                results[i].row = MetricsRow{name.berry_id, name.view, {a.morphology, a.achenes}};
            } catch (const InvalidImage& e) {
                results[i].error = e.what();
                results[i].unreadable = true;
            } catch (const Error& e) {
                results[i].error = e.what();
            }
        };
        const unsigned jobs = std::max(1u, std::min<unsigned>(opt.common.jobs, static_cast<unsigned>(files.size())));
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < jobs; ++t)
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < files.size(); i = next++) work(i);
            });
        for (auto& th : pool) th.join();

        std::ostringstream csv;
        write_metrics_header(csv);
        std::size_t ok = 0, unreadable = 0;
        for (std::size_t i = 0; i < files.size(); ++i) {
            if (results[i].row) {
                write_metrics_row(csv, *results[i].row);
                ++ok;
            } else {
                unreadable += results[i].unreadable ? 1 : 0;
                log << "skip " << files[i].filename().string() << ": " << results[i].error << '\n';
            }
        }
        if (ok == 0) {
            if (unreadable == files.size()) throw InputMissing("no readable image in '" + opt.image_dir + "'");
            throw InvalidSpec("no image could be analysed");
        }
        write_text(opt.common.out.empty() ? "metrics.csv" : opt.common.out, csv.str());
        log << "analysed " << ok << " of " << files.size() << " images\n";
        return int(kOk);
    });
}

// ---------------------------------------------------------------------------
// model commands

struct ModelOptions {
    CommonOptions common;
    std::string data;
    std::string spec_file;
    std::string response;
    std::string fixed;
    std::vector<std::string> random;
    std::string experiment;  ///< lab data: "height" or "pattern"
};

struct LoadedModel {
    Design design;
    FitOptions fit_options;
    KeyValueConfig config;
    Provenance provenance;
};

inline std::string first_line(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputMissing("cannot open '" + path + "'");
    std::string line;
    std::getline(in, line);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);
    return line;
}

inline ExperimentWindow window_from(const KeyValueConfig& kv) {
    ExperimentWindow w;
    for (auto [key, slot] : {std::pair{"window_start", &w.first}, std::pair{"window_end", &w.last}})
        if (auto v = kv.get(key)) {
            auto d = Date::parse(*v);
            if (!d) throw InvalidSpec(std::string(key) + " is not an ISO-8601 date");
            *slot = *d;
        }
    return w;
}

/// Spec file, then config file, supply model keys; flags override both.
inline ModelSpec resolve_spec(const ModelOptions& opt, const KeyValueConfig& kv) {
    KeyValueConfig src = kv;
    if (!opt.spec_file.empty()) src = KeyValueConfig::load(opt.spec_file);
    ModelSpec s;
    s.response = src.get_string("response", "");
    s.fixed_factor = src.get_string("fixed", "");
    for (const auto& entry : src.get_all("random"))
        for (const auto& part : split(entry, ','))
            if (!trim(part).empty()) s.random_factors.push_back(trim(part));
    if (!opt.response.empty()) s.response = opt.response;
    if (!opt.fixed.empty()) s.fixed_factor = opt.fixed;
    if (!opt.random.empty()) s.random_factors = opt.random;
    s.validate();
    return s;
}

inline LoadedModel load_model(const ModelOptions& opt) {
    LoadedModel m;
    m.config = load_config(opt.common);
    const ModelSpec spec = resolve_spec(opt, m.config);
    const std::string header = first_line(opt.data);
    ModelFrame frame;
    if (header == kFieldHeader) {
        frame = to_frame(load_field_csv(opt.data, window_from(m.config)));
    } else if (header == kLabHeader) {
        auto records = load_lab_csv(opt.data);
        const std::string exp = opt.experiment.empty() ? m.config.get_string("experiment", "") : opt.experiment;
        if (!exp.empty()) {
            if (exp != "height" && exp != "pattern") throw InvalidSpec("experiment must be 'height' or 'pattern'");
            std::erase_if(records, [&](const LabRecord& r) { return to_string(r.experiment) != exp; });
        }
        frame = to_frame(records);
    } else {
        throw SchemaError("'" + opt.data + "' has neither the field nor the lab header");
    }
    m.design = build_design(frame, spec);
    m.fit_options.max_iterations = static_cast<int>(m.config.get_int("max_iterations", m.fit_options.max_iterations));
    if (m.fit_options.max_iterations < 1) throw InvalidSpec("max_iterations must be >= 1");
    m.provenance.add_input(opt.data);
    m.provenance.seed = opt.common.seed;
    m.provenance.config = config_json(m.config);
    m.provenance.config["model"] = to_json(spec);
    if (!opt.experiment.empty()) m.provenance.config["experiment"] = opt.experiment;
    return m;
}

inline std::string default_out(const CommonOptions& c, const char* fallback) { return c.out.empty() ? fallback : c.out; }

inline int cmd_fit(const ModelOptions& opt, std::ostream& log) {
    return guarded(log, [&] {
        LoadedModel m = load_model(opt);
        const FitResult fit = fit_reml(m.design, m.fit_options);
        Json j;
        j["fit"] = to_json(fit, &m.design);
        j["provenance"] = to_json(m.provenance);
        write_text(default_out(opt.common, "fit.json"), j.dump(2) + "\n");
        if (m.design.dropped_rows) log << "dropped " << m.design.dropped_rows << " rows with a missing response\n";
        if (!fit.converged) throw NotConverged("REML did not converge in " + std::to_string(fit.iterations) + " iterations");
        return int(kOk);
    });
}

inline int cmd_compare(const ModelOptions& opt, std::ostream& log) {
    return guarded(log, [&] {
        LoadedModel m = load_model(opt);
        const FitResult fit = fit_reml(m.design, m.fit_options);
        if (!fit.converged) {
            Json j;
            j["fit"] = to_json(fit, &m.design);
            j["provenance"] = to_json(m.provenance);
            write_text(default_out(opt.common, "compare.json"), j.dump(2) + "\n");
            throw NotConverged("REML did not converge; no comparisons computed");
        }
        const PairwiseTable table = pairwise(fit, m.design);
        Json j;
        j["fit"] = to_json(fit, &m.design);
        j["omnibus"] = to_json(omnibus_test(fit));
        j["pairwise"] = to_json(table);
        j["provenance"] = to_json(m.provenance);
        write_text(default_out(opt.common, "compare.json"), j.dump(2) + "\n");
        return int(kOk);
    });
}

struct PowerOptions {
    ModelOptions model;
    std::optional<std::size_t> n_sims;
    std::optional<double> alpha;
    std::vector<std::string> effects;    ///< level=value, difference from the reference level
    std::vector<std::string> variances;  ///< factor=value
    std::optional<double> sigma2;
};

inline std::pair<std::string, double> parse_assignment(const std::string& s, const char* what) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw InvalidSpec(std::string(what) + " must look like name=value: '" + s + "'");
    auto v = parse_double(s.substr(eq + 1));
    if (!v) throw InvalidSpec(std::string(what) + " value is not a number: '" + s + "'");
    return {trim(s.substr(0, eq)), *v};
}

inline int cmd_power(const PowerOptions& opt, std::ostream& log) {
    return guarded(log, [&] {
        LoadedModel m = load_model(opt.model);
        const FitResult fit = fit_reml(m.design, m.fit_options);
        if (!fit.converged) throw NotConverged("REML did not converge; power needs a converged fit");
        PowerConfig cfg = observed_power_config(fit);
        cfg.n_sims = opt.n_sims.value_or(static_cast<std::size_t>(m.config.get_int("n_sims", 1000)));
        cfg.alpha = opt.alpha.value_or(m.config.get_double("alpha", 0.05));
        cfg.seed = opt.model.common.seed.value_or(static_cast<std::uint64_t>(m.config.get_int("seed", 1)));
        cfg.jobs = opt.model.common.jobs;
        for (const auto& e : opt.effects) {
            const auto [level, value] = parse_assignment(e, "--effect");
            const auto& lv = m.design.fixed_levels;
            const auto it = std::find(lv.begin(), lv.end(), level);
            if (it == lv.end()) throw UnknownFactor("no level '" + level + "' in '" + m.design.spec.fixed_factor + "'");
            if (it == lv.begin()) throw InvalidSpec("'" + level + "' is the reference level; its effect is 0");
            cfg.beta(it - lv.begin()) = value;
            cfg.observed = false;
        }
        for (const auto& v : opt.variances) {
            const auto [factor, value] = parse_assignment(v, "--variance");
            const auto& names = m.design.spec.random_factors;
            const auto it = std::find(names.begin(), names.end(), factor);
            if (it == names.end()) throw UnknownFactor("'" + factor + "' is not a random factor of the model");
            cfg.tau2[static_cast<std::size_t>(it - names.begin())] = value;
            cfg.observed = false;
        }
        if (opt.sigma2) {
            cfg.sigma2 = *opt.sigma2;
            cfg.observed = false;
        }
        const PowerResult res = power_mc(m.design, cfg);
        m.provenance.seed = cfg.seed;
        m.provenance.config["n_sims"] = cfg.n_sims;
        m.provenance.config["alpha"] = num(cfg.alpha);
        Json j;
        j["power_result"] = to_json(res);
        Json truth;
        Json beta = Json::array();
        for (Eigen::Index k = 0; k < cfg.beta.size(); ++k) beta.push_back(num(cfg.beta(k)));
        truth["beta"] = beta;
        truth["sigma2"] = num(cfg.sigma2);
        Json tau = Json::object();
        for (std::size_t k = 0; k < cfg.tau2.size(); ++k) tau[m.design.spec.random_factors[k]] = num(cfg.tau2[k]);
        truth["var_components"] = tau;
        j["simulation_model"] = truth;
        j["provenance"] = to_json(m.provenance);
        write_text(default_out(opt.model.common, "power.json"), j.dump(2) + "\n");
        if (!res.valid) log << "warning: " << res.failures << " of " << res.n_sims << " replicates failed; result invalid\n";
        return int(kOk);
    });
}

// ---------------------------------------------------------------------------
// report

struct ReportOptions {
    CommonOptions common;
    std::string field_csv;
    std::string metrics_csv;
    std::string pairwise_json;
    std::string power_json;
};

inline int cmd_report(const ReportOptions& opt, std::ostream& log) {
    return guarded(log, [&] {
        const KeyValueConfig kv = load_config(opt.common);
        Provenance prov;
        prov.config = config_json(kv);
        prov.seed = opt.common.seed;
        auto records = load_field_csv(opt.field_csv, window_from(kv));
        prov.add_input(opt.field_csv);
        if (!opt.metrics_csv.empty()) {
            join_metrics(records, load_metrics_csv(opt.metrics_csv));
            prov.add_input(opt.metrics_csv);
        }
        std::optional<PairwiseTable> pw;
        if (!opt.pairwise_json.empty()) {
            pw = pairwise_from_json(read_json(opt.pairwise_json));
            prov.add_input(opt.pairwise_json);
        }
        std::optional<PowerResult> power;
        if (!opt.power_json.empty()) {
            power = power_from_json(read_json(opt.power_json));
            prov.add_input(opt.power_json);
        }
        const ReportBundle bundle = make_report(records, pw, power, prov);
        const fs::path dir = opt.common.out.empty() ? fs::path("report") : fs::path(opt.common.out);
        fs::create_directories(dir);
        write_text((dir / "report.md").string(), render_markdown(bundle));
        write_text((dir / "report.json").string(), to_json(bundle).dump(2) + "\n");
        for (const auto& s : bundle.boxplots)
            if (!s.stats.empty())
                write_text((dir / boxplot_file_name(s.variable)).string(), render_boxplot_svg(records, s.stats, s.variable));
        if (!bundle.pairwise_table) log << "note: pairwise section skipped\n";
        return int(kOk);
    });
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
    CommonOptions common;
    std::string spec_file;
};

inline int cmd_synth(const SynthOptions& opt, std::ostream& log) {
    return guarded(log, [&] {
        KeyValueConfig kv = KeyValueConfig::load(opt.spec_file);
        if (opt.common.seed) kv.set("seed", std::to_string(*opt.common.seed));
        const fs::path dir = opt.common.out.empty() ? fs::path("synth_out") : fs::path(opt.common.out);
        const std::string design = kv.get_string("design", "field");
        const ImagingConfig icfg = ImagingConfig::from_config(kv);
        const auto seed = static_cast<std::uint64_t>(kv.get_int("seed", 1));

        std::vector<std::string> written, warnings;
        auto emit = [&](const std::string& rel, const std::string& content) {
            write_text((dir / rel).string(), content);
            written.push_back(rel);
        };
        auto emit_berry = [&](const std::string& name, const SynthBerrySpec& spec) {
            for (auto& w : detector_warnings(spec, icfg.achene)) warnings.push_back(name + ": " + w);
            const SynthBerry b = gen_berry(spec);
            fs::create_directories(dir / "images");
            const std::string png = "images/" + name + ".png";
            write_png((dir / png).string(), b.image);
            written.push_back(png);
            emit("images/" + name + ".json", to_json(b.truth).dump(2) + "\n");
        };

        if (design == "berries") {
            const auto n = kv.get_int("n_berries", 10);
            if (n < 1) throw InvalidSpec("n_berries must be >= 1");
            Rng rng(seed);
            for (long long i = 1; i <= n; ++i) {
                SynthBerrySpec s = random_berry_spec(rng, seed * 1000003ULL + static_cast<std::uint64_t>(i));
                s.ppi = icfg.ppi;
                if (kv.has("achene_diameter")) s.achene_diameter_px = kv.get_double("achene_diameter", 8.0);
                char name[48];
                std::snprintf(name, sizeof name, "berry_%03lld_front", i);
                emit_berry(name, s);
            }
        } else {
            const SynthDatasetSpec spec = SynthDatasetSpec::from_config(kv);
            SynthDataset ds = gen_dataset(spec);
            if (spec.design == DesignKind::Field) {
                if (kv.get_string("images", "false") == "true") {
                    const double ppi = kv.get_double("ppi", 100.0);
                    for (auto& r : ds.field) {
                        const std::uint64_t s = fnv1a64(r.berry_id) ^ seed;
                        emit_berry(r.berry_id + "_front", berry_spec_for_record(r, false, ppi, s));
                        emit_berry(r.berry_id + "_side", berry_spec_for_record(r, true, ppi, s + 1));
                        r.front_image = "images/" + r.berry_id + "_front.png";
                        r.side_image = "images/" + r.berry_id + "_side.png";
                    }
                }
                std::ostringstream csv;
                write_field_csv(csv, ds.field);
                emit("field.csv", csv.str());
            } else {
                std::ostringstream csv;
                write_lab_csv(csv, ds.lab);
                emit("lab.csv", csv.str());
            }
            emit("truth.json", to_json(ds).dump(2) + "\n");
        }

        for (const auto& w : warnings) log << "warning: " << w << '\n';
        Json manifest;
        manifest["tool"] = kToolName;
        manifest["version"] = kToolVersion;
        manifest["design"] = design;
        manifest["seed"] = seed;
        Json files = Json::array();
        for (const auto& rel : written) files.push_back({{"file", rel}, {"fnv1a64", file_hash((dir / rel).string())}});
        manifest["files"] = files;
        manifest["warnings"] = warnings;
        write_json((dir / "manifest.json").string(), manifest);
        log << "wrote " << written.size() << " files to " << dir.string() << '\n';
        return int(kOk);
    });
}

}  // namespace berrypoll::cli
