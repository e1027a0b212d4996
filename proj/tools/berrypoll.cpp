// berrypoll: image morphometrics and mixed-model inference for blocked
// pollination experiments.

#include <CLI11.hpp>

#include <iostream>

#include "berrypoll/cli.hpp"

namespace {

using namespace berrypoll::cli;

void add_common(CLI::App* cmd, CommonOptions& c) {
    cmd->add_option("--config", c.config, "key = value configuration file");
    cmd->add_option("--seed", c.seed, "random seed (u64)");
    cmd->add_option("--out", c.out, "output file or directory");
    cmd->add_option("--jobs", c.jobs, "worker threads")->check(CLI::Range(1u, 1024u));
}

void add_model(CLI::App* cmd, ModelOptions& m) {
    add_common(cmd, m.common);
    cmd->add_option("data", m.data, "field or lab CSV")->required();
    cmd->add_option("--spec", m.spec_file, "model spec file (response, fixed, random keys)");
    cmd->add_option("--response", m.response, "response column");
    cmd->add_option("--fixed", m.fixed, "fixed factor");
    cmd->add_option("--random", m.random, "random-intercept factor (repeatable)")->take_all();
    cmd->add_option("--experiment", m.experiment, "lab data: height or pattern");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Berry morphometrics and mixed-model analysis of pollination experiments", "berrypoll"};
    app.set_version_flag("--version", std::string(berrypoll::kToolVersion));
    app.require_subcommand(1);

    AnalyzeOptions analyze;
    auto* a = app.add_subcommand("analyze", "measure every berry image in a directory");
    add_common(a, analyze.common);
    a->add_option("images", analyze.image_dir, "directory of PNG/JPEG images")->required();

    ModelOptions fit;
    add_model(app.add_subcommand("fit", "fit a REML linear mixed model"), fit);

    ModelOptions compare;
    add_model(app.add_subcommand("compare", "Kenward-Roger pairwise comparisons of the fixed factor"), compare);

    PowerOptions power;
    auto* p = app.add_subcommand("power", "Monte-Carlo power of the omnibus fixed-factor test");
    add_model(p, power.model);
    p->add_option("--n-sims", power.n_sims, "simulated datasets (>= 100)");
    p->add_option("--alpha", power.alpha, "test level");
    p->add_option("--effect", power.effects, "level=difference from the reference level (repeatable)");
    p->add_option("--variance", power.variances, "factor=variance (repeatable)");
    p->add_option("--sigma2", power.sigma2, "residual variance");

    ReportOptions report;
    auto* r = app.add_subcommand("report", "summary tables and boxplots for a field dataset");
    add_common(r, report.common);
    r->add_option("field", report.field_csv, "field CSV")->required();
    r->add_option("--metrics", report.metrics_csv, "imaging metrics CSV");
    r->add_option("--pairwise", report.pairwise_json, "output of `compare`");
    r->add_option("--power", report.power_json, "output of `power`");

    SynthOptions synth;
    auto* s = app.add_subcommand("synth", "generate a synthetic corpus from a spec file");
    add_common(s, synth.common);
    s->add_option("spec", synth.spec_file, "synth spec file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::RequiredError& e) {
        app.exit(e);
        return kInputMissing;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : int(kValidation);
    }

    auto& log = std::cerr;
    if (a->parsed()) return cmd_analyze(analyze, log);
    if (app.got_subcommand("fit")) return cmd_fit(fit, log);
    if (app.got_subcommand("compare")) return cmd_compare(compare, log);
    if (p->parsed()) return cmd_power(power, log);
    if (r->parsed()) return cmd_report(report, log);
    if (s->parsed()) return cmd_synth(synth, log);
    return kValidation;
}
