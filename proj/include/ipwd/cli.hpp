#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ipwd/config.hpp"
#include "ipwd/errors.hpp"
#include "ipwd/report.hpp"
#include "ipwd/run.hpp"

namespace ipwd {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitDiverged = 2, kExitIo = 3 };

struct CommandSpec {
    std::string subcommand;
    std::string config_path;
    std::string out_dir;
    std::vector<std::string> presets;
    std::vector<std::string> overrides;
    std::string checkpoint;
    std::string run_dir;
    std::string baseline_dir;
};

/// --out, else $IPWD_RUN_DIR/<subcommand>, else runs/<subcommand>.
inline fs::path output_dir(const CommandSpec& spec) {
    if (!spec.out_dir.empty()) return spec.out_dir;
    const char* root = std::getenv("IPWD_RUN_DIR");
    return fs::path(root != nullptr && *root != '\0' ? root : "runs") / spec.subcommand;
}

inline RunConfig config_for(const CommandSpec& spec) {
    std::optional<Json> doc;
    if (!spec.config_path.empty()) doc = read_json_file(spec.config_path);
    std::vector<std::string> overrides = spec.overrides;
    // The subcommand decides the regime, whatever the presets say.
    if (spec.subcommand == "train-teacher") overrides.push_back("regime=TEACHER");
    if (spec.subcommand == "distill") {
        overrides.push_back("regime=TWO_STAGE");
        if (!spec.checkpoint.empty()) overrides.push_back("teacher.checkpoint=" + spec.checkpoint);
    }
    if (spec.subcommand == "self-distill") overrides.push_back("regime=ONE_STAGE");
    return build_config(spec.presets, doc ? &*doc : nullptr, overrides);
}

inline int execute(const CommandSpec& spec, std::ostream& out) {
    if (spec.subcommand == "report") {
        const auto summary = emit_reports(spec.run_dir, spec.baseline_dir.empty() ? std::nullopt
                                                                                 : std::optional<fs::path>(spec.baseline_dir));
        out << "reports written to " << summary.directory.string() << '\n';
        return kExitOk;
    }
    const RunConfig cfg = config_for(spec);
    const fs::path dir = output_dir(spec);
    out << to_json(cfg).dump(2) << '\n';

    auto print_metrics = [&](const MetricBundle& m) {
        out << "top1 " << format_double(m.top1) << "  ece " << format_double(m.ece) << "  aurc "
            << format_double(m.aurc) << "\n";
    };
    if (spec.subcommand == "gen-data") {
        run_gen_data(cfg, dir);
    } else if (spec.subcommand == "train-teacher") {
        print_metrics(run_train_teacher(cfg, dir).evaluation.metrics);
    } else if (spec.subcommand == "distill") {
        print_metrics(run_distill(cfg, dir).evaluation.metrics);
    } else if (spec.subcommand == "self-distill") {
        print_metrics(run_self_distill(cfg, dir).evaluation.metrics);
    } else if (spec.subcommand == "eval") {
        print_metrics(run_eval(cfg, spec.checkpoint, dir).metrics);
    } else if (spec.subcommand == "profile-teacher") {
        const auto profile = run_profile_teacher(cfg, spec.checkpoint, dir);
        for (const auto& c : profile.curves) {
            out << "tau " << format_double(c.tau) << "  max/min " << format_double(c.imbalance_ratio) << '\n';
        }
    }
    out << "run directory " << dir.string() << '\n';
    return kExitOk;
}

/// Parses argv and runs one subcommand. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Propensity-weighted knowledge distillation"};
    app.require_subcommand(1, 1);
    CommandSpec spec;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", spec.config_path, "JSON config document")->check(CLI::ExistingFile);
        sub->add_option("--out", spec.out_dir, "run directory");
        sub->add_option("--preset", spec.presets, "named preset, applied in order")->take_all()->allow_extra_args(false);
        sub->add_option("--set", spec.overrides, "dotted-key=value override")->allow_extra_args(false);
    };
    for (const char* name : {"gen-data", "train-teacher", "distill", "self-distill"}) {
        auto* sub = app.add_subcommand(name);
        add_common(sub);
        if (std::string(name) == "distill") sub->add_option("--checkpoint", spec.checkpoint, "pretrained teacher");
    }
    for (const char* name : {"eval", "profile-teacher"}) {
        auto* sub = app.add_subcommand(name);
        add_common(sub);
        sub->add_option("--checkpoint", spec.checkpoint, "checkpoint to load")->required();
    }
    auto* report = app.add_subcommand("report");
    report->add_option("--run", spec.run_dir, "run directory with predictions.csv")->required();
    report->add_option("--baseline", spec.baseline_dir, "baseline run directory for deltas");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kExitConfig;
    }
    spec.subcommand = app.get_subcommands().front()->get_name();

    try {
        return execute(spec, out);
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const InvalidArgument& e) {
        err << "invalid argument: " << e.what() << '\n';
        return kExitConfig;
    } catch (const TrainingDiverged& e) {
        err << "training diverged: " << e.what() << '\n';
        return kExitDiverged;
    } catch (const IoError& e) {
        err << "i/o error: " << e.what() << '\n';
        return kExitIo;
    } catch (const CheckpointFormatError& e) {
        err << "bad checkpoint: " << e.what() << '\n';
        return kExitIo;
    } catch (const ParseError& e) {
        err << "malformed input: " << e.what() << '\n';
        return kExitIo;
    }
}

}  // namespace ipwd
