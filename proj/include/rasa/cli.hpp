#pragma once
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rasa/config.hpp"
#include "rasa/datamodel.hpp"
#include "rasa/distill.hpp"
#include "rasa/reportprep.hpp"
#include "rasa/survstats.hpp"
#include "rasa/svgplot.hpp"
#include "rasa/synthgen.hpp"
#include "rasa/tff.hpp"

namespace rasa {

// Exit codes: 0 success, 2 usage/config, 3 I/O, 4 degenerate statistics.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitDegenerate = 4;

namespace cli_detail {

namespace fs = std::filesystem;

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ValidationError*>(&e))
        return kExitUsage;
    if (dynamic_cast<const UndefinedStatError*>(&e)) return kExitDegenerate;
    return kExitIo;
}

struct CommonFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<double> gamma;
    std::optional<double> p_aug;
    std::optional<double> lambda;
};

inline RunConfig resolve_config(const CommonFlags& flags) {
    RunConfig rc =
        flags.config_path.empty() ? RunConfig::defaults() : load_run_config(flags.config_path);
    if (flags.seed) {
        rc.train.seed = *flags.seed;
        rc.synth.seed = *flags.seed;
    }
    if (flags.gamma) rc.train.gamma = *flags.gamma;
    if (flags.p_aug) rc.train.p_aug = *flags.p_aug;
    if (flags.lambda) rc.train.lambda_kl = *flags.lambda;
    rc.train.validate();
    return rc;
}

inline std::string fmt4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

inline std::string csv_num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

// Scores a case the way the given stage is deployed: teacher reads full
// bags, the student reads the frozen-teacher sampled view, oracle reads the
// ground-truth latent risk.
struct StageScorer {
    std::string stage;
    double gamma = 0.5;
    std::optional<TffParams> model;
    std::optional<TffParams> sampler;  // teacher used for the student's input pipeline
    std::optional<GroundTruth> truth;

    double score(BagCache& bags, const std::string& id) const {
        if (stage == "oracle") return truth->by_id(id).z;
        if (stage == "teacher")
            return tff_forward(*model, bags.text(id), bags.patches(id)).risk.value();
        CaseSampling cs = sample_case(*sampler, bags, id, gamma);
        return tff_forward(*model, cs.sampled.text, cs.sampled.key_patches).risk.value();
    }
};

inline fs::path trial_dir(const fs::path& run_dir, int trial) {
    return run_dir / ("trial" + std::to_string(trial));
}

inline StageScorer make_scorer(const std::string& stage, const fs::path& run_dir, int trial,
                               const fs::path& manifest_path, const std::string& teacher_override,
                               double gamma) {
    StageScorer scorer;
    scorer.stage = stage;
    scorer.gamma = gamma;
    if (stage == "oracle") {
        fs::path truth_path = manifest_path.parent_path() / "ground_truth.json";
        if (!fs::exists(truth_path))
            throw ConfigError("oracle scoring needs " + truth_path.string());
        scorer.truth = load_ground_truth(truth_path);
        return scorer;
    }
    const fs::path dir = trial_dir(run_dir, trial);
    const fs::path teacher_path =
        teacher_override.empty() ? dir / "teacher.rasc" : fs::path(teacher_override);
    if (stage == "teacher") {
        if (!fs::exists(teacher_path))
            throw ConfigError("missing checkpoint " + teacher_path.string());
        scorer.model = load_checkpoint(teacher_path);
    } else if (stage == "student") {
        const fs::path student_path = dir / "student.rasc";
        if (!fs::exists(student_path))
            throw ConfigError("missing checkpoint " + student_path.string());
        if (!fs::exists(teacher_path))
            throw ConfigError("student scoring needs the sampling teacher checkpoint " +
                              teacher_path.string());
        scorer.model = load_checkpoint(student_path);
        scorer.sampler = load_checkpoint(teacher_path);
    } else {
        throw ConfigError("unknown stage '" + stage + "'");
    }
    return scorer;
}

inline void write_training_log(const fs::path& path, const TrainResult& result) {
    std::string out;
    for (const auto& e : result.log) {
        nlohmann::json line{{"epoch", e.epoch},
                            {"train_loss", e.train_loss},
                            {"skipped_batches", e.skipped_batches}};
        if (std::isnan(e.val_ci))
            line["val_ci"] = nullptr;
        else
            line["val_ci"] = e.val_ci;
        out += line.dump() + "\n";
    }
    nlohmann::json final{{"best_epoch", result.best_epoch}};
    if (std::isnan(result.best_val_ci))
        final["best_val_ci"] = nullptr;
    else
        final["best_val_ci"] = result.best_val_ci;
    out += final.dump() + "\n";
    detail::write_file_bytes(path, out);
}

// ---- commands ----

struct SynthArgs {
    CommonFlags common;
    std::string out_dir;
};

inline int cmd_synth(const SynthArgs& args) {
    RunConfig rc = resolve_config(args.common);
    SynthResult result = generate_cohort(rc.synth, args.out_dir);
    CohortSummary sum = describe_cohort(result.manifest, result.truth);
    std::cout << "generated " << sum.n_cases << " cases under " << args.out_dir
              << " (event rate " << fmt4(sum.event_rate) << ", median time "
              << fmt4(sum.median_time) << ", mean tumor fraction " << fmt4(sum.mean_tumor_fraction)
              << ")\n";
    return kExitOk;
}

struct TrainArgs {
    CommonFlags common;
    std::string manifest_path;
    std::string stage;
    int trial = 0;
    std::string teacher_path;
    std::string out_dir;
};

inline int cmd_train(const TrainArgs& args) {
    RunConfig rc = resolve_config(args.common);
    if (args.trial < 0 || args.trial >= kNumTrials)
        throw ConfigError("--trial must lie in [0," + std::to_string(kNumTrials - 1) + "]");
    CohortManifest manifest = load_manifest(args.manifest_path);
    BagCache bags(manifest);

    const fs::path dir = trial_dir(args.out_dir, args.trial);
    fs::create_directories(dir);

    TrainResult result;
    if (args.stage == "teacher") {
        result = train_teacher(bags, args.trial, rc.train);
    } else if (args.stage == "student") {
        fs::path teacher_path =
            args.teacher_path.empty() ? dir / "teacher.rasc" : fs::path(args.teacher_path);
        if (args.teacher_path.empty() && !fs::exists(teacher_path))
            throw ConfigError("student stage requires --teacher (no checkpoint at " +
                              teacher_path.string() + ")");
        TffParams teacher = load_checkpoint(teacher_path, &rc.train.tff);
        result = train_student(bags, args.trial, teacher, rc.train);
    } else {
        throw ConfigError("--stage must be teacher or student");
    }

    const fs::path ckpt = dir / (args.stage + ".rasc");
    save_checkpoint(result.params, ckpt);
    write_training_log(dir / (args.stage + "_log.jsonl"), result);
    std::cout << "stage=" << args.stage << " trial=" << args.trial << " best_epoch="
              << result.best_epoch << " val_ci="
              << (std::isnan(result.best_val_ci) ? std::string("undefined")
                                                 : fmt4(result.best_val_ci))
              << " checkpoint=" << ckpt.string() << "\n";
    return kExitOk;
}

struct EvaluateArgs {
    CommonFlags common;
    std::string manifest_path;
    std::string stage;
    std::string run_dir;
    std::string teacher_path;
    std::string out_dir;
};

inline int cmd_evaluate(const EvaluateArgs& args) {
    RunConfig rc = resolve_config(args.common);
    CohortManifest manifest = load_manifest(args.manifest_path);
    BagCache bags(manifest);

    std::vector<double> trial_cis;
    std::vector<double> km_ps;
    for (int trial = 0; trial < kNumTrials; ++trial) {
        StageScorer scorer = make_scorer(args.stage, args.run_dir, trial, args.manifest_path,
                                         args.teacher_path, rc.train.gamma);
        const TrialSplit& split = manifest.splits[trial];
        std::vector<double> test_scores;
        std::vector<SurvivalLabel> test_labels;
        for (const auto& id : split.test) {
            test_scores.push_back(scorer.score(bags, id));
            test_labels.push_back(manifest.case_by_id(id).label);
        }
        const bool degenerate =
            std::all_of(test_scores.begin(), test_scores.end(),
                        [&](double s) { return s == test_scores.front(); });
        if (degenerate)
            throw UndefinedStatError("trial " + std::to_string(trial) +
                                     ": undefined CI (all test scores identical)");
        trial_cis.push_back(concordance_index(test_scores, test_labels));

        // median-split log-rank on the test set, threshold from the training split
        double km_p = std::numeric_limits<double>::quiet_NaN();
        try {
            std::vector<double> train_scores;
            for (const auto& id : split.train) train_scores.push_back(scorer.score(bags, id));
            std::sort(train_scores.begin(), train_scores.end());
            const std::size_t n = train_scores.size();
            const double median = n % 2 ? train_scores[n / 2]
                                        : 0.5 * (train_scores[n / 2 - 1] + train_scores[n / 2]);
            std::vector<SurvivalLabel> high, low;
            for (std::size_t i = 0; i < split.test.size(); ++i)
                (test_scores[i] >= median ? high : low).push_back(test_labels[i]);
            if (!high.empty() && !low.empty()) km_p = log_rank_test(high, low).p_value;
        } catch (const UndefinedStatError&) {
        }
        km_ps.push_back(km_p);
    }

    double mean = 0.0;
    for (double c : trial_cis) mean += c;
    mean /= trial_cis.size();
    double var = 0.0;
    for (double c : trial_cis) var += (c - mean) * (c - mean);
    const double stddev = trial_cis.size() > 1 ? std::sqrt(var / (trial_cis.size() - 1)) : 0.0;

    nlohmann::json report;
    report["schema_version"] = 1;
    report["stage"] = args.stage;
    report["trials"] = nlohmann::json::array();
    for (std::size_t t = 0; t < trial_cis.size(); ++t) {
        nlohmann::json jt{{"trial", t}, {"test_ci", trial_cis[t]}};
        if (std::isnan(km_ps[t]))
            jt["km_log_rank_p"] = nullptr;
        else
            jt["km_log_rank_p"] = km_ps[t];
        report["trials"].push_back(jt);
    }
    report["aggregate"] = {{"mean_ci", mean},
                           {"std_ci", stddev},
                           {"formatted", fmt4(mean) + " ± " + fmt4(stddev)}};

    const fs::path out_dir = args.out_dir.empty() ? fs::path(args.run_dir) : fs::path(args.out_dir);
    fs::create_directories(out_dir);
    detail::write_file_bytes(out_dir / ("metrics_report_" + args.stage + ".json"),
                             report.dump(2) + "\n");

    for (std::size_t t = 0; t < trial_cis.size(); ++t)
        std::cout << "trial " << t << ": test CI " << fmt4(trial_cis[t]) << " | KM log-rank p "
                  << (std::isnan(km_ps[t]) ? std::string("undefined") : csv_num(km_ps[t])) << "\n";
    std::cout << args.stage << " test CI: " << fmt4(mean) << " ± " << fmt4(stddev) << "\n";
    return kExitOk;
}

struct KmArgs {
    CommonFlags common;
    std::string manifest_path;
    std::string stage;
    std::string run_dir;
    std::string teacher_path;
    int trial = 0;
    std::string out_dir;
};

inline int cmd_km(const KmArgs& args) {
    RunConfig rc = resolve_config(args.common);
    if (args.trial < 0 || args.trial >= kNumTrials)
        throw ConfigError("--trial must lie in [0," + std::to_string(kNumTrials - 1) + "]");
    CohortManifest manifest = load_manifest(args.manifest_path);
    BagCache bags(manifest);
    StageScorer scorer = make_scorer(args.stage, args.run_dir, args.trial, args.manifest_path,
                                     args.teacher_path, rc.train.gamma);
    const TrialSplit& split = manifest.splits[args.trial];

    std::vector<double> train_scores;
    for (const auto& id : split.train) train_scores.push_back(scorer.score(bags, id));
    std::sort(train_scores.begin(), train_scores.end());
    const std::size_t n = train_scores.size();
    const double median =
        n % 2 ? train_scores[n / 2] : 0.5 * (train_scores[n / 2 - 1] + train_scores[n / 2]);

    std::vector<SurvivalLabel> high, low;
    double max_time = 0.0;
    for (const auto& id : split.test) {
        const SurvivalLabel& label = manifest.case_by_id(id).label;
        (scorer.score(bags, id) >= median ? high : low).push_back(label);
        max_time = std::max(max_time, label.time);
    }
    if (high.empty() || low.empty())
        throw UndefinedStatError("median split left the " +
                                 std::string(high.empty() ? "high" : "low") +
                                 "-risk group empty (all test scores on one side)");

    KmCurve high_curve = kaplan_meier(high);
    KmCurve low_curve = kaplan_meier(low);
    LogRankResult lr = log_rank_test(high, low);

    fs::create_directories(args.out_dir);
    const std::string tag = "km_trial" + std::to_string(args.trial) + "_" + args.stage;

    std::string csv = "group,time,survival,n_risk,n_events\n";
    auto append_curve = [&](const char* group, const KmCurve& curve, std::size_t group_size) {
        csv += std::string(group) + ",0,1,"+ std::to_string(group_size) + ",0\n";
        for (std::size_t i = 0; i < curve.times.size(); ++i)
            csv += std::string(group) + "," + csv_num(curve.times[i]) + "," +
                   csv_num(curve.survival[i]) + "," + std::to_string(curve.n_risk[i]) + "," +
                   std::to_string(curve.n_events[i]) + "\n";
    };
    append_curve("high", high_curve, high.size());
    append_curve("low", low_curve, low.size());
    detail::write_file_bytes(fs::path(args.out_dir) / (tag + ".csv"), csv);

    detail::write_file_bytes(fs::path(args.out_dir) / (tag + ".svg"),
                             km_plot_svg(high_curve, low_curve, max_time, lr.p_value));

    nlohmann::json stats{{"trial", args.trial},
                         {"stage", args.stage},
                         {"median_risk", median},
                         {"n_high", high.size()},
                         {"n_low", low.size()},
                         {"chi_square", lr.chi_square},
                         {"p_value", lr.p_value}};
    detail::write_file_bytes(fs::path(args.out_dir) / (tag + "_stats.json"), stats.dump(2) + "\n");

    std::cout << "trial " << args.trial << " " << args.stage << ": high " << high.size()
              << " / low " << low.size() << ", log-rank chi-square " << csv_num(lr.chi_square)
              << ", p " << csv_num(lr.p_value) << "\n";
    return kExitOk;
}

struct SimmapArgs {
    CommonFlags common;
    std::string manifest_path;
    std::string checkpoint_path;
    std::string case_id;
    std::string gammas_csv = "-1,0.25,0.5,0.75";
    std::string out_file;
};

inline int cmd_simmap(const SimmapArgs& args) {
    CohortManifest manifest = load_manifest(args.manifest_path);
    if (!manifest.has_case(args.case_id))
        throw ConfigError("unknown case id '" + args.case_id + "'");
    if (!fs::exists(args.checkpoint_path))
        throw ConfigError("missing checkpoint " + args.checkpoint_path);
    TffParams teacher = load_checkpoint(args.checkpoint_path);

    std::vector<double> gammas;
    {
        std::string token;
        std::stringstream ss(args.gammas_csv);
        while (std::getline(ss, token, ',')) {
            if (token.empty()) continue;
            try {
                gammas.push_back(std::stod(token));
            } catch (const std::exception&) {
                throw ConfigError("bad gamma value '" + token + "'");
            }
        }
    }
    if (gammas.empty()) throw ConfigError("--gammas must name at least one threshold");

    BagCache bags(manifest);
    SimilarityMap map = export_similarity_map(teacher, bags, args.case_id, gammas);

    std::string csv = "case_id,patch_index,x,y,similarity";
    for (double g : gammas) csv += ",kept@" + std::string(detail::fmt_num(g, "%g"));
    csv += "\n";
    for (const auto& r : map.records) {
        csv += map.case_id + "," + std::to_string(r.patch_index) + "," + std::to_string(r.x) +
               "," + std::to_string(r.y) + "," + csv_num(r.similarity);
        for (bool kept : r.kept) csv += kept ? ",1" : ",0";
        csv += "\n";
    }
    if (!fs::path(args.out_file).parent_path().empty())
        fs::create_directories(fs::path(args.out_file).parent_path());
    detail::write_file_bytes(args.out_file, csv);
    std::cout << "wrote " << map.records.size() << " patch records for " << args.case_id
              << " to " << args.out_file << "\n";
    return kExitOk;
}

struct CleanArgs {
    CommonFlags common;
    std::string input_dir;
    std::string provider;
    std::string cache_dir;
    std::string out_dir;
};

inline int cmd_clean_reports(const CleanArgs& args) {
    RunConfig rc = resolve_config(args.common);
    if (!args.provider.empty()) rc.endpoint.provider = args.provider;
    if (rc.endpoint.provider == "live") {
        const char* key = std::getenv(rc.endpoint.api_key_env.c_str());
        if (key == nullptr || std::string(key).empty())
            throw ConfigError("live provider requires the " + rc.endpoint.api_key_env +
                              " environment variable");
    }
    if (!fs::is_directory(args.input_dir))
        throw IoError("input directory not found: " + args.input_dir);

    ReportCleaner cleaner(rc.prompt, rc.endpoint,
                          args.cache_dir.empty() ? fs::path{} : fs::path(args.cache_dir));
    fs::create_directories(args.out_dir);

    std::vector<fs::path> inputs;
    for (const auto& entry : fs::directory_iterator(args.input_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".txt")
            inputs.push_back(entry.path());
    std::sort(inputs.begin(), inputs.end());

    int cleaned = 0;
    for (const auto& path : inputs) {
        const std::string raw = detail::read_file_bytes(path);
        CleaningRecord rec = cleaner.clean(path.stem().string(), raw);
        detail::write_file_bytes(fs::path(args.out_dir) / (path.stem().string() + ".cleaned.txt"),
                                 rec.cleaned_text + "\n");
        ++cleaned;
    }
    std::cout << "cleaned " << cleaned << " reports (provider calls "
              << cleaner.stats().provider_calls << ", cache hits " << cleaner.stats().cache_hits
              << ")\n";
    return kExitOk;
}

inline void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--config", flags.config_path, "configuration document (JSON)");
    cmd->add_option("--seed", flags.seed, "seed override");
    cmd->add_option("--gamma", flags.gamma, "sampling threshold override");
    cmd->add_option("--p-aug", flags.p_aug, "augmentation probability override");
    cmd->add_option("--lambda", flags.lambda, "KL coefficient override");
}

}  // namespace cli_detail

inline int run_cli(int argc, char** argv) {
    using namespace cli_detail;

    CLI::App app{"rasa: report-auxiliary self-distillation pipeline for WSI survival analysis"};
    app.require_subcommand(1);

    SynthArgs synth_args;
    auto* synth = app.add_subcommand("synth", "generate a synthetic cohort");
    add_common(synth, synth_args.common);
    synth->add_option("--out", synth_args.out_dir, "output directory")->required();

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "train a teacher or student model on one trial");
    add_common(train, train_args.common);
    train->add_option("--manifest", train_args.manifest_path, "cohort manifest")->required();
    train->add_option("--stage", train_args.stage, "teacher|student")->required();
    train->add_option("--trial", train_args.trial, "trial index 0..4")->required();
    train->add_option("--teacher", train_args.teacher_path, "teacher checkpoint (student stage)");
    train->add_option("--out", train_args.out_dir, "run directory")->required();

    EvaluateArgs eval_args;
    auto* evaluate = app.add_subcommand("evaluate", "test-set concordance across the 5 trials");
    add_common(evaluate, eval_args.common);
    evaluate->add_option("--manifest", eval_args.manifest_path, "cohort manifest")->required();
    evaluate->add_option("--stage", eval_args.stage, "teacher|student|oracle")->required();
    evaluate->add_option("--run-dir", eval_args.run_dir, "directory holding trial*/stage.rasc");
    evaluate->add_option("--teacher", eval_args.teacher_path, "teacher checkpoint override");
    evaluate->add_option("--out", eval_args.out_dir, "report directory (default: run dir)");

    KmArgs km_args;
    auto* km = app.add_subcommand("km", "median-split Kaplan-Meier analysis for one trial");
    add_common(km, km_args.common);
    km->add_option("--manifest", km_args.manifest_path, "cohort manifest")->required();
    km->add_option("--stage", km_args.stage, "teacher|student|oracle")->required();
    km->add_option("--run-dir", km_args.run_dir, "directory holding trial*/stage.rasc");
    km->add_option("--teacher", km_args.teacher_path, "teacher checkpoint override");
    km->add_option("--trial", km_args.trial, "trial index 0..4")->required();
    km->add_option("--out", km_args.out_dir, "output directory")->required();

    SimmapArgs simmap_args;
    auto* simmap = app.add_subcommand("simmap", "export a text-patch similarity map");
    add_common(simmap, simmap_args.common);
    simmap->add_option("--manifest", simmap_args.manifest_path, "cohort manifest")->required();
    simmap->add_option("--checkpoint", simmap_args.checkpoint_path, "teacher checkpoint")
        ->required();
    simmap->add_option("--case", simmap_args.case_id, "case id")->required();
    simmap->add_option("--gammas", simmap_args.gammas_csv, "comma-separated thresholds");
    simmap->add_option("--out", simmap_args.out_file, "output CSV path")->required();

    CleanArgs clean_args;
    auto* clean = app.add_subcommand("clean-reports", "rewrite raw pathology reports");
    add_common(clean, clean_args.common);
    clean->add_option("--input", clean_args.input_dir, "directory of .txt reports")->required();
    clean->add_option("--provider", clean_args.provider, "live|mock");
    clean->add_option("--cache", clean_args.cache_dir, "cleaning cache directory");
    clean->add_option("--out", clean_args.out_dir, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_args);
        if (train->parsed()) return cmd_train(train_args);
        if (evaluate->parsed()) return cmd_evaluate(eval_args);
        if (km->parsed()) return cmd_km(km_args);
        if (simmap->parsed()) return cmd_simmap(simmap_args);
        if (clean->parsed()) return cmd_clean_reports(clean_args);
    } catch (const std::exception& e) {
        std::cerr << "rasa: error: " << e.what() << "\n";
        return exit_code_for(e);
    }
    return kExitUsage;
}

}  // namespace rasa
