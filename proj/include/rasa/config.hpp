#pragma once
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "rasa/datamodel.hpp"
#include "rasa/distill.hpp"
#include "rasa/reportprep.hpp"
#include "rasa/synthgen.hpp"

namespace rasa {

// One configuration document drives every command; flags override individual
// keys. Unknown keys are rejected, all at once.
struct RunConfig {
    SynthConfig synth;
    TrainConfig train;
    CleaningPrompt prompt = CleaningPrompt::defaults();
    ServiceEndpoint endpoint;

    static RunConfig defaults() {
        RunConfig rc;
        // desk-scale training defaults for the synthetic pipeline
        rc.train.learning_rate = 1e-3;
        rc.train.seed = 1;
        rc.train.tff = TffConfig{24, 24, 32, 4, 1, 1, 2, 0};
        return rc;
    }
};

namespace detail {

struct KeyChecker {
    std::vector<std::string> unknown;

    void check(const nlohmann::json& obj, const std::string& prefix,
               const std::set<std::string>& known) {
        for (auto it = obj.begin(); it != obj.end(); ++it)
            if (!known.count(it.key())) unknown.push_back(prefix + it.key());
    }
};

template <class T>
void maybe_get(const nlohmann::json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& doc) {
    RunConfig rc = RunConfig::defaults();
    detail::KeyChecker checker;
    checker.check(doc, "", {"schema_version", "synth", "train", "report"});

    try {
        if (doc.contains("synth")) {
            const auto& s = doc.at("synth");
            checker.check(s, "synth.",
                          {"n_cases", "d_patch", "d_text", "patches_min", "patches_max",
                           "tumor_link_slope", "hazard_coefficient", "baseline_hazard",
                           "censor_hazard", "noise_scale", "seed"});
            detail::maybe_get(s, "n_cases", rc.synth.n_cases);
            detail::maybe_get(s, "d_patch", rc.synth.d_patch);
            detail::maybe_get(s, "d_text", rc.synth.d_text);
            detail::maybe_get(s, "patches_min", rc.synth.patches_min);
            detail::maybe_get(s, "patches_max", rc.synth.patches_max);
            detail::maybe_get(s, "tumor_link_slope", rc.synth.tumor_link_slope);
            detail::maybe_get(s, "hazard_coefficient", rc.synth.hazard_coefficient);
            detail::maybe_get(s, "baseline_hazard", rc.synth.baseline_hazard);
            detail::maybe_get(s, "censor_hazard", rc.synth.censor_hazard);
            detail::maybe_get(s, "noise_scale", rc.synth.noise_scale);
            detail::maybe_get(s, "seed", rc.synth.seed);
        }
        if (doc.contains("train")) {
            const auto& t = doc.at("train");
            checker.check(t, "train.",
                          {"gamma", "p_aug", "lambda", "learning_rate", "epochs", "batch_size",
                           "seed", "p_mix", "mix_convention", "tff"});
            detail::maybe_get(t, "gamma", rc.train.gamma);
            detail::maybe_get(t, "p_aug", rc.train.p_aug);
            detail::maybe_get(t, "lambda", rc.train.lambda_kl);
            detail::maybe_get(t, "learning_rate", rc.train.learning_rate);
            detail::maybe_get(t, "epochs", rc.train.epochs);
            detail::maybe_get(t, "batch_size", rc.train.batch_size);
            detail::maybe_get(t, "seed", rc.train.seed);
            if (t.contains("p_mix")) {
                const auto& pm = t.at("p_mix");
                checker.check(pm, "train.p_mix.", {"kind", "alpha"});
                detail::maybe_get(pm, "kind", rc.train.p_mix.kind);
                detail::maybe_get(pm, "alpha", rc.train.p_mix.alpha);
            }
            if (t.contains("mix_convention"))
                rc.train.mix_convention =
                    mix_convention_from_string(t.at("mix_convention").get<std::string>());
            if (t.contains("tff")) {
                const auto& f = t.at("tff");
                checker.check(f, "train.tff.",
                              {"d_text_in", "d_patch_in", "d_model", "n_heads",
                               "n_qformer_blocks", "n_self_blocks", "ff_multiplier"});
                detail::maybe_get(f, "d_text_in", rc.train.tff.d_text_in);
                detail::maybe_get(f, "d_patch_in", rc.train.tff.d_patch_in);
                detail::maybe_get(f, "d_model", rc.train.tff.d_model);
                detail::maybe_get(f, "n_heads", rc.train.tff.n_heads);
                detail::maybe_get(f, "n_qformer_blocks", rc.train.tff.n_qformer_blocks);
                detail::maybe_get(f, "n_self_blocks", rc.train.tff.n_self_blocks);
                detail::maybe_get(f, "ff_multiplier", rc.train.tff.ff_multiplier);
            }
        }
        if (doc.contains("report")) {
            const auto& r = doc.at("report");
            checker.check(r, "report.",
                          {"provider", "base_url", "path", "model", "api_key_env", "max_attempts",
                           "initial_backoff_ms", "timeout_s", "system_text", "task_text",
                           "keywords", "exclusions"});
            detail::maybe_get(r, "provider", rc.endpoint.provider);
            detail::maybe_get(r, "base_url", rc.endpoint.base_url);
            detail::maybe_get(r, "path", rc.endpoint.path);
            detail::maybe_get(r, "model", rc.endpoint.model);
            detail::maybe_get(r, "api_key_env", rc.endpoint.api_key_env);
            detail::maybe_get(r, "max_attempts", rc.endpoint.max_attempts);
            detail::maybe_get(r, "initial_backoff_ms", rc.endpoint.initial_backoff_ms);
            detail::maybe_get(r, "timeout_s", rc.endpoint.timeout_s);
            detail::maybe_get(r, "system_text", rc.prompt.system_text);
            detail::maybe_get(r, "task_text", rc.prompt.task_text);
            detail::maybe_get(r, "keywords", rc.prompt.keywords);
            detail::maybe_get(r, "exclusions", rc.prompt.exclusions);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }

    if (!checker.unknown.empty()) {
        std::string msg = "config: unknown keys:";
        for (const auto& k : checker.unknown) msg += " " + k;
        throw ConfigError(msg);
    }
    rc.synth.validate();
    rc.train.validate();
    rc.prompt.validate();
    return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(detail::read_file_bytes(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return parse_run_config(doc);
}

}  // namespace rasa
