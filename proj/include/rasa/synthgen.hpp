#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "rasa/datamodel.hpp"
#include "rasa/rng.hpp"

namespace rasa {

// Cohort generator settings. The planted signal: a latent risk z per case
// drives the tumor-patch fraction, the keyword-token scale, and the event
// hazard, so risk ordering is recoverable from any of the three views.
struct SynthConfig {
    int n_cases = 200;
    int d_patch = 24;
    int d_text = 24;
    int patches_min = 16;
    int patches_max = 48;
    double tumor_link_slope = 0.6;    // tumor fraction = 0.05 + slope * z
    double hazard_coefficient = 6.0;  // beta: event rate = lambda0 * exp(beta * z)
    double baseline_hazard = 0.002;   // lambda0, per day
    double censor_hazard = 0.01;      // lambdac, per day; 0 disables censoring
    double noise_scale = 0.35;        // sigma
    std::uint64_t seed = 7;

    void validate() const {
        if (n_cases < 10)
            throw ConfigError("SynthConfig: need at least 10 cases, got " + std::to_string(n_cases));
        if (d_patch < 1 || d_text < 1) throw ConfigError("SynthConfig: feature dims must be >= 1");
        if (patches_min < 4)
            throw ConfigError("SynthConfig: patches_min must be >= 4, got " +
                              std::to_string(patches_min));
        if (patches_max < patches_min) throw ConfigError("SynthConfig: patches_max < patches_min");
        if (!(tumor_link_slope > 0.0) || !(baseline_hazard > 0.0) || !(noise_scale > 0.0))
            throw ConfigError("SynthConfig: slope, lambda0 and sigma must be positive");
        // beta = 0 is the null-signal cohort used for calibration checks
        if (hazard_coefficient < 0.0 || censor_hazard < 0.0)
            throw ConfigError("SynthConfig: hazards must be >= 0");
    }
};

// Per-case latent risk and per-patch tumor flags; the oracle sidecar for
// similarity-map and sampling checks.
struct GroundTruth {
    struct CaseTruth {
        std::string id;
        double z = 0.0;
        std::vector<int> tumor_flags;
    };
    std::vector<CaseTruth> cases;

    const CaseTruth& by_id(const std::string& id) const {
        for (const auto& c : cases)
            if (c.id == id) return c;
        throw ValidationError("ground truth: unknown case id " + id);
    }
};

constexpr int kTextTokensPerCase = 8;

// The tumor prototype drifts with the latent risk along a grade direction,
// so tumor-patch content itself is prognostic (and survives row-wise
// normalization inside the model).
constexpr double kGradeSpread = 1.0;
// Background patches carry case-level contamination along both tumor
// directions ("mimics") that corrupts whole-bag fusion but stays below the
// sampling threshold; this is the noise the text-guided filter removes.
constexpr double kMimicBaseMax = 1.0;
constexpr double kMimicGradeMax = 0.5;
// Report-derived text is helpful but imperfect; its tokens are noisier than
// the patch features.
constexpr double kTextNoiseMult = 3.0;

namespace detail {

inline std::vector<double> random_direction(Rng& rng, int d) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    return v;
}

inline double gamma_variate(Rng& rng, double shape) {
    double boost = 1.0;
    double a = shape;
    if (a < 1.0) {
        boost = std::pow(rng.uniform() + 1e-15, 1.0 / a);
        a += 1.0;
    }
    const double d = a - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x = rng.normal();
        double v = 1.0 + c * x;
        if (v <= 0.0) continue;
        v = v * v * v;
        const double u = rng.uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return boost * d * v;
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return boost * d * v;
    }
}

// Sharp per-case mixture over the background prototypes. Background
// composition is a case-level nuisance the tumor-focused sampler removes.
inline std::vector<double> dirichlet_weights(Rng& rng, int k, double alpha) {
    std::vector<double> w(k);
    double sum = 0.0;
    for (auto& x : w) {
        x = gamma_variate(rng, alpha);
        sum += x;
    }
    for (auto& x : w) x /= sum > 0.0 ? sum : 1.0;
    return w;
}

inline int pick_weighted(Rng& rng, const std::vector<double>& weights) {
    double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
}

// y = M x for a d_text x d_patch matrix stored row-major.
inline std::vector<double> apply_map(const std::vector<double>& m, int d_text, int d_patch,
                                     const std::vector<double>& x, double scale) {
    std::vector<double> y(d_text, 0.0);
    for (int i = 0; i < d_text; ++i) {
        double s = 0.0;
        for (int j = 0; j < d_patch; ++j) s += m[static_cast<std::size_t>(i) * d_patch + j] * x[j];
        y[i] = s * scale;
    }
    return y;
}

}  // namespace detail

struct SynthResult {
    CohortManifest manifest;
    GroundTruth truth;
};

inline void save_ground_truth(const GroundTruth& truth, const std::filesystem::path& path) {
    nlohmann::json doc;
    doc["schema_version"] = 1;
    doc["cases"] = nlohmann::json::array();
    for (const auto& c : truth.cases)
        doc["cases"].push_back({{"id", c.id}, {"z", c.z}, {"tumor_flags", c.tumor_flags}});
    detail::write_file_bytes(path, doc.dump(2) + "\n");
}

inline GroundTruth load_ground_truth(const std::filesystem::path& path) {
    GroundTruth truth;
    try {
        nlohmann::json doc = nlohmann::json::parse(detail::read_file_bytes(path));
        for (const auto& jc : doc.at("cases")) {
            GroundTruth::CaseTruth c;
            c.id = jc.at("id").get<std::string>();
            c.z = jc.at("z").get<double>();
            c.tumor_flags = jc.at("tumor_flags").get<std::vector<int>>();
            truth.cases.push_back(std::move(c));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("ground truth " + path.string() + ": " + e.what());
    }
    return truth;
}

// Generates the cohort under out_dir: RASB feature files, manifest.json and
// ground_truth.json. Deterministic per seed, bitwise on all emitted files.
inline SynthResult generate_cohort(const SynthConfig& config,
                                   const std::filesystem::path& out_dir) {
    config.validate();
    std::filesystem::create_directories(out_dir / "features");

    Rng root(config.seed);
    Rng proto_rng = root.fork("prototypes");

    // fixed tumor prototype with a grade direction, 4 backgrounds, and the
    // shared full-rank patch-to-text map
    std::vector<double> tumor_proto = detail::random_direction(proto_rng, config.d_patch);
    std::vector<double> grade_dir = detail::random_direction(proto_rng, config.d_patch);
    std::vector<std::vector<double>> background_protos;
    for (int b = 0; b < 4; ++b) {
        auto proto = detail::random_direction(proto_rng, config.d_patch);
        // background tissue dominates the slide in magnitude, keeping mimic
        // contamination below the sampling threshold
        for (auto& x : proto) x *= 2.0;
        background_protos.push_back(std::move(proto));
    }
    // case-level tumor content direction: prototype drifted along the grade
    // axis by the latent risk
    auto tumor_content = [&](double z) {
        std::vector<double> v(config.d_patch);
        for (int j = 0; j < config.d_patch; ++j)
            v[j] = tumor_proto[j] + kGradeSpread * (z - 0.5) * grade_dir[j];
        return v;
    };
    // the shared full-rank patch-to-text map; when the two spaces share a
    // dimension it is a random perturbation of the identity, mirroring
    // modality-aligned upstream encoders
    std::vector<double> text_map(static_cast<std::size_t>(config.d_text) * config.d_patch);
    for (auto& x : text_map) x = 0.2 * proto_rng.normal() / std::sqrt(static_cast<double>(config.d_patch));
    if (config.d_text == config.d_patch)
        for (int i = 0; i < config.d_text; ++i)
            text_map[static_cast<std::size_t>(i) * config.d_patch + i] += 1.0;

    Rng case_rng = root.fork("cases");

    SynthResult result;
    result.manifest.base_dir = out_dir;

    for (int ci = 0; ci < config.n_cases; ++ci) {
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "case_%04d", ci);
        const std::string id = idbuf;

        const double z = case_rng.uniform();
        const int n_patches = config.patches_min +
                              case_rng.uniform_int(config.patches_max - config.patches_min + 1);
        const double tumor_fraction = 0.05 + config.tumor_link_slope * z;
        int n_tumor = static_cast<int>(std::ceil(tumor_fraction * n_patches));
        n_tumor = std::min(n_tumor, n_patches);
        const std::vector<double> bg_weights = detail::dirichlet_weights(case_rng, 4, 0.2);
        const std::vector<double> tumor_vec = tumor_content(z);
        const double mimic_base = case_rng.uniform(0.0, kMimicBaseMax);
        const double mimic_grade = case_rng.uniform(-kMimicGradeMax, kMimicGradeMax);

        FeatureBag patches;
        patches.n = n_patches;
        patches.d = config.d_patch;
        patches.values.reserve(static_cast<std::size_t>(n_patches) * config.d_patch);
        std::vector<GridCoord> coords(n_patches);
        std::vector<int> tumor_flags(n_patches, 0);
        for (int p = 0; p < n_patches; ++p) {
            const bool is_tumor = p < n_tumor;
            tumor_flags[p] = is_tumor ? 1 : 0;
            if (is_tumor) {
                for (int j = 0; j < config.d_patch; ++j)
                    patches.values.push_back(to_storage_precision(
                        tumor_vec[j] + config.noise_scale * case_rng.normal()));
            } else {
                const std::vector<double>& proto =
                    background_protos[detail::pick_weighted(case_rng, bg_weights)];
                for (int j = 0; j < config.d_patch; ++j)
                    patches.values.push_back(to_storage_precision(
                        proto[j] + mimic_base * tumor_proto[j] + mimic_grade * grade_dir[j] +
                        config.noise_scale * case_rng.normal()));
            }
            // tumor patches cluster in the upper-right quadrant of a 64x64 grid
            if (is_tumor) {
                coords[p] = {static_cast<std::int32_t>(32 + case_rng.uniform_int(32)),
                             static_cast<std::int32_t>(32 + case_rng.uniform_int(32))};
            } else {
                const int quadrant = case_rng.uniform_int(3);
                const int qx = quadrant == 0 ? 0 : (quadrant == 1 ? 0 : 32);
                const int qy = quadrant == 0 ? 32 : (quadrant == 1 ? 0 : 0);
                coords[p] = {static_cast<std::int32_t>(qx + case_rng.uniform_int(32)),
                             static_cast<std::int32_t>(qy + case_rng.uniform_int(32))};
            }
        }
        patches.coords = std::move(coords);

        const int keyword_index = case_rng.uniform_int(kTextTokensPerCase);
        FeatureBag text;
        text.n = kTextTokensPerCase;
        text.d = config.d_text;
        text.values.reserve(static_cast<std::size_t>(kTextTokensPerCase) * config.d_text);
        std::vector<std::string> token_strings;
        static const char* kFillerTokens[] = {"sections", "show", "infiltrating", "glands",
                                              "with", "necrosis", "and", "stroma"};
        for (int t = 0; t < kTextTokensPerCase; ++t) {
            std::vector<double> token;
            if (t == keyword_index) {
                token = detail::apply_map(text_map, config.d_text, config.d_patch, tumor_vec,
                                          0.5 + z);
                token_strings.push_back("tumor");
            } else {
                token = detail::apply_map(text_map, config.d_text, config.d_patch,
                                          background_protos[case_rng.uniform_int(4)], 1.0);
                token_strings.push_back(kFillerTokens[t % 8]);
            }
            for (int j = 0; j < config.d_text; ++j)
                text.values.push_back(to_storage_precision(
                    token[j] + kTextNoiseMult * config.noise_scale * case_rng.normal()));
        }

        const double event_rate = config.baseline_hazard * std::exp(config.hazard_coefficient * z);
        const double t_event = case_rng.exponential(event_rate);
        double observed = t_event;
        double event = 1.0;
        if (config.censor_hazard > 0.0) {
            const double t_censor = case_rng.exponential(config.censor_hazard);
            if (t_censor < t_event) {
                observed = t_censor;
                event = 0.0;
            }
        }

        CaseRecord rec;
        rec.id = id;
        rec.patch_file = "features/" + id + ".patches.rasb";
        rec.text_file = "features/" + id + ".text.rasb";
        rec.token_strings = std::move(token_strings);
        rec.keyword_token_indices = {keyword_index};
        rec.label.time = std::max(observed, 1e-3);
        rec.label.event = event;

        write_feature_bag(patches, out_dir / rec.patch_file);
        write_feature_bag(text, out_dir / rec.text_file);

        result.manifest.cases.push_back(std::move(rec));
        result.truth.cases.push_back({id, z, std::move(tumor_flags)});
    }

    std::vector<std::string> ids;
    for (const auto& c : result.manifest.cases) ids.push_back(c.id);
    result.manifest.splits = make_splits(ids, config.seed);

    save_manifest(result.manifest, out_dir / "manifest.json");
    save_ground_truth(result.truth, out_dir / "ground_truth.json");
    return result;
}

// Deterministic cohort summary for fixture documentation.
struct CohortSummary {
    int n_cases = 0;
    double event_rate = 0.0;
    double median_time = 0.0;
    double mean_tumor_fraction = 0.0;
};

inline CohortSummary describe_cohort(const CohortManifest& manifest, const GroundTruth& truth) {
    if (manifest.cases.size() != truth.cases.size())
        throw ValidationError("describe_cohort: manifest and ground truth case counts differ");
    CohortSummary s;
    s.n_cases = static_cast<int>(manifest.cases.size());
    std::vector<double> times;
    double events = 0.0, tumor_fraction_sum = 0.0;
    for (std::size_t i = 0; i < manifest.cases.size(); ++i) {
        const auto& c = manifest.cases[i];
        const auto& t = truth.cases[i];
        if (c.id != t.id)
            throw ValidationError("describe_cohort: id mismatch at index " + std::to_string(i) +
                                  " (" + c.id + " vs " + t.id + ")");
        times.push_back(c.label.time);
        if (c.label.event >= 0.5) events += 1.0;
        double tumor = 0.0;
        for (int f : t.tumor_flags) tumor += f;
        tumor_fraction_sum += tumor / static_cast<double>(t.tumor_flags.size());
    }
    s.event_rate = events / s.n_cases;
    std::sort(times.begin(), times.end());
    s.median_time = times.size() % 2 == 1
                        ? times[times.size() / 2]
                        : 0.5 * (times[times.size() / 2 - 1] + times[times.size() / 2]);
    s.mean_tumor_fraction = tumor_fraction_sum / s.n_cases;
    return s;
}

}  // namespace rasa
