#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "rasa/survstats.hpp"
#include "rasa/synthgen.hpp"

using namespace rasa;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("rasa_synth_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

bool trees_identical(const fs::path& a, const fs::path& b) {
    std::vector<fs::path> files_a, files_b;
    for (const auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file()) files_a.push_back(fs::relative(e.path(), a));
    for (const auto& e : fs::recursive_directory_iterator(b))
        if (e.is_regular_file()) files_b.push_back(fs::relative(e.path(), b));
    std::sort(files_a.begin(), files_a.end());
    std::sort(files_b.begin(), files_b.end());
    if (files_a != files_b) return false;
    for (const auto& rel : files_a)
        if (file_bytes(a / rel) != file_bytes(b / rel)) return false;
    return true;
}

SynthConfig small_config() {
    SynthConfig c;
    c.n_cases = 40;
    c.d_patch = 10;
    c.d_text = 10;
    c.patches_min = 6;
    c.patches_max = 12;
    c.seed = 3;
    return c;
}

// O(n^2) Kendall correlation sign.
double kendall_tau(const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0.0, n = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = i + 1; j < x.size(); ++j) {
            const double dx = x[i] - x[j], dy = y[i] - y[j];
            if (dx == 0.0 || dy == 0.0) continue;
            s += (dx > 0) == (dy > 0) ? 1.0 : -1.0;
            n += 1.0;
        }
    return n > 0 ? s / n : 0.0;
}

}  // namespace

TEST_SUITE("synthgen") {

TEST_CASE("zero censoring hazard observes every event") {
    SynthConfig c = small_config();
    c.censor_hazard = 0.0;
    auto dir = temp_dir("nocensor");
    SynthResult r = generate_cohort(c, dir);
    for (const auto& rec : r.manifest.cases) CHECK(rec.label.event == 1.0);
    CHECK(describe_cohort(r.manifest, r.truth).event_rate == doctest::Approx(1.0));
}

TEST_CASE("identical seeds emit bitwise-identical cohorts") {
    SynthConfig c = small_config();
    auto dir_a = temp_dir("det_a");
    auto dir_b = temp_dir("det_b");
    generate_cohort(c, dir_a);
    generate_cohort(c, dir_b);
    CHECK(trees_identical(dir_a, dir_b));

    c.seed = 4;
    auto dir_c = temp_dir("det_c");
    generate_cohort(c, dir_c);
    CHECK_FALSE(trees_identical(dir_a, dir_c));
}

TEST_CASE("latent risk scores at least 0.80 concordance on the default cohort") {
    SynthConfig c;  // defaults: 200 cases
    auto dir = temp_dir("ceiling");
    SynthResult r = generate_cohort(c, dir);
    std::vector<double> z;
    std::vector<SurvivalLabel> labels;
    for (std::size_t i = 0; i < r.manifest.cases.size(); ++i) {
        z.push_back(r.truth.cases[i].z);
        labels.push_back(r.manifest.cases[i].label);
    }
    CHECK(concordance_index(z, labels) >= 0.80);
}

TEST_CASE("null hazard coefficient gives chance-level concordance") {
    SynthConfig c = small_config();
    c.n_cases = 500;
    c.hazard_coefficient = 0.0;
    c.censor_hazard = 0.0;
    auto dir = temp_dir("null");
    SynthResult r = generate_cohort(c, dir);
    std::vector<double> z;
    std::vector<SurvivalLabel> labels;
    for (std::size_t i = 0; i < r.manifest.cases.size(); ++i) {
        z.push_back(r.truth.cases[i].z);
        labels.push_back(r.manifest.cases[i].label);
    }
    CHECK(concordance_index(z, labels) == doctest::Approx(0.5).epsilon(0.1));
}

TEST_CASE("mean tumor fraction stays inside the link range") {
    auto dir = temp_dir("fraction");
    SynthResult r = generate_cohort(small_config(), dir);
    CohortSummary s = describe_cohort(r.manifest, r.truth);
    CHECK(s.mean_tumor_fraction >= 0.05);
    CHECK(s.mean_tumor_fraction <= 0.65);
}

TEST_CASE("describe rejects misaligned inputs") {
    auto dir = temp_dir("misalign");
    SynthResult r = generate_cohort(small_config(), dir);
    GroundTruth truncated = r.truth;
    truncated.cases.pop_back();
    CHECK_THROWS_AS(describe_cohort(r.manifest, truncated), ValidationError);
    GroundTruth swapped = r.truth;
    std::swap(swapped.cases[0].id, swapped.cases[1].id);
    CHECK_THROWS_AS(describe_cohort(r.manifest, swapped), ValidationError);
}

TEST_CASE("latent risk correlates with tumor fraction and against event time") {
    SynthConfig c = small_config();
    c.n_cases = 150;
    auto dir = temp_dir("kendall");
    SynthResult r = generate_cohort(c, dir);
    std::vector<double> z, frac, uncensored_z, uncensored_t;
    for (std::size_t i = 0; i < r.manifest.cases.size(); ++i) {
        const auto& truth = r.truth.cases[i];
        double tumor = 0.0;
        for (int f : truth.tumor_flags) tumor += f;
        z.push_back(truth.z);
        frac.push_back(tumor / truth.tumor_flags.size());
        if (r.manifest.cases[i].label.event >= 0.5) {
            uncensored_z.push_back(truth.z);
            uncensored_t.push_back(r.manifest.cases[i].label.time);
        }
    }
    CHECK(kendall_tau(z, frac) > 0.0);
    CHECK(kendall_tau(uncensored_z, uncensored_t) < 0.0);
}

TEST_CASE("generated files satisfy datamodel invariants and load cleanly") {
    auto dir = temp_dir("valid");
    SynthResult r = generate_cohort(small_config(), dir);
    CohortManifest loaded = load_manifest(dir / "manifest.json");
    CHECK(loaded.cases.size() == r.manifest.cases.size());
    for (const auto& rec : loaded.cases) {
        FeatureBag patches = read_feature_bag(loaded.patch_path(rec));
        FeatureBag text = read_feature_bag(loaded.text_path(rec));
        patches.validate();
        text.validate();
        CHECK(patches.coords.has_value());
        CHECK(text.n == kTextTokensPerCase);
        CHECK(rec.token_strings[rec.keyword_token_indices[0]] == "tumor");
    }
    GroundTruth truth = load_ground_truth(dir / "ground_truth.json");
    CHECK(truth.cases.size() == r.truth.cases.size());
}

TEST_CASE("configs that cannot generate a cohort are rejected") {
    SynthConfig c = small_config();
    c.n_cases = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config();
    c.patches_min = 2;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config();
    c.baseline_hazard = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

}  // TEST_SUITE
