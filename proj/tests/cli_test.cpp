#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "rasa/cli.hpp"

using namespace rasa;
namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args) {
    std::vector<std::string> full{"rasa"};
    for (auto& a : args) full.push_back(std::move(a));
    std::vector<char*> argv;
    for (auto& s : full) argv.push_back(s.data());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("rasa_cli_" + tag);
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

// One tiny cohort with a full 5-trial teacher+student run, built once.
struct CliFixture {
    fs::path root;
    fs::path config_path;
    fs::path manifest_path;
    fs::path run_dir;

    CliFixture() {
        root = temp_dir("fixture");
        config_path = root / "config.json";
        std::ofstream(config_path) << R"({
  "synth": {"n_cases": 25, "d_patch": 8, "d_text": 8, "patches_min": 5, "patches_max": 9,
             "seed": 11},
  "train": {"epochs": 3, "batch_size": 4, "learning_rate": 0.001, "seed": 21,
             "tff": {"d_text_in": 8, "d_patch_in": 8, "d_model": 8, "n_heads": 2,
                      "n_qformer_blocks": 1, "n_self_blocks": 1, "ff_multiplier": 2}}
})";
        manifest_path = root / "cohort/manifest.json";
        run_dir = root / "run";
        REQUIRE(run({"synth", "--config", config_path.string(), "--out",
                     (root / "cohort").string()}) == 0);
        for (int trial = 0; trial < 5; ++trial) {
            REQUIRE(run({"train", "--config", config_path.string(), "--manifest",
                         manifest_path.string(), "--stage", "teacher", "--trial",
                         std::to_string(trial), "--out", run_dir.string()}) == 0);
            REQUIRE(run({"train", "--config", config_path.string(), "--manifest",
                         manifest_path.string(), "--stage", "student", "--trial",
                         std::to_string(trial), "--out", run_dir.string()}) == 0);
        }
    }
};

CliFixture& fixture() {
    static CliFixture f;
    return f;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("synth produces a loadable manifest with the configured case count") {
    auto& f = fixture();
    CohortManifest m = load_manifest(f.manifest_path);
    CHECK(m.cases.size() == 25);
    CHECK(m.splits.size() == 5);
}

TEST_CASE("synth is idempotent per seed") {
    auto& f = fixture();
    auto again = temp_dir("synth_again");
    REQUIRE(run({"synth", "--config", f.config_path.string(), "--out", again.string()}) == 0);
    CHECK(trees_identical(f.root / "cohort", again));
}

TEST_CASE("too-small cohorts are a usage error") {
    auto dir = temp_dir("synth_small");
    std::ofstream(dir / "bad.json") << R"({"synth": {"n_cases": 3}})";
    CHECK(run({"synth", "--config", (dir / "bad.json").string(), "--out",
               (dir / "out").string()}) == 2);
}

TEST_CASE("unknown configuration keys are rejected and named") {
    auto dir = temp_dir("badkey");
    std::ofstream(dir / "bad.json") << R"({"train": {"gamm": 0.5, "epochs": 2}})";
    CHECK(run({"synth", "--config", (dir / "bad.json").string(), "--out",
               (dir / "out").string()}) == 2);
}

TEST_CASE("training logs and checkpoints appear under the run directory") {
    auto& f = fixture();
    CHECK(fs::exists(f.run_dir / "trial0/teacher.rasc"));
    CHECK(fs::exists(f.run_dir / "trial0/teacher_log.jsonl"));
    CHECK(fs::exists(f.run_dir / "trial0/student.rasc"));
    std::ifstream log(f.run_dir / "trial0/teacher_log.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
        ++lines;
        CHECK_NOTHROW([&] { return nlohmann::json::parse(line); }());
    }
    CHECK(lines == 5);  // epoch 0..3 plus the summary line
}

TEST_CASE("training reruns are bitwise identical") {
    auto& f = fixture();
    auto other = temp_dir("train_again");
    REQUIRE(run({"train", "--config", f.config_path.string(), "--manifest",
                 f.manifest_path.string(), "--stage", "teacher", "--trial", "0", "--out",
                 other.string()}) == 0);
    CHECK(file_bytes(f.run_dir / "trial0/teacher.rasc") ==
          file_bytes(other / "trial0/teacher.rasc"));
}

TEST_CASE("student training without a teacher checkpoint is a usage error") {
    auto& f = fixture();
    auto empty = temp_dir("no_teacher");
    CHECK(run({"train", "--config", f.config_path.string(), "--manifest",
               f.manifest_path.string(), "--stage", "student", "--trial", "0", "--out",
               empty.string()}) == 2);
}

TEST_CASE("evaluate writes a report whose aggregate matches its trials") {
    auto& f = fixture();
    REQUIRE(run({"evaluate", "--config", f.config_path.string(), "--manifest",
                 f.manifest_path.string(), "--stage", "teacher", "--run-dir",
                 f.run_dir.string()}) == 0);
    nlohmann::json report =
        nlohmann::json::parse(file_bytes(f.run_dir / "metrics_report_teacher.json"));
    REQUIRE(report.at("trials").size() == 5);
    double mean = 0.0;
    for (const auto& t : report.at("trials")) mean += t.at("test_ci").get<double>();
    mean /= 5.0;
    CHECK(report.at("aggregate").at("mean_ci").get<double>() == doctest::Approx(mean).epsilon(1e-12));
    double var = 0.0;
    for (const auto& t : report.at("trials")) {
        double d = t.at("test_ci").get<double>() - mean;
        var += d * d;
    }
    CHECK(report.at("aggregate").at("std_ci").get<double>() ==
          doctest::Approx(std::sqrt(var / 4.0)).epsilon(1e-12));
    std::string formatted = report.at("aggregate").at("formatted").get<std::string>();
    CHECK(formatted.find("±") != std::string::npos);
}

TEST_CASE("evaluate with a missing checkpoint is a usage error") {
    auto& f = fixture();
    auto empty = temp_dir("eval_empty");
    CHECK(run({"evaluate", "--config", f.config_path.string(), "--manifest",
               f.manifest_path.string(), "--stage", "teacher", "--run-dir",
               empty.string()}) == 2);
}

TEST_CASE("identical scores for every test case surface as undefined CI with exit 4") {
    auto& f = fixture();
    auto degenerate = temp_dir("degenerate_run");
    for (int trial = 0; trial < 5; ++trial) {
        TffParams p = load_checkpoint(f.run_dir / ("trial" + std::to_string(trial)) / "teacher.rasc");
        for (auto& v : p.head_w.mutable_data()) v = 0.0;
        for (auto& v : p.head_b.mutable_data()) v = 0.0;
        fs::create_directories(degenerate / ("trial" + std::to_string(trial)));
        save_checkpoint(p, degenerate / ("trial" + std::to_string(trial)) / "teacher.rasc");
    }
    CHECK(run({"evaluate", "--config", f.config_path.string(), "--manifest",
               f.manifest_path.string(), "--stage", "teacher", "--run-dir",
               degenerate.string()}) == 4);
}

TEST_CASE("oracle scoring reproduces the ground-truth concordance") {
    auto& f = fixture();
    REQUIRE(run({"evaluate", "--config", f.config_path.string(), "--manifest",
                 f.manifest_path.string(), "--stage", "oracle", "--run-dir", f.run_dir.string(),
                 "--out", f.run_dir.string()}) == 0);
    nlohmann::json report =
        nlohmann::json::parse(file_bytes(f.run_dir / "metrics_report_oracle.json"));

    CohortManifest m = load_manifest(f.manifest_path);
    GroundTruth truth = load_ground_truth(f.root / "cohort/ground_truth.json");
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<double> z;
        std::vector<SurvivalLabel> labels;
        for (const auto& id : m.splits[trial].test) {
            z.push_back(truth.by_id(id).z);
            labels.push_back(m.case_by_id(id).label);
        }
        CHECK(report.at("trials")[trial].at("test_ci").get<double>() ==
              doctest::Approx(concordance_index(z, labels)).epsilon(1e-12));
    }
}

TEST_CASE("km emits step curves starting at one with non-increasing survival") {
    auto& f = fixture();
    auto out = temp_dir("km_out");
    int rc = run({"km", "--config", f.config_path.string(), "--manifest",
                  f.manifest_path.string(), "--stage", "teacher", "--run-dir", f.run_dir.string(),
                  "--trial", "0", "--out", out.string()});
    if (rc == 4) return;  // tiny test split landed on one side of the median; covered elsewhere
    REQUIRE(rc == 0);
    std::ifstream csv(out / "km_trial0_teacher.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "group,time,survival,n_risk,n_events");
    std::map<std::string, std::vector<std::pair<double, double>>> curves;
    while (std::getline(csv, line)) {
        std::stringstream ss(line);
        std::string group, field;
        std::getline(ss, group, ',');
        std::getline(ss, field, ',');
        double time = std::stod(field);
        std::getline(ss, field, ',');
        double survival = std::stod(field);
        curves[group].push_back({time, survival});
    }
    REQUIRE(curves.count("high"));
    REQUIRE(curves.count("low"));
    for (auto& [group, points] : curves) {
        CHECK(points.front().first == 0.0);
        CHECK(points.front().second == 1.0);
        for (std::size_t i = 1; i < points.size(); ++i) {
            CHECK(points[i].first >= points[i - 1].first);
            CHECK(points[i].second <= points[i - 1].second);
        }
    }
    CHECK(fs::exists(out / "km_trial0_teacher.svg"));
    std::string svg = file_bytes(out / "km_trial0_teacher.svg");
    CHECK(svg.find("p = ") != std::string::npos);

    auto out2 = temp_dir("km_out2");
    REQUIRE(run({"km", "--config", f.config_path.string(), "--manifest",
                 f.manifest_path.string(), "--stage", "teacher", "--run-dir", f.run_dir.string(),
                 "--trial", "0", "--out", out2.string()}) == 0);
    CHECK(trees_identical(out, out2));
}

TEST_CASE("simmap rejects unknown case ids") {
    auto& f = fixture();
    CHECK(run({"simmap", "--manifest", f.manifest_path.string(), "--checkpoint",
               (f.run_dir / "trial0/teacher.rasc").string(), "--case", "case_9999", "--out",
               (f.root / "sim.csv").string()}) == 2);
}

TEST_CASE("simmap kept columns are nested by threshold and reruns are identical") {
    auto& f = fixture();
    const fs::path out = f.root / "sim_ok.csv";
    REQUIRE(run({"simmap", "--manifest", f.manifest_path.string(), "--checkpoint",
                 (f.run_dir / "trial0/teacher.rasc").string(), "--case", "case_0002",
                 "--gammas", "-1,0.5,0.9", "--out", out.string()}) == 0);
    std::ifstream csv(out);
    std::string line;
    std::getline(csv, line);
    CHECK(line == "case_id,patch_index,x,y,similarity,kept@-1,kept@0.5,kept@0.9");
    while (std::getline(csv, line)) {
        std::stringstream ss(line);
        std::vector<std::string> fields;
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        REQUIRE(fields.size() == 8);
        int k1 = std::stoi(fields[5]), k2 = std::stoi(fields[6]), k3 = std::stoi(fields[7]);
        if (k3) CHECK(k2);
        if (k2) CHECK(k1);
    }
    const fs::path out2 = f.root / "sim_ok2.csv";
    REQUIRE(run({"simmap", "--manifest", f.manifest_path.string(), "--checkpoint",
                 (f.run_dir / "trial0/teacher.rasc").string(), "--case", "case_0002",
                 "--gammas", "-1,0.5,0.9", "--out", out2.string()}) == 0);
    CHECK(file_bytes(out) == file_bytes(out2));
}

TEST_CASE("clean-reports cleans deterministically and hits the cache on the second run") {
    auto dir = temp_dir("clean");
    fs::create_directories(dir / "reports");
    std::ofstream(dir / "reports/r1.txt")
        << "Tumor infiltrates submucosa. Lymph nodes: 0/12 positive. Moderate differentiation.";
    std::ofstream(dir / "reports/r2.txt") << "No residual tumor. Immunohistochemistry: CK7 positive.";

    REQUIRE(run({"clean-reports", "--input", (dir / "reports").string(), "--out",
                 (dir / "cleaned").string(), "--cache", (dir / "cache").string()}) == 0);
    CHECK(file_bytes(dir / "cleaned/r1.cleaned.txt") ==
          "Tumor infiltrates submucosa. Moderate differentiation.\n");
    CHECK(file_bytes(dir / "cleaned/r2.cleaned.txt") == "No residual tumor.\n");

    std::string first = file_bytes(dir / "cleaned/r1.cleaned.txt");
    REQUIRE(run({"clean-reports", "--input", (dir / "reports").string(), "--out",
                 (dir / "cleaned").string(), "--cache", (dir / "cache").string()}) == 0);
    CHECK(file_bytes(dir / "cleaned/r1.cleaned.txt") == first);
    // two cache records now exist
    int records = 0;
    for (const auto& e : fs::directory_iterator(dir / "cache")) (void)e, ++records;
    CHECK(records == 2);
}

TEST_CASE("live provider without a token exits with the usage code") {
    auto dir = temp_dir("clean_live");
    fs::create_directories(dir / "reports");
    std::ofstream(dir / "reports/r1.txt") << "Tumor present.";
    unsetenv("RASA_API_KEY");
    CHECK(run({"clean-reports", "--input", (dir / "reports").string(), "--provider", "live",
               "--out", (dir / "cleaned").string()}) == 2);
}

TEST_CASE("missing subcommand or bad flags are usage errors") {
    CHECK(run({"train", "--stage", "teacher"}) == 2);
    CHECK(run({"frobnicate"}) == 2);
}

TEST_CASE("unreadable inputs exit with the I/O code") {
    auto& f = fixture();
    CHECK(run({"train", "--config", f.config_path.string(), "--manifest", "/nonexistent/m.json",
               "--stage", "teacher", "--trial", "0", "--out",
               (f.root / "io_out").string()}) == 3);
    CHECK(run({"clean-reports", "--input", "/nonexistent/reports", "--out",
               (f.root / "io_cleaned").string()}) == 3);
}

}  // TEST_SUITE
