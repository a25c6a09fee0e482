#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "rasa/reportprep.hpp"
#include "rasa/rng.hpp"

using namespace rasa;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("rasa_report_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// In-process chat-completion stand-in. fail_first controls how many requests
// return HTTP 500 before success.
class FakeService {
public:
    explicit FakeService(int fail_first = 0, bool empty_content = false)
        : fail_first_(fail_first), empty_content_(empty_content) {
        server_.Post("/v1/chat/completions", [this](const httplib::Request& req,
                                                    httplib::Response& res) {
            ++requests_;
            if (requests_ <= fail_first_) {
                res.status = 500;
                res.set_content("overloaded", "text/plain");
                return;
            }
            auto body = nlohmann::json::parse(req.body);
            const std::string user = body.at("messages").at(1).at("content").get<std::string>();
            nlohmann::json reply{
                {"choices",
                 {{{"message",
                    {{"role", "assistant"},
                     {"content", empty_content_ ? "" : "Cleaned: " + std::to_string(user.size())}}}}}}};
            res.set_content(reply.dump(), "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this]() { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    ~FakeService() {
        server_.stop();
        thread_.join();
    }

    std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }
    int requests() const { return requests_; }

private:
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    int fail_first_ = 0;
    bool empty_content_ = false;
    std::atomic<int> requests_{0};
};

ServiceEndpoint live_endpoint(const FakeService& svc) {
    ServiceEndpoint e;
    e.provider = "live";
    e.base_url = svc.base_url();
    e.initial_backoff_ms = 5;
    return e;
}

constexpr const char* kSampleReport =
    "Tumor infiltrates submucosa. Lymph nodes: 0/12 positive. Moderate differentiation.";

}  // namespace

TEST_SUITE("reportprep") {

TEST_CASE("mock cleaning strips exclusion-term sentences") {
    ReportCleaner cleaner(CleaningPrompt::defaults(), ServiceEndpoint{});
    CleaningRecord rec = cleaner.clean("c1", "Tumor infiltrates submucosa. Lymph nodes: 0/12 positive.");
    CHECK(rec.cleaned_text == "Tumor infiltrates submucosa.");
    CHECK(rec.provider == "mock");
}

TEST_CASE("mock cleaning returns clean text unchanged") {
    ReportCleaner cleaner(CleaningPrompt::defaults(), ServiceEndpoint{});
    const std::string text = "Tumor cells form irregular glands. Stroma shows desmoplasia.";
    CHECK(cleaner.clean("c1", text).cleaned_text == text);
}

TEST_CASE("mock cleaning is idempotent") {
    Rng rng(17);
    CleaningPrompt prompt = CleaningPrompt::defaults();
    const std::vector<std::string> sentences = {
        "Tumor cells invade the muscularis.",
        "Lymph node metastasis present in 3 nodes.",
        "Immunohistochemistry shows CK20 positivity.",
        "Glands are moderately differentiated!",
        "Necrosis is extensive.",
        "Genetic testing revealed KRAS mutation.",
        "Stroma appears desmoplastic?",
    };
    for (int trial = 0; trial < 50; ++trial) {
        std::string text;
        for (const auto& s : sentences)
            if (rng.uniform() < 0.6) text += s + " ";
        if (text.empty()) continue;
        std::string once = mock_clean(text, prompt);
        CHECK(mock_clean(once, prompt) == once);
    }
}

TEST_CASE("second identical request is served from the cache") {
    auto cache = temp_dir("cache");
    ReportCleaner cleaner(CleaningPrompt::defaults(), ServiceEndpoint{}, cache);
    CleaningRecord first = cleaner.clean("c1", kSampleReport);
    CHECK(cleaner.stats().provider_calls == 1);
    CleaningRecord second = cleaner.clean("c1", kSampleReport);
    CHECK(cleaner.stats().provider_calls == 1);
    CHECK(cleaner.stats().cache_hits == 1);
    CHECK(second.cleaned_text == first.cleaned_text);
    CHECK(second.digest == first.digest);
}

TEST_CASE("digest is a pure function of prompt and raw text") {
    CleaningPrompt prompt = CleaningPrompt::defaults();
    CHECK(digest_of(prompt, "abc") == digest_of(prompt, "abc"));
    CHECK(digest_of(prompt, "abc") != digest_of(prompt, "abd"));
    CleaningPrompt other = prompt;
    other.task_text += " Be brief.";
    CHECK(digest_of(prompt, "abc") != digest_of(other, "abc"));
}

TEST_CASE("empty raw text and fully excluded reports are content errors") {
    ReportCleaner cleaner(CleaningPrompt::defaults(), ServiceEndpoint{});
    CHECK_THROWS_AS(cleaner.clean("c1", ""), ContentError);
    CHECK_THROWS_AS(cleaner.clean("c2", "Lymph nodes: 2/12 positive."), ContentError);
}

TEST_CASE("live provider round-trips through an http service") {
    FakeService svc;
    setenv("RASA_API_KEY", "test-token", 1);
    ReportCleaner cleaner(CleaningPrompt::defaults(), live_endpoint(svc));
    CleaningRecord rec = cleaner.clean("c1", kSampleReport);
    CHECK(rec.provider == "live");
    CHECK(rec.cleaned_text.rfind("Cleaned:", 0) == 0);
    CHECK(svc.requests() == 1);
}

TEST_CASE("transient failures are retried with backoff") {
    FakeService svc(2);
    setenv("RASA_API_KEY", "test-token", 1);
    ReportCleaner cleaner(CleaningPrompt::defaults(), live_endpoint(svc));
    CleaningRecord rec = cleaner.clean("c1", kSampleReport);
    CHECK(svc.requests() == 3);
    CHECK(cleaner.stats().retries == 2);
    CHECK(!rec.cleaned_text.empty());
}

TEST_CASE("persistent failure becomes a transport error after three attempts") {
    FakeService svc(100);
    setenv("RASA_API_KEY", "test-token", 1);
    ReportCleaner cleaner(CleaningPrompt::defaults(), live_endpoint(svc));
    CHECK_THROWS_AS(cleaner.clean("c1", kSampleReport), TransportError);
    CHECK(svc.requests() == 3);
}

TEST_CASE("empty model output is a content error") {
    FakeService svc(0, true);
    setenv("RASA_API_KEY", "test-token", 1);
    ReportCleaner cleaner(CleaningPrompt::defaults(), live_endpoint(svc));
    CHECK_THROWS_AS(cleaner.clean("c1", kSampleReport), ContentError);
}

TEST_CASE("live provider requires the auth token") {
    FakeService svc;
    unsetenv("RASA_API_KEY");
    ReportCleaner cleaner(CleaningPrompt::defaults(), live_endpoint(svc));
    CHECK_THROWS_AS(cleaner.clean("c1", kSampleReport), ConfigError);
}

TEST_CASE("keyword matcher finds exact tokens") {
    CHECK(find_keyword_tokens({"the", "tumor", "shows"}, {"tumor"}) == std::vector<int>{1});
}

TEST_CASE("keyword matcher joins subword pieces") {
    CHECK(find_keyword_tokens({"tum", "##or"}, {"tumor"}) == std::vector<int>{0, 1});
}

TEST_CASE("keyword matcher returns empty on no match and errors on empty keywords") {
    CHECK(find_keyword_tokens({"benign", "polyp"}, {"tumor"}).empty());
    CHECK_THROWS_AS(find_keyword_tokens({"tumor"}, {}), ConfigError);
}

TEST_CASE("matcher output is sorted, unique, and in range") {
    Rng rng(5);
    const std::vector<std::string> vocabulary = {"tumor",  "##or", "cancer", "the",  "cells",
                                                 "##umor", "show", "benign", "canc", "##er"};
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::string> tokens;
        int n = 1 + rng.uniform_int(12);
        for (int i = 0; i < n; ++i) tokens.push_back(vocabulary[rng.uniform_int(10)]);
        auto hits = find_keyword_tokens(tokens, {"tumor", "cancer"});
        for (std::size_t i = 0; i < hits.size(); ++i) {
            CHECK(hits[i] >= 0);
            CHECK(hits[i] < n);
            if (i > 0) CHECK(hits[i] > hits[i - 1]);
        }
    }
}

TEST_CASE("matcher is case-insensitive") {
    CHECK(find_keyword_tokens({"TUMOR", "Cancer"}, {"tumor", "cancer"}) ==
          std::vector<int>({0, 1}));
}

}  // TEST_SUITE
