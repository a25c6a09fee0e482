#pragma once
#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "rasa/datamodel.hpp"
#include "rasa/errors.hpp"
#include "rasa/rng.hpp"

namespace rasa {

// Prompt contract for report cleaning: describe microscopic visual
// characteristics only, and drop WSI-irrelevant findings.
struct CleaningPrompt {
    std::string system_text;
    std::string task_text;
    std::vector<std::string> keywords;
    std::vector<std::string> exclusions;

    static CleaningPrompt defaults() {
        CleaningPrompt p;
        p.system_text =
            "You are a pathology assistant. Rewrite raw pathology reports into concise "
            "descriptions of microscopic visual characteristics visible on the slide.";
        p.task_text =
            "Rewrite the report below. Keep only statements about tissue morphology that are "
            "visible at the slide level. Remove lymph-node counts, immunohistochemistry "
            "results, and genetic findings.";
        p.keywords = {"tumor", "cancer"};
        p.exclusions = {"lymph node", "lymph nodes", "immunohistochemistry", "ihc", "genetic",
                        "mutation"};
        return p;
    }

    void validate() const {
        if (system_text.empty() && task_text.empty())
            throw ConfigError("CleaningPrompt: prompt text must be non-empty");
        if (exclusions.empty()) throw ConfigError("CleaningPrompt: exclusion list must be non-empty");
    }

    std::string digest_material(const std::string& raw_text) const {
        std::string m = system_text;
        m += '\x1f';
        m += task_text;
        for (const auto& k : keywords) {
            m += '\x1f';
            m += k;
        }
        for (const auto& e : exclusions) {
            m += '\x1f';
            m += e;
        }
        m += '\x1e';
        m += raw_text;
        return m;
    }
};

struct CleaningRecord {
    std::string case_id;
    std::string raw_text;
    std::string cleaned_text;
    std::string provider;  // "live" or "mock"
    std::string digest;
};

// Chat-completion service descriptor. The auth token is read from the
// environment, never stored.
struct ServiceEndpoint {
    std::string provider = "mock";  // "live" | "mock"
    std::string base_url = "http://localhost:8080";
    std::string path = "/v1/chat/completions";
    std::string model = "gpt-4";
    std::string api_key_env = "RASA_API_KEY";
    int max_attempts = 3;
    int initial_backoff_ms = 100;
    int timeout_s = 30;
};

namespace detail {

inline std::string lowercase(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

inline bool contains_ci(const std::string& haystack, const std::string& needle) {
    return lowercase(haystack).find(lowercase(needle)) != std::string::npos;
}

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// Sentences including their terminating punctuation.
inline std::vector<std::string> split_sentences(const std::string& text) {
    std::vector<std::string> out;
    std::string current;
    for (char c : text) {
        current.push_back(c);
        if (c == '.' || c == '!' || c == '?') {
            std::string t = trim(current);
            if (!t.empty()) out.push_back(t);
            current.clear();
        }
    }
    std::string t = trim(current);
    if (!t.empty()) out.push_back(t);
    return out;
}

}  // namespace detail

inline std::string digest_of(const CleaningPrompt& prompt, const std::string& raw_text) {
    const std::string material = prompt.digest_material(raw_text);
    const std::uint64_t h1 = fnv1a64(material);
    const std::uint64_t h2 = fnv1a64(std::to_string(material.size()) + "|" + material);
    char buf[33];
    std::snprintf(buf, sizeof(buf), "%016llx%016llx", static_cast<unsigned long long>(h1),
                  static_cast<unsigned long long>(h2));
    return buf;
}

// Deterministic offline provider: drops every sentence containing an
// exclusion-list term, keeps the rest verbatim.
inline std::string mock_clean(const std::string& raw_text, const CleaningPrompt& prompt) {
    std::string out;
    for (const auto& sentence : detail::split_sentences(raw_text)) {
        bool excluded = false;
        for (const auto& term : prompt.exclusions)
            if (detail::contains_ci(sentence, term)) {
                excluded = true;
                break;
            }
        if (excluded) continue;
        if (!out.empty()) out += ' ';
        out += sentence;
    }
    return out;
}

// Rewrites raw pathology reports through a chat-completion service (or the
// bundled mock), caching by content digest.
class ReportCleaner {
public:
    struct Stats {
        int provider_calls = 0;
        int cache_hits = 0;
        int retries = 0;
    };

    ReportCleaner(CleaningPrompt prompt, ServiceEndpoint endpoint,
                  std::filesystem::path cache_dir = {})
        : prompt_(std::move(prompt)), endpoint_(std::move(endpoint)),
          cache_dir_(std::move(cache_dir)) {
        prompt_.validate();
        if (endpoint_.provider != "live" && endpoint_.provider != "mock")
            throw ConfigError("ReportCleaner: provider must be 'live' or 'mock', got '" +
                              endpoint_.provider + "'");
        if (!cache_dir_.empty()) std::filesystem::create_directories(cache_dir_);
    }

    CleaningRecord clean(const std::string& case_id, const std::string& raw_text) {
        if (raw_text.empty()) throw ContentError("clean_report: empty raw text for " + case_id);
        const std::string digest = digest_of(prompt_, raw_text);
        if (!cache_dir_.empty()) {
            const auto cached = cache_path(digest);
            if (std::filesystem::exists(cached)) {
                ++stats_.cache_hits;
                return read_record(cached);
            }
        }
        CleaningRecord rec;
        rec.case_id = case_id;
        rec.raw_text = raw_text;
        rec.digest = digest;
        rec.provider = endpoint_.provider;
        ++stats_.provider_calls;
        rec.cleaned_text = endpoint_.provider == "mock" ? mock_clean(raw_text, prompt_)
                                                        : live_clean(raw_text);
        if (rec.cleaned_text.empty())
            throw ContentError("clean_report: provider returned empty output for " + case_id);
        if (!cache_dir_.empty()) write_record(rec);
        return rec;
    }

    const Stats& stats() const { return stats_; }
    const CleaningPrompt& prompt() const { return prompt_; }

private:
    std::filesystem::path cache_path(const std::string& digest) const {
        return cache_dir_ / (digest + ".json");
    }

    CleaningRecord read_record(const std::filesystem::path& path) const {
        try {
            nlohmann::json doc = nlohmann::json::parse(detail::read_file_bytes(path));
            CleaningRecord rec;
            rec.case_id = doc.at("case_id").get<std::string>();
            rec.raw_text = doc.at("raw_text").get<std::string>();
            rec.cleaned_text = doc.at("cleaned_text").get<std::string>();
            rec.provider = doc.at("provider").get<std::string>();
            rec.digest = doc.at("digest").get<std::string>();
            return rec;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("cleaning cache " + path.string() + ": " + e.what());
        }
    }

    void write_record(const CleaningRecord& rec) const {
        nlohmann::json doc{{"case_id", rec.case_id},
                           {"raw_text", rec.raw_text},
                           {"cleaned_text", rec.cleaned_text},
                           {"provider", rec.provider},
                           {"digest", rec.digest}};
        detail::write_file_bytes(cache_path(rec.digest), doc.dump(2) + "\n");
    }

    std::string live_clean(const std::string& raw_text) {
        const char* key = std::getenv(endpoint_.api_key_env.c_str());
        if (key == nullptr || std::string(key).empty())
            throw ConfigError("live provider requires the " + endpoint_.api_key_env +
                              " environment variable");
        nlohmann::json body;
        body["model"] = endpoint_.model;
        body["temperature"] = 0;
        std::string user = endpoint_task_text();
        body["messages"] = {{{"role", "system"}, {"content", prompt_.system_text}},
                            {{"role", "user"}, {"content", user + "\n\nReport:\n" + raw_text}}};

        std::string last_error;
        for (int attempt = 0; attempt < endpoint_.max_attempts; ++attempt) {
            if (attempt > 0) {
                ++stats_.retries;
                std::this_thread::sleep_for(
                    std::chrono::milliseconds(endpoint_.initial_backoff_ms * (1 << (attempt - 1))));
            }
            httplib::Client client(endpoint_.base_url);
            client.set_connection_timeout(endpoint_.timeout_s);
            client.set_read_timeout(endpoint_.timeout_s);
            httplib::Headers headers{{"Authorization", std::string("Bearer ") + key}};
            auto res = client.Post(endpoint_.path, headers, body.dump(), "application/json");
            if (!res) {
                last_error = "no response (" + httplib::to_string(res.error()) + ")";
                continue;
            }
            if (res->status < 200 || res->status >= 300) {
                last_error = "HTTP " + std::to_string(res->status);
                continue;
            }
            try {
                nlohmann::json doc = nlohmann::json::parse(res->body);
                std::string content =
                    doc.at("choices").at(0).at("message").at("content").get<std::string>();
                return detail::trim(content);
            } catch (const nlohmann::json::exception& e) {
                throw ContentError(std::string("live provider: malformed response: ") + e.what());
            }
        }
        throw TransportError("live provider failed after " + std::to_string(endpoint_.max_attempts) +
                             " attempts: " + last_error);
    }

    std::string endpoint_task_text() const {
        std::string user = prompt_.task_text;
        if (!prompt_.keywords.empty()) {
            user += "\nKeywords of interest:";
            for (const auto& k : prompt_.keywords) user += " " + k;
        }
        user += "\nExclude:";
        for (const auto& e : prompt_.exclusions) user += " " + e + ";";
        return user;
    }

    CleaningPrompt prompt_;
    ServiceEndpoint endpoint_;
    std::filesystem::path cache_dir_;
    Stats stats_;
};

// Case-insensitive keyword-to-token matching with subword continuation
// markers ("##piece") stripped. A token matches when the keyword contains the
// stripped token or the token contains the keyword.
inline std::vector<int> find_keyword_tokens(const std::vector<std::string>& token_strings,
                                            const std::vector<std::string>& keywords) {
    if (keywords.empty())
        throw ConfigError("find_keyword_tokens: keyword list must be non-empty");
    std::set<int> hits;
    for (std::size_t i = 0; i < token_strings.size(); ++i) {
        std::string token = detail::lowercase(token_strings[i]);
        if (token.rfind("##", 0) == 0) token = token.substr(2);
        if (token.empty()) continue;
        for (const auto& kw_raw : keywords) {
            const std::string kw = detail::lowercase(kw_raw);
            if (kw.empty()) continue;
            if (kw.find(token) != std::string::npos || token.find(kw) != std::string::npos) {
                hits.insert(static_cast<int>(i));
                break;
            }
        }
    }
    return std::vector<int>(hits.begin(), hits.end());
}

}  // namespace rasa
