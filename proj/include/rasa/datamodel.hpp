#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "rasa/errors.hpp"
#include "rasa/rng.hpp"
#include "rasa/tensor.hpp"

namespace rasa {

struct GridCoord {
    std::int32_t x = 0;
    std::int32_t y = 0;
    bool operator==(const GridCoord&) const = default;
};

// Unordered set of instance feature vectors (patches or text tokens), stored
// row-major. Values are held in double but quantized to 32-bit storage
// precision at the file boundary.
struct FeatureBag {
    int n = 0;
    int d = 0;
    std::vector<double> values;                 // n * d
    std::optional<std::vector<GridCoord>> coords;  // patch bags only

    double at(int row, int col) const { return values[static_cast<std::size_t>(row) * d + col]; }

    Tensor to_tensor() const { return Tensor::from_values(n, d, values); }

    std::vector<double> row(int r) const {
        return std::vector<double>(values.begin() + static_cast<std::size_t>(r) * d,
                                   values.begin() + static_cast<std::size_t>(r + 1) * d);
    }

    void validate() const {
        if (n < 1 || d < 1)
            throw ValidationError("FeatureBag: needs n >= 1 and d >= 1, got n=" + std::to_string(n) +
                                  " d=" + std::to_string(d));
        if (values.size() != static_cast<std::size_t>(n) * d)
            throw ValidationError("FeatureBag: value count " + std::to_string(values.size()) +
                                  " does not match " + std::to_string(n) + "x" + std::to_string(d));
        for (double v : values)
            if (!std::isfinite(v)) throw ValidationError("FeatureBag: non-finite entry");
        if (coords && coords->size() != static_cast<std::size_t>(n))
            throw ValidationError("FeatureBag: coords length " + std::to_string(coords->size()) +
                                  " does not match n=" + std::to_string(n));
    }
};

// Observed time in days plus event indicator; fractional events arise only
// from label mixing.
struct SurvivalLabel {
    double time = 0.0;
    double event = 0.0;  // 1 observed, 0 censored

    bool event_observed() const { return event >= 0.5; }

    void validate() const {
        if (!(time > 0.0)) throw ValidationError("SurvivalLabel: time must be positive");
        if (!(event >= 0.0 && event <= 1.0))
            throw ValidationError("SurvivalLabel: event must lie in [0,1]");
    }
};

struct CaseRecord {
    std::string id;
    std::string patch_file;
    std::string text_file;
    std::vector<std::string> token_strings;
    std::vector<int> keyword_token_indices;
    SurvivalLabel label;
};

struct TrialSplit {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;
};

constexpr int kNumTrials = 5;
constexpr int kManifestSchemaVersion = 1;

struct CohortManifest {
    std::vector<CaseRecord> cases;
    std::vector<TrialSplit> splits;       // one per trial
    std::filesystem::path base_dir;       // directory the manifest was loaded from

    const CaseRecord& case_by_id(const std::string& id) const {
        for (const auto& c : cases)
            if (c.id == id) return c;
        throw ValidationError("unknown case id: " + id);
    }

    bool has_case(const std::string& id) const {
        for (const auto& c : cases)
            if (c.id == id) return true;
        return false;
    }

    std::filesystem::path patch_path(const CaseRecord& c) const { return base_dir / c.patch_file; }
    std::filesystem::path text_path(const CaseRecord& c) const { return base_dir / c.text_file; }
};

// ---- binary encoding helpers ----

namespace detail {

inline void put_u16le(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32le(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32le(out, bits);
}

inline void put_f64le(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64le(out, bits);
}

inline void put_i32le(std::string& out, std::int32_t v) {
    put_u32le(out, static_cast<std::uint32_t>(v));
}

class ByteReader {
public:
    ByteReader(const std::string& buf, std::string source)
        : buf_(buf), source_(std::move(source)) {}

    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint8_t>(buf_[pos_]) |
                          (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf_[pos_ + 1])) << 8);
        pos_ += 2;
        return v;
    }

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }

    std::string bytes(std::size_t count) {
        need(count);
        std::string s = buf_.substr(pos_, count);
        pos_ += count;
        return s;
    }

    std::size_t remaining() const { return buf_.size() - pos_; }

    void expect_end() {
        if (pos_ != buf_.size())
            throw ParseError(source_ + ": " + std::to_string(buf_.size() - pos_) +
                             " trailing bytes after payload");
    }

private:
    void need(std::size_t count) {
        if (buf_.size() - pos_ < count)
            throw ParseError(source_ + ": truncated payload (needed " + std::to_string(count) +
                             " bytes at offset " + std::to_string(pos_) + ")");
    }

    const std::string& buf_;
    std::string source_;
    std::size_t pos_ = 0;
};

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failure: " + path.string());
    return buf;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failure: " + path.string());
}

}  // namespace detail

// Quantize to the 32-bit storage precision the file format carries.
inline double to_storage_precision(double v) { return static_cast<double>(static_cast<float>(v)); }

// ---- RASB feature-bag files ----
// magic "RASB" | version u16 LE (=1) | flags u8 (bit0: coords) | n u32 | d u32
// | n*d f32 LE row-major | [n pairs of i32 LE coords]

constexpr std::uint16_t kRasbVersion = 1;
constexpr std::uint64_t kRasbMaxElements = 1ULL << 31;

inline std::string encode_feature_bag(const FeatureBag& bag) {
    bag.validate();
    std::string out;
    out.reserve(13 + bag.values.size() * 4 + (bag.coords ? bag.coords->size() * 8 : 0));
    out += "RASB";
    detail::put_u16le(out, kRasbVersion);
    out.push_back(static_cast<char>(bag.coords ? 1 : 0));
    detail::put_u32le(out, static_cast<std::uint32_t>(bag.n));
    detail::put_u32le(out, static_cast<std::uint32_t>(bag.d));
    for (double v : bag.values) detail::put_f32le(out, static_cast<float>(v));
    if (bag.coords) {
        for (const auto& c : *bag.coords) {
            detail::put_i32le(out, c.x);
            detail::put_i32le(out, c.y);
        }
    }
    return out;
}

inline void write_feature_bag(const FeatureBag& bag, const std::filesystem::path& path) {
    detail::write_file_bytes(path, encode_feature_bag(bag));
}

inline FeatureBag decode_feature_bag(const std::string& buf, const std::string& source) {
    detail::ByteReader r(buf, source);
    if (r.bytes(4) != "RASB") throw ParseError(source + ": bad magic, expected RASB");
    std::uint16_t version = r.u16();
    if (version != kRasbVersion)
        throw ParseError(source + ": unsupported format version " + std::to_string(version));
    std::uint8_t flags = r.u8();
    if (flags & ~1u) throw ParseError(source + ": unknown flag bits set");
    std::uint32_t n = r.u32();
    std::uint32_t d = r.u32();
    if (n < 1 || d < 1) throw ParseError(source + ": dimensions must be >= 1");
    std::uint64_t count = static_cast<std::uint64_t>(n) * d;
    if (count > kRasbMaxElements)
        throw ParseError(source + ": dimension overflow, " + std::to_string(n) + "x" + std::to_string(d));
    FeatureBag bag;
    bag.n = static_cast<int>(n);
    bag.d = static_cast<int>(d);
    bag.values.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) bag.values[i] = static_cast<double>(r.f32());
    if (flags & 1u) {
        std::vector<GridCoord> coords(n);
        for (std::uint32_t i = 0; i < n; ++i) {
            coords[i].x = r.i32();
            coords[i].y = r.i32();
        }
        bag.coords = std::move(coords);
    }
    r.expect_end();
    bag.validate();
    return bag;
}

inline FeatureBag read_feature_bag(const std::filesystem::path& path) {
    return decode_feature_bag(detail::read_file_bytes(path), path.filename().string());
}

// Reads only n and d, without the payload.
inline std::pair<int, int> read_feature_bag_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    char head[15];
    in.read(head, 15);
    if (in.gcount() != 15) throw ParseError(path.filename().string() + ": truncated header");
    std::string buf(head, 15);
    detail::ByteReader r(buf, path.filename().string());
    if (r.bytes(4) != "RASB") throw ParseError(path.filename().string() + ": bad magic, expected RASB");
    r.u16();
    r.u8();
    int n = static_cast<int>(r.u32());
    int d = static_cast<int>(r.u32());
    return {n, d};
}

// ---- splits ----

// 5 independent seeded random partitions at 0.6/0.2/0.2 (floor for test and
// val, remainder to train).
inline std::vector<TrialSplit> make_splits(const std::vector<std::string>& case_ids,
                                           std::uint64_t seed) {
    const std::size_t n = case_ids.size();
    if (n < 5)
        throw ValidationError("make_splits: need at least 5 cases, got " + std::to_string(n));
    std::vector<TrialSplit> splits;
    splits.reserve(kNumTrials);
    const std::size_t n_test = n / 5;
    const std::size_t n_val = n / 5;
    Rng root(seed);
    for (int trial = 0; trial < kNumTrials; ++trial) {
        Rng rng = root.fork("split").fork(static_cast<std::uint64_t>(trial));
        std::vector<std::string> ids = case_ids;
        rng.shuffle(ids);
        TrialSplit s;
        s.test.assign(ids.begin(), ids.begin() + n_test);
        s.val.assign(ids.begin() + n_test, ids.begin() + n_test + n_val);
        s.train.assign(ids.begin() + n_test + n_val, ids.end());
        splits.push_back(std::move(s));
    }
    return splits;
}

// ---- manifest document ----

namespace detail {

inline nlohmann::json case_to_json(const CaseRecord& c) {
    return nlohmann::json{{"id", c.id},
                          {"patch_file", c.patch_file},
                          {"text_file", c.text_file},
                          {"token_strings", c.token_strings},
                          {"keyword_token_indices", c.keyword_token_indices},
                          {"label", {{"time", c.label.time}, {"event", c.label.event}}}};
}

}  // namespace detail

inline void validate_manifest(const CohortManifest& m) {
    std::vector<std::string> problems;
    std::set<std::string> ids;
    for (const auto& c : m.cases) {
        if (!ids.insert(c.id).second) problems.push_back("duplicate case id " + c.id);
        if (!(c.label.time > 0.0)) problems.push_back("case " + c.id + ": non-positive time");
        if (!(c.label.event >= 0.0 && c.label.event <= 1.0))
            problems.push_back("case " + c.id + ": event outside [0,1]");
        const auto patch_p = m.patch_path(c);
        const auto text_p = m.text_path(c);
        if (!std::filesystem::exists(patch_p))
            problems.push_back("case " + c.id + ": missing patch file " + c.patch_file);
        if (!std::filesystem::exists(text_p)) {
            problems.push_back("case " + c.id + ": missing text file " + c.text_file);
        } else {
            auto [tn, td] = read_feature_bag_header(text_p);
            (void)td;
            if (static_cast<std::size_t>(tn) != c.token_strings.size())
                problems.push_back("case " + c.id + ": " + std::to_string(c.token_strings.size()) +
                                   " token strings for " + std::to_string(tn) + " text rows");
            for (int ix : c.keyword_token_indices)
                if (ix < 0 || ix >= tn)
                    problems.push_back("case " + c.id + ": keyword token index " + std::to_string(ix) +
                                       " out of range [0," + std::to_string(tn) + ")");
        }
    }
    if (m.splits.size() != static_cast<std::size_t>(kNumTrials))
        problems.push_back("expected " + std::to_string(kNumTrials) + " trial splits, found " +
                           std::to_string(m.splits.size()));
    for (std::size_t t = 0; t < m.splits.size(); ++t) {
        const auto& s = m.splits[t];
        std::map<std::string, int> seen;
        for (const auto& id : s.train) seen[id]++;
        for (const auto& id : s.val) seen[id]++;
        for (const auto& id : s.test) seen[id]++;
        for (const auto& [id, count] : seen) {
            if (!ids.count(id))
                problems.push_back("trial " + std::to_string(t) + ": unknown case id " + id);
            if (count > 1)
                problems.push_back("trial " + std::to_string(t) + ": case " + id +
                                   " appears in more than one split");
        }
        for (const auto& id : ids)
            if (!seen.count(id))
                problems.push_back("trial " + std::to_string(t) + ": case " + id + " missing from splits");
    }
    if (!problems.empty()) {
        std::string msg = "manifest validation failed:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw ValidationError(msg);
    }
}

inline void save_manifest(const CohortManifest& m, const std::filesystem::path& path) {
    nlohmann::json doc;
    doc["schema_version"] = kManifestSchemaVersion;
    doc["cases"] = nlohmann::json::array();
    for (const auto& c : m.cases) doc["cases"].push_back(detail::case_to_json(c));
    doc["splits"] = nlohmann::json::array();
    for (const auto& s : m.splits)
        doc["splits"].push_back({{"train", s.train}, {"val", s.val}, {"test", s.test}});
    detail::write_file_bytes(path, doc.dump(2) + "\n");
}

inline CohortManifest load_manifest(const std::filesystem::path& path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(detail::read_file_bytes(path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("manifest " + path.string() + ": " + e.what());
    }
    CohortManifest m;
    m.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    try {
        if (doc.at("schema_version").get<int>() != kManifestSchemaVersion)
            throw ParseError("manifest " + path.string() + ": unsupported schema version");
        for (const auto& jc : doc.at("cases")) {
            CaseRecord c;
            c.id = jc.at("id").get<std::string>();
            c.patch_file = jc.at("patch_file").get<std::string>();
            c.text_file = jc.at("text_file").get<std::string>();
            c.token_strings = jc.at("token_strings").get<std::vector<std::string>>();
            c.keyword_token_indices = jc.at("keyword_token_indices").get<std::vector<int>>();
            c.label.time = jc.at("label").at("time").get<double>();
            c.label.event = jc.at("label").at("event").get<double>();
            m.cases.push_back(std::move(c));
        }
        for (const auto& js : doc.at("splits")) {
            TrialSplit s;
            s.train = js.at("train").get<std::vector<std::string>>();
            s.val = js.at("val").get<std::vector<std::string>>();
            s.test = js.at("test").get<std::vector<std::string>>();
            m.splits.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("manifest " + path.string() + ": " + e.what());
    }
    validate_manifest(m);
    return m;
}

}  // namespace rasa
