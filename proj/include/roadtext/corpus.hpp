#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roadtext/util.hpp"

namespace roadtext {

enum class Tier1 { Transportation, NonTransportation };

enum class Tier2 { Construction, TrafficOperations, Incident, SpecialEvents, OtherEvents };

inline const char* to_string(Tier1 t) {
    return t == Tier1::Transportation ? "transportation" : "non_transportation";
}

inline const char* to_string(Tier2 t) {
    switch (t) {
        case Tier2::Construction: return "construction";
        case Tier2::TrafficOperations: return "traffic_operations";
        case Tier2::Incident: return "incident";
        case Tier2::SpecialEvents: return "special_events";
        case Tier2::OtherEvents: return "other_events";
    }
    return "?";
}

inline std::optional<Tier1> parse_tier1(std::string_view s) {
    std::string v = detail::to_lower(s);
    if (v == "transportation") return Tier1::Transportation;
    if (v == "non_transportation" || v == "non-transportation" || v == "nontransportation")
        return Tier1::NonTransportation;
    return std::nullopt;
}

inline std::optional<Tier2> parse_tier2(std::string_view s) {
    std::string v = detail::to_lower(s);
    if (v == "construction") return Tier2::Construction;
    if (v == "traffic_operations" || v == "traffic operations") return Tier2::TrafficOperations;
    if (v == "incident" || v == "incidents") return Tier2::Incident;
    if (v == "special_events" || v == "special events") return Tier2::SpecialEvents;
    if (v == "other_events" || v == "other events" || v == "others") return Tier2::OtherEvents;
    return std::nullopt;
}

/// Two-level class label. tier2 is only meaningful for transportation
/// messages and is rejected otherwise.
struct ClassLabel {
    Tier1 tier1 = Tier1::NonTransportation;
    std::optional<Tier2> tier2;

    ClassLabel() = default;
    explicit ClassLabel(Tier1 t1, std::optional<Tier2> t2 = std::nullopt) : tier1(t1), tier2(t2) {
        if (tier2 && tier1 != Tier1::Transportation)
            throw error("tier2 label requires tier1=transportation");
    }

    bool operator==(const ClassLabel& o) const = default;
    bool operator<(const ClassLabel& o) const {
        if (tier1 != o.tier1) return static_cast<int>(tier1) < static_cast<int>(o.tier1);
        if (tier2.has_value() != o.tier2.has_value()) return !tier2.has_value();
        if (!tier2) return false;
        return static_cast<int>(*tier2) < static_cast<int>(*o.tier2);
    }

    std::string str() const {
        std::string s = to_string(tier1);
        if (tier2) s += std::string("/") + to_string(*tier2);
        return s;
    }
};

struct GeoPoint {
    double lat = 0;
    double lon = 0;
    bool operator==(const GeoPoint&) const = default;
};

// Optional hook fired on every gold-label read; the pipeline tests install
// one to prove no stage touches test labels before evaluation.
struct LabelAudit {
    static inline std::function<void(const std::string& id)> on_read;
};

/// One raw input record.
class Message {
  public:
    std::string id;
    std::string text;
    std::int64_t created_at = 0;  // seconds UTC
    std::string user;
    std::optional<GeoPoint> geo;

    Message() = default;
    Message(std::string id_, std::string text_) : id(std::move(id_)), text(std::move(text_)) {}

    const std::optional<ClassLabel>& gold() const {
        if (LabelAudit::on_read) LabelAudit::on_read(id);
        return gold_;
    }
    void set_gold(std::optional<ClassLabel> l) { gold_ = std::move(l); }
    bool has_gold() const { return gold_.has_value(); }

  private:
    std::optional<ClassLabel> gold_;
};

/// Ordered message collection. Immutable by convention once loaded; safe to
/// share read-only across workers.
struct Corpus {
    std::vector<Message> messages;

    std::size_t size() const { return messages.size(); }
    bool empty() const { return messages.empty(); }

    std::map<ClassLabel, std::size_t> label_counts() const {
        std::map<ClassLabel, std::size_t> counts;
        for (const auto& m : messages)
            if (m.has_gold()) ++counts[*m.gold()];
        return counts;
    }
};

struct SplitPlan {
    std::uint64_t seed = 0;
    double train_fraction = 0.8;
    enum class Mode { Random, Stratified } mode = Mode::Random;
};

struct LoadResult {
    Corpus corpus;
    std::size_t skipped = 0;
    std::vector<std::string> warnings;
};

namespace detail {

inline bool valid_geo(double lat, double lon) {
    return std::isfinite(lat) && std::isfinite(lon) && lat >= -90.0 && lat <= 90.0 &&
           lon >= -180.0 && lon <= 180.0;
}

// Builds a Message from parsed fields; returns an explanation on rejection.
inline std::optional<std::string> finish_message(Message& m, const std::string& t1,
                                                 const std::string& t2) {
    if (m.id.empty()) return "missing id";
    if (trim(m.text).empty()) return "missing or empty text";
    if (!t1.empty()) {
        auto tier1 = parse_tier1(t1);
        if (!tier1) return "unknown tier1 label: " + t1;
        std::optional<Tier2> tier2;
        if (!t2.empty()) {
            tier2 = parse_tier2(t2);
            if (!tier2) return "unknown tier2 label: " + t2;
            if (*tier1 != Tier1::Transportation) return "tier2 label on non-transportation record";
        }
        m.set_gold(ClassLabel(*tier1, tier2));
    } else if (!t2.empty()) {
        return "tier2 label without tier1";
    }
    return std::nullopt;
}

}  // namespace detail

enum class CorpusFormat { Jsonl, Csv };

/// Reads a corpus from JSONL or CSV. Malformed records are skipped, counted
/// and reported in the result; an unreadable file is fatal.
inline LoadResult load_corpus(const std::filesystem::path& path, CorpusFormat format) {
    LoadResult result;
    std::string content = detail::read_file(path);

    auto reject = [&](std::size_t lineno, const std::string& why) {
        ++result.skipped;
        result.warnings.push_back(detail::strf("line %zu: %s", lineno, why.c_str()));
    };

    if (format == CorpusFormat::Jsonl) {
        std::size_t lineno = 0;
        for (const std::string& line : detail::split(content, '\n')) {
            ++lineno;
            std::string t = detail::trim(line);
            if (t.empty()) continue;
            nlohmann::json j = nlohmann::json::parse(t, nullptr, false);
            if (j.is_discarded() || !j.is_object()) {
                reject(lineno, "invalid JSON");
                continue;
            }
            Message m;
            if (j.contains("id")) {
                if (j["id"].is_string())
                    m.id = j["id"].get<std::string>();
                else if (j["id"].is_number_integer())
                    m.id = std::to_string(j["id"].get<std::int64_t>());
            }
            if (j.contains("text") && j["text"].is_string()) m.text = j["text"].get<std::string>();
            if (j.contains("created_at") && j["created_at"].is_number())
                m.created_at = j["created_at"].get<std::int64_t>();
            if (j.contains("user") && j["user"].is_string()) m.user = j["user"].get<std::string>();
            if (j.contains("geo") && j["geo"].is_object()) {
                const auto& g = j["geo"];
                if (!g.contains("lat") || !g.contains("lon") || !g["lat"].is_number() ||
                    !g["lon"].is_number()) {
                    reject(lineno, "geo object missing lat/lon");
                    continue;
                }
                double lat = g["lat"].get<double>(), lon = g["lon"].get<double>();
                if (!detail::valid_geo(lat, lon)) {
                    reject(lineno, "geo out of range");
                    continue;
                }
                m.geo = GeoPoint{lat, lon};
            }
            std::string t1 = j.value("label_tier1", std::string());
            std::string t2 = j.value("label_tier2", std::string());
            if (auto why = detail::finish_message(m, t1, t2)) {
                reject(lineno, *why);
                continue;
            }
            result.corpus.messages.push_back(std::move(m));
        }
    } else {
        auto rows = detail::csv_parse(content);
        if (rows.empty()) throw error("empty CSV file: " + path.string());
        const std::vector<std::string> expected = {"id",   "text", "created_at",  "user",
                                                   "lat",  "lon",  "label_tier1", "label_tier2"};
        if (rows[0] != expected)
            throw error("CSV header mismatch, expected: id,text,created_at,user,lat,lon,"
                        "label_tier1,label_tier2");
        for (std::size_t r = 1; r < rows.size(); ++r) {
            const auto& row = rows[r];
            if (row.size() != expected.size()) {
                reject(r + 1, detail::strf("expected %zu fields, got %zu", expected.size(),
                                           row.size()));
                continue;
            }
            Message m;
            m.id = row[0];
            m.text = row[1];
            if (!row[2].empty()) {
                try {
                    m.created_at = std::stoll(row[2]);
                } catch (const std::exception&) {
                    reject(r + 1, "bad created_at: " + row[2]);
                    continue;
                }
            }
            m.user = row[3];
            if (!row[4].empty() || !row[5].empty()) {
                try {
                    double lat = std::stod(row[4]), lon = std::stod(row[5]);
                    if (!detail::valid_geo(lat, lon)) {
                        reject(r + 1, "geo out of range");
                        continue;
                    }
                    m.geo = GeoPoint{lat, lon};
                } catch (const std::exception&) {
                    reject(r + 1, "bad lat/lon");
                    continue;
                }
            }
            if (auto why = detail::finish_message(m, row[6], row[7])) {
                reject(r + 1, *why);
                continue;
            }
            result.corpus.messages.push_back(std::move(m));
        }
    }
    return result;
}

inline nlohmann::json message_to_json(const Message& m) {
    nlohmann::json j;
    j["id"] = m.id;
    j["text"] = m.text;
    j["created_at"] = m.created_at;
    j["user"] = m.user;
    if (m.geo) j["geo"] = {{"lat", m.geo->lat}, {"lon", m.geo->lon}};
    if (m.has_gold()) {
        const ClassLabel& l = *m.gold();
        j["label_tier1"] = to_string(l.tier1);
        if (l.tier2) j["label_tier2"] = to_string(*l.tier2);
    }
    return j;
}

inline std::string corpus_to_jsonl(const Corpus& c) {
    std::string out;
    for (const auto& m : c.messages) {
        out += message_to_json(m).dump();
        out += '\n';
    }
    return out;
}

namespace detail {

// Splits indices into (train, test) with the test side floored; remainder
// trains. Both sides come back in corpus order.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::vector<std::size_t> idx, double train_fraction, Rng& rng) {
    rng.shuffle(idx);
    auto n = idx.size();
    // floor on the test side; the +1e-6 guard absorbs representation error in
    // fractions like 0.8 so (1-0.8)*10 still counts as 2
    auto test_count = static_cast<std::size_t>(
        std::floor((1.0 - train_fraction) * static_cast<double>(n) + 1e-6));
    std::vector<std::size_t> test(idx.end() - static_cast<std::ptrdiff_t>(test_count), idx.end());
    idx.resize(n - test_count);
    std::sort(idx.begin(), idx.end());
    std::sort(test.begin(), test.end());
    return {std::move(idx), std::move(test)};
}

}  // namespace detail

/// Deterministic train/test split. Stratified mode preserves per-class
/// proportions within one member; identical inputs give identical splits.
inline std::pair<Corpus, Corpus> split(const Corpus& corpus, const SplitPlan& plan) {
    if (corpus.empty()) throw error("split: empty corpus");
    if (!(plan.train_fraction > 0.0 && plan.train_fraction < 1.0))
        throw error("split: train_fraction must be in (0,1)");

    std::vector<std::size_t> train_idx, test_idx;
    if (plan.mode == SplitPlan::Mode::Random) {
        std::vector<std::size_t> idx(corpus.size());
        std::iota(idx.begin(), idx.end(), 0);
        detail::Rng rng(plan.seed);
        std::tie(train_idx, test_idx) = detail::split_indices(std::move(idx), plan.train_fraction, rng);
    } else {
        // group by label; unlabeled messages form their own stratum
        std::map<std::string, std::vector<std::size_t>> strata;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            const auto& m = corpus.messages[i];
            strata[m.has_gold() ? m.gold()->str() : std::string("<unlabeled>")].push_back(i);
        }
        for (const auto& [name, members] : strata)
            if (members.size() < 2)
                throw error("split: stratified mode requires >=2 members per class, class '" +
                            name + "' has " + std::to_string(members.size()));
        std::uint64_t stratum_salt = 0;
        for (auto& [name, members] : strata) {
            detail::Rng rng(plan.seed ^ detail::fnv1a64(name) ^ (stratum_salt++));
            auto [tr, te] = detail::split_indices(std::move(members), plan.train_fraction, rng);
            train_idx.insert(train_idx.end(), tr.begin(), tr.end());
            test_idx.insert(test_idx.end(), te.begin(), te.end());
        }
        std::sort(train_idx.begin(), train_idx.end());
        std::sort(test_idx.begin(), test_idx.end());
    }

    Corpus train, test;
    train.messages.reserve(train_idx.size());
    test.messages.reserve(test_idx.size());
    for (auto i : train_idx) train.messages.push_back(corpus.messages[i]);
    for (auto i : test_idx) test.messages.push_back(corpus.messages[i]);
    return {std::move(train), std::move(test)};
}

/// Random under-sampling: every class is cut down to the minority-class
/// count by seeded sampling without replacement. Unlabeled messages are
/// dropped (this is a training-set operation).
inline Corpus undersample(const Corpus& corpus, std::uint64_t seed) {
    std::map<std::string, std::vector<std::size_t>> classes;
    for (std::size_t i = 0; i < corpus.size(); ++i)
        if (corpus.messages[i].has_gold())
            classes[corpus.messages[i].gold()->str()].push_back(i);
    if (classes.size() < 2) throw error("undersample: need at least 2 classes");

    std::size_t minority = SIZE_MAX;
    for (const auto& [name, members] : classes) minority = std::min(minority, members.size());

    std::vector<std::size_t> keep;
    for (auto& [name, members] : classes) {
        detail::Rng rng(seed ^ detail::fnv1a64(name));
        rng.shuffle(members);
        members.resize(minority);
        keep.insert(keep.end(), members.begin(), members.end());
    }
    std::sort(keep.begin(), keep.end());

    Corpus out;
    out.messages.reserve(keep.size());
    for (auto i : keep) out.messages.push_back(corpus.messages[i]);
    return out;
}

}  // namespace roadtext
