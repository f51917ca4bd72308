#pragma once

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "roadtext/corpus.hpp"
#include "roadtext/preprocess.hpp"
#include "roadtext/util.hpp"

namespace roadtext {

struct StreetRecord {
    std::string name;          // normalized (uppercase, suffix-expanded, token-sorted)
    std::string display_name;  // as loaded
    std::string borough;

    bool operator==(const StreetRecord&) const = default;
};

struct IntersectionRecord {
    std::string street_a;  // normalized
    std::string street_b;
    std::string borough;
    double lat = 0;
    double lon = 0;
};

struct StreetMatch {
    StreetRecord street;
    double score = 0;  // 0..100
};

enum class GeoMethod { Unresolved, Intersection, SingleStreetFallback, GeoField };

inline const char* to_string(GeoMethod m) {
    switch (m) {
        case GeoMethod::Unresolved: return "unresolved";
        case GeoMethod::Intersection: return "intersection";
        case GeoMethod::SingleStreetFallback: return "single_street_fallback";
        case GeoMethod::GeoField: return "geo_field";
    }
    return "?";
}

/// A location string pulled out of a message, with gazetteer matches and,
/// once resolved, a coordinate.
struct GeoCandidate {
    std::string raw_span;
    std::vector<StreetMatch> matched;  // every score >= the active threshold
    std::optional<std::string> borough;
    bool ambiguous_borough = false;
    std::optional<GeoPoint> resolved;
    GeoMethod method = GeoMethod::Unresolved;
    std::string note;  // resolution detail or failure reason
};

// ---------------------------------------------------------------------------
// Street-name normalization
// ---------------------------------------------------------------------------

namespace detail {

inline const std::map<std::string, std::string>& suffix_expansions() {
    static const std::map<std::string, std::string> table = {
        {"ST", "STREET"},   {"AVE", "AVENUE"},      {"PKWY", "PARKWAY"},
        {"EXPWY", "EXPRESSWAY"}, {"BLVD", "BOULEVARD"},
    };
    return table;
}

inline const std::set<std::string>& direction_tokens_upper() {
    static const std::set<std::string> dirs = {"NB", "SB", "EB", "WB"};
    return dirs;
}

}  // namespace detail

/// Uppercases, expands suffix abbreviations, strips direction tokens and
/// sorts the tokens, so "Bronx River Pkwy Sb" and "BRONX RIVER PARKWAY"
/// normalize identically.
inline std::string normalize_street(std::string_view raw) {
    std::vector<std::string> tokens;
    for (const auto& t : detail::split_ws(detail::to_upper_ascii(detail::to_lower(raw)))) {
        std::string tok;
        std::size_t i = 0;
        while (i < t.size()) {
            char32_t cp = detail::utf8_next(t, i);
            if (!detail::is_punct_cp(cp) || cp == U'-' || cp == U'\'')
                detail::utf8_append(tok, cp);
        }
        if (tok.empty()) continue;
        if (detail::direction_tokens_upper().count(tok)) continue;
        auto it = detail::suffix_expansions().find(tok);
        if (it != detail::suffix_expansions().end()) tok = it->second;
        tokens.push_back(std::move(tok));
    }
    std::sort(tokens.begin(), tokens.end());
    return detail::join(tokens, " ");
}

// ---------------------------------------------------------------------------
// Similarity ratio
// ---------------------------------------------------------------------------

/// Similarity of two strings on a 0..100 scale: 100*2m/(a+b), where m is the
/// number of matched elements derived from the edit distance with unit
/// insert/delete cost and substitution cost 2 (equivalently the longest
/// common subsequence under this metric). Case-insensitive; empty input
/// scores 0; 100 iff the strings are equal.
inline double similarity(std::string_view x, std::string_view y) {
    std::vector<char32_t> xs = detail::utf8_decode(detail::to_upper_ascii(detail::to_lower(x)));
    std::vector<char32_t> ys = detail::utf8_decode(detail::to_upper_ascii(detail::to_lower(y)));
    const std::size_t a = xs.size(), b = ys.size();
    if (a == 0 || b == 0) return 0.0;
    std::vector<std::size_t> prev(b + 1), cur(b + 1);
    for (std::size_t j = 0; j <= b; ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a; ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b; ++j) {
            std::size_t sub = prev[j - 1] + (xs[i - 1] == ys[j - 1] ? 0 : 2);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    double d = static_cast<double>(prev[b]);
    double m = (static_cast<double>(a + b) - d) / 2.0;
    return 100.0 * 2.0 * m / static_cast<double>(a + b);
}

// ---------------------------------------------------------------------------
// Gazetteer
// ---------------------------------------------------------------------------

struct Gazetteer {
    std::vector<StreetRecord> streets;
    std::vector<IntersectionRecord> intersections;
    std::set<std::string> cue_words = {"on", "at", "approaching", "near", "between", "exit"};
    std::set<std::string> suffixes = {"st",   "street", "ave",        "avenue", "blvd",
                                      "boulevard", "pkwy",   "parkway",    "expwy",  "expressway",
                                      "rd",   "road",   "tunnel",     "bridge", "airport",
                                      "plaza"};
    std::set<std::string> directions = {"nb", "sb", "eb", "wb"};
    // words that terminate a leftward span extension
    std::set<std::string> boundary_words = {"the", "a",  "an", "to",   "from", "of",
                                            "for", "with", "by", "and", "or",   "in"};

    // indexes
    std::unordered_map<std::string, std::vector<std::size_t>> by_first_token;
    std::unordered_map<std::string, std::vector<std::size_t>> by_name;
    std::vector<std::size_t> name_lengths;               // code points, parallel to streets
    std::map<std::string, GeoPoint> intersection_index;  // "a|b|borough", a<b

    static std::string pair_key(const std::string& a, const std::string& b,
                                const std::string& borough) {
        const std::string& lo = a <= b ? a : b;
        const std::string& hi = a <= b ? b : a;
        return lo + "|" + hi + "|" + detail::to_upper_ascii(borough);
    }

    void rebuild_indexes() {
        by_first_token.clear();
        by_name.clear();
        name_lengths.clear();
        intersection_index.clear();
        for (std::size_t i = 0; i < streets.size(); ++i) {
            by_name[streets[i].name].push_back(i);
            name_lengths.push_back(detail::utf8_decode(streets[i].name).size());
            auto tokens = detail::split_ws(streets[i].name);
            if (!tokens.empty()) by_first_token[tokens[0]].push_back(i);
        }
        for (const auto& x : intersections)
            intersection_index[pair_key(x.street_a, x.street_b, x.borough)] =
                GeoPoint{x.lat, x.lon};
    }

    std::optional<GeoPoint> find_intersection(const std::string& a, const std::string& b,
                                              const std::string& borough) const {
        auto it = intersection_index.find(pair_key(a, b, borough));
        if (it == intersection_index.end()) return std::nullopt;
        return it->second;
    }
};

/// streets CSV: header name,borough. intersections CSV: header
/// street_a,street_b,borough,lat,lon. Either path may be empty.
inline Gazetteer load_gazetteer(const std::filesystem::path& streets_csv,
                                const std::filesystem::path& intersections_csv) {
    Gazetteer gaz;
    if (!streets_csv.empty()) {
        auto rows = detail::csv_parse(detail::read_file(streets_csv));
        if (rows.empty() || rows[0] != std::vector<std::string>{"name", "borough"})
            throw error("streets CSV must start with header name,borough");
        for (std::size_t r = 1; r < rows.size(); ++r) {
            if (rows[r].size() != 2) throw error("bad streets CSV row " + std::to_string(r + 1));
            StreetRecord rec;
            rec.display_name = detail::trim(rows[r][0]);
            rec.name = normalize_street(rec.display_name);
            rec.borough = detail::to_upper_ascii(detail::trim(rows[r][1]));
            if (!rec.name.empty()) gaz.streets.push_back(std::move(rec));
        }
    }
    if (!intersections_csv.empty()) {
        auto rows = detail::csv_parse(detail::read_file(intersections_csv));
        const std::vector<std::string> header = {"street_a", "street_b", "borough", "lat", "lon"};
        if (rows.empty() || rows[0] != header)
            throw error("intersections CSV must start with header street_a,street_b,borough,lat,lon");
        for (std::size_t r = 1; r < rows.size(); ++r) {
            if (rows[r].size() != 5)
                throw error("bad intersections CSV row " + std::to_string(r + 1));
            IntersectionRecord rec;
            rec.street_a = normalize_street(rows[r][0]);
            rec.street_b = normalize_street(rows[r][1]);
            rec.borough = detail::to_upper_ascii(detail::trim(rows[r][2]));
            rec.lat = std::stod(rows[r][3]);
            rec.lon = std::stod(rows[r][4]);
            if (!detail::valid_geo(rec.lat, rec.lon))
                throw error("intersections CSV row " + std::to_string(r + 1) + ": bad coordinate");
            gaz.intersections.push_back(std::move(rec));
        }
    }
    gaz.rebuild_indexes();
    return gaz;
}

// ---------------------------------------------------------------------------
// Location extraction
// ---------------------------------------------------------------------------

namespace detail {

struct ExtractToken {
    std::string text;
    enum class Kind { Word, Punct, Separator, Break } kind = Kind::Word;
    bool candidate = false;  // capitalized or digit+letter mix
};

inline bool starts_upper(std::string_view t) {
    if (t.empty()) return false;
    std::size_t i = 0;
    return is_upper_cp(utf8_next(t, i));
}

inline bool digit_letter_mix(std::string_view t) {
    if (t.empty()) return false;
    std::size_t i = 0;
    if (!is_ascii_digit(utf8_next(t, i))) return false;
    bool has_letter = false, has_digit = true;
    i = 0;
    while (i < t.size()) {
        char32_t cp = utf8_next(t, i);
        if (is_letter_cp(cp)) has_letter = true;
        else if (!is_ascii_digit(cp)) return false;
    }
    return has_letter && has_digit;
}

// Case-preserving tokenization for extraction. Mentions, hashtags and URLs
// vanish but leave a break; '/' and '-' become separators; other
// punctuation runs split words ("Newtown...can").
inline std::vector<ExtractToken> extract_tokens(std::string_view text) {
    std::vector<ExtractToken> out;
    auto push = [&](std::string s, ExtractToken::Kind k) {
        if (s.empty() && k == ExtractToken::Kind::Word) return;
        ExtractToken t;
        t.text = std::move(s);
        t.kind = k;
        if (k == ExtractToken::Kind::Word)
            t.candidate = starts_upper(t.text) || digit_letter_mix(t.text);
        out.push_back(std::move(t));
    };
    for (const auto& chunk : split_ws(text)) {
        std::string lowered = to_lower(chunk);
        if (is_url_token(lowered)) {
            push("", ExtractToken::Kind::Break);
            out.back().text = "<url>";
            continue;
        }
        if (chunk.size() > 1 && (chunk[0] == '@' || chunk[0] == '#')) {
            push(std::string(1, chunk[0]), ExtractToken::Kind::Break);
            continue;
        }
        std::vector<char32_t> cps = utf8_decode(chunk);
        std::string word;
        auto flush_word = [&]() {
            if (!word.empty()) {
                // a hyphenated all-letter pair splits into two words; route
                // designations with digits (I-95) stay whole
                bool has_digit = false;
                for (char c : word)
                    if (c >= '0' && c <= '9') has_digit = true;
                if (!has_digit && word.find('-') != std::string::npos) {
                    bool first = true;
                    for (const auto& part : split(word, '-')) {
                        if (!first) push("-", ExtractToken::Kind::Separator);
                        push(part, ExtractToken::Kind::Word);
                        first = false;
                    }
                } else {
                    push(word, ExtractToken::Kind::Word);
                }
                word.clear();
            }
        };
        for (std::size_t i = 0; i < cps.size(); ++i) {
            char32_t cp = cps[i];
            bool internal_join =
                (cp == U'-' || cp == U'.' || cp == U'\'') && i > 0 && i + 1 < cps.size() &&
                !is_punct_cp(cps[i - 1]) && !is_punct_cp(cps[i + 1]);
            if (!is_punct_cp(cp) || internal_join) {
                utf8_append(word, cp);
            } else {
                flush_word();
                std::string p;
                utf8_append(p, cp);
                push(p, cp == U'/' || cp == U'-' ? ExtractToken::Kind::Separator
                                                 : ExtractToken::Kind::Punct);
            }
        }
        flush_word();
    }
    return out;
}

inline bool is_in_set_ci(const std::set<std::string>& set, const std::string& word) {
    return set.count(to_lower(word)) > 0;
}

}  // namespace detail

/// Candidate location spans from one message. Spans come from cue-word
/// windows, windows ending in a street suffix or direction token, and
/// capitalized multi-token runs; single capitalized tokens survive only next
/// to a '/' or '-' separator or right after a cue word. Leading articles are
/// stripped, direction tokens are title-cased, and spans subsumed by a
/// longer span are merged away.
inline std::vector<std::string> extract_locations(const Message& msg, const Gazetteer& gaz) {
    using detail::ExtractToken;
    std::vector<ExtractToken> tokens = detail::extract_tokens(msg.text);
    const auto n = tokens.size();

    auto is_cue = [&](std::size_t i) {
        return tokens[i].kind == ExtractToken::Kind::Word &&
               detail::is_in_set_ci(gaz.cue_words, tokens[i].text);
    };
    auto is_suffix_or_dir = [&](std::size_t i) {
        if (tokens[i].kind != ExtractToken::Kind::Word) return false;
        std::string w = detail::to_lower(tokens[i].text);
        return gaz.suffixes.count(w) > 0 || gaz.directions.count(w) > 0;
    };
    auto is_article = [&](std::size_t i) {
        std::string w = detail::to_lower(tokens[i].text);
        return w == "the" || w == "a" || w == "an";
    };
    auto is_boundary = [&](std::size_t i) {
        return is_cue(i) || detail::is_in_set_ci(gaz.boundary_words, tokens[i].text);
    };

    // spans as [first, last] token ranges
    std::vector<std::pair<std::size_t, std::size_t>> ranges;

    // capitalized (or digit-letter) runs
    std::size_t run_start = 0;
    bool in_run = false;
    auto close_run = [&](std::size_t end) {  // end = one past last
        if (!in_run) return;
        in_run = false;
        std::size_t lo = run_start, hi = end - 1;
        while (lo <= hi && is_article(lo)) ++lo;
        if (lo > hi) return;
        std::size_t len = hi - lo + 1;
        if (len >= 2) {
            ranges.emplace_back(lo, hi);
            return;
        }
        // single token: keep next to a separator or after a cue word
        bool sep_adjacent =
            (lo > 0 && tokens[lo - 1].kind == ExtractToken::Kind::Separator) ||
            (hi + 1 < n && tokens[hi + 1].kind == ExtractToken::Kind::Separator);
        bool after_cue = lo > 0 && is_cue(lo - 1);
        if (sep_adjacent || after_cue) ranges.emplace_back(lo, hi);
    };
    for (std::size_t i = 0; i < n; ++i) {
        bool member = tokens[i].kind == ExtractToken::Kind::Word && tokens[i].candidate &&
                      !is_cue(i);
        if (member && !in_run) {
            in_run = true;
            run_start = i;
        } else if (!member) {
            close_run(i);
        }
    }
    close_run(n);

    // windows of up to 4 tokens following a cue word
    for (std::size_t i = 0; i < n; ++i) {
        if (!is_cue(i)) continue;
        std::size_t lo = i + 1, hi = lo;
        std::size_t count = 0;
        std::size_t last_suffix = std::string::npos;
        while (hi < n && count < 4 && tokens[hi].kind == ExtractToken::Kind::Word &&
               !is_cue(hi)) {
            if (is_suffix_or_dir(hi)) last_suffix = hi;
            ++hi;
            ++count;
        }
        if (hi == lo) continue;
        std::size_t end;
        if (last_suffix != std::string::npos) {
            end = last_suffix;  // cut after the last suffix/direction token
        } else {
            // otherwise keep only the leading candidate run
            end = lo;
            while (end < hi && tokens[end].candidate) ++end;
            if (end == lo) continue;
            --end;
        }
        std::size_t start = lo;
        while (start <= end && is_article(start)) ++start;
        if (start <= end) ranges.emplace_back(start, end);
    }

    // windows ending in a suffix or direction token
    for (std::size_t i = 0; i < n; ++i) {
        if (!is_suffix_or_dir(i) || tokens[i].kind != ExtractToken::Kind::Word) continue;
        bool suffix_lower = !tokens[i].candidate;
        std::size_t start = i;
        while (start > 0) {
            std::size_t p = start - 1;
            if (i - p + 1 > 4) break;
            if (tokens[p].kind != ExtractToken::Kind::Word) break;
            if (is_boundary(p) || is_article(p)) break;
            if (!tokens[p].candidate && !suffix_lower) break;  // caps mode needs caps
            start = p;
        }
        if (start == i && !tokens[i].candidate) continue;  // a bare lowercase suffix word
        while (start < i && is_article(start)) ++start;
        ranges.emplace_back(start, i);
    }

    // materialize, title-casing direction tokens
    struct Span {
        std::vector<std::string> tokens;
        std::size_t pos;
        std::string text;
    };
    std::vector<Span> spans;
    for (const auto& [lo, hi] : ranges) {
        Span s;
        s.pos = lo;
        bool ok = true;
        for (std::size_t i = lo; i <= hi; ++i) {
            if (tokens[i].kind != ExtractToken::Kind::Word) {
                ok = false;
                break;
            }
            std::string w = tokens[i].text;
            if (gaz.directions.count(detail::to_lower(w))) {
                w = detail::to_lower(w);
                w[0] = static_cast<char>(w[0] - 32);
            }
            s.tokens.push_back(std::move(w));
        }
        if (!ok || s.tokens.empty()) continue;
        s.text = detail::join(s.tokens, " ");
        spans.push_back(std::move(s));
    }

    // drop duplicates and spans contained in a longer span
    std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) {
        if (a.tokens.size() != b.tokens.size()) return a.tokens.size() > b.tokens.size();
        return a.pos < b.pos;
    });
    std::vector<Span> kept;
    for (auto& s : spans) {
        bool subsumed = false;
        for (const auto& k : kept) {
            if (k.tokens.size() < s.tokens.size()) continue;
            for (std::size_t off = 0; off + s.tokens.size() <= k.tokens.size(); ++off) {
                bool all = true;
                for (std::size_t t = 0; t < s.tokens.size(); ++t)
                    if (detail::to_lower(k.tokens[off + t]) != detail::to_lower(s.tokens[t])) {
                        all = false;
                        break;
                    }
                if (all) {
                    subsumed = true;
                    break;
                }
            }
            if (subsumed) break;
        }
        if (!subsumed) kept.push_back(std::move(s));
    }
    std::sort(kept.begin(), kept.end(), [](const Span& a, const Span& b) { return a.pos < b.pos; });
    std::vector<std::string> out;
    for (auto& s : kept) out.push_back(std::move(s.text));
    return out;
}

// ---------------------------------------------------------------------------
// Gazetteer matching
// ---------------------------------------------------------------------------

/// Scores each span against the street gazetteer (pruned by first token and
/// a length band implied by the threshold) and keeps matches at or above
/// alpha. When several boroughs carry the same name, a borough shared with
/// another span of the same message wins; otherwise all stay and the
/// candidate is marked ambiguous.
inline std::vector<GeoCandidate> match_streets(const std::vector<std::string>& spans,
                                               const Gazetteer& gaz, double alpha = 80.0) {
    if (gaz.streets.empty()) throw error("match_streets: empty gazetteer");
    if (alpha < 0 || alpha > 100) throw error("match_streets: alpha must be in [0,100]");

    std::vector<GeoCandidate> candidates;
    for (const auto& span : spans) {
        GeoCandidate cand;
        cand.raw_span = span;
        std::string norm = normalize_street(span);
        if (norm.empty()) {
            candidates.push_back(std::move(cand));
            continue;
        }
        const double len = static_cast<double>(detail::utf8_decode(norm).size());
        double lo_len = alpha > 0 ? len * alpha / (200.0 - alpha) : 0.0;
        double hi_len = alpha > 0 ? len * (200.0 - alpha) / alpha
                                  : std::numeric_limits<double>::infinity();

        std::set<std::size_t> pruned;
        auto first = detail::split_ws(norm);
        auto bucket = gaz.by_first_token.find(first.empty() ? std::string() : first[0]);
        if (bucket != gaz.by_first_token.end())
            pruned.insert(bucket->second.begin(), bucket->second.end());
        auto exact = gaz.by_name.find(norm);
        if (exact != gaz.by_name.end()) pruned.insert(exact->second.begin(), exact->second.end());
        // the first-token bucket misses fuzzy matches whose leading token
        // differs; fall back to the length band over the full list
        for (std::size_t i = 0; i < gaz.streets.size(); ++i) {
            double blen = static_cast<double>(gaz.name_lengths[i]);
            if (blen >= lo_len && blen <= hi_len) pruned.insert(i);
        }

        for (std::size_t i : pruned) {
            double score = similarity(norm, gaz.streets[i].name);
            if (score >= alpha) cand.matched.push_back({gaz.streets[i], score});
        }
        std::sort(cand.matched.begin(), cand.matched.end(),
                  [](const StreetMatch& a, const StreetMatch& b) {
                      if (a.score != b.score) return a.score > b.score;
                      if (a.street.name != b.street.name) return a.street.name < b.street.name;
                      return a.street.borough < b.street.borough;
                  });
        candidates.push_back(std::move(cand));
    }

    // borough disambiguation across the message's candidates
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        std::set<std::string> mine;
        for (const auto& m : candidates[i].matched) mine.insert(m.street.borough);
        if (mine.empty()) continue;
        if (mine.size() == 1) {
            candidates[i].borough = *mine.begin();
            continue;
        }
        std::set<std::string> shared;
        for (std::size_t j = 0; j < candidates.size(); ++j) {
            if (j == i) continue;
            for (const auto& m : candidates[j].matched)
                if (mine.count(m.street.borough)) shared.insert(m.street.borough);
        }
        if (!shared.empty()) {
            std::vector<StreetMatch> filtered;
            for (auto& m : candidates[i].matched)
                if (shared.count(m.street.borough)) filtered.push_back(std::move(m));
            candidates[i].matched = std::move(filtered);
            if (shared.size() == 1)
                candidates[i].borough = *shared.begin();
            else
                candidates[i].ambiguous_borough = true;
        } else {
            candidates[i].ambiguous_borough = true;
        }
    }
    return candidates;
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

/// Coordinate source of last resort. street_b is empty for single-street
/// centroid lookups. Implementations must never throw for lookup misses;
/// transport failures land in *transport_error.
class GeocoderClient {
  public:
    virtual ~GeocoderClient() = default;
    virtual std::optional<GeoPoint> lookup(const std::string& street_a,
                                           const std::string& street_b,
                                           const std::string& borough,
                                           std::string* transport_error) = 0;
};

/// Offline client over a centroid table (CSV header name,borough,lat,lon).
class LocalTableClient : public GeocoderClient {
  public:
    LocalTableClient() = default;

    explicit LocalTableClient(const std::filesystem::path& centroids_csv) {
        auto rows = detail::csv_parse(detail::read_file(centroids_csv));
        const std::vector<std::string> header = {"name", "borough", "lat", "lon"};
        if (rows.empty() || rows[0] != header)
            throw error("centroids CSV must start with header name,borough,lat,lon");
        for (std::size_t r = 1; r < rows.size(); ++r) {
            if (rows[r].size() != 4) throw error("bad centroids CSV row " + std::to_string(r + 1));
            double lat = std::stod(rows[r][2]), lon = std::stod(rows[r][3]);
            if (!detail::valid_geo(lat, lon))
                throw error("centroids CSV row " + std::to_string(r + 1) + ": bad coordinate");
            table_[key(normalize_street(rows[r][0]),
                       detail::to_upper_ascii(detail::trim(rows[r][1])))] = GeoPoint{lat, lon};
        }
    }

    std::optional<GeoPoint> lookup(const std::string& street_a, const std::string& street_b,
                                   const std::string& borough, std::string*) override {
        if (!street_b.empty()) return std::nullopt;  // centroids only
        auto it = table_.find(key(street_a, detail::to_upper_ascii(borough)));
        if (it != table_.end()) return it->second;
        // borough-less fallback: unique name match
        std::optional<GeoPoint> hit;
        for (const auto& [k, v] : table_) {
            if (k.substr(0, k.find('|')) == street_a) {
                if (hit) return std::nullopt;  // ambiguous
                hit = v;
            }
        }
        return hit;
    }

  private:
    static std::string key(const std::string& name, const std::string& borough) {
        return name + "|" + borough;
    }
    std::map<std::string, GeoPoint> table_;
};

/// Picks one coordinate for a message. The geo field always wins; otherwise
/// an intersection of two matched streets sharing a borough; otherwise a
/// single-street fallback lookup. Coordinates are never fabricated: every
/// output traces to the geo field, an intersection record, or a fallback
/// response.
inline GeoCandidate resolve(const std::vector<GeoCandidate>& candidates, const Gazetteer& gaz,
                            GeocoderClient* fallback,
                            const std::optional<GeoPoint>& geo_field = std::nullopt) {
    if (geo_field) {
        GeoCandidate out;
        out.method = GeoMethod::GeoField;
        out.resolved = geo_field;
        out.note = "geo field";
        return out;
    }

    // best intersection across candidate pairs, scored by summed similarity
    GeoCandidate best;
    double best_score = -1;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        for (std::size_t j = i + 1; j < candidates.size(); ++j) {
            for (const auto& ma : candidates[i].matched) {
                for (const auto& mb : candidates[j].matched) {
                    if (ma.street.borough != mb.street.borough) continue;
                    if (ma.street.name == mb.street.name) continue;
                    auto point =
                        gaz.find_intersection(ma.street.name, mb.street.name, ma.street.borough);
                    if (!point) continue;
                    double score = ma.score + mb.score;
                    if (score > best_score) {
                        best_score = score;
                        best = GeoCandidate();
                        best.raw_span = candidates[i].raw_span + " / " + candidates[j].raw_span;
                        best.matched = {ma, mb};
                        best.borough = ma.street.borough;
                        best.method = GeoMethod::Intersection;
                        best.resolved = point;
                        best.note = ma.street.name + " & " + mb.street.name;
                    }
                }
            }
        }
    }
    if (best.method == GeoMethod::Intersection) return best;

    // single-street fallback, strongest match first
    std::string transport_error;
    if (fallback) {
        for (const auto& cand : candidates) {
            for (const auto& m : cand.matched) {
                std::string err;
                auto point = fallback->lookup(m.street.name, "", m.street.borough, &err);
                if (!err.empty() && transport_error.empty()) transport_error = err;
                if (point) {
                    GeoCandidate out;
                    out.raw_span = cand.raw_span;
                    out.matched = {m};
                    out.borough = m.street.borough;
                    out.method = GeoMethod::SingleStreetFallback;
                    out.resolved = point;
                    out.note = m.street.name;
                    return out;
                }
            }
        }
    }

    GeoCandidate out;
    out.method = GeoMethod::Unresolved;
    bool any_match = false;
    for (const auto& c : candidates) any_match |= !c.matched.empty();
    if (!transport_error.empty())
        out.note = "fallback transport error: " + transport_error;
    else if (!any_match)
        out.note = candidates.empty() ? "no location spans" : "no gazetteer match";
    else
        out.note = "no intersection record or fallback hit";
    return out;
}

struct GeoResolution {
    std::vector<GeoCandidate> candidates;
    GeoCandidate primary;  // method == Unresolved when nothing resolved
};

inline GeoResolution geocode_message(const Message& msg, const Gazetteer& gaz,
                                     GeocoderClient* fallback, double alpha = 80.0,
                                     bool use_geo_field = true) {
    GeoResolution res;
    res.candidates = match_streets(extract_locations(msg, gaz), gaz, alpha);
    res.primary = resolve(res.candidates, gaz, fallback,
                          use_geo_field ? msg.geo : std::optional<GeoPoint>());
    return res;
}

// ---------------------------------------------------------------------------
// Distance and validation
// ---------------------------------------------------------------------------

inline constexpr double kEarthRadiusMiles = 3958.7613;

inline double haversine_miles(const GeoPoint& p1, const GeoPoint& p2) {
    if (!detail::valid_geo(p1.lat, p1.lon) || !detail::valid_geo(p2.lat, p2.lon))
        throw error("haversine_miles: invalid coordinates");
    const double deg = std::acos(-1.0) / 180.0;
    double dlat = (p2.lat - p1.lat) * deg;
    double dlon = (p2.lon - p1.lon) * deg;
    double a = std::sin(dlat / 2) * std::sin(dlat / 2) +
               std::cos(p1.lat * deg) * std::cos(p2.lat * deg) * std::sin(dlon / 2) *
                   std::sin(dlon / 2);
    return 2.0 * kEarthRadiusMiles * std::asin(std::min(1.0, std::sqrt(a)));
}

struct DistanceReport {
    std::size_t evaluated = 0;
    std::size_t unresolved = 0;
    double mean = 0;
    double stddev = 0;
    double p25 = 0, p50 = 0, p75 = 0;
    std::vector<double> distances;
};

/// Text-derived coordinates of geo-tagged messages versus their geo fields.
inline DistanceReport validate_geocoder(const std::vector<Message>& messages,
                                        const Gazetteer& gaz, GeocoderClient* fallback,
                                        double alpha = 80.0) {
    DistanceReport report;
    for (const auto& msg : messages) {
        if (!msg.geo) continue;
        GeoResolution res = geocode_message(msg, gaz, fallback, alpha, /*use_geo_field=*/false);
        if (res.primary.method == GeoMethod::Unresolved) {
            ++report.unresolved;
            continue;
        }
        report.distances.push_back(haversine_miles(*res.primary.resolved, *msg.geo));
    }
    report.evaluated = report.distances.size();
    if (report.distances.empty())
        throw error("validate_geocoder: no resolvable geo-tagged messages");
    report.mean = detail::mean(report.distances);
    report.stddev = detail::stddev(report.distances);
    report.p25 = detail::percentile(report.distances, 25);
    report.p50 = detail::percentile(report.distances, 50);
    report.p75 = detail::percentile(report.distances, 75);
    return report;
}

// ---------------------------------------------------------------------------
// Density grid
// ---------------------------------------------------------------------------

struct GridCell {
    long long ix = 0, iy = 0;
    std::map<std::string, long long> class_counts;
    long long total = 0;
};

struct DensityGrid {
    double cell_feet = 0;
    double lat0 = 0, lon0 = 0;  // projection origin (bounding-box corner)
    std::vector<GridCell> cells;
    long long total = 0;
};

/// Buckets resolved points into square cells of a local equirectangular
/// projection anchored at the bounding-box corner.
inline DensityGrid density_grid(const std::vector<std::pair<GeoPoint, std::string>>& points,
                                double cell_feet) {
    if (cell_feet <= 0) throw error("density_grid: cell size must be positive");
    DensityGrid grid;
    grid.cell_feet = cell_feet;
    if (points.empty()) return grid;

    double lat0 = points[0].first.lat, lon0 = points[0].first.lon;
    for (const auto& [p, cls] : points) {
        lat0 = std::min(lat0, p.lat);
        lon0 = std::min(lon0, p.lon);
    }
    grid.lat0 = lat0;
    grid.lon0 = lon0;

    const double deg = std::acos(-1.0) / 180.0;
    const double radius_feet = kEarthRadiusMiles * 5280.0;
    const double feet_per_deg_lat = radius_feet * deg;
    const double feet_per_deg_lon = radius_feet * deg * std::cos(lat0 * deg);

    std::map<std::pair<long long, long long>, GridCell> cells;
    for (const auto& [p, cls] : points) {
        double x = (p.lon - lon0) * feet_per_deg_lon;
        double y = (p.lat - lat0) * feet_per_deg_lat;
        long long ix = static_cast<long long>(std::floor(x / cell_feet));
        long long iy = static_cast<long long>(std::floor(y / cell_feet));
        GridCell& cell = cells[{iy, ix}];
        cell.ix = ix;
        cell.iy = iy;
        ++cell.class_counts[cls];
        ++cell.total;
        ++grid.total;
    }
    for (auto& [k, cell] : cells) grid.cells.push_back(std::move(cell));
    return grid;
}

/// RFC 7946 FeatureCollection of cell polygons with per-class counts.
inline nlohmann::json density_grid_geojson(const DensityGrid& grid) {
    nlohmann::json features = nlohmann::json::array();
    const double deg = std::acos(-1.0) / 180.0;
    const double radius_feet = kEarthRadiusMiles * 5280.0;
    const double feet_per_deg_lat = radius_feet * deg;
    const double feet_per_deg_lon = radius_feet * deg * std::cos(grid.lat0 * deg);

    for (const auto& cell : grid.cells) {
        auto corner = [&](long long ix, long long iy) {
            double lon = grid.lon0 + (static_cast<double>(ix) * grid.cell_feet) / feet_per_deg_lon;
            double lat = grid.lat0 + (static_cast<double>(iy) * grid.cell_feet) / feet_per_deg_lat;
            return nlohmann::json::array({lon, lat});
        };
        nlohmann::json ring = nlohmann::json::array(
            {corner(cell.ix, cell.iy), corner(cell.ix + 1, cell.iy),
             corner(cell.ix + 1, cell.iy + 1), corner(cell.ix, cell.iy + 1),
             corner(cell.ix, cell.iy)});
        nlohmann::json props;
        props["cell_x"] = cell.ix;
        props["cell_y"] = cell.iy;
        props["total"] = cell.total;
        props["counts"] = cell.class_counts;
        features.push_back({{"type", "Feature"},
                            {"geometry", {{"type", "Polygon"}, {"coordinates", {ring}}}},
                            {"properties", props}});
    }
    return {{"type", "FeatureCollection"}, {"features", features}};
}

}  // namespace roadtext
