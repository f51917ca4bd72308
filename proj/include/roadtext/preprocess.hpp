#pragma once

#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "roadtext/util.hpp"

namespace roadtext {

/// Slang expansions and stopwords. Keys are lowercase and whitespace-free.
struct LexiconTables {
    std::unordered_map<std::string, std::string> slang;
    std::unordered_set<std::string> stopwords;
};

/// Token sequences for one message: the full tokenized sequence (length N)
/// and the filtered relevant sequence (length M <= N).
struct ProcessedMessage {
    std::vector<std::string> raw_tokens;       // w
    std::vector<std::string> relevant_tokens;  // r
    std::size_t n_raw = 0;                     // N
    std::size_t n_relevant = 0;                // M
};

namespace detail {

inline bool is_url_token(std::string_view t) {
    return starts_with(t, "http://") || starts_with(t, "https://") || starts_with(t, "www.");
}

inline bool is_pure_punct(std::string_view t) {
    if (t.empty()) return true;
    std::size_t i = 0;
    while (i < t.size())
        if (!is_punct_cp(utf8_next(t, i))) return false;
    return true;
}

}  // namespace detail

/// Lowercases and splits on whitespace, peeling leading/trailing punctuation
/// into separate tokens. '#' and '@' markers stay attached to their word;
/// internal hyphens/periods inside alphanumerics (i-95, rte.9) survive.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    for (const std::string& chunk : detail::split_ws(text)) {
        std::string lowered = detail::to_lower(chunk);
        if (detail::is_url_token(lowered)) {  // URLs stay atomic
            tokens.push_back(lowered);
            continue;
        }
        std::vector<char32_t> cps = detail::utf8_decode(lowered);
        std::size_t b = 0, e = cps.size();
        std::vector<char32_t> lead, tail;
        while (b < e && detail::is_punct_cp(cps[b])) {
            // keep a # or @ marker attached when a word follows it
            if ((cps[b] == U'#' || cps[b] == U'@') && b + 1 < e &&
                !detail::is_punct_cp(cps[b + 1]))
                break;
            lead.push_back(cps[b]);
            ++b;
        }
        while (e > b && detail::is_punct_cp(cps[e - 1])) tail.push_back(cps[--e]);
        auto emit1 = [&](char32_t cp) {
            std::string t;
            detail::utf8_append(t, cp);
            tokens.push_back(std::move(t));
        };
        for (char32_t cp : lead) emit1(cp);
        if (e > b) {
            std::string core;
            for (std::size_t i = b; i < e; ++i) detail::utf8_append(core, cps[i]);
            tokens.push_back(std::move(core));
        }
        for (auto it = tail.rbegin(); it != tail.rend(); ++it) emit1(*it);
    }
    return tokens;
}

/// Replaces slang tokens with their expansions; multi-word expansions are
/// re-split into individual tokens.
inline std::vector<std::string> apply_slang(const std::vector<std::string>& tokens,
                                            const LexiconTables& tables) {
    std::vector<std::string> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) {
        auto it = tables.slang.find(t);
        if (it == tables.slang.end()) {
            out.push_back(t);
        } else {
            for (auto& part : detail::split_ws(it->second)) out.push_back(std::move(part));
        }
    }
    return out;
}

/// Final filtering stage. Input tokens (slang already applied) become the
/// raw sequence w; the relevant sequence r drops stopwords and punctuation,
/// rewrites URLs to "URL" and @-mentions to "at_user", and keeps the first
/// occurrence of each token.
inline ProcessedMessage clean(const std::vector<std::string>& tokens,
                              const LexiconTables& tables) {
    ProcessedMessage pm;
    pm.raw_tokens = tokens;
    pm.n_raw = tokens.size();
    std::unordered_set<std::string> seen;
    for (const auto& t : tokens) {
        std::string token = t;
        if (detail::is_url_token(token)) {
            token = "URL";
        } else if (token.size() > 1 && token[0] == '@') {
            token = "at_user";
        } else if (token.size() > 1 && token[0] == '#') {
            token.erase(0, 1);  // keep the tag word, drop the marker
        }
        if (detail::is_pure_punct(token)) continue;
        if (tables.stopwords.count(token)) continue;
        if (!seen.insert(token).second) continue;
        pm.relevant_tokens.push_back(std::move(token));
    }
    pm.n_relevant = pm.relevant_tokens.size();
    return pm;
}

inline ProcessedMessage preprocess_text(std::string_view text, const LexiconTables& tables) {
    return clean(apply_slang(tokenize(text), tables), tables);
}

/// Slang CSV: two columns (slang,expansion), no header required; a first row
/// literally reading slang,expansion is treated as a header.
inline LexiconTables load_lexicons(const std::filesystem::path& slang_csv,
                                   const std::filesystem::path& stopwords_txt) {
    LexiconTables tables;
    if (!slang_csv.empty()) {
        auto rows = detail::csv_parse(detail::read_file(slang_csv));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() < 2) continue;
            std::string key = detail::to_lower(detail::trim(rows[i][0]));
            std::string expansion = detail::trim(rows[i][1]);
            if (i == 0 && key == "slang" && expansion == "expansion") continue;
            if (key.empty() || expansion.empty()) continue;
            tables.slang[key] = expansion;
        }
    }
    if (!stopwords_txt.empty()) {
        for (const auto& line : detail::split(detail::read_file(stopwords_txt), '\n')) {
            std::string w = detail::to_lower(detail::trim(line));
            if (!w.empty() && w[0] != '#') tables.stopwords.insert(w);
        }
    }
    return tables;
}

}  // namespace roadtext
