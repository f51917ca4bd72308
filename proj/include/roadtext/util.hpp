#pragma once

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace roadtext {

/// Library-wide error type. Data/contract violations throw this; the CLI
/// maps it onto exit codes.
class error : public std::runtime_error {
  public:
    explicit error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline std::string strf(const char* fmt, ...) {
    va_list ap;
    va_start(ap, fmt);
    char buf[512];
    std::vsnprintf(buf, sizeof(buf), fmt, ap);
    va_end(ap);
    return std::string(buf);
}

// Deterministic double -> text. %.17g round-trips IEEE doubles and does not
// depend on locale or compiler shortest-float support.
inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

inline std::string fmt_fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return std::string(buf);
}

// ---------------------------------------------------------------------------
// Deterministic randomness.
//
// std::mt19937_64 is fully specified by the standard, but the distribution
// adaptors are not, so bounded draws and gaussians are generated here.
// ---------------------------------------------------------------------------

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

    std::uint64_t next_u64() {
        // splitmix64: tiny, seedable, passes BigCrush for this use.
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, n) without modulo bias.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw error("Rng::below: empty range");
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    double real01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double gaussian() {
        // polar Box-Muller, no cached spare (keeps draws position-independent)
        for (;;) {
            double u = 2.0 * real01() - 1.0;
            double v = 2.0 * real01() - 1.0;
            double s = u * u + v * v;
            if (s > 0.0 && s < 1.0) return u * std::sqrt(-2.0 * std::log(s) / s);
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[below(i)]);
    }

  private:
    std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// UTF-8 / character classes
// ---------------------------------------------------------------------------

// Decodes one code point starting at i; advances i. Invalid bytes are taken
// as Latin-1 so malformed input never throws.
inline char32_t utf8_next(std::string_view s, std::size_t& i) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    if (c < 0x80) {
        ++i;
        return c;
    }
    int len = (c >= 0xF0) ? 4 : (c >= 0xE0) ? 3 : (c >= 0xC0) ? 2 : 1;
    if (len == 1 || i + len > s.size()) {
        ++i;
        return c;
    }
    char32_t cp = c & (0x7F >> len);
    for (int k = 1; k < len; ++k) {
        unsigned char cc = static_cast<unsigned char>(s[i + k]);
        if ((cc & 0xC0) != 0x80) {
            ++i;
            return c;
        }
        cp = (cp << 6) | (cc & 0x3F);
    }
    i += len;
    return cp;
}

inline std::vector<char32_t> utf8_decode(std::string_view s) {
    std::vector<char32_t> out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) out.push_back(utf8_next(s, i));
    return out;
}

inline void utf8_append(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xC0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        out += static_cast<char>(0xE0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        out += static_cast<char>(0xF0 | (cp >> 18));
        out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    }
}

// Uppercase-letter test over the scripts that show up in short messages
// (Latin, Latin-1/Extended-A, Greek, Cyrillic).
inline bool is_upper_cp(char32_t c) {
    if (c >= U'A' && c <= U'Z') return true;
    if (c >= 0xC0 && c <= 0xDE && c != 0xD7) return true;
    if (c >= 0x100 && c <= 0x137) return (c % 2) == 0;
    if (c >= 0x139 && c <= 0x148) return (c % 2) == 1;
    if (c >= 0x14A && c <= 0x177) return (c % 2) == 0;
    if (c >= 0x391 && c <= 0x3A9 && c != 0x3A2) return true;
    if (c >= 0x400 && c <= 0x42F) return true;
    return false;
}

inline char32_t to_lower_cp(char32_t c) {
    if (c >= U'A' && c <= U'Z') return c + 32;
    if (c >= 0xC0 && c <= 0xDE && c != 0xD7) return c + 32;
    if (c >= 0x391 && c <= 0x3A9 && c != 0x3A2) return c + 32;
    if (c >= 0x400 && c <= 0x40F) return c + 80;
    if (c >= 0x410 && c <= 0x42F) return c + 32;
    return c;
}

inline bool is_ascii_digit(char32_t c) { return c >= U'0' && c <= U'9'; }

inline bool is_letter_cp(char32_t c) {
    if ((c >= U'a' && c <= U'z') || (c >= U'A' && c <= U'Z')) return true;
    if (c >= 0xC0 && c <= 0x24F && c != 0xD7 && c != 0xF7) return true;
    if (c >= 0x370 && c <= 0x4FF) return true;
    return false;
}

// Punctuation / symbol test used by the tokenizer. Anything that is not a
// letter, digit, or whitespace counts; covers ASCII plus the usual smart
// quotes and ellipsis.
inline bool is_punct_cp(char32_t c) {
    if (c <= 0x7F)
        return !(is_ascii_digit(c) || (c >= U'a' && c <= U'z') || (c >= U'A' && c <= U'Z') ||
                 c == U' ' || c == U'\t' || c == U'\n' || c == U'\r');
    if (is_letter_cp(c)) return false;
    if (c == 0xA0 || c == 0x2000 || c == 0x3000) return false;  // spaces
    return c < 0x80 || (c >= 0x2000 && c <= 0x206F) || (c >= 0xA1 && c <= 0xBF) || c == 0xD7 ||
           c == 0xF7 || (c >= 0x2E00 && c <= 0x2E7F) || (c >= 0x3001 && c <= 0x303F);
}

inline bool is_space_cp(char32_t c) {
    return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\v' || c == U'\f' ||
           c == 0xA0 || (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 || c == 0x202F ||
           c == 0x205F || c == 0x3000;
}

// ---------------------------------------------------------------------------
// String helpers
// ---------------------------------------------------------------------------

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (static_cast<unsigned char>(s[b]) <= ' ')) ++b;
    while (e > b && (static_cast<unsigned char>(s[e - 1]) <= ' ')) --e;
    return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
        if (i == s.size() || s[i] == sep) {
            out.emplace_back(s.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

inline std::vector<std::string> split_ws(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    std::size_t i = 0;
    while (i < s.size()) {
        std::size_t before = i;
        char32_t cp = utf8_next(s, i);
        if (is_space_cp(cp)) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else {
            cur.append(s.substr(before, i - before));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

inline std::string to_lower(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) utf8_append(out, to_lower_cp(utf8_next(s, i)));
    return out;
}

inline std::string to_upper_ascii(std::string_view s) {
    std::string out(s);
    for (char& c : out)
        if (c >= 'a' && c <= 'z') c -= 32;
    return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

inline bool starts_with(std::string_view s, std::string_view pre) {
    return s.size() >= pre.size() && s.substr(0, pre.size()) == pre;
}

inline bool contains_ci(std::string_view hay, std::string_view needle) {
    if (needle.empty()) return true;
    auto lower = [](char c) { return (c >= 'A' && c <= 'Z') ? static_cast<char>(c + 32) : c; };
    for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i) {
        bool ok = true;
        for (std::size_t j = 0; j < needle.size(); ++j)
            if (lower(hay[i + j]) != lower(needle[j])) {
                ok = false;
                break;
            }
        if (ok) return true;
    }
    return false;
}

// ---------------------------------------------------------------------------
// CSV (RFC 4180 quoting; embedded separators, quotes and newlines)
// ---------------------------------------------------------------------------

inline std::vector<std::vector<std::string>> csv_parse(std::string_view text, char sep = ',') {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false;
    bool any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            any = true;
        } else if (c == '"' && field.empty()) {
            quoted = true;
            any = true;
        } else if (c == sep) {
            row.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            if (any || !field.empty() || !row.empty()) {
                row.push_back(std::move(field));
                field.clear();
                rows.push_back(std::move(row));
                row.clear();
                any = false;
            }
        } else {
            field += c;
            any = true;
        }
    }
    if (any || !field.empty() || !row.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string csv_escape(std::string_view field, char sep = ',') {
    bool need = field.find_first_of("\"\n\r") != std::string_view::npos ||
                field.find(sep) != std::string_view::npos;
    if (!need) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw error("cannot open file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw error("cannot write file: " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw error("short write: " + path.string());
}

inline std::uint64_t fnv1a64(std::string_view data) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hash_hex(std::string_view data) {
    return strf("%016llx", static_cast<unsigned long long>(fnv1a64(data)));
}

// ---------------------------------------------------------------------------
// Small statistics
// ---------------------------------------------------------------------------

inline double mean(const std::vector<double>& v) {
    if (v.empty()) throw error("mean of empty vector");
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double stddev(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = mean(v);
    double acc = 0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

// Linear-interpolation percentile over a copy of the data; p in [0,100].
inline double percentile(std::vector<double> v, double p) {
    if (v.empty()) throw error("percentile of empty vector");
    std::sort(v.begin(), v.end());
    if (v.size() == 1) return v[0];
    double rank = p / 100.0 * static_cast<double>(v.size() - 1);
    std::size_t lo = static_cast<std::size_t>(std::floor(rank));
    std::size_t hi = std::min(lo + 1, v.size() - 1);
    double frac = rank - static_cast<double>(lo);
    return v[lo] + frac * (v[hi] - v[lo]);
}

// Standard normal CDF.
inline double norm_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace detail
}  // namespace roadtext
