#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "roadtext/preprocess.hpp"
#include "roadtext/util.hpp"

namespace roadtext {

using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Token -> polarity strength; absent tokens score 0.
struct SentimentLexicon {
    std::unordered_map<std::string, double> polarity;

    double score(const std::string& token) const {
        auto it = polarity.find(token);
        return it == polarity.end() ? 0.0 : it->second;
    }
};

inline SentimentLexicon load_sentiment_lexicon(const std::filesystem::path& csv) {
    SentimentLexicon lex;
    auto rows = detail::csv_parse(detail::read_file(csv));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() < 2) continue;
        std::string token = detail::to_lower(detail::trim(rows[i][0]));
        std::string value = detail::trim(rows[i][1]);
        if (i == 0 && token == "token") continue;
        if (token.empty() || value.empty()) continue;
        try {
            lex.polarity[token] = std::stod(value);
        } catch (const std::exception&) {
            throw error("bad polarity value '" + value + "' in " + csv.string());
        }
    }
    return lex;
}

/// Membership list for the frequent-token-presence score. When derived, it
/// must come from training data only.
struct FrequentTokenList {
    std::unordered_set<std::string> tokens;
    enum class Source { File, TopKFromTraining } source = Source::File;
};

inline FrequentTokenList load_frequent_tokens(const std::filesystem::path& txt) {
    FrequentTokenList list;
    for (const auto& line : detail::split(detail::read_file(txt), '\n')) {
        std::string w = detail::to_lower(detail::trim(line));
        if (!w.empty()) list.tokens.insert(w);
    }
    return list;
}

/// Top-k most frequent relevant tokens of a training corpus; ties resolve
/// lexicographically so the list is reproducible.
inline FrequentTokenList top_k_tokens(const std::vector<ProcessedMessage>& training, std::size_t k) {
    std::map<std::string, std::size_t> counts;
    for (const auto& pm : training)
        for (const auto& t : pm.relevant_tokens) ++counts[t];
    std::vector<std::pair<std::string, std::size_t>> items(counts.begin(), counts.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    FrequentTokenList list;
    list.source = FrequentTokenList::Source::TopKFromTraining;
    for (std::size_t i = 0; i < items.size() && i < k; ++i) list.tokens.insert(items[i].first);
    return list;
}

/// Polarity of a message: sum of lexicon scores over the relevant tokens,
/// divided by the raw token count N. Zero for an empty message.
inline double sentiment(const ProcessedMessage& msg, const SentimentLexicon& lex) {
    if (msg.n_raw == 0) return 0.0;
    double sum = 0.0;
    for (const auto& t : msg.relevant_tokens) sum += lex.score(t);
    return sum / static_cast<double>(msg.n_raw);
}

/// Fraction of the raw token count covered by relevant tokens on the list.
inline double ftp_score(const ProcessedMessage& msg, const FrequentTokenList& list) {
    if (msg.n_raw == 0) return 0.0;
    std::size_t hits = 0;
    for (const auto& t : msg.relevant_tokens)
        if (list.tokens.count(t)) ++hits;
    return static_cast<double>(hits) / static_cast<double>(msg.n_raw);
}

struct SyntacticCounts {
    double hashtags = 0;
    double questions = 0;
    double exclamations = 0;
    double capitals = 0;
    double length = 0;  // characters (code points) of the raw text
};

/// Counts computed on the raw, unprocessed text.
inline SyntacticCounts syntactic(std::string_view raw_text) {
    SyntacticCounts c;
    std::size_t i = 0;
    while (i < raw_text.size()) {
        char32_t cp = detail::utf8_next(raw_text, i);
        c.length += 1;
        if (cp == U'#') c.hashtags += 1;
        else if (cp == U'?') c.questions += 1;
        else if (cp == U'!') c.exclamations += 1;
        else if (detail::is_upper_cp(cp)) c.capitals += 1;
    }
    return c;
}

// ---------------------------------------------------------------------------
// tf-idf
// ---------------------------------------------------------------------------

/// Vocabulary and idf table fitted on a training corpus. Transforming other
/// documents ignores tokens outside the training vocabulary.
struct TfidfModel {
    std::vector<std::string> vocabulary;           // ordered
    std::unordered_map<std::string, int> index;    // token -> column
    std::vector<double> idf;                       // per column
    std::size_t corpus_size = 0;                   // |D|

    std::string vocabulary_hash() const {
        return detail::hash_hex(detail::join(vocabulary, "\n"));
    }
};

/// idf(r) = ln(|D| / (1 + df(r))). Tokens present in nearly every document
/// get a negative weight, which is kept as-is.
inline TfidfModel tfidf_fit(const std::vector<ProcessedMessage>& training) {
    if (training.empty()) throw error("tfidf_fit: empty corpus");
    TfidfModel model;
    model.corpus_size = training.size();
    std::map<std::string, std::size_t> df;  // r is deduplicated, so counting tokens counts docs
    for (const auto& pm : training)
        for (const auto& t : pm.relevant_tokens) ++df[t];
    model.vocabulary.reserve(df.size());
    model.idf.reserve(df.size());
    for (const auto& [token, count] : df) {
        model.index[token] = static_cast<int>(model.vocabulary.size());
        model.vocabulary.push_back(token);
        model.idf.push_back(std::log(static_cast<double>(model.corpus_size) /
                                     (1.0 + static_cast<double>(count))));
    }
    return model;
}

/// Rows of tf(r,d) * idf(r). tf is the count of the token in the relevant
/// sequence, which is 0 or 1 after deduplication, so the block acts as a
/// weighted presence indicator.
inline SparseRowMatrix tfidf_transform(const TfidfModel& model,
                                       const std::vector<ProcessedMessage>& docs) {
    std::vector<Eigen::Triplet<double>> triplets;
    for (std::size_t d = 0; d < docs.size(); ++d) {
        for (const auto& t : docs[d].relevant_tokens) {
            auto it = model.index.find(t);
            if (it == model.index.end()) continue;
            triplets.emplace_back(static_cast<int>(d), it->second, model.idf[it->second]);
        }
    }
    SparseRowMatrix m(static_cast<int>(docs.size()), static_cast<int>(model.vocabulary.size()));
    m.setFromTriplets(triplets.begin(), triplets.end());
    return m;
}

// ---------------------------------------------------------------------------
// Column scaling: standardize, then min-max to [0,1]; fit on training only
// ---------------------------------------------------------------------------

struct ColumnScaling {
    double mean = 0, std = 1, zmin = 0, zmax = 0;
};

struct Scaling {
    std::vector<ColumnScaling> columns;
};

inline Scaling fit_scaling(const Eigen::MatrixXd& train) {
    if (train.rows() == 0) throw error("fit_scaling: empty matrix");
    Scaling s;
    s.columns.resize(static_cast<std::size_t>(train.cols()));
    double n = static_cast<double>(train.rows());
    for (Eigen::Index j = 0; j < train.cols(); ++j) {
        ColumnScaling& c = s.columns[static_cast<std::size_t>(j)];
        c.mean = train.col(j).mean();
        double var = (train.col(j).array() - c.mean).square().sum() / n;
        c.std = var > 0 ? std::sqrt(var) : 1.0;  // constant column keeps z = 0
        double zmin = std::numeric_limits<double>::infinity();
        double zmax = -std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < train.rows(); ++i) {
            double z = (train(i, j) - c.mean) / c.std;
            zmin = std::min(zmin, z);
            zmax = std::max(zmax, z);
        }
        c.zmin = zmin;
        c.zmax = zmax;
    }
    return s;
}

/// Standardizes with training statistics, rescales to [0,1] with the
/// training z-range, and clips; constant training columns map to 0.
inline Eigen::MatrixXd apply_scaling(const Eigen::MatrixXd& m, const Scaling& s) {
    if (static_cast<std::size_t>(m.cols()) != s.columns.size())
        throw error("apply_scaling: column count mismatch");
    Eigen::MatrixXd out(m.rows(), m.cols());
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const ColumnScaling& c = s.columns[static_cast<std::size_t>(j)];
        double range = c.zmax - c.zmin;
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            double z = (m(i, j) - c.mean) / c.std;
            double v = range > 0 ? (z - c.zmin) / range : 0.0;
            out(i, j) = std::clamp(v, 0.0, 1.0);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Assembled design matrix
// ---------------------------------------------------------------------------

/// Dense numeric block plus sparse tf-idf block with its vocabulary and the
/// scaling fitted for the dense columns.
struct FeatureMatrix {
    Eigen::MatrixXd dense;
    std::vector<std::string> dense_names;
    SparseRowMatrix tfidf;
    std::vector<std::string> vocabulary;
    Scaling scaling;
};

/// Raw (unscaled) dense block: sentiment, length, hashtags, exclamations,
/// questions, capitals, and an FTP column when a list is supplied.
inline Eigen::MatrixXd dense_features(const std::vector<std::string>& raw_texts,
                                      const std::vector<ProcessedMessage>& processed,
                                      const SentimentLexicon& lex,
                                      const FrequentTokenList* ftp_list,
                                      std::vector<std::string>* names_out = nullptr) {
    if (raw_texts.size() != processed.size())
        throw error("dense_features: texts/processed size mismatch");
    std::vector<std::string> names = {"sentiment", "length",   "hashtags",
                                      "exclamations", "questions", "capitals"};
    if (ftp_list) names.push_back("ftp");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(raw_texts.size()),
                      static_cast<Eigen::Index>(names.size()));
    for (std::size_t i = 0; i < raw_texts.size(); ++i) {
        SyntacticCounts c = syntactic(raw_texts[i]);
        Eigen::Index r = static_cast<Eigen::Index>(i);
        m(r, 0) = sentiment(processed[i], lex);
        m(r, 1) = c.length;
        m(r, 2) = c.hashtags;
        m(r, 3) = c.exclamations;
        m(r, 4) = c.questions;
        m(r, 5) = c.capitals;
        if (ftp_list) m(r, 6) = ftp_score(processed[i], *ftp_list);
    }
    if (names_out) *names_out = std::move(names);
    return m;
}

inline std::string dense_to_csv(const Eigen::MatrixXd& m, const std::vector<std::string>& names) {
    std::string out = detail::join(names, ",");
    out += '\n';
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (j) out += ',';
            out += detail::fmt_g17(m(i, j));
        }
        out += '\n';
    }
    return out;
}

/// Sparse block as triplets (row, column, value) for inspection.
inline std::string sparse_to_csv(const SparseRowMatrix& m) {
    std::string out = "row,col,value\n";
    for (int k = 0; k < m.outerSize(); ++k)
        for (SparseRowMatrix::InnerIterator it(m, k); it; ++it)
            out += detail::strf("%d,%d,%s\n", static_cast<int>(it.row()),
                                static_cast<int>(it.col()),
                                detail::fmt_g17(it.value()).c_str());
    return out;
}

}  // namespace roadtext
