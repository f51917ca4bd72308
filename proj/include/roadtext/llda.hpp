#pragma once

#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "roadtext/util.hpp"

namespace roadtext {

struct LldaOptions {
    double alpha = -1;         // < 0 means 50/K
    double eta = 0.01;
    int train_iters = 100;
    int infer_iters = 50;
    double converge_tol = 1e-4;  // max per-token assignment change
};

/// Label-constrained topic model. One topic per label; beta rows are
/// smoothed normalized expected token counts.
struct TopicModel {
    int K = 0;
    std::vector<std::string> topics;  // label names, ordered
    std::vector<std::string> vocabulary;
    std::unordered_map<std::string, int> vocab_index;
    Eigen::MatrixXd beta;  // K x V, each row sums to 1
    double alpha = 0;
    double eta = 0;

    std::string vocabulary_hash() const { return detail::hash_hex(detail::join(vocabulary, "\n")); }

    int topic_of(const std::string& label) const {
        for (int k = 0; k < K; ++k)
            if (topics[static_cast<std::size_t>(k)] == label) return k;
        return -1;
    }
};

struct TopicMixture {
    Eigen::VectorXd theta;  // K, non-negative, sums to 1
};

/// Collapsed variational (CVB0) training. Each training document's token
/// responsibilities live only on its observed label set; updates sweep in a
/// fixed order until the assignment change drops below tolerance or the
/// iteration budget runs out.
inline TopicModel llda_train(const std::vector<std::vector<std::string>>& docs,
                             const std::vector<std::vector<std::string>>& doc_labels,
                             const LldaOptions& options = {}) {
    if (docs.size() != doc_labels.size()) throw error("llda_train: docs/labels size mismatch");
    if (docs.empty()) throw error("llda_train: empty corpus");

    TopicModel model;
    std::set<std::string> label_set;
    for (std::size_t d = 0; d < doc_labels.size(); ++d) {
        if (doc_labels[d].empty())
            throw error(detail::strf("llda_train: document %zu has an empty label set", d));
        label_set.insert(doc_labels[d].begin(), doc_labels[d].end());
    }
    model.topics.assign(label_set.begin(), label_set.end());
    model.K = static_cast<int>(model.topics.size());
    model.alpha = options.alpha < 0 ? 50.0 / model.K : options.alpha;
    model.eta = options.eta;

    std::set<std::string> vocab_set;
    for (const auto& doc : docs) vocab_set.insert(doc.begin(), doc.end());
    if (vocab_set.empty()) throw error("llda_train: empty vocabulary");
    model.vocabulary.assign(vocab_set.begin(), vocab_set.end());
    for (std::size_t v = 0; v < model.vocabulary.size(); ++v)
        model.vocab_index[model.vocabulary[v]] = static_cast<int>(v);

    const int K = model.K;
    const int V = static_cast<int>(model.vocabulary.size());
    const double eta = model.eta;
    const double alpha = model.alpha;

    struct Doc {
        std::vector<int> words;
        std::vector<int> allowed;              // topic ids with l_k = 1
        std::vector<std::vector<double>> resp; // per token, over `allowed`
    };
    std::vector<Doc> corpus(docs.size());
    for (std::size_t d = 0; d < docs.size(); ++d) {
        Doc& doc = corpus[d];
        for (const auto& t : docs[d]) doc.words.push_back(model.vocab_index.at(t));
        std::set<int> allowed;
        for (const auto& l : doc_labels[d]) {
            int k = static_cast<int>(
                std::lower_bound(model.topics.begin(), model.topics.end(), l) -
                model.topics.begin());
            allowed.insert(k);
        }
        doc.allowed.assign(allowed.begin(), allowed.end());
        double u = 1.0 / static_cast<double>(doc.allowed.size());
        doc.resp.assign(doc.words.size(), std::vector<double>(doc.allowed.size(), u));
    }

    Eigen::MatrixXd n_kw = Eigen::MatrixXd::Zero(K, V);
    Eigen::VectorXd n_k = Eigen::VectorXd::Zero(K);
    Eigen::MatrixXd n_dk = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(corpus.size()), K);
    for (std::size_t d = 0; d < corpus.size(); ++d) {
        const Doc& doc = corpus[d];
        for (std::size_t i = 0; i < doc.words.size(); ++i)
            for (std::size_t a = 0; a < doc.allowed.size(); ++a) {
                double g = doc.resp[i][a];
                int k = doc.allowed[a];
                n_kw(k, doc.words[i]) += g;
                n_k(k) += g;
                n_dk(static_cast<Eigen::Index>(d), k) += g;
            }
    }

    std::vector<double> fresh;
    for (int sweep = 0; sweep < options.train_iters; ++sweep) {
        double max_change = 0;
        for (std::size_t d = 0; d < corpus.size(); ++d) {
            Doc& doc = corpus[d];
            if (doc.allowed.size() == 1) {
                // single allowed topic: responsibility is pinned at 1
                continue;
            }
            for (std::size_t i = 0; i < doc.words.size(); ++i) {
                int w = doc.words[i];
                auto& g = doc.resp[i];
                for (std::size_t a = 0; a < doc.allowed.size(); ++a) {
                    int k = doc.allowed[a];
                    n_kw(k, w) -= g[a];
                    n_k(k) -= g[a];
                    n_dk(static_cast<Eigen::Index>(d), k) -= g[a];
                }
                fresh.assign(doc.allowed.size(), 0.0);
                double norm = 0;
                for (std::size_t a = 0; a < doc.allowed.size(); ++a) {
                    int k = doc.allowed[a];
                    double val = (n_dk(static_cast<Eigen::Index>(d), k) + alpha) *
                                 (n_kw(k, w) + eta) / (n_k(k) + V * eta);
                    fresh[a] = val;
                    norm += val;
                }
                for (std::size_t a = 0; a < doc.allowed.size(); ++a) {
                    double nv = fresh[a] / norm;
                    max_change = std::max(max_change, std::abs(nv - g[a]));
                    g[a] = nv;
                    int k = doc.allowed[a];
                    n_kw(k, w) += nv;
                    n_k(k) += nv;
                    n_dk(static_cast<Eigen::Index>(d), k) += nv;
                }
            }
        }
        if (max_change < options.converge_tol) break;
    }

    model.beta.resize(K, V);
    for (int k = 0; k < K; ++k)
        for (int w = 0; w < V; ++w)
            model.beta(k, w) = (n_kw(k, w) + eta) / (n_k(k) + V * eta);
    return model;
}

/// Test-time mixture estimate: CVB0 over all K topics with beta frozen.
/// Unseen tokens are skipped; an empty document comes back uniform.
inline TopicMixture llda_infer(const TopicModel& model, const std::vector<std::string>& tokens,
                               const LldaOptions& options = {}) {
    const int K = model.K;
    if (K == 0) throw error("llda_infer: untrained model");
    std::vector<int> words;
    for (const auto& t : tokens) {
        auto it = model.vocab_index.find(t);
        if (it != model.vocab_index.end()) words.push_back(it->second);
    }
    TopicMixture mix;
    const double alpha = model.alpha;
    if (words.empty()) {
        mix.theta = Eigen::VectorXd::Constant(K, 1.0 / K);
        return mix;
    }

    std::vector<std::vector<double>> resp(words.size(),
                                          std::vector<double>(static_cast<std::size_t>(K),
                                                              1.0 / K));
    Eigen::VectorXd n_k = Eigen::VectorXd::Zero(K);
    for (const auto& g : resp)
        for (int k = 0; k < K; ++k) n_k(k) += g[static_cast<std::size_t>(k)];

    std::vector<double> fresh(static_cast<std::size_t>(K));
    for (int sweep = 0; sweep < options.infer_iters; ++sweep) {
        double max_change = 0;
        for (std::size_t i = 0; i < words.size(); ++i) {
            auto& g = resp[i];
            for (int k = 0; k < K; ++k) n_k(k) -= g[static_cast<std::size_t>(k)];
            double norm = 0;
            for (int k = 0; k < K; ++k) {
                double val = (n_k(k) + alpha) * model.beta(k, words[i]);
                fresh[static_cast<std::size_t>(k)] = val;
                norm += val;
            }
            for (int k = 0; k < K; ++k) {
                double nv = fresh[static_cast<std::size_t>(k)] / norm;
                max_change = std::max(max_change, std::abs(nv - g[static_cast<std::size_t>(k)]));
                g[static_cast<std::size_t>(k)] = nv;
                n_k(k) += nv;
            }
        }
        if (max_change < options.converge_tol) break;
    }

    double denom = static_cast<double>(words.size()) + K * alpha;
    mix.theta.resize(K);
    for (int k = 0; k < K; ++k) mix.theta(k) = (n_k(k) + alpha) / denom;
    return mix;
}

/// argmax over theta; exact ties go to the lowest topic index.
inline std::string llda_classify(const TopicModel& model, const std::vector<std::string>& tokens,
                                 const LldaOptions& options = {}) {
    TopicMixture mix = llda_infer(model, tokens, options);
    int best = 0;
    for (int k = 1; k < model.K; ++k)
        if (mix.theta(k) > mix.theta(best)) best = k;
    return model.topics[static_cast<std::size_t>(best)];
}

/// Appends the K mixture values to each base feature row; theta lives in
/// [0,1] already and is not re-scaled.
inline Eigen::MatrixXd hybrid_featurize(const TopicModel& model, const Eigen::MatrixXd& base,
                                        const std::vector<std::vector<std::string>>& docs,
                                        const LldaOptions& options = {}) {
    if (static_cast<std::size_t>(base.rows()) != docs.size())
        throw error("hybrid_featurize: base rows / docs mismatch");
    Eigen::MatrixXd out(base.rows(), base.cols() + model.K);
    out.leftCols(base.cols()) = base;
    for (std::size_t d = 0; d < docs.size(); ++d) {
        TopicMixture mix = llda_infer(model, docs[d], options);
        out.row(static_cast<Eigen::Index>(d)).tail(model.K) = mix.theta.transpose();
    }
    return out;
}

/// Highest-probability words per topic, for reports.
inline std::vector<std::vector<std::string>> top_words(const TopicModel& model, int count) {
    std::vector<std::vector<std::string>> out;
    for (int k = 0; k < model.K; ++k) {
        std::vector<int> order(model.vocabulary.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (model.beta(k, a) != model.beta(k, b)) return model.beta(k, a) > model.beta(k, b);
            return a < b;
        });
        std::vector<std::string> words;
        for (int i = 0; i < count && i < static_cast<int>(order.size()); ++i)
            words.push_back(model.vocabulary[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
        out.push_back(std::move(words));
    }
    return out;
}

inline void llda_save(const TopicModel& model, const std::filesystem::path& dir,
                      const std::string& stem) {
    nlohmann::json header;
    header["topics"] = model.topics;
    header["alpha"] = model.alpha;
    header["eta"] = model.eta;
    header["vocabulary_hash"] = model.vocabulary_hash();
    detail::write_file(dir / (stem + ".json"), header.dump(2) + "\n");
    detail::write_file(dir / (stem + "_vocabulary.txt"), detail::join(model.vocabulary, "\n") + "\n");
    std::string beta;
    for (int k = 0; k < model.K; ++k) {
        for (int v = 0; v < static_cast<int>(model.vocabulary.size()); ++v) {
            if (v) beta += ',';
            beta += detail::fmt_g17(model.beta(k, v));
        }
        beta += '\n';
    }
    detail::write_file(dir / (stem + "_beta.csv"), beta);
}

inline TopicModel llda_load(const std::filesystem::path& dir, const std::string& stem) {
    TopicModel model;
    auto header = nlohmann::json::parse(detail::read_file(dir / (stem + ".json")));
    model.topics = header.at("topics").get<std::vector<std::string>>();
    model.K = static_cast<int>(model.topics.size());
    model.alpha = header.at("alpha").get<double>();
    model.eta = header.at("eta").get<double>();
    for (const auto& line : detail::split(detail::read_file(dir / (stem + "_vocabulary.txt")), '\n'))
        if (!line.empty()) model.vocabulary.push_back(line);
    for (std::size_t v = 0; v < model.vocabulary.size(); ++v)
        model.vocab_index[model.vocabulary[v]] = static_cast<int>(v);
    auto rows = detail::csv_parse(detail::read_file(dir / (stem + "_beta.csv")));
    if (static_cast<int>(rows.size()) != model.K) throw error("llda_load: beta row mismatch");
    model.beta.resize(model.K, static_cast<Eigen::Index>(model.vocabulary.size()));
    for (int k = 0; k < model.K; ++k) {
        if (rows[static_cast<std::size_t>(k)].size() != model.vocabulary.size())
            throw error("llda_load: beta column mismatch");
        for (std::size_t v = 0; v < model.vocabulary.size(); ++v)
            model.beta(k, static_cast<Eigen::Index>(v)) =
                std::stod(rows[static_cast<std::size_t>(k)][v]);
    }
    return model;
}

}  // namespace roadtext
