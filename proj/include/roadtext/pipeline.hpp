#pragma once

#include <atomic>
#include <chrono>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roadtext/corpus.hpp"
#include "roadtext/eval.hpp"
#include "roadtext/features.hpp"
#include "roadtext/geocode.hpp"
#include "roadtext/lasso.hpp"
#include "roadtext/llda.hpp"
#include "roadtext/pool.hpp"
#include "roadtext/preprocess.hpp"
#include "roadtext/svm.hpp"
#include "roadtext/tsvd.hpp"

namespace roadtext {

inline constexpr const char* kVersion = "0.1.0";

/// Raised when a pipeline stage fails; the CLI maps it to exit code 3.
class stage_error : public error {
  public:
    stage_error(std::string stage, const std::string& what)
        : error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

  private:
    std::string stage_;
};

// ---------------------------------------------------------------------------
// Label-access audit scaffolding. Tests install LabelAudit::on_read and use
// these globals to assert that no stage reads a test label before an
// evaluation scope is open.
// ---------------------------------------------------------------------------

namespace audit {

namespace detail_ {
inline std::mutex& mutex() {
    static std::mutex m;
    return m;
}
inline std::set<std::string>& ids() {
    static std::set<std::string> s;
    return s;
}
}  // namespace detail_

inline void add_test_id(const std::string& id) {
    std::lock_guard<std::mutex> lock(detail_::mutex());
    detail_::ids().insert(id);
}

inline bool is_test_id(const std::string& id) {
    std::lock_guard<std::mutex> lock(detail_::mutex());
    return detail_::ids().count(id) > 0;
}

inline std::atomic<int>& eval_depth() {
    static std::atomic<int> depth{0};
    return depth;
}

struct EvalScope {
    EvalScope() { ++eval_depth(); }
    ~EvalScope() { --eval_depth(); }
};

inline void reset() {
    std::lock_guard<std::mutex> lock(detail_::mutex());
    detail_::ids().clear();
    eval_depth() = 0;
}

}  // namespace audit

// ---------------------------------------------------------------------------
// Run configuration: flat key=value file, CLI flags override
// ---------------------------------------------------------------------------

struct RunConfig {
    // inputs
    std::filesystem::path corpus_path;
    CorpusFormat corpus_format = CorpusFormat::Jsonl;
    std::filesystem::path slang_path, stopwords_path, sentiment_path, frequent_tokens_path;
    std::filesystem::path streets_path, intersections_path, centroids_path;
    std::filesystem::path out_dir = "out";
    std::string run_id;  // defaults to run-<seed>

    std::uint64_t seed = 1;
    int replicates = 30;
    double train_fraction = 0.8;
    double alpha = 80.0;  // geocode similarity threshold
    int svd_rank = 400;
    std::size_t workers = 1;
    bool undersample_tier1 = false;
    int ftp_top_k = 100;  // 0 disables the FTP column

    bool use_grid = true;
    GridSpec grid;
    int grid_folds = 5;
    SvmParams svm;  // used directly when use_grid is false

    bool lasso_enabled = true;
    double lasso_lambda = -1;  // < 0 selects by cross-validation

    LldaOptions llda;
    double density_cell_feet = 100.0;
    std::vector<GroupRule> user_groups = {{"511", "511"}, {"totaltraffic", "TotalTraffic"}};

    std::string effective_run_id() const {
        return run_id.empty() ? "run-" + std::to_string(seed) : run_id;
    }
    std::filesystem::path run_dir() const { return out_dir / effective_run_id(); }

    void validate() const {
        if (replicates < 1) throw error("config: replicates must be >= 1");
        if (workers < 1) throw error("config: workers must be >= 1");
        if (!(train_fraction > 0 && train_fraction < 1))
            throw error("config: train_fraction must be in (0,1)");
        if (alpha < 0 || alpha > 100) throw error("config: alpha must be in [0,100]");
        if (svd_rank < 0) throw error("config: svd_rank must be >= 0");
        for (const auto& p :
             {corpus_path, slang_path, stopwords_path, sentiment_path, frequent_tokens_path,
              streets_path, intersections_path, centroids_path})
            if (!p.empty() && !std::filesystem::exists(p))
                throw error("config: path does not exist: " + p.string());
    }
};

namespace detail {

inline std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    for (const auto& part : split(s, ','))
        if (!trim(part).empty()) out.push_back(std::stod(trim(part)));
    return out;
}

inline bool parse_bool(const std::string& s) {
    std::string v = to_lower(trim(s));
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw error("config: bad boolean value '" + s + "'");
}

}  // namespace detail

/// Applies one key=value setting; unknown keys are an error so typos die
/// loudly.
inline void config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
    const std::string v = detail::trim(value);
    if (key == "corpus") cfg.corpus_path = v;
    else if (key == "format") {
        if (v == "jsonl") cfg.corpus_format = CorpusFormat::Jsonl;
        else if (v == "csv") cfg.corpus_format = CorpusFormat::Csv;
        else throw error("config: format must be jsonl or csv");
    } else if (key == "slang") cfg.slang_path = v;
    else if (key == "stopwords") cfg.stopwords_path = v;
    else if (key == "sentiment") cfg.sentiment_path = v;
    else if (key == "frequent_tokens") cfg.frequent_tokens_path = v;
    else if (key == "streets") cfg.streets_path = v;
    else if (key == "intersections") cfg.intersections_path = v;
    else if (key == "centroids") cfg.centroids_path = v;
    else if (key == "out") cfg.out_dir = v;
    else if (key == "run_id") cfg.run_id = v;
    else if (key == "seed") cfg.seed = std::stoull(v);
    else if (key == "replicates") cfg.replicates = std::stoi(v);
    else if (key == "train_fraction") cfg.train_fraction = std::stod(v);
    else if (key == "alpha") cfg.alpha = std::stod(v);
    else if (key == "svd_rank") cfg.svd_rank = std::stoi(v);
    else if (key == "workers") cfg.workers = static_cast<std::size_t>(std::stoul(v));
    else if (key == "undersample") cfg.undersample_tier1 = detail::parse_bool(v);
    else if (key == "ftp_top_k") cfg.ftp_top_k = std::stoi(v);
    else if (key == "use_grid") cfg.use_grid = detail::parse_bool(v);
    else if (key == "grid.folds") cfg.grid_folds = std::stoi(v);
    else if (key == "grid.kernels") {
        cfg.grid.kernels.clear();
        for (const auto& part : detail::split(v, ',')) {
            auto k = parse_kernel(detail::trim(part));
            if (!k) throw error("config: unknown kernel '" + part + "'");
            cfg.grid.kernels.push_back(*k);
        }
    } else if (key == "grid.c") cfg.grid.C_values = detail::parse_double_list(v);
    else if (key == "grid.gamma") cfg.grid.gamma_values = detail::parse_double_list(v);
    else if (key == "grid.degree") cfg.grid.degree = std::stoi(v);
    else if (key == "svm.kernel") {
        auto k = parse_kernel(v);
        if (!k) throw error("config: unknown kernel '" + v + "'");
        cfg.svm.kernel = *k;
    } else if (key == "svm.c") cfg.svm.C = std::stod(v);
    else if (key == "svm.gamma") cfg.svm.gamma = std::stod(v);
    else if (key == "svm.degree") cfg.svm.degree = std::stoi(v);
    else if (key == "lasso.enabled") cfg.lasso_enabled = detail::parse_bool(v);
    else if (key == "lasso.lambda") cfg.lasso_lambda = std::stod(v);
    else if (key == "llda.alpha") cfg.llda.alpha = std::stod(v);
    else if (key == "llda.eta") cfg.llda.eta = std::stod(v);
    else if (key == "llda.train_iters") cfg.llda.train_iters = std::stoi(v);
    else if (key == "llda.infer_iters") cfg.llda.infer_iters = std::stoi(v);
    else if (key == "density_cell_feet") cfg.density_cell_feet = std::stod(v);
    else if (key == "groups") {
        cfg.user_groups.clear();
        for (const auto& part : detail::split(v, ',')) {
            auto bits = detail::split(detail::trim(part), ':');
            if (bits.size() != 2) throw error("config: groups entries are pattern:name");
            cfg.user_groups.push_back({bits[0], bits[1]});
        }
    } else {
        throw error("config: unknown key '" + key + "'");
    }
}

inline RunConfig load_config(const std::filesystem::path& path) {
    RunConfig cfg;
    std::size_t lineno = 0;
    for (const auto& raw : detail::split(detail::read_file(path), '\n')) {
        ++lineno;
        std::string line = detail::trim(raw);
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw error(detail::strf("config %s:%zu: expected key=value", path.string().c_str(),
                                     lineno));
        config_set(cfg, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    }
    return cfg;
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["corpus"] = cfg.corpus_path.string();
    j["format"] = cfg.corpus_format == CorpusFormat::Jsonl ? "jsonl" : "csv";
    j["slang"] = cfg.slang_path.string();
    j["stopwords"] = cfg.stopwords_path.string();
    j["sentiment"] = cfg.sentiment_path.string();
    j["frequent_tokens"] = cfg.frequent_tokens_path.string();
    j["streets"] = cfg.streets_path.string();
    j["intersections"] = cfg.intersections_path.string();
    j["centroids"] = cfg.centroids_path.string();
    j["out"] = cfg.out_dir.string();
    j["run_id"] = cfg.effective_run_id();
    j["seed"] = cfg.seed;
    j["replicates"] = cfg.replicates;
    j["train_fraction"] = cfg.train_fraction;
    j["alpha"] = cfg.alpha;
    j["svd_rank"] = cfg.svd_rank;
    j["workers"] = cfg.workers;
    j["undersample"] = cfg.undersample_tier1;
    j["ftp_top_k"] = cfg.ftp_top_k;
    j["use_grid"] = cfg.use_grid;
    j["grid_folds"] = cfg.grid_folds;
    std::vector<std::string> kernels;
    for (auto k : cfg.grid.kernels) kernels.push_back(to_string(k));
    j["grid_kernels"] = kernels;
    j["grid_c"] = cfg.grid.C_values;
    j["grid_gamma"] = cfg.grid.gamma_values;
    j["svm_kernel"] = to_string(cfg.svm.kernel);
    j["svm_c"] = cfg.svm.C;
    j["svm_gamma"] = cfg.svm.gamma;
    j["svm_degree"] = cfg.svm.degree;
    j["lasso_enabled"] = cfg.lasso_enabled;
    j["lasso_lambda"] = cfg.lasso_lambda;
    j["llda_alpha"] = cfg.llda.alpha;
    j["llda_eta"] = cfg.llda.eta;
    j["llda_train_iters"] = cfg.llda.train_iters;
    j["llda_infer_iters"] = cfg.llda.infer_iters;
    j["density_cell_feet"] = cfg.density_cell_feet;
    j["version"] = kVersion;
    return j;
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

/// Records per-stage outputs with content hashes and timings. Timings are
/// the one intentionally non-reproducible field; everything else re-hashes.
class RunManifest {
  public:
    explicit RunManifest(const RunConfig& cfg) : cfg_(config_to_json(cfg)) {}

    void start_stage(const std::string& name) {
        stages_.push_back({name, {}, {}, 0, "running"});
        stage_start_ = std::chrono::steady_clock::now();
    }

    void record_output(const std::filesystem::path& run_dir, const std::filesystem::path& file) {
        auto rel = std::filesystem::relative(file, run_dir).string();
        stages_.back().outputs.emplace_back(rel, detail::hash_hex(detail::read_file(file)));
    }

    void finish_stage() {
        auto& s = stages_.back();
        s.millis = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::steady_clock::now() - stage_start_)
                       .count();
        s.status = "ok";
    }

    void fail_stage(const std::string& what) {
        if (stages_.empty()) start_stage("unknown");
        auto& s = stages_.back();
        s.millis = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::steady_clock::now() - stage_start_)
                       .count();
        s.status = "failed: " + what;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["config"] = cfg_;
        j["version"] = kVersion;
        nlohmann::json stages = nlohmann::json::array();
        for (const auto& s : stages_) {
            nlohmann::json e;
            e["stage"] = s.name;
            e["status"] = s.status;
            e["millis"] = s.millis;
            nlohmann::json outs = nlohmann::json::array();
            for (const auto& [path, hash] : s.outputs)
                outs.push_back({{"path", path}, {"hash", hash}});
            e["outputs"] = outs;
            stages.push_back(e);
        }
        j["stages"] = stages;
        return j;
    }

    void write(const std::filesystem::path& run_dir) const {
        detail::write_file(run_dir / "manifest.json", to_json().dump(2) + "\n");
    }

  private:
    struct Stage {
        std::string name;
        std::vector<std::string> inputs;
        std::vector<std::pair<std::string, std::string>> outputs;  // (rel path, hash)
        long long millis = 0;
        std::string status;
    };
    nlohmann::json cfg_;
    std::vector<Stage> stages_;
    std::chrono::steady_clock::time_point stage_start_;
};

// ---------------------------------------------------------------------------
// Feature pipeline fitted on a training corpus
// ---------------------------------------------------------------------------

struct FittedFeatures {
    std::vector<std::string> dense_names;
    FrequentTokenList ftp;
    bool use_ftp = false;
    Scaling dense_scaling;
    std::vector<int> dense_selected;  // after Lasso (or all columns)
    double lasso_lambda = 0;
    TfidfModel tfidf;
    TruncatedBasis basis;
    Scaling svd_scaling;
    int rank = 0;
};

struct PreparedTexts {
    std::vector<std::string> raw;
    std::vector<ProcessedMessage> processed;
    std::vector<std::vector<std::string>> docs;  // relevant tokens
};

inline PreparedTexts prepare_texts(const Corpus& corpus, const LexiconTables& lexicons,
                                   std::size_t workers) {
    PreparedTexts out;
    out.raw.reserve(corpus.size());
    for (const auto& m : corpus.messages) out.raw.push_back(m.text);
    out.processed = parallel_map<ProcessedMessage>(corpus.size(), workers, [&](std::size_t i) {
        return preprocess_text(corpus.messages[i].text, lexicons);
    });
    out.docs.reserve(out.processed.size());
    for (const auto& pm : out.processed) out.docs.push_back(pm.relevant_tokens);
    return out;
}

/// Fits dense scaling, optional Lasso selection (driven by binary targets
/// when given), the tf-idf vocabulary and the truncated SVD basis — all on
/// training rows only.
inline FittedFeatures fit_features(const PreparedTexts& train, const SentimentLexicon& sentiment,
                                   const RunConfig& cfg,
                                   const std::optional<Eigen::VectorXd>& lasso_target,
                                   const std::optional<FrequentTokenList>& ftp_list) {
    FittedFeatures f;
    if (ftp_list) {
        f.ftp = *ftp_list;
        f.use_ftp = true;
    } else if (cfg.ftp_top_k > 0) {
        f.ftp = top_k_tokens(train.processed, static_cast<std::size_t>(cfg.ftp_top_k));
        f.use_ftp = true;
    }

    Eigen::MatrixXd dense = dense_features(train.raw, train.processed, sentiment,
                                           f.use_ftp ? &f.ftp : nullptr, &f.dense_names);
    f.dense_scaling = fit_scaling(dense);
    Eigen::MatrixXd scaled = apply_scaling(dense, f.dense_scaling);

    if (cfg.lasso_enabled && lasso_target) {
        double lambda = cfg.lasso_lambda;
        if (lambda < 0)
            lambda = lasso_cv_lambda(scaled, *lasso_target, 5, cfg.seed).best_lambda;
        f.lasso_lambda = lambda;
        LassoModel lasso = lasso_fit(scaled, *lasso_target, lambda);
        f.dense_selected = lasso.selected;
        if (f.dense_selected.empty()) {
            // a fully-penalized model keeps nothing; fall back to all columns
            for (int j = 0; j < scaled.cols(); ++j) f.dense_selected.push_back(j);
        }
    } else {
        for (int j = 0; j < scaled.cols(); ++j) f.dense_selected.push_back(j);
    }

    f.tfidf = tfidf_fit(train.processed);
    SparseRowMatrix block = tfidf_transform(f.tfidf, train.processed);
    int max_rank = static_cast<int>(std::min(block.rows(), block.cols()));
    f.rank = std::max(1, std::min(cfg.svd_rank, max_rank));
    f.basis = tsvd_fit(block, f.rank, TsvdMethod::Auto, cfg.seed);
    f.basis.vocabulary_hash = f.tfidf.vocabulary_hash();
    f.svd_scaling = fit_scaling(tsvd_project(f.basis, block));
    return f;
}

/// [scaled selected dense | scaled SVD coordinates]
inline Eigen::MatrixXd apply_features(const FittedFeatures& f, const PreparedTexts& texts,
                                      const SentimentLexicon& sentiment) {
    Eigen::MatrixXd dense = dense_features(texts.raw, texts.processed, sentiment,
                                           f.use_ftp ? &f.ftp : nullptr, nullptr);
    Eigen::MatrixXd scaled = select_columns(apply_scaling(dense, f.dense_scaling),
                                            f.dense_selected);
    Eigen::MatrixXd svd = apply_scaling(
        tsvd_project(f.basis, tfidf_transform(f.tfidf, texts.processed)), f.svd_scaling);
    Eigen::MatrixXd out(scaled.rows(), scaled.cols() + svd.cols());
    out << scaled, svd;
    return out;
}

// --- feature-pipeline serialization ------------------------------------------

inline void scaling_save(const Scaling& s, const std::filesystem::path& file) {
    std::string csv = "mean,std,zmin,zmax\n";
    for (const auto& c : s.columns)
        csv += detail::strf("%s,%s,%s,%s\n", detail::fmt_g17(c.mean).c_str(),
                            detail::fmt_g17(c.std).c_str(), detail::fmt_g17(c.zmin).c_str(),
                            detail::fmt_g17(c.zmax).c_str());
    detail::write_file(file, csv);
}

inline Scaling scaling_load(const std::filesystem::path& file) {
    Scaling s;
    auto rows = detail::csv_parse(detail::read_file(file));
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != 4) throw error("scaling_load: bad row in " + file.string());
        s.columns.push_back({std::stod(rows[r][0]), std::stod(rows[r][1]), std::stod(rows[r][2]),
                             std::stod(rows[r][3])});
    }
    return s;
}

inline void features_save(const FittedFeatures& f, const std::filesystem::path& dir,
                          const std::string& stem) {
    nlohmann::json header;
    header["dense_names"] = f.dense_names;
    header["dense_selected"] = f.dense_selected;
    header["use_ftp"] = f.use_ftp;
    header["lasso_lambda"] = f.lasso_lambda;
    header["rank"] = f.rank;
    header["tfidf_corpus_size"] = f.tfidf.corpus_size;
    header["vocabulary_hash"] = f.tfidf.vocabulary_hash();
    detail::write_file(dir / (stem + ".json"), header.dump(2) + "\n");
    scaling_save(f.dense_scaling, dir / (stem + "_dense_scaling.csv"));
    scaling_save(f.svd_scaling, dir / (stem + "_svd_scaling.csv"));
    std::vector<std::string> ftp(f.ftp.tokens.begin(), f.ftp.tokens.end());
    std::sort(ftp.begin(), ftp.end());
    detail::write_file(dir / (stem + "_ftp.txt"), detail::join(ftp, "\n") + (ftp.empty() ? "" : "\n"));
    detail::write_file(dir / (stem + "_vocabulary.txt"),
                       detail::join(f.tfidf.vocabulary, "\n") + "\n");
    std::string idf;
    for (double v : f.tfidf.idf) idf += detail::fmt_g17(v) + "\n";
    detail::write_file(dir / (stem + "_idf.csv"), idf);
    tsvd_save(f.basis, dir, stem + "_tsvd");
}

inline FittedFeatures features_load(const std::filesystem::path& dir, const std::string& stem) {
    FittedFeatures f;
    auto header = nlohmann::json::parse(detail::read_file(dir / (stem + ".json")));
    f.dense_names = header.at("dense_names").get<std::vector<std::string>>();
    f.dense_selected = header.at("dense_selected").get<std::vector<int>>();
    f.use_ftp = header.at("use_ftp").get<bool>();
    f.lasso_lambda = header.at("lasso_lambda").get<double>();
    f.rank = header.at("rank").get<int>();
    f.dense_scaling = scaling_load(dir / (stem + "_dense_scaling.csv"));
    f.svd_scaling = scaling_load(dir / (stem + "_svd_scaling.csv"));
    for (const auto& line : detail::split(detail::read_file(dir / (stem + "_ftp.txt")), '\n'))
        if (!line.empty()) f.ftp.tokens.insert(line);
    f.tfidf.corpus_size = header.at("tfidf_corpus_size").get<std::size_t>();
    for (const auto& line :
         detail::split(detail::read_file(dir / (stem + "_vocabulary.txt")), '\n'))
        if (!line.empty()) {
            f.tfidf.index[line] = static_cast<int>(f.tfidf.vocabulary.size());
            f.tfidf.vocabulary.push_back(line);
        }
    for (const auto& row : detail::csv_parse(detail::read_file(dir / (stem + "_idf.csv"))))
        if (!row.empty() && !row[0].empty()) f.tfidf.idf.push_back(std::stod(row[0]));
    if (f.tfidf.idf.size() != f.tfidf.vocabulary.size())
        throw error("features_load: idf/vocabulary size mismatch");
    f.basis = tsvd_load(dir, stem + "_tsvd");
    return f;
}

// ---------------------------------------------------------------------------
// Label helpers (audit-aware)
// ---------------------------------------------------------------------------

inline Corpus labeled_subset_tier1(const Corpus& corpus) {
    Corpus out;
    for (const auto& m : corpus.messages)
        if (m.has_gold()) out.messages.push_back(m);
    return out;
}

inline Corpus labeled_subset_tier2(const Corpus& corpus) {
    Corpus out;
    for (const auto& m : corpus.messages) {
        if (!m.has_gold()) continue;
        const auto& l = *m.gold();
        if (l.tier1 == Tier1::Transportation && l.tier2) out.messages.push_back(m);
    }
    return out;
}

inline std::vector<std::string> tier1_labels(const Corpus& corpus) {
    std::vector<std::string> out;
    out.reserve(corpus.size());
    for (const auto& m : corpus.messages) out.push_back(to_string(m.gold()->tier1));
    return out;
}

inline std::vector<std::string> tier2_labels(const Corpus& corpus) {
    std::vector<std::string> out;
    out.reserve(corpus.size());
    for (const auto& m : corpus.messages) out.push_back(to_string(*m.gold()->tier2));
    return out;
}

/// The only place test labels are read: enters an evaluation scope so the
/// access audit can tell legitimate reads apart.
template <typename F>
inline std::vector<std::string> extract_labels_for_eval(const Corpus& corpus, F&& extractor) {
    audit::EvalScope scope;
    return extractor(corpus);
}

// ---------------------------------------------------------------------------
// Tier-2 replicated comparison (SVM vs L-LDA vs hybrid)
// ---------------------------------------------------------------------------

struct Tier2Output {
    ReplicateSet replicates;
    SvmParams svm_params;  // grid-search winner (or the configured params)
    std::map<std::string, MetricReport> reports;           // classifier -> replicate-0 report
    std::map<std::string, ConfusionMatrix> confusions;     // classifier -> replicate-0 matrix
    std::map<std::string, nlohmann::json> wilcoxon;        // pair -> result or error
    TopicModel topics;                                     // replicate-0 model
    SvmModel svm_model, hybrid_model;                      // replicate-0 models
    FittedFeatures features;                               // replicate-0 feature pipeline
};

namespace detail {

struct Tier2Replicate {
    double acc_svm = 0, acc_llda = 0, acc_hybrid = 0;
    // replicate 0 keeps the full artifacts
    std::map<std::string, ConfusionMatrix> confusions;
    TopicModel topics;
    SvmModel svm_model, hybrid_model;
    FittedFeatures features;
};

}  // namespace detail

/// Runs R seeded replicates; every classifier sees identical splits, so the
/// accuracy samples are paired. Kernel parameters come from one grid search
/// on the first replicate's training set when the grid is enabled.
inline Tier2Output tier2_compare(const Corpus& tier2, const LexiconTables& lexicons,
                                 const SentimentLexicon& sentiment, const RunConfig& cfg) {
    if (tier2.size() < 10) throw error("tier2_compare: need at least 10 labeled messages");
    const int R = cfg.replicates;

    // choose SVM parameters once, on the first replicate's training split
    SvmParams svm_params = cfg.svm;
    {
        SplitPlan plan{cfg.seed, cfg.train_fraction, SplitPlan::Mode::Random};
        auto [train, test] = split(tier2, plan);
        if (cfg.use_grid) {
            PreparedTexts ptr = prepare_texts(train, lexicons, cfg.workers);
            FittedFeatures f = fit_features(ptr, sentiment, cfg, std::nullopt, std::nullopt);
            Eigen::MatrixXd X = apply_features(f, ptr, sentiment);
            GridResult grid =
                grid_search(X, tier2_labels(train), cfg.grid, cfg.grid_folds, cfg.seed,
                            cfg.workers);
            svm_params = grid.best;
        }
    }

    auto run_replicate = [&](std::size_t r) {
        detail::Tier2Replicate rep;
        SplitPlan plan{cfg.seed + r, cfg.train_fraction, SplitPlan::Mode::Random};
        auto [train, test] = split(tier2, plan);
        for (const auto& m : test.messages) audit::add_test_id(m.id);

        PreparedTexts ptr = prepare_texts(train, lexicons, 1);
        PreparedTexts pte = prepare_texts(test, lexicons, 1);
        std::vector<std::string> y_train = tier2_labels(train);
        std::vector<std::string> y_test =
            extract_labels_for_eval(test, [](const Corpus& c) { return tier2_labels(c); });

        FittedFeatures f = fit_features(ptr, sentiment, cfg, std::nullopt, std::nullopt);
        Eigen::MatrixXd Xtr = apply_features(f, ptr, sentiment);
        Eigen::MatrixXd Xte = apply_features(f, pte, sentiment);

        // standalone SVM
        SvmModel svm_model = svm_train(Xtr, y_train, svm_params);
        std::vector<std::string> pred_svm = svm_predict(svm_model, Xte);

        // standalone L-LDA
        std::vector<std::vector<std::string>> label_sets;
        for (const auto& l : y_train) label_sets.push_back({l});
        TopicModel topics = llda_train(ptr.docs, label_sets, cfg.llda);
        std::vector<std::string> pred_llda;
        pred_llda.reserve(pte.docs.size());
        for (const auto& doc : pte.docs) pred_llda.push_back(llda_classify(topics, doc, cfg.llda));

        // L-LDA incorporated SVM: topic mixtures appended to the feature space
        Eigen::MatrixXd Htr = hybrid_featurize(topics, Xtr, ptr.docs, cfg.llda);
        Eigen::MatrixXd Hte = hybrid_featurize(topics, Xte, pte.docs, cfg.llda);
        SvmModel hybrid_model = svm_train(Htr, y_train, svm_params);
        std::vector<std::string> pred_hybrid = svm_predict(hybrid_model, Hte);

        auto accuracy = [&](const std::vector<std::string>& pred) {
            std::size_t hits = 0;
            for (std::size_t i = 0; i < pred.size(); ++i)
                if (pred[i] == y_test[i]) ++hits;
            return pred.empty() ? 0.0
                                : 100.0 * static_cast<double>(hits) /
                                      static_cast<double>(pred.size());
        };
        rep.acc_svm = accuracy(pred_svm);
        rep.acc_llda = accuracy(pred_llda);
        rep.acc_hybrid = accuracy(pred_hybrid);

        if (r == 0) {
            audit::EvalScope scope;
            rep.confusions["svm"] = confusion(y_test, pred_svm);
            rep.confusions["llda"] = confusion(y_test, pred_llda);
            rep.confusions["hybrid"] = confusion(y_test, pred_hybrid);
            rep.topics = std::move(topics);
            rep.svm_model = std::move(svm_model);
            rep.hybrid_model = std::move(hybrid_model);
            rep.features = std::move(f);
        }
        return rep;
    };

    std::vector<detail::Tier2Replicate> reps = parallel_map<detail::Tier2Replicate>(
        static_cast<std::size_t>(R), cfg.workers, run_replicate);

    Tier2Output out;
    out.svm_params = svm_params;
    for (int r = 0; r < R; ++r) {
        out.replicates.seeds.push_back(cfg.seed + static_cast<std::uint64_t>(r));
        out.replicates.run_accuracies["hybrid"].push_back(reps[static_cast<std::size_t>(r)].acc_hybrid);
        out.replicates.run_accuracies["llda"].push_back(reps[static_cast<std::size_t>(r)].acc_llda);
        out.replicates.run_accuracies["svm"].push_back(reps[static_cast<std::size_t>(r)].acc_svm);
    }
    for (auto& [name, cm] : reps[0].confusions) {
        out.confusions[name] = cm;
        out.reports[name] = metrics(cm);
    }
    out.topics = std::move(reps[0].topics);
    out.svm_model = std::move(reps[0].svm_model);
    out.hybrid_model = std::move(reps[0].hybrid_model);
    out.features = std::move(reps[0].features);

    const std::vector<std::pair<std::string, std::string>> pairs = {
        {"hybrid", "llda"}, {"hybrid", "svm"}, {"svm", "llda"}};
    for (const auto& [a, b] : pairs) {
        nlohmann::json entry;
        try {
            WilcoxonResult w = wilcoxon_signed_rank(out.replicates.run_accuracies[a],
                                                    out.replicates.run_accuracies[b]);
            entry["statistic"] = w.statistic;
            entry["w_plus"] = w.w_plus;
            entry["w_minus"] = w.w_minus;
            entry["p_value"] = w.p_value;
            entry["n"] = w.n;
            entry["exact"] = w.exact;
            entry["significant_at_0.1"] = w.significant_at_0p1;
        } catch (const error& e) {
            entry["error"] = e.what();
        }
        out.wilcoxon[a + "_vs_" + b] = entry;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

namespace detail {

inline void write_output(RunManifest& manifest, const std::filesystem::path& run_dir,
                         const std::filesystem::path& rel, const std::string& content) {
    auto path = run_dir / rel;
    write_file(path, content);
    manifest.record_output(run_dir, path);
}

inline nlohmann::json wilcoxon_table_json(const std::map<std::string, nlohmann::json>& table) {
    nlohmann::json j;
    j["significance_level"] = 0.1;
    j["pairs"] = table;
    return j;
}

}  // namespace detail

struct PipelineResult {
    std::filesystem::path run_dir;
    MetricReport tier1;
    Tier2Output tier2;
    std::size_t geocoded = 0;
    std::size_t geo_resolved = 0;
};

/// Full run: tier-1 SVM (transportation vs not), tier-2 three-classifier
/// comparison on the transportation sub-classes, then geocoding of the
/// messages the tier-1 model classifies as transportation. All artifacts
/// land under out/<run-id>/.
inline PipelineResult cmd_pipeline(const RunConfig& cfg) {
    cfg.validate();
    const auto run_dir = cfg.run_dir();
    std::filesystem::create_directories(run_dir);
    RunManifest manifest(cfg);
    PipelineResult result;
    result.run_dir = run_dir;

    std::string current_stage;
    try {
        // --- ingest ---------------------------------------------------------
        current_stage = "ingest";
        manifest.start_stage(current_stage);
        LoadResult loaded = load_corpus(cfg.corpus_path, cfg.corpus_format);
        const Corpus& corpus = loaded.corpus;
        LexiconTables lexicons = load_lexicons(cfg.slang_path, cfg.stopwords_path);
        SentimentLexicon sentiment_lex;
        if (!cfg.sentiment_path.empty()) sentiment_lex = load_sentiment_lexicon(cfg.sentiment_path);
        {
            nlohmann::json j;
            j["messages"] = corpus.size();
            j["skipped"] = loaded.skipped;
            std::map<std::string, std::size_t> counts;
            for (const auto& [label, count] : corpus.label_counts()) counts[label.str()] = count;
            j["label_counts"] = counts;
            detail::write_output(manifest, run_dir, "reports/ingest.json", j.dump(2) + "\n");
        }
        manifest.finish_stage();

        // --- tier-1 ----------------------------------------------------------
        current_stage = "tier1";
        manifest.start_stage(current_stage);
        Corpus labeled = labeled_subset_tier1(corpus);
        if (labeled.size() < 10) throw error("need at least 10 labeled messages");
        SplitPlan plan{cfg.seed, cfg.train_fraction, SplitPlan::Mode::Random};
        auto [train1, test1] = split(labeled, plan);
        for (const auto& m : test1.messages) audit::add_test_id(m.id);
        if (cfg.undersample_tier1) train1 = undersample(train1, cfg.seed);

        PreparedTexts ptr1 = prepare_texts(train1, lexicons, cfg.workers);
        PreparedTexts pte1 = prepare_texts(test1, lexicons, cfg.workers);
        std::vector<std::string> y1_train = tier1_labels(train1);
        Eigen::VectorXd lasso_target(static_cast<Eigen::Index>(y1_train.size()));
        for (std::size_t i = 0; i < y1_train.size(); ++i)
            lasso_target(static_cast<Eigen::Index>(i)) =
                y1_train[i] == to_string(Tier1::Transportation) ? 1.0 : -1.0;

        std::optional<FrequentTokenList> ftp_file;
        if (!cfg.frequent_tokens_path.empty())
            ftp_file = load_frequent_tokens(cfg.frequent_tokens_path);
        FittedFeatures f1 = fit_features(ptr1, sentiment_lex, cfg, lasso_target, ftp_file);
        Eigen::MatrixXd X1tr = apply_features(f1, ptr1, sentiment_lex);
        Eigen::MatrixXd X1te = apply_features(f1, pte1, sentiment_lex);

        SvmParams params1 = cfg.svm;
        if (cfg.use_grid)
            params1 =
                grid_search(X1tr, y1_train, cfg.grid, cfg.grid_folds, cfg.seed, cfg.workers).best;
        SvmModel tier1_model = svm_train(X1tr, y1_train, params1, cfg.workers);
        std::vector<std::string> pred1 = svm_predict(tier1_model, X1te);
        std::vector<std::string> y1_test =
            extract_labels_for_eval(test1, [](const Corpus& c) { return tier1_labels(c); });

        ConfusionMatrix cm1 = confusion(
            y1_test, pred1,
            {to_string(Tier1::NonTransportation), to_string(Tier1::Transportation)});
        result.tier1 = metrics(cm1);
        detail::write_output(manifest, run_dir, "metrics/tier1_metrics.json",
                             metrics_to_json(result.tier1).dump(2) + "\n");
        detail::write_output(manifest, run_dir, "metrics/tier1_confusion.csv",
                             confusion_to_csv(cm1));
        {
            audit::EvalScope scope;
            auto groups = user_group_report(test1.messages, y1_test, pred1, cfg.user_groups);
            detail::write_output(manifest, run_dir, "metrics/tier1_user_groups.csv",
                                 group_report_to_csv(groups));
        }
        tier1_model.vocabulary_hash = f1.tfidf.vocabulary_hash();
        svm_save(tier1_model, run_dir / "models", "tier1_svm");
        manifest.record_output(run_dir, run_dir / "models/tier1_svm.json");
        manifest.record_output(run_dir, run_dir / "models/tier1_svm.csv");
        tsvd_save(f1.basis, run_dir / "models", "tier1_tsvd");
        manifest.record_output(run_dir, run_dir / "models/tier1_tsvd.json");
        manifest.record_output(run_dir, run_dir / "models/tier1_tsvd_singular_values.csv");
        manifest.record_output(run_dir, run_dir / "models/tier1_tsvd_basis.csv");
        manifest.finish_stage();

        // --- tier-2 ----------------------------------------------------------
        current_stage = "tier2";
        manifest.start_stage(current_stage);
        Corpus tier2 = labeled_subset_tier2(corpus);
        result.tier2 = tier2_compare(tier2, lexicons, sentiment_lex, cfg);
        for (const auto& name : {"svm", "llda", "hybrid"}) {
            detail::write_output(manifest, run_dir,
                                 std::string("metrics/tier2_") + name + "_metrics.json",
                                 metrics_to_json(result.tier2.reports.at(name)).dump(2) + "\n");
            detail::write_output(manifest, run_dir,
                                 std::string("metrics/tier2_") + name + "_confusion.csv",
                                 confusion_to_csv(result.tier2.confusions.at(name)));
        }
        detail::write_output(manifest, run_dir, "metrics/tier2_replicates.csv",
                             replicates_to_csv(result.tier2.replicates));
        detail::write_output(manifest, run_dir, "metrics/tier2_wilcoxon.json",
                             detail::wilcoxon_table_json(result.tier2.wilcoxon).dump(2) + "\n");
        {
            std::string csv = "topic,rank,word\n";
            auto words = top_words(result.tier2.topics, 15);
            for (int k = 0; k < result.tier2.topics.K; ++k)
                for (std::size_t i = 0; i < words[static_cast<std::size_t>(k)].size(); ++i)
                    csv += detail::strf(
                        "%s,%zu,%s\n",
                        result.tier2.topics.topics[static_cast<std::size_t>(k)].c_str(), i + 1,
                        words[static_cast<std::size_t>(k)][i].c_str());
            detail::write_output(manifest, run_dir, "reports/llda_top_words.csv", csv);
        }
        llda_save(result.tier2.topics, run_dir / "models", "tier2_llda");
        for (const char* suffix : {".json", "_vocabulary.txt", "_beta.csv"})
            manifest.record_output(run_dir, run_dir / ("models/tier2_llda" + std::string(suffix)));
        svm_save(result.tier2.svm_model, run_dir / "models", "tier2_svm");
        svm_save(result.tier2.hybrid_model, run_dir / "models", "tier2_hybrid_svm");
        for (const char* stem : {"tier2_svm", "tier2_hybrid_svm"})
            for (const char* suffix : {".json", ".csv"})
                manifest.record_output(run_dir, run_dir / ("models/" + std::string(stem) + suffix));
        manifest.finish_stage();

        // --- geocode ---------------------------------------------------------
        current_stage = "geocode";
        manifest.start_stage(current_stage);
        if (!cfg.streets_path.empty()) {
            Gazetteer gaz = load_gazetteer(cfg.streets_path, cfg.intersections_path);
            std::unique_ptr<LocalTableClient> client;
            if (!cfg.centroids_path.empty())
                client = std::make_unique<LocalTableClient>(cfg.centroids_path);

            // classify everything with the tier-1 model, geocode the
            // transportation-positive slice
            PreparedTexts pall = prepare_texts(corpus, lexicons, cfg.workers);
            Eigen::MatrixXd Xall = apply_features(f1, pall, sentiment_lex);
            std::vector<std::string> pred_all = svm_predict(tier1_model, Xall);

            std::vector<std::size_t> positive;
            for (std::size_t i = 0; i < pred_all.size(); ++i)
                if (pred_all[i] == to_string(Tier1::Transportation)) positive.push_back(i);

            std::vector<GeoResolution> resolutions = parallel_map<GeoResolution>(
                positive.size(), cfg.workers, [&](std::size_t k) {
                    return geocode_message(corpus.messages[positive[k]], gaz, client.get(),
                                           cfg.alpha);
                });

            std::string jsonl;
            std::vector<std::pair<GeoPoint, std::string>> points;
            std::vector<Message> geo_subset;
            for (std::size_t k = 0; k < positive.size(); ++k) {
                const Message& msg = corpus.messages[positive[k]];
                const GeoResolution& res = resolutions[k];
                nlohmann::json j;
                j["id"] = msg.id;
                j["method"] = to_string(res.primary.method);
                if (res.primary.resolved) {
                    j["lat"] = res.primary.resolved->lat;
                    j["lon"] = res.primary.resolved->lon;
                }
                if (!res.primary.note.empty()) j["note"] = res.primary.note;
                nlohmann::json spans = nlohmann::json::array();
                for (const auto& c : res.candidates) {
                    nlohmann::json s;
                    s["span"] = c.raw_span;
                    nlohmann::json matches = nlohmann::json::array();
                    for (const auto& m : c.matched)
                        matches.push_back({{"name", m.street.name},
                                           {"borough", m.street.borough},
                                           {"score", m.score}});
                    s["matches"] = matches;
                    if (c.ambiguous_borough) s["ambiguous_borough"] = true;
                    spans.push_back(s);
                }
                j["candidates"] = spans;
                jsonl += j.dump() + "\n";

                if (res.primary.resolved) {
                    ++result.geo_resolved;
                    // sub-class for the density map comes from the hybrid model
                    Eigen::MatrixXd row(1, Xall.cols());
                    row = Xall.row(static_cast<Eigen::Index>(positive[k]));
                    Eigen::MatrixXd hrow = hybrid_featurize(
                        result.tier2.topics, row, {pall.docs[positive[k]]}, cfg.llda);
                    std::string cls = svm_predict(result.tier2.hybrid_model, hrow)[0];
                    points.emplace_back(*res.primary.resolved, cls);
                }
                if (msg.geo) geo_subset.push_back(msg);
            }
            result.geocoded = positive.size();
            detail::write_output(manifest, run_dir, "geo/candidates.jsonl", jsonl);
            DensityGrid grid = density_grid(points, cfg.density_cell_feet);
            detail::write_output(manifest, run_dir, "geo/density.geojson",
                                 density_grid_geojson(grid).dump(2) + "\n");
            nlohmann::json vj;
            try {
                DistanceReport report = validate_geocoder(geo_subset, gaz, client.get(), cfg.alpha);
                vj["evaluated"] = report.evaluated;
                vj["unresolved"] = report.unresolved;
                vj["mean_miles"] = report.mean;
                vj["stddev_miles"] = report.stddev;
                vj["p25_miles"] = report.p25;
                vj["p50_miles"] = report.p50;
                vj["p75_miles"] = report.p75;
            } catch (const error& e) {
                vj["notice"] = e.what();
            }
            detail::write_output(manifest, run_dir, "geo/validation.json", vj.dump(2) + "\n");
        }
        manifest.finish_stage();
    } catch (const std::exception& e) {
        manifest.fail_stage(e.what());
        manifest.write(run_dir);
        throw stage_error(current_stage, e.what());
    }

    manifest.write(run_dir);
    return result;
}

/// Standalone tier-2 replicate comparison; emits the paired accuracy table
/// and the Wilcoxon results.
inline Tier2Output cmd_replicates(const RunConfig& cfg) {
    cfg.validate();
    if (cfg.replicates < 5) throw error("cmd_replicates: need R >= 5");
    const auto run_dir = cfg.run_dir();
    std::filesystem::create_directories(run_dir);
    RunManifest manifest(cfg);
    Tier2Output out;
    try {
        manifest.start_stage("replicates");
        LoadResult loaded = load_corpus(cfg.corpus_path, cfg.corpus_format);
        LexiconTables lexicons = load_lexicons(cfg.slang_path, cfg.stopwords_path);
        SentimentLexicon sentiment_lex;
        if (!cfg.sentiment_path.empty()) sentiment_lex = load_sentiment_lexicon(cfg.sentiment_path);
        Corpus tier2 = labeled_subset_tier2(loaded.corpus);
        out = tier2_compare(tier2, lexicons, sentiment_lex, cfg);
        detail::write_output(manifest, run_dir, "metrics/tier2_replicates.csv",
                             replicates_to_csv(out.replicates));
        detail::write_output(manifest, run_dir, "metrics/tier2_wilcoxon.json",
                             detail::wilcoxon_table_json(out.wilcoxon).dump(2) + "\n");
        manifest.finish_stage();
    } catch (const std::exception& e) {
        manifest.fail_stage(e.what());
        manifest.write(run_dir);
        throw stage_error("replicates", e.what());
    }
    manifest.write(run_dir);
    return out;
}

/// Tier-1 accuracy as a function of the truncated-SVD rank, on one fixed
/// split. Every rank is validated against the training matrix before any
/// training starts.
inline std::vector<std::pair<int, double>> cmd_rank_sweep(const RunConfig& cfg,
                                                          std::vector<int> ranks) {
    cfg.validate();
    if (ranks.empty()) throw error("cmd_rank_sweep: no ranks given");
    LoadResult loaded = load_corpus(cfg.corpus_path, cfg.corpus_format);
    LexiconTables lexicons = load_lexicons(cfg.slang_path, cfg.stopwords_path);
    SentimentLexicon sentiment_lex;
    if (!cfg.sentiment_path.empty()) sentiment_lex = load_sentiment_lexicon(cfg.sentiment_path);

    Corpus labeled = labeled_subset_tier1(loaded.corpus);
    SplitPlan plan{cfg.seed, cfg.train_fraction, SplitPlan::Mode::Random};
    auto [train, test] = split(labeled, plan);
    PreparedTexts ptr = prepare_texts(train, lexicons, cfg.workers);
    PreparedTexts pte = prepare_texts(test, lexicons, cfg.workers);
    std::vector<std::string> y_train = tier1_labels(train);
    std::vector<std::string> y_test =
        extract_labels_for_eval(test, [](const Corpus& c) { return tier1_labels(c); });

    TfidfModel tfidf = tfidf_fit(ptr.processed);
    SparseRowMatrix block_tr = tfidf_transform(tfidf, ptr.processed);
    SparseRowMatrix block_te = tfidf_transform(tfidf, pte.processed);
    int max_rank = static_cast<int>(std::min(block_tr.rows(), block_tr.cols()));
    std::sort(ranks.begin(), ranks.end());
    for (int r : ranks)
        if (r < 1 || r > max_rank)
            throw error(detail::strf("cmd_rank_sweep: rank %d out of range (max %d)", r,
                                     max_rank));

    Eigen::MatrixXd dense_tr, dense_te;
    {
        std::vector<std::string> names;
        Eigen::MatrixXd raw_tr =
            dense_features(ptr.raw, ptr.processed, sentiment_lex, nullptr, &names);
        Scaling s = fit_scaling(raw_tr);
        dense_tr = apply_scaling(raw_tr, s);
        dense_te = apply_scaling(dense_features(pte.raw, pte.processed, sentiment_lex, nullptr,
                                                nullptr),
                                 s);
    }

    std::vector<double> acc = parallel_map<double>(ranks.size(), cfg.workers, [&](std::size_t k) {
        TruncatedBasis basis = tsvd_fit(block_tr, ranks[k], TsvdMethod::Auto, cfg.seed);
        Scaling ss = fit_scaling(tsvd_project(basis, block_tr));
        Eigen::MatrixXd Xtr(dense_tr.rows(), dense_tr.cols() + ranks[k]);
        Xtr << dense_tr, apply_scaling(tsvd_project(basis, block_tr), ss);
        Eigen::MatrixXd Xte(dense_te.rows(), dense_te.cols() + ranks[k]);
        Xte << dense_te, apply_scaling(tsvd_project(basis, block_te), ss);
        SvmModel model = svm_train(Xtr, y_train, cfg.svm);
        std::vector<std::string> pred = svm_predict(model, Xte);
        std::size_t hits = 0;
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == y_test[i]) ++hits;
        return pred.empty() ? 0.0
                            : 100.0 * static_cast<double>(hits) / static_cast<double>(pred.size());
    });

    std::vector<std::pair<int, double>> result;
    for (std::size_t k = 0; k < ranks.size(); ++k) result.emplace_back(ranks[k], acc[k]);

    const auto run_dir = cfg.run_dir();
    std::string csv = "rank,accuracy\n";
    for (const auto& [rank, accuracy] : result)
        csv += detail::strf("%d,%s\n", rank, detail::fmt_g17(accuracy).c_str());
    detail::write_file(run_dir / "reports/rank_sweep.csv", csv);
    return result;
}

struct GeocodeCmdResult {
    std::size_t messages = 0;
    std::size_t resolved = 0;
    std::filesystem::path run_dir;
};

/// Geocodes every message of the corpus: candidate annotations as JSONL, the
/// class density grid as GeoJSON, and the geo-field validation report.
inline GeocodeCmdResult cmd_geocode(const RunConfig& cfg) {
    cfg.validate();
    if (cfg.streets_path.empty()) throw error("cmd_geocode: streets gazetteer is required");
    const auto run_dir = cfg.run_dir();
    std::filesystem::create_directories(run_dir);
    RunManifest manifest(cfg);
    GeocodeCmdResult result;
    result.run_dir = run_dir;
    try {
        manifest.start_stage("geocode");
        LoadResult loaded = load_corpus(cfg.corpus_path, cfg.corpus_format);
        const Corpus& corpus = loaded.corpus;
        Gazetteer gaz = load_gazetteer(cfg.streets_path, cfg.intersections_path);
        std::unique_ptr<LocalTableClient> client;
        if (!cfg.centroids_path.empty())
            client = std::make_unique<LocalTableClient>(cfg.centroids_path);

        std::vector<GeoResolution> resolutions = parallel_map<GeoResolution>(
            corpus.size(), cfg.workers, [&](std::size_t i) {
                return geocode_message(corpus.messages[i], gaz, client.get(), cfg.alpha);
            });

        std::string jsonl;
        std::vector<std::pair<GeoPoint, std::string>> points;
        std::vector<Message> geo_subset;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            const Message& msg = corpus.messages[i];
            const GeoResolution& res = resolutions[i];
            nlohmann::json j;
            j["id"] = msg.id;
            j["method"] = to_string(res.primary.method);
            if (res.primary.resolved) {
                j["lat"] = res.primary.resolved->lat;
                j["lon"] = res.primary.resolved->lon;
                ++result.resolved;
                std::string cls = "unclassified";
                if (msg.has_gold()) {
                    audit::EvalScope scope;
                    const auto& l = *msg.gold();
                    cls = l.tier2 ? to_string(*l.tier2) : to_string(l.tier1);
                }
                points.emplace_back(*res.primary.resolved, cls);
            }
            if (!res.primary.note.empty()) j["note"] = res.primary.note;
            nlohmann::json spans = nlohmann::json::array();
            for (const auto& c : res.candidates) {
                nlohmann::json s;
                s["span"] = c.raw_span;
                nlohmann::json matches = nlohmann::json::array();
                for (const auto& m : c.matched)
                    matches.push_back({{"name", m.street.name},
                                       {"borough", m.street.borough},
                                       {"score", m.score}});
                s["matches"] = matches;
                spans.push_back(s);
            }
            j["candidates"] = spans;
            jsonl += j.dump() + "\n";
            if (msg.geo) geo_subset.push_back(msg);
        }
        result.messages = corpus.size();
        detail::write_output(manifest, run_dir, "geo/candidates.jsonl", jsonl);
        DensityGrid grid = density_grid(points, cfg.density_cell_feet);
        detail::write_output(manifest, run_dir, "geo/density.geojson",
                             density_grid_geojson(grid).dump(2) + "\n");
        nlohmann::json vj;
        try {
            DistanceReport report = validate_geocoder(geo_subset, gaz, client.get(), cfg.alpha);
            vj["evaluated"] = report.evaluated;
            vj["unresolved"] = report.unresolved;
            vj["mean_miles"] = report.mean;
            vj["stddev_miles"] = report.stddev;
            vj["p25_miles"] = report.p25;
            vj["p50_miles"] = report.p50;
            vj["p75_miles"] = report.p75;
        } catch (const error& e) {
            vj["notice"] = e.what();
        }
        detail::write_output(manifest, run_dir, "geo/validation.json", vj.dump(2) + "\n");
        manifest.finish_stage();
    } catch (const std::exception& e) {
        manifest.fail_stage(e.what());
        manifest.write(run_dir);
        throw stage_error("geocode", e.what());
    }
    manifest.write(run_dir);
    return result;
}

}  // namespace roadtext
