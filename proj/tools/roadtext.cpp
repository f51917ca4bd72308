// Command-line front end: ingest, preprocess, featurize, train, classify,
// evaluate, replicates, rank-sweep, geocode, pipeline.
//
// Exit codes: 0 ok, 1 usage, 2 data error, 3 stage failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "roadtext/geocode_http.hpp"
#include "roadtext/pipeline.hpp"

namespace {

using namespace roadtext;

struct CommonFlags {
    std::string config;
    std::string corpus;
    std::string format;
    std::string out;
    std::string seed;
    std::string workers;
    std::string run_id;
    std::vector<std::string> sets;  // extra key=value overrides
};

void add_common(CLI::App* sub, CommonFlags& flags) {
    sub->add_option("--config", flags.config, "key=value config file");
    sub->add_option("--corpus", flags.corpus, "corpus file (jsonl or csv)");
    sub->add_option("--format", flags.format, "corpus format: jsonl|csv");
    sub->add_option("--out", flags.out, "output directory");
    sub->add_option("--seed", flags.seed, "master seed");
    sub->add_option("--workers", flags.workers, "worker pool size");
    sub->add_option("--run-id", flags.run_id, "run identifier (default run-<seed>)");
    sub->add_option("--set", flags.sets, "extra config override, key=value (repeatable)");
}

RunConfig build_config(const CommonFlags& flags) {
    RunConfig cfg;
    if (!flags.config.empty()) cfg = load_config(flags.config);
    if (!flags.corpus.empty()) config_set(cfg, "corpus", flags.corpus);
    if (!flags.format.empty()) config_set(cfg, "format", flags.format);
    if (!flags.out.empty()) config_set(cfg, "out", flags.out);
    if (!flags.seed.empty()) config_set(cfg, "seed", flags.seed);
    if (!flags.workers.empty()) config_set(cfg, "workers", flags.workers);
    if (!flags.run_id.empty()) config_set(cfg, "run_id", flags.run_id);
    for (const auto& kv : flags.sets) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) throw error("--set expects key=value, got '" + kv + "'");
        config_set(cfg, detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
    }
    return cfg;
}

LexiconTables lexicons_of(const RunConfig& cfg) {
    return load_lexicons(cfg.slang_path, cfg.stopwords_path);
}

SentimentLexicon sentiment_of(const RunConfig& cfg) {
    return cfg.sentiment_path.empty() ? SentimentLexicon{}
                                      : load_sentiment_lexicon(cfg.sentiment_path);
}

int run_ingest(const RunConfig& cfg, const std::string& output) {
    LoadResult loaded = load_corpus(cfg.corpus_path, cfg.corpus_format);
    for (const auto& w : loaded.warnings) std::cerr << "warning: " << w << "\n";
    nlohmann::json j;
    j["messages"] = loaded.corpus.size();
    j["skipped"] = loaded.skipped;
    std::map<std::string, std::size_t> counts;
    for (const auto& [label, count] : loaded.corpus.label_counts()) counts[label.str()] = count;
    j["label_counts"] = counts;
    std::cout << j.dump(2) << "\n";
    if (!output.empty()) detail::write_file(output, corpus_to_jsonl(loaded.corpus));
    return 0;
}

int run_preprocess(const RunConfig& cfg, const std::string& output) {
    LoadResult loaded = load_corpus(cfg.corpus_path, cfg.corpus_format);
    LexiconTables lex = lexicons_of(cfg);
    std::string jsonl;
    for (const auto& m : loaded.corpus.messages) {
        ProcessedMessage pm = preprocess_text(m.text, lex);
        nlohmann::json j;
        j["id"] = m.id;
        j["raw_tokens"] = pm.raw_tokens;
        j["relevant_tokens"] = pm.relevant_tokens;
        j["n"] = pm.n_raw;
        j["m"] = pm.n_relevant;
        jsonl += j.dump() + "\n";
    }
    if (output.empty()) std::cout << jsonl;
    else detail::write_file(output, jsonl);
    return 0;
}

int run_featurize(const RunConfig& cfg) {
    LoadResult loaded = load_corpus(cfg.corpus_path, cfg.corpus_format);
    LexiconTables lex = lexicons_of(cfg);
    SentimentLexicon sent = sentiment_of(cfg);
    PreparedTexts texts = prepare_texts(loaded.corpus, lex, cfg.workers);

    std::optional<FrequentTokenList> ftp;
    if (!cfg.frequent_tokens_path.empty()) ftp = load_frequent_tokens(cfg.frequent_tokens_path);
    else if (cfg.ftp_top_k > 0)
        ftp = top_k_tokens(texts.processed, static_cast<std::size_t>(cfg.ftp_top_k));

    std::vector<std::string> names;
    Eigen::MatrixXd dense =
        dense_features(texts.raw, texts.processed, sent, ftp ? &*ftp : nullptr, &names);
    TfidfModel tfidf = tfidf_fit(texts.processed);
    SparseRowMatrix block = tfidf_transform(tfidf, texts.processed);

    auto dir = cfg.run_dir() / "features";
    detail::write_file(dir / "dense.csv", dense_to_csv(dense, names));
    detail::write_file(dir / "tfidf.csv", sparse_to_csv(block));
    detail::write_file(dir / "vocabulary.txt", detail::join(tfidf.vocabulary, "\n") + "\n");
    std::cout << "rows: " << dense.rows() << "\nvocabulary: " << tfidf.vocabulary.size()
              << "\nwrote: " << dir.string() << "\n";
    return 0;
}

int run_train(const RunConfig& cfg, const std::string& task, const std::string& classifier) {
    LoadResult loaded = load_corpus(cfg.corpus_path, cfg.corpus_format);
    Corpus subset = task == "tier1" ? labeled_subset_tier1(loaded.corpus)
                                    : labeled_subset_tier2(loaded.corpus);
    if (subset.empty()) throw error("train: no suitably labeled messages for task " + task);
    LexiconTables lex = lexicons_of(cfg);
    SentimentLexicon sent = sentiment_of(cfg);
    PreparedTexts texts = prepare_texts(subset, lex, cfg.workers);
    std::vector<std::string> labels =
        task == "tier1" ? tier1_labels(subset) : tier2_labels(subset);

    auto dir = cfg.run_dir() / "models";
    std::filesystem::create_directories(dir);

    std::optional<Eigen::VectorXd> lasso_target;
    if (task == "tier1") {
        Eigen::VectorXd y(static_cast<Eigen::Index>(labels.size()));
        for (std::size_t i = 0; i < labels.size(); ++i)
            y(static_cast<Eigen::Index>(i)) =
                labels[i] == to_string(Tier1::Transportation) ? 1.0 : -1.0;
        lasso_target = y;
    }
    FittedFeatures f = fit_features(texts, sent, cfg, lasso_target, std::nullopt);
    features_save(f, dir, "features");

    TopicModel topics;
    bool need_llda = classifier == "llda" || classifier == "hybrid";
    if (need_llda) {
        std::vector<std::vector<std::string>> label_sets;
        for (const auto& l : labels) label_sets.push_back({l});
        topics = llda_train(texts.docs, label_sets, cfg.llda);
        llda_save(topics, dir, "llda");
    }
    if (classifier == "svm" || classifier == "hybrid") {
        Eigen::MatrixXd X = apply_features(f, texts, sent);
        if (classifier == "hybrid") X = hybrid_featurize(topics, X, texts.docs, cfg.llda);
        SvmParams params = cfg.svm;
        if (cfg.use_grid)
            params = grid_search(X, labels, cfg.grid, cfg.grid_folds, cfg.seed, cfg.workers).best;
        SvmModel model = svm_train(X, labels, params, cfg.workers);
        model.vocabulary_hash = f.tfidf.vocabulary_hash();
        svm_save(model, dir, "svm");
    }
    nlohmann::json header;
    header["task"] = task;
    header["classifier"] = classifier;
    detail::write_file(dir / "train.json", header.dump(2) + "\n");
    std::cout << "trained " << classifier << " (" << task << ") on " << subset.size()
              << " messages -> " << dir.string() << "\n";
    return 0;
}

int run_classify(const RunConfig& cfg, const std::string& model_dir, const std::string& output) {
    auto dir = std::filesystem::path(model_dir);
    auto header = nlohmann::json::parse(detail::read_file(dir / "train.json"));
    std::string classifier = header.at("classifier").get<std::string>();

    LoadResult loaded = load_corpus(cfg.corpus_path, cfg.corpus_format);
    LexiconTables lex = lexicons_of(cfg);
    SentimentLexicon sent = sentiment_of(cfg);
    PreparedTexts texts = prepare_texts(loaded.corpus, lex, cfg.workers);

    std::vector<std::string> predictions;
    FittedFeatures f = features_load(dir, "features");
    if (classifier == "llda") {
        TopicModel topics = llda_load(dir, "llda");
        predictions = parallel_map<std::string>(texts.docs.size(), cfg.workers, [&](std::size_t i) {
            return llda_classify(topics, texts.docs[i], cfg.llda);
        });
    } else {
        Eigen::MatrixXd X = apply_features(f, texts, sent);
        if (classifier == "hybrid") {
            TopicModel topics = llda_load(dir, "llda");
            X = hybrid_featurize(topics, X, texts.docs, cfg.llda);
        }
        SvmModel model = svm_load(dir, "svm");
        predictions = svm_predict(model, X);
    }

    std::string csv = "id,label\n";
    for (std::size_t i = 0; i < predictions.size(); ++i)
        csv += detail::csv_escape(loaded.corpus.messages[i].id) + "," +
               detail::csv_escape(predictions[i]) + "\n";
    if (output.empty()) std::cout << csv;
    else detail::write_file(output, csv);
    return 0;
}

int run_evaluate(const RunConfig& cfg, const std::string& predictions_path,
                 const std::string& task, const std::string& output) {
    LoadResult loaded = load_corpus(cfg.corpus_path, cfg.corpus_format);
    auto rows = detail::csv_parse(detail::read_file(predictions_path));
    if (rows.empty() || rows[0] != std::vector<std::string>{"id", "label"})
        throw error("evaluate: predictions CSV must have header id,label");
    std::map<std::string, std::string> pred;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != 2) throw error("evaluate: bad predictions row");
        pred[rows[r][0]] = rows[r][1];
    }
    std::vector<std::string> actual, predicted;
    std::vector<Message> evaluated;
    {
        audit::EvalScope scope;
        for (const auto& m : loaded.corpus.messages) {
            if (!m.has_gold()) continue;
            auto it = pred.find(m.id);
            if (it == pred.end()) continue;
            const ClassLabel& l = *m.gold();
            if (task == "tier2") {
                if (!l.tier2) continue;
                actual.push_back(to_string(*l.tier2));
            } else {
                actual.push_back(to_string(l.tier1));
            }
            predicted.push_back(it->second);
            evaluated.push_back(m);
        }
    }
    if (actual.empty()) throw error("evaluate: no overlapping labeled messages");
    ConfusionMatrix cm = confusion(actual, predicted);
    MetricReport report = metrics(cm);
    nlohmann::json j = metrics_to_json(report);
    {
        audit::EvalScope scope;
        auto groups = user_group_report(evaluated, actual, predicted, cfg.user_groups);
        nlohmann::json gj = nlohmann::json::array();
        for (const auto& g : groups)
            gj.push_back({{"group", g.group},
                          {"total", g.total},
                          {"correct", g.correct},
                          {"accuracy", g.accuracy}});
        j["user_groups"] = gj;
    }
    std::cout << j.dump(2) << "\n";
    if (!output.empty()) detail::write_file(output, j.dump(2) + "\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"short-message transportation event classification and geocoding"};
    app.require_subcommand(1);

    CommonFlags ingest_flags, preprocess_flags, featurize_flags, train_flags, classify_flags,
        evaluate_flags, replicates_flags, sweep_flags, geocode_flags, pipeline_flags;

    auto* sub_ingest = app.add_subcommand("ingest", "load a corpus and report counts");
    add_common(sub_ingest, ingest_flags);
    std::string ingest_output;
    sub_ingest->add_option("--output", ingest_output, "write canonical JSONL here");

    auto* sub_preprocess = app.add_subcommand("preprocess", "tokenize and filter messages");
    add_common(sub_preprocess, preprocess_flags);
    std::string preprocess_output;
    sub_preprocess->add_option("--output", preprocess_output, "write processed JSONL here");

    auto* sub_featurize = app.add_subcommand("featurize", "export feature matrices as CSV");
    add_common(sub_featurize, featurize_flags);

    auto* sub_train = app.add_subcommand("train", "train a classifier on labeled data");
    add_common(sub_train, train_flags);
    std::string train_task = "tier1", train_classifier = "svm";
    sub_train->add_option("--task", train_task, "tier1 or tier2")
        ->check(CLI::IsMember({"tier1", "tier2"}));
    sub_train->add_option("--classifier", train_classifier, "svm, llda or hybrid")
        ->check(CLI::IsMember({"svm", "llda", "hybrid"}));

    auto* sub_classify = app.add_subcommand("classify", "apply a trained model");
    add_common(sub_classify, classify_flags);
    std::string classify_model, classify_output;
    sub_classify->add_option("--model-dir", classify_model, "directory written by train")
        ->required();
    sub_classify->add_option("--output", classify_output, "predictions CSV path");

    auto* sub_evaluate = app.add_subcommand("evaluate", "score predictions against gold labels");
    add_common(sub_evaluate, evaluate_flags);
    std::string eval_predictions, eval_task = "tier1", eval_output;
    sub_evaluate->add_option("--predictions", eval_predictions, "CSV with header id,label")
        ->required();
    sub_evaluate->add_option("--task", eval_task, "tier1 or tier2")
        ->check(CLI::IsMember({"tier1", "tier2"}));
    sub_evaluate->add_option("--output", eval_output, "also write metrics JSON here");

    auto* sub_replicates =
        app.add_subcommand("replicates", "paired replicate comparison of the three classifiers");
    add_common(sub_replicates, replicates_flags);

    auto* sub_sweep = app.add_subcommand("rank-sweep", "accuracy across truncated-SVD ranks");
    add_common(sub_sweep, sweep_flags);
    std::string sweep_ranks;
    sub_sweep->add_option("--ranks", sweep_ranks, "comma-separated ranks")->required();

    auto* sub_geocode = app.add_subcommand("geocode", "geocode a corpus against the gazetteer");
    add_common(sub_geocode, geocode_flags);

    auto* sub_pipeline = app.add_subcommand("pipeline", "full classification + geocoding run");
    add_common(sub_pipeline, pipeline_flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp" ||
                e.get_name() == "CallForVersion")
                   ? 0
                   : (code == 0 ? 0 : 1);
    }

    try {
        if (sub_ingest->parsed()) return run_ingest(build_config(ingest_flags), ingest_output);
        if (sub_preprocess->parsed())
            return run_preprocess(build_config(preprocess_flags), preprocess_output);
        if (sub_featurize->parsed()) return run_featurize(build_config(featurize_flags));
        if (sub_train->parsed())
            return run_train(build_config(train_flags), train_task, train_classifier);
        if (sub_classify->parsed())
            return run_classify(build_config(classify_flags), classify_model, classify_output);
        if (sub_evaluate->parsed())
            return run_evaluate(build_config(evaluate_flags), eval_predictions, eval_task,
                                eval_output);
        if (sub_replicates->parsed()) {
            Tier2Output out = cmd_replicates(build_config(replicates_flags));
            nlohmann::json j;
            for (const auto& [name, accs] : out.replicates.run_accuracies)
                j["mean_accuracy"][name] = roadtext::detail::mean(accs);
            j["wilcoxon"] = out.wilcoxon;
            std::cout << j.dump(2) << "\n";
            return 0;
        }
        if (sub_sweep->parsed()) {
            std::vector<int> ranks;
            for (const auto& part : roadtext::detail::split(sweep_ranks, ','))
                if (!roadtext::detail::trim(part).empty())
                    ranks.push_back(std::stoi(roadtext::detail::trim(part)));
            auto table = cmd_rank_sweep(build_config(sweep_flags), ranks);
            std::cout << "rank,accuracy\n";
            for (const auto& [rank, acc] : table)
                std::cout << rank << "," << roadtext::detail::fmt_g17(acc) << "\n";
            return 0;
        }
        if (sub_geocode->parsed()) {
            GeocodeCmdResult res = cmd_geocode(build_config(geocode_flags));
            std::cout << "messages: " << res.messages << "\nresolved: " << res.resolved
                      << "\nwrote: " << res.run_dir.string() << "\n";
            return 0;
        }
        if (sub_pipeline->parsed()) {
            PipelineResult res = cmd_pipeline(build_config(pipeline_flags));
            nlohmann::json j;
            j["run_dir"] = res.run_dir.string();
            j["tier1_accuracy"] = res.tier1.accuracy;
            for (const auto& [name, report] : res.tier2.reports)
                j["tier2_accuracy"][name] = report.accuracy;
            j["geocoded"] = res.geocoded;
            j["geo_resolved"] = res.geo_resolved;
            std::cout << j.dump(2) << "\n";
            return 0;
        }
    } catch (const roadtext::stage_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const roadtext::error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
