#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roadtext/corpus.hpp"
#include "roadtext/util.hpp"

namespace roadtext {

/// Rows are actual classes, columns predicted.
struct ConfusionMatrix {
    std::vector<std::string> classes;
    std::vector<std::vector<long long>> counts;

    long long total() const {
        long long t = 0;
        for (const auto& row : counts)
            for (long long c : row) t += c;
        return t;
    }
    long long trace() const {
        long long t = 0;
        for (std::size_t i = 0; i < counts.size(); ++i) t += counts[i][i];
        return t;
    }
};

inline ConfusionMatrix confusion(const std::vector<std::string>& actual,
                                 const std::vector<std::string>& predicted,
                                 std::vector<std::string> class_order = {}) {
    if (actual.size() != predicted.size()) throw error("confusion: length mismatch");
    ConfusionMatrix cm;
    if (class_order.empty()) {
        std::set<std::string> names(actual.begin(), actual.end());
        names.insert(predicted.begin(), predicted.end());
        cm.classes.assign(names.begin(), names.end());
    } else {
        cm.classes = std::move(class_order);
    }
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < cm.classes.size(); ++i) index[cm.classes[i]] = i;
    cm.counts.assign(cm.classes.size(), std::vector<long long>(cm.classes.size(), 0));
    for (std::size_t i = 0; i < actual.size(); ++i) {
        auto a = index.find(actual[i]);
        auto p = index.find(predicted[i]);
        if (a == index.end() || p == index.end())
            throw error("confusion: label outside the given class order");
        ++cm.counts[a->second][p->second];
    }
    return cm;
}

inline std::string confusion_to_csv(const ConfusionMatrix& cm) {
    std::string out = "actual\\predicted";
    for (const auto& c : cm.classes) out += "," + detail::csv_escape(c);
    out += '\n';
    for (std::size_t i = 0; i < cm.classes.size(); ++i) {
        out += detail::csv_escape(cm.classes[i]);
        for (std::size_t j = 0; j < cm.classes.size(); ++j)
            out += "," + std::to_string(cm.counts[i][j]);
        out += '\n';
    }
    return out;
}

/// Percent metrics plus RMSE over 0/1 correctness. Undefined per-class
/// values (empty denominator) are reported as 0 and flagged; macro averages
/// include the flagged zeros.
struct MetricReport {
    std::vector<std::string> classes;
    double accuracy = 0;  // percent
    std::vector<double> precision;
    std::vector<double> recall;
    std::vector<bool> precision_undefined;
    std::vector<bool> recall_undefined;
    double macro_precision = 0;
    double macro_recall = 0;
    double rmse = 0;
    std::vector<long long> support;
    long long total = 0;
};

inline MetricReport metrics(const ConfusionMatrix& cm) {
    MetricReport r;
    r.classes = cm.classes;
    r.total = cm.total();
    if (r.total <= 0) throw error("metrics: empty confusion matrix");
    const std::size_t n = cm.classes.size();
    r.precision.resize(n);
    r.recall.resize(n);
    r.precision_undefined.resize(n);
    r.recall_undefined.resize(n);
    r.support.resize(n);

    long long trace = cm.trace();
    r.accuracy = 100.0 * static_cast<double>(trace) / static_cast<double>(r.total);
    // forecast/observation differences are -1, 0 or +1, so the RMSE reduces
    // to sqrt(misclassified / total)
    r.rmse = std::sqrt(static_cast<double>(r.total - trace) / static_cast<double>(r.total));

    for (std::size_t c = 0; c < n; ++c) {
        long long tp = cm.counts[c][c];
        long long actual = 0, predicted = 0;
        for (std::size_t j = 0; j < n; ++j) {
            actual += cm.counts[c][j];
            predicted += cm.counts[j][c];
        }
        r.support[c] = actual;
        if (predicted > 0) {
            r.precision[c] = 100.0 * static_cast<double>(tp) / static_cast<double>(predicted);
            r.precision_undefined[c] = false;
        } else {
            r.precision[c] = 0;
            r.precision_undefined[c] = true;
        }
        if (actual > 0) {
            r.recall[c] = 100.0 * static_cast<double>(tp) / static_cast<double>(actual);
            r.recall_undefined[c] = false;
        } else {
            r.recall[c] = 0;
            r.recall_undefined[c] = true;
        }
        r.macro_precision += r.precision[c];
        r.macro_recall += r.recall[c];
    }
    r.macro_precision /= static_cast<double>(n);
    r.macro_recall /= static_cast<double>(n);
    return r;
}

inline nlohmann::json metrics_to_json(const MetricReport& r) {
    nlohmann::json j;
    j["accuracy"] = r.accuracy;
    j["macro_precision"] = r.macro_precision;
    j["macro_recall"] = r.macro_recall;
    j["rmse"] = r.rmse;
    j["total"] = r.total;
    nlohmann::json per;
    for (std::size_t c = 0; c < r.classes.size(); ++c) {
        nlohmann::json e;
        e["precision"] = r.precision[c];
        e["recall"] = r.recall[c];
        e["support"] = r.support[c];
        if (r.precision_undefined[c]) e["precision_undefined"] = true;
        if (r.recall_undefined[c]) e["recall_undefined"] = true;
        per[r.classes[c]] = e;
    }
    j["per_class"] = per;
    return j;
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

struct WilcoxonResult {
    double statistic = 0;  // W = min(W+, W-)
    double w_plus = 0;
    double w_minus = 0;
    double p_value = 0;  // two-sided
    int n = 0;           // pairs remaining after dropping zero differences
    bool exact = false;
    bool significant_at_0p1 = false;
};

/// Paired two-sided test on the medians. Zero differences are dropped and
/// tied magnitudes get average ranks. n <= 15 uses the exact sign-pattern
/// distribution (computed by dynamic programming over doubled ranks);
/// larger n uses the normal approximation with tie and continuity
/// corrections.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                           const std::vector<double>& b) {
    if (a.size() != b.size()) throw error("wilcoxon_signed_rank: length mismatch");
    std::vector<double> diffs;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        if (d != 0.0) diffs.push_back(d);
    }
    if (diffs.empty()) throw error("wilcoxon_signed_rank: degenerate paired sample");
    if (diffs.size() < 5)
        throw error(detail::strf("wilcoxon_signed_rank: need >= 5 nonzero differences, got %zu",
                                 diffs.size()));

    const int n = static_cast<int>(diffs.size());
    std::vector<int> order(diffs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int x, int y) {
        return std::abs(diffs[static_cast<std::size_t>(x)]) <
               std::abs(diffs[static_cast<std::size_t>(y)]);
    });

    std::vector<double> rank(diffs.size());
    std::vector<std::size_t> tie_sizes;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        double v = std::abs(diffs[static_cast<std::size_t>(order[i])]);
        while (j < order.size() && std::abs(diffs[static_cast<std::size_t>(order[j])]) == v) ++j;
        double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t t = i; t < j; ++t) rank[static_cast<std::size_t>(order[t])] = avg;
        tie_sizes.push_back(j - i);
        i = j;
    }

    WilcoxonResult r;
    r.n = n;
    for (std::size_t i = 0; i < diffs.size(); ++i)
        (diffs[i] > 0 ? r.w_plus : r.w_minus) += rank[i];
    r.statistic = std::min(r.w_plus, r.w_minus);

    if (n <= 15) {
        r.exact = true;
        // doubled ranks are integers even with tie averaging
        std::vector<int> r2(diffs.size());
        long long w2_plus = 0;
        for (std::size_t i = 0; i < diffs.size(); ++i) {
            r2[i] = static_cast<int>(std::llround(2.0 * rank[i]));
            if (diffs[i] > 0) w2_plus += r2[i];
        }
        long long max2 = 0;
        for (int v : r2) max2 += v;
        std::vector<double> count(static_cast<std::size_t>(max2 + 1), 0.0);
        count[0] = 1.0;
        for (int v : r2)
            for (long long s = max2; s >= v; --s)
                count[static_cast<std::size_t>(s)] += count[static_cast<std::size_t>(s - v)];
        double denom = std::ldexp(1.0, n);  // 2^n sign patterns
        double p_le = 0, p_ge = 0;
        for (long long s = 0; s <= max2; ++s) {
            if (s <= w2_plus) p_le += count[static_cast<std::size_t>(s)];
            if (s >= w2_plus) p_ge += count[static_cast<std::size_t>(s)];
        }
        r.p_value = std::min(1.0, 2.0 * std::min(p_le, p_ge) / denom);
    } else {
        double mean = static_cast<double>(n) * (n + 1) / 4.0;
        double var = static_cast<double>(n) * (n + 1) * (2 * n + 1) / 24.0;
        for (std::size_t t : tie_sizes) {
            double tt = static_cast<double>(t);
            var -= (tt * tt * tt - tt) / 48.0;
        }
        if (var <= 0) throw error("wilcoxon_signed_rank: zero variance after tie correction");
        double diff = r.statistic - mean;
        double corr = diff < 0 ? 0.5 : (diff > 0 ? -0.5 : 0.0);
        double z = (diff + corr) / std::sqrt(var);
        r.p_value = std::min(1.0, 2.0 * detail::norm_cdf(-std::abs(z)));
    }
    r.significant_at_0p1 = r.p_value < 0.1;
    return r;
}

// ---------------------------------------------------------------------------
// Per-user-group accuracy
// ---------------------------------------------------------------------------

/// First matching pattern (case-insensitive substring of the user name)
/// wins; anything unmatched lands in "other".
struct GroupRule {
    std::string pattern;
    std::string group;
};

struct GroupStats {
    std::string group;
    long long total = 0;
    long long correct = 0;
    double accuracy = 0;  // percent
};

inline std::vector<GroupStats> user_group_report(const std::vector<Message>& messages,
                                                 const std::vector<std::string>& actual,
                                                 const std::vector<std::string>& predicted,
                                                 const std::vector<GroupRule>& rules) {
    if (messages.size() != actual.size() || actual.size() != predicted.size())
        throw error("user_group_report: length mismatch");
    std::vector<std::string> group_order;
    std::map<std::string, GroupStats> stats;
    auto touch = [&](const std::string& g) -> GroupStats& {
        auto it = stats.find(g);
        if (it == stats.end()) {
            group_order.push_back(g);
            it = stats.emplace(g, GroupStats{g, 0, 0, 0}).first;
        }
        return it->second;
    };
    for (const auto& rule : rules) touch(rule.group);
    touch("other");

    for (std::size_t i = 0; i < messages.size(); ++i) {
        std::string group = "other";
        for (const auto& rule : rules)
            if (detail::contains_ci(messages[i].user, rule.pattern)) {
                group = rule.group;
                break;
            }
        GroupStats& g = touch(group);
        ++g.total;
        if (actual[i] == predicted[i]) ++g.correct;
    }

    std::vector<GroupStats> out;
    for (const auto& name : group_order) {
        GroupStats g = stats[name];
        g.accuracy = g.total > 0 ? 100.0 * static_cast<double>(g.correct) /
                                       static_cast<double>(g.total)
                                 : 0.0;
        out.push_back(g);
    }
    return out;
}

inline std::string group_report_to_csv(const std::vector<GroupStats>& groups) {
    std::string out = "group,total,correct,accuracy\n";
    for (const auto& g : groups)
        out += detail::strf("%s,%lld,%lld,%s\n", detail::csv_escape(g.group).c_str(), g.total,
                            g.correct, detail::fmt_g17(g.accuracy).c_str());
    return out;
}

// ---------------------------------------------------------------------------
// Replicate bookkeeping
// ---------------------------------------------------------------------------

/// Accuracy per classifier over R replicate runs; entries at the same index
/// come from identical splits so the samples are paired.
struct ReplicateSet {
    std::vector<std::uint64_t> seeds;
    std::map<std::string, std::vector<double>> run_accuracies;
};

inline std::string replicates_to_csv(const ReplicateSet& set) {
    std::string out = "seed";
    for (const auto& [name, accs] : set.run_accuracies) out += "," + name;
    out += '\n';
    for (std::size_t r = 0; r < set.seeds.size(); ++r) {
        out += std::to_string(set.seeds[r]);
        for (const auto& [name, accs] : set.run_accuracies)
            out += "," + detail::fmt_g17(accs.at(r));
        out += '\n';
    }
    return out;
}

}  // namespace roadtext
