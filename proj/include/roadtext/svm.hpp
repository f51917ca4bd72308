#pragma once

#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "roadtext/pool.hpp"
#include "roadtext/util.hpp"

namespace roadtext {

enum class Kernel { Linear, Polynomial, Rbf };

inline const char* to_string(Kernel k) {
    switch (k) {
        case Kernel::Linear: return "linear";
        case Kernel::Polynomial: return "polynomial";
        case Kernel::Rbf: return "rbf";
    }
    return "?";
}

inline std::optional<Kernel> parse_kernel(std::string_view s) {
    std::string v = detail::to_lower(s);
    if (v == "linear") return Kernel::Linear;
    if (v == "polynomial" || v == "poly") return Kernel::Polynomial;
    if (v == "rbf" || v == "radial") return Kernel::Rbf;
    return std::nullopt;
}

// linear < polynomial < rbf, the tie-break order for grid search
inline int kernel_rank(Kernel k) { return static_cast<int>(k); }

struct SvmParams {
    Kernel kernel = Kernel::Linear;
    double C = 1.0;
    double gamma = 1.0;   // rbf and polynomial
    int degree = 2;       // polynomial
    double eps = 1e-3;    // KKT stopping tolerance
    long max_iter = 10'000'000;
};

inline double kernel_eval(const SvmParams& p, const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    switch (p.kernel) {
        case Kernel::Linear: return a.dot(b);
        case Kernel::Polynomial: return std::pow(p.gamma * a.dot(b) + 1.0, p.degree);
        case Kernel::Rbf: return std::exp(-p.gamma * (a - b).squaredNorm());
    }
    return 0;
}

/// One trained pairwise machine. Only support vectors are kept; linear
/// machines additionally carry the primal weight vector for O(d) decisions.
struct BinaryMachine {
    Eigen::MatrixXd support_vectors;  // one row per SV
    Eigen::VectorXd alpha;            // dual coefficients of the SVs, in (0, C]
    Eigen::VectorXd labels;           // +-1 per SV
    double bias = 0;
    Eigen::VectorXd w;                // linear kernel only
    double dual_objective = 0;        // e'a - a'Qa/2 at the solution
    long iterations = 0;
};

inline double decision_value(const BinaryMachine& m, const SvmParams& p,
                             const Eigen::VectorXd& x) {
    if (p.kernel == Kernel::Linear && m.w.size() == x.size()) return m.w.dot(x) + m.bias;
    double sum = m.bias;
    for (Eigen::Index i = 0; i < m.alpha.size(); ++i)
        sum += m.alpha(i) * m.labels(i) *
               kernel_eval(p, m.support_vectors.row(i).transpose(), x);
    return sum;
}

namespace detail {

// On-demand kernel row cache; problems at this scale fit whole.
class KernelCache {
  public:
    KernelCache(const Eigen::MatrixXd& X, const SvmParams& p) : X_(X), p_(p), rows_(X.rows()) {}

    const Eigen::VectorXd& row(Eigen::Index i) {
        auto& r = rows_[static_cast<std::size_t>(i)];
        if (r.size() == 0) {
            r.resize(X_.rows());
            for (Eigen::Index t = 0; t < X_.rows(); ++t)
                r(t) = kernel_eval(p_, X_.row(i).transpose(), X_.row(t).transpose());
        }
        return r;
    }

  private:
    const Eigen::MatrixXd& X_;
    const SvmParams& p_;
    std::vector<Eigen::VectorXd> rows_;
};

}  // namespace detail

/// Trains one binary machine by sequential minimal optimization with
/// second-order working-set selection: minimize a'Qa/2 - e'a subject to
/// 0 <= a <= C and y'a = 0. Pair updates keep the equality constraint exact;
/// ties in selection break to the lowest index, so runs are reproducible.
inline BinaryMachine svm_train_binary(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                      const SvmParams& params) {
    const Eigen::Index n = X.rows();
    if (n == 0) throw error("svm_train_binary: empty training set");
    if (y.size() != n) throw error("svm_train_binary: X/y size mismatch");
    bool has_pos = false, has_neg = false;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (y(i) == 1.0) has_pos = true;
        else if (y(i) == -1.0) has_neg = true;
        else throw error("svm_train_binary: labels must be +-1");
    }
    if (!has_pos || !has_neg) throw error("svm_train_binary: single-class input");
    const double C = params.C;
    if (!(C > 0)) throw error("svm_train_binary: C must be > 0");

    detail::KernelCache cache(X, params);
    Eigen::VectorXd qd(n);
    for (Eigen::Index i = 0; i < n; ++i)
        qd(i) = kernel_eval(params, X.row(i).transpose(), X.row(i).transpose());

    Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd grad = Eigen::VectorXd::Constant(n, -1.0);  // gradient of the dual objective
    constexpr double tau = 1e-12;

    long iter = 0;
    for (; iter < params.max_iter; ++iter) {
        // working-set selection
        double gmax = -std::numeric_limits<double>::infinity();
        double gmax2 = -std::numeric_limits<double>::infinity();
        Eigen::Index i = -1;
        for (Eigen::Index t = 0; t < n; ++t) {
            if ((y(t) > 0 && alpha(t) < C) || (y(t) < 0 && alpha(t) > 0)) {
                double v = -y(t) * grad(t);
                if (v > gmax) {
                    gmax = v;
                    i = t;
                }
            }
        }
        if (i < 0) break;
        const Eigen::VectorXd& ki = cache.row(i);
        Eigen::Index j = -1;
        double obj_min = std::numeric_limits<double>::infinity();
        for (Eigen::Index t = 0; t < n; ++t) {
            if ((y(t) > 0 && alpha(t) > 0) || (y(t) < 0 && alpha(t) < C)) {
                double ytgt = y(t) * grad(t);
                if (ytgt > gmax2) gmax2 = ytgt;
                double grad_diff = gmax + ytgt;
                if (grad_diff > 0) {
                    double quad = qd(i) + qd(t) - 2.0 * y(i) * y(t) * ki(t);
                    if (quad <= 0) quad = tau;
                    double obj = -(grad_diff * grad_diff) / quad;
                    if (obj < obj_min) {
                        obj_min = obj;
                        j = t;
                    }
                }
            }
        }
        if (gmax + gmax2 < params.eps || j < 0) break;

        const Eigen::VectorXd& kj = cache.row(j);
        double old_ai = alpha(i), old_aj = alpha(j);
        if (y(i) != y(j)) {
            double quad = qd(i) + qd(j) + 2.0 * ki(j);
            if (quad <= 0) quad = tau;
            double delta = (-grad(i) - grad(j)) / quad;
            double diff = alpha(i) - alpha(j);
            alpha(i) += delta;
            alpha(j) += delta;
            if (diff > 0) {
                if (alpha(j) < 0) {
                    alpha(j) = 0;
                    alpha(i) = diff;
                }
            } else {
                if (alpha(i) < 0) {
                    alpha(i) = 0;
                    alpha(j) = -diff;
                }
            }
            if (diff > 0) {
                if (alpha(i) > C) {
                    alpha(i) = C;
                    alpha(j) = C - diff;
                }
            } else {
                if (alpha(j) > C) {
                    alpha(j) = C;
                    alpha(i) = C + diff;
                }
            }
        } else {
            double quad = qd(i) + qd(j) - 2.0 * ki(j);
            if (quad <= 0) quad = tau;
            double delta = (grad(i) - grad(j)) / quad;
            double sum = alpha(i) + alpha(j);
            alpha(i) -= delta;
            alpha(j) += delta;
            if (sum > C) {
                if (alpha(i) > C) {
                    alpha(i) = C;
                    alpha(j) = sum - C;
                }
            } else {
                if (alpha(j) < 0) {
                    alpha(j) = 0;
                    alpha(i) = sum;
                }
            }
            if (sum > C) {
                if (alpha(j) > C) {
                    alpha(j) = C;
                    alpha(i) = sum - C;
                }
            } else {
                if (alpha(i) < 0) {
                    alpha(i) = 0;
                    alpha(j) = sum;
                }
            }
        }
        double dai = alpha(i) - old_ai, daj = alpha(j) - old_aj;
        if (dai == 0.0 && daj == 0.0) break;  // numerically stuck
        for (Eigen::Index t = 0; t < n; ++t)
            grad(t) += y(t) * (y(i) * ki(t) * dai + y(j) * kj(t) * daj);
    }

    // bias from the KKT conditions: average y*G over free vectors, else the
    // feasible midpoint
    double ub = std::numeric_limits<double>::infinity();
    double lb = -std::numeric_limits<double>::infinity();
    double sum_free = 0;
    int n_free = 0;
    for (Eigen::Index t = 0; t < n; ++t) {
        double yg = y(t) * grad(t);
        if (alpha(t) >= C) {
            if (y(t) < 0) ub = std::min(ub, yg);
            else lb = std::max(lb, yg);
        } else if (alpha(t) <= 0) {
            if (y(t) > 0) ub = std::min(ub, yg);
            else lb = std::max(lb, yg);
        } else {
            ++n_free;
            sum_free += yg;
        }
    }
    double rho = n_free > 0 ? sum_free / n_free : (ub + lb) / 2.0;

    BinaryMachine machine;
    machine.bias = -rho;
    machine.iterations = iter;
    // dual objective: e'a - a'Qa/2 = -(sum of a_i * (G_i + p_i)) / 2 with p = -e
    double obj = 0;
    for (Eigen::Index t = 0; t < n; ++t) obj += alpha(t) * (grad(t) - 1.0);
    machine.dual_objective = -obj / 2.0;

    std::vector<Eigen::Index> sv;
    for (Eigen::Index t = 0; t < n; ++t)
        if (alpha(t) > 0) sv.push_back(t);
    machine.support_vectors.resize(static_cast<Eigen::Index>(sv.size()), X.cols());
    machine.alpha.resize(static_cast<Eigen::Index>(sv.size()));
    machine.labels.resize(static_cast<Eigen::Index>(sv.size()));
    for (std::size_t k = 0; k < sv.size(); ++k) {
        machine.support_vectors.row(static_cast<Eigen::Index>(k)) = X.row(sv[k]);
        machine.alpha(static_cast<Eigen::Index>(k)) = alpha(sv[k]);
        machine.labels(static_cast<Eigen::Index>(k)) = y(sv[k]);
    }
    if (params.kernel == Kernel::Linear) {
        machine.w = Eigen::VectorXd::Zero(X.cols());
        for (std::size_t k = 0; k < sv.size(); ++k)
            machine.w += machine.alpha(static_cast<Eigen::Index>(k)) *
                         machine.labels(static_cast<Eigen::Index>(k)) *
                         machine.support_vectors.row(static_cast<Eigen::Index>(k)).transpose();
    }
    return machine;
}

/// One-vs-one multiclass model: n(n-1)/2 pairwise machines over an ordered
/// class list.
struct SvmModel {
    SvmParams params;
    std::vector<std::string> classes;
    std::vector<std::pair<int, int>> pairs;  // (first-class index, second-class index)
    std::vector<BinaryMachine> machines;
    Eigen::Index dimension = 0;
    std::string vocabulary_hash;
};

inline SvmModel svm_train(const Eigen::MatrixXd& X, const std::vector<std::string>& labels,
                          const SvmParams& params, std::size_t workers = 1) {
    if (static_cast<std::size_t>(X.rows()) != labels.size())
        throw error("svm_train: X/labels size mismatch");
    SvmModel model;
    model.params = params;
    model.dimension = X.cols();
    std::map<std::string, std::vector<Eigen::Index>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i)
        by_class[labels[i]].push_back(static_cast<Eigen::Index>(i));
    for (const auto& [name, rows] : by_class) model.classes.push_back(name);
    if (model.classes.size() < 2) throw error("svm_train: need at least 2 classes");

    const int nc = static_cast<int>(model.classes.size());
    for (int a = 0; a < nc; ++a)
        for (int b = a + 1; b < nc; ++b) model.pairs.emplace_back(a, b);

    model.machines = parallel_map<BinaryMachine>(
        model.pairs.size(), workers, [&](std::size_t k) {
            auto [a, b] = model.pairs[k];
            const auto& ra = by_class.at(model.classes[static_cast<std::size_t>(a)]);
            const auto& rb = by_class.at(model.classes[static_cast<std::size_t>(b)]);
            Eigen::MatrixXd Xp(static_cast<Eigen::Index>(ra.size() + rb.size()), X.cols());
            Eigen::VectorXd yp(Xp.rows());
            Eigen::Index r = 0;
            for (auto i : ra) {
                Xp.row(r) = X.row(i);
                yp(r++) = 1.0;
            }
            for (auto i : rb) {
                Xp.row(r) = X.row(i);
                yp(r++) = -1.0;
            }
            return svm_train_binary(Xp, yp, params);
        });
    return model;
}

/// Majority vote over the pairwise machines. Vote ties break by the larger
/// sum of signed decision values over the tied classes, then by class order.
inline std::vector<std::string> svm_predict(const SvmModel& model, const Eigen::MatrixXd& X) {
    if (X.cols() != model.dimension)
        throw error(detail::strf("svm_predict: dimension mismatch (%d vs model %d)",
                                 static_cast<int>(X.cols()), static_cast<int>(model.dimension)));
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(X.rows()));
    const std::size_t nc = model.classes.size();
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
        std::vector<int> votes(nc, 0);
        std::vector<double> score(nc, 0.0);
        for (std::size_t k = 0; k < model.pairs.size(); ++k) {
            auto [a, b] = model.pairs[k];
            double d = decision_value(model.machines[k], model.params, X.row(r).transpose());
            if (d >= 0) ++votes[static_cast<std::size_t>(a)];
            else ++votes[static_cast<std::size_t>(b)];
            score[static_cast<std::size_t>(a)] += d;
            score[static_cast<std::size_t>(b)] -= d;
        }
        std::size_t best = 0;
        for (std::size_t c = 1; c < nc; ++c) {
            if (votes[c] > votes[best] ||
                (votes[c] == votes[best] && score[c] > score[best]))
                best = c;
        }
        out.push_back(model.classes[best]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

struct GridSpec {
    std::vector<Kernel> kernels = {Kernel::Linear, Kernel::Rbf};
    std::vector<double> C_values = {0.5, 1.0, 10.0};
    std::vector<double> gamma_values = {0.5, 1.0};
    int degree = 2;
};

struct GridResult {
    SvmParams best;
    double best_accuracy = 0;
    std::vector<std::pair<SvmParams, double>> cells;  // (config, mean fold accuracy)
};

namespace detail {

// Seeded stratified fold assignment; every class must fill each fold.
inline std::vector<int> stratified_folds(const std::vector<std::string>& labels, int k,
                                         std::uint64_t seed) {
    std::map<std::string, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    std::vector<int> fold(labels.size(), -1);
    for (auto& [name, members] : by_class) {
        if (static_cast<int>(members.size()) < k)
            throw error("grid_search: class '" + name + "' has fewer members than folds");
        Rng rng(seed ^ fnv1a64(name));
        rng.shuffle(members);
        for (std::size_t i = 0; i < members.size(); ++i)
            fold[members[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
    }
    return fold;
}

}  // namespace detail

/// Exhaustive kernel/C/gamma search by stratified k-fold cross-validation.
/// Cells run as independent tasks; accuracy ties prefer smaller C, then
/// smaller gamma, then the simpler kernel.
inline GridResult grid_search(const Eigen::MatrixXd& X, const std::vector<std::string>& labels,
                              const GridSpec& grid, int folds, std::uint64_t seed = 0,
                              std::size_t workers = 1) {
    if (folds < 2) throw error("grid_search: need k >= 2 folds");
    if (grid.kernels.empty() || grid.C_values.empty() || grid.gamma_values.empty())
        throw error("grid_search: empty grid");
    std::vector<int> fold = detail::stratified_folds(labels, folds, seed);

    std::vector<SvmParams> cells;
    for (Kernel k : grid.kernels)
        for (double C : grid.C_values)
            for (double gamma : grid.gamma_values) {
                SvmParams p;
                p.kernel = k;
                p.C = C;
                p.gamma = gamma;
                p.degree = grid.degree;
                cells.push_back(p);
            }

    std::vector<double> accuracy = parallel_map<double>(cells.size(), workers, [&](std::size_t c) {
        const SvmParams& p = cells[c];
        double acc_sum = 0;
        for (int f = 0; f < folds; ++f) {
            std::vector<Eigen::Index> tr, va;
            for (std::size_t i = 0; i < labels.size(); ++i)
                (fold[i] == f ? va : tr).push_back(static_cast<Eigen::Index>(i));
            Eigen::MatrixXd Xtr(static_cast<Eigen::Index>(tr.size()), X.cols());
            std::vector<std::string> ltr(tr.size());
            for (std::size_t i = 0; i < tr.size(); ++i) {
                Xtr.row(static_cast<Eigen::Index>(i)) = X.row(tr[i]);
                ltr[i] = labels[static_cast<std::size_t>(tr[i])];
            }
            Eigen::MatrixXd Xva(static_cast<Eigen::Index>(va.size()), X.cols());
            for (std::size_t i = 0; i < va.size(); ++i)
                Xva.row(static_cast<Eigen::Index>(i)) = X.row(va[i]);
            SvmModel m = svm_train(Xtr, ltr, p);
            std::vector<std::string> pred = svm_predict(m, Xva);
            std::size_t hits = 0;
            for (std::size_t i = 0; i < va.size(); ++i)
                if (pred[i] == labels[static_cast<std::size_t>(va[i])]) ++hits;
            acc_sum += va.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(va.size());
        }
        return acc_sum / folds;
    });

    GridResult result;
    double best_acc = -1;
    for (std::size_t c = 0; c < cells.size(); ++c) {
        result.cells.emplace_back(cells[c], accuracy[c]);
        const SvmParams& p = cells[c];
        const SvmParams& q = result.best;
        bool better = false;
        if (accuracy[c] > best_acc) {
            better = true;
        } else if (accuracy[c] == best_acc) {
            if (p.C != q.C) better = p.C < q.C;
            else if (p.gamma != q.gamma) better = p.gamma < q.gamma;
            else better = kernel_rank(p.kernel) < kernel_rank(q.kernel);
        }
        if (better) {
            best_acc = accuracy[c];
            result.best = p;
        }
    }
    result.best_accuracy = best_acc;
    return result;
}

// ---------------------------------------------------------------------------
// Serialization: JSON header + CSV coefficient blocks
// ---------------------------------------------------------------------------

inline void svm_save(const SvmModel& model, const std::filesystem::path& dir,
                     const std::string& stem) {
    nlohmann::json header;
    header["kernel"] = to_string(model.params.kernel);
    header["C"] = model.params.C;
    header["gamma"] = model.params.gamma;
    header["degree"] = model.params.degree;
    header["classes"] = model.classes;
    header["dimension"] = static_cast<int>(model.dimension);
    header["vocabulary_hash"] = model.vocabulary_hash;
    header["machines"] = static_cast<int>(model.machines.size());
    detail::write_file(dir / (stem + ".json"), header.dump(2) + "\n");

    std::string csv;
    for (std::size_t k = 0; k < model.machines.size(); ++k) {
        const BinaryMachine& m = model.machines[k];
        csv += detail::strf("%zu,bias,%s\n", k, detail::fmt_g17(m.bias).c_str());
        if (m.w.size() > 0) {
            csv += detail::strf("%zu,w", k);
            for (Eigen::Index i = 0; i < m.w.size(); ++i) csv += "," + detail::fmt_g17(m.w(i));
            csv += '\n';
        }
        for (Eigen::Index s = 0; s < m.alpha.size(); ++s) {
            csv += detail::strf("%zu,sv,%s,%s", k, detail::fmt_g17(m.alpha(s)).c_str(),
                                detail::fmt_g17(m.labels(s)).c_str());
            for (Eigen::Index i = 0; i < m.support_vectors.cols(); ++i)
                csv += "," + detail::fmt_g17(m.support_vectors(s, i));
            csv += '\n';
        }
    }
    detail::write_file(dir / (stem + ".csv"), csv);
}

inline SvmModel svm_load(const std::filesystem::path& dir, const std::string& stem) {
    SvmModel model;
    auto header = nlohmann::json::parse(detail::read_file(dir / (stem + ".json")));
    auto kernel = parse_kernel(header.at("kernel").get<std::string>());
    if (!kernel) throw error("svm_load: unknown kernel");
    model.params.kernel = *kernel;
    model.params.C = header.at("C").get<double>();
    model.params.gamma = header.at("gamma").get<double>();
    model.params.degree = header.at("degree").get<int>();
    model.classes = header.at("classes").get<std::vector<std::string>>();
    model.dimension = header.at("dimension").get<int>();
    model.vocabulary_hash = header.value("vocabulary_hash", std::string());
    const int nc = static_cast<int>(model.classes.size());
    for (int a = 0; a < nc; ++a)
        for (int b = a + 1; b < nc; ++b) model.pairs.emplace_back(a, b);
    model.machines.resize(model.pairs.size());

    struct Row {
        double alpha, label;
        std::vector<double> x;
    };
    std::vector<std::vector<Row>> svs(model.pairs.size());
    for (const auto& row : detail::csv_parse(detail::read_file(dir / (stem + ".csv")))) {
        if (row.size() < 3) continue;
        std::size_t k = static_cast<std::size_t>(std::stoul(row[0]));
        if (k >= model.machines.size()) throw error("svm_load: machine index out of range");
        BinaryMachine& m = model.machines[k];
        if (row[1] == "bias") {
            m.bias = std::stod(row[2]);
        } else if (row[1] == "w") {
            m.w.resize(static_cast<Eigen::Index>(row.size() - 2));
            for (std::size_t i = 2; i < row.size(); ++i)
                m.w(static_cast<Eigen::Index>(i - 2)) = std::stod(row[i]);
        } else if (row[1] == "sv") {
            Row r;
            r.alpha = std::stod(row[2]);
            r.label = std::stod(row[3]);
            for (std::size_t i = 4; i < row.size(); ++i) r.x.push_back(std::stod(row[i]));
            svs[k].push_back(std::move(r));
        }
    }
    for (std::size_t k = 0; k < svs.size(); ++k) {
        BinaryMachine& m = model.machines[k];
        m.support_vectors.resize(static_cast<Eigen::Index>(svs[k].size()), model.dimension);
        m.alpha.resize(static_cast<Eigen::Index>(svs[k].size()));
        m.labels.resize(static_cast<Eigen::Index>(svs[k].size()));
        for (std::size_t s = 0; s < svs[k].size(); ++s) {
            const Row& r = svs[k][s];
            if (static_cast<Eigen::Index>(r.x.size()) != model.dimension)
                throw error("svm_load: support vector dimension mismatch");
            m.alpha(static_cast<Eigen::Index>(s)) = r.alpha;
            m.labels(static_cast<Eigen::Index>(s)) = r.label;
            for (std::size_t i = 0; i < r.x.size(); ++i)
                m.support_vectors(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(i)) = r.x[i];
        }
    }
    return model;
}

}  // namespace roadtext
