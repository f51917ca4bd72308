#pragma once

#include <vector>

#include <Eigen/Dense>

#include "roadtext/util.hpp"

namespace roadtext {

/// L1-regularized least squares, used as a sparse feature selector.
struct LassoModel {
    Eigen::VectorXd weights;
    double intercept = 0;
    double lambda = 0;
    std::vector<int> selected;  // columns with nonzero weight
};

namespace detail {

inline double soft_threshold(double x, double t) {
    if (x > t) return x - t;
    if (x < -t) return x + t;
    return 0.0;
}

inline double lasso_objective(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                              const Eigen::VectorXd& w, double b, double lambda) {
    double n = static_cast<double>(X.rows());
    Eigen::VectorXd r = y - X * w;
    r.array() -= b;
    return r.squaredNorm() / (2.0 * n) + lambda * w.lpNorm<1>();
}

}  // namespace detail

/// Largest lambda with a nonzero solution: max_j |X_j' (y - mean(y))| / n.
inline double lasso_lambda_max(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
    double n = static_cast<double>(X.rows());
    Eigen::VectorXd centered = y.array() - y.mean();
    return (X.transpose() * centered).cwiseAbs().maxCoeff() / n;
}

/// Cyclic coordinate descent on (1/2n)||y - b - Xw||^2 + lambda * ||w||_1,
/// iterated until the objective stops moving by more than `tol`.
inline LassoModel lasso_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda,
                            double tol = 1e-8, int max_sweeps = 100000) {
    if (X.rows() == 0 || X.cols() == 0) throw error("lasso_fit: empty design matrix");
    if (X.rows() != y.size()) throw error("lasso_fit: X/y size mismatch");
    if (lambda < 0) throw error("lasso_fit: lambda must be >= 0");

    const auto n = static_cast<double>(X.rows());
    const Eigen::Index d = X.cols();
    Eigen::VectorXd colsq(d);
    for (Eigen::Index j = 0; j < d; ++j) colsq(j) = X.col(j).squaredNorm() / n;

    LassoModel model;
    model.lambda = lambda;
    model.weights = Eigen::VectorXd::Zero(d);
    model.intercept = y.mean();
    Eigen::VectorXd residual = y.array() - model.intercept;  // y - b - Xw

    double prev_obj = detail::lasso_objective(X, y, model.weights, model.intercept, lambda);
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        for (Eigen::Index j = 0; j < d; ++j) {
            if (colsq(j) == 0.0) continue;
            double rho = X.col(j).dot(residual) / n + colsq(j) * model.weights(j);
            double w_new = detail::soft_threshold(rho, lambda) / colsq(j);
            double delta = w_new - model.weights(j);
            if (delta != 0.0) {
                residual -= delta * X.col(j);
                model.weights(j) = w_new;
            }
        }
        double b_shift = residual.mean();
        if (b_shift != 0.0) {
            model.intercept += b_shift;
            residual.array() -= b_shift;
        }
        double obj = detail::lasso_objective(X, y, model.weights, model.intercept, lambda);
        if (prev_obj - obj < tol && sweep > 0) break;
        prev_obj = obj;
    }

    for (Eigen::Index j = 0; j < d; ++j)
        if (model.weights(j) != 0.0) model.selected.push_back(static_cast<int>(j));
    return model;
}

struct LassoCvResult {
    double best_lambda = 0;
    std::vector<std::pair<double, double>> grid;  // (lambda, mean validation MSE)
};

/// k-fold cross-validation over a logarithmic lambda grid; ties prefer the
/// larger (sparser) lambda. Folds come from a seeded shuffle.
inline LassoCvResult lasso_cv_lambda(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                     int folds = 5, std::uint64_t seed = 0,
                                     double lambda_lo = 1e-4, double lambda_hi = 1.0,
                                     int grid_size = 13) {
    const auto n = X.rows();
    if (n < folds) throw error("lasso_cv_lambda: fewer rows than folds");
    std::vector<std::size_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    detail::Rng rng(seed);
    rng.shuffle(idx);

    std::vector<double> lambdas(static_cast<std::size_t>(grid_size));
    for (int g = 0; g < grid_size; ++g) {
        double t = grid_size == 1 ? 0.0 : static_cast<double>(g) / (grid_size - 1);
        lambdas[static_cast<std::size_t>(g)] =
            std::exp(std::log(lambda_lo) + t * (std::log(lambda_hi) - std::log(lambda_lo)));
    }

    LassoCvResult result;
    double best_mse = std::numeric_limits<double>::infinity();
    for (double lambda : lambdas) {
        double mse_sum = 0;
        for (int f = 0; f < folds; ++f) {
            std::size_t lo = static_cast<std::size_t>(f) * idx.size() / static_cast<std::size_t>(folds);
            std::size_t hi = static_cast<std::size_t>(f + 1) * idx.size() / static_cast<std::size_t>(folds);
            std::vector<std::size_t> val(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                                         idx.begin() + static_cast<std::ptrdiff_t>(hi));
            std::vector<std::size_t> tr;
            tr.reserve(idx.size() - val.size());
            tr.insert(tr.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(lo));
            tr.insert(tr.end(), idx.begin() + static_cast<std::ptrdiff_t>(hi), idx.end());
            Eigen::MatrixXd Xtr(tr.size(), X.cols());
            Eigen::VectorXd ytr(tr.size());
            for (std::size_t i = 0; i < tr.size(); ++i) {
                Xtr.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(tr[i]));
                ytr(static_cast<Eigen::Index>(i)) = y(static_cast<Eigen::Index>(tr[i]));
            }
            LassoModel m = lasso_fit(Xtr, ytr, lambda);
            double se = 0;
            for (std::size_t i = 0; i < val.size(); ++i) {
                Eigen::Index r = static_cast<Eigen::Index>(val[i]);
                double pred = X.row(r).dot(m.weights) + m.intercept;
                se += (pred - y(r)) * (pred - y(r));
            }
            mse_sum += se / static_cast<double>(val.size());
        }
        double mse = mse_sum / folds;
        result.grid.emplace_back(lambda, mse);
        if (mse < best_mse - 1e-12 || (std::abs(mse - best_mse) <= 1e-12 && lambda > result.best_lambda)) {
            best_mse = mse;
            result.best_lambda = lambda;
        }
    }
    return result;
}

/// Keeps only the listed columns, in order.
inline Eigen::MatrixXd select_columns(const Eigen::MatrixXd& X, const std::vector<int>& cols) {
    Eigen::MatrixXd out(X.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = X.col(cols[k]);
    return out;
}

}  // namespace roadtext
