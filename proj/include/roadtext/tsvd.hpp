#pragma once

#include <string>

#include <Eigen/Dense>
#include <Eigen/QR>
#include <Eigen/SVD>
#include <nlohmann/json.hpp>

#include "roadtext/features.hpp"
#include "roadtext/util.hpp"

namespace roadtext {

/// Top-j singular triplets of a (tf-idf) matrix. `basis` holds the right
/// singular vectors (vocabulary x rank); rows project onto it.
struct TruncatedBasis {
    int rank = 0;
    Eigen::VectorXd singular_values;  // descending
    Eigen::MatrixXd basis;            // cols(M) x rank, orthonormal columns
    double explained = 0;             // captured fraction of Frobenius energy
    std::string vocabulary_hash;
};

enum class TsvdMethod { Auto, Dense, Randomized };

namespace detail {

inline Eigen::MatrixXd orthonormalize(const Eigen::MatrixXd& m) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
    return qr.householderQ() * Eigen::MatrixXd::Identity(m.rows(), m.cols());
}

inline TruncatedBasis tsvd_from_svd(const Eigen::VectorXd& sv, const Eigen::MatrixXd& v, int rank,
                                    double total_energy) {
    TruncatedBasis b;
    b.rank = rank;
    b.singular_values = sv.head(rank);
    b.basis = v.leftCols(rank);
    double kept = b.singular_values.squaredNorm();
    b.explained = total_energy > 0 ? kept / total_energy : 1.0;
    return b;
}

}  // namespace detail

/// Truncated SVD. Small matrices (both sides <= 500) take a dense path;
/// larger ones a seeded randomized range finder with oversampling and power
/// iterations, so the sparse block never materializes densely.
inline TruncatedBasis tsvd_fit(const SparseRowMatrix& m, int rank,
                               TsvdMethod method = TsvdMethod::Auto, std::uint64_t seed = 0,
                               int oversample = 10, int power_iters = 2) {
    const int rows = static_cast<int>(m.rows());
    const int cols = static_cast<int>(m.cols());
    if (rank < 1 || rank > std::min(rows, cols))
        throw error(detail::strf("tsvd_fit: rank %d out of range for %dx%d matrix", rank, rows,
                                 cols));
    const double total_energy = m.squaredNorm();
    if (method == TsvdMethod::Auto)
        method = (std::max(rows, cols) <= 500) ? TsvdMethod::Dense : TsvdMethod::Randomized;

    if (method == TsvdMethod::Dense) {
        Eigen::MatrixXd dense(m);
        Eigen::BDCSVD<Eigen::MatrixXd> svd(dense, Eigen::ComputeThinU | Eigen::ComputeThinV);
        return detail::tsvd_from_svd(svd.singularValues(), svd.matrixV(), rank, total_energy);
    }

    const int k = std::min(rank + oversample, std::min(rows, cols));
    detail::Rng rng(seed ^ 0x7d5df3a1u);
    Eigen::MatrixXd omega(cols, k);
    for (int j = 0; j < k; ++j)
        for (int i = 0; i < cols; ++i) omega(i, j) = rng.gaussian();

    Eigen::MatrixXd q = detail::orthonormalize(m * omega);
    for (int t = 0; t < power_iters; ++t) {
        Eigen::MatrixXd z = detail::orthonormalize(m.transpose() * q);
        q = detail::orthonormalize(m * z);
    }
    Eigen::MatrixXd small = (m.transpose() * q).transpose();  // k x cols
    Eigen::BDCSVD<Eigen::MatrixXd> svd(small, Eigen::ComputeThinU | Eigen::ComputeThinV);
    return detail::tsvd_from_svd(svd.singularValues(), svd.matrixV(), rank, total_energy);
}

/// Projects rows onto the fitted basis; the column count must match the
/// vocabulary the basis was fitted on.
inline Eigen::MatrixXd tsvd_project(const TruncatedBasis& basis, const SparseRowMatrix& rows) {
    if (rows.cols() != basis.basis.rows())
        throw error(detail::strf("tsvd_project: vocabulary mismatch (%d columns vs basis %d)",
                                 static_cast<int>(rows.cols()),
                                 static_cast<int>(basis.basis.rows())));
    return rows * basis.basis;
}

inline Eigen::MatrixXd tsvd_project(const TruncatedBasis& basis, const Eigen::MatrixXd& rows) {
    if (rows.cols() != basis.basis.rows()) throw error("tsvd_project: vocabulary mismatch");
    return rows * basis.basis;
}

// --- portable export: JSON header + CSVs ------------------------------------

inline void tsvd_save(const TruncatedBasis& b, const std::filesystem::path& dir,
                      const std::string& stem) {
    nlohmann::json header;
    header["rank"] = b.rank;
    header["vocabulary_hash"] = b.vocabulary_hash;
    header["explained"] = b.explained;
    header["dimension"] = static_cast<int>(b.basis.rows());
    detail::write_file(dir / (stem + ".json"), header.dump(2) + "\n");

    std::string sv;
    for (int i = 0; i < b.singular_values.size(); ++i)
        sv += detail::fmt_g17(b.singular_values(i)) + "\n";
    detail::write_file(dir / (stem + "_singular_values.csv"), sv);

    std::string basis;  // column-major: one line per basis column
    for (int j = 0; j < b.basis.cols(); ++j) {
        for (int i = 0; i < b.basis.rows(); ++i) {
            if (i) basis += ',';
            basis += detail::fmt_g17(b.basis(i, j));
        }
        basis += '\n';
    }
    detail::write_file(dir / (stem + "_basis.csv"), basis);
}

inline TruncatedBasis tsvd_load(const std::filesystem::path& dir, const std::string& stem) {
    TruncatedBasis b;
    auto header = nlohmann::json::parse(detail::read_file(dir / (stem + ".json")));
    b.rank = header.at("rank").get<int>();
    b.vocabulary_hash = header.at("vocabulary_hash").get<std::string>();
    b.explained = header.at("explained").get<double>();
    int dim = header.at("dimension").get<int>();

    auto sv_rows = detail::csv_parse(detail::read_file(dir / (stem + "_singular_values.csv")));
    b.singular_values.resize(static_cast<Eigen::Index>(sv_rows.size()));
    for (std::size_t i = 0; i < sv_rows.size(); ++i)
        b.singular_values(static_cast<Eigen::Index>(i)) = std::stod(sv_rows[i][0]);

    auto basis_rows = detail::csv_parse(detail::read_file(dir / (stem + "_basis.csv")));
    if (static_cast<int>(basis_rows.size()) != b.rank)
        throw error("tsvd_load: basis rank mismatch");
    b.basis.resize(dim, b.rank);
    for (int j = 0; j < b.rank; ++j) {
        if (static_cast<int>(basis_rows[static_cast<std::size_t>(j)].size()) != dim)
            throw error("tsvd_load: basis dimension mismatch");
        for (int i = 0; i < dim; ++i)
            b.basis(i, j) = std::stod(basis_rows[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)]);
    }
    return b;
}

}  // namespace roadtext
