#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "supe/data.hpp"
#include "supe/error.hpp"

namespace supe {

/// Assigns every factor to a variance-sharing group. Parameters of factors
/// in the same group are stored once.
struct GroupBinding {
    std::vector<std::size_t> group_of_factor;
    std::vector<std::string> group_labels;

    [[nodiscard]] std::size_t group_count() const noexcept { return group_labels.size(); }
    [[nodiscard]] std::size_t factor_count() const noexcept { return group_of_factor.size(); }

    [[nodiscard]] std::vector<std::size_t> factors_in(std::size_t g) const {
        std::vector<std::size_t> out;
        for (std::size_t f = 0; f < group_of_factor.size(); ++f) {
            if (group_of_factor[f] == g) out.push_back(f);
        }
        return out;
    }

    /// One group per factor.
    [[nodiscard]] static GroupBinding per_factor(std::size_t factor_count) {
        GroupBinding b;
        for (std::size_t f = 0; f < factor_count; ++f) {
            b.group_of_factor.push_back(f);
            b.group_labels.push_back("factor" + std::to_string(f + 1));
        }
        return b;
    }

    [[nodiscard]] static GroupBinding single(std::size_t factor_count, std::string label = "all") {
        GroupBinding b;
        b.group_of_factor.assign(factor_count, 0);
        b.group_labels.push_back(std::move(label));
        return b;
    }

    void validate() const {
        if (group_labels.empty()) throw Error(ErrorCode::invalid_argument, "binding has no groups");
        std::vector<bool> used(group_labels.size(), false);
        for (auto g : group_of_factor) {
            if (g >= group_labels.size()) throw Error(ErrorCode::invalid_argument, "factor bound to unknown group");
            used[g] = true;
        }
        for (std::size_t g = 0; g < used.size(); ++g) {
            if (!used[g]) throw Error(ErrorCode::invalid_argument, "group " + group_labels[g] + " has no factors");
        }
    }
};

/// Second-moment parameters of one group: tau^2, team variances, the team
/// correlation matrix R (unit diagonal) and the penalty scale b.
struct GroupParameters {
    double tau2 = 0.0;
    Eigen::VectorXd sigma2;
    Eigen::MatrixXd correlation;
    double penalty_scale = 1.0;

    [[nodiscard]] static GroupParameters uncorrelated(double tau2, Eigen::VectorXd sigma2, double b = 1.0) {
        GroupParameters g;
        g.tau2 = tau2;
        g.correlation = Eigen::MatrixXd::Identity(sigma2.size(), sigma2.size());
        g.sigma2 = std::move(sigma2);
        g.penalty_scale = b;
        return g;
    }

    [[nodiscard]] bool correlated() const {
        for (Eigen::Index a = 0; a < correlation.rows(); ++a) {
            for (Eigen::Index b = 0; b < correlation.cols(); ++b) {
                if (a != b && correlation(a, b) != 0.0) return true;
            }
        }
        return false;
    }
};

struct ParameterSet {
    std::vector<GroupParameters> groups;
    GroupBinding binding;
    double penalty_shape = 8.48;

    [[nodiscard]] const GroupParameters& for_factor(std::size_t f) const {
        return groups.at(binding.group_of_factor.at(f));
    }

    [[nodiscard]] std::size_t team_count() const {
        return groups.empty() ? 0 : static_cast<std::size_t>(groups.front().sigma2.size());
    }

    [[nodiscard]] bool correlated() const {
        for (const auto& g : groups) {
            if (g.correlated()) return true;
        }
        return false;
    }

    /// Same tau^2 and team variances for every factor, one group per factor.
    [[nodiscard]] static ParameterSet homogeneous(std::size_t factor_count, double tau2, const Eigen::VectorXd& sigma2) {
        ParameterSet p;
        p.binding = GroupBinding::per_factor(factor_count);
        for (std::size_t f = 0; f < factor_count; ++f) p.groups.push_back(GroupParameters::uncorrelated(tau2, sigma2));
        return p;
    }

    /// Checks the invariants. `allow_zero_variance` admits sigma^2 = 0,
    /// which only the simulator uses.
    void validate(std::size_t team_count, bool allow_zero_variance = false) const {
        binding.validate();
        if (groups.size() != binding.group_count()) {
            throw Error(ErrorCode::invalid_argument, "parameter group count does not match binding");
        }
        if (!(penalty_shape > 0.0)) throw Error(ErrorCode::invalid_argument, "penalty shape must be > 0");
        for (std::size_t g = 0; g < groups.size(); ++g) {
            const auto& p = groups[g];
            const auto J = static_cast<Eigen::Index>(team_count);
            const std::string where = "group " + binding.group_labels[g] + ": ";
            if (p.sigma2.size() != J || p.correlation.rows() != J || p.correlation.cols() != J) {
                throw Error(ErrorCode::invalid_argument, where + "dimension mismatch with J=" + std::to_string(J));
            }
            if (!(p.tau2 >= 0.0) || !std::isfinite(p.tau2)) {
                throw Error(ErrorCode::invalid_argument, where + "tau^2 must be finite and >= 0");
            }
            for (Eigen::Index j = 0; j < J; ++j) {
                const double s = p.sigma2(j);
                if (!std::isfinite(s) || s < 0.0 || (s == 0.0 && !allow_zero_variance)) {
                    throw Error(ErrorCode::zero_variance, where + "team variance must be finite and > 0");
                }
            }
            if (!(p.penalty_scale > 0.0)) throw Error(ErrorCode::invalid_argument, where + "penalty scale must be > 0");
            for (Eigen::Index a = 0; a < J; ++a) {
                if (p.correlation(a, a) != 1.0) {
                    throw Error(ErrorCode::not_positive_definite, where + "correlation diagonal must be 1");
                }
                for (Eigen::Index b = 0; b < a; ++b) {
                    const double r = p.correlation(a, b);
                    if (r != p.correlation(b, a) || !(r > -1.0 && r < 1.0)) {
                        throw Error(ErrorCode::not_positive_definite,
                                    where + "correlations must be symmetric and in (-1, 1)");
                    }
                }
            }
            if (p.correlation.llt().info() != Eigen::Success) {
                throw Error(ErrorCode::not_positive_definite, where + "correlation matrix is not positive definite");
            }
        }
    }
};

/// B = tau^2 11' + D^{1/2} R D^{1/2}, restricted to the listed teams.
[[nodiscard]] inline Eigen::MatrixXd cell_covariance(const GroupParameters& p, std::span<const std::size_t> teams) {
    const auto n = static_cast<Eigen::Index>(teams.size());
    if (n == 0) throw Error(ErrorCode::invalid_argument, "cell covariance needs at least one team");
    Eigen::MatrixXd B(n, n);
    for (Eigen::Index a = 0; a < n; ++a) {
        const auto ja = static_cast<Eigen::Index>(teams[a]);
        for (Eigen::Index b = 0; b <= a; ++b) {
            const auto jb = static_cast<Eigen::Index>(teams[b]);
            const double team_part = a == b ? p.sigma2(ja)
                                            : p.correlation(ja, jb) * std::sqrt(p.sigma2(ja) * p.sigma2(jb));
            B(a, b) = B(b, a) = p.tau2 + team_part;
        }
    }
    return B;
}

[[nodiscard]] inline Eigen::MatrixXd cell_covariance(const ParameterSet& params, std::size_t f,
                                                     std::span<const std::size_t> teams) {
    return cell_covariance(params.for_factor(f), teams);
}

/// Cholesky factor of one SPD cell block. The only factorization used by
/// the library; explicit inverses are never formed.
class CellFactor {
public:
    [[nodiscard]] static std::optional<CellFactor> factorize(const Eigen::MatrixXd& B) {
        CellFactor c;
        c.llt_.compute(B);
        if (c.llt_.info() != Eigen::Success) return std::nullopt;
        const auto& L = c.llt_.matrixLLT();
        double logdet = 0.0;
        for (Eigen::Index k = 0; k < L.rows(); ++k) {
            const double d = L(k, k);
            if (!(d > 0.0) || !std::isfinite(d)) return std::nullopt;
            logdet += 2.0 * std::log(d);
        }
        c.log_det_ = logdet;
        return c;
    }

    template <class Rhs>
    [[nodiscard]] auto solve(const Eigen::MatrixBase<Rhs>& rhs) const {
        return llt_.solve(rhs);
    }

    [[nodiscard]] double log_det() const noexcept { return log_det_; }
    [[nodiscard]] Eigen::Index size() const noexcept { return llt_.rows(); }

private:
    Eigen::LLT<Eigen::MatrixXd> llt_;
    double log_det_ = 0.0;
};

struct BlockSolution {
    Eigen::MatrixXd solution;
    double log_det;
};

/// B^{-1} rhs via Cholesky, with log|B| as a by-product.
[[nodiscard]] inline BlockSolution solve_block(const Eigen::MatrixXd& B, const Eigen::MatrixXd& rhs) {
    if (B.rows() != B.cols() || B.rows() != rhs.rows()) {
        throw Error(ErrorCode::invalid_argument, "solve_block: dimension mismatch");
    }
    auto factor = CellFactor::factorize(B);
    if (!factor) throw Error(ErrorCode::not_positive_definite, "cell covariance is not positive definite");
    return {factor->solve(rhs), factor->log_det()};
}

/// One (f, i) block of the observation vector.
struct CellBlock {
    std::size_t factor;
    std::size_t replicate;
    /// Position of alpha_{f,i}; equals the dataset's cell index.
    std::size_t alpha_index;
    /// First row of this cell in Y.
    std::size_t row_offset;
    std::vector<std::size_t> teams;
};

/// Matrix-vector form Y = X mu + Z alpha + eta with X and Z in indicator
/// form: row r of X has its single one in column x_column[r], likewise Z.
/// Rows are ordered by (f, i, j) with absent teams dropped.
struct ModelStructure {
    std::vector<CellBlock> cells;
    /// [first, last) cell range of each factor.
    std::vector<std::pair<std::size_t, std::size_t>> factor_cells;
    Eigen::VectorXd y;
    std::vector<std::size_t> x_column;
    std::vector<std::size_t> z_column;
    std::vector<std::size_t> row_team;
    std::size_t factor_count = 0;
    std::size_t alpha_count = 0;

    [[nodiscard]] std::size_t observation_count() const noexcept { return static_cast<std::size_t>(y.size()); }

    [[nodiscard]] Eigen::VectorXd cell_values(const CellBlock& c) const {
        return y.segment(static_cast<Eigen::Index>(c.row_offset), static_cast<Eigen::Index>(c.teams.size()));
    }

    [[nodiscard]] Eigen::MatrixXd dense_x() const {
        Eigen::MatrixXd X = Eigen::MatrixXd::Zero(y.size(), static_cast<Eigen::Index>(factor_count));
        for (std::size_t r = 0; r < x_column.size(); ++r) X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(x_column[r])) = 1.0;
        return X;
    }

    [[nodiscard]] Eigen::MatrixXd dense_z() const {
        Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(y.size(), static_cast<Eigen::Index>(alpha_count));
        for (std::size_t r = 0; r < z_column.size(); ++r) Z(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(z_column[r])) = 1.0;
        return Z;
    }
};

[[nodiscard]] inline ModelStructure build_structure(const EnsembleDataset& data) {
    ModelStructure s;
    s.factor_count = data.factor_count();
    s.alpha_count = data.cell_count();
    std::vector<double> y;
    y.reserve(data.present_count());
    for (std::size_t f = 0; f < data.factor_count(); ++f) {
        const std::size_t first = s.cells.size();
        for (std::size_t i = 0; i < data.replicate_count(f); ++i) {
            CellBlock c{f, i, data.cell_index(f, i), y.size(), data.present_teams(f, i)};
            for (auto j : c.teams) {
                y.push_back(data.at(f, i, j));
                s.x_column.push_back(f);
                s.z_column.push_back(c.alpha_index);
                s.row_team.push_back(j);
            }
            s.cells.push_back(std::move(c));
        }
        s.factor_cells.emplace_back(first, s.cells.size());
    }
    s.y = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
    return s;
}

/// Sigma_alpha: diagonal with tau^2_f repeated for each replicate.
[[nodiscard]] inline Eigen::VectorXd alpha_variances(const ModelStructure& s, const ParameterSet& params) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(s.alpha_count));
    for (const auto& c : s.cells) v(static_cast<Eigen::Index>(c.alpha_index)) = params.for_factor(c.factor).tau2;
    return v;
}

/// Dense Sigma_Y = Z Sigma_alpha Z' + Sigma_eta. Only for small instances;
/// the per-cell blocks are the production route.
[[nodiscard]] inline Eigen::MatrixXd dense_sigma_y(const ModelStructure& s, const ParameterSet& params) {
    const Eigen::MatrixXd Z = s.dense_z();
    const Eigen::VectorXd sa = alpha_variances(s, params);
    Eigen::MatrixXd sigma_eta = Eigen::MatrixXd::Zero(s.y.size(), s.y.size());
    for (std::size_t r = 0; r < s.row_team.size(); ++r) {
        for (std::size_t q = 0; q < s.row_team.size(); ++q) {
            if (s.z_column[r] != s.z_column[q]) continue;
            const auto& p = params.for_factor(s.x_column[r]);
            const auto a = static_cast<Eigen::Index>(s.row_team[r]);
            const auto b = static_cast<Eigen::Index>(s.row_team[q]);
            sigma_eta(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(q)) =
                p.correlation(a, b) * std::sqrt(p.sigma2(a) * p.sigma2(b));
        }
    }
    return Z * sa.asDiagonal() * Z.transpose() + sigma_eta;
}

}  // namespace supe
