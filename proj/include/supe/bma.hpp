#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "supe/data.hpp"
#include "supe/error.hpp"
#include "supe/inference.hpp"

namespace supe {

struct BmaResult {
    /// Posterior team weights nu^{(j)}, summing to one.
    Eigen::VectorXd weights;
    /// sum_{f,i} log w^{(j)}_{f,i}
    Eigen::VectorXd log_prior;
    /// sum_k -(Z_k - Y^{(j)})^2 / (2 var(Z_k))
    Eigen::VectorXd log_likelihood;
    /// Verification data used per team.
    std::vector<std::size_t> data_used;
    std::vector<std::string> warnings;
};

/// Posterior model weights with the SUPE-ANOVA weights as prior, computed
/// in log space and normalised after subtracting the maximum. A team absent
/// at a verification cell skips that datum; a team with a zero prior weight
/// somewhere gets nu = 0.
[[nodiscard]] inline BmaResult bma_weights(const ConsensusResult& result, const EnsembleDataset& data,
                                           const VerificationSet& verification) {
    if (result.factors.size() != data.factor_count()) {
        throw Error(ErrorCode::invalid_argument, "consensus result does not match the dataset");
    }
    const auto J = static_cast<Eigen::Index>(data.team_count());
    BmaResult out;
    out.log_prior = Eigen::VectorXd::Zero(J);
    out.log_likelihood = Eigen::VectorXd::Zero(J);
    out.data_used.assign(static_cast<std::size_t>(J), 0);
    for (const auto& fc : result.factors) {
        if (fc.weights.cols() != J) throw Error(ErrorCode::invalid_argument, "weight table has the wrong team count");
        for (Eigen::Index i = 0; i < fc.weights.rows(); ++i) {
            for (Eigen::Index j = 0; j < J; ++j) out.log_prior(j) += std::log(fc.weights(i, j));
        }
    }
    for (const auto& z : verification.observations()) {
        for (Eigen::Index j = 0; j < J; ++j) {
            const auto y = data.value(z.factor, z.replicate, static_cast<std::size_t>(j));
            if (!y) {
                out.warnings.push_back("team " + data.team(static_cast<std::size_t>(j)) + " absent at " +
                                       data.factor(z.factor).label() + " " +
                                       data.replicate(z.factor, z.replicate).label() + "; datum skipped");
                continue;
            }
            const double d = z.value - *y;
            out.log_likelihood(j) -= d * d / (2.0 * z.variance);
            ++out.data_used[static_cast<std::size_t>(j)];
        }
    }
    const Eigen::VectorXd log_post = out.log_prior + out.log_likelihood;
    const double top = log_post.maxCoeff();
    if (!std::isfinite(top)) throw Error(ErrorCode::invalid_argument, "every team has zero posterior weight");
    out.weights = (log_post.array() - top).exp();
    out.weights /= out.weights.sum();
    return out;
}

}  // namespace supe
