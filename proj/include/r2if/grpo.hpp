#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "r2if/domain.hpp"
#include "r2if/errors.hpp"

namespace r2if {

/// One sampled response inside a group, with its reward and the sequence
/// log-probabilities needed for the ratio (and optionally a reference
/// policy's log-probability for the KL penalty).
struct Rollout {
    std::string response_text;
    double reward = 0.0;
    double logprob_new = 0.0;
    double logprob_old = 0.0;
    std::optional<double> logprob_ref;
};

/// All rollouts drawn for one instance.
struct RolloutGroup {
    std::string instance_id;
    std::vector<Rollout> rollouts;

    std::vector<double> rewards() const {
        std::vector<double> r;
        r.reserve(rollouts.size());
        for (const auto& roll : rollouts) r.push_back(roll.reward);
        return r;
    }
};

inline double mean_of(const std::vector<double>& xs) {
    double sum = 0.0;
    for (const double x : xs) sum += x;
    return sum / static_cast<double>(xs.size());
}

/// Population standard deviation (divisor n, not n−1).
inline double population_stddev(const std::vector<double>& xs, double mu) {
    double sq = 0.0;
    for (const double x : xs) sq += (x - mu) * (x - mu);
    return std::sqrt(sq / static_cast<double>(xs.size()));
}

/// Within-group advantage normalization: Adv_i = (r_i − μ)/(σ + η) with
/// population μ, σ. η regularizes the degenerate all-equal group (σ=0) to
/// all-zero advantages; η=0 is accepted for exactness tests, where the
/// all-equal group is likewise defined as all zeros.
inline std::vector<double> group_normalize(const std::vector<double>& rewards, double eta) {
    if (rewards.size() < 2) {
        throw GroupTooSmallError("group normalization needs at least 2 rewards, got " +
                                 std::to_string(rewards.size()));
    }
    if (eta < 0.0) throw ConfigError("eta must be nonnegative");
    for (const double r : rewards) {
        if (!std::isfinite(r)) throw InvalidGroupError("non-finite reward in group");
    }
    const double mu = mean_of(rewards);
    const double sigma = population_stddev(rewards, mu);
    const double denom = sigma + eta;
    std::vector<double> adv;
    adv.reserve(rewards.size());
    for (const double r : rewards) {
        adv.push_back(denom == 0.0 ? 0.0 : (r - mu) / denom);
    }
    return adv;
}

/// Pessimistic clipped surrogate: min(ρ·A, clip(ρ, 1−ε, 1+ε)·A).
inline double clipped_term(double ratio, double adv, double epsilon) {
    const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
    return std::min(ratio * adv, clipped * adv);
}

/// Group objective: mean over rollouts of the clipped surrogate evaluated at
/// ρ_i = exp(logprob_new − logprob_old) and Adv_i from group_normalize,
/// minus kl_coef · mean(logprob_new − logprob_ref) when a KL penalty is
/// requested. Advantages are always recomputed from the stored rewards.
inline double grpo_objective(const RolloutGroup& group, const RewardConfig& cfg) {
    cfg.validate();
    const std::size_t n = group.rollouts.size();
    if (n < 2) {
        throw GroupTooSmallError("group " + group.instance_id + " has " + std::to_string(n) + " rollouts");
    }
    for (const auto& roll : group.rollouts) {
        if (!std::isfinite(roll.logprob_new) || !std::isfinite(roll.logprob_old)) {
            throw InvalidGroupError("non-finite log-probability in group " + group.instance_id);
        }
    }
    const std::vector<double> adv = group_normalize(group.rewards(), cfg.eta);

    double surrogate = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double ratio = std::exp(group.rollouts[i].logprob_new - group.rollouts[i].logprob_old);
        surrogate += clipped_term(ratio, adv[i], cfg.epsilon_clip);
    }
    double objective = surrogate / static_cast<double>(n);

    if (cfg.kl_coef > 0.0) {
        double kl = 0.0;
        for (const auto& roll : group.rollouts) {
            if (!roll.logprob_ref.has_value() || !std::isfinite(*roll.logprob_ref)) {
                throw InvalidGroupError("KL penalty requested but reference log-probability missing in group " +
                                        group.instance_id);
            }
            kl += roll.logprob_new - *roll.logprob_ref;
        }
        objective -= cfg.kl_coef * (kl / static_cast<double>(n));
    }
    return objective;
}

}  // namespace r2if
