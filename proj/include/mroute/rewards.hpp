#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mroute/answer_metrics.hpp"
#include "mroute/call_record.hpp"
#include "mroute/tag_protocol.hpp"

namespace mroute {

struct RewardConfig {
    double alpha = 0.0;
    std::size_t window_capacity = 1000;
    double epsilon = 1e-6;
    double percentile_lo = 5.0;
    double percentile_hi = 95.0;

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("reward config: alpha must be in [0,1]");
        if (window_capacity == 0) throw std::invalid_argument("reward config: window_capacity must be positive");
        if (!(epsilon > 0.0)) throw std::invalid_argument("reward config: epsilon must be > 0");
        if (!(percentile_lo >= 0.0 && percentile_lo < percentile_hi && percentile_hi <= 100.0))
            throw std::invalid_argument("reward config: need 0 <= percentile_lo < percentile_hi <= 100");
    }
};

inline void to_json(nlohmann::json& j, const RewardConfig& c) {
    j = nlohmann::json{{"alpha", c.alpha},
                       {"window_capacity", c.window_capacity},
                       {"epsilon", c.epsilon},
                       {"percentile_lo", c.percentile_lo},
                       {"percentile_hi", c.percentile_hi}};
}
inline void from_json(const nlohmann::json& j, RewardConfig& c) {
    RewardConfig d;
    c.alpha = j.value("alpha", d.alpha);
    c.window_capacity = j.value("window_capacity", d.window_capacity);
    c.epsilon = j.value("epsilon", d.epsilon);
    c.percentile_lo = j.value("percentile_lo", d.percentile_lo);
    c.percentile_hi = j.value("percentile_hi", d.percentile_hi);
}

/// Percentile of an ascending-sorted sample, linear interpolation between
/// closest ranks at rank q/100 * (n-1).
inline double percentile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw std::invalid_argument("percentile of empty sample");
    const double rank = q / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

/// Inverted, clipped normalization of `transformed` against the [lo, hi]
/// percentile band of `buffer` (which must already contain it).
inline double normalized_cost_reward(std::span<const double> buffer, double transformed, const RewardConfig& cfg) {
    std::vector<double> sorted(buffer.begin(), buffer.end());
    std::sort(sorted.begin(), sorted.end());
    const double r_min = percentile_sorted(sorted, cfg.percentile_lo);
    const double r_max = percentile_sorted(sorted, cfg.percentile_hi);
    if (r_max - r_min < cfg.epsilon) return 0.5;
    const double r_norm = (transformed - r_min) / (r_max - r_min);
    return 1.0 - std::clamp(r_norm, 0.0, 1.0);
}

/// Fixed-capacity ring of sqrt-transformed episode costs. Push and the
/// percentile read happen under one lock.
class CostWindow {
public:
    explicit CostWindow(std::size_t capacity = 1000) : capacity_(capacity) {
        if (capacity_ == 0) throw std::invalid_argument("cost window: capacity must be positive");
        values_.reserve(capacity_);
    }

    CostWindow(const CostWindow& other) {
        std::lock_guard lock(other.mu_);
        capacity_ = other.capacity_;
        values_ = other.values_;
        head_ = other.head_;
        inserted_ = other.inserted_;
    }

    CostWindow& operator=(const CostWindow& other) {
        if (this == &other) return *this;
        std::scoped_lock lock(mu_, other.mu_);
        capacity_ = other.capacity_;
        values_ = other.values_;
        head_ = other.head_;
        inserted_ = other.inserted_;
        return *this;
    }

    std::size_t capacity() const noexcept { return capacity_; }

    std::size_t size() const {
        std::lock_guard lock(mu_);
        return values_.size();
    }

    std::size_t inserted() const {
        std::lock_guard lock(mu_);
        return inserted_;
    }

    /// Contents, oldest first.
    std::vector<double> snapshot() const {
        std::lock_guard lock(mu_);
        return ordered_locked();
    }

    /// Push sqrt(raw) and return the inverted normalized reward for it.
    double push_and_score(double raw, const RewardConfig& cfg) {
        if (!(raw >= 0.0) || !std::isfinite(raw)) throw std::invalid_argument("cost_reward: raw cost must be finite and >= 0");
        const double transformed = std::sqrt(raw);
        std::lock_guard lock(mu_);
        push_locked(transformed);
        return normalized_cost_reward(values_, transformed, cfg);
    }

    /// Push a raw cost without scoring it (window warmup).
    void push_raw(double raw) {
        if (!(raw >= 0.0) || !std::isfinite(raw)) throw std::invalid_argument("cost window: raw cost must be finite and >= 0");
        std::lock_guard lock(mu_);
        push_locked(std::sqrt(raw));
    }

private:
    void push_locked(double v) {
        if (values_.size() < capacity_) {
            values_.push_back(v);
        } else {
            values_[head_] = v;
            head_ = (head_ + 1) % capacity_;
        }
        ++inserted_;
    }

    std::vector<double> ordered_locked() const {
        std::vector<double> out;
        out.reserve(values_.size());
        for (std::size_t i = 0; i < values_.size(); ++i) out.push_back(values_[(head_ + i) % values_.size()]);
        return out;
    }

    mutable std::mutex mu_;
    std::size_t capacity_ = 1000;
    std::vector<double> values_;
    std::size_t head_ = 0;  // oldest slot once full
    std::size_t inserted_ = 0;
};

/// Mutates `window`: the sample enters before the percentiles are read.
inline double cost_reward(CostWindow& window, double raw, const RewardConfig& cfg) {
    return window.push_and_score(raw, cfg);
}

inline int format_reward(const FormatVerdict& verdict) { return verdict.ok() ? 0 : -1; }

/// Sum of m(P) * T_out over the episode's calls.
inline double episode_cost_raw(std::span<const CallRecord> calls) {
    double total = 0.0;
    for (const auto& c : calls) total += c.cost_rate * static_cast<double>(c.output_tokens);
    return total;
}

/// Format gates everything: -1 nullifies outcome and cost.
inline double total_reward(int format, double outcome, double cost_norm, double alpha) {
    if (format != 0 && format != -1) throw std::invalid_argument("total_reward: format must be -1 or 0");
    if (outcome != 0.0 && outcome != 1.0) throw std::invalid_argument("total_reward: outcome must be 0 or 1");
    if (!(cost_norm >= 0.0 && cost_norm <= 1.0)) throw std::invalid_argument("total_reward: cost_norm must be in [0,1]");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("total_reward: alpha must be in [0,1]");
    if (format == -1) return -1.0;
    return (1.0 - alpha) * outcome + alpha * cost_norm;
}

struct RewardBreakdown {
    int format = 0;
    double outcome = 0.0;
    double cost_raw = 0.0;
    double cost_norm = 0.0;
    double alpha = 0.0;
    double total = 0.0;

    friend bool operator==(const RewardBreakdown&, const RewardBreakdown&) = default;
};

/// Assemble the breakdown; with format -1 the outcome and cost components
/// are reported as zero.
inline RewardBreakdown make_breakdown(int format, double outcome, double cost_raw, double cost_norm, double alpha) {
    RewardBreakdown r;
    r.format = format;
    r.alpha = alpha;
    r.cost_raw = cost_raw;
    r.total = total_reward(format, outcome, cost_norm, alpha);
    r.outcome = format == -1 ? 0.0 : outcome;
    r.cost_norm = format == -1 ? 0.0 : cost_norm;
    return r;
}

inline void to_json(nlohmann::json& j, const RewardBreakdown& r) {
    j = nlohmann::json{{"format", r.format},     {"outcome", r.outcome}, {"cost_raw", r.cost_raw},
                       {"cost_norm", r.cost_norm}, {"alpha", r.alpha},     {"total", r.total}};
}
inline void from_json(const nlohmann::json& j, RewardBreakdown& r) {
    j.at("format").get_to(r.format);
    j.at("outcome").get_to(r.outcome);
    j.at("cost_raw").get_to(r.cost_raw);
    j.at("cost_norm").get_to(r.cost_norm);
    j.at("alpha").get_to(r.alpha);
    j.at("total").get_to(r.total);
}

}  // namespace mroute
