#pragma once

#include <algorithm>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mroute/text.hpp"

namespace mroute {

namespace detail {

inline bool is_ascii_punct(char c) noexcept {
    return (c >= '!' && c <= '/') || (c >= ':' && c <= '@') || (c >= '[' && c <= '`') ||
           (c >= '{' && c <= '~');
}

inline void require_golds(std::span<const std::string> golds, const char* who) {
    if (golds.empty()) throw std::invalid_argument(std::string(who) + ": gold answer list is empty");
}

}  // namespace detail

/// QA answer normalization: lowercase, strip ASCII punctuation, drop the
/// articles a/an/the, collapse whitespace.
inline std::string normalize_answer(std::string_view answer) {
    std::string lowered = text::to_lower_ascii(answer);
    std::string no_punct;
    no_punct.reserve(lowered.size());
    for (char c : lowered) {
        if (!detail::is_ascii_punct(c)) no_punct.push_back(c);
    }
    std::string out;
    for (auto token : text::split_ws(no_punct)) {
        if (token == "a" || token == "an" || token == "the") continue;
        if (!out.empty()) out.push_back(' ');
        out.append(token);
    }
    return out;
}

/// 1 if the normalized prediction equals any normalized gold, else 0.
inline int exact_match(std::string_view prediction, std::span<const std::string> golds) {
    detail::require_golds(golds, "exact_match");
    const std::string pred = normalize_answer(prediction);
    return std::any_of(golds.begin(), golds.end(),
                       [&](const std::string& g) { return normalize_answer(g) == pred; })
               ? 1
               : 0;
}

inline double token_f1(std::string_view normalized_prediction, std::string_view normalized_gold) {
    auto pred = text::split_ws(normalized_prediction);
    auto gold = text::split_ws(normalized_gold);
    if (pred.empty() && gold.empty()) return 1.0;
    if (pred.empty() || gold.empty()) return 0.0;

    std::unordered_map<std::string_view, int> gold_counts;
    for (auto t : gold) ++gold_counts[t];
    int overlap = 0;
    for (auto t : pred) {
        auto it = gold_counts.find(t);
        if (it != gold_counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    const double precision = static_cast<double>(overlap) / static_cast<double>(pred.size());
    const double recall = static_cast<double>(overlap) / static_cast<double>(gold.size());
    return 2.0 * precision * recall / (precision + recall);
}

/// Token-level F1, maximized over the gold list.
inline double f1_score(std::string_view prediction, std::span<const std::string> golds) {
    detail::require_golds(golds, "f1_score");
    const std::string pred = normalize_answer(prediction);
    double best = 0.0;
    for (const auto& g : golds) best = std::max(best, token_f1(pred, normalize_answer(g)));
    return best;
}

}  // namespace mroute
