#pragma once

#include <algorithm>
#include <compare>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mroute/model_pool.hpp"
#include "mroute/result.hpp"
#include "mroute/text.hpp"

namespace mroute {

struct TagPair {
    std::string open;
    std::string close;
    friend bool operator==(const TagPair&, const TagPair&) = default;
};

enum class BlockKind { Think, Route, Info, Answer };

inline const char* to_string(BlockKind k) {
    switch (k) {
        case BlockKind::Think: return "think";
        case BlockKind::Route: return "route";
        case BlockKind::Info: return "info";
        case BlockKind::Answer: return "answer";
    }
    return "?";
}

/// The literal markers of the trajectory protocol. `info_aliases` are extra
/// info pairs accepted when parsing; the engine always emits `info`.
struct TagLexicon {
    TagPair think{"<think>", "</think>"};
    TagPair route{"<search>", "</search>"};
    TagPair info{"<information>", "</information>"};
    TagPair answer{"<answer>", "</answer>"};
    std::vector<TagPair> info_aliases{{"<info>", "</info>"}};

    const TagPair& pair(BlockKind k) const {
        switch (k) {
            case BlockKind::Think: return think;
            case BlockKind::Route: return route;
            case BlockKind::Info: return info;
            case BlockKind::Answer: return answer;
        }
        throw std::logic_error("bad block kind");
    }

    struct Lexeme {
        std::string_view text;
        BlockKind kind;
        bool is_open;
        std::size_t pair_index;  // 0 = primary pair, i+1 = info_aliases[i]
    };

    std::vector<Lexeme> lexemes() const {
        std::vector<Lexeme> out;
        for (auto k : {BlockKind::Think, BlockKind::Route, BlockKind::Info, BlockKind::Answer}) {
            out.push_back({pair(k).open, k, true, 0});
            out.push_back({pair(k).close, k, false, 0});
        }
        for (std::size_t i = 0; i < info_aliases.size(); ++i) {
            out.push_back({info_aliases[i].open, BlockKind::Info, true, i + 1});
            out.push_back({info_aliases[i].close, BlockKind::Info, false, i + 1});
        }
        return out;
    }

    /// All lexemes nonempty, pairwise distinct, none a substring of another.
    void validate() const {
        const auto lx = lexemes();
        for (std::size_t i = 0; i < lx.size(); ++i) {
            if (lx[i].text.empty()) throw std::invalid_argument("tag lexicon: empty lexeme");
            for (std::size_t j = 0; j < lx.size(); ++j) {
                if (i == j) continue;
                if (lx[j].text.find(lx[i].text) != std::string_view::npos) {
                    throw std::invalid_argument("tag lexicon: '" + std::string(lx[i].text) +
                                                "' is contained in '" + std::string(lx[j].text) + "'");
                }
            }
        }
    }

    friend bool operator==(const TagLexicon&, const TagLexicon&) = default;
};

inline void to_json(nlohmann::json& j, const TagPair& p) { j = nlohmann::json::array({p.open, p.close}); }
inline void from_json(const nlohmann::json& j, TagPair& p) {
    p.open = j.at(0).get<std::string>();
    p.close = j.at(1).get<std::string>();
}
inline void to_json(nlohmann::json& j, const TagLexicon& l) {
    j = nlohmann::json{{"think", l.think}, {"route", l.route}, {"info", l.info}, {"answer", l.answer},
                       {"info_aliases", l.info_aliases}};
}
inline void from_json(const nlohmann::json& j, TagLexicon& l) {
    TagLexicon d;
    l.think = j.value("think", d.think);
    l.route = j.value("route", d.route);
    l.info = j.value("info", d.info);
    l.answer = j.value("answer", d.answer);
    l.info_aliases = j.value("info_aliases", d.info_aliases);
}

/// Half-open byte range [start, end).
struct Span {
    std::size_t start = 0;
    std::size_t end = 0;
    std::size_t size() const noexcept { return end - start; }
    friend auto operator<=>(const Span&, const Span&) = default;
};

inline void to_json(nlohmann::json& j, const Span& s) { j = nlohmann::json::array({s.start, s.end}); }
inline void from_json(const nlohmann::json& j, Span& s) {
    s.start = j.at(0).get<std::size_t>();
    s.end = j.at(1).get<std::size_t>();
}

struct Block {
    BlockKind kind = BlockKind::Think;
    std::string text;  // interior, without the tags
    Span span;         // includes both tags
    // Route only: the colon split of `text`, trimmed. Empty when there is no colon.
    std::string model_name;
    std::string sub_query;
};

struct Trajectory {
    std::string raw;
    std::vector<Block> blocks;
    std::vector<std::string> inter_block_text;  // blocks.size() + 1 entries

    std::string reconstruct() const {
        std::string out;
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            out += inter_block_text[i];
            out.append(raw, blocks[i].span.start, blocks[i].span.size());
        }
        if (!inter_block_text.empty()) out += inter_block_text.back();
        return out;
    }

    std::size_t count(BlockKind k) const {
        return static_cast<std::size_t>(
            std::count_if(blocks.begin(), blocks.end(), [k](const Block& b) { return b.kind == k; }));
    }

    /// Fallback for text that does not parse: no blocks, everything inter-block.
    static Trajectory unparsed(std::string raw) {
        Trajectory t;
        t.inter_block_text.push_back(raw);
        t.raw = std::move(raw);
        return t;
    }
};

struct ParseFailure {
    std::size_t offset = 0;
    std::string expected;
    std::string found;

    std::string message() const {
        return "at offset " + std::to_string(offset) + ": expected " + expected + ", found " + found;
    }
};

namespace detail {

struct LexemeHit {
    std::size_t pos = std::string_view::npos;
    const TagLexicon::Lexeme* lexeme = nullptr;
};

inline LexemeHit next_lexeme(std::string_view raw, std::size_t from, const std::vector<TagLexicon::Lexeme>& lx) {
    LexemeHit best;
    for (const auto& l : lx) {
        const auto p = raw.find(l.text, from);
        if (p < best.pos) {
            best.pos = p;
            best.lexeme = &l;
        }
    }
    return best;
}

inline void split_directive(std::string_view text, std::string& name, std::string& query) {
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) return;
    name = std::string(text::trim(text.substr(0, colon)));
    query = std::string(text::trim(text.substr(colon + 1)));
}

}  // namespace detail

/// Left-to-right, non-greedy scan into blocks. Fails on the first stray
/// close tag, nested tag, or unclosed tag.
inline Result<Trajectory, ParseFailure> parse_trajectory(std::string_view raw, const TagLexicon& lexicon) {
    const auto lx = lexicon.lexemes();
    Trajectory t;
    t.raw = std::string(raw);
    std::size_t cursor = 0;
    for (;;) {
        const auto open = detail::next_lexeme(raw, cursor, lx);
        if (open.lexeme == nullptr) break;
        if (!open.lexeme->is_open) {
            return ParseFailure{open.pos, "an opening tag", "'" + std::string(open.lexeme->text) + "'"};
        }
        const TagPair& pair = open.lexeme->pair_index == 0
                                  ? lexicon.pair(open.lexeme->kind)
                                  : lexicon.info_aliases[open.lexeme->pair_index - 1];
        const std::size_t body_start = open.pos + open.lexeme->text.size();
        const auto close = detail::next_lexeme(raw, body_start, lx);
        if (close.lexeme == nullptr) {
            return ParseFailure{open.pos, "'" + pair.close + "'",
                                "end of input (unclosed '" + std::string(open.lexeme->text) + "')"};
        }
        if (close.lexeme->text != pair.close) {
            return ParseFailure{close.pos, "'" + pair.close + "'", "'" + std::string(close.lexeme->text) + "'"};
        }

        Block b;
        b.kind = open.lexeme->kind;
        b.text = std::string(raw.substr(body_start, close.pos - body_start));
        b.span = {open.pos, close.pos + close.lexeme->text.size()};
        if (b.kind == BlockKind::Route) detail::split_directive(b.text, b.model_name, b.sub_query);
        t.inter_block_text.emplace_back(raw.substr(cursor, open.pos - cursor));
        t.blocks.push_back(std::move(b));
        cursor = t.blocks.back().span.end;
    }
    t.inter_block_text.emplace_back(raw.substr(cursor));
    return t;
}

struct RouteTarget {
    std::string model_id;
    std::string sub_query;
};

struct DirectiveError {
    enum class Kind { NoColon, EmptyName, EmptyQuery, UnknownModel };
    Kind kind;
    std::string name;

    std::string message() const {
        switch (kind) {
            case Kind::NoColon: return "route directive has no 'llm_name: query' colon";
            case Kind::EmptyName: return "route directive has an empty model name";
            case Kind::EmptyQuery: return "route directive has an empty query";
            case Kind::UnknownModel: return "route directive names unknown model '" + name + "'";
        }
        return "bad route directive";
    }
};

/// "llm_name: query" split at the first colon, name resolved in the pool.
inline Result<RouteTarget, DirectiveError> parse_route_directive(std::string_view text, const RoutingPool& pool) {
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) return DirectiveError{DirectiveError::Kind::NoColon, {}};
    const auto name = text::trim(text.substr(0, colon));
    const auto query = text::trim(text.substr(colon + 1));
    if (name.empty()) return DirectiveError{DirectiveError::Kind::EmptyName, {}};
    if (query.empty()) return DirectiveError{DirectiveError::Kind::EmptyQuery, std::string(name)};
    const ModelDescriptor* d = pool.find(name);
    if (d == nullptr) return DirectiveError{DirectiveError::Kind::UnknownModel, std::string(name)};
    return RouteTarget{d->id, std::string(query)};
}

enum class FormatRule { TagBalance, StartsThinkEndsAnswer, ThinkAnswerCount, RouteInfoPairing, RouteDirective };

inline const char* to_string(FormatRule r) {
    switch (r) {
        case FormatRule::TagBalance: return "TAG_BALANCE";
        case FormatRule::StartsThinkEndsAnswer: return "STARTS_THINK_ENDS_ANSWER";
        case FormatRule::ThinkAnswerCount: return "THINK_ANSWER_COUNT";
        case FormatRule::RouteInfoPairing: return "ROUTE_INFO_PAIRING";
        case FormatRule::RouteDirective: return "ROUTE_DIRECTIVE";
    }
    return "?";
}

struct Violation {
    FormatRule rule;
    std::string message;
    std::size_t offset = 0;
};

struct FormatVerdict {
    std::vector<Violation> violations;
    bool ok() const noexcept { return violations.empty(); }
    bool has(FormatRule r) const {
        return std::any_of(violations.begin(), violations.end(), [r](const Violation& v) { return v.rule == r; });
    }
};

inline void to_json(nlohmann::json& j, const Violation& v) {
    j = nlohmann::json{{"rule_id", to_string(v.rule)}, {"message", v.message}, {"offset", v.offset}};
}

inline void to_json(nlohmann::json& j, const FormatVerdict& v) {
    j = nlohmann::json{{"ok", v.ok()}, {"violations", v.violations}};
}

/// Rules 2-5 over an already parsed block sequence.
inline FormatVerdict check_block_rules(const Trajectory& t, const RoutingPool& pool) {
    FormatVerdict v;
    const auto& bs = t.blocks;
    const std::size_t end_offset = t.raw.size();

    if (bs.empty() || bs.front().kind != BlockKind::Think) {
        v.violations.push_back({FormatRule::StartsThinkEndsAnswer, "response must begin with a think block",
                                bs.empty() ? 0 : bs.front().span.start});
    }
    if (bs.empty() || bs.back().kind != BlockKind::Answer) {
        v.violations.push_back({FormatRule::StartsThinkEndsAnswer, "response must end with an answer block",
                                bs.empty() ? end_offset : bs.back().span.start});
    }

    const auto thinks = t.count(BlockKind::Think);
    const auto answers = t.count(BlockKind::Answer);
    if (thinks == 0) v.violations.push_back({FormatRule::ThinkAnswerCount, "no think block", 0});
    if (answers != 1) {
        v.violations.push_back({FormatRule::ThinkAnswerCount,
                                "expected exactly one answer block, found " + std::to_string(answers), 0});
    }

    for (std::size_t i = 0; i < bs.size(); ++i) {
        if (bs[i].kind == BlockKind::Route) {
            if (i + 1 >= bs.size() || bs[i + 1].kind != BlockKind::Info) {
                v.violations.push_back({FormatRule::RouteInfoPairing,
                                        "route block is not immediately followed by an info block",
                                        bs[i].span.start});
            }
            auto d = parse_route_directive(bs[i].text, pool);
            if (!d) v.violations.push_back({FormatRule::RouteDirective, d.error().message(), bs[i].span.start});
        } else if (bs[i].kind == BlockKind::Info) {
            if (i == 0 || bs[i - 1].kind != BlockKind::Route) {
                v.violations.push_back(
                    {FormatRule::RouteInfoPairing, "info block without a preceding route block", bs[i].span.start});
            }
        }
    }
    return v;
}

inline FormatVerdict validate_format(std::string_view raw, const TagLexicon& lexicon, const RoutingPool& pool) {
    auto parsed = parse_trajectory(raw, lexicon);
    if (!parsed) {
        FormatVerdict v;
        v.violations.push_back({FormatRule::TagBalance, parsed.error().message(), parsed.error().offset});
        return v;
    }
    return check_block_rules(*parsed, pool);
}

/// Spans excluded from the training loss: every info block, tags included.
inline std::vector<Span> loss_mask(const Trajectory& t) {
    std::vector<Span> out;
    for (const auto& b : t.blocks) {
        if (b.kind == BlockKind::Info) out.push_back(b.span);
    }
    return out;
}

}  // namespace mroute
