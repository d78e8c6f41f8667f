#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mroute/answer_metrics.hpp"
#include "mroute/call_record.hpp"
#include "mroute/result.hpp"
#include "mroute/text.hpp"

namespace mroute {

/// Lowercased, trimmed form used for every model-name comparison.
inline std::string canonical_model_name(std::string_view name) {
    return text::to_lower_ascii(text::trim(name));
}

struct BackendRequest {
    std::string prompt;     // full assistant prompt with the sub-query embedded
    std::string sub_query;  // raw sub-query, for backends that key on it
    long max_tokens = 600;
    long timeout_ms = 30000;
};

struct BackendReply {
    std::string text;
    std::optional<long> output_tokens;  // provider-reported usage, if any
};

/// Thrown by backends; dispatch converts it into a DispatchError.
class BackendFailure : public std::runtime_error {
public:
    enum class Kind { Timeout, Status };
    BackendFailure(Kind kind, int status, const std::string& what)
        : std::runtime_error(what), kind_(kind), status_(status) {}
    Kind kind() const noexcept { return kind_; }
    int status() const noexcept { return status_; }

private:
    Kind kind_;
    int status_;
};

class ModelBackend {
public:
    virtual ~ModelBackend() = default;
    virtual BackendReply complete(const BackendRequest& request) const = 0;
    virtual std::string kind() const = 0;
};

inline constexpr std::string_view kDeclineText =
    "I am unable to assist with this question. Please consult other LLMs for further assistance.";

struct SimulatedProfile {
    std::map<std::string, std::string> knowledge_base;  // normalized key -> answer text
    std::map<std::string, std::string> distractors;     // normalized key -> wrong answer given on a miss
    double accuracy = 1.0;
    long verbosity = 40;
    std::uint64_t seed = 0;
    std::string decline_text = std::string(kDeclineText);

    void validate() const {
        if (!(accuracy >= 0.0 && accuracy <= 1.0))
            throw std::invalid_argument("simulated profile: accuracy must be in [0,1]");
        if (verbosity < 1) throw std::invalid_argument("simulated profile: verbosity must be >= 1");
    }

    void add_fact(std::string_view key, std::string answer) {
        knowledge_base[normalize_answer(key)] = std::move(answer);
    }

    void add_distractor(std::string_view key, std::string answer) {
        distractors[normalize_answer(key)] = std::move(answer);
    }

    /// Whether a query with this key is answered from the KB (the accuracy
    /// coin is keyed on (seed, key), so the result is fixed per query).
    bool answers(std::string_view sub_query) const {
        const std::string key = normalize_answer(sub_query);
        if (!knowledge_base.contains(key)) return false;
        return coin(key) < accuracy;
    }

    double coin(std::string_view normalized_key) const {
        return text::unit_double(text::mix64(seed ^ text::fnv1a(normalized_key)));
    }
};

/// Deterministic stand-in for a hosted chat model.
class SimulatedBackend final : public ModelBackend {
public:
    explicit SimulatedBackend(SimulatedProfile profile) : profile_(std::move(profile)) {
        profile_.validate();
    }

    const SimulatedProfile& profile() const noexcept { return profile_; }
    std::string kind() const override { return "sim"; }

    BackendReply complete(const BackendRequest& request) const override {
        const std::string key = normalize_answer(request.sub_query);
        auto it = profile_.knowledge_base.find(key);
        if (it == profile_.knowledge_base.end()) return {profile_.decline_text, std::nullopt};
        if (profile_.coin(key) >= profile_.accuracy) {
            // A miss on a known key: confidently wrong if a distractor exists.
            auto d = profile_.distractors.find(key);
            if (d == profile_.distractors.end()) return {profile_.decline_text, std::nullopt};
            return {d->second + "\n" + filler(key, d->second), std::nullopt};
        }
        return {it->second + "\n" + filler(key, it->second), std::nullopt};
    }

private:
    // Neutral padding so responses carry roughly `verbosity` tokens.
    std::string filler(const std::string& key, const std::string& answer) const {
        static constexpr std::string_view kWords[] = {
            "this",    "is",      "based", "on",     "the",      "records", "available",
            "and",     "general", "known", "sources", "context", "details", "indicate",
            "further", "notes",   "may",   "vary",    "by",      "source",  "overall"};
        const std::uint64_t base = text::mix64(profile_.seed ^ text::fnv1a(key) ^ 0x5bd1e995ull);
        const double jitter = 0.75 + 0.5 * text::unit_double(base);
        const long target = std::max<long>(1, std::lround(static_cast<double>(profile_.verbosity) * jitter));
        const long have = static_cast<long>(text::count_tokens(answer));
        std::string out;
        for (long i = 0; i < target - have; ++i) {
            const auto w = text::mix64(base + static_cast<std::uint64_t>(i) + 1) % std::size(kWords);
            if (!out.empty()) out.push_back(' ');
            out.append(kWords[w]);
        }
        return out;
    }

    SimulatedProfile profile_;
};

struct ModelDescriptor {
    std::string id;
    std::string display_name;
    double param_count_b = 0.0;
    double cost_per_token = 0.0;
    std::string descriptor_text;
    std::shared_ptr<const ModelBackend> backend;

    void validate() const {
        if (text::trim(id).empty()) throw std::invalid_argument("model descriptor: empty id");
        if (!(param_count_b > 0.0))
            throw std::invalid_argument("model descriptor '" + id + "': param_count_b must be > 0");
        if (!(cost_per_token >= 0.0) || !std::isfinite(cost_per_token))
            throw std::invalid_argument("model descriptor '" + id + "': cost_per_token must be >= 0");
        if (text::trim(descriptor_text).empty())
            throw std::invalid_argument("model descriptor '" + id + "': descriptor_text is empty");
    }

    const std::string& name_for_prompt() const { return display_name.empty() ? id : display_name; }
};

/// m(P): the configured per-output-token rate.
inline double cost_rate_of(const ModelDescriptor& d) { return d.cost_per_token; }

class PoolError : public std::runtime_error {
public:
    enum class Kind { DuplicateId, UnknownModel };
    PoolError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

/// Ordered registry of candidate models. Both the canonical id and the
/// canonical display name resolve to a descriptor; the union is kept unique.
class RoutingPool {
public:
    RoutingPool() = default;
    explicit RoutingPool(std::vector<ModelDescriptor> models) {
        for (auto& m : models) register_model(std::move(m));
    }

    void register_model(ModelDescriptor d) {
        d.validate();
        const std::string cid = canonical_model_name(d.id);
        const std::string cdisplay = canonical_model_name(d.name_for_prompt());
        if (index_.contains(cid) || index_.contains(cdisplay))
            throw PoolError(PoolError::Kind::DuplicateId, "duplicate model id: " + d.id);
        const std::size_t slot = models_.size();
        index_.emplace(cid, slot);
        index_.emplace(cdisplay, slot);
        models_.push_back(std::move(d));
    }

    const ModelDescriptor* find(std::string_view name) const {
        auto it = index_.find(canonical_model_name(name));
        return it == index_.end() ? nullptr : &models_[it->second];
    }

    const ModelDescriptor& at(std::string_view name) const {
        if (const auto* d = find(name)) return *d;
        throw PoolError(PoolError::Kind::UnknownModel, "unknown model: " + std::string(name));
    }

    std::size_t size() const noexcept { return models_.size(); }
    bool empty() const noexcept { return models_.empty(); }
    const std::vector<ModelDescriptor>& models() const noexcept { return models_; }
    auto begin() const noexcept { return models_.begin(); }
    auto end() const noexcept { return models_.end(); }

private:
    std::vector<ModelDescriptor> models_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Value-style registration: returns the extended pool, leaves `pool` as is.
inline RoutingPool register_model(RoutingPool pool, ModelDescriptor d) {
    pool.register_model(std::move(d));
    return pool;
}

inline std::string render_assistant_prompt(std::string_view sub_query) {
    std::string p =
        "You are a helpful assistant.\n"
        "You are participating in a multi-round reasoning process, where a base model delegates "
        "sub-questions to specialized models like you.\n"
        "Your task is to do your **absolute best** to either:\n"
        "    + Answer the question directly, if possible, and provide a brief explanation; or\n"
        "    + Offer helpful and relevant context, background knowledge, or insights related to the "
        "question, even if you cannot fully answer it.\n"
        "\n"
        "If you are completely unable to answer the question or provide any relevant or helpful "
        "information, you must:\n"
        "    + Clearly state that you are unable to assist with this question, and\n"
        "    + Explicitly instruct the base model to consult other LLMs for further assistance.\n"
        "\n"
        "**Important Constraints**:\n"
        "    + Keep your response clear, concise, and informative (preferably under 512 tokens). "
        "Your response will help guide the base model's reasoning and next steps.\n"
        "    + Stay strictly on-topic. Do not include irrelevant or generic content.\n"
        "\n"
        "Here is the sub-question for you to assist with: ";
    p.append(sub_query);
    return p;
}

struct DispatchLimits {
    long max_api_response_tokens = 600;
    long timeout_ms = 30000;
};

struct DispatchError {
    enum class Kind { UnknownModel, EmptyQuery, BackendTimeout, BackendError };
    Kind kind;
    int status = 0;
    std::string message;
};

inline const char* to_string(DispatchError::Kind k) {
    switch (k) {
        case DispatchError::Kind::UnknownModel: return "UnknownModel";
        case DispatchError::Kind::EmptyQuery: return "EmptyQuery";
        case DispatchError::Kind::BackendTimeout: return "BackendTimeout";
        case DispatchError::Kind::BackendError: return "BackendError";
    }
    return "?";
}

/// Send one sub-query to the bound backend and account for it.
inline Result<CallRecord, DispatchError> dispatch(const RoutingPool& pool, std::string_view model_id,
                                                  std::string_view sub_query, const DispatchLimits& limits) {
    const ModelDescriptor* d = pool.find(model_id);
    if (d == nullptr) {
        return DispatchError{DispatchError::Kind::UnknownModel, 0, "unknown model: " + std::string(model_id)};
    }
    if (text::trim(sub_query).empty()) {
        return DispatchError{DispatchError::Kind::EmptyQuery, 0, "empty sub-query"};
    }
    if (!d->backend) {
        return DispatchError{DispatchError::Kind::BackendError, 0, "model '" + d->id + "' has no backend"};
    }

    BackendRequest req{render_assistant_prompt(sub_query), std::string(sub_query),
                       limits.max_api_response_tokens, limits.timeout_ms};
    const auto t0 = std::chrono::steady_clock::now();
    BackendReply reply;
    try {
        reply = d->backend->complete(req);
    } catch (const BackendFailure& e) {
        const auto kind = e.kind() == BackendFailure::Kind::Timeout ? DispatchError::Kind::BackendTimeout
                                                                      : DispatchError::Kind::BackendError;
        return DispatchError{kind, e.status(), e.what()};
    }
    const auto t1 = std::chrono::steady_clock::now();

    const auto limit = static_cast<std::size_t>(std::max<long>(0, limits.max_api_response_tokens));
    const std::size_t raw_tokens = text::count_tokens(reply.text);
    CallRecord rec;
    rec.model_id = d->id;
    rec.sub_query = std::string(sub_query);
    if (raw_tokens > limit) {
        rec.response_text = std::string(text::take_tokens(reply.text, limit));
        rec.output_tokens = static_cast<long>(limit);
    } else {
        rec.response_text = std::move(reply.text);
        rec.output_tokens = reply.output_tokens ? std::min<long>(*reply.output_tokens, static_cast<long>(limit))
                                                : static_cast<long>(raw_tokens);
    }
    rec.cost_rate = cost_rate_of(*d);
    rec.cost = rec.cost_rate * static_cast<double>(rec.output_tokens);
    rec.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    return rec;
}

// ---------------------------------------------------------------------------
// Pool config file
// ---------------------------------------------------------------------------

class PoolConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Builds a backend for `backend.type == "http"` entries; the core library
/// has no network dependency, so callers that want HTTP supply this.
using HttpBackendFactory =
    std::function<std::shared_ptr<const ModelBackend>(const nlohmann::json& backend, const ModelDescriptor& d)>;

/// KB file: one JSON object per line, {"key": ..., "answer": ..., "distractor"?: ...}.
inline void load_knowledge_base(const std::filesystem::path& path, SimulatedProfile& profile) {
    std::ifstream in(path);
    if (!in) throw PoolConfigError("cannot open knowledge base file: " + path.string());
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            const auto key = j.at("key").get<std::string>();
            profile.add_fact(key, j.at("answer").get<std::string>());
            if (j.contains("distractor")) profile.add_distractor(key, j.at("distractor").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw PoolConfigError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

inline SimulatedProfile parse_sim_profile(const nlohmann::json& b, const std::filesystem::path& base_dir) {
    SimulatedProfile p;
    p.accuracy = b.value("accuracy", 1.0);
    p.verbosity = b.value("verbosity", 40L);
    p.seed = b.value("seed", std::uint64_t{0});
    if (b.contains("decline_text")) p.decline_text = b.at("decline_text").get<std::string>();
    if (b.contains("kb_file")) {
        std::filesystem::path kb_path = b.at("kb_file").get<std::string>();
        if (kb_path.is_relative()) kb_path = base_dir / kb_path;
        load_knowledge_base(kb_path, p);
    }
    if (b.contains("kb")) {
        for (const auto& [k, v] : b.at("kb").items()) p.knowledge_base[normalize_answer(k)] = v.get<std::string>();
    }
    p.validate();
    return p;
}

/// Parse a pool config document:
/// {"models": [{id, display_name, param_count_b, cost_per_token, descriptor_text,
///              backend: {type: "sim", ...} | {type: "http", ...}}]}
inline RoutingPool parse_pool_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = ".",
                                     const HttpBackendFactory& http_factory = {}) {
    RoutingPool pool;
    try {
        const auto& models = doc.at("models");
        if (!models.is_array() || models.empty()) throw PoolConfigError("pool config: 'models' must be a nonempty array");
        for (const auto& m : models) {
            ModelDescriptor d;
            d.id = m.at("id").get<std::string>();
            d.display_name = m.value("display_name", d.id);
            d.param_count_b = m.at("param_count_b").get<double>();
            d.cost_per_token = m.at("cost_per_token").get<double>();
            d.descriptor_text = m.at("descriptor_text").get<std::string>();
            const auto& b = m.at("backend");
            const auto type = b.at("type").get<std::string>();
            if (type == "sim") {
                d.backend = std::make_shared<SimulatedBackend>(parse_sim_profile(b, base_dir));
            } else if (type == "http") {
                if (!http_factory) throw PoolConfigError("pool config: http backend for '" + d.id + "' but HTTP support not enabled");
                d.backend = http_factory(b, d);
            } else {
                throw PoolConfigError("pool config: unknown backend type '" + type + "' for model '" + d.id + "'");
            }
            pool.register_model(std::move(d));
        }
    } catch (const nlohmann::json::exception& e) {
        throw PoolConfigError(std::string("pool config schema error: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw PoolConfigError(std::string("pool config: ") + e.what());
    } catch (const PoolError& e) {
        throw PoolConfigError(std::string("pool config: ") + e.what());
    }
    return pool;
}

inline RoutingPool load_pool_config(const std::filesystem::path& path, const HttpBackendFactory& http_factory = {}) {
    std::ifstream in(path);
    if (!in) throw PoolConfigError("cannot open pool config: " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw PoolConfigError("pool config " + path.string() + ": " + e.what());
    }
    return parse_pool_config(doc, path.parent_path(), http_factory);
}

}  // namespace mroute
