#pragma once

// Network backends over cpp-httplib. Kept out of the core headers so the
// library itself carries no socket dependency.

#include <algorithm>
#include <cstdlib>
#include <span>
#include <memory>
#include <optional>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "mroute/model_pool.hpp"
#include "mroute/routing_engine.hpp"

namespace mroute {

inline constexpr const char* kApiBaseEnv = "MROUTE_API_BASE";
inline constexpr const char* kApiKeyEnv = "MROUTE_API_KEY";
inline constexpr const char* kPolicyBaseEnv = "MROUTE_POLICY_BASE";
inline constexpr const char* kPolicyKeyEnv = "MROUTE_POLICY_KEY";

struct HttpEndpoint {
    std::string base_url;  // scheme://host[:port]
    std::string path;
    std::string model;
    std::string token;  // empty: no Authorization header
    double temperature = 0.0;
};

inline std::optional<std::string> env_value(const std::string& name) {
    if (name.empty()) return std::nullopt;
    const char* v = std::getenv(name.c_str());
    if (v == nullptr || *v == '\0') return std::nullopt;
    return std::string(v);
}

/// Resolve an endpoint from a config object: a literal "url" wins, else the
/// variable named by "url_env" (default `base_env`). Token likewise via
/// "token_env" (default `key_env`); tokens are never read from the file.
inline HttpEndpoint resolve_endpoint(const nlohmann::json& b, const char* base_env, const char* key_env,
                                     const std::string& default_path) {
    HttpEndpoint e;
    if (b.contains("url")) {
        e.base_url = b.at("url").get<std::string>();
    } else {
        const auto var = b.value("url_env", std::string(base_env));
        auto v = env_value(var);
        if (!v) throw PoolConfigError("http backend: no 'url' given and $" + var + " is unset");
        e.base_url = *v;
    }
    e.path = b.value("path", default_path);
    e.model = b.at("model").get<std::string>();
    e.token = env_value(b.value("token_env", std::string(key_env))).value_or("");
    e.temperature = b.value("temperature", 0.0);
    return e;
}

namespace detail {

inline httplib::Result post_json(const HttpEndpoint& e, const nlohmann::json& body, long timeout_ms) {
    httplib::Client cli(e.base_url);
    const auto sec = static_cast<time_t>(timeout_ms / 1000);
    const auto usec = static_cast<time_t>((timeout_ms % 1000) * 1000);
    cli.set_connection_timeout(sec, usec);
    cli.set_read_timeout(sec, usec);
    cli.set_write_timeout(sec, usec);
    httplib::Headers headers;
    if (!e.token.empty()) headers.emplace("Authorization", "Bearer " + e.token);
    return cli.Post(e.path, headers, body.dump(), "application/json");
}

/// One attempt plus a single retry on transport errors or 5xx.
inline nlohmann::json post_with_retry(const HttpEndpoint& e, const nlohmann::json& body, long timeout_ms) {
    for (int attempt = 0;; ++attempt) {
        auto res = post_json(e, body, timeout_ms);
        const bool last = attempt == 1;
        if (!res) {
            if (!last) continue;
            const auto err = res.error();
            const auto kind = err == httplib::Error::Read || err == httplib::Error::Write ||
                                      err == httplib::Error::ConnectionTimeout
                                  ? BackendFailure::Kind::Timeout
                                  : BackendFailure::Kind::Status;
            throw BackendFailure(kind, 0, "http: " + httplib::to_string(err));
        }
        if (res->status >= 500 && !last) continue;
        if (res->status != 200) throw BackendFailure(BackendFailure::Kind::Status, res->status, "http status " + std::to_string(res->status));
        try {
            return nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::exception& ex) {
            throw BackendFailure(BackendFailure::Kind::Status, res->status, std::string("http: bad json: ") + ex.what());
        }
    }
}

}  // namespace detail

/// Chat-completions model backend: one user message carrying the assistant prompt.
class HttpModelBackend final : public ModelBackend {
public:
    explicit HttpModelBackend(HttpEndpoint endpoint) : endpoint_(std::move(endpoint)) {}

    BackendReply complete(const BackendRequest& request) const override {
        nlohmann::json body{{"model", endpoint_.model},
                            {"messages", nlohmann::json::array({{{"role", "user"}, {"content", request.prompt}}})},
                            {"max_tokens", request.max_tokens},
                            {"temperature", endpoint_.temperature}};
        const auto j = detail::post_with_retry(endpoint_, body, request.timeout_ms);
        BackendReply r;
        try {
            r.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception& ex) {
            throw BackendFailure(BackendFailure::Kind::Status, 200, std::string("http: unexpected payload: ") + ex.what());
        }
        if (j.contains("usage") && j["usage"].contains("completion_tokens"))
            r.output_tokens = j["usage"]["completion_tokens"].get<long>();
        return r;
    }

    std::string kind() const override { return "http"; }
    const HttpEndpoint& endpoint() const noexcept { return endpoint_; }

private:
    HttpEndpoint endpoint_;
};

inline HttpBackendFactory http_backend_factory() {
    return [](const nlohmann::json& b, const ModelDescriptor&) -> std::shared_ptr<const ModelBackend> {
        return std::make_shared<HttpModelBackend>(resolve_endpoint(b, kApiBaseEnv, kApiKeyEnv, "/v1/chat/completions"));
    };
}

/// Re-attach the stop marker a completions server swallowed: the close tag
/// of whichever route/answer block was left open at the end.
inline std::string restore_stop(std::string out, std::span<const std::string> stops, const TagLexicon& lex) {
    for (const auto& s : stops)
        if (text::ends_with(out, s)) return out;
    std::size_t best = std::string::npos;
    const TagPair* open_pair = nullptr;
    for (const TagPair* p : {&lex.route, &lex.answer}) {
        const auto at = out.rfind(p->open);
        if (at == std::string::npos || out.find(p->close, at) != std::string::npos) continue;
        if (best == std::string::npos || at > best) {
            best = at;
            open_pair = p;
        }
    }
    if (open_pair != nullptr && std::find(stops.begin(), stops.end(), open_pair->close) != stops.end())
        out += open_pair->close;
    return out;
}

/// External generator as the routing policy, via a text-completions
/// endpoint: the full context is the prompt, stop markers passed through.
/// Transport failures end the turn with empty output.
class HttpPolicy final : public PolicyBackend {
public:
    HttpPolicy(HttpEndpoint endpoint, long timeout_ms, TagLexicon lexicon = {})
        : endpoint_(std::move(endpoint)), timeout_ms_(timeout_ms), lexicon_(std::move(lexicon)) {}

    std::string generate(const GenerationRequest& req) override {
        nlohmann::json body{{"model", endpoint_.model},
                            {"prompt", req.context()},
                            {"max_tokens", req.max_tokens},
                            {"temperature", endpoint_.temperature},
                            {"stop", std::vector<std::string>(req.stop_markers.begin(), req.stop_markers.end())}};
        try {
            const auto j = detail::post_with_retry(endpoint_, body, timeout_ms_);
            const auto& choice = j.at("choices").at(0);
            auto out = choice.at("text").get<std::string>();
            if (choice.value("finish_reason", std::string{}) == "stop") out = restore_stop(std::move(out), req.stop_markers, lexicon_);
            return out;
        } catch (const BackendFailure&) {
            return {};
        } catch (const nlohmann::json::exception&) {
            return {};
        }
    }

private:
    HttpEndpoint endpoint_;
    long timeout_ms_;
    TagLexicon lexicon_;
};

}  // namespace mroute
