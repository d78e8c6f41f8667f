#pragma once

#include <string>

#include <nlohmann/json.hpp>

namespace mroute {

/// One dispatched sub-query. `cost` is always cost_rate * output_tokens.
struct CallRecord {
    std::string model_id;
    std::string sub_query;
    std::string response_text;
    long output_tokens = 0;
    double cost_rate = 0.0;
    double cost = 0.0;
    double latency_ms = 0.0;
    bool failed = false;

    friend bool operator==(const CallRecord&, const CallRecord&) = default;
};

inline void to_json(nlohmann::json& j, const CallRecord& c) {
    j = nlohmann::json{{"model_id", c.model_id},
                       {"sub_query", c.sub_query},
                       {"response_text", c.response_text},
                       {"output_tokens", c.output_tokens},
                       {"cost_rate", c.cost_rate},
                       {"cost", c.cost},
                       {"latency_ms", c.latency_ms},
                       {"failed", c.failed}};
}

inline void from_json(const nlohmann::json& j, CallRecord& c) {
    j.at("model_id").get_to(c.model_id);
    j.at("sub_query").get_to(c.sub_query);
    j.at("response_text").get_to(c.response_text);
    j.at("output_tokens").get_to(c.output_tokens);
    j.at("cost_rate").get_to(c.cost_rate);
    j.at("cost").get_to(c.cost);
    c.latency_ms = j.value("latency_ms", 0.0);
    c.failed = j.value("failed", false);
}

}  // namespace mroute
