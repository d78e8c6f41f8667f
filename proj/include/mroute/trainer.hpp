#pragma once

#include <algorithm>
#include <concepts>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mroute/answer_metrics.hpp"
#include "mroute/model_pool.hpp"
#include "mroute/rewards.hpp"
#include "mroute/routing_engine.hpp"
#include "mroute/synthetic.hpp"
#include "mroute/tag_protocol.hpp"
#include "mroute/text.hpp"

namespace mroute {

// ---------------------------------------------------------------------------
// Features and policy
// ---------------------------------------------------------------------------

struct FeatureSpec {
    std::size_t word_buckets = 64;
    std::size_t max_steps = 4;

    static constexpr std::size_t kObservationDims = 2;
    std::size_t step_offset() const noexcept { return word_buckets; }
    std::size_t observation_offset() const noexcept { return word_buckets + max_steps + 1; }
    std::size_t dim() const noexcept { return observation_offset() + kObservationDims; }
};

/// What the policy has learned from injected info so far.
struct Observation {
    bool has_answer = false;      // some info block carried a candidate answer
    bool has_follow_up = false;   // the latest info proposed a follow-up sub-query
};

/// Hashed bag of words (unit L2 norm), a one-hot of the step index capped
/// at max_steps, then the observation bits.
inline std::vector<double> featurize(std::string_view question, std::size_t step_index, const Observation& obs,
                                     const FeatureSpec& spec = {}) {
    std::vector<double> f(spec.dim(), 0.0);
    const std::string norm = normalize_answer(question);
    double sq = 0.0;
    for (auto tok : text::split_ws(norm)) {
        auto& cell = f[text::fnv1a(tok) % spec.word_buckets];
        sq += 2.0 * cell + 1.0;
        cell += 1.0;
    }
    if (sq > 0.0) {
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t i = 0; i < spec.word_buckets; ++i) f[i] *= inv;
    }
    f[spec.step_offset() + std::min(step_index, spec.max_steps)] = 1.0;
    f[spec.observation_offset()] = obs.has_answer ? 1.0 : 0.0;
    f[spec.observation_offset() + 1] = obs.has_follow_up ? 1.0 : 0.0;
    return f;
}

inline std::vector<double> featurize(std::string_view question, std::size_t step_index, const FeatureSpec& spec = {}) {
    return featurize(question, step_index, Observation{}, spec);
}

/// Linear softmax policy over |pool| route actions plus "answer now"
/// (the last action). Weights are row-major [feature][action].
struct PolicyParams {
    FeatureSpec features;
    std::size_t num_actions = 0;
    double temperature = 1.0;
    std::vector<double> weights;
    std::vector<std::string> action_models;  // model ids for actions [0, |pool|)

    static PolicyParams zeros(const RoutingPool& pool, FeatureSpec spec = {}, double temperature = 1.0) {
        PolicyParams p;
        p.features = spec;
        p.num_actions = pool.size() + 1;
        p.temperature = temperature;
        p.weights.assign(spec.dim() * p.num_actions, 0.0);
        for (const auto& d : pool) p.action_models.push_back(d.id);
        return p;
    }

    /// Zero weights except a bias toward answering once a candidate answer
    /// is held. Serves as both the starting point and the KL reference.
    static PolicyParams initial(const RoutingPool& pool, FeatureSpec spec = {}, double temperature = 1.0,
                                double answer_prior = 0.0) {
        auto p = zeros(pool, spec, temperature);
        p.w(spec.observation_offset(), p.answer_action()) = answer_prior;
        return p;
    }

    std::size_t feature_dim() const noexcept { return features.dim(); }
    std::size_t answer_action() const noexcept { return num_actions - 1; }

    double& w(std::size_t feature, std::size_t action) { return weights[feature * num_actions + action]; }
    double w(std::size_t feature, std::size_t action) const { return weights[feature * num_actions + action]; }

    void validate() const {
        if (num_actions < 1) throw std::invalid_argument("policy params: no actions");
        if (weights.size() != feature_dim() * num_actions) throw std::invalid_argument("policy params: weight shape mismatch");
        if (action_models.size() + 1 != num_actions) throw std::invalid_argument("policy params: action/model count mismatch");
        if (!(temperature > 0.0)) throw std::invalid_argument("policy params: temperature must be > 0");
        for (double x : weights)
            if (!std::isfinite(x)) throw std::invalid_argument("policy params: non-finite weight");
    }

    std::vector<double> logits(std::span<const double> f) const {
        std::vector<double> z(num_actions, 0.0);
        for (std::size_t i = 0; i < f.size(); ++i) {
            if (f[i] == 0.0) continue;
            for (std::size_t a = 0; a < num_actions; ++a) z[a] += f[i] * w(i, a);
        }
        for (auto& v : z) v /= temperature;
        return z;
    }

    std::vector<double> probs(std::span<const double> f) const {
        auto z = logits(f);
        const double m = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (auto& v : z) {
            v = std::exp(v - m);
            sum += v;
        }
        for (auto& v : z) v /= sum;
        return z;
    }

    friend bool operator==(const PolicyParams& a, const PolicyParams& b) {
        return a.features.word_buckets == b.features.word_buckets && a.features.max_steps == b.features.max_steps &&
               a.num_actions == b.num_actions && a.temperature == b.temperature && a.weights == b.weights &&
               a.action_models == b.action_models;
    }
};

inline void to_json(nlohmann::json& j, const PolicyParams& p) {
    j = nlohmann::json{{"word_buckets", p.features.word_buckets},
                       {"max_steps", p.features.max_steps},
                       {"num_actions", p.num_actions},
                       {"temperature", p.temperature},
                       {"action_models", p.action_models},
                       {"weights", p.weights}};
}
inline void from_json(const nlohmann::json& j, PolicyParams& p) {
    p.features.word_buckets = j.at("word_buckets").get<std::size_t>();
    p.features.max_steps = j.at("max_steps").get<std::size_t>();
    p.num_actions = j.at("num_actions").get<std::size_t>();
    p.temperature = j.at("temperature").get<double>();
    p.action_models = j.at("action_models").get<std::vector<std::string>>();
    p.weights = j.at("weights").get<std::vector<double>>();
    p.validate();
}

inline double entropy(std::span<const double> probs) {
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

/// Bit-reproducible draws: mt19937_64 output is fully specified by the
/// standard, the std distributions are not.
class PolicyRng {
public:
    explicit PolicyRng(std::uint64_t seed) : engine_(seed) {}
    double uniform() { return text::unit_double(engine_()); }
    std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }
    std::uint64_t bits() { return engine_(); }

private:
    std::mt19937_64 engine_;
};

struct ActionSample {
    std::size_t action = 0;
    double log_prob = 0.0;
};

inline ActionSample sample_action(const PolicyParams& params, std::span<const double> features, PolicyRng& rng) {
    const auto p = params.probs(features);
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t a = p.size() - 1;
    for (std::size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) {
            a = i;
            break;
        }
    }
    return {a, std::log(p[a])};
}

inline ActionSample greedy_action(const PolicyParams& params, std::span<const double> features) {
    const auto p = params.probs(features);
    const auto a = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    return {a, std::log(p[a])};
}

// ---------------------------------------------------------------------------
// Policy adapter: turns action draws into protocol text for the engine
// ---------------------------------------------------------------------------

struct StepRecord {
    std::vector<double> features;
    std::size_t action = 0;
    double log_prob = 0.0;
};

inline constexpr std::string_view kAbstainAnswer = "unknown";

/// Reads the info convention used by simulated models: an "Answer: X" line
/// holds a candidate answer, a "Next: Q" line proposes the next sub-query.
struct InfoDigest {
    std::optional<std::string> answer;
    std::optional<std::string> next_query;
};

inline InfoDigest digest_info(std::string_view info) {
    InfoDigest d;
    std::size_t pos = 0;
    while (pos <= info.size()) {
        const auto nl = info.find('\n', pos);
        const auto line = text::trim(info.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos));
        if (text::starts_with(line, "Answer:")) {
            d.answer = std::string(text::trim(line.substr(7)));
        } else if (text::starts_with(line, "Next:")) {
            d.next_query = std::string(text::trim(line.substr(5)));
        }
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
    return d;
}

class RoutingPolicyAdapter final : public PolicyBackend {
public:
    RoutingPolicyAdapter(const PolicyParams& params, const RoutingPool& pool, std::string question,
                         const TagLexicon& lexicon, PolicyRng& rng, bool greedy = false)
        : params_(params), pool_(pool), question_(std::move(question)), lexicon_(lexicon), rng_(rng), greedy_(greedy),
          next_query_(question_) {
        if (params_.action_models.size() + 1 != params_.num_actions)
            throw std::invalid_argument("policy adapter: params/pool mismatch");
    }

    std::string generate(const GenerationRequest& req) override {
        absorb_latest_info(req.trajectory);
        const bool can_route = std::find(req.stop_markers.begin(), req.stop_markers.end(), lexicon_.route.close) !=
                               req.stop_markers.end();
        if (!can_route) return answer_text("Routing budget exhausted; answering with gathered information.");

        auto f = featurize(question_, routes_, Observation{best_answer_.has_value(), follow_up_pending_},
                           params_.features);
        const ActionSample s = greedy_ ? greedy_action(params_, f) : sample_action(params_, f, rng_);
        steps_.push_back({std::move(f), s.action, s.log_prob});
        if (s.action == params_.answer_action()) return answer_text("I have enough information to answer.");

        const ModelDescriptor& d = pool_.at(params_.action_models[s.action]);
        ++routes_;
        std::string out = leading();
        out += lexicon_.think.open + "I need external knowledge; consulting " + d.name_for_prompt() + "." +
               lexicon_.think.close + "\n";
        out += lexicon_.route.open + d.name_for_prompt() + ": " + next_query_ + lexicon_.route.close;
        return out;
    }

    const std::vector<StepRecord>& steps() const noexcept { return steps_; }
    std::vector<StepRecord> take_steps() { return std::move(steps_); }

private:
    std::string leading() const { return routes_ == 0 && !answered_before_ ? "" : "\n"; }

    std::string answer_text(std::string_view thought) {
        std::string out = leading();
        out += lexicon_.think.open + std::string(thought) + lexicon_.think.close + "\n";
        out += lexicon_.answer.open + (best_answer_ ? *best_answer_ : std::string(kAbstainAnswer)) + lexicon_.answer.close;
        answered_before_ = true;
        return out;
    }

    void absorb_latest_info(std::string_view trajectory) {
        if (trajectory.size() == seen_) return;
        seen_ = trajectory.size();
        auto parsed = parse_trajectory(trajectory, lexicon_);
        if (!parsed || parsed->blocks.empty() || parsed->blocks.back().kind != BlockKind::Info) return;
        const auto d = digest_info(parsed->blocks.back().text);
        if (d.answer) best_answer_ = d.answer;
        if (d.next_query) next_query_ = *d.next_query;
        follow_up_pending_ = d.next_query.has_value();
    }

    const PolicyParams& params_;
    const RoutingPool& pool_;
    std::string question_;
    const TagLexicon& lexicon_;
    PolicyRng& rng_;
    bool greedy_;
    std::string next_query_;
    std::optional<std::string> best_answer_;
    std::size_t routes_ = 0;
    std::size_t seen_ = 0;
    bool answered_before_ = false;
    bool follow_up_pending_ = false;
    std::vector<StepRecord> steps_;
};

struct PolicyEpisode {
    Episode episode;
    std::vector<StepRecord> steps;
};

/// Anything with a question and a gold answer list.
template <class T>
concept QaTask = requires(const T& t) {
    { t.question } -> std::convertible_to<std::string>;
    { t.golds } -> std::convertible_to<std::vector<std::string>>;
};

template <QaTask Task>
PolicyEpisode rollout_policy_episode(const PolicyParams& params, const Task& task, const RoutingPool& pool,
                                     CostWindow& window, const EngineConfig& cfg, const RewardConfig& reward_cfg,
                                     PolicyRng& rng, bool greedy = false) {
    RoutingPolicyAdapter adapter(params, pool, task.question, cfg.lexicon, rng, greedy);
    PolicyEpisode out;
    out.episode = run_episode(task.question, task.golds, adapter, pool, window, cfg, reward_cfg);
    out.steps = adapter.take_steps();
    return out;
}

// ---------------------------------------------------------------------------
// Objective and gradient
// ---------------------------------------------------------------------------

struct TrainConfig {
    double beta = 0.05;
    double learning_rate = 2.0;
    std::size_t batch_size = 64;
    std::size_t steps = 225;
    double alpha = 0.0;
    std::uint64_t seed = 1;
    double baseline_momentum = 0.9;
    FeatureSpec features;
    double temperature = 1.0;
    double answer_prior = 2.0;

    void validate() const {
        if (!std::isfinite(answer_prior)) throw std::invalid_argument("train config: answer_prior must be finite");
        if (!(beta >= 0.0)) throw std::invalid_argument("train config: beta must be >= 0");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning_rate must be > 0");
        if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be positive");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("train config: alpha must be in [0,1]");
        if (!(baseline_momentum >= 0.0 && baseline_momentum < 1.0))
            throw std::invalid_argument("train config: baseline_momentum must be in [0,1)");
        if (!(temperature > 0.0)) throw std::invalid_argument("train config: temperature must be > 0");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"beta", c.beta},
                       {"learning_rate", c.learning_rate},
                       {"batch_size", c.batch_size},
                       {"steps", c.steps},
                       {"alpha", c.alpha},
                       {"seed", c.seed},
                       {"baseline_momentum", c.baseline_momentum},
                       {"word_buckets", c.features.word_buckets},
                       {"temperature", c.temperature},
                       {"answer_prior", c.answer_prior}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.beta = j.value("beta", d.beta);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.steps = j.value("steps", d.steps);
    c.alpha = j.value("alpha", d.alpha);
    c.seed = j.value("seed", d.seed);
    c.baseline_momentum = j.value("baseline_momentum", d.baseline_momentum);
    c.features.word_buckets = j.value("word_buckets", d.features.word_buckets);
    c.temperature = j.value("temperature", d.temperature);
    c.answer_prior = j.value("answer_prior", d.answer_prior);
}

/// One decision in the batch with its centered return.
struct StepSample {
    std::vector<double> features;
    std::size_t action = 0;
    double advantage = 0.0;
};

/// KL(p || q) for two categorical distributions.
inline double categorical_kl(std::span<const double> p, std::span<const double> q) {
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
    return kl;
}

/// (1/B) * sum over decisions of [A * log pi(a|s) - beta * KL(pi(.|s) || ref(.|s))].
inline double surrogate_objective(const PolicyParams& params, std::span<const StepSample> samples,
                                  const PolicyParams& ref, double beta, std::size_t batch_size) {
    double total = 0.0;
    for (const auto& s : samples) {
        const auto p = params.probs(s.features);
        total += s.advantage * std::log(p[s.action]);
        if (beta > 0.0) total -= beta * categorical_kl(p, ref.probs(s.features));
    }
    return total / static_cast<double>(batch_size);
}

/// Analytic gradient of surrogate_objective w.r.t. the weights.
inline std::vector<double> surrogate_gradient(const PolicyParams& params, std::span<const StepSample> samples,
                                              const PolicyParams& ref, double beta, std::size_t batch_size) {
    std::vector<double> grad(params.weights.size(), 0.0);
    const std::size_t A = params.num_actions;
    std::vector<double> dz(A);
    for (const auto& s : samples) {
        const auto p = params.probs(s.features);
        for (std::size_t j = 0; j < A; ++j) dz[j] = s.advantage * ((j == s.action ? 1.0 : 0.0) - p[j]);
        if (beta > 0.0) {
            const auto q = ref.probs(s.features);
            const double kl = categorical_kl(p, q);
            for (std::size_t j = 0; j < A; ++j) {
                const double lr = p[j] > 0.0 ? std::log(p[j]) - std::log(q[j]) : 0.0;
                dz[j] -= beta * p[j] * (lr - kl);
            }
        }
        for (std::size_t i = 0; i < s.features.size(); ++i) {
            const double fi = s.features[i];
            if (fi == 0.0) continue;
            for (std::size_t j = 0; j < A; ++j) grad[i * A + j] += fi * dz[j] / params.temperature;
        }
    }
    for (auto& g : grad) g /= static_cast<double>(batch_size);
    return grad;
}

struct Baseline {
    double value = 0.0;
    bool initialized = false;
};

/// Build centered samples from a batch of episodes. The return of every
/// decision is the episode's total reward.
inline std::vector<StepSample> centered_samples(std::span<const PolicyEpisode> batch, double baseline) {
    std::vector<StepSample> out;
    for (const auto& pe : batch) {
        if (!pe.episode.rewards) throw std::invalid_argument("policy gradient: unscored episode in batch");
        const double adv = pe.episode.rewards->total - baseline;
        for (const auto& st : pe.steps) out.push_back({st.features, st.action, adv});
    }
    return out;
}

/// One REINFORCE ascent step with an EMA baseline and an analytic KL
/// penalty toward `ref`. Updates `baseline` after computing advantages.
inline PolicyParams policy_gradient_step(const PolicyParams& params, std::span<const PolicyEpisode> batch,
                                         const PolicyParams& ref, const TrainConfig& cfg, Baseline& baseline) {
    if (batch.empty()) throw std::invalid_argument("policy_gradient_step: empty batch");
    double mean_r = 0.0;
    for (const auto& pe : batch) {
        if (!pe.episode.rewards) throw std::invalid_argument("policy gradient: unscored episode in batch");
        mean_r += pe.episode.rewards->total;
    }
    mean_r /= static_cast<double>(batch.size());
    if (!baseline.initialized) {
        baseline.value = mean_r;
        baseline.initialized = true;
    }

    const auto samples = centered_samples(batch, baseline.value);
    const auto grad = surrogate_gradient(params, samples, ref, cfg.beta, batch.size());
    PolicyParams next = params;
    for (std::size_t i = 0; i < next.weights.size(); ++i) next.weights[i] += cfg.learning_rate * grad[i];
    baseline.value = cfg.baseline_momentum * baseline.value + (1.0 - cfg.baseline_momentum) * mean_r;
    return next;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct StepMetrics {
    std::size_t step = 0;
    double mean_reward = 0.0;
    double mean_cost = 0.0;
    double mean_em = 0.0;
    double mean_calls = 0.0;
    double entropy = 0.0;
    std::map<std::string, double> route_fractions;  // share of the batch's calls per model
};

inline void to_json(nlohmann::json& j, const StepMetrics& m) {
    j = nlohmann::json{{"step", m.step},         {"mean_reward", m.mean_reward}, {"mean_cost", m.mean_cost},
                       {"mean_em", m.mean_em},   {"mean_calls", m.mean_calls},   {"entropy", m.entropy},
                       {"route_fractions", m.route_fractions}};
}
inline void from_json(const nlohmann::json& j, StepMetrics& m) {
    j.at("step").get_to(m.step);
    j.at("mean_reward").get_to(m.mean_reward);
    j.at("mean_cost").get_to(m.mean_cost);
    m.mean_em = j.value("mean_em", 0.0);
    m.mean_calls = j.value("mean_calls", 0.0);
    j.at("entropy").get_to(m.entropy);
    m.route_fractions = j.value("route_fractions", std::map<std::string, double>{});
}

struct TrainReport {
    std::vector<StepMetrics> steps;
    PolicyParams final_params;
};

inline StepMetrics summarize_batch(std::size_t step, std::span<const PolicyEpisode> batch, const PolicyParams& params,
                                   const RoutingPool& pool) {
    StepMetrics m;
    m.step = step;
    std::size_t decisions = 0;
    std::size_t calls = 0;
    for (const auto& d : pool) m.route_fractions[d.id] = 0.0;
    for (const auto& pe : batch) {
        const auto& ep = pe.episode;
        m.mean_reward += ep.rewards->total;
        m.mean_cost += ep.rewards->cost_raw;
        m.mean_em += ep.rewards->outcome;
        m.mean_calls += static_cast<double>(ep.route_count);
        for (const auto& c : ep.calls) {
            m.route_fractions[c.model_id] += 1.0;
            ++calls;
        }
        for (const auto& st : pe.steps) {
            m.entropy += entropy(params.probs(st.features));
            ++decisions;
        }
    }
    const auto n = static_cast<double>(batch.size());
    m.mean_reward /= n;
    m.mean_cost /= n;
    m.mean_em /= n;
    m.mean_calls /= n;
    if (decisions > 0) m.entropy /= static_cast<double>(decisions);
    if (calls > 0)
        for (auto& [id, v] : m.route_fractions) v /= static_cast<double>(calls);
    return m;
}

template <QaTask Task>
TrainReport train(std::span<const Task> tasks, const RoutingPool& pool, const TrainConfig& cfg, RewardConfig reward_cfg,
                  const EngineConfig& engine_cfg = {}) {
    if (tasks.empty()) throw std::invalid_argument("train: no tasks");
    cfg.validate();
    reward_cfg.alpha = cfg.alpha;
    reward_cfg.validate();

    FeatureSpec spec = cfg.features;
    spec.max_steps = static_cast<std::size_t>(engine_cfg.max_routing_steps);
    PolicyParams params = PolicyParams::initial(pool, spec, cfg.temperature, cfg.answer_prior);
    const PolicyParams ref = params;
    PolicyRng rng(cfg.seed);
    CostWindow window(reward_cfg.window_capacity);
    Baseline baseline;

    TrainReport report;
    std::vector<PolicyEpisode> batch;
    batch.reserve(cfg.batch_size);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        batch.clear();
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const auto& task = tasks[rng.below(tasks.size())];
            batch.push_back(rollout_policy_episode(params, task, pool, window, engine_cfg, reward_cfg, rng));
        }
        report.steps.push_back(summarize_batch(step, batch, params, pool));
        params = policy_gradient_step(params, batch, ref, cfg, baseline);
    }
    report.final_params = std::move(params);
    return report;
}

template <QaTask Task>
TrainReport train(const std::vector<Task>& tasks, const RoutingPool& pool, const TrainConfig& cfg,
                  const RewardConfig& reward_cfg, const EngineConfig& engine_cfg = {}) {
    return train(std::span<const Task>(tasks), pool, cfg, reward_cfg, engine_cfg);
}

}  // namespace mroute
