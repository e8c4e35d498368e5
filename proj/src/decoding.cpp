#include "pdial/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "pdial/metrics.hpp"

namespace pdial {

using nlohmann::json;

std::string to_string(Strategy s) { return s == Strategy::greedy ? "greedy" : "top_k"; }

Strategy strategy_from_string(const std::string& s) {
    if (s == "greedy") return Strategy::greedy;
    if (s == "top_k") return Strategy::top_k;
    throw ValueError("unknown decoding strategy '" + s + "' (expected greedy or top_k)");
}

void DecodeConfig::validate() const {
    if (max_tokens < 1) throw ValueError("max_tokens must be at least 1");
    if (k < 1) throw ValueError("k must be at least 1");
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ValueError("temperature must be positive");
    if (alpha && !(*alpha >= 0.0 && *alpha <= 1.0)) {
        throw ValueError("alpha must be in [0, 1], got " + std::to_string(*alpha));
    }
}

json to_json(const DecodeConfig& c) {
    json j{{"strategy", to_string(c.strategy)},
           {"k", c.k},
           {"temperature", c.temperature},
           {"max_tokens", c.max_tokens},
           {"seed", c.seed}};
    j["alpha"] = c.alpha ? json(*c.alpha) : json("auto");
    return j;
}

DecodeConfig decode_config_from_json(const json& j, DecodeConfig c) {
    if (!j.is_object()) throw ValueError("decode config must be an object");
    for (const auto& [key, v] : j.items()) {
        if (key == "strategy") c.strategy = strategy_from_string(v.get<std::string>());
        else if (key == "k") c.k = v.get<std::size_t>();
        else if (key == "temperature") c.temperature = v.get<double>();
        else if (key == "max_tokens") c.max_tokens = v.get<std::size_t>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else if (key == "alpha") {
            if (v.is_string()) {
                if (v.get<std::string>() != "auto") throw ValueError("alpha must be a number or \"auto\"");
                c.alpha.reset();
            } else {
                c.alpha = v.get<double>();
            }
        } else {
            throw ValueError("unknown decode config key '" + key + "'");
        }
    }
    return c;
}

namespace {

template <class T>
std::vector<double> log_softmax_row(const Var<T>& logits, std::size_t row) {
    const std::size_t n = logits.cols();
    std::vector<double> out(n);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(logits.value()(row, j)));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(logits.value()(row, j)) - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<double>(logits.value()(row, j)) - lz;
    return out;
}

bool emittable(int id) { return id == kEos || id >= kNumReserved; }

int pick_token(const std::vector<double>& logp, const DecodeConfig& cfg, std::mt19937_64& rng) {
    std::vector<int> ids;
    for (int i = 0; i < static_cast<int>(logp.size()); ++i) {
        if (emittable(i)) ids.push_back(i);
    }
    // Highest first; ties go to the lower id.
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return logp[a] > logp[b]; });
    if (cfg.strategy == Strategy::greedy) return ids.front();
    ids.resize(std::min(ids.size(), cfg.k));
    std::vector<double> w(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) w[i] = std::exp((logp[ids[i]] - logp[ids[0]]) / cfg.temperature);
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        acc += w[i];
        if (u < acc) return ids[i];
    }
    return ids.back();
}

template <class T>
std::pair<Var<T>, Var<T>> encode_pair(const Model<T>& model, const Vocab& vocab, const Registry& registry,
                                      const DialogueContext& context, const Persona& persona) {
    if (context.turns.empty()) throw ValueError("context must contain at least one turn");
    const std::size_t window = model.config().context_window;
    Var<T> ctx = model.encode_context(build_context_input(context, vocab, registry, window));
    std::vector<int> per = persona_tokens(persona, vocab);
    if (per.size() > window) per.resize(window);
    return {ctx, model.encode_persona(per)};
}

}  // namespace

template <class T>
Generation generate(const Model<T>& model, const Vocab& vocab, const Registry& registry, const DialogueContext& context,
                    const Persona& persona, const DecodeConfig& cfg) {
    cfg.validate();
    NoGradGuard ng;
    const auto [ctx, per] = encode_pair(model, vocab, registry, context, persona);
    Generation g;
    if (cfg.alpha) {
        g.alpha = {*cfg.alpha, AlphaSource::fixed};
    } else {
        g.alpha = {model.predict_alpha(ctx).alpha, AlphaSource::predicted};
    }
    std::mt19937_64 rng(cfg.seed);
    const std::size_t limit = std::min(cfg.max_tokens, model.config().context_window);
    std::vector<int> prefix{kBos};
    while (g.tokens.size() < limit) {
        const Var<T> logits = model.decode_forward(prefix, ctx, per, g.alpha.alpha);
        const std::vector<double> logp = log_softmax_row(logits, prefix.size() - 1);
        const int next = pick_token(logp, cfg, rng);
        g.tokens.push_back(next);
        g.log_probs.push_back(logp[static_cast<std::size_t>(next)]);
        if (next == kEos) break;
        prefix.push_back(next);
    }
    std::vector<int> body = g.tokens;
    if (!body.empty() && body.back() == kEos) body.pop_back();
    g.text = vocab.decode(body);
    return g;
}

template <class T>
std::vector<double> score_tokens(const Model<T>& model, const Vocab& vocab, const Registry& registry,
                                 const DialogueContext& context, const Persona& persona, double alpha,
                                 const std::vector<int>& tokens) {
    if (tokens.empty()) return {};
    NoGradGuard ng;
    const auto [ctx, per] = encode_pair(model, vocab, registry, context, persona);
    std::vector<int> prefix{kBos};
    prefix.insert(prefix.end(), tokens.begin(), tokens.end() - 1);
    const Var<T> logits = model.decode_forward(prefix, ctx, per, alpha);
    std::vector<double> out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        out.push_back(log_softmax_row(logits, i)[static_cast<std::size_t>(tokens[i])]);
    }
    return out;
}

json to_json(const SweepRow& r) {
    return json{{"alpha", r.alpha},         {"acc", r.acc},           {"bleu", r.bleu},
                {"f1", r.f1},               {"distinct1", r.distinct1}, {"distinct2", r.distinct2}};
}

template <class T>
std::vector<SweepRow> alpha_sweep(const Model<T>& model, const Vocab& vocab, const Registry& registry,
                                  std::span<const TrainingExample> examples, const std::vector<double>& grid,
                                  DecodeConfig cfg) {
    if (grid.empty()) throw ValueError("alpha grid is empty");
    if (examples.empty()) throw ValueError("alpha sweep needs at least one example");
    std::vector<SweepRow> rows;
    for (double a : grid) {
        cfg.alpha = a;
        cfg.validate();
        std::vector<std::string> responses, references;
        std::vector<Persona> personas;
        for (const auto& ex : examples) {
            responses.push_back(generate(model, vocab, registry, ex.context, ex.target_persona, cfg).text);
            references.push_back(ex.response);
            personas.push_back(ex.target_persona);
        }
        SweepRow r;
        r.alpha = a;
        r.acc = persona_accuracy(responses, personas, registry);
        r.bleu = bleu(responses, references);
        r.f1 = mean_char_f1(responses, references);
        r.distinct1 = distinct_or_zero(responses, 1);
        r.distinct2 = distinct_or_zero(responses, 2);
        rows.push_back(r);
    }
    return rows;
}

#define PDIAL_INSTANTIATE(T)                                                                                   \
    template Generation generate<T>(const Model<T>&, const Vocab&, const Registry&, const DialogueContext&,    \
                                    const Persona&, const DecodeConfig&);                                      \
    template std::vector<double> score_tokens<T>(const Model<T>&, const Vocab&, const Registry&,               \
                                                 const DialogueContext&, const Persona&, double,               \
                                                 const std::vector<int>&);                                     \
    template std::vector<SweepRow> alpha_sweep<T>(const Model<T>&, const Vocab&, const Registry&,              \
                                                  std::span<const TrainingExample>, const std::vector<double>&, \
                                                  DecodeConfig);

PDIAL_INSTANTIATE(float)
PDIAL_INSTANTIATE(double)

#undef PDIAL_INSTANTIATE

}  // namespace pdial
