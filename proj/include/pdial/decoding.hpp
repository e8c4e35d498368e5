#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdial/model.hpp"

namespace pdial {

enum class Strategy { greedy, top_k };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

struct DecodeConfig {
    Strategy strategy = Strategy::greedy;
    std::size_t k = 8;
    double temperature = 0.9;
    std::size_t max_tokens = 48;
    std::optional<double> alpha;  // empty: predicted
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json to_json(const DecodeConfig& c);
DecodeConfig decode_config_from_json(const nlohmann::json& j, DecodeConfig base = {});

struct Generation {
    std::string text;
    std::vector<int> tokens;        // emitted ids, EOS included when produced
    std::vector<double> log_probs;  // untempered log-probability of each emitted id
    PersonaWeight alpha;
};

/// Autoregressive decoding from BOS. E_C and E_T are computed once; at most
/// min(max_tokens, context_window) tokens are emitted. Reserved ids other
/// than EOS are never emitted.
template <class T>
Generation generate(const Model<T>& model, const Vocab& vocab, const Registry& registry, const DialogueContext& context,
                    const Persona& persona, const DecodeConfig& cfg);

/// Per-position log-probabilities of `tokens` as continuations of BOS.
template <class T>
std::vector<double> score_tokens(const Model<T>& model, const Vocab& vocab, const Registry& registry,
                                 const DialogueContext& context, const Persona& persona, double alpha,
                                 const std::vector<int>& tokens);

struct SweepRow {
    double alpha = 0.0;
    double acc = 0.0;
    double bleu = 0.0;
    double f1 = 0.0;
    double distinct1 = 0.0;
    double distinct2 = 0.0;
};

nlohmann::json to_json(const SweepRow& r);

/// Decodes the whole set once per grid value with a fixed alpha.
template <class T>
std::vector<SweepRow> alpha_sweep(const Model<T>& model, const Vocab& vocab, const Registry& registry,
                                  std::span<const TrainingExample> examples, const std::vector<double>& grid,
                                  DecodeConfig cfg);

}  // namespace pdial
