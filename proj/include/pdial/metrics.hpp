#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdial/decoding.hpp"
#include "pdial/training.hpp"

namespace pdial {

/// Fraction of responses the heuristic labeler marks as exhibiting their persona.
double persona_accuracy(const std::vector<std::string>& responses, const std::vector<Persona>& personas,
                        const Registry& registry = Registry::defaults());

/// Corpus BLEU over character n-grams, n = 1..n_max, with brevity penalty.
double bleu(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
            std::size_t n_max = 2);

/// Multiset character overlap F1. Two empty strings score 1.
double char_f1(const std::string& candidate, const std::string& reference);
double mean_char_f1(const std::vector<std::string>& candidates, const std::vector<std::string>& references);

/// Unique over total character n-grams across the corpus.
double distinct(const std::vector<std::string>& responses, std::size_t n);
/// As distinct, but 0 for a corpus without n-grams.
double distinct_or_zero(const std::vector<std::string>& responses, std::size_t n);

/// exp of the token-weighted mean teacher-forced response NLL (predicted alpha).
template <class T>
double perplexity(const Model<T>& model, std::span<const EncodedExample> examples);

double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct EvalRecord {
    std::string response;
    std::string reference;
    double alpha_used = 0.0;
    bool persona_hit = false;
    double nll = 0.0;  // summed over the gold response tokens (EOS included)
    std::size_t tokens = 0;
};

struct EvalMetrics {
    double acc = 0.0;
    double bleu = 0.0;
    double f1 = 0.0;
    double distinct1 = 0.0;
    double distinct2 = 0.0;
    double ppl = 0.0;
};

struct EvalReport {
    std::string split;
    std::string alpha_mode;  // "predicted" or the fixed value
    EvalMetrics metrics;
    std::vector<EvalRecord> examples;
};

/// Corpus metrics from per-example records.
EvalMetrics metrics_from_records(const std::vector<EvalRecord>& records, const std::vector<Persona>& personas,
                                 const Registry& registry = Registry::defaults());

nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);

template <class T>
EvalReport evaluate(const Model<T>& model, const Vocab& vocab, const Registry& registry,
                    std::span<const TrainingExample> examples, const std::string& split, const DecodeConfig& cfg);

}  // namespace pdial
