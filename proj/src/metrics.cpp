#include "pdial/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace pdial {

using nlohmann::json;

double persona_accuracy(const std::vector<std::string>& responses, const std::vector<Persona>& personas,
                        const Registry& registry) {
    if (responses.empty()) throw ValueError("persona_accuracy: empty response set");
    if (responses.size() != personas.size()) throw ValueError("persona_accuracy: responses and personas differ in length");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < responses.size(); ++i) hits += heuristic_label(responses[i], personas[i], registry);
    return static_cast<double>(hits) / static_cast<double>(responses.size());
}

namespace {

std::map<std::u32string, std::size_t> ngram_counts(const std::u32string& s, std::size_t n) {
    std::map<std::u32string, std::size_t> out;
    for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[s.substr(i, n)];
    return out;
}

}  // namespace

double bleu(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
            std::size_t n_max) {
    if (candidates.empty()) throw ValueError("bleu: empty candidate set");
    if (candidates.size() != references.size()) throw ValueError("bleu: candidates and references differ in length");
    if (n_max < 1) throw ValueError("bleu: n_max must be at least 1");
    std::vector<std::size_t> matched(n_max, 0), total(n_max, 0);
    std::size_t cand_len = 0, ref_len = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const std::u32string c = utf8_decode(candidates[i]);
        const std::u32string r = utf8_decode(references[i]);
        cand_len += c.size();
        ref_len += r.size();
        for (std::size_t n = 1; n <= n_max; ++n) {
            const auto cc = ngram_counts(c, n);
            const auto rc = ngram_counts(r, n);
            for (const auto& [g, k] : cc) {
                total[n - 1] += k;
                const auto it = rc.find(g);
                if (it != rc.end()) matched[n - 1] += std::min(k, it->second);
            }
        }
    }
    double log_sum = 0.0;
    for (std::size_t n = 0; n < n_max; ++n) {
        if (total[n] == 0 || matched[n] == 0) return 0.0;
        log_sum += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
    }
    const double bp = cand_len >= ref_len
                          ? 1.0
                          : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
    return bp * std::exp(log_sum / static_cast<double>(n_max));
}

double char_f1(const std::string& candidate, const std::string& reference) {
    const std::u32string c = utf8_decode(candidate);
    const std::u32string r = utf8_decode(reference);
    if (c.empty() && r.empty()) return 1.0;
    std::map<char32_t, std::size_t> rc;
    for (char32_t ch : r) ++rc[ch];
    std::size_t overlap = 0;
    for (char32_t ch : c) {
        auto it = rc.find(ch);
        if (it != rc.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    const double p = static_cast<double>(overlap) / static_cast<double>(c.size());
    const double rcl = static_cast<double>(overlap) / static_cast<double>(r.size());
    return 2.0 * p * rcl / (p + rcl);
}

double mean_char_f1(const std::vector<std::string>& candidates, const std::vector<std::string>& references) {
    if (candidates.empty()) throw ValueError("char_f1: empty candidate set");
    if (candidates.size() != references.size()) throw ValueError("char_f1: candidates and references differ in length");
    double s = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) s += char_f1(candidates[i], references[i]);
    return s / static_cast<double>(candidates.size());
}

double distinct(const std::vector<std::string>& responses, std::size_t n) {
    if (n < 1) throw ValueError("distinct: n must be at least 1");
    std::set<std::u32string> unique;
    std::size_t total = 0;
    for (const auto& r : responses) {
        const std::u32string s = utf8_decode(r);
        for (std::size_t i = 0; i + n <= s.size(); ++i) {
            unique.insert(s.substr(i, n));
            ++total;
        }
    }
    if (total == 0) throw ValueError("distinct: corpus has no " + std::to_string(n) + "-grams");
    return static_cast<double>(unique.size()) / static_cast<double>(total);
}

double distinct_or_zero(const std::vector<std::string>& responses, std::size_t n) {
    try {
        return distinct(responses, n);
    } catch (const ValueError&) {
        return 0.0;
    }
}

template <class T>
double perplexity(const Model<T>& model, std::span<const EncodedExample> examples) {
    const auto [nll, tokens] = dialogue_nll(model, examples);
    if (tokens == 0) throw ValueError("perplexity: no response tokens");
    return std::exp(nll / static_cast<double>(tokens));
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ValueError("spearman: need two equal-length series of length >= 2");
    const auto rx = ranks(x), ry = ranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

EvalMetrics metrics_from_records(const std::vector<EvalRecord>& records, const std::vector<Persona>& personas,
                                 const Registry& registry) {
    if (records.empty()) throw ValueError("no evaluation records");
    std::vector<std::string> responses, references;
    double nll = 0.0;
    std::size_t tokens = 0;
    for (const auto& r : records) {
        responses.push_back(r.response);
        references.push_back(r.reference);
        nll += r.nll;
        tokens += r.tokens;
    }
    EvalMetrics m;
    m.acc = persona_accuracy(responses, personas, registry);
    m.bleu = bleu(responses, references);
    m.f1 = mean_char_f1(responses, references);
    m.distinct1 = distinct_or_zero(responses, 1);
    m.distinct2 = distinct_or_zero(responses, 2);
    m.ppl = tokens == 0 ? 0.0 : std::exp(nll / static_cast<double>(tokens));
    return m;
}

json to_json(const EvalReport& r) {
    json examples = json::array();
    for (const auto& e : r.examples) {
        examples.push_back({{"response", e.response},
                            {"reference", e.reference},
                            {"alpha_used", e.alpha_used},
                            {"persona_hit", e.persona_hit},
                            {"nll", e.nll},
                            {"tokens", e.tokens}});
    }
    return json{{"split", r.split},
                {"alpha_mode", r.alpha_mode},
                {"persona_metric", "heuristic attribute oracle (rule labeler), not a trained classifier"},
                {"metrics",
                 {{"acc", r.metrics.acc},
                  {"bleu", r.metrics.bleu},
                  {"f1", r.metrics.f1},
                  {"distinct1", r.metrics.distinct1},
                  {"distinct2", r.metrics.distinct2},
                  {"ppl", r.metrics.ppl}}},
                {"examples", examples}};
}

EvalReport eval_report_from_json(const json& j) {
    EvalReport r;
    r.split = j.at("split").get<std::string>();
    r.alpha_mode = j.at("alpha_mode").get<std::string>();
    const auto& m = j.at("metrics");
    r.metrics = {m.at("acc").get<double>(),       m.at("bleu").get<double>(),      m.at("f1").get<double>(),
                 m.at("distinct1").get<double>(), m.at("distinct2").get<double>(), m.at("ppl").get<double>()};
    for (const auto& e : j.at("examples")) {
        r.examples.push_back({e.at("response").get<std::string>(), e.at("reference").get<std::string>(),
                              e.at("alpha_used").get<double>(), e.at("persona_hit").get<bool>(),
                              e.at("nll").get<double>(), e.at("tokens").get<std::size_t>()});
    }
    return r;
}

template <class T>
EvalReport evaluate(const Model<T>& model, const Vocab& vocab, const Registry& registry,
                    std::span<const TrainingExample> examples, const std::string& split, const DecodeConfig& cfg) {
    if (examples.empty()) throw ValueError("evaluation split '" + split + "' is empty");
    EvalReport report;
    report.split = split;
    report.alpha_mode = cfg.alpha ? json(*cfg.alpha).dump() : "predicted";
    std::vector<Persona> personas;
    for (const auto& ex : examples) {
        const Generation g = generate(model, vocab, registry, ex.context, ex.target_persona, cfg);
        const EncodedExample enc = encode_example(ex, vocab, registry, model.config());
        EvalRecord rec;
        rec.response = g.text;
        rec.reference = ex.response;
        rec.alpha_used = g.alpha.alpha;
        rec.persona_hit = heuristic_label(g.text, ex.target_persona, registry) == 1;
        const auto [nll, tokens] = dialogue_nll(model, std::span<const EncodedExample>(&enc, 1));
        rec.nll = nll;
        rec.tokens = tokens;
        report.examples.push_back(std::move(rec));
        personas.push_back(ex.target_persona);
    }
    report.metrics = metrics_from_records(report.examples, personas, registry);
    return report;
}

template double perplexity<float>(const Model<float>&, std::span<const EncodedExample>);
template double perplexity<double>(const Model<double>&, std::span<const EncodedExample>);
template EvalReport evaluate<float>(const Model<float>&, const Vocab&, const Registry&, std::span<const TrainingExample>,
                                    const std::string&, const DecodeConfig&);
template EvalReport evaluate<double>(const Model<double>&, const Vocab&, const Registry&,
                                     std::span<const TrainingExample>, const std::string&, const DecodeConfig&);

}  // namespace pdial
