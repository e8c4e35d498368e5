#include "pdial/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace pdial {

GradcheckSetup tiny_gradcheck_setup(std::uint64_t seed, const ModelConfig* overrides) {
    CorpusConfig cc;
    cc.n_dialogues = 40;
    cc.density = 0.5;
    cc.seed = seed;
    auto corpus = generate_corpus(cc);
    auto length = [](const TrainingExample& ex) {
        std::size_t n = ex.response.size() + render_persona(ex.target_persona).size();
        for (const auto& t : ex.context.turns) n += t.utterance.text.size() + 1;
        return n;
    };
    std::stable_sort(corpus.begin(), corpus.end(),
                     [&](const TrainingExample& a, const TrainingExample& b) { return length(a) < length(b); });
    std::vector<TrainingExample> picked;
    for (int want : {1, 0}) {
        for (const auto& ex : corpus) {
            if (ex.label == want && std::find(picked.begin(), picked.end(), ex) == picked.end()) {
                picked.push_back(ex);
                break;
            }
        }
    }
    std::vector<std::string> texts;
    for (const auto& ex : picked) {
        for (const auto& t : ex.context.turns) texts.push_back(t.utterance.text);
        texts.push_back(ex.response);
        texts.push_back(render_persona(ex.target_persona));
    }
    Vocab vocab = Vocab::build(texts, 256);

    ModelConfig mc;
    if (overrides) {
        mc = *overrides;
    } else {
        mc.n_blocks = 2;
        mc.n_heads = 2;
        mc.d_model = 16;
        mc.d_ff = 32;
        mc.context_window = 48;
    }
    mc.vocab_size = vocab.size();
    mc.n_locations = cc.registry.n_locations();
    mc.n_tags = cc.registry.n_tags();
    mc.dropout = 0.0;
    Model<double> model(mc, seed);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::normal_distribution<double> jitter(0.0, 0.1);
    for (auto* p : model.parameters()) {
        for (auto& v : p->value().data) v += jitter(rng);
    }
    TrainConfig tc;
    tc.lambda1 = 0.2;
    tc.lambda2 = 0.5;
    return {vocab, std::move(model), encode_examples(picked, vocab, cc.registry, mc), tc};
}

std::vector<GradcheckResult> gradcheck_finetune(Model<double>& model, const std::vector<EncodedExample>& batch,
                                                const TrainConfig& cfg, const GradcheckOptions& opts) {
    model.set_training(false);
    AlphaPin pin;
    model.zero_grad();
    {
        const FinetuneLoss<double> loss = total_finetune_loss<double>(model, batch, cfg, &pin);
        backward(loss.total);
    }
    pin.frozen = true;
    auto eval = [&] {
        NoGradGuard ng;
        return total_finetune_loss<double>(model, batch, cfg, &pin).total.item();
    };

    std::vector<GradcheckResult> out;
    for (auto* p : model.parameters()) {
        GradcheckResult r;
        r.name = p->name();
        r.entries = p->value().size();
        std::vector<double> analytic = p->grad().data;
        if (p->name() == opts.corrupt) {
            for (auto& g : analytic) g *= 1.5;
        }
        double sq = 0.0;
        for (std::size_t i = 0; i < analytic.size(); ++i) {
            double& v = p->value().data[i];
            const double orig = v;
            v = orig + opts.step;
            const double up = eval();
            v = orig - opts.step;
            const double down = eval();
            v = orig;
            const double numeric = (up - down) / (2.0 * opts.step);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), opts.floor});
            r.max_rel_error = std::max(r.max_rel_error, std::abs(analytic[i] - numeric) / denom);
            sq += analytic[i] * analytic[i];
        }
        r.analytic_norm = std::sqrt(sq);
        r.pass = r.max_rel_error < opts.tolerance;
        out.push_back(r);
    }
    return out;
}

}  // namespace pdial
