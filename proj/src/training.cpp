#include "pdial/training.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>

namespace pdial {

using nlohmann::json;

TrainConfig TrainConfig::paper() {
    TrainConfig c;
    c.epochs_pretrain = 70;
    c.epochs_finetune = 30;
    return c;
}

void TrainConfig::validate() const {
    if (lambda1 < 0.0 || lambda2 < 0.0) throw ValueError("loss weights lambda1/lambda2 must be non-negative");
    if (batch_size == 0) throw ValueError("batch_size must be at least 1");
    if (!(lr > 0.0)) throw ValueError("learning rate must be positive");
    if (clip_norm < 0.0) throw ValueError("clip_norm must be non-negative");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ValueError("Adam betas must be in [0, 1)");
    if (!(adam_eps > 0.0)) throw ValueError("adam_eps must be positive");
    if (weight_decay < 0.0) throw ValueError("weight_decay must be non-negative");
}

json to_json(const TrainConfig& c) {
    return json{{"lambda1", c.lambda1},
                {"lambda2", c.lambda2},
                {"lr", c.lr},
                {"warmup_steps", c.warmup_steps},
                {"batch_size", c.batch_size},
                {"epochs_pretrain", c.epochs_pretrain},
                {"epochs_finetune", c.epochs_finetune},
                {"seed", c.seed},
                {"clip_norm", c.clip_norm},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"adam_eps", c.adam_eps},
                {"weight_decay", c.weight_decay},
                {"early_stop", c.early_stop},
                {"patience", c.patience}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
    if (!j.is_object()) throw ValueError("train config must be an object");
    for (const auto& [k, v] : j.items()) {
        if (k == "lambda1") c.lambda1 = v.get<double>();
        else if (k == "lambda2") c.lambda2 = v.get<double>();
        else if (k == "lr") c.lr = v.get<double>();
        else if (k == "warmup_steps") c.warmup_steps = v.get<std::size_t>();
        else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
        else if (k == "epochs_pretrain") c.epochs_pretrain = v.get<std::size_t>();
        else if (k == "epochs_finetune") c.epochs_finetune = v.get<std::size_t>();
        else if (k == "seed") c.seed = v.get<std::uint64_t>();
        else if (k == "clip_norm") c.clip_norm = v.get<double>();
        else if (k == "beta1") c.beta1 = v.get<double>();
        else if (k == "beta2") c.beta2 = v.get<double>();
        else if (k == "adam_eps") c.adam_eps = v.get<double>();
        else if (k == "weight_decay") c.weight_decay = v.get<double>();
        else if (k == "early_stop") c.early_stop = v.get<bool>();
        else if (k == "patience") c.patience = v.get<std::size_t>();
        else throw ValueError("unknown train config key '" + k + "'");
    }
    return c;
}

EncodedExample encode_example(const TrainingExample& ex, const Vocab& vocab, const Registry& registry,
                              const ModelConfig& cfg) {
    EncodedExample e;
    e.context = build_context_input(ex.context, vocab, registry, cfg.context_window);
    e.persona = persona_tokens(ex.target_persona, vocab);
    if (e.persona.size() > cfg.context_window) e.persona.resize(cfg.context_window);
    e.response = vocab.encode(ex.response, false);
    for (const auto& t : ex.context.turns) {
        auto seq = vocab.encode(t.utterance.text, true);
        if (seq.size() > cfg.context_window + 1) seq.resize(cfg.context_window + 1);
        e.utterances.push_back(std::move(seq));
    }
    e.label = ex.label;
    return e;
}

std::vector<EncodedExample> encode_examples(const std::vector<TrainingExample>& exs, const Vocab& vocab,
                                            const Registry& registry, const ModelConfig& cfg) {
    std::vector<EncodedExample> out;
    out.reserve(exs.size());
    for (const auto& ex : exs) out.push_back(encode_example(ex, vocab, registry, cfg));
    return out;
}

std::pair<std::vector<int>, std::vector<int>> teacher_forcing_pair(const std::vector<int>& response,
                                                                   std::size_t window) {
    std::vector<int> in{kBos};
    in.insert(in.end(), response.begin(), response.end());
    std::vector<int> tg(response.begin(), response.end());
    tg.push_back(kEos);
    if (in.size() > window) {
        in.resize(window);
        tg.resize(window);
    }
    return {std::move(in), std::move(tg)};
}

namespace {

std::size_t count_targets(std::span<const int> targets) {
    return static_cast<std::size_t>(std::count_if(targets.begin(), targets.end(), [](int t) { return t != kPad; }));
}

template <class T>
Var<T> weighted_mean(const std::vector<Var<T>>& terms, const std::vector<std::size_t>& counts) {
    const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
    std::vector<double> w;
    w.reserve(counts.size());
    for (std::size_t c : counts) w.push_back(static_cast<double>(c) / total);
    return linear_combination<T>(terms, w);
}

void warn_empty_response() {
    static thread_local bool warned = false;
    if (!warned) {
        std::cerr << "warning: skipping example with empty response\n";
        warned = true;
    }
}

}  // namespace

template <class T>
Var<T> lm_loss(const Model<T>& model, const std::vector<std::vector<int>>& batch) {
    const std::size_t window = model.config().context_window;
    std::vector<Var<T>> terms;
    std::vector<std::size_t> counts;
    for (const auto& seq : batch) {
        if (seq.size() < 2) continue;
        const std::size_t len = std::min(seq.size(), window + 1);
        std::vector<int> in(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(len - 1));
        std::vector<int> tg(seq.begin() + 1, seq.begin() + static_cast<std::ptrdiff_t>(len));
        const std::size_t n = count_targets(tg);
        if (n == 0) continue;
        terms.push_back(cross_entropy(model.lm_forward(in), tg, kPad));
        counts.push_back(n);
    }
    if (terms.empty()) throw ValueError("lm_loss: batch has no predictable tokens");
    return weighted_mean(terms, counts);
}

template <class T>
Var<T> dialogue_loss(const Model<T>& model, std::span<const EncodedExample> batch) {
    std::vector<Var<T>> terms;
    std::vector<std::size_t> counts;
    for (const auto& ex : batch) {
        if (ex.response.empty()) {
            warn_empty_response();
            continue;
        }
        const Var<T> ctx = model.encode_context(ex.context);
        const Var<T> per = model.encode_persona(ex.persona);
        const double alpha = model.predict_alpha(ctx).alpha;
        auto [in, tg] = teacher_forcing_pair(ex.response, model.config().context_window);
        terms.push_back(cross_entropy(model.decode_forward(in, ctx, per, alpha), tg));
        counts.push_back(tg.size());
    }
    if (terms.empty()) throw ValueError("dialogue_loss: every response in the batch is empty");
    return weighted_mean(terms, counts);
}

template <class T>
Var<T> weight_loss(const Model<T>& model, std::span<const EncodedExample> batch) {
    if (batch.empty()) throw ValueError("weight_loss: empty batch");
    std::vector<Var<T>> logits;
    std::vector<double> labels;
    for (const auto& ex : batch) {
        logits.push_back(model.predict_alpha(model.encode_context(ex.context)).logit);
        labels.push_back(static_cast<double>(ex.label));
    }
    return bce_with_logits(concat_cols<T>(logits), labels);
}

template <class T>
FinetuneLoss<T> total_finetune_loss(const Model<T>& model, std::span<const EncodedExample> batch,
                                    const TrainConfig& cfg, AlphaPin* pin) {
    if (batch.empty()) throw ValueError("total_finetune_loss: empty batch");
    if (pin && pin->frozen && pin->values.size() != batch.size()) {
        throw ValueError("alpha pin has " + std::to_string(pin->values.size()) + " values for a batch of " +
                         std::to_string(batch.size()));
    }
    if (pin && !pin->frozen) pin->values.clear();

    std::vector<Var<T>> d_terms;
    std::vector<std::size_t> d_counts;
    std::vector<Var<T>> w_logits;
    std::vector<double> labels;
    std::vector<std::vector<int>> utterances;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& ex = batch[i];
        const Var<T> ctx = model.encode_context(ex.context);
        const AlphaPrediction<T> pred = model.predict_alpha(ctx);
        w_logits.push_back(pred.logit);
        labels.push_back(static_cast<double>(ex.label));
        utterances.insert(utterances.end(), ex.utterances.begin(), ex.utterances.end());
        double alpha = pred.alpha;
        if (pin) {
            if (pin->frozen) alpha = pin->values[i];
            else pin->values.push_back(alpha);
        }
        if (ex.response.empty()) {
            warn_empty_response();
            continue;
        }
        const Var<T> per = model.encode_persona(ex.persona);
        auto [in, tg] = teacher_forcing_pair(ex.response, model.config().context_window);
        d_terms.push_back(cross_entropy(model.decode_forward(in, ctx, per, alpha), tg));
        d_counts.push_back(tg.size());
    }
    if (d_terms.empty()) throw ValueError("total_finetune_loss: every response in the batch is empty");

    FinetuneLoss<T> out;
    const Var<T> d = weighted_mean(d_terms, d_counts);
    const Var<T> w = bce_with_logits(concat_cols<T>(w_logits), labels);
    out.dialogue = static_cast<double>(d.item());
    out.weight = static_cast<double>(w.item());
    out.response_tokens = std::accumulate(d_counts.begin(), d_counts.end(), std::size_t{0});

    std::vector<Var<T>> terms{d};
    std::vector<double> coefs{1.0};
    if (cfg.lambda1 > 0.0) {
        const Var<T> lm = lm_loss(model, utterances);
        out.lm = static_cast<double>(lm.item());
        terms.push_back(lm);
        coefs.push_back(cfg.lambda1);
    } else {
        NoGradGuard ng;
        out.lm = static_cast<double>(lm_loss(model, utterances).item());
    }
    for (const auto& u : utterances) out.lm_tokens += u.size() > 1 ? u.size() - 1 : 0;
    if (cfg.lambda2 > 0.0) {
        terms.push_back(w);
        coefs.push_back(cfg.lambda2);
    }
    out.total = linear_combination<T>(terms, coefs);
    out.total_value = out.dialogue + cfg.lambda1 * out.lm + cfg.lambda2 * out.weight;
    return out;
}

template <class T>
std::pair<double, std::size_t> dialogue_nll(const Model<T>& model, std::span<const EncodedExample> examples) {
    NoGradGuard ng;
    double nll = 0.0;
    std::size_t tokens = 0;
    for (const auto& ex : examples) {
        if (ex.response.empty()) continue;
        const Var<T> ctx = model.encode_context(ex.context);
        const Var<T> per = model.encode_persona(ex.persona);
        const double alpha = model.predict_alpha(ctx).alpha;
        auto [in, tg] = teacher_forcing_pair(ex.response, model.config().context_window);
        const double ce = static_cast<double>(cross_entropy(model.decode_forward(in, ctx, per, alpha), tg).item());
        nll += ce * static_cast<double>(tg.size());
        tokens += tg.size();
    }
    return {nll, tokens};
}

template <class T>
Adam<T>::Adam(std::vector<Parameter<T>*> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay) {
    for (auto* p : params_) {
        m_.emplace_back(p->value().size(), T(0));
        v_.emplace_back(p->value().size(), T(0));
    }
}

template <class T>
void Adam<T>::step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T step_size = static_cast<T>(lr / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(eps_);
    const T decay = static_cast<T>(lr * weight_decay_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& val = params_[k]->value().data;
        const auto& g = params_[k]->grad().data;
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < val.size(); ++i) {
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            if (decay != T(0)) val[i] -= decay * val[i];
            val[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
        }
    }
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
    if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return cfg.lr;
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
}

template <class T>
double clip_grad_norm(const std::vector<Parameter<T>*>& params, double max_norm) {
    double sq = 0.0;
    for (const auto* p : params) {
        for (T g : p->grad().data) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericalError("gradient norm is not finite");
    if (max_norm > 0.0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / (norm + 1e-12));
        for (auto* p : params) {
            for (auto& g : p->grad().data) g *= s;
        }
    }
    return norm;
}

json to_json(const EpochRecord& r) {
    return json{{"epoch", r.epoch},     {"loss_total", r.loss_total}, {"loss_d", r.loss_d},
                {"loss_lm", r.loss_lm}, {"loss_w", r.loss_w},         {"val_ppl", r.val_ppl},
                {"predictor_acc", r.predictor_acc}};
}

std::vector<std::vector<int>> chunk_tokens(const std::vector<int>& stream, std::size_t window) {
    std::vector<std::vector<int>> out;
    if (window == 0) return out;
    for (std::size_t start = 0; start + 1 < stream.size(); start += window) {
        const std::size_t end = std::min(stream.size(), start + window + 1);
        out.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(start),
                         stream.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

template <class T>
PretrainReport pretrain(Model<T>& model, const std::vector<std::vector<int>>& chunks, const TrainConfig& cfg,
                        const std::function<void(std::size_t, double)>& on_epoch) {
    cfg.validate();
    PretrainReport report;
    if (cfg.epochs_pretrain == 0) return report;
    if (chunks.empty()) throw ValueError("pretrain: no training text");
    auto params = model.parameters();
    Adam<T> opt(params, cfg);
    std::mt19937_64 rng(cfg.seed);
    model.reseed_dropout(cfg.seed);
    model.set_training(true);
    std::vector<std::size_t> order(chunks.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 1; epoch <= cfg.epochs_pretrain; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t token_sum = 0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            std::vector<std::vector<int>> batch;
            std::size_t tokens = 0;
            for (std::size_t k = b; k < std::min(order.size(), b + cfg.batch_size); ++k) {
                batch.push_back(chunks[order[k]]);
                tokens += count_targets(std::span<const int>(batch.back()).subspan(1));
            }
            model.zero_grad();
            const Var<T> loss = lm_loss(model, batch);
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv)) {
                throw NumericalError("pretrain: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                     std::to_string(report.steps));
            }
            backward(loss);
            clip_grad_norm(params, cfg.clip_norm);
            opt.step(learning_rate(cfg, report.steps));
            ++report.steps;
            loss_sum += lv * static_cast<double>(tokens);
            token_sum += tokens;
        }
        const double epoch_loss = loss_sum / static_cast<double>(std::max<std::size_t>(token_sum, 1));
        report.epoch_loss.push_back(epoch_loss);
        if (on_epoch) on_epoch(epoch, epoch_loss);
    }
    model.set_training(false);
    return report;
}

template <class T>
double predictor_accuracy(const Model<T>& model, std::span<const EncodedExample> examples) {
    if (examples.empty()) return 0.0;
    NoGradGuard ng;
    std::size_t hits = 0;
    for (const auto& ex : examples) {
        const double a = model.predict_alpha(model.encode_context(ex.context)).alpha;
        if ((a > 0.5 ? 1 : 0) == ex.label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(examples.size());
}

template <class T>
FinetuneReport finetune(Model<T>& model, const std::vector<EncodedExample>& train,
                        const std::vector<EncodedExample>& valid, const TrainConfig& cfg,
                        const std::function<void(const EpochRecord&)>& on_epoch) {
    cfg.validate();
    FinetuneReport report;
    if (cfg.epochs_finetune == 0) return report;
    if (train.empty()) throw ValueError("finetune: empty training split");
    auto params = model.parameters();
    Adam<T> opt(params, cfg);
    std::mt19937_64 rng(cfg.seed);
    model.reseed_dropout(cfg.seed);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    double best_ppl = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs_finetune; ++epoch) {
        model.set_training(true);
        std::shuffle(order.begin(), order.end(), rng);
        double d_sum = 0.0, lm_sum = 0.0, w_sum = 0.0;
        std::size_t batches = 0;
        std::vector<EncodedExample> batch;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            batch.clear();
            for (std::size_t k = b; k < std::min(order.size(), b + cfg.batch_size); ++k) batch.push_back(train[order[k]]);
            model.zero_grad();
            const FinetuneLoss<T> loss = total_finetune_loss<T>(model, batch, cfg);
            if (!std::isfinite(loss.total_value)) {
                throw NumericalError("finetune: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                     std::to_string(report.steps));
            }
            backward(loss.total);
            clip_grad_norm(params, cfg.clip_norm);
            opt.step(learning_rate(cfg, report.steps));
            ++report.steps;
            d_sum += loss.dialogue;
            lm_sum += loss.lm;
            w_sum += loss.weight;
            ++batches;
        }
        model.set_training(false);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss_d = d_sum / static_cast<double>(batches);
        rec.loss_lm = lm_sum / static_cast<double>(batches);
        rec.loss_w = w_sum / static_cast<double>(batches);
        rec.loss_total = rec.loss_d + cfg.lambda1 * rec.loss_lm + cfg.lambda2 * rec.loss_w;
        if (!valid.empty()) {
            const auto [nll, tokens] = dialogue_nll<T>(model, valid);
            rec.val_ppl = std::exp(nll / static_cast<double>(std::max<std::size_t>(tokens, 1)));
            rec.predictor_acc = predictor_accuracy<T>(model, valid);
        }
        report.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (cfg.early_stop && !valid.empty()) {
            if (rec.val_ppl < best_ppl) {
                best_ppl = rec.val_ppl;
                since_best = 0;
            } else if (++since_best >= cfg.patience) {
                break;
            }
        }
    }
    return report;
}

#define PDIAL_INSTANTIATE(T)                                                                                  \
    template Var<T> lm_loss<T>(const Model<T>&, const std::vector<std::vector<int>>&);                        \
    template Var<T> dialogue_loss<T>(const Model<T>&, std::span<const EncodedExample>);                       \
    template Var<T> weight_loss<T>(const Model<T>&, std::span<const EncodedExample>);                         \
    template FinetuneLoss<T> total_finetune_loss<T>(const Model<T>&, std::span<const EncodedExample>,         \
                                                    const TrainConfig&, AlphaPin*);                           \
    template std::pair<double, std::size_t> dialogue_nll<T>(const Model<T>&, std::span<const EncodedExample>); \
    template class Adam<T>;                                                                                   \
    template double clip_grad_norm<T>(const std::vector<Parameter<T>*>&, double);                             \
    template PretrainReport pretrain<T>(Model<T>&, const std::vector<std::vector<int>>&, const TrainConfig&,  \
                                        const std::function<void(std::size_t, double)>&);                     \
    template FinetuneReport finetune<T>(Model<T>&, const std::vector<EncodedExample>&,                        \
                                        const std::vector<EncodedExample>&, const TrainConfig&,               \
                                        const std::function<void(const EpochRecord&)>&);                      \
    template double predictor_accuracy<T>(const Model<T>&, std::span<const EncodedExample>);

PDIAL_INSTANTIATE(float)
PDIAL_INSTANTIATE(double)

#undef PDIAL_INSTANTIATE

}  // namespace pdial
