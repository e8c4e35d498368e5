#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdial/model.hpp"

namespace pdial {

struct TrainConfig {
    double lambda1 = 0.2;  // auxiliary LM loss weight
    double lambda2 = 0.5;  // weight-predictor loss weight
    double lr = 2.5e-4;
    std::size_t warmup_steps = 100;
    std::size_t batch_size = 16;
    std::size_t epochs_pretrain = 10;
    std::size_t epochs_finetune = 30;
    std::uint64_t seed = 1234;
    double clip_norm = 1.0;  // 0 disables clipping
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    bool early_stop = false;
    std::size_t patience = 3;

    static TrainConfig desk() { return {}; }
    /// 70 pre-training and 30 fine-tuning epochs.
    static TrainConfig paper();

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// A TrainingExample tokenized once for repeated passes.
struct EncodedExample {
    ContextInput context;
    std::vector<int> persona;
    std::vector<int> response;                // no BOS/EOS
    std::vector<std::vector<int>> utterances;  // BOS + utterance + EOS, one per context turn
    int label = 0;
};

EncodedExample encode_example(const TrainingExample& ex, const Vocab& vocab, const Registry& registry,
                              const ModelConfig& cfg);
std::vector<EncodedExample> encode_examples(const std::vector<TrainingExample>& exs, const Vocab& vocab,
                                            const Registry& registry, const ModelConfig& cfg);

/// Decoder input (BOS + response) and targets (response + EOS), clipped to the window.
std::pair<std::vector<int>, std::vector<int>> teacher_forcing_pair(const std::vector<int>& response,
                                                                   std::size_t window);

/// Token-weighted mean next-token NLL over the sequences; PAD targets ignored.
template <class T>
Var<T> lm_loss(const Model<T>& model, const std::vector<std::vector<int>>& batch);

/// Teacher-forced response NLL conditioned on E_C, E_T and the predicted alpha.
template <class T>
Var<T> dialogue_loss(const Model<T>& model, std::span<const EncodedExample> batch);

/// Binary cross-entropy of the predicted alpha against the heuristic labels.
template <class T>
Var<T> weight_loss(const Model<T>& model, std::span<const EncodedExample> batch);

/// Alpha values used by the dialogue term. When `frozen` is set the stored
/// values replace the predictor output (the predictor still feeds the weight
/// term); otherwise the values used are recorded.
struct AlphaPin {
    std::vector<double> values;
    bool frozen = false;
};

template <class T>
struct FinetuneLoss {
    Var<T> total;
    double dialogue = 0.0;
    double lm = 0.0;
    double weight = 0.0;
    double total_value = 0.0;  // dialogue + lambda1*lm + lambda2*weight, in double
    std::size_t response_tokens = 0;
    std::size_t lm_tokens = 0;
};

/// L_D + lambda1 * L_LM + lambda2 * L_W. The dialogue term sees alpha as a
/// constant, so with lambda2 = 0 the predictor receives no gradient.
template <class T>
FinetuneLoss<T> total_finetune_loss(const Model<T>& model, std::span<const EncodedExample> batch,
                                    const TrainConfig& cfg, AlphaPin* pin = nullptr);

/// Sum of response NLL and token count (no-grad, predicted alpha).
template <class T>
std::pair<double, std::size_t> dialogue_nll(const Model<T>& model, std::span<const EncodedExample> examples);

template <class T>
class Adam {
public:
    Adam(std::vector<Parameter<T>*> params, const TrainConfig& cfg);
    void step(double lr);
    std::size_t steps() const { return t_; }

private:
    std::vector<Parameter<T>*> params_;
    std::vector<std::vector<T>> m_, v_;
    double beta1_, beta2_, eps_, weight_decay_;
    std::size_t t_ = 0;
};

/// Linear warmup to cfg.lr over cfg.warmup_steps, then constant.
double learning_rate(const TrainConfig& cfg, std::size_t step);

/// Rescales grads so the global L2 norm is at most max_norm; returns the pre-clip norm.
template <class T>
double clip_grad_norm(const std::vector<Parameter<T>*>& params, double max_norm);

struct PretrainReport {
    std::vector<double> epoch_loss;
    std::size_t steps = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double loss_total = 0.0;
    double loss_d = 0.0;
    double loss_lm = 0.0;
    double loss_w = 0.0;
    double val_ppl = 0.0;
    double predictor_acc = 0.0;
};

nlohmann::json to_json(const EpochRecord& r);

struct FinetuneReport {
    std::vector<EpochRecord> epochs;
    std::size_t steps = 0;
};

/// Splits a token stream into (window + 1)-token chunks for next-token training.
std::vector<std::vector<int>> chunk_tokens(const std::vector<int>& stream, std::size_t window);

template <class T>
PretrainReport pretrain(Model<T>& model, const std::vector<std::vector<int>>& chunks, const TrainConfig& cfg,
                        const std::function<void(std::size_t, double)>& on_epoch = {});

template <class T>
FinetuneReport finetune(Model<T>& model, const std::vector<EncodedExample>& train,
                        const std::vector<EncodedExample>& valid, const TrainConfig& cfg,
                        const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Fraction of examples whose predicted alpha falls on the side of 0.5 that
/// matches the heuristic label.
template <class T>
double predictor_accuracy(const Model<T>& model, std::span<const EncodedExample> examples);

}  // namespace pdial
