#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdial/autograd.hpp"
#include "pdial/data.hpp"
#include "pdial/vocab.hpp"

namespace pdial {

/// How the three attention routes are merged.
///   verbatim:   a*O_T + (1-a)*O_C + O_C + O_prev
///   simplified: a*O_T + (1-a)*O_C + O_prev
enum class MergeVariant { verbatim, simplified };

std::string to_string(MergeVariant v);
MergeVariant merge_variant_from_string(const std::string& s);

struct ModelConfig {
    std::size_t n_blocks = 2;
    std::size_t n_heads = 2;
    std::size_t d_model = 64;
    std::size_t d_ff = 256;
    std::size_t context_window = 128;
    std::size_t vocab_size = 0;
    std::size_t n_genders = 3;
    std::size_t n_locations = 13;
    std::size_t n_tags = 12;
    MergeVariant merge_variant = MergeVariant::verbatim;
    double init_std = 0.02;
    double dropout = 0.0;
    double ln_eps = 1e-5;

    /// 2 blocks x 64 wide; trains on one core.
    static ModelConfig desk();
    /// 12 blocks, 12 heads, 768 wide, window 512, 13,084 characters.
    static ModelConfig paper();

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
/// Unknown keys are rejected.
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Per-token speaker attributes aligned with a context token stream.
struct AttributeIds {
    std::vector<std::size_t> gender;
    std::vector<std::size_t> location;
    std::vector<std::vector<std::size_t>> tags;

    std::size_t size() const { return gender.size(); }
};

struct ContextInput {
    std::vector<int> tokens;
    AttributeIds attrs;
};

/// Joins the turns with SPE separators, oldest turns dropped first when the
/// stream would exceed `max_len`. A separator carries the attributes of the
/// segment that follows it.
ContextInput build_context_input(const DialogueContext& ctx, const Vocab& vocab, const Registry& registry,
                                 std::size_t max_len);

std::vector<int> persona_tokens(const Persona& p, const Vocab& vocab);

enum class AlphaSource { predicted, fixed };

struct PersonaWeight {
    double alpha = 0.5;
    AlphaSource source = AlphaSource::predicted;
};

template <class T>
struct RouteOutputs {
    Var<T> persona;  // O_T
    Var<T> context;  // O_C
    Var<T> self;     // O_prev
    Var<T> merged;   // O_merge
    double alpha = 0.0;
};

template <class T>
struct AlphaPrediction {
    double alpha = 0.5;
    Var<T> logit;  // [1 x 1], pre-sigmoid
};

/// Merge coefficients applied to (O_T, O_C, O_C, O_prev) resp. (O_T, O_C, O_prev).
std::vector<double> merge_coefficients(MergeVariant v, double alpha);

/// Encoder and decoder share one stack of blocks; the encoder runs it with
/// unmasked self-attention, the decoder with the three-route attention.
template <class T>
class Model {
public:
    Model(ModelConfig cfg, std::uint64_t seed);

    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;

    const ModelConfig& config() const { return cfg_; }

    std::vector<Parameter<T>*> parameters();
    std::vector<const Parameter<T>*> parameters() const;
    Parameter<T>* find(const std::string& name);
    const Parameter<T>* find(const std::string& name) const;
    /// Predictor (weight network) parameters only.
    std::vector<Parameter<T>*> predictor_parameters();
    void zero_grad();

    /// Enables dropout (when configured). Inference paths leave it off.
    void set_training(bool on) { training_ = on; }
    bool training() const { return training_; }
    void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

    Var<T> embed_context(const std::vector<int>& tokens, const AttributeIds& attrs) const;
    /// Word + positional embeddings only.
    Var<T> embed_tokens(const std::vector<int>& tokens) const;

    /// E_C
    Var<T> encode_context(const ContextInput& input) const;
    Var<T> encode_context(const DialogueContext& ctx, const Vocab& vocab, const Registry& registry) const;
    /// E_T
    Var<T> encode_persona(const std::vector<int>& tokens) const;
    Var<T> encode_persona(const Persona& p, const Vocab& vocab) const;

    /// Three attention reads from `prev` (queries) inside block `block`. Null
    /// persona/context inputs drop those routes, leaving O_merge = O_prev.
    RouteOutputs<T> attention_route(std::size_t block, const Var<T>& prev, const Var<T>* persona,
                                    const Var<T>* context, double alpha, bool causal) const;

    AlphaPrediction<T> predict_alpha(const Var<T>& context_encoding) const;

    /// Logits [len x vocab] for a response prefix (starting with BOS).
    Var<T> decode_forward(const std::vector<int>& prefix, const Var<T>& context_encoding,
                          const Var<T>& persona_encoding, double alpha,
                          std::vector<RouteOutputs<T>>* trace = nullptr) const;

    /// Causal LM over the shared stack (self route only).
    Var<T> lm_forward(const std::vector<int>& tokens) const;

private:
    struct Block {
        Parameter<T>*wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
        Parameter<T>*ln1_g, *ln1_b, *w1, *b1, *w2, *b2, *ln2_g, *ln2_b;
    };

    Parameter<T>* add_param(const std::string& name, Tensor<T> init);
    Tensor<T> normal(Shape s, double stddev);

    Var<T> attend(const Block& b, const Var<T>& q, const Var<T>& source, bool causal) const;
    Var<T> block_forward(std::size_t i, const Var<T>& x, const Var<T>* persona, const Var<T>* context, double alpha,
                         bool causal, RouteOutputs<T>* trace) const;
    Var<T> run_stack(Var<T> x, const Var<T>* persona, const Var<T>* context, double alpha, bool causal,
                     std::vector<RouteOutputs<T>>* trace) const;
    Var<T> maybe_dropout(const Var<T>& x) const;

    ModelConfig cfg_;
    std::mt19937_64 init_rng_;
    mutable std::mt19937_64 dropout_rng_;
    bool training_ = false;
    std::vector<std::unique_ptr<Parameter<T>>> params_;
    std::map<std::string, Parameter<T>*> by_name_;
    Parameter<T>*tok_emb_, *pos_emb_, *gender_emb_, *location_emb_, *tag_emb_;
    Parameter<T>*pred_w1_, *pred_b1_, *pred_w2_, *pred_b2_;
    std::vector<Block> blocks_;
};

/// Parameters that exist in a language-model-only checkpoint.
bool is_lm_parameter(const std::string& name);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace pdial
