#include "pdial/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace pdial {

using nlohmann::json;

std::string to_string(MergeVariant v) { return v == MergeVariant::verbatim ? "verbatim" : "simplified"; }

MergeVariant merge_variant_from_string(const std::string& s) {
    if (s == "verbatim") return MergeVariant::verbatim;
    if (s == "simplified") return MergeVariant::simplified;
    throw ValueError("unknown merge_variant '" + s + "'");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
    ModelConfig c;
    c.n_blocks = 12;
    c.n_heads = 12;
    c.d_model = 768;
    c.d_ff = 3072;
    c.context_window = 512;
    c.vocab_size = 13084;
    return c;
}

void ModelConfig::validate() const {
    if (n_blocks == 0) throw ValueError("n_blocks must be positive");
    if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
        throw ValueError("d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                         std::to_string(n_heads) + ")");
    }
    if (d_ff == 0) throw ValueError("d_ff must be positive");
    if (context_window < 2) throw ValueError("context_window must be at least 2");
    if (vocab_size < kNumReserved) throw ValueError("vocab_size must cover the reserved tokens");
    if (n_genders == 0 || n_locations == 0 || n_tags == 0) throw ValueError("attribute tables must be non-empty");
    if (dropout < 0.0 || dropout >= 1.0) throw ValueError("dropout must be in [0, 1)");
    if (!(init_std > 0.0)) throw ValueError("init_std must be positive");
    if (!(ln_eps > 0.0)) throw ValueError("ln_eps must be positive");
}

json to_json(const ModelConfig& c) {
    return json{{"n_blocks", c.n_blocks},       {"n_heads", c.n_heads},
                {"d_model", c.d_model},         {"d_ff", c.d_ff},
                {"context_window", c.context_window}, {"vocab_size", c.vocab_size},
                {"n_genders", c.n_genders},     {"n_locations", c.n_locations},
                {"n_tags", c.n_tags},           {"merge_variant", to_string(c.merge_variant)},
                {"init_std", c.init_std},       {"dropout", c.dropout},
                {"ln_eps", c.ln_eps}};
}

ModelConfig model_config_from_json(const json& j) {
    if (!j.is_object()) throw ValueError("model config must be an object");
    ModelConfig c;
    for (const auto& [k, v] : j.items()) {
        if (k == "n_blocks") c.n_blocks = v.get<std::size_t>();
        else if (k == "n_heads") c.n_heads = v.get<std::size_t>();
        else if (k == "d_model") c.d_model = v.get<std::size_t>();
        else if (k == "d_ff") c.d_ff = v.get<std::size_t>();
        else if (k == "context_window") c.context_window = v.get<std::size_t>();
        else if (k == "vocab_size") c.vocab_size = v.get<std::size_t>();
        else if (k == "n_genders") c.n_genders = v.get<std::size_t>();
        else if (k == "n_locations") c.n_locations = v.get<std::size_t>();
        else if (k == "n_tags") c.n_tags = v.get<std::size_t>();
        else if (k == "merge_variant") c.merge_variant = merge_variant_from_string(v.get<std::string>());
        else if (k == "init_std") c.init_std = v.get<double>();
        else if (k == "dropout") c.dropout = v.get<double>();
        else if (k == "ln_eps") c.ln_eps = v.get<double>();
        else throw ValueError("unknown model config key '" + k + "'");
    }
    return c;
}

ContextInput build_context_input(const DialogueContext& ctx, const Vocab& vocab, const Registry& registry,
                                 std::size_t max_len) {
    if (ctx.turns.empty()) throw ValueError("dialogue context is empty");
    struct Segment {
        std::vector<int> tokens;
        std::size_t gender, location;
        std::vector<std::size_t> tags;
    };
    std::vector<Segment> segs;
    for (const auto& turn : ctx.turns) {
        Segment s;
        s.tokens = vocab.encode(turn.utterance.text, false);
        s.gender = registry.gender_id(turn.persona.gender);
        s.location = registry.location_id(turn.persona.location);
        for (const auto& t : turn.persona.tags) s.tags.push_back(registry.tag_id(t));
        segs.push_back(std::move(s));
    }
    // keep the newest turns that fit; each non-first segment costs one SPE
    std::size_t first = segs.size() - 1;
    std::size_t total = segs.back().tokens.size();
    while (first > 0 && total + 1 + segs[first - 1].tokens.size() <= max_len) {
        total += 1 + segs[first - 1].tokens.size();
        --first;
    }
    ContextInput in;
    for (std::size_t i = first; i < segs.size(); ++i) {
        const auto& s = segs[i];
        auto push = [&](int tok) {
            in.tokens.push_back(tok);
            in.attrs.gender.push_back(s.gender);
            in.attrs.location.push_back(s.location);
            in.attrs.tags.push_back(s.tags);
        };
        if (i > first) push(kSpe);
        for (int tok : s.tokens) push(tok);
    }
    if (in.tokens.size() > max_len) {
        // a single turn longer than the window: keep its tail
        const std::size_t drop = in.tokens.size() - max_len;
        in.tokens.erase(in.tokens.begin(), in.tokens.begin() + static_cast<std::ptrdiff_t>(drop));
        in.attrs.gender.erase(in.attrs.gender.begin(), in.attrs.gender.begin() + static_cast<std::ptrdiff_t>(drop));
        in.attrs.location.erase(in.attrs.location.begin(),
                                in.attrs.location.begin() + static_cast<std::ptrdiff_t>(drop));
        in.attrs.tags.erase(in.attrs.tags.begin(), in.attrs.tags.begin() + static_cast<std::ptrdiff_t>(drop));
    }
    if (in.tokens.empty()) {
        // every utterance was empty; a lone separator keeps the encoder defined
        const auto& s = segs.back();
        in.tokens.push_back(kSpe);
        in.attrs.gender.push_back(s.gender);
        in.attrs.location.push_back(s.location);
        in.attrs.tags.push_back(s.tags);
    }
    return in;
}

std::vector<int> persona_tokens(const Persona& p, const Vocab& vocab) {
    return vocab.encode(render_persona(p), false);
}

std::vector<double> merge_coefficients(MergeVariant v, double alpha) {
    if (v == MergeVariant::verbatim) return {alpha, 1.0 - alpha, 1.0, 1.0};
    return {alpha, 1.0 - alpha, 1.0};
}

bool is_lm_parameter(const std::string& name) {
    return name.rfind("attr.", 0) != 0 && name.rfind("predictor.", 0) != 0;
}

template <class T>
Tensor<T> Model<T>::normal(Shape s, double stddev) {
    Tensor<T> t(std::move(s));
    std::normal_distribution<double> d(0.0, stddev);
    for (auto& v : t.data) v = static_cast<T>(d(init_rng_));
    return t;
}

template <class T>
Parameter<T>* Model<T>::add_param(const std::string& name, Tensor<T> init) {
    params_.push_back(std::make_unique<Parameter<T>>(name, std::move(init)));
    auto* p = params_.back().get();
    by_name_[name] = p;
    return p;
}

template <class T>
Model<T>::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg), init_rng_(seed), dropout_rng_(seed ^ 0xd40u) {
    cfg_.validate();
    const std::size_t d = cfg_.d_model;
    const double std_ = cfg_.init_std;
    const double resid_std = std_ / std::sqrt(2.0 * static_cast<double>(cfg_.n_blocks));

    tok_emb_ = add_param("tok_emb", normal({cfg_.vocab_size, d}, std_));
    pos_emb_ = add_param("pos_emb", normal({cfg_.context_window, d}, std_));
    for (std::size_t i = 0; i < cfg_.n_blocks; ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        Block b{};
        b.wq = add_param(p + "attn.wq", normal({d, d}, std_));
        b.bq = add_param(p + "attn.bq", Tensor<T>({d}));
        b.wk = add_param(p + "attn.wk", normal({d, d}, std_));
        b.bk = add_param(p + "attn.bk", Tensor<T>({d}));
        b.wv = add_param(p + "attn.wv", normal({d, d}, std_));
        b.bv = add_param(p + "attn.bv", Tensor<T>({d}));
        b.wo = add_param(p + "attn.wo", normal({d, d}, resid_std));
        b.bo = add_param(p + "attn.bo", Tensor<T>({d}));
        b.ln1_g = add_param(p + "ln1.gain", Tensor<T>({d}, T(1)));
        b.ln1_b = add_param(p + "ln1.bias", Tensor<T>({d}));
        b.w1 = add_param(p + "ff.w1", normal({d, cfg_.d_ff}, std_));
        b.b1 = add_param(p + "ff.b1", Tensor<T>({cfg_.d_ff}));
        b.w2 = add_param(p + "ff.w2", normal({cfg_.d_ff, d}, resid_std));
        b.b2 = add_param(p + "ff.b2", Tensor<T>({d}));
        b.ln2_g = add_param(p + "ln2.gain", Tensor<T>({d}, T(1)));
        b.ln2_b = add_param(p + "ln2.bias", Tensor<T>({d}));
        blocks_.push_back(b);
    }
    gender_emb_ = add_param("attr.gender", normal({cfg_.n_genders, d}, std_));
    location_emb_ = add_param("attr.location", normal({cfg_.n_locations, d}, std_));
    tag_emb_ = add_param("attr.tag", normal({cfg_.n_tags, d}, std_));
    pred_w1_ = add_param("predictor.w1", normal({d, d}, std_));
    pred_b1_ = add_param("predictor.b1", Tensor<T>({d}));
    // zero output layer: the predictor starts at alpha = 0.5
    pred_w2_ = add_param("predictor.w2", Tensor<T>({d, 1}));
    pred_b2_ = add_param("predictor.b2", Tensor<T>({1}));
}

template <class T>
std::vector<Parameter<T>*> Model<T>::parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

template <class T>
std::vector<const Parameter<T>*> Model<T>::parameters() const {
    std::vector<const Parameter<T>*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
}

template <class T>
Parameter<T>* Model<T>::find(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
}

template <class T>
const Parameter<T>* Model<T>::find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
}

template <class T>
std::vector<Parameter<T>*> Model<T>::predictor_parameters() {
    return {pred_w1_, pred_b1_, pred_w2_, pred_b2_};
}

template <class T>
void Model<T>::zero_grad() {
    for (auto& p : params_) p->zero_grad();
}

template <class T>
Var<T> Model<T>::maybe_dropout(const Var<T>& x) const {
    if (!training_ || cfg_.dropout == 0.0) return x;
    return dropout(x, cfg_.dropout, dropout_rng_);
}

template <class T>
Var<T> Model<T>::embed_tokens(const std::vector<int>& tokens) const {
    if (tokens.empty()) throw ValueError("cannot embed an empty token sequence");
    if (tokens.size() > cfg_.context_window) {
        throw ValueError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds context window " +
                         std::to_string(cfg_.context_window));
    }
    std::vector<std::size_t> ids(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= cfg_.vocab_size) {
            throw ValueError("token id " + std::to_string(tokens[i]) + " outside vocabulary");
        }
        ids[i] = static_cast<std::size_t>(tokens[i]);
    }
    std::vector<std::size_t> pos(tokens.size());
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    return add(gather_rows(tok_emb_->var(), ids), gather_rows(pos_emb_->var(), pos));
}

template <class T>
Var<T> Model<T>::embed_context(const std::vector<int>& tokens, const AttributeIds& attrs) const {
    if (attrs.gender.size() != tokens.size() || attrs.location.size() != tokens.size() ||
        attrs.tags.size() != tokens.size()) {
        throw DimensionError("embed_context: " + std::to_string(tokens.size()) + " tokens but attribute ids of length " +
                             std::to_string(attrs.gender.size()) + "/" + std::to_string(attrs.location.size()) + "/" +
                             std::to_string(attrs.tags.size()));
    }
    const Var<T> wp = embed_tokens(tokens);
    const Var<T> terms[] = {wp, gather_rows(gender_emb_->var(), attrs.gender),
                            gather_rows(location_emb_->var(), attrs.location),
                            gather_mean_rows(tag_emb_->var(), attrs.tags)};
    const double ones[] = {1.0, 1.0, 1.0, 1.0};
    return linear_combination<T>(terms, ones);
}

template <class T>
Var<T> Model<T>::attend(const Block& b, const Var<T>& q, const Var<T>& source, bool causal) const {
    const std::size_t n = q.rows(), m = source.rows();
    const std::size_t heads = cfg_.n_heads, dh = cfg_.d_model / heads;
    const Var<T> k = add_bias(matmul(source, b.wk->var()), b.bk->var());
    const Var<T> v = add_bias(matmul(source, b.wv->var()), b.bv->var());
    std::vector<std::uint8_t> mask;
    if (causal) {
        if (n != m) throw DimensionError("causal attention needs as many keys as queries");
        mask.assign(n * m, 0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < m; ++j) mask[i * m + j] = 1;
        }
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var<T>> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t lo = h * dh, hi = lo + dh;
        const Var<T> qh = heads == 1 ? q : slice_cols(q, lo, hi);
        const Var<T> kh = heads == 1 ? k : slice_cols(k, lo, hi);
        const Var<T> vh = heads == 1 ? v : slice_cols(v, lo, hi);
        const Var<T> scores = scale(matmul_nt(qh, kh), inv_sqrt);
        const Var<T> probs = softmax_masked<T>(scores, mask);
        outs.push_back(matmul(probs, vh));
    }
    const Var<T> joined = heads == 1 ? outs[0] : concat_cols<T>(outs);
    return add_bias(matmul(joined, b.wo->var()), b.bo->var());
}

template <class T>
RouteOutputs<T> Model<T>::attention_route(std::size_t block, const Var<T>& prev, const Var<T>* persona,
                                          const Var<T>* context, double alpha, bool causal) const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw ValueError("persona weight alpha must lie in [0, 1], got " + std::to_string(alpha));
    }
    if (block >= blocks_.size()) throw ValueError("block index out of range");
    const Block& b = blocks_[block];
    const std::size_t d = cfg_.d_model;
    for (const Var<T>* in : {&prev, persona, context}) {
        if (in && in->cols() != d) {
            throw DimensionError("attention_route: input " + shape_str(in->shape()) + " is not " + std::to_string(d) +
                                 " wide");
        }
    }
    RouteOutputs<T> r;
    r.alpha = alpha;
    const Var<T> q = add_bias(matmul(prev, b.wq->var()), b.bq->var());
    r.self = attend(b, q, prev, causal);
    if (!persona && !context) {
        r.merged = r.self;
        return r;
    }
    if (!persona || !context) throw ValueError("attention_route needs both persona and context encodings");
    r.persona = attend(b, q, *persona, false);
    r.context = attend(b, q, *context, false);
    const auto coefs = merge_coefficients(cfg_.merge_variant, alpha);
    if (cfg_.merge_variant == MergeVariant::verbatim) {
        const Var<T> terms[] = {r.persona, r.context, r.context, r.self};
        r.merged = linear_combination<T>(terms, coefs);
    } else {
        const Var<T> terms[] = {r.persona, r.context, r.self};
        r.merged = linear_combination<T>(terms, coefs);
    }
    return r;
}

template <class T>
Var<T> Model<T>::block_forward(std::size_t i, const Var<T>& x, const Var<T>* persona, const Var<T>* context,
                               double alpha, bool causal, RouteOutputs<T>* trace) const {
    const Block& b = blocks_[i];
    RouteOutputs<T> routes = attention_route(i, x, persona, context, alpha, causal);
    const Var<T> h = layer_norm(add(x, maybe_dropout(routes.merged)), b.ln1_g->var(), b.ln1_b->var(), cfg_.ln_eps);
    const Var<T> ff = add_bias(matmul(gelu(add_bias(matmul(h, b.w1->var()), b.b1->var())), b.w2->var()), b.b2->var());
    const Var<T> out = layer_norm(add(h, maybe_dropout(ff)), b.ln2_g->var(), b.ln2_b->var(), cfg_.ln_eps);
    if (trace) *trace = std::move(routes);
    return out;
}

template <class T>
Var<T> Model<T>::run_stack(Var<T> x, const Var<T>* persona, const Var<T>* context, double alpha, bool causal,
                           std::vector<RouteOutputs<T>>* trace) const {
    if (trace) trace->assign(blocks_.size(), RouteOutputs<T>{});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        x = block_forward(i, x, persona, context, alpha, causal, trace ? &(*trace)[i] : nullptr);
    }
    return x;
}

template <class T>
Var<T> Model<T>::encode_context(const ContextInput& input) const {
    if (input.tokens.empty()) throw ValueError("encode_context: empty context");
    return run_stack(maybe_dropout(embed_context(input.tokens, input.attrs)), nullptr, nullptr, 0.0, false, nullptr);
}

template <class T>
Var<T> Model<T>::encode_context(const DialogueContext& ctx, const Vocab& vocab, const Registry& registry) const {
    return encode_context(build_context_input(ctx, vocab, registry, cfg_.context_window));
}

template <class T>
Var<T> Model<T>::encode_persona(const std::vector<int>& tokens) const {
    return run_stack(maybe_dropout(embed_tokens(tokens)), nullptr, nullptr, 0.0, false, nullptr);
}

template <class T>
Var<T> Model<T>::encode_persona(const Persona& p, const Vocab& vocab) const {
    return encode_persona(persona_tokens(p, vocab));
}

template <class T>
AlphaPrediction<T> Model<T>::predict_alpha(const Var<T>& context_encoding) const {
    if (context_encoding.rows() == 0) throw ValueError("predict_alpha: empty context encoding");
    const Var<T> pooled = mean_rows(context_encoding);
    const Var<T> hidden = gelu(add_bias(matmul(pooled, pred_w1_->var()), pred_b1_->var()));
    AlphaPrediction<T> out;
    out.logit = add_bias(matmul(hidden, pred_w2_->var()), pred_b2_->var());
    const double z = static_cast<double>(out.logit.item());
    out.alpha = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    return out;
}

template <class T>
Var<T> Model<T>::decode_forward(const std::vector<int>& prefix, const Var<T>& context_encoding,
                                const Var<T>& persona_encoding, double alpha,
                                std::vector<RouteOutputs<T>>* trace) const {
    const Var<T> x = maybe_dropout(embed_tokens(prefix));
    const Var<T> h = run_stack(x, &persona_encoding, &context_encoding, alpha, true, trace);
    return matmul_nt(h, tok_emb_->var());
}

template <class T>
Var<T> Model<T>::lm_forward(const std::vector<int>& tokens) const {
    const Var<T> h = run_stack(maybe_dropout(embed_tokens(tokens)), nullptr, nullptr, 0.0, true, nullptr);
    return matmul_nt(h, tok_emb_->var());
}

template class Model<float>;
template class Model<double>;

}  // namespace pdial
