#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "pdial/checkpoint.hpp"
#include "pdial/model.hpp"

using namespace pdial;

namespace {

using Mat = std::vector<std::vector<double>>;

// Plain-loop forward pass used as an oracle; shares nothing with the library
// beyond reading parameter values by name.
struct Oracle {
    const Model<double>& m;
    std::size_t d, heads;
    double eps;

    explicit Oracle(const Model<double>& model)
        : m(model), d(model.config().d_model), heads(model.config().n_heads), eps(model.config().ln_eps) {}

    Mat param(const std::string& name) const {
        const auto& t = m.find(name)->value();
        const std::size_t cols = t.shape.size() == 1 ? t.shape[0] : t.shape[1];
        const std::size_t rows = t.size() / cols;
        Mat out(rows, std::vector<double>(cols));
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) out[r][c] = t.data[r * cols + c];
        return out;
    }
    std::vector<double> vec(const std::string& name) const { return param(name)[0]; }

    static Mat mul(const Mat& a, const Mat& b) {
        Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
        for (std::size_t i = 0; i < a.size(); ++i)
            for (std::size_t j = 0; j < b[0].size(); ++j)
                for (std::size_t p = 0; p < b.size(); ++p) c[i][j] += a[i][p] * b[p][j];
        return c;
    }
    static Mat plus_bias(Mat a, const std::vector<double>& b) {
        for (auto& row : a)
            for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
        return a;
    }
    static Mat lin(const Mat& a, const Mat& b, double ca = 1.0, double cb = 1.0) {
        Mat c = a;
        for (std::size_t i = 0; i < a.size(); ++i)
            for (std::size_t j = 0; j < a[i].size(); ++j) c[i][j] = ca * a[i][j] + cb * b[i][j];
        return c;
    }
    Mat norm(const Mat& x, const std::string& g, const std::string& b) const {
        const auto gain = vec(g), bias = vec(b);
        Mat out = x;
        for (std::size_t i = 0; i < x.size(); ++i) {
            double mu = 0.0, var = 0.0;
            for (double v : x[i]) mu += v;
            mu /= d;
            for (double v : x[i]) var += (v - mu) * (v - mu);
            var /= d;
            for (std::size_t j = 0; j < d; ++j) out[i][j] = (x[i][j] - mu) / std::sqrt(var + eps) * gain[j] + bias[j];
        }
        return out;
    }
    static double gelu(double x) {
        return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
    }

    Mat attention(std::size_t blk, const Mat& prev, const Mat& src, bool causal) const {
        const std::string p = "block" + std::to_string(blk) + ".attn.";
        const Mat q = plus_bias(mul(prev, param(p + "wq")), vec(p + "bq"));
        const Mat k = plus_bias(mul(src, param(p + "wk")), vec(p + "bk"));
        const Mat v = plus_bias(mul(src, param(p + "wv")), vec(p + "bv"));
        const std::size_t dh = d / heads;
        Mat joined(prev.size(), std::vector<double>(d, 0.0));
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < prev.size(); ++i) {
                const std::size_t last = causal ? i + 1 : src.size();
                std::vector<double> s(last);
                double mx = -1e300;
                for (std::size_t j = 0; j < last; ++j) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) dot += q[i][h * dh + c] * k[j][h * dh + c];
                    s[j] = dot / std::sqrt(double(dh));
                    mx = std::max(mx, s[j]);
                }
                double z = 0.0;
                for (auto& e : s) z += (e = std::exp(e - mx));
                for (std::size_t j = 0; j < last; ++j)
                    for (std::size_t c = 0; c < dh; ++c) joined[i][h * dh + c] += s[j] / z * v[j][h * dh + c];
            }
        }
        return plus_bias(mul(joined, param(p + "wo")), vec(p + "bo"));
    }

    Mat block(std::size_t blk, const Mat& x, const Mat* persona, const Mat* context, double alpha, bool causal,
              bool verbatim) const {
        Mat merged = attention(blk, x, x, causal);
        if (persona) {
            const Mat ot = attention(blk, x, *persona, false);
            const Mat oc = attention(blk, x, *context, false);
            merged = lin(merged, ot, 1.0, alpha);
            merged = lin(merged, oc, 1.0, (1.0 - alpha) + (verbatim ? 1.0 : 0.0));
        }
        const std::string p = "block" + std::to_string(blk) + ".";
        const Mat h = norm(lin(x, merged), p + "ln1.gain", p + "ln1.bias");
        Mat f = plus_bias(mul(h, param(p + "ff.w1")), vec(p + "ff.b1"));
        for (auto& row : f)
            for (auto& v : row) v = gelu(v);
        f = plus_bias(mul(f, param(p + "ff.w2")), vec(p + "ff.b2"));
        return norm(lin(h, f), p + "ln2.gain", p + "ln2.bias");
    }

    Mat stack(Mat x, const Mat* persona, const Mat* context, double alpha, bool causal) const {
        for (std::size_t b = 0; b < m.config().n_blocks; ++b)
            x = block(b, x, persona, context, alpha, causal, m.config().merge_variant == MergeVariant::verbatim);
        return x;
    }

    Mat embed(const std::vector<int>& toks) const {
        const Mat te = param("tok_emb"), pe = param("pos_emb");
        Mat x(toks.size());
        for (std::size_t i = 0; i < toks.size(); ++i) x[i] = lin({te[toks[i]]}, {pe[i]})[0];
        return x;
    }

    Mat encode_context(const ContextInput& in) const {
        Mat x = embed(in.tokens);
        const Mat ge = param("attr.gender"), le = param("attr.location"), ta = param("attr.tag");
        for (std::size_t i = 0; i < x.size(); ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                double tag = 0.0;
                for (auto t : in.attrs.tags[i]) tag += ta[t][j];
                if (!in.attrs.tags[i].empty()) tag /= double(in.attrs.tags[i].size());
                x[i][j] += ge[in.attrs.gender[i]][j] + le[in.attrs.location[i]][j] + tag;
            }
        }
        return stack(x, nullptr, nullptr, 0.0, false);
    }

    Mat logits(const Mat& h) const {
        const Mat te = param("tok_emb");
        Mat out(h.size(), std::vector<double>(te.size(), 0.0));
        for (std::size_t i = 0; i < h.size(); ++i)
            for (std::size_t v = 0; v < te.size(); ++v)
                for (std::size_t j = 0; j < d; ++j) out[i][v] += h[i][j] * te[v][j];
        return out;
    }
};

double max_diff(const Tensor<double>& t, const Mat& m) {
    double worst = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i)
        for (std::size_t j = 0; j < m[i].size(); ++j) worst = std::max(worst, std::abs(t(i, j) - m[i][j]));
    return worst;
}

Vocab test_vocab() { return Vocab::build("abcdefghijklmnopqrstuvwxyz :;,.!?'0123456789", 64); }

ModelConfig small_config(std::size_t d, std::size_t heads, std::size_t blocks, const Vocab& v) {
    ModelConfig c;
    c.n_blocks = blocks;
    c.n_heads = heads;
    c.d_model = d;
    c.d_ff = 2 * d;
    c.context_window = 96;
    c.vocab_size = v.size();
    return c;
}

// biases and predictor output start at zero; give everything a value
template <class T>
void jitter(Model<T>& m, std::uint64_t seed, double sd = 0.3) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sd);
    for (auto* p : m.parameters())
        for (auto& v : p->value().data) v += static_cast<T>(n(rng));
}

DialogueContext two_turns() {
    DialogueContext c;
    c.turns.push_back({{"u1", "where do you live?"}, {Gender::male, "oslo", {"chess", "yoga"}}});
    c.turns.push_back({{"u2", "hi there"}, {Gender::female, "", {}}});
    return c;
}

}  // namespace

TEST_CASE("forward pass matches a plain-loop oracle at d_model 4") {
    const Vocab v = test_vocab();
    const auto reg = Registry::defaults();
    for (std::size_t heads : {1, 2}) {
        Model<double> m(small_config(4, heads, 1, v), 5);
        jitter(m, 6);
        Oracle o(m);

        DialogueContext one;
        one.turns.push_back({{"u1", "hi, i like chess"}, {Gender::female, "paris", {"chess", "music"}}});
        const auto in = build_context_input(one, v, reg, 96);
        const Var<double> ec = m.encode_context(in);
        const Mat ec_o = o.encode_context(in);
        CHECK(max_diff(ec.value(), ec_o) < 1e-12);

        const Persona p{Gender::male, "tokyo", {"tennis"}};
        const Var<double> et = m.encode_persona(p, v);
        const Mat et_o = o.stack(o.embed(persona_tokens(p, v)), nullptr, nullptr, 0.0, false);
        CHECK(max_diff(et.value(), et_o) < 1e-12);

        const std::vector<int> prefix = {kBos, v.id_of(U'o'), v.id_of(U'k')};
        for (double alpha : {0.0, 0.35, 1.0}) {
            const Var<double> lg = m.decode_forward(prefix, ec, et, alpha);
            const Mat lg_o = o.logits(o.stack(o.embed(prefix), &et_o, &ec_o, alpha, true));
            CHECK(max_diff(lg.value(), lg_o) < 1e-12);
        }
        const Var<double> lm = m.lm_forward(prefix);
        CHECK(max_diff(lm.value(), o.logits(o.stack(o.embed(prefix), nullptr, nullptr, 0.0, true))) < 1e-12);
    }
}

TEST_CASE("embed_context attribute terms") {
    const Vocab v = test_vocab();
    Model<double> m(small_config(8, 2, 1, v), 1);
    const std::vector<int> toks = {v.id_of(U'a'), v.id_of(U'b'), v.id_of(U'c')};
    AttributeIds a;
    a.gender = {0, 1, 2};
    a.location = {0, 3, 5};
    a.tags = {{}, {4}, {2, 7}};
    const auto e = m.embed_context(toks, a).value();
    const auto& tok = m.find("tok_emb")->value();
    const auto& pos = m.find("pos_emb")->value();
    const auto& gen = m.find("attr.gender")->value();
    const auto& loc = m.find("attr.location")->value();
    const auto& tag = m.find("attr.tag")->value();
    for (std::size_t j = 0; j < 8; ++j) {
        const double base0 = tok(toks[0], j) + pos(0, j) + gen(0, j) + loc(0, j);
        CHECK(e(0, j) == base0);
        const double base1 = tok(toks[1], j) + pos(1, j) + gen(1, j) + loc(3, j);
        CHECK(std::abs(e(1, j) - (base1 + tag(4, j))) < 1e-15);
        const double base2 = tok(toks[2], j) + pos(2, j) + gen(2, j) + loc(5, j);
        CHECK(std::abs(e(2, j) - (base2 + (tag(2, j) + tag(7, j)) / 2)) < 1e-15);
    }
    a.tags.pop_back();
    CHECK_THROWS_AS(m.embed_context(toks, a), DimensionError);
}

TEST_CASE("context input joins turns with separators") {
    const Vocab v = test_vocab();
    const auto reg = Registry::defaults();
    const auto ctx = two_turns();
    const auto in = build_context_input(ctx, v, reg, 96);
    const auto u1 = v.encode("where do you live?", false);
    const auto u2 = v.encode("hi there", false);
    std::vector<int> expect = u1;
    expect.push_back(kSpe);
    expect.insert(expect.end(), u2.begin(), u2.end());
    CHECK(in.tokens == expect);
    CHECK(in.attrs.size() == expect.size());
    CHECK(in.attrs.gender[u1.size() - 1] == reg.gender_id(Gender::male));
    CHECK(in.attrs.gender[u1.size()] == reg.gender_id(Gender::female));  // separator
    CHECK(in.attrs.location[u1.size()] == 0);
    CHECK(in.attrs.tags[0] == std::vector<std::size_t>{reg.tag_id("chess"), reg.tag_id("yoga")});

    // oldest turn dropped when the window is too small
    const auto cut = build_context_input(ctx, v, reg, u2.size() + 2);
    CHECK(cut.tokens == u2);
    CHECK_THROWS_AS(build_context_input(DialogueContext{}, v, reg, 96), ValueError);
}

TEST_CASE("tag order does not change E_C") {
    const Vocab v = test_vocab();
    const auto reg = Registry::defaults();
    Model<double> m(small_config(8, 2, 2, v), 2);
    auto a = two_turns();
    auto b = a;
    std::swap(b.turns[0].persona.tags[0], b.turns[0].persona.tags[1]);
    const auto ea = m.encode_context(a, v, reg).value();
    const auto eb = m.encode_context(b, v, reg).value();
    for (std::size_t i = 0; i < ea.size(); ++i) CHECK(std::abs(ea.data[i] - eb.data[i]) < 1e-14);
}

TEST_CASE("merge algebra holds exactly for both variants") {
    const Vocab v = test_vocab();
    const auto reg = Registry::defaults();
    for (auto variant : {MergeVariant::verbatim, MergeVariant::simplified}) {
        auto cfg = small_config(8, 2, 2, v);
        cfg.merge_variant = variant;
        Model<double> m(cfg, 3);
        jitter(m, 4, 0.1);
        const auto ec = m.encode_context(two_turns(), v, reg);
        const auto et = m.encode_persona({Gender::female, "seoul", {"poetry"}}, v);
        for (double alpha : {0.0, 0.3, 0.5, 1.0}) {
            std::vector<RouteOutputs<double>> trace;
            m.decode_forward({kBos, 7, 9, 11}, ec, et, alpha, &trace);
            REQUIRE(trace.size() == 2);
            for (const auto& r : trace) {
                CHECK(r.alpha == alpha);
                const auto& ot = r.persona.value().data;
                const auto& oc = r.context.value().data;
                const auto& op = r.self.value().data;
                const auto& om = r.merged.value().data;
                const double extra = variant == MergeVariant::verbatim ? 1.0 : 0.0;
                for (std::size_t i = 0; i < om.size(); ++i) {
                    const double want = alpha * ot[i] + (1 - alpha) * oc[i] + extra * oc[i] + op[i];
                    CHECK(std::abs(om[i] - want) <= 1e-12);
                }
            }
        }
    }
    CHECK(merge_coefficients(MergeVariant::verbatim, 0.5) == std::vector<double>{0.5, 0.5, 1.0, 1.0});
    CHECK(merge_coefficients(MergeVariant::simplified, 1.0) == std::vector<double>{1.0, 0.0, 1.0});
}

TEST_CASE("attention_route rejects alpha outside [0, 1]") {
    const Vocab v = test_vocab();
    Model<double> m(small_config(8, 2, 1, v), 3);
    const auto x = m.embed_tokens({kBos, 6});
    CHECK_THROWS_AS(m.attention_route(0, x, &x, &x, 1.5, true), ValueError);
    CHECK_THROWS_AS(m.attention_route(0, x, &x, &x, -0.1, true), ValueError);
}

TEST_CASE("causality of decode_forward and lm_forward is exact") {
    const Vocab v = test_vocab();
    const auto reg = Registry::defaults();
    Model<float> m(small_config(16, 2, 2, v), 4);
    jitter(m, 5, 0.1);
    const auto ec = m.encode_context(two_turns(), v, reg);
    const auto et = m.encode_persona({Gender::male, "cairo", {}}, v);
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t len = 2 + rng() % 30;
        std::vector<int> prefix(len);
        for (auto& t : prefix) t = kNumReserved + static_cast<int>(rng() % (v.size() - kNumReserved));
        prefix[0] = kBos;
        const std::size_t j = 1 + rng() % (len - 1);
        auto changed = prefix;
        changed[j] = changed[j] == kNumReserved ? kNumReserved + 1 : kNumReserved;
        const auto a = m.decode_forward(prefix, ec, et, 0.7).value();
        const auto b = m.decode_forward(changed, ec, et, 0.7).value();
        const auto la = m.lm_forward(prefix).value();
        const auto lb = m.lm_forward(changed).value();
        const std::size_t V = a.cols();
        bool same_before = true, differs_at_j = false;
        for (std::size_t i = 0; i < j * V; ++i) same_before &= a.data[i] == b.data[i] && la.data[i] == lb.data[i];
        for (std::size_t i = j * V; i < (j + 1) * V; ++i) differs_at_j |= a.data[i] != b.data[i];
        CHECK(same_before);
        CHECK(differs_at_j);
    }
}

TEST_CASE("alpha = 0 under the verbatim merge ignores the persona") {
    const Vocab v = test_vocab();
    const auto reg = Registry::defaults();
    Model<float> m(small_config(16, 2, 2, v), 7);
    jitter(m, 8, 0.1);
    const auto ec = m.encode_context(two_turns(), v, reg);
    const std::vector<int> prefix = {kBos, 9, 10, 11, 12};
    const auto ref = m.decode_forward(prefix, ec, m.encode_persona({Gender::female, "paris", {"music"}}, v), 0.0).value();
    const auto other = m.decode_forward(prefix, ec, m.encode_persona({Gender::male, "oslo", {"chess", "yoga"}}, v), 0.0).value();
    CHECK(ref.data == other.data);
    const auto half = m.decode_forward(prefix, ec, m.encode_persona({Gender::male, "oslo", {"chess", "yoga"}}, v), 0.5).value();
    CHECK(ref.data != half.data);
}

TEST_CASE("logits are continuous in alpha") {
    const Vocab v = test_vocab();
    const auto reg = Registry::defaults();
    Model<double> m(small_config(8, 2, 2, v), 9);
    jitter(m, 10, 0.1);
    const auto ec = m.encode_context(two_turns(), v, reg);
    const auto et = m.encode_persona({Gender::female, "dublin", {"travel"}}, v);
    const std::vector<int> prefix = {kBos, 8, 9};
    auto sup = [&](double eps) {
        const auto a = m.decode_forward(prefix, ec, et, 0.4).value();
        const auto b = m.decode_forward(prefix, ec, et, 0.4 + eps).value();
        double worst = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
        return worst;
    };
    const double small = sup(1e-6), big = sup(1e-3);
    CHECK(small < big);
    CHECK(small < 2e-3 * big);
}

TEST_CASE("lm_forward equals the self route alone") {
    const Vocab v = test_vocab();
    Model<double> m(small_config(8, 2, 2, v), 11);
    jitter(m, 12, 0.1);
    const std::vector<int> toks = {kBos, 10, 11, 12};
    const auto lm = m.lm_forward(toks).value();
    Var<double> x = m.embed_tokens(toks);
    for (std::size_t b = 0; b < 2; ++b) {
        const auto r = m.attention_route(b, x, nullptr, nullptr, 0.0, true);
        CHECK(r.merged.value().data == r.self.value().data);
    }
    CHECK(lm.shape == Shape{4, v.size()});
}

TEST_CASE("encoder and decoder share block storage") {
    const Vocab v = test_vocab();
    const auto reg = Registry::defaults();
    Model<double> m(small_config(8, 2, 1, v), 13);
    const auto before = m.lm_forward({kBos, 7}).value();
    const auto ec0 = m.encode_context(two_turns(), v, reg).value();
    m.find("block0.attn.wv")->value().data[3] += 0.5;
    CHECK(m.lm_forward({kBos, 7}).value().data != before.data);
    CHECK(m.encode_context(two_turns(), v, reg).value().data != ec0.data);
}

TEST_CASE("predictor starts at one half and stays in (0, 1)") {
    const Vocab v = test_vocab();
    const auto reg = Registry::defaults();
    Model<double> m(small_config(8, 2, 1, v), 14);
    const auto ec = m.encode_context(two_turns(), v, reg);
    CHECK(m.predict_alpha(ec).alpha == 0.5);
    jitter(m, 15, 2.0);
    const auto a = m.predict_alpha(m.encode_context(two_turns(), v, reg)).alpha;
    CHECK(a > 0.0);
    CHECK(a < 1.0);
    CHECK(a != 0.5);
}

TEST_CASE("config validation and json") {
    ModelConfig c = ModelConfig::desk();
    c.vocab_size = 40;
    CHECK_NOTHROW(c.validate());
    CHECK(model_config_from_json(to_json(c)) == c);
    CHECK(ModelConfig::paper().n_blocks == 12);
    CHECK(ModelConfig::paper().vocab_size == 13084);
    auto bad = c;
    bad.d_model = 31;
    CHECK_THROWS_AS(bad.validate(), ValueError);
    bad = c;
    bad.context_window = 1;
    CHECK_THROWS_AS(bad.validate(), ValueError);
    auto j = to_json(c);
    j["extra"] = 1;
    CHECK_THROWS_AS(model_config_from_json(j), ValueError);
    CHECK_THROWS_AS(merge_variant_from_string("other"), ValueError);
}

TEST_CASE("embedding rejects over-long and out-of-range input") {
    const Vocab v = test_vocab();
    auto cfg = small_config(8, 2, 1, v);
    cfg.context_window = 4;
    Model<double> m(cfg, 1);
    CHECK_THROWS_AS(m.lm_forward({1, 5, 6, 7, 8}), ValueError);
    CHECK_THROWS_AS(m.lm_forward({1, 500}), ValueError);
}

TEST_CASE("checkpoint round trips") {
    const auto dir = std::filesystem::temp_directory_path() / "pdial_ckpt_test";
    std::filesystem::create_directories(dir);
    const Vocab v = test_vocab();
    Model<float> m(small_config(16, 2, 2, v), 21);
    jitter(m, 22, 0.1);
    save_checkpoint(m, dir / "a.ckpt", CheckpointScope::full, {{"note", "x"}});
    auto loaded = load_checkpoint<float>(dir / "a.ckpt");
    for (const auto* p : m.parameters()) CHECK(loaded.find(p->name())->value().data == p->value().data);
    save_checkpoint(loaded, dir / "b.ckpt", CheckpointScope::full, {{"note", "x"}});
    auto bytes = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    CHECK(bytes(dir / "a.ckpt") == bytes(dir / "b.ckpt"));
    CHECK(read_checkpoint_info(dir / "a.ckpt").meta["note"] == "x");
    CHECK(checkpoint_id(dir / "a.ckpt") == checkpoint_id(dir / "b.ckpt"));

    // language-model-only file into a fresh full model
    save_checkpoint(m, dir / "lm.ckpt", CheckpointScope::lm_only);
    const auto info = read_checkpoint_info(dir / "lm.ckpt");
    for (const auto& e : info.manifest) CHECK(is_lm_parameter(e.name));
    Model<float> fresh(m.config(), 99);
    const auto attr_before = fresh.find("attr.location")->value().data;
    load_parameters(fresh, dir / "lm.ckpt");
    CHECK(fresh.lm_forward({kBos, 7, 8}).value().data == m.lm_forward({kBos, 7, 8}).value().data);
    CHECK(fresh.find("attr.location")->value().data == attr_before);

    // a larger vocabulary does not fit
    auto big = m.config();
    big.vocab_size += 3;
    Model<float> wide(big, 1);
    try {
        load_parameters(wide, dir / "a.ckpt");
        FAIL("expected a mismatch");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("tok_emb") != std::string::npos);
    }
    std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
    CHECK_THROWS_AS(read_checkpoint_info(dir / "junk.ckpt"), FormatError);
    CHECK_THROWS_AS(read_checkpoint_info(dir / "missing.ckpt"), FormatError);

    // f32 file into a f64 model keeps values exactly
    auto d = load_checkpoint<double>(dir / "a.ckpt");
    CHECK(d.find("tok_emb")->value().data[5] == static_cast<double>(m.find("tok_emb")->value().data[5]));
    std::filesystem::remove_all(dir);
}
