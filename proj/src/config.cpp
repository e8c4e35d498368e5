#include "pdial/config.hpp"

#include <fstream>

namespace pdial {

using nlohmann::json;

std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose) {
    std::uint64_t h = 1469598103934665603ull ^ seed;
    for (unsigned char c : purpose) {
        h ^= c;
        h *= 1099511628211ull;
    }
    // splitmix64 finalizer
    h += 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return h ^ (h >> 31);
}

void RunConfig::apply_seed(std::uint64_t s) {
    seed = s;
    corpus.corpus.seed = derive_seed(s, "corpus");
    train.seed = derive_seed(s, "train");
    decode.seed = derive_seed(s, "decode");
}

void RunConfig::validate() const {
    ModelConfig m = model;
    if (m.vocab_size == 0) m.vocab_size = kNumReserved;
    m.validate();
    train.validate();
    decode.validate();
    const auto& c = corpus.corpus;
    if (c.density < 0.0 || c.density > 1.0) throw ValueError("corpus density must be in [0, 1]");
    if (c.spontaneous_share < 0.0 || c.spontaneous_share > 1.0) {
        throw ValueError("corpus spontaneous_share must be in [0, 1]");
    }
    if (c.max_context_turns == 0) throw ValueError("corpus max_context_turns must be at least 1");
    if (corpus.vocab_max <= kNumReserved) throw ValueError("corpus vocab_max must exceed the reserved ids");
    const auto& s = corpus.splits;
    if (s.train + s.valid + s.test_random + s.test_biased > c.n_dialogues) {
        throw ValueError("split sizes exceed n_dialogues (" + std::to_string(c.n_dialogues) + ")");
    }
    if (serve.port < 0 || serve.port > 65535) throw ValueError("serve port out of range");
    if (serve.threads == 0) throw ValueError("serve threads must be at least 1");
    if (!(serve.session_ttl_s > 0.0)) throw ValueError("serve session_ttl_s must be positive");
}

namespace {

void require_object(const json& j, const std::string& section) {
    if (!j.is_object()) throw ValueError("config section '" + section + "' must be an object");
}

void load_corpus(const json& j, CorpusSettings& c) {
    require_object(j, "corpus");
    for (const auto& [k, v] : j.items()) {
        if (k == "n_dialogues") c.corpus.n_dialogues = v.get<std::size_t>();
        else if (k == "density") c.corpus.density = v.get<double>();
        else if (k == "spontaneous_share") c.corpus.spontaneous_share = v.get<double>();
        else if (k == "max_context_turns") c.corpus.max_context_turns = v.get<std::size_t>();
        else if (k == "train") c.splits.train = v.get<std::size_t>();
        else if (k == "valid") c.splits.valid = v.get<std::size_t>();
        else if (k == "test_random") c.splits.test_random = v.get<std::size_t>();
        else if (k == "test_biased") c.splits.test_biased = v.get<std::size_t>();
        else if (k == "pretrain_bytes") c.pretrain_bytes = v.get<std::size_t>();
        else if (k == "vocab_max") c.vocab_max = v.get<std::size_t>();
        else throw ValueError("unknown corpus config key '" + k + "'");
    }
}

void load_paths(const json& j, PathSettings& p) {
    require_object(j, "paths");
    for (const auto& [k, v] : j.items()) {
        if (k == "data_dir") p.data_dir = v.get<std::string>();
        else if (k == "out_dir") p.out_dir = v.get<std::string>();
        else throw ValueError("unknown paths config key '" + k + "'");
    }
}

void load_serve(const json& j, ServeSettings& s) {
    require_object(j, "serve");
    for (const auto& [k, v] : j.items()) {
        if (k == "host") s.host = v.get<std::string>();
        else if (k == "port") s.port = v.get<int>();
        else if (k == "cors_origin") s.cors_origin = v.get<std::string>();
        else if (k == "session_ttl_s") s.session_ttl_s = v.get<double>();
        else if (k == "threads") s.threads = v.get<std::size_t>();
        else throw ValueError("unknown serve config key '" + k + "'");
    }
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
    if (!j.is_object()) throw ValueError("config must be a JSON object");
    RunConfig c;
    std::uint64_t seed = c.seed;
    try {
        if (j.contains("model")) {
            require_object(j.at("model"), "model");
            json m = j.at("model");
            if (m.contains("preset")) {
                c.model_preset = m.at("preset").get<std::string>();
                m.erase("preset");
            }
            if (c.model_preset != "desk" && c.model_preset != "paper") {
                throw ValueError("unknown model preset '" + c.model_preset + "' (expected desk or paper)");
            }
            json base = to_json(c.model_preset == "paper" ? ModelConfig::paper() : ModelConfig::desk());
            for (const auto& [k, v] : m.items()) {
                if (!base.contains(k)) throw ValueError("unknown model config key '" + k + "'");
                base[k] = v;
            }
            c.model = model_config_from_json(base);
            if (c.model_preset == "paper") c.train = TrainConfig::paper();
        }
        for (const auto& [k, v] : j.items()) {
            if (k == "seed") seed = v.get<std::uint64_t>();
            else if (k == "model") continue;
            else if (k == "train") {
                if (v.contains("seed")) throw ValueError("train.seed is derived from the top-level seed");
                c.train = train_config_from_json(v, c.train);
            } else if (k == "corpus") load_corpus(v, c.corpus);
            else if (k == "decode") {
                if (v.contains("seed")) throw ValueError("decode.seed is derived from the top-level seed");
                c.decode = decode_config_from_json(v, c.decode);
            } else if (k == "paths") load_paths(v, c.paths);
            else if (k == "serve") load_serve(v, c.serve);
            else throw ValueError("unknown config section '" + k + "'");
        }
    } catch (const json::exception& e) {
        throw ValueError(std::string("config has a value of the wrong type: ") + e.what());
    }
    c.apply_seed(seed);
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValueError("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValueError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

json to_json(const RunConfig& c) {
    json model = to_json(c.model);
    model["preset"] = c.model_preset;
    json train = to_json(c.train);
    train.erase("seed");
    json decode = to_json(c.decode);
    decode.erase("seed");
    const auto& cc = c.corpus;
    return json{{"seed", c.seed},
                {"model", model},
                {"train", train},
                {"corpus",
                 {{"n_dialogues", cc.corpus.n_dialogues},
                  {"density", cc.corpus.density},
                  {"spontaneous_share", cc.corpus.spontaneous_share},
                  {"max_context_turns", cc.corpus.max_context_turns},
                  {"train", cc.splits.train},
                  {"valid", cc.splits.valid},
                  {"test_random", cc.splits.test_random},
                  {"test_biased", cc.splits.test_biased},
                  {"pretrain_bytes", cc.pretrain_bytes},
                  {"vocab_max", cc.vocab_max}}},
                {"decode", decode},
                {"paths", {{"data_dir", c.paths.data_dir.string()}, {"out_dir", c.paths.out_dir.string()}}},
                {"serve",
                 {{"host", c.serve.host},
                  {"port", c.serve.port},
                  {"cors_origin", c.serve.cors_origin},
                  {"session_ttl_s", c.serve.session_ttl_s},
                  {"threads", c.serve.threads}}}};
}

}  // namespace pdial
