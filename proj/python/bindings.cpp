#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "pdial/checkpoint.hpp"
#include "pdial/config.hpp"
#include "pdial/metrics.hpp"
#include "pdial/serve.hpp"

namespace py = pybind11;
using namespace pdial;
using nlohmann::json;

namespace {

// JSON crosses the boundary as text; the Python side parses it.
struct PyModel {
    Vocab vocab;
    std::shared_ptr<Model<float>> model;
    Registry registry = Registry::defaults();

    static PyModel load(const std::filesystem::path& path) {
        Vocab v = vocab_from_checkpoint(path);
        return {std::move(v), std::make_shared<Model<float>>(load_checkpoint<float>(path))};
    }

    static PyModel create(const std::string& config_json, const std::string& chars, std::uint64_t seed) {
        Vocab v = Vocab::from_chars(utf8_decode(chars));
        json base = to_json(ModelConfig::desk());
        const json overrides = json::parse(config_json);
        for (const auto& [k, val] : overrides.items()) base[k] = val;
        base["vocab_size"] = v.size();
        return {std::move(v), std::make_shared<Model<float>>(model_config_from_json(base), seed)};
    }

    void save(const std::filesystem::path& path) const {
        save_checkpoint(*model, path, CheckpointScope::full, json{{"vocab", vocab_meta(vocab)}});
    }

    DialogueContext context(const std::vector<std::string>& turns) const {
        DialogueContext ctx;
        for (std::size_t i = 0; i < turns.size(); ++i) {
            const bool agent = i % 2 != turns.size() % 2;
            ctx.turns.push_back(Turn{Utterance{agent ? "agent" : "user", turns[i]}, Persona{}});
        }
        return ctx;
    }

    std::string generate(const std::vector<std::string>& turns, const std::string& persona_json,
                         std::optional<double> alpha, std::size_t max_tokens, const std::string& strategy,
                         std::uint64_t seed) const {
        const Persona p = persona_from_json(json::parse(persona_json));
        registry.validate(p);
        DecodeConfig dc;
        dc.alpha = alpha;
        dc.max_tokens = max_tokens;
        dc.strategy = strategy_from_string(strategy);
        dc.seed = seed;
        Generation g;
        {
            py::gil_scoped_release release;
            g = pdial::generate(*model, vocab, registry, context(turns), p, dc);
        }
        json out{{"text", g.text}, {"tokens", g.tokens}, {"log_probs", g.log_probs}};
        out.update(to_json(g.alpha));
        return out.dump();
    }

    double predict_alpha(const std::vector<std::string>& turns) const {
        NoGradGuard ng;
        return model->predict_alpha(model->encode_context(context(turns), vocab, registry)).alpha;
    }
};

std::string corpus_json(std::size_t n, double density, std::uint64_t seed) {
    CorpusConfig cc;
    cc.n_dialogues = n;
    cc.density = density;
    cc.seed = seed;
    json out = json::array();
    for (const auto& ex : generate_corpus(cc)) out.push_back(to_json(ex));
    return out.dump();
}

}  // namespace

PYBIND11_MODULE(_pdial, m) {
    m.doc() = "persona-conditioned dialogue model";

    py::register_exception<ValueError>(m, "ValueError", PyExc_ValueError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

    m.def("char_f1", &char_f1, py::arg("candidate"), py::arg("reference"));
    m.def("bleu", &bleu, py::arg("candidates"), py::arg("references"), py::arg("n_max") = 2);
    m.def("distinct", &distinct, py::arg("responses"), py::arg("n"));
    m.def("spearman", &spearman, py::arg("x"), py::arg("y"));
    m.def(
        "persona_accuracy",
        [](const std::vector<std::string>& responses, const std::string& personas_json) {
            std::vector<Persona> ps;
            for (const auto& j : json::parse(personas_json)) ps.push_back(persona_from_json(j));
            return persona_accuracy(responses, ps);
        },
        py::arg("responses"), py::arg("personas_json"));
    m.def("derive_seed", &derive_seed, py::arg("seed"), py::arg("purpose"));
    m.def("corpus_json", &corpus_json, py::arg("n"), py::arg("density"), py::arg("seed"));
    m.def("render_persona", [](const std::string& p) { return render_persona(persona_from_json(json::parse(p))); });

    py::class_<PyModel>(m, "Model")
        .def_static("load", &PyModel::load, py::arg("path"))
        .def_static("create", &PyModel::create, py::arg("config_json"), py::arg("chars"), py::arg("seed"))
        .def("save", &PyModel::save, py::arg("path"))
        .def("generate_json", &PyModel::generate, py::arg("turns"), py::arg("persona_json"), py::arg("alpha"),
             py::arg("max_tokens"), py::arg("strategy"), py::arg("seed"))
        .def("predict_alpha", &PyModel::predict_alpha, py::arg("turns"))
        .def_property_readonly("vocab_size", [](const PyModel& p) { return p.vocab.size(); })
        .def_property_readonly("config_json", [](const PyModel& p) { return to_json(p.model->config()).dump(); });
}
