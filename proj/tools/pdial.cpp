#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pdial/checkpoint.hpp"
#include "pdial/config.hpp"
#include "pdial/gradcheck.hpp"
#include "pdial/metrics.hpp"
#include "pdial/serve.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pdial;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string data;
};

struct Args {
    Common common;
    std::string init_from;
    std::string checkpoint;
    std::vector<std::string> context;
    std::string persona;
    std::string alpha;
    std::string alpha_grid;
    std::string split = "random";
    std::optional<int> port;
    std::string corrupt;
};

RunConfig resolve(const Common& c) {
    RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
    if (c.config.empty()) cfg.apply_seed(cfg.seed);
    if (c.seed) cfg.apply_seed(*c.seed);
    if (!c.data.empty()) cfg.paths.data_dir = c.data;
    if (!c.out.empty()) cfg.paths.out_dir = c.out;
    cfg.validate();
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValueError("cannot write " + path.string());
    out << text;
    if (!out) throw ValueError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValueError("cannot read " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::vector<TrainingExample> read_split(const fs::path& path) {
    if (!fs::exists(path)) throw ValueError("split file " + path.string() + " does not exist");
    return load_jsonl(path);
}

ModelConfig model_config_for(const RunConfig& cfg, const Vocab& vocab) {
    ModelConfig m = cfg.model;
    m.vocab_size = vocab.size();
    m.n_locations = cfg.corpus.corpus.registry.n_locations();
    m.n_tags = cfg.corpus.corpus.registry.n_tags();
    m.validate();
    return m;
}

std::optional<double> parse_alpha(const std::string& s) {
    if (s.empty() || s == "auto") return std::nullopt;
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        throw ValueError("alpha must be a number in [0, 1] or 'auto', got '" + s + "'");
    }
    if (used != s.size()) throw ValueError("alpha must be a number in [0, 1] or 'auto', got '" + s + "'");
    if (!(v >= 0.0 && v <= 1.0)) throw ValueError("alpha must be in [0, 1], got " + s);
    return v;
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << v;
    return os.str();
}

fs::path default_checkpoint(const RunConfig& cfg, const std::string& given) {
    return given.empty() ? cfg.paths.out_dir / "model.ckpt" : fs::path(given);
}

json checkpoint_meta(const Vocab& vocab, const std::string& stage, const RunConfig& cfg) {
    return json{{"vocab", vocab_meta(vocab)}, {"stage", stage}, {"seed", cfg.seed}};
}

int cmd_datagen(const Args& a) {
    const RunConfig cfg = resolve(a.common);
    const fs::path dir = a.common.out.empty() ? cfg.paths.data_dir : fs::path(a.common.out);
    const auto& cc = cfg.corpus.corpus;
    const auto examples = generate_corpus(cc);
    const CorpusSplits splits = split_corpus(examples, derive_seed(cfg.seed, "split"), cfg.corpus.splits);
    const std::string pretrain_text = generate_pretrain_text(cc, cfg.corpus.pretrain_bytes);

    std::vector<std::string> texts;
    for (const auto& ex : splits.train) {
        for (const auto& t : ex.context.turns) texts.push_back(t.utterance.text);
        texts.push_back(ex.response);
        texts.push_back(render_persona(ex.target_persona));
    }
    std::istringstream lines(pretrain_text);
    for (std::string line; std::getline(lines, line);) texts.push_back(line);
    const Vocab vocab = Vocab::build(texts, cfg.corpus.vocab_max);

    fs::create_directories(dir);
    const std::pair<const char*, const std::vector<TrainingExample>*> files[] = {
        {"train", &splits.train},
        {"valid", &splits.valid},
        {"test_random", &splits.test_random},
        {"test_biased", &splits.test_biased}};
    json summary{{"seed", cfg.seed}, {"n_dialogues", examples.size()}, {"density_target", cc.density}};
    std::size_t positives = 0;
    for (const auto& ex : examples) positives += ex.label;
    summary["density_corpus"] = static_cast<double>(positives) / static_cast<double>(examples.size());
    std::cout << "corpus: " << examples.size() << " examples, label density " << fmt(summary["density_corpus"]) << "\n";
    for (const auto& [name, split] : files) {
        save_jsonl(*split, dir / (std::string(name) + ".jsonl"));
        std::size_t pos = 0;
        for (const auto& ex : *split) pos += ex.label;
        const double density = split->empty() ? 0.0 : static_cast<double>(pos) / static_cast<double>(split->size());
        summary["splits"][name] = {{"examples", split->size()}, {"label_density", density}};
        std::cout << "  " << std::left << std::setw(12) << name << std::setw(6) << split->size()
                  << " label density " << fmt(density) << "\n";
    }
    vocab.save(dir / "vocab.txt");
    write_text(dir / "pretrain.txt", pretrain_text);
    summary["vocab_size"] = vocab.size();
    summary["pretrain_bytes"] = pretrain_text.size();
    write_json(dir / "datagen.json", summary);
    std::cout << "vocab: " << vocab.size() << " tokens; pretrain text: " << pretrain_text.size() << " bytes\n"
              << "wrote " << dir.string() << "\n";
    return 0;
}

int cmd_pretrain(const Args& a) {
    const RunConfig cfg = resolve(a.common);
    const fs::path data = cfg.paths.data_dir;
    const Vocab vocab = Vocab::load(data / "vocab.txt");
    const std::string text = read_text(data / "pretrain.txt");
    std::vector<int> stream;
    std::istringstream lines(text);
    for (std::string line; std::getline(lines, line);) {
        if (line.empty()) continue;
        const auto ids = vocab.encode(line, true);
        stream.insert(stream.end(), ids.begin(), ids.end());
    }
    const ModelConfig mc = model_config_for(cfg, vocab);
    Model<float> model(mc, derive_seed(cfg.seed, "init"));
    if (!a.init_from.empty()) load_parameters(model, a.init_from);
    const auto chunks = chunk_tokens(stream, mc.context_window);
    std::cerr << "pretrain: " << stream.size() << " tokens in " << chunks.size() << " chunks, "
              << cfg.train.epochs_pretrain << " epochs\n";
    const PretrainReport rep = pretrain(model, chunks, cfg.train, [&](std::size_t epoch, double loss) {
        std::cerr << "  epoch " << epoch << "/" << cfg.train.epochs_pretrain << " lm_loss " << fmt(loss) << "\n";
    });
    const fs::path out = cfg.paths.out_dir;
    fs::create_directories(out);
    save_checkpoint(model, out / "pretrain.ckpt", CheckpointScope::lm_only, checkpoint_meta(vocab, "pretrain", cfg));
    std::string log;
    for (std::size_t i = 0; i < rep.epoch_loss.size(); ++i) {
        log += json{{"epoch", i + 1}, {"loss_lm", rep.epoch_loss[i]}}.dump() + "\n";
    }
    write_text(out / "pretrain_report.jsonl", log);
    write_json(out / "pretrain_run.json",
               json{{"steps", rep.steps},
                    {"tokens", stream.size()},
                    {"config", to_json(cfg)}});
    std::cout << "wrote " << (out / "pretrain.ckpt").string() << "\n";
    return 0;
}

int cmd_finetune(const Args& a) {
    const RunConfig cfg = resolve(a.common);
    const fs::path data = cfg.paths.data_dir;
    const Vocab vocab = Vocab::load(data / "vocab.txt");
    const auto train = read_split(data / "train.jsonl");
    const auto valid = read_split(data / "valid.jsonl");
    const ModelConfig mc = model_config_for(cfg, vocab);
    Model<float> model(mc, derive_seed(cfg.seed, "init"));
    if (a.init_from.empty()) {
        std::cerr << "warning: no --init-from given, training from scratch\n";
    } else {
        load_parameters(model, a.init_from);
    }
    const auto& reg = cfg.corpus.corpus.registry;
    const auto enc_train = encode_examples(train, vocab, reg, mc);
    const auto enc_valid = encode_examples(valid, vocab, reg, mc);
    std::cerr << "finetune: " << train.size() << " train / " << valid.size() << " valid examples, "
              << cfg.train.epochs_finetune << " epochs\n";
    const FinetuneReport rep = finetune(model, enc_train, enc_valid, cfg.train, [&](const EpochRecord& r) {
        std::cerr << "  epoch " << r.epoch << "/" << cfg.train.epochs_finetune << " loss " << fmt(r.loss_total)
                  << " (d " << fmt(r.loss_d) << ", lm " << fmt(r.loss_lm) << ", w " << fmt(r.loss_w) << ") val_ppl "
                  << fmt(r.val_ppl) << " predictor_acc " << fmt(r.predictor_acc) << "\n";
    });
    const fs::path out = cfg.paths.out_dir;
    fs::create_directories(out);
    save_checkpoint(model, out / "model.ckpt", CheckpointScope::full, checkpoint_meta(vocab, "finetune", cfg));
    std::string log;
    for (const auto& r : rep.epochs) log += to_json(r).dump() + "\n";
    write_text(out / "finetune_report.jsonl", log);
    write_json(out / "finetune_run.json",
               json{{"steps", rep.steps},
                    {"init_from", a.init_from.empty() ? json(nullptr) : json(fs::path(a.init_from).filename().string())},
                    {"config", to_json(cfg)}});
    std::cout << "wrote " << (out / "model.ckpt").string() << "\n";
    return 0;
}

struct Loaded {
    Vocab vocab;
    Model<float> model;
};

Loaded load_model(const fs::path& ckpt) {
    if (!fs::exists(ckpt)) throw ValueError("checkpoint " + ckpt.string() + " does not exist");
    Vocab vocab = vocab_from_checkpoint(ckpt);
    return {std::move(vocab), load_checkpoint<float>(ckpt)};
}

int cmd_generate(const Args& a) {
    const RunConfig cfg = resolve(a.common);
    if (a.context.empty()) throw ValueError("--context is required (repeat it for earlier turns, oldest first)");
    DecodeConfig dc = cfg.decode;
    if (!a.alpha.empty()) dc.alpha = parse_alpha(a.alpha);
    dc.validate();
    const Persona persona = a.persona.empty() ? ChatService::default_persona() : persona_from_json(json::parse(a.persona));
    cfg.corpus.corpus.registry.validate(persona);
    const Loaded l = load_model(default_checkpoint(cfg, a.checkpoint));
    DialogueContext ctx;
    for (std::size_t i = 0; i < a.context.size(); ++i) {
        ctx.turns.push_back(Turn{Utterance{i % 2 == a.context.size() % 2 ? "agent" : "user", a.context[i]}, Persona{}});
    }
    const Generation g = generate(l.model, l.vocab, cfg.corpus.corpus.registry, ctx, persona, dc);
    std::cout << g.text << "\n"
              << "alpha: " << fmt(g.alpha.alpha) << (g.alpha.source == AlphaSource::predicted ? " (predicted)" : " (fixed)")
              << "\n";
    return 0;
}

fs::path split_path(const RunConfig& cfg, const std::string& split) {
    static const std::map<std::string, std::string> names{
        {"random", "test_random"}, {"biased", "test_biased"}, {"valid", "valid"}, {"train", "train"},
        {"test_random", "test_random"}, {"test_biased", "test_biased"}};
    const auto it = names.find(split);
    if (it == names.end()) throw ValueError("unknown split '" + split + "' (random, biased, valid, train)");
    return cfg.paths.data_dir / (it->second + ".jsonl");
}

std::string alpha_tag(const std::optional<double>& a) { return a ? "alpha" + fmt(*a, 2) : "predicted"; }

int cmd_eval(const Args& a) {
    const RunConfig cfg = resolve(a.common);
    const auto examples = read_split(split_path(cfg, a.split));
    std::vector<std::optional<double>> grid;
    if (!a.alpha_grid.empty()) {
        std::istringstream is(a.alpha_grid);
        for (std::string item; std::getline(is, item, ',');) grid.push_back(parse_alpha(item));
        if (grid.empty()) throw ValueError("--alpha-grid is empty");
    } else if (!a.alpha.empty()) {
        grid.push_back(parse_alpha(a.alpha));
    } else {
        grid.push_back(cfg.decode.alpha);
    }
    const Loaded l = load_model(default_checkpoint(cfg, a.checkpoint));
    const fs::path out = cfg.paths.out_dir;
    json sweep = json::array();
    std::vector<double> xs, ys;
    std::cout << std::left << std::setw(12) << "alpha" << std::setw(9) << "acc" << std::setw(9) << "bleu"
              << std::setw(9) << "f1" << std::setw(9) << "dist1" << std::setw(9) << "dist2" << "ppl\n";
    for (const auto& alpha : grid) {
        DecodeConfig dc = cfg.decode;
        dc.alpha = alpha;
        const EvalReport rep = evaluate(l.model, l.vocab, cfg.corpus.corpus.registry, examples, a.split, dc);
        write_json(out / ("eval_" + a.split + "_" + alpha_tag(alpha) + ".json"), to_json(rep));
        const auto& m = rep.metrics;
        std::cout << std::setw(12) << (alpha ? fmt(*alpha, 2) : "predicted") << std::setw(9) << fmt(m.acc)
                  << std::setw(9) << fmt(m.bleu) << std::setw(9) << fmt(m.f1) << std::setw(9) << fmt(m.distinct1)
                  << std::setw(9) << fmt(m.distinct2) << fmt(m.ppl) << "\n";
        SweepRow row{alpha.value_or(-1.0), m.acc, m.bleu, m.f1, m.distinct1, m.distinct2};
        json jr = to_json(row);
        if (!alpha) {
            jr["alpha"] = "predicted";
        } else {
            xs.push_back(*alpha);
            ys.push_back(m.acc);
        }
        jr["ppl"] = m.ppl;
        sweep.push_back(jr);
    }
    if (grid.size() > 1) {
        json summary{{"split", a.split}, {"rows", sweep}};
        if (xs.size() >= 2) summary["spearman_acc_vs_alpha"] = spearman(xs, ys);
        write_json(out / ("sweep_" + a.split + ".json"), summary);
    }
    return 0;
}

int cmd_gradcheck(const Args& a) {
    const RunConfig cfg = resolve(a.common);
    const auto t0 = std::chrono::steady_clock::now();
    GradcheckSetup s = tiny_gradcheck_setup(cfg.seed);
    GradcheckOptions opts;
    opts.corrupt = a.corrupt;
    if (!opts.corrupt.empty() && !s.model.find(opts.corrupt)) {
        throw ValueError("--corrupt names no parameter: " + opts.corrupt);
    }
    const auto results = gradcheck_finetune(s.model, s.batch, s.train, opts);
    std::size_t failed = 0;
    for (const auto& r : results) {
        std::cout << (r.pass ? "PASS " : "FAIL ") << std::left << std::setw(22) << r.name << " entries "
                  << std::setw(6) << r.entries << " max_rel_err " << std::scientific << std::setprecision(3)
                  << r.max_rel_error << std::defaultfloat << "\n";
        failed += r.pass ? 0 : 1;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << results.size() - failed << "/" << results.size() << " parameters pass (tolerance "
              << opts.tolerance << ", " << fmt(secs, 1) << " s)\n";
    return failed == 0 ? 0 : 2;
}

std::atomic<bool> g_stop{false};

int cmd_serve(const Args& a) {
    const RunConfig cfg = resolve(a.common);
    ServerOptions opts;
    opts.checkpoint = default_checkpoint(cfg, a.checkpoint);
    opts.host = cfg.serve.host;
    opts.port = a.port.value_or(cfg.serve.port);
    opts.cors_origin = cfg.serve.cors_origin;
    opts.session_ttl_s = cfg.serve.session_ttl_s;
    opts.threads = cfg.serve.threads;
    opts.decode = cfg.decode;
    HttpServer server(opts);
    std::signal(SIGINT, [](int) { g_stop = true; });
    std::signal(SIGTERM, [](int) { g_stop = true; });
    const int port = server.start();
    std::cout << "listening on http://" << opts.host << ":" << port << std::endl;
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
    std::cout << "stopped" << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Persona-weighted dialogue model: data, training, evaluation and serving"};
    app.require_subcommand(1);
    Args args;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", args.common.config, "JSON run config")->check(CLI::ExistingFile);
        sub->add_option("--seed", args.common.seed, "Run seed (overrides the config)");
        sub->add_option("--out", args.common.out, "Output directory");
        sub->add_option("--data", args.common.data, "Data directory (overrides paths.data_dir)");
    };
    auto* datagen = app.add_subcommand("datagen", "Write the synthetic corpus splits, vocabulary and pre-training text");
    add_common(datagen);
    auto* pretrain_cmd = app.add_subcommand("pretrain", "Language-model pre-training on the text corpus");
    add_common(pretrain_cmd);
    pretrain_cmd->add_option("--init-from", args.init_from, "Checkpoint to resume from")->check(CLI::ExistingFile);
    auto* finetune_cmd = app.add_subcommand("finetune", "Dialogue fine-tuning");
    add_common(finetune_cmd);
    finetune_cmd->add_option("--init-from", args.init_from, "Pre-trained or earlier checkpoint")->check(CLI::ExistingFile);
    auto* generate_cmd = app.add_subcommand("generate", "Generate one response");
    add_common(generate_cmd);
    generate_cmd->add_option("--checkpoint", args.checkpoint, "Model checkpoint (default <out>/model.ckpt)");
    generate_cmd->add_option("--context", args.context, "Context turn, oldest first; repeatable")->required();
    generate_cmd->add_option("--persona", args.persona, "Target persona as JSON");
    generate_cmd->add_option("--alpha", args.alpha, "Persona weight in [0, 1] or 'auto'");
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate on a split");
    add_common(eval_cmd);
    eval_cmd->add_option("--checkpoint", args.checkpoint, "Model checkpoint (default <out>/model.ckpt)");
    eval_cmd->add_option("--split", args.split, "random, biased, valid or train");
    eval_cmd->add_option("--alpha", args.alpha, "Persona weight in [0, 1] or 'auto'");
    eval_cmd->add_option("--alpha-grid", args.alpha_grid, "Comma-separated weights; 'auto' allowed");
    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient");
    add_common(gradcheck_cmd);
    gradcheck_cmd->add_option("--corrupt", args.corrupt, "Scale this parameter's analytic gradient (negative control)");
    auto* serve_cmd = app.add_subcommand("serve", "HTTP chat service");
    add_common(serve_cmd);
    serve_cmd->add_option("--checkpoint", args.checkpoint, "Model checkpoint (default <out>/model.ckpt)");
    serve_cmd->add_option("--port", args.port, "Port");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*datagen) return cmd_datagen(args);
        if (*pretrain_cmd) return cmd_pretrain(args);
        if (*finetune_cmd) return cmd_finetune(args);
        if (*generate_cmd) return cmd_generate(args);
        if (*eval_cmd) return cmd_eval(args);
        if (*gradcheck_cmd) return cmd_gradcheck(args);
        if (*serve_cmd) return cmd_serve(args);
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
