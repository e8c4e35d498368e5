#include "pdial/serve.hpp"

#include <condition_variable>
#include <iomanip>
#include <random>
#include <sstream>

#include <httplib.h>

#include "pdial/checkpoint.hpp"

namespace pdial {

using nlohmann::json;

json to_json(const PersonaWeight& w) {
    return json{{"alpha_used", w.alpha}, {"alpha_source", w.source == AlphaSource::fixed ? "fixed" : "predicted"}};
}

ChatService::ChatService(std::shared_ptr<const Model<float>> model, Vocab vocab, Registry registry,
                         DecodeConfig decode, std::string model_id, double session_ttl_s,
                         std::function<Clock::time_point()> now)
    : model_(std::move(model)),
      vocab_(std::move(vocab)),
      registry_(std::move(registry)),
      decode_(std::move(decode)),
      model_id_(std::move(model_id)),
      ttl_(std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(session_ttl_s))),
      now_(std::move(now)),
      id_salt_(std::random_device{}()) {
    if (!model_) throw ValueError("chat service needs a model");
    decode_.alpha.reset();
    decode_.validate();
}

Persona ChatService::default_persona() { return Persona{Gender::female, "paris", {"music"}}; }

std::string ChatService::new_id() {
    std::mt19937_64 g(id_salt_ + (++id_counter_) * 0x9e3779b97f4a7c15ull);
    std::ostringstream os;
    os << std::hex << std::setfill('0') << std::setw(16) << g() << std::setw(16) << g();
    return os.str();
}

std::string ChatService::create_session(const std::optional<Persona>& persona) {
    Persona p = persona.value_or(default_persona());
    registry_.validate(p);
    auto s = std::make_shared<Session>();
    s->persona = std::move(p);
    s->created = s->last_active = now_();
    evict_idle();
    std::lock_guard lk(sessions_mu_);
    std::string id;
    do {
        id = new_id();
    } while (sessions_.count(id));
    s->id = id;
    sessions_.emplace(id, std::move(s));
    return id;
}

std::shared_ptr<ChatService::Session> ChatService::find(const std::string& id) const {
    std::lock_guard lk(sessions_mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFoundError("unknown session '" + id + "'");
    return it->second;
}

ChatReply ChatService::chat(const std::string& session_id, const std::string& message, std::optional<double> alpha) {
    if (message.empty()) throw ValueError("message is empty");
    DecodeConfig cfg = decode_;
    cfg.alpha = alpha;
    cfg.validate();
    auto s = find(session_id);
    std::lock_guard lk(s->mu);
    DialogueContext ctx = s->history;
    ctx.turns.push_back(Turn{Utterance{"user", message}, Persona{}});
    const Generation g = generate(*model_, vocab_, registry_, ctx, s->persona, cfg);
    ctx.turns.push_back(Turn{Utterance{"agent", g.text}, s->persona});
    s->history = std::move(ctx);
    s->transcript.push_back({"user", message, std::nullopt});
    s->transcript.push_back({"agent", g.text, g.alpha});
    s->last_active = now_();
    return {g.text, g.alpha, s->transcript.size()};
}

Persona ChatService::set_persona(const std::string& session_id, const Persona& persona) {
    registry_.validate(persona);
    auto s = find(session_id);
    std::lock_guard lk(s->mu);
    s->persona = persona;
    s->last_active = now_();
    return s->persona;
}

Persona ChatService::persona(const std::string& session_id) const {
    auto s = find(session_id);
    std::lock_guard lk(s->mu);
    return s->persona;
}

std::vector<TranscriptEntry> ChatService::transcript(const std::string& session_id) const {
    auto s = find(session_id);
    std::lock_guard lk(s->mu);
    return s->transcript;
}

json ChatService::session_json(const std::string& session_id) const {
    auto s = find(session_id);
    std::lock_guard lk(s->mu);
    json history = json::array();
    for (const auto& t : s->transcript) {
        json e{{"role", t.role}, {"text", t.text}};
        if (t.alpha) e.update(to_json(*t.alpha));
        history.push_back(e);
    }
    const auto age = [&](Clock::time_point t) { return std::chrono::duration<double>(now_() - t).count(); };
    return json{{"session_id", s->id},
                {"persona", to_json(s->persona)},
                {"history", history},
                {"history_len", s->transcript.size()},
                {"age_s", age(s->created)},
                {"idle_s", age(s->last_active)}};
}

std::size_t ChatService::evict_idle() {
    const auto now = now_();
    std::lock_guard lk(sessions_mu_);
    std::size_t n = 0;
    for (auto it = sessions_.begin(); it != sessions_.end();) {
        bool idle;
        {
            std::unique_lock slk(it->second->mu, std::try_to_lock);
            idle = slk.owns_lock() && now - it->second->last_active > ttl_;
        }
        if (idle) {
            it = sessions_.erase(it);
            ++n;
        } else {
            ++it;
        }
    }
    return n;
}

std::size_t ChatService::session_count() const {
    std::lock_guard lk(sessions_mu_);
    return sessions_.size();
}

namespace {

json parse_body(const std::string& body, bool allow_empty) {
    if (body.empty() && allow_empty) return json::object();
    json j;
    try {
        j = json::parse(body);
    } catch (const json::parse_error&) {
        throw ValueError("request body is not valid JSON");
    }
    if (!j.is_object()) throw ValueError("request body must be a JSON object");
    return j;
}

ApiResponse error_response(int status, const std::string& msg) { return {status, json{{"error", msg}}}; }

template <class F>
ApiResponse guarded(F&& f) {
    try {
        return f();
    } catch (const NotFoundError& e) {
        return error_response(404, e.what());
    } catch (const ValueError& e) {
        return error_response(400, e.what());
    } catch (const FormatError& e) {
        return error_response(400, e.what());
    } catch (const json::exception& e) {
        return error_response(400, std::string("malformed field: ") + e.what());
    } catch (const std::exception& e) {
        return error_response(500, e.what());
    }
}

}  // namespace

ApiResponse ChatService::handle_create(const std::string& body) {
    return guarded([&] {
        const json j = parse_body(body, true);
        for (const auto& [k, _] : j.items()) {
            if (k != "persona") throw ValueError("unknown field '" + k + "'");
        }
        std::optional<Persona> p;
        if (j.contains("persona") && !j.at("persona").is_null()) p = persona_from_json(j.at("persona"));
        const std::string id = create_session(p);
        return ApiResponse{200, json{{"session_id", id}, {"persona", to_json(persona(id))}}};
    });
}

ApiResponse ChatService::handle_chat(const std::string& body) {
    return guarded([&] {
        const json j = parse_body(body, false);
        for (const auto& [k, _] : j.items()) {
            if (k != "session_id" && k != "message" && k != "alpha") throw ValueError("unknown field '" + k + "'");
        }
        if (!j.contains("session_id") || !j.at("session_id").is_string()) throw ValueError("session_id is required");
        if (!j.contains("message") || !j.at("message").is_string()) throw ValueError("message is required");
        std::optional<double> alpha;
        if (j.contains("alpha") && !j.at("alpha").is_null()) {
            const json& a = j.at("alpha");
            if (a.is_string()) {
                if (a.get<std::string>() != "auto") throw ValueError("alpha must be a number in [0, 1] or \"auto\"");
            } else if (a.is_number()) {
                alpha = a.get<double>();
                if (!(*alpha >= 0.0 && *alpha <= 1.0)) throw ValueError("alpha must be in [0, 1]");
            } else {
                throw ValueError("alpha must be a number in [0, 1] or \"auto\"");
            }
        }
        const ChatReply r = chat(j.at("session_id").get<std::string>(), j.at("message").get<std::string>(), alpha);
        json out{{"response", r.response}, {"history_len", r.history_len}};
        out.update(to_json(r.alpha));
        return ApiResponse{200, out};
    });
}

ApiResponse ChatService::handle_put_persona(const std::string& session_id, const std::string& body) {
    return guarded([&] {
        find(session_id);
        const json j = parse_body(body, false);
        for (const auto& [k, _] : j.items()) {
            if (k != "persona") throw ValueError("unknown field '" + k + "'");
        }
        if (!j.contains("persona")) throw ValueError("persona is required");
        const Persona p = set_persona(session_id, persona_from_json(j.at("persona")));
        return ApiResponse{200, json{{"persona", to_json(p)}}};
    });
}

ApiResponse ChatService::handle_get(const std::string& session_id) const {
    return guarded([&] { return ApiResponse{200, session_json(session_id)}; });
}

json vocab_meta(const Vocab& vocab) {
    std::string chars;
    for (int id = kNumReserved; id < static_cast<int>(vocab.size()); ++id) chars += vocab.token_text(id);
    return chars;
}

Vocab vocab_from_checkpoint(const std::filesystem::path& path) {
    const CheckpointInfo info = read_checkpoint_info(path);
    if (!info.meta.contains("vocab")) throw FormatError("checkpoint " + path.string() + " carries no vocabulary");
    Vocab v = Vocab::from_chars(utf8_decode(info.meta.at("vocab").get<std::string>()));
    if (v.size() != info.config.vocab_size) {
        throw FormatError("checkpoint vocabulary has " + std::to_string(v.size()) + " entries, model expects " +
                          std::to_string(info.config.vocab_size));
    }
    return v;
}

struct HttpServer::Impl {
    ServerOptions opts;
    httplib::Server server;
    std::thread listener;
    std::thread loader;

    std::mutex mu;
    std::condition_variable cv;
    std::shared_ptr<ChatService> service;
    std::string load_error;
    bool load_done = false;

    std::shared_ptr<ChatService> get() {
        std::lock_guard lk(mu);
        return service;
    }
};

HttpServer::HttpServer(ServerOptions opts) : impl_(std::make_unique<Impl>()) {
    if (opts.checkpoint.empty()) throw ValueError("serve needs a checkpoint");
    if (!std::filesystem::exists(opts.checkpoint)) {
        throw ValueError("checkpoint " + opts.checkpoint.string() + " does not exist");
    }
    read_checkpoint_info(opts.checkpoint);
    opts.decode.validate();
    impl_->opts = std::move(opts);
}

HttpServer::~HttpServer() { stop(); }

namespace {

void send(httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
}

}  // namespace

int HttpServer::start() {
    Impl& im = *impl_;
    im.loader = std::thread([&im] {
        try {
            const auto path = im.opts.checkpoint;
            Vocab vocab = vocab_from_checkpoint(path);
            auto model = std::make_shared<const Model<float>>(load_checkpoint<float>(path));
            auto svc = std::make_shared<ChatService>(model, std::move(vocab), Registry::defaults(), im.opts.decode,
                                                     checkpoint_id(path), im.opts.session_ttl_s);
            std::lock_guard lk(im.mu);
            im.service = std::move(svc);
        } catch (const std::exception& e) {
            std::lock_guard lk(im.mu);
            im.load_error = e.what();
        }
        {
            std::lock_guard lk(im.mu);
            im.load_done = true;
        }
        im.cv.notify_all();
    });

    const std::size_t threads = im.opts.threads;
    im.server.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
    const std::string origin = im.opts.cors_origin;
    im.server.set_default_headers({{"Access-Control-Allow-Origin", origin},
                                   {"Access-Control-Allow-Headers", "Content-Type"},
                                   {"Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS"}});
    im.server.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    auto unavailable = [](httplib::Response& res) {
        send(res, {503, json{{"error", "model is still loading"}}});
    };
    im.server.Get("/healthz", [&im](const httplib::Request&, httplib::Response& res) {
        std::lock_guard lk(im.mu);
        if (im.service) {
            send(res, {200, json{{"status", "ok"}, {"model", im.service->model_id()}}});
        } else if (!im.load_error.empty()) {
            send(res, {503, json{{"status", "error"}, {"error", im.load_error}}});
        } else {
            send(res, {503, json{{"status", "loading"}}});
        }
    });
    im.server.Post("/api/session", [&im, unavailable](const httplib::Request& req, httplib::Response& res) {
        auto svc = im.get();
        if (!svc) return unavailable(res);
        send(res, svc->handle_create(req.body));
    });
    im.server.Post("/api/chat", [&im, unavailable](const httplib::Request& req, httplib::Response& res) {
        auto svc = im.get();
        if (!svc) return unavailable(res);
        send(res, svc->handle_chat(req.body));
    });
    im.server.Put(R"(/api/session/([^/]+)/persona)",
                  [&im, unavailable](const httplib::Request& req, httplib::Response& res) {
                      auto svc = im.get();
                      if (!svc) return unavailable(res);
                      send(res, svc->handle_put_persona(req.matches[1], req.body));
                  });
    im.server.Get(R"(/api/session/([^/]+))", [&im, unavailable](const httplib::Request& req, httplib::Response& res) {
        auto svc = im.get();
        if (!svc) return unavailable(res);
        send(res, svc->handle_get(req.matches[1]));
    });

    int port = im.opts.port;
    if (port == 0) {
        port = im.server.bind_to_any_port(im.opts.host);
        if (port < 0) throw std::runtime_error("cannot bind " + im.opts.host);
    } else if (!im.server.bind_to_port(im.opts.host, port)) {
        throw std::runtime_error("cannot bind " + im.opts.host + ":" + std::to_string(port));
    }
    im.listener = std::thread([&im] { im.server.listen_after_bind(); });
    return port;
}

void HttpServer::stop() {
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->listener.joinable()) impl_->listener.join();
    if (impl_->loader.joinable()) impl_->loader.join();
}

bool HttpServer::wait_ready(std::chrono::milliseconds timeout) {
    std::unique_lock lk(impl_->mu);
    impl_->cv.wait_for(lk, timeout, [&] { return impl_->load_done; });
    return impl_->service != nullptr;
}

std::shared_ptr<ChatService> HttpServer::service() const { return impl_->get(); }

}  // namespace pdial
