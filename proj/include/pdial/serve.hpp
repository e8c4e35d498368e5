#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdial/decoding.hpp"

namespace pdial {

class NotFoundError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TranscriptEntry {
    std::string role;  // "user" or "agent"
    std::string text;
    std::optional<PersonaWeight> alpha;  // agent turns only
};

struct ChatReply {
    std::string response;
    PersonaWeight alpha;
    std::size_t history_len = 0;
};

/// Status code plus JSON body, independent of any HTTP library.
struct ApiResponse {
    int status = 200;
    nlohmann::json body;
};

/// Session store and chat logic behind the HTTP endpoints. The model is
/// shared read-only; each session has its own lock so turns append in order.
class ChatService {
public:
    using Clock = std::chrono::steady_clock;

    ChatService(std::shared_ptr<const Model<float>> model, Vocab vocab, Registry registry, DecodeConfig decode,
                std::string model_id, double session_ttl_s = 3600.0,
                std::function<Clock::time_point()> now = [] { return Clock::now(); });

    static Persona default_persona();

    std::string create_session(const std::optional<Persona>& persona = std::nullopt);
    /// Appends the user message and the generated reply. alpha empty: predicted.
    ChatReply chat(const std::string& session_id, const std::string& message, std::optional<double> alpha);
    Persona set_persona(const std::string& session_id, const Persona& persona);
    Persona persona(const std::string& session_id) const;
    std::vector<TranscriptEntry> transcript(const std::string& session_id) const;
    nlohmann::json session_json(const std::string& session_id) const;

    /// Drops sessions idle for longer than the TTL; returns how many went.
    std::size_t evict_idle();
    std::size_t session_count() const;
    const std::string& model_id() const { return model_id_; }

    ApiResponse handle_create(const std::string& body);
    ApiResponse handle_chat(const std::string& body);
    ApiResponse handle_put_persona(const std::string& session_id, const std::string& body);
    ApiResponse handle_get(const std::string& session_id) const;

private:
    struct Session {
        std::string id;
        Persona persona;
        DialogueContext history;
        std::vector<TranscriptEntry> transcript;
        Clock::time_point created;
        Clock::time_point last_active;
        mutable std::mutex mu;
    };

    std::shared_ptr<Session> find(const std::string& id) const;
    std::string new_id();

    std::shared_ptr<const Model<float>> model_;
    Vocab vocab_;
    Registry registry_;
    DecodeConfig decode_;
    std::string model_id_;
    Clock::duration ttl_;
    std::function<Clock::time_point()> now_;

    mutable std::mutex sessions_mu_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::uint64_t id_counter_ = 0;
    std::uint64_t id_salt_;
};

nlohmann::json to_json(const PersonaWeight& w);

struct ServerOptions {
    std::filesystem::path checkpoint;
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::string cors_origin = "*";
    double session_ttl_s = 3600.0;
    std::size_t threads = 8;
    DecodeConfig decode;
};

/// Loads the vocabulary stored in a checkpoint's metadata.
Vocab vocab_from_checkpoint(const std::filesystem::path& path);
nlohmann::json vocab_meta(const Vocab& vocab);

/// HTTP front end. The checkpoint header is checked on construction (a
/// missing or malformed file throws); weights load in the background and
/// /healthz answers 503 until they are ready.
class HttpServer {
public:
    explicit HttpServer(ServerOptions opts);
    ~HttpServer();

    /// Binds and serves on a background thread; returns the bound port.
    int start();
    void stop();
    /// Blocks until the checkpoint is loaded (or loading failed).
    bool wait_ready(std::chrono::milliseconds timeout);
    std::shared_ptr<ChatService> service() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace pdial
