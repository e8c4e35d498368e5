#include <doctest.h>

#include <filesystem>
#include <random>
#include <set>
#include <thread>

#include <httplib.h>

#include "pdial/checkpoint.hpp"
#include "pdial/serve.hpp"

using namespace pdial;
using nlohmann::json;

namespace {

Vocab test_vocab() { return Vocab::build("abcdefghijklmnopqrstuvwxyz ,.?!'", 64); }

std::shared_ptr<Model<float>> test_model(const Vocab& v) {
    ModelConfig c;
    c.n_blocks = 1;
    c.n_heads = 2;
    c.d_model = 16;
    c.d_ff = 32;
    c.context_window = 128;
    c.vocab_size = v.size();
    auto m = std::make_shared<Model<float>>(c, 5);
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n(0.0, 0.3);
    for (auto* p : m->parameters())
        for (auto& x : p->value().data) x += static_cast<float>(n(rng));
    return m;
}

ChatService make_service(ChatService::Clock::duration* clock = nullptr, double ttl = 3600.0) {
    const Vocab v = test_vocab();
    DecodeConfig d;
    d.max_tokens = 12;
    std::function<ChatService::Clock::time_point()> now = [] { return ChatService::Clock::now(); };
    if (clock) now = [clock] { return ChatService::Clock::time_point(*clock); };
    return ChatService(test_model(v), v, Registry::defaults(), d, "test", ttl, now);
}

}  // namespace

TEST_CASE("chat appends two entries and echoes alpha") {
    auto svc = make_service();
    const std::string id = svc.create_session();
    CHECK(svc.persona(id).location == ChatService::default_persona().location);
    const auto r1 = svc.chat(id, "hello", 0.4);
    CHECK(r1.history_len == 2);
    CHECK(r1.alpha.alpha == 0.4);
    CHECK(r1.alpha.source == AlphaSource::fixed);
    const auto r2 = svc.chat(id, "where are you from?", std::nullopt);
    CHECK(r2.history_len == 4);
    CHECK(r2.alpha.source == AlphaSource::predicted);
    CHECK(r2.alpha.alpha > 0.0);
    CHECK(r2.alpha.alpha < 1.0);
    const auto t = svc.transcript(id);
    REQUIRE(t.size() == 4);
    CHECK(t[0].role == "user");
    CHECK(t[1].role == "agent");
    CHECK(t[1].text == r1.response);
    CHECK(t[3].alpha->alpha == r2.alpha.alpha);
    CHECK_THROWS_AS(svc.chat(id, "", std::nullopt), ValueError);
    CHECK_THROWS_AS(svc.chat(id, "x", 1.2), ValueError);
    CHECK_THROWS_AS(svc.chat("nope", "x", std::nullopt), NotFoundError);
}

TEST_CASE("json handlers") {
    auto svc = make_service();
    auto created = svc.handle_create(R"({"persona": {"gender": "male", "location": "oslo", "tags": ["chess"]}})");
    REQUIRE(created.status == 200);
    const std::string id = created.body.at("session_id");
    CHECK(created.body.at("persona").at("location") == "oslo");
    CHECK(svc.handle_create("").status == 200);

    auto chat = svc.handle_chat(json{{"session_id", id}, {"message", "hi"}, {"alpha", 0.7}}.dump());
    REQUIRE(chat.status == 200);
    CHECK(chat.body.at("alpha_used") == 0.7);
    CHECK(chat.body.at("alpha_source") == "fixed");
    CHECK(chat.body.at("history_len") == 2);
    chat = svc.handle_chat(json{{"session_id", id}, {"message", "hi"}, {"alpha", "auto"}}.dump());
    CHECK(chat.body.at("alpha_source") == "predicted");

    CHECK(svc.handle_chat(json{{"session_id", "zzz"}, {"message", "hi"}}.dump()).status == 404);
    CHECK(svc.handle_chat(json{{"session_id", id}, {"message", "hi"}, {"alpha", 2}}.dump()).status == 400);
    CHECK(svc.handle_chat(json{{"session_id", id}, {"message", "hi"}, {"alpha", "some"}}.dump()).status == 400);
    CHECK(svc.handle_chat(json{{"session_id", id}}.dump()).status == 400);
    CHECK(svc.handle_chat("{not json").status == 400);
    CHECK(svc.handle_chat(json{{"session_id", id}, {"message", "hi"}, {"extra", 1}}.dump()).status == 400);
    CHECK(svc.handle_create(R"({"persona": {"gender": "robot", "location": "oslo", "tags": []}})").status == 400);
    CHECK(svc.handle_create(R"({"persona": {"gender": "male", "location": "atlantis", "tags": []}})").status == 400);

    auto put = svc.handle_put_persona(id, R"({"persona": {"gender": "female", "location": "paris", "tags": []}})");
    CHECK(put.status == 200);
    CHECK(svc.persona(id).location == "paris");
    CHECK(svc.handle_put_persona("zzz", R"({"persona": {}})").status == 404);

    auto got = svc.handle_get(id);
    CHECK(got.status == 200);
    CHECK(got.body.at("history_len") == 4);
    CHECK(got.body.at("history").size() == 4);
    CHECK(got.body.at("history")[1].contains("alpha_used"));
    CHECK_FALSE(got.body.at("history")[0].contains("alpha_used"));
    CHECK(svc.handle_get("zzz").status == 404);
}

TEST_CASE("idle sessions are evicted") {
    ChatService::Clock::duration clock{};
    auto svc = make_service(&clock, 10.0);
    const std::string a = svc.create_session();
    clock += std::chrono::seconds(6);
    const std::string b = svc.create_session();
    clock += std::chrono::seconds(6);
    CHECK(svc.evict_idle() == 1);
    CHECK_THROWS_AS(svc.persona(a), NotFoundError);
    CHECK_NOTHROW(svc.persona(b));
}

TEST_CASE("concurrent sessions stay separate and ordered") {
    auto svc = make_service();
    constexpr int kSessions = 6, kTurns = 4;
    std::vector<std::string> ids;
    for (int i = 0; i < kSessions; ++i) ids.push_back(svc.create_session());
    std::vector<std::thread> threads;
    for (int i = 0; i < kSessions; ++i) {
        for (int dup = 0; dup < 2; ++dup) {
            threads.emplace_back([&, i, dup] {
                for (int t = 0; t < kTurns; ++t)
                    svc.chat(ids[i], "s" + std::to_string(i) + " m" + std::to_string(dup * kTurns + t), std::nullopt);
            });
        }
    }
    for (auto& t : threads) t.join();
    for (int i = 0; i < kSessions; ++i) {
        const auto tr = svc.transcript(ids[i]);
        REQUIRE(tr.size() == 4 * kTurns);
        std::set<std::string> seen;
        for (std::size_t k = 0; k < tr.size(); k += 2) {
            CHECK(tr[k].role == "user");
            CHECK(tr[k + 1].role == "agent");
            CHECK(tr[k].text.rfind("s" + std::to_string(i) + " ", 0) == 0);
            seen.insert(tr[k].text);
        }
        CHECK(seen.size() == 2 * kTurns);
    }
}

TEST_CASE("http server") {
    const auto dir = std::filesystem::temp_directory_path() / "pdial_serve_test";
    std::filesystem::create_directories(dir);
    const Vocab v = test_vocab();
    const auto model = test_model(v);
    save_checkpoint(*model, dir / "m.ckpt", CheckpointScope::full, json{{"vocab", vocab_meta(v)}});
    CHECK(vocab_from_checkpoint(dir / "m.ckpt").size() == v.size());

    CHECK_THROWS_AS(HttpServer{ServerOptions{}}, ValueError);
    ServerOptions missing;
    missing.checkpoint = dir / "none.ckpt";
    CHECK_THROWS_AS(HttpServer{missing}, ValueError);

    ServerOptions opts;
    opts.checkpoint = dir / "m.ckpt";
    opts.port = 0;
    opts.decode.max_tokens = 8;
    HttpServer server(opts);
    const int port = server.start();
    REQUIRE(port > 0);
    httplib::Client cli("127.0.0.1", port);
    REQUIRE(server.wait_ready(std::chrono::seconds(30)));
    auto health = cli.Get("/healthz");
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");

    auto created = cli.Post("/api/session", "{}", "application/json");
    REQUIRE(created);
    CHECK(created->status == 200);
    const std::string id = json::parse(created->body).at("session_id");
    auto chat = cli.Post("/api/chat", json{{"session_id", id}, {"message", "hi"}, {"alpha", 0.3}}.dump(),
                         "application/json");
    REQUIRE(chat);
    CHECK(chat->status == 200);
    CHECK(json::parse(chat->body).at("alpha_used") == 0.3);
    auto put = cli.Put("/api/session/" + id + "/persona",
                       R"({"persona": {"gender": "male", "location": "oslo", "tags": []}})", "application/json");
    REQUIRE(put);
    CHECK(put->status == 200);
    auto got = cli.Get("/api/session/" + id);
    REQUIRE(got);
    CHECK(json::parse(got->body).at("persona").at("location") == "oslo");
    auto missing_session = cli.Get("/api/session/nope");
    REQUIRE(missing_session);
    CHECK(missing_session->status == 404);
    auto options = cli.Options("/api/chat");
    REQUIRE(options);
    CHECK(options->status == 204);
    server.stop();
    std::filesystem::remove_all(dir);
}
