#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include "pdial/data.hpp"
#include "pdial/tensor.hpp"

using namespace pdial;

namespace {

// Second matcher written against the rule text, not the library code.
int regex_label(const std::string& response, const Persona& p) {
    std::string low;
    for (unsigned char c : response) low += static_cast<char>(std::tolower(c));
    if (!p.location.empty() && std::regex_search(low, std::regex(p.location))) return 1;
    for (const auto& t : p.tags) {
        if (std::regex_search(low, std::regex(t))) return 1;
    }
    std::vector<std::string> words;
    if (p.gender == Gender::female) words = {"girl", "woman", "lady"};
    if (p.gender == Gender::male) words = {"boy", "man", "guy"};
    for (const auto& w : words) {
        if (std::regex_search(low, std::regex("(^|[^a-z0-9])" + w + "([^a-z0-9]|$)"))) return 1;
    }
    return 0;
}

std::vector<std::pair<std::string, Persona>> fixture() {
    const std::vector<std::string> fragments = {
        "ok, see you",  "i live in paris", "PARIS is lovely", "parisian food", "a woman of taste",
        "i'm a guy",     "boyfriend stuff", "that man!",       "the lady said hi", "chess club",
        "CHESS",         "love music",     "the tokyo trip",  "hiking boots",    "girl power",
        "guys night",    "woman",          "human rights",    "so manly",        "cooking, tennis",
        "germany",       "oslo-bound",     "mad rid",         "the boy.",        "nothing here",
    };
    const auto reg = Registry::defaults();
    std::mt19937_64 rng(123);
    std::vector<std::pair<std::string, Persona>> out;
    for (int i = 0; i < 200; ++i) {
        Persona p;
        p.gender = static_cast<Gender>(rng() % 3);
        p.location = reg.locations[rng() % reg.locations.size()];
        const std::size_t nt = rng() % 3;
        for (std::size_t k = 0; k < nt; ++k) {
            const auto& t = reg.tags[rng() % reg.tags.size()];
            if (std::find(p.tags.begin(), p.tags.end(), t) == p.tags.end()) p.tags.push_back(t);
        }
        std::string r = fragments[rng() % fragments.size()];
        if (rng() % 2) r += " and " + fragments[rng() % fragments.size()];
        out.emplace_back(r, p);
    }
    return out;
}

}  // namespace

TEST_CASE("heuristic_label rules") {
    const Persona p{Gender::female, "boston", {"chess"}};
    CHECK(heuristic_label("I grew up in Boston", p) == 1);
    CHECK(heuristic_label("ok, see you", p) == 0);
    CHECK(heuristic_label("a CHESS nerd", p) == 1);
    CHECK(heuristic_label("just a girl", p) == 1);
    CHECK(heuristic_label("girlish", p) == 0);
    CHECK(heuristic_label("a guy", p) == 0);
    const Persona m{Gender::male, "", {}};
    CHECK(heuristic_label("a woman", m) == 0);
    CHECK(heuristic_label("man, that's cool", m) == 1);
    CHECK(heuristic_label("anything", Persona{}) == 0);
}

TEST_CASE("heuristic_label agrees with an independent matcher on 200 cases") {
    std::size_t agree = 0, positives = 0;
    const auto cases = fixture();
    for (const auto& [r, p] : cases) {
        const int a = heuristic_label(r, p);
        positives += a;
        agree += a == regex_label(r, p);
    }
    CHECK(agree == cases.size());
    CHECK(positives > 20);
    CHECK(positives < 180);
}

TEST_CASE("generate_corpus density, labels and determinism") {
    CorpusConfig cfg;
    cfg.n_dialogues = 1000;
    cfg.density = 0.162;
    cfg.seed = 7;
    const auto a = generate_corpus(cfg);
    REQUIRE(a.size() == 1000);
    std::size_t pos = 0;
    for (const auto& ex : a) {
        pos += ex.label;
        CHECK(ex.label == heuristic_label(ex.response, ex.target_persona));
        CHECK_FALSE(ex.context.turns.empty());
        for (const auto& t : ex.context.turns) CHECK_FALSE(t.utterance.text.empty());
        std::set<std::string> tags(ex.target_persona.tags.begin(), ex.target_persona.tags.end());
        CHECK(tags.size() == ex.target_persona.tags.size());
    }
    const double frac = static_cast<double>(pos) / 1000.0;
    CHECK(frac >= 0.142);
    CHECK(frac <= 0.182);
    CHECK(generate_corpus(cfg) == a);

    cfg.seed = 8;
    CHECK_FALSE(generate_corpus(cfg) == a);

    cfg.density = 0.0;
    for (const auto& ex : generate_corpus(cfg)) CHECK(ex.label == 0);
    cfg.density = 1.2;
    CHECK_THROWS_AS(generate_corpus(cfg), ValueError);
}

TEST_CASE("split_corpus") {
    CorpusConfig cfg;
    cfg.n_dialogues = 1000;
    const auto ex = generate_corpus(cfg);
    SplitSizes sizes{800, 50, 100, 50};
    const auto s = split_corpus(ex, 3, sizes);
    CHECK(s.train.size() == 800);
    CHECK(s.valid.size() == 50);
    CHECK(s.test_random.size() == 100);
    CHECK(s.test_biased.size() == 50);
    for (const auto& e : s.test_biased) CHECK(e.label == 1);

    // disjoint: speaker ids are unique per example
    std::set<std::string> seen;
    std::size_t total = 0;
    for (const auto* part : {&s.train, &s.valid, &s.test_random, &s.test_biased}) {
        for (const auto& e : *part) {
            seen.insert(e.context.turns.back().utterance.speaker + "|" + e.response + "|" +
                        render_persona(e.target_persona));
            ++total;
            CHECK(std::find(ex.begin(), ex.end(), e) != ex.end());
        }
    }
    CHECK(seen.size() == total);

    // the random test set keeps roughly the corpus density
    std::size_t rp = 0;
    for (const auto& e : s.test_random) rp += e.label;
    CHECK(rp > 0);

    CHECK_THROWS_AS(split_corpus(ex, 3, SplitSizes{900, 50, 100, 50}), ValueError);
    cfg.density = 0.0;
    const auto none = generate_corpus(cfg);
    CHECK_THROWS_AS(split_corpus(none, 3, sizes), ValueError);
}

TEST_CASE("desk defaults split 9100 examples") {
    CorpusConfig cfg;
    const auto ex = generate_corpus(cfg);
    CHECK(ex.size() == 9100);
    const auto s = split_corpus(ex, 1);
    CHECK(s.train.size() == 8000);
    CHECK(s.valid.size() == 500);
    CHECK(s.test_random.size() == 500);
    CHECK(s.test_biased.size() == 100);
}

TEST_CASE("render_persona format") {
    CHECK(render_persona({Gender::male, "oslo", {"yoga", "chess"}}) == "gender:male ; location:oslo ; tags:chess,yoga");
    CHECK(render_persona({}) == "gender:unspecified ; location: ; tags:");
    const auto reg = Registry::defaults();
    std::set<std::string> seen;
    for (int g = 0; g < 3; ++g) {
        for (const auto& l : reg.locations) {
            for (const auto& t : reg.tags) seen.insert(render_persona({static_cast<Gender>(g), l, {t}}));
        }
    }
    CHECK(seen.size() == 3 * reg.locations.size() * reg.tags.size());
}

TEST_CASE("lexicon words never trip the labeler") {
    const auto b = TemplateBanks::defaults();
    const auto reg = Registry::defaults();
    CHECK(b.lexicon.size() == 600);
    CHECK(std::set<std::string>(b.lexicon.begin(), b.lexicon.end()).size() == b.lexicon.size());
    for (const auto& w : b.lexicon) {
        for (int g = 0; g < 3; ++g) {
            for (const auto& l : reg.locations) {
                CHECK(heuristic_label("just a " + w + ".", {static_cast<Gender>(g), l, reg.tags}) == 0);
            }
        }
    }
    CorpusConfig cfg;
    cfg.banks.lexicon = {"paris", "x"};
    CHECK_THROWS_AS(generate_corpus(cfg), ValueError);
    cfg.banks.lexicon = {"two words", "x"};
    CHECK_THROWS_AS(generate_corpus(cfg), ValueError);
    cfg.banks.lexicon.clear();
    CHECK_THROWS_AS(generate_corpus(cfg), ValueError);
}

TEST_CASE("open slots are filled in the corpus") {
    CorpusConfig cfg;
    cfg.n_dialogues = 400;
    const auto ex = generate_corpus(cfg);
    const std::set<std::string> lex(cfg.banks.lexicon.begin(), cfg.banks.lexicon.end());
    std::size_t with_word = 0;
    for (const auto& e : ex) {
        CHECK(e.response.find('{') == std::string::npos);
        for (const auto& t : e.context.turns) CHECK(t.utterance.text.find('{') == std::string::npos);
        const std::regex about("a book about ([a-z]+)\\.");
        std::smatch m;
        if (std::regex_match(e.response, m, about)) {
            CHECK(lex.count(m[1].str()) == 1);
            ++with_word;
        }
    }
    CHECK(with_word > 0);
}

TEST_CASE("pre-training text") {
    CorpusConfig cfg;
    const auto text = generate_pretrain_text(cfg, 20000);
    CHECK(text.size() >= 20000);
    CHECK(text.back() == '\n');
    CHECK(text == generate_pretrain_text(cfg, 20000));
    CHECK(text.find('{') == std::string::npos);
    const auto reg = Registry::defaults();
    const auto& lex = cfg.banks.lexicon;
    std::istringstream in(text);
    std::string line;
    std::size_t profiles = 0, pairs = 0;
    const std::regex profile("gender:(female|male) ; location:([a-z]+) ; tags:([a-z,]+) (.+)");
    while (std::getline(in, line)) {
        CHECK_FALSE(line.empty());
        std::smatch m;
        if (std::regex_match(line, m, profile)) {
            // the self-description that follows reveals the profile it follows
            ++profiles;
            Persona p{gender_from_string(m[1].str()), m[2].str(), {}};
            std::stringstream tags(m[3].str());
            for (std::string t; std::getline(tags, t, ',');) p.tags.push_back(t);
            CHECK(heuristic_label(m[4].str(), p, reg) == 1);
        }
        for (std::size_t i = 0; i + 1 < lex.size(); i += 2) {
            if (line.find(" " + lex[i] + " and " + lex[i + 1]) != std::string::npos ||
                line.rfind(lex[i] + " and " + lex[i + 1], 0) == 0) {
                ++pairs;
                break;
            }
        }
    }
    CHECK(profiles > 20);
    CHECK(pairs > 20);
    cfg.seed = 8;
    CHECK(generate_pretrain_text(cfg, 20000) != text);
}

TEST_CASE("registry validation") {
    const auto reg = Registry::defaults();
    CHECK_NOTHROW(reg.validate({Gender::female, "paris", {"music"}}));
    CHECK_THROWS_AS(reg.validate({Gender::female, "atlantis", {}}), ValueError);
    CHECK_THROWS_AS(reg.validate({Gender::female, "paris", {"music", "music"}}), ValueError);
    CHECK_THROWS_AS(reg.validate({Gender::female, "paris", {"knitting"}}), ValueError);
    CHECK_THROWS_AS(gender_from_string("other"), ValueError);
    CHECK(gender_from_string("male") == Gender::male);
}

TEST_CASE("jsonl round trip and errors") {
    const auto dir = std::filesystem::temp_directory_path() / "pdial_data_test";
    std::filesystem::create_directories(dir);
    CorpusConfig cfg;
    cfg.n_dialogues = 50;
    const auto ex = generate_corpus(cfg);
    save_jsonl(ex, dir / "a.jsonl");
    CHECK(load_jsonl(dir / "a.jsonl") == ex);

    std::ofstream(dir / "empty.jsonl").close();
    CHECK(load_jsonl(dir / "empty.jsonl").empty());

    {
        std::ofstream out(dir / "bad.jsonl");
        out << to_json(ex[0]).dump() << '\n';
        auto j = to_json(ex[1]);
        j.erase("target_persona");
        out << j.dump() << '\n';
    }
    try {
        load_jsonl(dir / "bad.jsonl");
        FAIL("expected an error");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
    CHECK_THROWS_AS(load_jsonl(dir / "missing.jsonl"), FormatError);
    std::filesystem::remove_all(dir);
}
