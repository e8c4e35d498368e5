#include "pdial/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "pdial/tensor.hpp"

namespace pdial {

using nlohmann::json;

std::string to_string(Gender g) {
    switch (g) {
        case Gender::female: return "female";
        case Gender::male: return "male";
        case Gender::unspecified: return "unspecified";
    }
    return "unspecified";
}

Gender gender_from_string(const std::string& s) {
    if (s == "female") return Gender::female;
    if (s == "male") return Gender::male;
    if (s == "unspecified") return Gender::unspecified;
    throw ValueError("unknown gender '" + s + "'");
}

Registry Registry::defaults() {
    Registry r;
    r.locations = {"",       "paris", "london", "tokyo", "berlin", "madrid", "boston",
                   "cairo",  "dublin", "oslo",  "seoul", "sydney", "toronto"};
    r.tags = {"chess", "music", "hiking", "cooking", "soccer", "movies",
              "poetry", "travel", "yoga",  "gaming", "painting", "tennis"};
    r.gender_lexicon = {
        {Gender::female, {"girl", "woman", "lady"}},
        {Gender::male, {"boy", "man", "guy"}},
        {Gender::unspecified, {}},
    };
    return r;
}

std::size_t Registry::location_id(const std::string& loc) const {
    auto it = std::find(locations.begin(), locations.end(), loc);
    if (it == locations.end()) throw ValueError("unknown location '" + loc + "'");
    return static_cast<std::size_t>(it - locations.begin());
}

std::size_t Registry::tag_id(const std::string& tag) const {
    auto it = std::find(tags.begin(), tags.end(), tag);
    if (it == tags.end()) throw ValueError("unknown tag '" + tag + "'");
    return static_cast<std::size_t>(it - tags.begin());
}

void Registry::validate(const Persona& p) const {
    location_id(p.location);
    std::set<std::string> seen;
    for (const auto& t : p.tags) {
        tag_id(t);
        if (!seen.insert(t).second) throw ValueError("duplicate tag '" + t + "'");
    }
}

namespace {

// Pronounceable nonce words; any word the labeler could read as a persona
// attribute is skipped.
std::vector<std::string> make_lexicon(std::size_t n) {
    static const char* onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t",
                                   "v", "z", "br", "dr", "gl", "kr", "pl", "sk", "st", "tr", "sh", "ch"};
    static const char* vowels[] = {"a", "e", "i", "o", "u", "ai", "ea", "ou"};
    static const char* codas[] = {"", "", "n", "r", "l", "s", "m", "t"};
    const Registry reg = Registry::defaults();
    std::vector<std::string> banned = reg.locations;
    banned.insert(banned.end(), reg.tags.begin(), reg.tags.end());
    std::set<std::string> whole;
    for (const auto& [_, words] : reg.gender_lexicon) whole.insert(words.begin(), words.end());

    std::mt19937_64 rng(0x1e71c0ull);
    std::uniform_int_distribution<int> syl(2, 3), on(0, 23), vo(0, 7), co(0, 7);
    std::set<std::string> seen;
    std::vector<std::string> out;
    while (out.size() < n) {
        std::string w;
        const int k = syl(rng);
        for (int i = 0; i < k; ++i) w += std::string(onsets[on(rng)]) + vowels[vo(rng)];
        w += codas[co(rng)];
        bool ok = !whole.count(w) && !seen.count(w);
        for (const auto& b : banned) {
            if (!b.empty() && w.find(b) != std::string::npos) ok = false;
        }
        if (!ok) continue;
        seen.insert(w);
        out.push_back(w);
    }
    return out;
}

}  // namespace

TemplateBanks TemplateBanks::defaults() {
    TemplateBanks b;
    b.reveal_location = {
        {"where do you live?", {"i live in {location}.", "{location}, born and raised."}},
        {"where are you from?", {"i am from {location}.", "originally {location}."}},
        {"which city are you in?", {"i am in {location} right now.", "{location} at the moment."}},
        {"where is home for you?", {"home is {location} for me.", "{location}, always."}},
    };
    b.reveal_tag = {
        {"what do you do for fun?", {"i really love {tag}.", "{tag}, every chance i get."}},
        {"any hobbies?", {"mostly {tag}, it keeps me sane.", "{tag} is my thing."}},
        {"what are you into lately?", {"lots of {tag} lately.", "i got into {tag}."}},
        {"how do you spend weekends?", {"i spend weekends on {tag}.", "{tag} all weekend."}},
    };
    b.reveal_gender = {
        {"are you a boy or a girl?", {"i am a {gender_word}.", "a {gender_word}, obviously."}},
        {"sir or madam?", {"call me a {gender_word}.", "i am a {gender_word} here."}},
        {"how should i address you?", {"just a regular {gender_word}.", "as a {gender_word}, please."}},
    };
    b.generic = {
        {"how was your day?", {"it was fine, thanks.", "pretty good, a bit tired."}},
        {"did you sleep well?", {"not really, long night.", "yes, like a rock."}},
        {"are you busy now?", {"a little, talk later?", "no, i am free."}},
        {"nice weather today!", {"yes, so sunny.", "too hot for me."}},
        {"did you eat yet?", {"yes, just had lunch.", "not yet, soon."}},
        {"any plans tonight?", {"not sure yet.", "just resting at home."}},
        {"that was funny.", {"ha ha, same here.", "i could not stop laughing."}},
        {"good morning!", {"good morning to you too!", "morning, coffee first."}},
        {"see the news today?", {"no, what happened?", "yes, it was wild."}},
        {"how are you?", {"i am okay, thank you.", "doing well, and you?"}},
        {"what are you reading?", {"a book about {thing}.", "something on {thing}, quite dull."}},
        {"what did you buy?", {"{pair}, on sale.", "just a {thing}."}},
        {"what is that noise?", {"probably the {thing} again.", "no idea, maybe a {thing}."}},
    };
    b.spontaneous = {
        "great, i did some {tag} today.",
        "busy, just got back to {location}.",
        "fine, {tag} all afternoon.",
        "good, it is lovely in {location}.",
    };
    b.chatter = {"lol", "same here.", "so true.", "that is wild.", "i agree.",
                 "hello all!", "nice one.", "wow, really?", "good point.",
                 "where is my {thing}?", "{pair}, as usual."};
    b.lexicon = make_lexicon(600);
    return b;
}

namespace {

std::string fold_case(const std::string& s) {
    std::string out = s;
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

bool contains_word(const std::string& hay, const std::string& word) {
    if (word.empty()) return false;
    std::size_t pos = hay.find(word);
    while (pos != std::string::npos) {
        const bool left = pos == 0 || !is_word_char(hay[pos - 1]);
        const std::size_t end = pos + word.size();
        const bool right = end == hay.size() || !is_word_char(hay[end]);
        if (left && right) return true;
        pos = hay.find(word, pos + 1);
    }
    return false;
}

std::string fill_slot(std::string tpl, const std::string& slot, const std::string& value) {
    const auto pos = tpl.find(slot);
    if (pos != std::string::npos) tpl.replace(pos, slot.size(), value);
    return tpl;
}

template <class C>
const auto& pick(const C& items, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> d(0, items.size() - 1);
    return items[d(rng)];
}

std::string word_pair(const std::vector<std::string>& lex, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> d(0, lex.size() / 2 - 1);
    const std::size_t i = 2 * d(rng);
    return lex[i] + " and " + lex[i + 1];
}

// Fills {thing} and {pair}; other text is returned unchanged.
std::string fill_open(std::string tpl, const TemplateBanks& b, std::mt19937_64& rng) {
    while (tpl.find("{thing}") != std::string::npos) tpl = fill_slot(tpl, "{thing}", pick(b.lexicon, rng));
    while (tpl.find("{pair}") != std::string::npos) tpl = fill_slot(tpl, "{pair}", word_pair(b.lexicon, rng));
    return tpl;
}

Persona sample_persona(const Registry& reg, std::mt19937_64& rng) {
    Persona p;
    std::discrete_distribution<int> g({45, 45, 10});
    p.gender = static_cast<Gender>(g(rng));
    std::uniform_int_distribution<std::size_t> loc(1, reg.locations.size() - 1);
    p.location = reg.locations[loc(rng)];
    std::uniform_int_distribution<std::size_t> ntags(0, 3);
    std::vector<std::size_t> idx(reg.tags.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t k = std::min(ntags(rng), idx.size());
    std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t i = 0; i < k; ++i) p.tags.push_back(reg.tags[idx[i]]);
    return p;
}

enum class RevealKind { location, tag, gender };

std::vector<RevealKind> revealable(const Persona& p, const Registry& reg) {
    std::vector<RevealKind> kinds;
    if (!p.location.empty()) kinds.push_back(RevealKind::location);
    if (!p.tags.empty()) kinds.push_back(RevealKind::tag);
    auto it = reg.gender_lexicon.find(p.gender);
    if (it != reg.gender_lexicon.end() && !it->second.empty()) kinds.push_back(RevealKind::gender);
    return kinds;
}

std::string fill_reveal(const std::string& tpl, const Persona& p, const Registry& reg, std::mt19937_64& rng) {
    std::string out = tpl;
    if (out.find("{location}") != std::string::npos) out = fill_slot(out, "{location}", p.location);
    if (out.find("{tag}") != std::string::npos) out = fill_slot(out, "{tag}", pick(p.tags, rng));
    if (out.find("{gender_word}") != std::string::npos) {
        out = fill_slot(out, "{gender_word}", pick(reg.gender_lexicon.at(p.gender), rng));
    }
    return out;
}

void check_banks(const CorpusConfig& cfg) {
    const auto& b = cfg.banks;
    const auto& reg = cfg.registry;
    if (cfg.density < 0.0 || cfg.density > 1.0) {
        throw ValueError("corpus density must lie in [0, 1], got " + std::to_string(cfg.density));
    }
    if (cfg.spontaneous_share < 0.0 || cfg.spontaneous_share > 1.0) {
        throw ValueError("spontaneous_share must lie in [0, 1]");
    }
    if (reg.locations.size() < 2 || reg.locations[0] != "") {
        throw ValueError("registry needs the empty location first and at least one real location");
    }
    if (cfg.n_dialogues == 0) throw ValueError("n_dialogues must be positive");
    const bool need_pos = cfg.density > 0.0;
    const bool need_neg = cfg.density < 1.0;
    if (need_pos && b.reveal_location.empty() && b.reveal_tag.empty() && b.reveal_gender.empty()) {
        throw ValueError("density " + std::to_string(cfg.density) + " is unachievable: no persona-revealing templates");
    }
    if (need_pos && cfg.spontaneous_share > 0.0 && b.spontaneous.empty()) {
        throw ValueError("spontaneous_share > 0 but no spontaneous templates");
    }
    if ((need_neg || (need_pos && cfg.spontaneous_share > 0.0)) && b.generic.empty()) {
        throw ValueError("density " + std::to_string(cfg.density) + " is unachievable: no generic templates");
    }
    bool open_slots = false;
    std::vector<std::string> generic_text = b.chatter;
    for (const auto& ex : b.generic) {
        generic_text.push_back(ex.prompt);
        generic_text.insert(generic_text.end(), ex.replies.begin(), ex.replies.end());
    }
    for (const auto& text : generic_text) {
        if (text.find("{thing}") != std::string::npos || text.find("{pair}") != std::string::npos) open_slots = true;
    }
    if (open_slots && b.lexicon.size() < 2) throw ValueError("{thing}/{pair} templates need at least two lexicon words");
    for (const auto& w : b.lexicon) {
        if (w.empty() || w.find_first_of(" {}") != std::string::npos) {
            throw ValueError("lexicon word '" + w + "' must be a single non-empty word");
        }
    }
    // Generic material must never trip the labeler, whatever the persona.
    generic_text.insert(generic_text.end(), b.lexicon.begin(), b.lexicon.end());
    for (const auto& text : generic_text) {
        for (Gender g : {Gender::female, Gender::male, Gender::unspecified}) {
            for (const auto& loc : reg.locations) {
                Persona p{g, loc, reg.tags};
                if (heuristic_label(text, p, reg) != 0) {
                    throw ValueError("generic template '" + text + "' mentions a persona attribute");
                }
            }
        }
    }
}

}  // namespace

int heuristic_label(const std::string& response, const Persona& persona, const Registry& registry) {
    const std::string text = fold_case(response);
    if (!persona.location.empty() && text.find(fold_case(persona.location)) != std::string::npos) return 1;
    for (const auto& tag : persona.tags) {
        if (!tag.empty() && text.find(fold_case(tag)) != std::string::npos) return 1;
    }
    auto it = registry.gender_lexicon.find(persona.gender);
    if (it != registry.gender_lexicon.end()) {
        for (const auto& w : it->second) {
            if (contains_word(text, fold_case(w))) return 1;
        }
    }
    return 0;
}

std::vector<TrainingExample> generate_corpus(const CorpusConfig& cfg) {
    check_banks(cfg);
    const auto& reg = cfg.registry;
    const auto& b = cfg.banks;
    std::mt19937_64 rng(cfg.seed);

    const auto n = cfg.n_dialogues;
    const auto n_pos = static_cast<std::size_t>(std::llround(cfg.density * static_cast<double>(n)));
    std::vector<std::uint8_t> labels(n, 0);
    std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_pos), 1);
    std::shuffle(labels.begin(), labels.end(), rng);

    std::bernoulli_distribution spontaneous(cfg.spontaneous_share);
    std::bernoulli_distribution responder_in_context(0.3);
    std::uniform_int_distribution<std::size_t> n_chatter(0, cfg.max_context_turns > 0 ? cfg.max_context_turns - 1 : 0);

    std::vector<TrainingExample> out;
    out.reserve(n);
    std::size_t next_speaker = 0;
    for (std::size_t i = 0; i < n; ++i) {
        TrainingExample ex;
        const bool positive = labels[i] != 0;
        Persona target = sample_persona(reg, rng);
        while (positive && revealable(target, reg).empty()) target = sample_persona(reg, rng);
        const Persona asker = sample_persona(reg, rng);
        const Persona bystander = sample_persona(reg, rng);
        const std::string target_id = "u" + std::to_string(next_speaker++);
        const std::string asker_id = "u" + std::to_string(next_speaker++);
        const std::string bystander_id = "u" + std::to_string(next_speaker++);

        const std::size_t chatter = n_chatter(rng);
        for (std::size_t t = 0; t < chatter; ++t) {
            const std::string text = fill_open(pick(b.chatter, rng), b, rng);
            if (responder_in_context(rng)) {
                ex.context.turns.push_back({{target_id, text}, target});
            } else {
                ex.context.turns.push_back({{bystander_id, text}, bystander});
            }
        }

        std::string prompt;
        std::string reply;
        if (!positive) {
            const auto& exch = pick(b.generic, rng);
            prompt = exch.prompt;
            reply = fill_open(pick(exch.replies, rng), b, rng);
        } else if (cfg.spontaneous_share > 0.0 && spontaneous(rng)) {
            prompt = pick(b.generic, rng).prompt;
            // pick a spontaneous template this persona can fill
            std::vector<std::string> usable;
            for (const auto& s : b.spontaneous) {
                if (s.find("{tag}") != std::string::npos && target.tags.empty()) continue;
                if (s.find("{location}") != std::string::npos && target.location.empty()) continue;
                usable.push_back(s);
            }
            if (usable.empty()) {
                throw ValueError("no spontaneous template fits the sampled persona");
            }
            reply = fill_reveal(pick(usable, rng), target, reg, rng);
        } else {
            const auto kinds = revealable(target, reg);
            std::vector<RevealKind> avail;
            for (auto k : kinds) {
                if (k == RevealKind::location && !b.reveal_location.empty()) avail.push_back(k);
                if (k == RevealKind::tag && !b.reveal_tag.empty()) avail.push_back(k);
                if (k == RevealKind::gender && !b.reveal_gender.empty()) avail.push_back(k);
            }
            if (avail.empty()) throw ValueError("no reveal template fits the sampled persona");
            const RevealKind kind = pick(avail, rng);
            const auto& bank = kind == RevealKind::location ? b.reveal_location
                               : kind == RevealKind::tag    ? b.reveal_tag
                                                            : b.reveal_gender;
            const auto& exch = pick(bank, rng);
            prompt = exch.prompt;
            reply = fill_reveal(pick(exch.replies, rng), target, reg, rng);
        }
        ex.context.turns.push_back({{asker_id, prompt}, asker});
        ex.target_persona = target;
        ex.response = reply;
        ex.label = heuristic_label(reply, target, reg);
        if (ex.label != (positive ? 1 : 0)) {
            throw ValueError("template produced a response whose label disagrees with its bank: '" + reply + "'");
        }
        out.push_back(std::move(ex));
    }
    return out;
}

CorpusSplits split_corpus(const std::vector<TrainingExample>& examples, std::uint64_t seed, const SplitSizes& sizes) {
    const std::size_t need = sizes.train + sizes.valid + sizes.test_random + sizes.test_biased;
    if (need > examples.size()) {
        throw ValueError("split sizes need " + std::to_string(need) + " examples, corpus has " +
                         std::to_string(examples.size()));
    }
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    CorpusSplits s;
    std::vector<std::uint8_t> used(examples.size(), 0);
    // drawn from the back so the front of the order stays an unconditioned sample
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const std::size_t idx = *it;
        if (s.test_biased.size() == sizes.test_biased) break;
        if (examples[idx].label == 1) {
            s.test_biased.push_back(examples[idx]);
            used[idx] = 1;
        }
    }
    if (s.test_biased.size() < sizes.test_biased) {
        throw ValueError("biased split needs " + std::to_string(sizes.test_biased) +
                         " persona-related examples, corpus has " + std::to_string(s.test_biased.size()));
    }
    std::vector<std::size_t> rest;
    for (std::size_t idx : order) {
        if (!used[idx]) rest.push_back(idx);
    }
    std::size_t pos = 0;
    auto take = [&](std::vector<TrainingExample>& dst, std::size_t count) {
        for (std::size_t k = 0; k < count; ++k) dst.push_back(examples[rest[pos++]]);
    };
    take(s.test_random, sizes.test_random);
    take(s.valid, sizes.valid);
    take(s.train, sizes.train);
    return s;
}

std::string generate_pretrain_text(const CorpusConfig& cfg, std::size_t min_bytes) {
    check_banks(cfg);
    const auto& reg = cfg.registry;
    const auto& b = cfg.banks;
    std::mt19937_64 rng(cfg.seed ^ 0x5eedull);
    std::vector<const Exchange*> exchanges;
    for (const auto* bank : {&b.reveal_location, &b.reveal_tag, &b.reveal_gender, &b.generic}) {
        for (const auto& e : *bank) exchanges.push_back(&e);
    }
    std::vector<std::string> self_desc;
    for (const auto* bank : {&b.reveal_location, &b.reveal_tag, &b.reveal_gender}) {
        for (const auto& e : *bank) self_desc.insert(self_desc.end(), e.replies.begin(), e.replies.end());
    }
    self_desc.insert(self_desc.end(), b.spontaneous.begin(), b.spontaneous.end());
    if (exchanges.empty() && b.chatter.empty()) throw ValueError("no templates to build pre-training text from");

    auto fill = [&](const std::string& tpl, const Persona& p) { return fill_open(fill_reveal(tpl, p, reg, rng), b, rng); };
    // profile 3, exchange 4, word pairs 2, chatter 1
    std::discrete_distribution<int> kind({3, 4, 2, 1});
    std::uniform_int_distribution<int> n_desc(1, 2), n_pairs(2, 4);
    std::string out;
    while (out.size() < min_bytes) {
        Persona p = sample_persona(reg, rng);
        if (p.tags.empty()) p.tags.push_back(pick(reg.tags, rng));
        if (p.gender == Gender::unspecified) p.gender = Gender::female;
        std::string line;
        int k = kind(rng);
        if (k == 0 && self_desc.empty()) k = 1;
        if (k == 1 && exchanges.empty()) k = 3;
        if (k == 2 && b.lexicon.size() < 2) k = 3;
        if (k == 3 && b.chatter.empty()) k = 1;
        switch (k) {
            case 0: {
                line = render_persona(p);
                for (int i = n_desc(rng); i > 0; --i) line += " " + fill(pick(self_desc, rng), p);
                break;
            }
            case 1: {
                const Exchange& e = *pick(exchanges, rng);
                line = e.prompt + " " + fill(pick(e.replies, rng), p);
                break;
            }
            case 2: {
                for (int i = n_pairs(rng); i > 0; --i) {
                    if (!line.empty()) line += ", ";
                    line += word_pair(b.lexicon, rng);
                }
                line += ".";
                break;
            }
            default: line = fill(pick(b.chatter, rng), p);
        }
        out += line;
        out += '\n';
    }
    return out;
}

std::string render_persona(const Persona& p) {
    std::vector<std::string> tags = p.tags;
    std::sort(tags.begin(), tags.end());
    std::string out = "gender:" + to_string(p.gender) + " ; location:" + p.location + " ; tags:";
    for (std::size_t i = 0; i < tags.size(); ++i) {
        if (i) out += ',';
        out += tags[i];
    }
    return out;
}

json to_json(const Persona& p) {
    return json{{"gender", to_string(p.gender)}, {"location", p.location}, {"tags", p.tags}};
}

Persona persona_from_json(const json& j) {
    if (!j.is_object()) throw FormatError("persona must be an object");
    Persona p;
    if (j.contains("gender")) p.gender = gender_from_string(j.at("gender").get<std::string>());
    if (j.contains("location")) p.location = j.at("location").get<std::string>();
    if (j.contains("tags")) p.tags = j.at("tags").get<std::vector<std::string>>();
    for (const auto& [k, _] : j.items()) {
        if (k != "gender" && k != "location" && k != "tags") throw FormatError("unknown persona field '" + k + "'");
    }
    return p;
}

json to_json(const TrainingExample& ex) {
    json ctx = json::array();
    for (const auto& t : ex.context.turns) {
        ctx.push_back({{"speaker", t.utterance.speaker}, {"text", t.utterance.text}, {"persona", to_json(t.persona)}});
    }
    return json{{"context", ctx}, {"target_persona", to_json(ex.target_persona)}, {"response", ex.response},
                {"label", ex.label}};
}

TrainingExample example_from_json(const json& j) {
    if (!j.is_object()) throw FormatError("record is not an object");
    for (const char* key : {"context", "target_persona", "response", "label"}) {
        if (!j.contains(key)) throw FormatError(std::string("missing ") + key);
    }
    TrainingExample ex;
    for (const auto& t : j.at("context")) {
        Turn turn;
        turn.utterance.speaker = t.at("speaker").get<std::string>();
        turn.utterance.text = t.at("text").get<std::string>();
        turn.persona = persona_from_json(t.at("persona"));
        ex.context.turns.push_back(std::move(turn));
    }
    ex.target_persona = persona_from_json(j.at("target_persona"));
    ex.response = j.at("response").get<std::string>();
    ex.label = j.at("label").get<int>();
    if (ex.label != 0 && ex.label != 1) throw FormatError("label must be 0 or 1");
    return ex;
}

std::vector<TrainingExample> load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::vector<TrainingExample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(example_from_json(json::parse(line)));
        } catch (const std::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void save_jsonl(const std::vector<TrainingExample>& examples, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    for (const auto& ex : examples) out << to_json(ex).dump() << '\n';
}

}  // namespace pdial
