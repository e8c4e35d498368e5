#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pdial {

enum class Gender { female, male, unspecified };

std::string to_string(Gender g);
Gender gender_from_string(const std::string& s);

/// Structured speaker profile. An empty location means "not given".
struct Persona {
    Gender gender = Gender::unspecified;
    std::string location;
    std::vector<std::string> tags;

    bool operator==(const Persona&) const = default;
};

struct Utterance {
    std::string speaker;
    std::string text;

    bool operator==(const Utterance&) const = default;
};

struct Turn {
    Utterance utterance;
    Persona persona;

    bool operator==(const Turn&) const = default;
};

struct DialogueContext {
    std::vector<Turn> turns;

    bool operator==(const DialogueContext&) const = default;
};

struct TrainingExample {
    DialogueContext context;
    Persona target_persona;
    std::string response;
    int label = 0;  // 1 when the response exhibits the target persona

    bool operator==(const TrainingExample&) const = default;
};

/// Attribute value lists shared by the data generator, the attribute
/// embedding tables and request validation. Location index 0 is the
/// "unspecified" (empty) location.
struct Registry {
    std::vector<std::string> locations;
    std::vector<std::string> tags;
    std::map<Gender, std::vector<std::string>> gender_lexicon;

    static Registry defaults();

    std::size_t n_genders() const { return 3; }
    std::size_t n_locations() const { return locations.size(); }
    std::size_t n_tags() const { return tags.size(); }

    std::size_t gender_id(Gender g) const { return static_cast<std::size_t>(g); }
    std::size_t location_id(const std::string& loc) const;
    std::size_t tag_id(const std::string& tag) const;

    /// Throws ValueError naming the offending field.
    void validate(const Persona& p) const;
};

/// A prompt and the replies it can draw. Reveal replies carry one slot:
/// {location}, {tag} or {gender_word}.
struct Exchange {
    std::string prompt;
    std::vector<std::string> replies;
};

struct TemplateBanks {
    std::vector<Exchange> reveal_location;
    std::vector<Exchange> reveal_tag;
    std::vector<Exchange> reveal_gender;
    std::vector<Exchange> generic;
    /// Persona-revealing replies that answer a generic prompt unprompted.
    std::vector<std::string> spontaneous;
    /// Attribute-free filler for earlier context turns.
    std::vector<std::string> chatter;
    /// Open word class for the {thing} slot in generic replies and chatter.
    /// Words 2i and 2i+1 form a fixed pair, filled by {pair} as "a and b".
    std::vector<std::string> lexicon;

    static TemplateBanks defaults();
};

struct CorpusConfig {
    std::size_t n_dialogues = 9100;
    double density = 0.162;
    std::uint64_t seed = 7;
    /// Share of persona-revealing examples that answer a generic prompt.
    double spontaneous_share = 0.25;
    std::size_t max_context_turns = 3;
    Registry registry = Registry::defaults();
    TemplateBanks banks = TemplateBanks::defaults();
};

struct SplitSizes {
    std::size_t train = 8000;
    std::size_t valid = 500;
    std::size_t test_random = 500;
    std::size_t test_biased = 100;
};

struct CorpusSplits {
    std::vector<TrainingExample> train;
    std::vector<TrainingExample> valid;
    std::vector<TrainingExample> test_random;
    std::vector<TrainingExample> test_biased;
};

/// 1 iff the response mentions the persona's location or one of its tags
/// (case-folded substring), or a whole word from its gender's lexicon.
int heuristic_label(const std::string& response, const Persona& persona,
                    const Registry& registry = Registry::defaults());

std::vector<TrainingExample> generate_corpus(const CorpusConfig& cfg);

CorpusSplits split_corpus(const std::vector<TrainingExample>& examples, std::uint64_t seed,
                          const SplitSizes& sizes = {});

/// Template-grammar text used as a stand-in pre-training corpus; at least
/// `min_bytes` long, newline separated. Lines are prompt/reply exchanges,
/// persona profiles followed by a self-description, word-pair lists and
/// chatter.
std::string generate_pretrain_text(const CorpusConfig& cfg, std::size_t min_bytes);

/// Rendering used for the persona encoder input.
std::string render_persona(const Persona& p);

nlohmann::json to_json(const Persona& p);
Persona persona_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainingExample& ex);
TrainingExample example_from_json(const nlohmann::json& j);

std::vector<TrainingExample> load_jsonl(const std::filesystem::path& path);
void save_jsonl(const std::vector<TrainingExample>& examples, const std::filesystem::path& path);

}  // namespace pdial
