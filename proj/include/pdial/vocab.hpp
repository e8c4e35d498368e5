#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace pdial {

/// Reserved token ids. Fixed so that checkpoints and vocab files stay portable.
enum SpecialToken : int { kPad = 0, kBos = 1, kEos = 2, kSpe = 3, kUnk = 4 };
inline constexpr int kNumReserved = 5;

/// Decoded UTF-8 code points; invalid bytes decode to U+FFFD.
std::u32string utf8_decode(std::string_view s);
std::string utf8_encode(std::u32string_view s);
std::string utf8_encode(char32_t c);

/// Character-level vocabulary. Ids 0..4 are the reserved tokens, every other
/// id maps one code point.
class Vocab {
public:
    /// Most frequent code points of `corpus`, at most `max_size` entries in total
    /// (reserved slots included). Ties are broken by lower code point.
    static Vocab build(std::string_view corpus, std::size_t max_size);
    static Vocab build(const std::vector<std::string>& texts, std::size_t max_size);

    /// Builds from an explicit character list (in id order, after the reserved ids).
    static Vocab from_chars(const std::u32string& chars);

    static Vocab load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    std::vector<int> encode(std::string_view text, bool add_bos_eos) const;
    std::string decode(const std::vector<int>& ids) const;

    int id_of(char32_t c) const;
    bool contains(char32_t c) const { return index_.count(c) != 0; }
    std::size_t size() const { return chars_.size() + kNumReserved; }
    /// Surface text of a token; reserved ids render as their literal names.
    std::string token_text(int id) const;

    /// Replacement glyph used when decoding UNK.
    static constexpr char32_t kUnkGlyph = U'�';

private:
    std::u32string chars_;  // id = index + kNumReserved
    std::unordered_map<char32_t, int> index_;
};

}  // namespace pdial
