#include "pdial/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "pdial/tensor.hpp"

namespace pdial {

namespace {

constexpr const char* kReservedNames[kNumReserved] = {"<pad>", "<bos>", "<eos>", "<spe>", "<unk>"};

// Vocab files hold one token per line; newline and backslash are escaped.
std::string escape_token(char32_t c) {
    if (c == U'\n') return "\\n";
    if (c == U'\r') return "\\r";
    if (c == U'\\') return "\\\\";
    return utf8_encode(c);
}

}  // namespace

std::u32string utf8_decode(std::string_view s) {
    std::u32string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        const auto b0 = static_cast<unsigned char>(s[i]);
        std::size_t len = 0;
        char32_t cp = 0;
        if (b0 < 0x80) {
            len = 1;
            cp = b0;
        } else if ((b0 & 0xE0) == 0xC0) {
            len = 2;
            cp = b0 & 0x1F;
        } else if ((b0 & 0xF0) == 0xE0) {
            len = 3;
            cp = b0 & 0x0F;
        } else if ((b0 & 0xF8) == 0xF0) {
            len = 4;
            cp = b0 & 0x07;
        }
        bool ok = len != 0 && i + len <= s.size();
        for (std::size_t k = 1; ok && k < len; ++k) {
            const auto b = static_cast<unsigned char>(s[i + k]);
            if ((b & 0xC0) != 0x80) ok = false;
            cp = (cp << 6) | (b & 0x3F);
        }
        if (!ok) {
            out.push_back(U'�');
            ++i;
            continue;
        }
        out.push_back(cp);
        i += len;
    }
    return out;
}

std::string utf8_encode(char32_t c) {
    std::string out;
    if (c < 0x80) {
        out.push_back(static_cast<char>(c));
    } else if (c < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (c >> 6)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else if (c < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (c >> 12)));
        out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (c >> 18)));
        out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    }
    return out;
}

std::string utf8_encode(std::u32string_view s) {
    std::string out;
    out.reserve(s.size());
    for (char32_t c : s) out += utf8_encode(c);
    return out;
}

Vocab Vocab::build(std::string_view corpus, std::size_t max_size) {
    return build(std::vector<std::string>{std::string(corpus)}, max_size);
}

Vocab Vocab::build(const std::vector<std::string>& texts, std::size_t max_size) {
    std::map<char32_t, std::size_t> counts;
    for (const auto& t : texts) {
        for (char32_t c : utf8_decode(t)) ++counts[c];
    }
    if (counts.empty()) throw ValueError("build_vocab: corpus is empty");
    if (max_size < kNumReserved) {
        throw ValueError("build_vocab: max_size must be at least " + std::to_string(kNumReserved));
    }
    std::vector<std::pair<char32_t, std::size_t>> ranked(counts.begin(), counts.end());
    // map iteration is already in code-point order, so a stable sort by count keeps the tie rule
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    const std::size_t keep = std::min(ranked.size(), max_size - kNumReserved);
    std::u32string chars;
    for (std::size_t i = 0; i < keep; ++i) chars.push_back(ranked[i].first);
    std::sort(chars.begin(), chars.end());
    return from_chars(chars);
}

Vocab Vocab::from_chars(const std::u32string& chars) {
    Vocab v;
    for (char32_t c : chars) {
        if (v.index_.count(c)) throw ValueError("vocab: duplicate character U+" + std::to_string(c));
        v.index_[c] = static_cast<int>(v.chars_.size()) + kNumReserved;
        v.chars_.push_back(c);
    }
    return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open vocab file " + path.string());
    std::string line;
    std::size_t lineno = 0;
    std::u32string chars;
    while (std::getline(in, line)) {
        if (lineno < kNumReserved) {
            if (line != kReservedNames[lineno]) {
                throw FormatError(path.string() + ":" + std::to_string(lineno + 1) + ": expected reserved token " +
                                  kReservedNames[lineno]);
            }
        } else {
            std::u32string tok;
            if (line == "\\n") {
                tok = U"\n";
            } else if (line == "\\r") {
                tok = U"\r";
            } else if (line == "\\\\") {
                tok = U"\\";
            } else {
                tok = utf8_decode(line);
            }
            if (tok.size() != 1) {
                throw FormatError(path.string() + ":" + std::to_string(lineno + 1) + ": expected a single character");
            }
            chars.push_back(tok[0]);
        }
        ++lineno;
    }
    if (lineno < kNumReserved) throw FormatError(path.string() + ": truncated vocab file");
    return from_chars(chars);
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write vocab file " + path.string());
    for (const char* name : kReservedNames) out << name << '\n';
    for (char32_t c : chars_) out << escape_token(c) << '\n';
}

int Vocab::id_of(char32_t c) const {
    auto it = index_.find(c);
    return it == index_.end() ? kUnk : it->second;
}

std::vector<int> Vocab::encode(std::string_view text, bool add_bos_eos) const {
    const auto cps = utf8_decode(text);
    std::vector<int> ids;
    ids.reserve(cps.size() + 2);
    if (add_bos_eos) ids.push_back(kBos);
    for (char32_t c : cps) ids.push_back(id_of(c));
    if (add_bos_eos) ids.push_back(kEos);
    return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::u32string out;
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= size()) {
            throw ValueError("decode: token id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(size()));
        }
        if (id == kUnk) {
            out.push_back(kUnkGlyph);
        } else if (id >= kNumReserved) {
            out.push_back(chars_[static_cast<std::size_t>(id - kNumReserved)]);
        }
    }
    return utf8_encode(out);
}

std::string Vocab::token_text(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= size()) throw ValueError("token id out of range");
    if (id < kNumReserved) return kReservedNames[id];
    return utf8_encode(chars_[static_cast<std::size_t>(id - kNumReserved)]);
}

}  // namespace pdial
