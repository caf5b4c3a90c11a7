#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mbfa/tokens.hpp"

namespace mbfa::text {

// Word <-> id table for toy corpora. Ids 0 (mask) and 1 (unknown) are
// reserved; words occupy 2..V. Selection is by frequency, ties broken
// lexicographically, so the table is deterministic for a fixed corpus.
struct ToyVocabulary {
    static constexpr std::uint32_t kUnknownId = 1;

    std::vector<std::string> words;  // words[i] has id i + 2
    std::unordered_map<std::string, std::uint32_t> ids;

    std::uint32_t vocab_size() const { return static_cast<std::uint32_t>(words.size()) + 1; }
    std::uint32_t id_of(std::string_view word) const;
    std::string word_of(std::uint32_t id) const;  // "<unk>" for 1
};

// Whitespace tokenization with lowercasing; the most frequent words up to
// vocab_cap - 2 get ids, everything else maps to the unknown id; the token
// stream is chunked into length-L rows (trailing partial row dropped).
std::pair<TokenDataset, ToyVocabulary> ingest_corpus(std::string_view corpus,
                                                     std::uint32_t vocab_cap, std::uint32_t length);

void save_vocabulary(const std::filesystem::path& path, const ToyVocabulary& vocab);
ToyVocabulary load_vocabulary(const std::filesystem::path& path);

}  // namespace mbfa::text
