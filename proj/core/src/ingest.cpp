#include "mbfa/ingest.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>
#include <stdexcept>

#include "mbfa/io.hpp"

namespace mbfa::text {

std::uint32_t ToyVocabulary::id_of(std::string_view word) const {
    auto it = ids.find(std::string(word));
    return it == ids.end() ? kUnknownId : it->second;
}

std::string ToyVocabulary::word_of(std::uint32_t id) const {
    if (id == kUnknownId) return "<unk>";
    if (id < 2 || id - 2 >= words.size())
        throw std::invalid_argument("no word for id " + std::to_string(id));
    return words[id - 2];
}

std::pair<TokenDataset, ToyVocabulary> ingest_corpus(std::string_view corpus,
                                                     std::uint32_t vocab_cap,
                                                     std::uint32_t length) {
    if (vocab_cap < 2) throw std::invalid_argument("vocab_cap must be >= 2 (mask + unknown)");
    if (length == 0) throw std::invalid_argument("sequence length must be positive");

    // lowercase whitespace tokenization
    std::vector<std::string> stream;
    std::string word;
    for (char raw : corpus) {
        const auto c = static_cast<unsigned char>(raw);
        if (std::isspace(c)) {
            if (!word.empty()) stream.push_back(std::exchange(word, {}));
        } else {
            word.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!word.empty()) stream.push_back(std::move(word));
    if (stream.empty()) throw std::invalid_argument("corpus is empty");
    if (stream.size() < length)
        throw std::invalid_argument("corpus has " + std::to_string(stream.size()) +
                                    " tokens, fewer than L = " + std::to_string(length));

    std::unordered_map<std::string, std::uint64_t> freq;
    for (const auto& w : stream) ++freq[w];
    std::vector<std::pair<std::string, std::uint64_t>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    const std::size_t keep = std::min<std::size_t>(ranked.size(), vocab_cap - 2);

    ToyVocabulary vocab;
    vocab.words.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) {
        vocab.ids.emplace(ranked[i].first, static_cast<std::uint32_t>(i + 2));
        vocab.words.push_back(ranked[i].first);
    }

    TokenDataset ds;
    ds.length = length;
    ds.vocab = vocab.vocab_size();
    ds.provenance = Provenance::corpus;
    const std::size_t rows = stream.size() / length;
    ds.tokens.resize(rows * length);
    for (std::size_t t = 0; t < rows * length; ++t) ds.tokens[t] = vocab.id_of(stream[t]);
    return {std::move(ds), std::move(vocab)};
}

void save_vocabulary(const std::filesystem::path& path, const ToyVocabulary& vocab) {
    std::string out = "1\t<unk>\n";
    for (std::size_t i = 0; i < vocab.words.size(); ++i)
        out += std::to_string(i + 2) + "\t" + vocab.words[i] + "\n";
    write_file_text(path, out);
}

ToyVocabulary load_vocabulary(const std::filesystem::path& path) {
    std::istringstream in(read_file_text(path));
    ToyVocabulary vocab;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error(path.string() + ": malformed vocabulary line");
        const auto id = static_cast<std::uint32_t>(std::stoul(line.substr(0, tab)));
        std::string w = line.substr(tab + 1);
        if (id == ToyVocabulary::kUnknownId) continue;
        if (id != vocab.words.size() + 2)
            throw std::runtime_error(path.string() + ": vocabulary ids must be dense from 2");
        vocab.ids.emplace(w, id);
        vocab.words.push_back(std::move(w));
    }
    return vocab;
}

}  // namespace mbfa::text
