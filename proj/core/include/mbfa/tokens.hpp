#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace mbfa {

// Token ids live in [1, V]; id 0 is the reserved mask marker and never
// appears in stored datasets.
inline constexpr std::uint32_t kMaskId = 0;

using TokenSequence = std::vector<std::uint32_t>;

enum class Provenance : std::uint8_t { gibbs = 0, clone = 1, corpus = 2 };

const char* provenance_name(Provenance p);

// Checks length, id range and the at-most-one-mask rule for a sequence used
// as a conditional query. Throws std::invalid_argument on violation.
void validate_sequence(std::span<const std::uint32_t> seq, std::uint32_t length,
                       std::uint32_t vocab, std::uint32_t max_masked = 1);

// Returns the unique masked position, or throws if the mask count is not 1.
std::uint32_t masked_position(std::span<const std::uint32_t> seq);

struct TokenDataset {
    std::uint32_t length = 0;  // L
    std::uint32_t vocab = 0;   // V
    Provenance provenance = Provenance::gibbs;
    std::vector<std::uint32_t> tokens;  // row-major, rows() * length ids

    std::uint64_t rows() const { return length == 0 ? 0 : tokens.size() / length; }
    std::span<const std::uint32_t> row(std::uint64_t r) const {
        return {tokens.data() + r * length, length};
    }
    std::span<std::uint32_t> row(std::uint64_t r) {
        return {tokens.data() + r * length, length};
    }

    // Every stored row must be fully unmasked with ids in [1, V].
    void validate() const;
};

// Binary format "MBTK": magic, version u32, L u32, V u32, M u64,
// provenance u8, then M*L little-endian u32 token ids.
void save_dataset(const std::filesystem::path& path, const TokenDataset& ds);
TokenDataset load_dataset(const std::filesystem::path& path);

}  // namespace mbfa
