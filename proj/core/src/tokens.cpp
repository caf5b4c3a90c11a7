#include "mbfa/tokens.hpp"

#include <stdexcept>
#include <string>

#include "mbfa/io.hpp"

namespace mbfa {

const char* provenance_name(Provenance p) {
    switch (p) {
        case Provenance::gibbs: return "gibbs";
        case Provenance::clone: return "clone";
        case Provenance::corpus: return "corpus";
    }
    return "unknown";
}

void validate_sequence(std::span<const std::uint32_t> seq, std::uint32_t length,
                       std::uint32_t vocab, std::uint32_t max_masked) {
    if (seq.size() != length)
        throw std::invalid_argument("sequence length " + std::to_string(seq.size()) +
                                    " does not match declared L=" + std::to_string(length));
    std::uint32_t masked = 0;
    for (std::uint32_t t : seq) {
        if (t == kMaskId) {
            ++masked;
        } else if (t > vocab) {
            throw std::invalid_argument("token id " + std::to_string(t) + " outside [1," +
                                        std::to_string(vocab) + "]");
        }
    }
    if (masked > max_masked)
        throw std::invalid_argument("sequence has " + std::to_string(masked) +
                                    " masked positions (at most " + std::to_string(max_masked) +
                                    " allowed)");
}

std::uint32_t masked_position(std::span<const std::uint32_t> seq) {
    std::uint32_t pos = 0, count = 0;
    for (std::uint32_t i = 0; i < seq.size(); ++i) {
        if (seq[i] == kMaskId) {
            pos = i;
            ++count;
        }
    }
    if (count != 1)
        throw std::invalid_argument("expected exactly one masked position, found " +
                                    std::to_string(count));
    return pos;
}

void TokenDataset::validate() const {
    if (length == 0 || vocab == 0) throw std::invalid_argument("dataset with zero L or V");
    if (tokens.size() % length != 0)
        throw std::invalid_argument("dataset token count is not a multiple of L");
    for (std::uint64_t r = 0; r < rows(); ++r) validate_sequence(row(r), length, vocab, 0);
}

void save_dataset(const std::filesystem::path& path, const TokenDataset& ds) {
    ByteWriter w;
    w.magic("MBTK");
    w.u32(1);
    w.u32(ds.length);
    w.u32(ds.vocab);
    w.u64(ds.rows());
    w.u8(static_cast<std::uint8_t>(ds.provenance));
    for (std::uint32_t t : ds.tokens) w.u32(t);
    write_file_bytes(path, w.buffer());
}

TokenDataset load_dataset(const std::filesystem::path& path) {
    ByteReader r(read_file_bytes(path));
    r.expect_magic("MBTK", path.string());
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw std::runtime_error(path.string() + ": unsupported dataset version " +
                                 std::to_string(version));
    TokenDataset ds;
    ds.length = r.u32();
    ds.vocab = r.u32();
    const std::uint64_t m = r.u64();
    const std::uint8_t prov = r.u8();
    if (prov > 2) throw std::runtime_error(path.string() + ": bad provenance tag");
    ds.provenance = static_cast<Provenance>(prov);
    ds.tokens.resize(m * ds.length);
    r.u32_array(ds.tokens.data(), ds.tokens.size());
    ds.validate();
    return ds;
}

}  // namespace mbfa
