#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mbfa {

// Little-endian byte serialisation. All on-disk formats in the workbench are
// explicitly little-endian regardless of host order.

class ByteWriter {
  public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f64(double v);
    void bytes(const void* p, std::size_t n);
    void magic(std::string_view tag);  // exactly 4 characters

    const std::vector<std::uint8_t>& buffer() const { return buf_; }

  private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
  public:
    explicit ByteReader(std::vector<std::uint8_t> data) : buf_(std::move(data)) {}

    std::uint8_t u8();
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    void expect_magic(std::string_view tag, std::string_view what);
    void f64_array(double* out, std::size_t n);
    void u32_array(std::uint32_t* out, std::size_t n);
    bool exhausted() const { return pos_ == buf_.size(); }

  private:
    void need(std::size_t n);
    std::vector<std::uint8_t> buf_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& data);
std::string read_file_text(const std::filesystem::path& path);
void write_file_text(const std::filesystem::path& path, std::string_view text);

// FNV-1a 64-bit, used for manifest content hashes.
std::uint64_t fnv1a64(const void* data, std::size_t n);
std::uint64_t fnv1a64_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

}  // namespace mbfa
