#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "hpdm/common.hpp"

// Byte-level plumbing shared by every on-disk format: explicit little-endian
// scalar encoding (files are byte-identical across machines) and CRC-32
// integrity so any single-byte corruption fails closed.

namespace hpdm {

inline uint32_t crc32_update(uint32_t crc, const void* data, size_t len) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; i++) {
            uint32_t c = i;
            for (int k = 0; k < 8; k++) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    const auto* p = static_cast<const unsigned char*>(data);
    crc = ~crc;
    for (size_t i = 0; i < len; i++) crc = table[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
    return ~crc;
}

inline uint32_t crc32_of(const void* data, size_t len) { return crc32_update(0, data, len); }

// Append-only little-endian byte sink.
struct ByteWriter {
    std::vector<unsigned char> bytes;

    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    void u8(uint8_t v) { bytes.push_back(v); }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; i++) bytes.push_back(uint8_t(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; i++) bytes.push_back(uint8_t(v >> (8 * i)));
    }
    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f32_array(const float* p, size_t n) {
        for (size_t i = 0; i < n; i++) f32(p[i]);
    }
    void str(const std::string& s) {
        u32(uint32_t(s.size()));
        raw(s.data(), s.size());
    }
    void append_crc() { u32(crc32_of(bytes.data(), bytes.size())); }
};

struct ByteReader {
    const std::vector<unsigned char>& bytes;
    size_t at = 0;

    explicit ByteReader(const std::vector<unsigned char>& b) : bytes(b) {}

    void need(size_t n, const char* what) const {
        if (at + n > bytes.size())
            throw DataError(strcat_all("truncated file: expected ", n, " bytes for ", what,
                                       " at offset ", at));
    }
    void raw(void* p, size_t n, const char* what) {
        need(n, what);
        std::memcpy(p, bytes.data() + at, n);
        at += n;
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return bytes[at++];
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; i++) v |= uint32_t(bytes[at + i]) << (8 * i);
        at += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; i++) v |= uint64_t(bytes[at + i]) << (8 * i);
        at += 8;
        return v;
    }
    float f32(const char* what) {
        uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    void f32_array(float* p, size_t n, const char* what) {
        need(4 * n, what);
        for (size_t i = 0; i < n; i++) p[i] = f32(what);
    }
    std::string str(const char* what) {
        uint32_t n = u32(what);
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes.data() + at), n);
        at += n;
        return s;
    }
    size_t remaining() const { return bytes.size() - at; }

    // Validate a trailing CRC-32 over everything before it.
    void check_trailing_crc(const char* what) const {
        if (bytes.size() < 4) throw DataError(strcat_all(what, ": too short for checksum"));
        const size_t body = bytes.size() - 4;
        uint32_t stored = 0;
        for (int i = 0; i < 4; i++) stored |= uint32_t(bytes[body + i]) << (8 * i);
        if (crc32_of(bytes.data(), body) != stored)
            throw DataError(strcat_all(what, ": checksum mismatch"));
    }
};

inline void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError(strcat_all("cannot open for writing: ", path));
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError(strcat_all("write failed: ", path));
}

inline std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError(strcat_all("cannot open: ", path));
    f.seekg(0, std::ios::end);
    const auto size = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<unsigned char> bytes(static_cast<size_t>(size));
    f.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!f) throw DataError(strcat_all("read failed: ", path));
    return bytes;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::vector<unsigned char> bytes(text.begin(), text.end());
    write_file(path, bytes);
}

inline std::string read_text_file(const std::string& path) {
    auto bytes = read_file(path);
    return std::string(bytes.begin(), bytes.end());
}

}  // namespace hpdm
