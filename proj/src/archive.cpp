#include "csd/archive.hpp"

#include <algorithm>
#include <cstring>

#include <fmt/format.h>
#include <openssl/evp.h>

namespace csd::archive {

namespace {

constexpr std::size_t kBlock = 512;

void put_octal(std::uint8_t* field, std::size_t width, std::uint64_t value) {
    auto text = fmt::format("{:0{}o}", value, width - 1);
    if (text.size() > width - 1) throw Error(ErrorCode::InvalidArgument, "tar field overflow");
    std::memcpy(field, text.data(), text.size());
    field[width - 1] = 0;
}

std::uint64_t get_octal(const std::uint8_t* field, std::size_t width) {
    std::uint64_t v = 0;
    std::size_t i = 0;
    while (i < width && field[i] == ' ') ++i;
    for (; i < width && field[i] >= '0' && field[i] <= '7'; ++i) v = v * 8 + (field[i] - '0');
    for (; i < width; ++i)
        if (field[i] != 0 && field[i] != ' ') throw Error(ErrorCode::InvalidArgument, "bad octal field in tar header");
    return v;
}

std::string get_string(const std::uint8_t* field, std::size_t width) {
    auto len = std::find(field, field + width, 0) - field;
    return std::string(reinterpret_cast<const char*>(field), static_cast<std::size_t>(len));
}

std::uint64_t header_checksum(const std::uint8_t* h) {
    std::uint64_t sum = 0;
    for (std::size_t i = 0; i < kBlock; ++i) sum += (i >= 148 && i < 156) ? ' ' : h[i];
    return sum;
}

void check_path(const std::string& path) {
    if (path.empty() || path.front() == '/') throw Error(ErrorCode::InvalidArgument, fmt::format("unsafe tar path '{}'", path));
    std::size_t i = 0;
    while (i <= path.size()) {
        auto j = std::min(path.find('/', i), path.size());
        auto part = path.substr(i, j - i);
        if (part.empty() || part == "." || part == "..")
            throw Error(ErrorCode::InvalidArgument, fmt::format("unsafe tar path '{}'", path));
        i = j + 1;
    }
}

}  // namespace

std::string sha256_hex(ByteView data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw Error(ErrorCode::InvalidArgument, "sha256 failed");
    return to_hex(ByteView(md, len));
}

Bytes write_tar(const std::vector<TarEntry>& entries) {
    Bytes out;
    for (const auto& e : entries) {
        check_path(e.path);
        std::string name = e.path + (e.directory ? "/" : "");
        std::string prefix;
        if (name.size() > 100) {
            // Split at a slash so that the tail fits the name field.
            auto cut = name.rfind('/', name.size() - 2);
            while (cut != std::string::npos && name.size() - cut - 1 > 100) cut = std::string::npos;
            if (cut == std::string::npos || cut > 155)
                throw Error(ErrorCode::InvalidArgument, fmt::format("tar path too long: '{}'", e.path));
            prefix = name.substr(0, cut);
            name = name.substr(cut + 1);
        }
        std::uint8_t h[kBlock] = {};
        std::memcpy(h, name.data(), name.size());
        put_octal(h + 100, 8, e.directory ? 0755 : 0644);
        put_octal(h + 108, 8, 0);
        put_octal(h + 116, 8, 0);
        put_octal(h + 124, 12, e.directory ? 0 : e.data.size());
        put_octal(h + 136, 12, 0);
        h[156] = e.directory ? '5' : '0';
        std::memcpy(h + 257, "ustar", 6);
        std::memcpy(h + 263, "00", 2);
        std::memcpy(h + 345, prefix.data(), prefix.size());
        auto sum = fmt::format("{:06o}", header_checksum(h));
        std::memcpy(h + 148, sum.data(), 6);
        h[154] = 0;
        h[155] = ' ';
        out.insert(out.end(), h, h + kBlock);
        if (!e.directory) {
            out.insert(out.end(), e.data.begin(), e.data.end());
            out.resize(out.size() + (kBlock - e.data.size() % kBlock) % kBlock, 0);
        }
    }
    out.resize(out.size() + 2 * kBlock, 0);
    return out;
}

std::vector<TarEntry> read_tar(ByteView tar) {
    std::vector<TarEntry> out;
    std::size_t pos = 0;
    bool ended = false;
    while (pos + kBlock <= tar.size()) {
        const auto* h = tar.data() + pos;
        if (std::all_of(h, h + kBlock, [](std::uint8_t b) { return b == 0; })) {
            ended = true;
            break;
        }
        if (get_octal(h + 148, 8) != header_checksum(h)) throw Error(ErrorCode::InvalidArgument, "tar header checksum mismatch");
        if (std::memcmp(h + 257, "ustar", 5) != 0) throw Error(ErrorCode::InvalidArgument, "not a ustar archive");
        auto name = get_string(h, 100);
        auto prefix = get_string(h + 345, 155);
        if (!prefix.empty()) name = prefix + "/" + name;
        auto size = get_octal(h + 124, 12);
        auto type = h[156];
        pos += kBlock;
        TarEntry e;
        if (type == '5') {
            e.directory = true;
        } else if (type != '0' && type != 0) {
            throw Error(ErrorCode::InvalidArgument, fmt::format("unsupported tar entry type '{}'", static_cast<char>(type)));
        }
        while (!name.empty() && name.back() == '/') name.pop_back();
        check_path(name);
        e.path = name;
        if (!e.directory) {
            if (pos + size > tar.size()) throw Error(ErrorCode::InvalidArgument, "tar entry truncated");
            e.data.assign(tar.begin() + static_cast<std::ptrdiff_t>(pos), tar.begin() + static_cast<std::ptrdiff_t>(pos + size));
            pos += (size + kBlock - 1) / kBlock * kBlock;
        }
        out.push_back(std::move(e));
    }
    if (!ended) throw Error(ErrorCode::InvalidArgument, "tar archive truncated");
    return out;
}

}  // namespace csd::archive
