#pragma once

// Content digests and the ustar subset used for image layers.

#include <string>
#include <vector>

#include "csd/common.hpp"

namespace csd::archive {

/// Lowercase hex SHA-256.
std::string sha256_hex(ByteView data);

struct TarEntry {
    std::string path;  // relative, no leading slash, no trailing slash
    bool directory = false;
    Bytes data;

    bool operator==(const TarEntry&) const = default;
};

/// Deterministic ustar: mtime 0, uid/gid 0, mode 0755/0644, entries in the
/// given order, terminated by two zero blocks.
Bytes write_tar(const std::vector<TarEntry>& entries);

/// Reads regular files and directories. Throws InvalidArgument on bad
/// checksums, truncation, other entry types or unsafe paths.
std::vector<TarEntry> read_tar(ByteView tar);

}  // namespace csd::archive
