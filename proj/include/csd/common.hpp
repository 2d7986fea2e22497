#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace csd {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

/// Simulated time in integer nanoseconds.
using SimTime = std::uint64_t;

enum class ErrorCode {
    // nvme_core
    QueueFull,
    DuplicateCommandId,
    NamespaceNotVisible,
    Empty,
    UnknownCommand,
    OverlappingRanges,
    MissingKind,
    LbaOutOfRange,
    InvalidCommand,
    // ether_on
    FrameTooLarge,
    BadChecksum,
    MalformedFrame,
    WrongOpcode,
    SubnetExhausted,
    PendingOverflow,
    // lambda_fs
    NamespaceMissing,
    PathNotFound,
    PrivatePathBind,
    DoubleClose,
    AlreadyExists,
    NotADirectory,
    IsADirectory,
    DirectoryNotEmpty,
    StorageFull,
    // virtual_fw
    UnimplementedSyscall,
    Fault,
    IllegalTransition,
    NoEntryScript,
    BadFileDescriptor,
    // mini_docker
    UnsupportedCommand,
    MalformedRequest,
    DigestMismatch,
    ImageNotFound,
    ContainerNotFound,
    IllegalState,
    ImageInUse,
    // latency_model
    MissingCalibration,
    Underdetermined,
    // llm_pool
    CacheOverflow,
    IndivisiblePlan,
    NoFeasiblePlan,
    // cli
    InvalidScenario,
    ModuleError,
    InvalidArgument,
    WouldBlock,
};

std::string_view to_string(ErrorCode code) noexcept;

/// The one exception type thrown by the library. `code()` is stable and
/// machine-readable; `what()` carries human context.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}
    explicit Error(ErrorCode code) : std::runtime_error(std::string(to_string(code))), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

/// Which party touches a shared object: the host OS or an ISP-container.
enum class Side { Host, Container };

inline Side opposite(Side s) noexcept { return s == Side::Host ? Side::Container : Side::Host; }
std::string_view to_string(Side s) noexcept;

std::string to_hex(ByteView bytes);
Bytes from_hex(std::string_view hex);

inline Bytes to_bytes(std::string_view s) { return Bytes(s.begin(), s.end()); }
inline std::string to_text(ByteView b) { return std::string(b.begin(), b.end()); }

}  // namespace csd
