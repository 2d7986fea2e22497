#include "csd/common.hpp"

#include <cctype>

namespace csd {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::QueueFull: return "QueueFull";
    case ErrorCode::DuplicateCommandId: return "DuplicateCommandId";
    case ErrorCode::NamespaceNotVisible: return "NamespaceNotVisible";
    case ErrorCode::Empty: return "Empty";
    case ErrorCode::UnknownCommand: return "UnknownCommand";
    case ErrorCode::OverlappingRanges: return "OverlappingRanges";
    case ErrorCode::MissingKind: return "MissingKind";
    case ErrorCode::LbaOutOfRange: return "LbaOutOfRange";
    case ErrorCode::InvalidCommand: return "InvalidCommand";
    case ErrorCode::FrameTooLarge: return "FrameTooLarge";
    case ErrorCode::BadChecksum: return "BadChecksum";
    case ErrorCode::MalformedFrame: return "MalformedFrame";
    case ErrorCode::WrongOpcode: return "WrongOpcode";
    case ErrorCode::SubnetExhausted: return "SubnetExhausted";
    case ErrorCode::PendingOverflow: return "PendingOverflow";
    case ErrorCode::NamespaceMissing: return "NamespaceMissing";
    case ErrorCode::PathNotFound: return "PathNotFound";
    case ErrorCode::PrivatePathBind: return "PrivatePathBind";
    case ErrorCode::DoubleClose: return "DoubleClose";
    case ErrorCode::AlreadyExists: return "AlreadyExists";
    case ErrorCode::NotADirectory: return "NotADirectory";
    case ErrorCode::IsADirectory: return "IsADirectory";
    case ErrorCode::DirectoryNotEmpty: return "DirectoryNotEmpty";
    case ErrorCode::StorageFull: return "StorageFull";
    case ErrorCode::UnimplementedSyscall: return "UnimplementedSyscall";
    case ErrorCode::Fault: return "Fault";
    case ErrorCode::IllegalTransition: return "IllegalTransition";
    case ErrorCode::NoEntryScript: return "NoEntryScript";
    case ErrorCode::BadFileDescriptor: return "BadFileDescriptor";
    case ErrorCode::UnsupportedCommand: return "UnsupportedCommand";
    case ErrorCode::MalformedRequest: return "MalformedRequest";
    case ErrorCode::DigestMismatch: return "DigestMismatch";
    case ErrorCode::ImageNotFound: return "ImageNotFound";
    case ErrorCode::ContainerNotFound: return "ContainerNotFound";
    case ErrorCode::IllegalState: return "IllegalState";
    case ErrorCode::ImageInUse: return "ImageInUse";
    case ErrorCode::MissingCalibration: return "MissingCalibration";
    case ErrorCode::Underdetermined: return "Underdetermined";
    case ErrorCode::CacheOverflow: return "CacheOverflow";
    case ErrorCode::IndivisiblePlan: return "IndivisiblePlan";
    case ErrorCode::NoFeasiblePlan: return "NoFeasiblePlan";
    case ErrorCode::InvalidScenario: return "InvalidScenario";
    case ErrorCode::ModuleError: return "ModuleError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::WouldBlock: return "WouldBlock";
    }
    return "Unknown";
}

std::string_view to_string(Side s) noexcept { return s == Side::Host ? "host" : "container"; }

std::string to_hex(ByteView bytes) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size() * 2);
    for (auto b : bytes) {
        out.push_back(kDigits[b >> 4]);
        out.push_back(kDigits[b & 0x0f]);
    }
    return out;
}

Bytes from_hex(std::string_view hex) {
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        return -1;
    };
    Bytes out;
    int hi = -1;
    for (char c : hex) {
        if (std::isspace(static_cast<unsigned char>(c))) continue;
        int v = nibble(c);
        if (v < 0) throw Error(ErrorCode::InvalidArgument, "bad hex digit");
        if (hi < 0) {
            hi = v;
        } else {
            out.push_back(static_cast<std::uint8_t>((hi << 4) | v));
            hi = -1;
        }
    }
    if (hi >= 0) throw Error(ErrorCode::InvalidArgument, "odd number of hex digits");
    return out;
}

}  // namespace csd
