#pragma once

// Container engine inside the device: an HTTP command surface, image
// storage in the filesystem, overlay root filesystems and a container
// lifecycle driven by scripted threads on the firmware scheduler.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "csd/archive.hpp"
#include "csd/common.hpp"
#include "csd/lambda_fs.hpp"
#include "csd/virtual_fw.hpp"

namespace csd::docker {

// --- HTTP ------------------------------------------------------------------

struct HttpRequest {
    std::string method;
    std::string target;  // as sent, including the query
    std::string path;    // percent-decoded, without the query
    std::map<std::string, std::string> query;
    std::map<std::string, std::string> headers;  // lowercase names
    Bytes body;
};

struct HttpResponse {
    int status = 200;
    std::string content_type = "application/json";
    Bytes body;

    Bytes serialize() const;
    static HttpResponse parse(ByteView raw);
    std::string text() const { return to_text(body); }
};

/// Total byte length of the first message in `buffered` once its headers
/// are complete; nullopt while the header block is still incomplete.
/// Throws MalformedRequest for header blocks that cannot be valid.
std::optional<std::size_t> http_message_length(ByteView buffered);

/// Throws MalformedRequest: bad request line, missing Content-Length with
/// a body, body shorter than Content-Length.
HttpRequest parse_request(ByteView raw);
Bytes format_request(const std::string& method, const std::string& target, ByteView body = {});
std::string percent_encode(std::string_view text);

std::string_view reason_phrase(int status) noexcept;

// --- command surface -------------------------------------------------------

enum class Command { Pull, Rmi, Create, Run, Start, Stop, Restart, Kill, Rm, Logs, Ps };
inline constexpr std::size_t kCommandCount = 11;
std::string_view to_string(Command c) noexcept;

struct RoutedCommand {
    Command command;
    std::string target;  // image ref or container id; empty for ps
};

/// Maps a request to one of the supported commands. Throws
/// UnsupportedCommand for anything else.
RoutedCommand route(const HttpRequest& request);

// --- images ----------------------------------------------------------------

struct ImageRef {
    std::string name;
    std::string tag = "latest";

    /// `name[:tag]`; throws InvalidArgument for malformed names.
    static ImageRef parse(std::string_view text);
    std::string str() const { return name + ":" + tag; }
    bool operator==(const ImageRef&) const = default;
};

struct ImageManifest {
    ImageRef ref;
    std::string entry;                // absolute path inside the rootfs
    std::vector<std::string> layers;  // "sha256:<hex>", lowest first
    std::string config;               // "sha256:<hex>"

    nlohmann::json to_json() const;
    /// Throws InvalidArgument on schema violations.
    static ImageManifest from_json(const nlohmann::json& j);
};

struct ImageSpec {
    ImageRef ref;
    std::string entry;
    std::vector<std::vector<archive::TarEntry>> layers;  // lowest first
    nlohmann::json config = nlohmann::json::object();
};

/// The pull payload: a tar holding manifest.json and blobs/sha256-<hex>.
Bytes make_image_bundle(const ImageSpec& spec);

inline constexpr const char* kBlobDir = "/images/blobs";
inline constexpr const char* kManifestDir = "/images/manifest";
inline constexpr const char* kContainerDir = "/containers";

std::string blob_path(const std::string& digest);
std::string manifest_path(const ImageRef& ref);

// --- overlay rootfs --------------------------------------------------------

/// One unpacked read-only layer: absolute path to entry.
struct Layer {
    struct Node {
        bool directory = false;
        Bytes data;
    };
    std::map<std::string, Node> nodes;

    static Layer from_tar(ByteView tar);
};

/// Upper directory in the filesystem over read-only lowers. Lookups go
/// upper first, then highest to lowest lower. Deleting a lower entry leaves
/// a `.wh.<name>` marker next to it in the upper directory.
class MergedView {
public:
    MergedView(fs::LambdaFs& fs, std::string upper_dir, std::vector<std::shared_ptr<const Layer>> lowers);

    bool exists(const std::string& path);
    bool is_directory(const std::string& path);
    /// Throws PathNotFound, IsADirectory.
    Bytes read(const std::string& path);
    /// Creates or replaces a file; the parent must exist in the view.
    void write(const std::string& path, ByteView data);
    void mkdir(const std::string& path);
    /// Throws PathNotFound, IsADirectory.
    void unlink(const std::string& path);
    std::vector<std::string> list(const std::string& path);

    const std::string& upper_dir() const noexcept { return upper_; }
    std::string upper_path(const std::string& path) const;
    /// Empties the upper directory.
    void reset_upper();

private:
    enum class Where { Missing, Upper, Lower };
    struct Found {
        Where where = Where::Missing;
        bool directory = false;
        const Layer::Node* lower = nullptr;
    };
    Found locate(const std::string& path);
    bool whited_out(const std::string& path);
    void ensure_upper_dirs(const std::string& dir);

    fs::LambdaFs& fs_;
    std::string upper_;
    std::vector<std::shared_ptr<const Layer>> lowers_;
};

struct Bind {
    std::string host_path;       // on the sharable namespace
    std::string container_path;  // absolute, inside the container

    /// `host:container`.
    static Bind parse(std::string_view text);
};

/// What a container's I/O handler sees: bind paths go to the shared
/// filesystem under the inode lock, everything else to the overlay.
class ContainerFiles : public vfw::FileBackend {
public:
    ContainerFiles(fs::LambdaFs& fs, vfw::IoNodeCache& cache, MergedView& view, std::vector<Bind> binds);

    bool exists(const std::string& path) override;
    bool is_directory(const std::string& path) override;
    Bytes read(const std::string& path) override;
    void write(const std::string& path, ByteView data) override;
    void mkdir(const std::string& path) override;
    void symlink(const std::string& target, const std::string& link) override;
    void unlink(const std::string& path) override;
    vfw::WalkResult walk(const std::string& path) override;

private:
    std::optional<std::string> bound(const std::string& path) const;
    template <typename F>
    auto locked(const std::string& host_path, F&& op);

    fs::LambdaFs& fs_;
    vfw::IoNodeCache& cache_;
    MergedView& view_;
    std::vector<Bind> binds_;
};

// --- container scripts -----------------------------------------------------

/// One line of an entry script:
///   log <text> | err <text> | write <path> <text> | append <path> <text>
///   read <path> | cat <path> | mkdir <path> | rm <path>
///   send <port> <text> | compute <ns> | exit [code]
struct ScriptOp {
    enum class Kind { Log, Err, Write, Append, Read, Cat, Mkdir, Rm, Send, Compute, Exit };
    Kind kind = Kind::Log;
    std::string path;
    std::string text;
    std::int64_t number = 0;
};

/// Blank lines and `#` lines are skipped. Throws InvalidArgument.
std::vector<ScriptOp> parse_script(std::string_view text);

// --- lifecycle -------------------------------------------------------------

enum class ContainerState { Created, Running, Stopped, Removed };
std::string_view to_string(ContainerState s) noexcept;

/// The legal edge set, crash recovery included.
bool legal_transition(ContainerState from, ContainerState to) noexcept;

struct Transition {
    std::string id;
    ContainerState from;
    ContainerState to;
    std::string cause;
};

struct ContainerInfo {
    std::string id;
    std::string image;
    ContainerState state;
    std::optional<int> exit_code;
};

struct DockerConfig {
    bool reset_upper_on_restart = false;
    /// Quanta a stop waits before forcing the thread down.
    std::size_t stop_grace_quanta = 1;
};

inline constexpr int kExitTerminated = 143;
inline constexpr int kExitKilled = 137;

class MiniDocker {
public:
    MiniDocker(fs::LambdaFs& fs, vfw::VirtualFw& fw, vfw::IoNodeCache& cache, DockerConfig config = {});
    ~MiniDocker();
    MiniDocker(const MiniDocker&) = delete;
    MiniDocker& operator=(const MiniDocker&) = delete;

    /// Parses, routes and executes one request. Never throws: errors become
    /// JSON bodies with the error code name and an HTTP status.
    HttpResponse handle_http(ByteView raw);
    HttpResponse handle(const HttpRequest& request);

    /// Verifies every digest before anything is stored. Throws
    /// MalformedRequest, DigestMismatch, StorageFull.
    ImageManifest pull(ByteView bundle, const std::optional<ImageRef>& expected = std::nullopt);
    /// Returns the blob digests deleted. Throws ImageNotFound, ImageInUse.
    std::vector<std::string> rmi(const ImageRef& ref);

    std::string create(const ImageRef& ref, const std::vector<Bind>& binds = {});
    std::string run(const ImageRef& ref, const std::vector<Bind>& binds = {});
    void start(const std::string& id);
    void stop(const std::string& id);
    void kill(const std::string& id);
    void restart(const std::string& id);
    void rm(const std::string& id);
    Bytes logs(const std::string& id);
    std::vector<ContainerInfo> ps() const;

    /// Gives every running container thread one scheduler quantum.
    void run_quantum();
    /// Runs quanta until no container is running; returns quanta used.
    std::size_t settle(std::size_t max_quanta = 100000);
    /// Power loss: lock state is gone, every live container goes back to
    /// created with an empty upper layer.
    void recover();

    std::optional<ImageManifest> image(const ImageRef& ref);
    std::optional<ContainerInfo> info(const std::string& id) const;
    const std::vector<Transition>& transitions() const noexcept { return transitions_; }
    /// SHA-256 of every stored blob, keyed by digest.
    std::map<std::string, std::string> blob_hashes();
    MergedView* rootfs(const std::string& id);

private:
    struct Container;

    Container& container(const std::string& id);
    const Container& container(const std::string& id) const;
    void transition(Container& c, ContainerState to, const std::string& cause);
    std::shared_ptr<const Layer> layer(const std::string& digest);
    void end_thread(Container& c, int exit_code, const std::string& cause, bool kill);
    SimTime step(Container& c);
    void append_log(Container& c, const std::string& text, SimTime& cost);
    std::int64_t sys(Container& c, vfw::SyscallInvocation call, SimTime& cost, Bytes* out = nullptr);

    fs::LambdaFs& fs_;
    vfw::VirtualFw& fw_;
    vfw::IoNodeCache& cache_;
    DockerConfig config_;
    std::map<std::string, std::unique_ptr<Container>> containers_;
    std::vector<std::string> order_;
    std::map<std::string, std::shared_ptr<const Layer>> layers_;
    std::vector<Transition> transitions_;
    std::uint64_t created_count_ = 0;
};

}  // namespace csd::docker
