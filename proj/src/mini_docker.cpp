#include "csd/mini_docker.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <regex>
#include <set>
#include <sstream>

#include <fmt/format.h>

namespace csd::docker {

namespace {

using nlohmann::json;
constexpr auto kFw = nvme::PcieFunction::Firmware;
constexpr std::size_t kMaxHeaderBytes = 64 * 1024;

[[noreturn]] void malformed(const std::string& what) { throw Error(ErrorCode::MalformedRequest, what); }

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t");
    return std::string(s.substr(b, e - b + 1));
}

std::optional<std::size_t> parse_size(std::string_view text) {
    std::size_t v = 0;
    if (text.empty()) return std::nullopt;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) return std::nullopt;
    return v;
}

std::string percent_decode(std::string_view s, bool plus_is_space) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '%') {
            if (i + 2 >= s.size()) malformed("truncated percent escape");
            auto hex = from_hex(s.substr(i + 1, 2));
            out.push_back(static_cast<char>(hex[0]));
            i += 2;
        } else if (s[i] == '+' && plus_is_space) {
            out.push_back(' ');
        } else {
            out.push_back(s[i]);
        }
    }
    return out;
}

struct Head {
    std::string start_line;
    std::map<std::string, std::string> headers;
    std::size_t body_offset = 0;
};

// Splits the header block; nullopt while it is incomplete.
std::optional<Head> read_head(ByteView raw) {
    std::string_view text(reinterpret_cast<const char*>(raw.data()), raw.size());
    auto end = text.find("\r\n\r\n");
    if (end == std::string_view::npos) {
        if (raw.size() > kMaxHeaderBytes) malformed("header block too large");
        return std::nullopt;
    }
    Head head;
    head.body_offset = end + 4;
    std::size_t pos = 0;
    bool first = true;
    while (pos < end) {
        auto eol = text.find("\r\n", pos);
        auto line = text.substr(pos, eol - pos);
        pos = eol + 2;
        if (first) {
            head.start_line = std::string(line);
            first = false;
            continue;
        }
        auto colon = line.find(':');
        if (colon == std::string_view::npos || colon == 0) malformed(fmt::format("bad header line '{}'", line));
        head.headers[lower(std::string(line.substr(0, colon)))] = trim(line.substr(colon + 1));
    }
    if (head.headers.contains("transfer-encoding")) malformed("transfer encodings are not supported");
    return head;
}

std::optional<std::size_t> content_length(const Head& head) {
    auto it = head.headers.find("content-length");
    if (it == head.headers.end()) return std::nullopt;
    auto n = parse_size(it->second);
    if (!n) malformed(fmt::format("bad Content-Length '{}'", it->second));
    return n;
}

Bytes body_of(ByteView raw, const Head& head) {
    auto declared = content_length(head);
    auto available = raw.size() - head.body_offset;
    if (!declared) {
        if (available > 0) malformed("body without Content-Length");
        return {};
    }
    if (available < *declared) malformed(fmt::format("body truncated: {} of {} bytes", available, *declared));
    if (available > *declared) malformed("bytes after the message body");
    return Bytes(raw.begin() + static_cast<std::ptrdiff_t>(head.body_offset), raw.end());
}

int status_for(ErrorCode code) {
    switch (code) {
    case ErrorCode::UnsupportedCommand: return 501;
    case ErrorCode::MalformedRequest:
    case ErrorCode::InvalidArgument:
    case ErrorCode::DigestMismatch:
    case ErrorCode::NoEntryScript:
    case ErrorCode::PrivatePathBind:
    case ErrorCode::PathNotFound: return 400;
    case ErrorCode::ImageNotFound:
    case ErrorCode::ContainerNotFound: return 404;
    case ErrorCode::IllegalState:
    case ErrorCode::ImageInUse: return 409;
    case ErrorCode::StorageFull: return 507;
    default: return 500;
    }
}

HttpResponse json_response(int status, const json& body) { return {status, "application/json", to_bytes(body.dump())}; }

HttpResponse error_response(int status, std::string_view code, std::string_view message) {
    return json_response(status, {{"error", code}, {"message", message}});
}

std::string hex_of(const std::string& digest) {
    static const std::regex pattern("sha256:[0-9a-f]{64}");
    if (!std::regex_match(digest, pattern)) throw Error(ErrorCode::InvalidArgument, fmt::format("bad digest '{}'", digest));
    return digest.substr(7);
}

std::string parent_of(const std::string& path) {
    auto slash = path.rfind('/');
    return slash == 0 ? "/" : path.substr(0, slash);
}

std::string name_of(const std::string& path) { return path.substr(path.rfind('/') + 1); }

std::string join(const std::string& dir, const std::string& name) { return dir == "/" ? "/" + name : dir + "/" + name; }

std::string whiteout_name(const std::string& name) { return ".wh." + name; }

bool is_whiteout(const std::string& name) { return name.rfind(".wh.", 0) == 0; }

std::string state_name(ContainerState s) { return std::string(to_string(s)); }

json container_json(const ContainerInfo& i) {
    json j{{"Id", i.id}, {"Image", i.image}, {"State", state_name(i.state)}};
    j["ExitCode"] = i.exit_code ? json(*i.exit_code) : json(nullptr);
    return j;
}

}  // namespace

// --- HTTP ------------------------------------------------------------------

std::string_view reason_phrase(int status) noexcept {
    switch (status) {
    case 200: return "OK";
    case 201: return "Created";
    case 204: return "No Content";
    case 400: return "Bad Request";
    case 404: return "Not Found";
    case 409: return "Conflict";
    case 501: return "Not Implemented";
    case 507: return "Insufficient Storage";
    default: return "Internal Server Error";
    }
}

Bytes HttpResponse::serialize() const {
    auto head = fmt::format("HTTP/1.1 {} {}\r\n", status, reason_phrase(status));
    if (!body.empty()) head += fmt::format("Content-Type: {}\r\n", content_type);
    head += fmt::format("Content-Length: {}\r\n\r\n", body.size());
    auto out = to_bytes(head);
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

HttpResponse HttpResponse::parse(ByteView raw) {
    auto head = read_head(raw);
    if (!head) malformed("incomplete response");
    std::istringstream line(head->start_line);
    std::string version;
    int status = 0;
    if (!(line >> version >> status) || version.rfind("HTTP/1.", 0) != 0) malformed("bad status line");
    HttpResponse r;
    r.status = status;
    if (auto it = head->headers.find("content-type"); it != head->headers.end()) r.content_type = it->second;
    r.body = body_of(raw, *head);
    return r;
}

std::optional<std::size_t> http_message_length(ByteView buffered) {
    auto head = read_head(buffered);
    if (!head) return std::nullopt;
    return head->body_offset + content_length(*head).value_or(0);
}

HttpRequest parse_request(ByteView raw) {
    auto head = read_head(raw);
    if (!head) malformed("incomplete header block");
    const auto& line = head->start_line;
    auto s1 = line.find(' ');
    auto s2 = s1 == std::string::npos ? s1 : line.find(' ', s1 + 1);
    if (s2 == std::string::npos || line.find(' ', s2 + 1) != std::string::npos) malformed(fmt::format("bad request line '{}'", line));
    HttpRequest req;
    req.method = line.substr(0, s1);
    req.target = line.substr(s1 + 1, s2 - s1 - 1);
    auto version = line.substr(s2 + 1);
    if (req.method.empty() || !std::all_of(req.method.begin(), req.method.end(), [](char c) { return c >= 'A' && c <= 'Z'; }))
        malformed(fmt::format("bad method '{}'", req.method));
    if (version != "HTTP/1.1" && version != "HTTP/1.0") malformed(fmt::format("bad version '{}'", version));
    if (req.target.empty() || req.target.front() != '/') malformed(fmt::format("bad target '{}'", req.target));
    try {
        auto q = req.target.find('?');
        req.path = percent_decode(std::string_view(req.target).substr(0, q), false);
        if (q != std::string::npos) {
            std::string_view query = std::string_view(req.target).substr(q + 1);
            while (!query.empty()) {
                auto amp = query.find('&');
                auto pair = query.substr(0, amp);
                auto eq = pair.find('=');
                auto key = percent_decode(pair.substr(0, eq), true);
                auto value = eq == std::string_view::npos ? std::string() : percent_decode(pair.substr(eq + 1), true);
                if (!key.empty()) req.query[key] = value;
                query = amp == std::string_view::npos ? std::string_view() : query.substr(amp + 1);
            }
        }
    } catch (const Error& e) {
        if (e.code() == ErrorCode::MalformedRequest) throw;
        malformed(fmt::format("bad percent escape in '{}'", req.target));
    }
    req.headers = head->headers;
    req.body = body_of(raw, *head);
    return req;
}

Bytes format_request(const std::string& method, const std::string& target, ByteView body) {
    auto out = to_bytes(fmt::format("{} {} HTTP/1.1\r\nHost: device\r\nContent-Length: {}\r\n\r\n", method, target, body.size()));
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

std::string percent_encode(std::string_view text) {
    std::string out;
    for (unsigned char c : text) {
        if (std::isalnum(c) || c == '-' || c == '.' || c == '_' || c == '~') out.push_back(static_cast<char>(c));
        else out += fmt::format("%{:02X}", c);
    }
    return out;
}

// --- routing ---------------------------------------------------------------

std::string_view to_string(Command c) noexcept {
    static constexpr std::string_view kNames[] = {"pull", "rmi", "create", "run",  "start", "stop",
                                                  "restart", "kill", "rm", "logs", "ps"};
    return kNames[static_cast<int>(c)];
}

RoutedCommand route(const HttpRequest& req) {
    const auto& m = req.method;
    const auto& p = req.path;
    auto image_param = [&](const char* key) {
        auto it = req.query.find(key);
        if (it == req.query.end() || it->second.empty()) malformed(fmt::format("missing '{}' parameter", key));
        return it->second;
    };
    if (m == "POST" && p == "/images/create") {
        auto name = image_param("fromImage");
        auto tag = req.query.find("tag");
        return {Command::Pull, tag != req.query.end() && !tag->second.empty() ? name + ":" + tag->second : name};
    }
    if (m == "DELETE" && p.rfind("/images/", 0) == 0 && p.size() > 8) return {Command::Rmi, p.substr(8)};
    if (m == "POST" && p == "/containers/create") return {Command::Create, image_param("image")};
    if (m == "POST" && p == "/containers/run") return {Command::Run, image_param("image")};
    if (m == "GET" && p == "/containers/json") return {Command::Ps, ""};
    if (p.rfind("/containers/", 0) == 0) {
        auto rest = p.substr(12);
        auto slash = rest.find('/');
        auto id = rest.substr(0, slash);
        if (!id.empty()) {
            if (slash == std::string::npos) {
                if (m == "DELETE") return {Command::Rm, id};
            } else {
                auto action = rest.substr(slash + 1);
                if (m == "POST" && action == "start") return {Command::Start, id};
                if (m == "POST" && action == "stop") return {Command::Stop, id};
                if (m == "POST" && action == "restart") return {Command::Restart, id};
                if (m == "POST" && action == "kill") return {Command::Kill, id};
                if (m == "GET" && action == "logs") return {Command::Logs, id};
            }
        }
    }
    throw Error(ErrorCode::UnsupportedCommand, fmt::format("{} {}", m, p));
}

// --- images ----------------------------------------------------------------

ImageRef ImageRef::parse(std::string_view text) {
    static const std::regex name_re("[a-z0-9]+([._/-][a-z0-9]+)*");
    static const std::regex tag_re("[A-Za-z0-9_][A-Za-z0-9_.-]{0,127}");
    std::string s(text);
    ImageRef ref;
    auto colon = s.rfind(':');
    if (colon != std::string::npos && s.find('/', colon) == std::string::npos) {
        ref.name = s.substr(0, colon);
        ref.tag = s.substr(colon + 1);
    } else {
        ref.name = s;
    }
    if (!std::regex_match(ref.name, name_re)) throw Error(ErrorCode::InvalidArgument, fmt::format("bad image name '{}'", text));
    if (!std::regex_match(ref.tag, tag_re)) throw Error(ErrorCode::InvalidArgument, fmt::format("bad image tag '{}'", text));
    return ref;
}

json ImageManifest::to_json() const {
    return {{"name", ref.name}, {"tag", ref.tag}, {"entry", entry}, {"layers", layers}, {"config", config}};
}

ImageManifest ImageManifest::from_json(const json& j) {
    auto bad = [](const std::string& what) { return Error(ErrorCode::InvalidArgument, "manifest: " + what); };
    if (!j.is_object()) throw bad("not an object");
    for (const auto& [key, _] : j.items())
        if (key != "name" && key != "tag" && key != "entry" && key != "layers" && key != "config") throw bad("unknown key " + key);
    for (const char* key : {"name", "tag", "entry", "config"})
        if (!j.contains(key) || !j.at(key).is_string()) throw bad(fmt::format("'{}' must be a string", key));
    if (!j.contains("layers") || !j.at("layers").is_array() || j.at("layers").empty()) throw bad("'layers' must be a non-empty array");
    ImageManifest m;
    m.ref = ImageRef::parse(j.at("name").get<std::string>() + ":" + j.at("tag").get<std::string>());
    m.entry = j.at("entry").get<std::string>();
    if (m.entry.empty() || m.entry.front() != '/') throw bad("entry must be an absolute path");
    for (const auto& l : j.at("layers")) {
        if (!l.is_string()) throw bad("layer digests must be strings");
        m.layers.push_back(l.get<std::string>());
        hex_of(m.layers.back());
    }
    m.config = j.at("config").get<std::string>();
    hex_of(m.config);
    return m;
}

std::string blob_path(const std::string& digest) { return fmt::format("{}/sha256-{}", kBlobDir, hex_of(digest)); }

std::string manifest_path(const ImageRef& ref) {
    auto name = ref.name;
    std::replace(name.begin(), name.end(), '/', '+');
    return fmt::format("{}/{}:{}.json", kManifestDir, name, ref.tag);
}

Bytes make_image_bundle(const ImageSpec& spec) {
    ImageManifest m;
    m.ref = spec.ref;
    m.entry = spec.entry;
    std::vector<archive::TarEntry> bundle;
    std::set<std::string> seen;
    auto add_blob = [&](Bytes data) {
        auto hex = archive::sha256_hex(data);
        if (seen.insert(hex).second) bundle.push_back({"blobs/sha256-" + hex, false, std::move(data)});
        return "sha256:" + hex;
    };
    for (const auto& layer : spec.layers) m.layers.push_back(add_blob(archive::write_tar(layer)));
    m.config = add_blob(to_bytes(spec.config.dump()));
    bundle.insert(bundle.begin(), {"manifest.json", false, to_bytes(m.to_json().dump())});
    return archive::write_tar(bundle);
}

// --- overlay ---------------------------------------------------------------

Layer Layer::from_tar(ByteView tar) {
    Layer layer;
    for (auto& e : archive::read_tar(tar)) {
        auto path = "/" + e.path;
        for (auto dir = parent_of(path); dir != "/"; dir = parent_of(dir)) layer.nodes[dir].directory = true;
        auto& node = layer.nodes[path];
        node.directory = e.directory;
        node.data = std::move(e.data);
    }
    return layer;
}

MergedView::MergedView(fs::LambdaFs& fs, std::string upper_dir, std::vector<std::shared_ptr<const Layer>> lowers)
    : fs_(fs), upper_(std::move(upper_dir)), lowers_(std::move(lowers)) {}

std::string MergedView::upper_path(const std::string& path) const { return path == "/" ? upper_ : upper_ + path; }

bool MergedView::whited_out(const std::string& path) {
    for (std::size_t pos = 1; pos <= path.size(); ++pos) {
        if (pos != path.size() && path[pos] != '/') continue;
        auto prefix = path.substr(0, pos);
        if (fs_.exists(kFw, upper_path(join(parent_of(prefix), whiteout_name(name_of(prefix)))))) return true;
    }
    return false;
}

MergedView::Found MergedView::locate(const std::string& path) {
    if (path.empty() || path.front() != '/') throw Error(ErrorCode::InvalidArgument, fmt::format("path '{}' is not absolute", path));
    if (path == "/") return {Where::Upper, true, nullptr};
    if (fs_.exists(kFw, upper_path(path)))
        return {Where::Upper, fs_.stat(kFw, upper_path(path)).kind == fs::InodeKind::Directory, nullptr};
    if (whited_out(path)) return {};
    for (auto l = lowers_.rbegin(); l != lowers_.rend(); ++l)
        if (auto it = (*l)->nodes.find(path); it != (*l)->nodes.end()) return {Where::Lower, it->second.directory, &it->second};
    return {};
}

bool MergedView::exists(const std::string& path) { return locate(path).where != Where::Missing; }

bool MergedView::is_directory(const std::string& path) {
    auto f = locate(path);
    return f.where != Where::Missing && f.directory;
}

Bytes MergedView::read(const std::string& path) {
    auto f = locate(path);
    if (f.where == Where::Missing) throw Error(ErrorCode::PathNotFound, path);
    if (f.directory) throw Error(ErrorCode::IsADirectory, path);
    return f.where == Where::Upper ? fs_.read_file(kFw, upper_path(path)) : f.lower->data;
}

void MergedView::ensure_upper_dirs(const std::string& dir) { fs_.mkdirs(kFw, upper_path(dir)); }

void MergedView::write(const std::string& path, ByteView data) {
    if (is_whiteout(name_of(path))) throw Error(ErrorCode::InvalidArgument, fmt::format("reserved name '{}'", path));
    auto parent = parent_of(path);
    if (!is_directory(parent)) throw Error(ErrorCode::PathNotFound, parent);
    if (is_directory(path)) throw Error(ErrorCode::IsADirectory, path);
    ensure_upper_dirs(parent);
    auto marker = upper_path(join(parent, whiteout_name(name_of(path))));
    if (fs_.exists(kFw, marker)) fs_.unlink(kFw, marker);
    fs_.write_file(kFw, upper_path(path), data);
}

void MergedView::mkdir(const std::string& path) {
    if (is_whiteout(name_of(path))) throw Error(ErrorCode::InvalidArgument, fmt::format("reserved name '{}'", path));
    if (exists(path)) throw Error(ErrorCode::AlreadyExists, path);
    auto parent = parent_of(path);
    if (!is_directory(parent)) throw Error(ErrorCode::PathNotFound, parent);
    ensure_upper_dirs(parent);
    auto marker = upper_path(join(parent, whiteout_name(name_of(path))));
    if (fs_.exists(kFw, marker)) fs_.unlink(kFw, marker);
    fs_.mkdir(kFw, upper_path(path));
}

void MergedView::unlink(const std::string& path) {
    auto f = locate(path);
    if (f.where == Where::Missing) throw Error(ErrorCode::PathNotFound, path);
    if (f.directory) throw Error(ErrorCode::IsADirectory, path);
    if (f.where == Where::Upper) fs_.unlink(kFw, upper_path(path));
    bool in_lower = std::any_of(lowers_.begin(), lowers_.end(), [&](const auto& l) { return l->nodes.contains(path); });
    if (in_lower) {
        ensure_upper_dirs(parent_of(path));
        fs_.write_file(kFw, upper_path(join(parent_of(path), whiteout_name(name_of(path)))), {});
    }
}

std::vector<std::string> MergedView::list(const std::string& path) {
    if (!is_directory(path)) throw Error(ErrorCode::NotADirectory, path);
    std::set<std::string> names;
    if (fs_.exists(kFw, upper_path(path)))
        for (auto& n : fs_.list(kFw, upper_path(path)))
            if (!is_whiteout(n)) names.insert(n);
    for (const auto& l : lowers_)
        for (const auto& [p, _] : l->nodes)
            if (p != "/" && parent_of(p) == path) names.insert(name_of(p));
    std::vector<std::string> out;
    for (const auto& n : names)
        if (exists(join(path, n))) out.push_back(n);
    return out;
}

void MergedView::reset_upper() {
    if (fs_.exists(kFw, upper_)) fs_.remove_all(kFw, upper_);
    fs_.mkdirs(kFw, upper_);
}

// --- container file routing ------------------------------------------------

Bind Bind::parse(std::string_view text) {
    auto colon = text.find(':');
    Bind b;
    if (colon != std::string_view::npos) {
        b.host_path = std::string(text.substr(0, colon));
        b.container_path = std::string(text.substr(colon + 1));
    }
    auto ok = [](const std::string& p) { return p.size() > 1 && p.front() == '/' && p.back() != '/'; };
    if (!ok(b.host_path) || !ok(b.container_path)) throw Error(ErrorCode::InvalidArgument, fmt::format("bad bind '{}'", text));
    return b;
}

ContainerFiles::ContainerFiles(fs::LambdaFs& fs, vfw::IoNodeCache& cache, MergedView& view, std::vector<Bind> binds)
    : fs_(fs), cache_(cache), view_(view), binds_(std::move(binds)) {}

std::optional<std::string> ContainerFiles::bound(const std::string& path) const {
    for (const auto& b : binds_) {
        const auto& c = b.container_path;
        if (path == c) return b.host_path;
        if (path.size() > c.size() && path.compare(0, c.size(), c) == 0 && path[c.size()] == '/')
            return b.host_path + path.substr(c.size());
    }
    return std::nullopt;
}

template <typename F>
auto ContainerFiles::locked(const std::string& host_path, F&& op) {
    auto outcome = fs_.open(Side::Container, host_path);
    if (outcome.status != fs::OpenStatus::Granted) {
        fs_.cancel(outcome.handle);
        throw Error(ErrorCode::WouldBlock, host_path);
    }
    struct Release {
        fs::LambdaFs& fs;
        std::uint64_t handle;
        ~Release() { fs.close(handle); }
    } release{fs_, outcome.handle};
    return op();
}

bool ContainerFiles::exists(const std::string& path) {
    if (auto host = bound(path)) return fs_.exists(kFw, *host);
    return view_.exists(path);
}

bool ContainerFiles::is_directory(const std::string& path) {
    if (auto host = bound(path)) return fs_.exists(kFw, *host) && fs_.stat(kFw, *host).kind == fs::InodeKind::Directory;
    return view_.is_directory(path);
}

Bytes ContainerFiles::read(const std::string& path) {
    if (auto host = bound(path)) return locked(*host, [&] { return fs_.read_file(kFw, *host); });
    return view_.read(path);
}

void ContainerFiles::write(const std::string& path, ByteView data) {
    if (auto host = bound(path)) {
        if (!fs_.exists(kFw, *host)) fs_.create(kFw, *host);
        locked(*host, [&] { fs_.write_file(kFw, *host, data); });
        return;
    }
    view_.write(path, data);
}

void ContainerFiles::mkdir(const std::string& path) {
    if (auto host = bound(path)) {
        fs_.mkdir(kFw, *host);
        return;
    }
    view_.mkdir(path);
}

void ContainerFiles::symlink(const std::string&, const std::string& link) {
    throw Error(ErrorCode::InvalidArgument, fmt::format("symlinks are not supported in container filesystems ({})", link));
}

void ContainerFiles::unlink(const std::string& path) {
    if (auto host = bound(path)) {
        if (fs_.exists(kFw, *host) && fs_.stat(kFw, *host).kind == fs::InodeKind::Directory)
            throw Error(ErrorCode::IsADirectory, path);
        locked(*host, [] {});
        fs_.unlink(kFw, *host);
        return;
    }
    view_.unlink(path);
}

vfw::WalkResult ContainerFiles::walk(const std::string& path) {
    if (auto host = bound(path)) return vfw::path_walk(fs_, cache_, *host);
    if (!view_.exists(path)) throw Error(ErrorCode::PathNotFound, path);
    vfw::WalkResult r;
    r.lookups = static_cast<std::size_t>(std::count(path.begin(), path.end(), '/'));
    if (path == "/") r.lookups = 0;
    return r;
}

// --- scripts ---------------------------------------------------------------

std::vector<ScriptOp> parse_script(std::string_view text) {
    using K = ScriptOp::Kind;
    static const std::map<std::string, K, std::less<>> kinds{
        {"log", K::Log},   {"err", K::Err},     {"write", K::Write}, {"append", K::Append}, {"read", K::Read},     {"cat", K::Cat},
        {"mkdir", K::Mkdir}, {"rm", K::Rm},     {"send", K::Send},   {"compute", K::Compute}, {"exit", K::Exit},
    };
    std::vector<ScriptOp> ops;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        auto body = trim(line);
        if (body.empty() || body.front() == '#') continue;
        auto sp = body.find(' ');
        auto word = body.substr(0, sp);
        std::string rest = sp == std::string::npos ? "" : body.substr(sp + 1);
        auto bad = [&](const std::string& why) {
            return Error(ErrorCode::InvalidArgument, fmt::format("script line {}: {}", lineno, why));
        };
        auto it = kinds.find(word);
        if (it == kinds.end()) throw bad(fmt::format("unknown op '{}'", word));
        ScriptOp op;
        op.kind = it->second;
        auto number = [&](const std::string& t) {
            std::int64_t v = 0;
            auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
            if (t.empty() || ec != std::errc{} || ptr != t.data() + t.size() || v < 0) throw bad(fmt::format("bad number '{}'", t));
            return v;
        };
        auto split = [&] {
            auto s = rest.find(' ');
            return std::pair{rest.substr(0, s), s == std::string::npos ? std::string() : rest.substr(s + 1)};
        };
        switch (op.kind) {
        case K::Log:
        case K::Err: op.text = rest; break;
        case K::Write:
        case K::Append: std::tie(op.path, op.text) = split(); break;
        case K::Read:
        case K::Cat:
        case K::Mkdir:
        case K::Rm: op.path = rest; break;
        case K::Send: {
            auto [port, payload] = split();
            op.number = number(port);
            if (op.number == 0 || op.number > 65535) throw bad("port out of range");
            op.text = payload;
            break;
        }
        case K::Compute: op.number = number(rest); break;
        case K::Exit: op.number = rest.empty() ? 0 : number(rest); break;
        }
        bool needs_path = op.kind == K::Write || op.kind == K::Append || op.kind == K::Read || op.kind == K::Cat ||
                          op.kind == K::Mkdir || op.kind == K::Rm;
        if (needs_path && (op.path.empty() || op.path.front() != '/')) throw bad(fmt::format("'{}' needs an absolute path", word));
        ops.push_back(std::move(op));
    }
    return ops;
}

// --- lifecycle -------------------------------------------------------------

std::string_view to_string(ContainerState s) noexcept {
    switch (s) {
    case ContainerState::Created: return "created";
    case ContainerState::Running: return "running";
    case ContainerState::Stopped: return "stopped";
    case ContainerState::Removed: return "removed";
    }
    return "?";
}

bool legal_transition(ContainerState from, ContainerState to) noexcept {
    using S = ContainerState;
    switch (from) {
    case S::Created: return to == S::Running || to == S::Removed;
    case S::Running: return to == S::Stopped || to == S::Created;
    case S::Stopped: return to == S::Running || to == S::Removed || to == S::Created;
    case S::Removed: return false;
    }
    return false;
}

struct MiniDocker::Container {
    std::string id;
    ImageManifest image;
    ContainerState state = ContainerState::Created;
    std::optional<int> exit_code;
    std::vector<Bind> binds;
    std::unique_ptr<MergedView> view;
    std::unique_ptr<ContainerFiles> files;
    std::optional<std::uint32_t> tid;
    std::vector<ScriptOp> script;
    std::size_t pc = 0;
    std::optional<SimTime> compute_left;
};

MiniDocker::MiniDocker(fs::LambdaFs& fs, vfw::VirtualFw& fw, vfw::IoNodeCache& cache, DockerConfig config)
    : fs_(fs), fw_(fw), cache_(cache), config_(config) {
    fs_.add_unlink_listener([&cache](const std::string& path) { cache.invalidate_prefix(path); });
}

MiniDocker::~MiniDocker() = default;

MiniDocker::Container& MiniDocker::container(const std::string& id) {
    auto it = containers_.find(id);
    if (it == containers_.end()) throw Error(ErrorCode::ContainerNotFound, id);
    return *it->second;
}

const MiniDocker::Container& MiniDocker::container(const std::string& id) const {
    auto it = containers_.find(id);
    if (it == containers_.end()) throw Error(ErrorCode::ContainerNotFound, id);
    return *it->second;
}

void MiniDocker::transition(Container& c, ContainerState to, const std::string& cause) {
    if (!legal_transition(c.state, to))
        throw Error(ErrorCode::IllegalState, fmt::format("{}: {} -> {}", c.id, to_string(c.state), to_string(to)));
    transitions_.push_back({c.id, c.state, to, cause});
    c.state = to;
}

std::optional<ImageManifest> MiniDocker::image(const ImageRef& ref) {
    auto path = manifest_path(ref);
    if (!fs_.exists(kFw, path)) return std::nullopt;
    return ImageManifest::from_json(json::parse(to_text(fs_.read_file(kFw, path))));
}

std::shared_ptr<const Layer> MiniDocker::layer(const std::string& digest) {
    if (auto it = layers_.find(digest); it != layers_.end()) return it->second;
    auto path = blob_path(digest);
    if (!fs_.exists(kFw, path)) throw Error(ErrorCode::ImageNotFound, fmt::format("blob {} missing", digest));
    auto data = fs_.read_file(kFw, path);
    if ("sha256:" + archive::sha256_hex(data) != digest) throw Error(ErrorCode::DigestMismatch, fmt::format("stored blob {}", digest));
    auto l = std::make_shared<const Layer>(Layer::from_tar(data));
    layers_.emplace(digest, l);
    return l;
}

ImageManifest MiniDocker::pull(ByteView bundle, const std::optional<ImageRef>& expected) {
    std::map<std::string, Bytes> files;
    try {
        for (auto& e : archive::read_tar(bundle))
            if (!e.directory) files[e.path] = std::move(e.data);
    } catch (const Error& e) {
        malformed(fmt::format("bundle: {}", e.what()));
    }
    auto mf = files.find("manifest.json");
    if (mf == files.end()) malformed("bundle has no manifest.json");
    ImageManifest m;
    try {
        m = ImageManifest::from_json(json::parse(to_text(mf->second)));
    } catch (const json::exception& e) {
        malformed(fmt::format("manifest: {}", e.what()));
    } catch (const Error& e) {
        malformed(e.what());
    }
    if (expected && *expected != m.ref) malformed(fmt::format("bundle holds {} not {}", m.ref.str(), expected->str()));

    std::vector<std::pair<std::string, const Bytes*>> fresh;
    std::set<std::string> checked;
    auto verify = [&](const std::string& digest, bool is_layer) {
        if (!checked.insert(digest).second) return;
        auto it = files.find("blobs/sha256-" + hex_of(digest));
        if (it == files.end()) {
            if (fs_.exists(kFw, blob_path(digest))) return;
            malformed(fmt::format("bundle lacks blob {}", digest));
        }
        if ("sha256:" + archive::sha256_hex(it->second) != digest) throw Error(ErrorCode::DigestMismatch, digest);
        try {
            if (is_layer) Layer::from_tar(it->second);
            else if (!json::parse(to_text(it->second)).is_object()) malformed("config blob is not an object");
        } catch (const json::exception& e) {
            malformed(fmt::format("config blob: {}", e.what()));
        } catch (const Error& e) {
            if (e.code() == ErrorCode::MalformedRequest) throw;
            malformed(fmt::format("layer {}: {}", digest, e.what()));
        }
        if (!fs_.exists(kFw, blob_path(digest))) fresh.emplace_back(digest, &it->second);
    };
    for (const auto& d : m.layers) verify(d, true);
    verify(m.config, false);

    auto manifest_bytes = to_bytes(m.to_json().dump());
    std::size_t blocks = (manifest_bytes.size() + nvme::kPageSize - 1) / nvme::kPageSize;
    for (const auto& [_, data] : fresh) blocks += (data->size() + nvme::kPageSize - 1) / nvme::kPageSize;
    if (blocks > fs_.free_blocks(nvme::NamespaceKind::Private))
        throw Error(ErrorCode::StorageFull, fmt::format("image {} needs {} blocks", m.ref.str(), blocks));
    for (const auto& [digest, data] : fresh) fs_.write_file(kFw, blob_path(digest), *data);
    fs_.write_file(kFw, manifest_path(m.ref), manifest_bytes);
    return m;
}

std::vector<std::string> MiniDocker::rmi(const ImageRef& ref) {
    auto m = image(ref);
    if (!m) throw Error(ErrorCode::ImageNotFound, ref.str());
    for (const auto& id : order_)
        if (containers_.at(id)->image.ref == ref) throw Error(ErrorCode::ImageInUse, fmt::format("{} used by {}", ref.str(), id));
    fs_.unlink(kFw, manifest_path(ref));
    std::set<std::string> still_used;
    for (const auto& name : fs_.list(kFw, kManifestDir)) {
        auto other = ImageManifest::from_json(json::parse(to_text(fs_.read_file(kFw, std::string(kManifestDir) + "/" + name))));
        still_used.insert(other.layers.begin(), other.layers.end());
        still_used.insert(other.config);
    }
    std::vector<std::string> deleted;
    std::set<std::string> digests(m->layers.begin(), m->layers.end());
    digests.insert(m->config);
    for (const auto& d : digests) {
        if (still_used.contains(d) || !fs_.exists(kFw, blob_path(d))) continue;
        fs_.unlink(kFw, blob_path(d));
        layers_.erase(d);
        deleted.push_back(d);
    }
    return deleted;
}

std::string MiniDocker::create(const ImageRef& ref, const std::vector<Bind>& binds) {
    auto m = image(ref);
    if (!m) throw Error(ErrorCode::ImageNotFound, ref.str());
    std::vector<std::shared_ptr<const Layer>> lowers;
    for (const auto& d : m->layers) lowers.push_back(layer(d));
    auto config_blob = blob_path(m->config);
    if (!fs_.exists(kFw, config_blob)) throw Error(ErrorCode::ImageNotFound, fmt::format("config blob {} missing", m->config));
    for (const auto& b : binds) fs_.bind(b.host_path);

    auto id = archive::sha256_hex(to_bytes(fmt::format("{}#{}", ref.str(), created_count_++))).substr(0, 12);
    auto dir = fmt::format("{}/{}", kContainerDir, id);
    fs_.mkdirs(kFw, dir + "/rootfs");
    json runtime{{"id", id}, {"image", ref.str()}, {"entry", m->entry}, {"layers", m->layers},
                 {"config", json::parse(to_text(fs_.read_file(kFw, config_blob)))}, {"binds", json::array()}};
    for (const auto& b : binds) runtime["binds"].push_back({{"host", b.host_path}, {"container", b.container_path}});
    fs_.write_file(kFw, dir + "/config.json", to_bytes(runtime.dump()));

    auto c = std::make_unique<Container>();
    c->id = id;
    c->image = *m;
    c->binds = binds;
    c->view = std::make_unique<MergedView>(fs_, dir + "/rootfs", std::move(lowers));
    c->files = std::make_unique<ContainerFiles>(fs_, cache_, *c->view, binds);
    containers_.emplace(id, std::move(c));
    order_.push_back(id);
    return id;
}

std::string MiniDocker::run(const ImageRef& ref, const std::vector<Bind>& binds) {
    auto id = create(ref, binds);
    start(id);
    return id;
}

void MiniDocker::start(const std::string& id) {
    auto& c = container(id);
    if (c.state != ContainerState::Created && c.state != ContainerState::Stopped)
        throw Error(ErrorCode::IllegalState, fmt::format("start on {} container {}", to_string(c.state), id));
    const auto& entry = c.image.entry;
    if (!c.view->exists(entry) || c.view->is_directory(entry))
        throw Error(ErrorCode::NoEntryScript, fmt::format("{} has no entry script {}", id, entry));
    c.script = parse_script(to_text(c.view->read(entry)));
    c.tid = fw_.spawn_container_thread(id, entry).tid;
    c.pc = 0;
    c.compute_left.reset();
    c.exit_code.reset();
    transition(c, ContainerState::Running, "start");
}

void MiniDocker::end_thread(Container& c, int exit_code, const std::string& cause, bool kill) {
    if (c.tid) {
        vfw::SyscallInvocation call;
        call.name = kill ? "kill" : "exit";
        call.tid = *c.tid;
        if (kill) call.args = {static_cast<std::int64_t>(*c.tid)};
        fw_.emulate(call);
        c.tid.reset();
    }
    c.exit_code = exit_code;
    if (c.state == ContainerState::Running && !cause.empty()) transition(c, ContainerState::Stopped, cause);
}

void MiniDocker::stop(const std::string& id) {
    auto& c = container(id);
    if (c.state != ContainerState::Running) throw Error(ErrorCode::IllegalState, fmt::format("stop on {} container {}", to_string(c.state), id));
    for (std::size_t q = 0; q < config_.stop_grace_quanta && c.state == ContainerState::Running; ++q) run_quantum();
    if (c.state == ContainerState::Running) end_thread(c, kExitTerminated, "stop", true);
}

void MiniDocker::kill(const std::string& id) {
    auto& c = container(id);
    if (c.state != ContainerState::Running) throw Error(ErrorCode::IllegalState, fmt::format("kill on {} container {}", to_string(c.state), id));
    end_thread(c, kExitKilled, "kill", true);
}

void MiniDocker::restart(const std::string& id) {
    auto& c = container(id);
    if (c.state == ContainerState::Running) stop(id);
    if (config_.reset_upper_on_restart) c.view->reset_upper();
    start(id);
}

void MiniDocker::rm(const std::string& id) {
    auto& c = container(id);
    if (c.state != ContainerState::Created && c.state != ContainerState::Stopped)
        throw Error(ErrorCode::IllegalState, fmt::format("rm on {} container {}", to_string(c.state), id));
    transition(c, ContainerState::Removed, "rm");
    fs_.remove_all(kFw, fmt::format("{}/{}", kContainerDir, id));
    containers_.erase(id);
    order_.erase(std::find(order_.begin(), order_.end(), id));
}

Bytes MiniDocker::logs(const std::string& id) {
    auto& c = container(id);
    auto path = c.view->upper_path("/log");
    return fs_.exists(kFw, path) ? fs_.read_file(kFw, path) : Bytes{};
}

std::optional<ContainerInfo> MiniDocker::info(const std::string& id) const {
    auto it = containers_.find(id);
    if (it == containers_.end()) return std::nullopt;
    const auto& c = *it->second;
    return ContainerInfo{c.id, c.image.ref.str(), c.state, c.exit_code};
}

std::vector<ContainerInfo> MiniDocker::ps() const {
    std::vector<ContainerInfo> out;
    for (const auto& id : order_) out.push_back(*info(id));
    return out;
}

MergedView* MiniDocker::rootfs(const std::string& id) {
    auto it = containers_.find(id);
    return it == containers_.end() ? nullptr : it->second->view.get();
}

std::map<std::string, std::string> MiniDocker::blob_hashes() {
    std::map<std::string, std::string> out;
    for (const auto& name : fs_.list(kFw, kBlobDir)) {
        if (name.rfind("sha256-", 0) != 0) continue;
        out["sha256:" + name.substr(7)] = archive::sha256_hex(fs_.read_file(kFw, std::string(kBlobDir) + "/" + name));
    }
    return out;
}

std::int64_t MiniDocker::sys(Container& c, vfw::SyscallInvocation call, SimTime& cost, Bytes* out) {
    auto& saved = fw_.backend();
    fw_.set_backend(*c.files);
    call.tid = c.tid.value_or(0);
    try {
        auto r = fw_.emulate(call);
        fw_.set_backend(saved);
        cost += r.cost_ns;
        if (out) *out = std::move(r.data);
        return r.value;
    } catch (...) {
        fw_.set_backend(saved);
        throw;
    }
}

namespace {

vfw::SyscallInvocation make_call(std::string name, std::vector<std::int64_t> args = {}, std::string path = {}, Bytes data = {}) {
    vfw::SyscallInvocation c;
    c.name = std::move(name);
    c.args = std::move(args);
    c.path = std::move(path);
    c.data = std::move(data);
    return c;
}

}  // namespace

SimTime MiniDocker::step(Container& c) {
    using K = ScriptOp::Kind;
    SimTime cost = 0;
    if (c.pc >= c.script.size()) {
        end_thread(c, 0, "exit", false);
        return 0;
    }
    const auto& op = c.script[c.pc];
    if (op.kind == K::Compute) {
        if (!c.compute_left) c.compute_left = static_cast<SimTime>(op.number);
        return 0;  // consumed by the caller against the quantum
    }
    ++c.pc;
    auto fail = [&](const std::string& what, std::int64_t err) { append_log(c, fmt::format("{}: errno {}\n", what, err), cost); };
    // Opens, runs `body` with the fd, closes; returns the first error.
    auto with_fd = [&](const std::string& path, std::int64_t flags, auto&& body) -> std::int64_t {
        auto fd = sys(c, make_call("openat", {flags}, path), cost);
        if (fd < 0) return fd;
        auto r = body(fd);
        sys(c, make_call("close", {fd}), cost);
        return r;
    };
    auto read_all = [&](std::int64_t fd, Bytes& content) -> std::int64_t {
        for (;;) {
            Bytes chunk;
            auto n = sys(c, make_call("read", {fd, 1 << 16}), cost, &chunk);
            if (n < 0) return n;
            if (n == 0) return 0;
            content.insert(content.end(), chunk.begin(), chunk.end());
        }
    };
    switch (op.kind) {
    case K::Log:
    case K::Err: append_log(c, op.text + "\n", cost); break;
    case K::Write:
    case K::Append: {
        auto flags = vfw::kOpenCreate | (op.kind == K::Write ? vfw::kOpenTruncate : 0);
        auto r = with_fd(op.path, flags, [&](std::int64_t fd) -> std::int64_t {
            if (op.kind == K::Append) {
                auto e = sys(c, make_call("lseek", {fd, 0, vfw::kSeekEnd}), cost);
                if (e < 0) return e;
            }
            auto n = sys(c, make_call("write", {fd}, {}, to_bytes(op.text)), cost);
            return n < 0 ? n : 0;
        });
        if (r < 0) fail(fmt::format("{} {}", op.kind == K::Write ? "write" : "append", op.path), r);
        break;
    }
    case K::Read:
    case K::Cat: {
        Bytes content;
        auto r = with_fd(op.path, 0, [&](std::int64_t fd) { return read_all(fd, content); });
        if (r < 0) {
            fail(fmt::format("{} {}", op.kind == K::Cat ? "cat" : "read", op.path), r);
        } else if (op.kind == K::Cat) {
            auto text = to_text(content);
            if (text.empty() || text.back() != '\n') text.push_back('\n');
            append_log(c, text, cost);
        }
        break;
    }
    case K::Mkdir: {
        auto r = sys(c, make_call("mkdir", {}, op.path), cost);
        if (r < 0) fail("mkdir " + op.path, r);
        break;
    }
    case K::Rm: {
        auto r = sys(c, make_call("unlink", {}, op.path), cost);
        if (r < 0) fail("rm " + op.path, r);
        break;
    }
    case K::Send: {
        auto s = sys(c, make_call("socket"), cost);
        auto r = sys(c, make_call("connect", {s, op.number}), cost);
        if (r >= 0) r = sys(c, make_call("sendto", {s}, {}, to_bytes(op.text)), cost);
        if (r >= 0) r = sys(c, make_call("shutdown", {s}), cost);
        sys(c, make_call("close", {s}), cost);
        if (r < 0) fail(fmt::format("send {}", op.number), r);
        break;
    }
    case K::Exit: end_thread(c, static_cast<int>(op.number), "exit", false); break;
    case K::Compute: break;
    }
    return cost;
}

void MiniDocker::append_log(Container& c, const std::string& text, SimTime& cost) {
    auto fd = sys(c, make_call("openat", {vfw::kOpenCreate}, "/log"), cost);
    if (fd < 0) return;
    sys(c, make_call("lseek", {fd, 0, vfw::kSeekEnd}), cost);
    sys(c, make_call("write", {fd}, {}, to_bytes(text)), cost);
    sys(c, make_call("close", {fd}), cost);
}

void MiniDocker::run_quantum() {
    auto& sched = fw_.scheduler();
    const auto quantum = sched.quantum();
    for (auto tid : sched.running()) {
        auto it = std::find_if(containers_.begin(), containers_.end(), [&](const auto& kv) { return kv.second->tid == tid; });
        if (it == containers_.end()) continue;
        auto& c = *it->second;
        SimTime used = 0;
        while (c.state == ContainerState::Running && used < quantum) {
            used += step(c);
            if (c.compute_left) {
                auto slice = std::min(*c.compute_left, quantum - std::min(used, quantum));
                *c.compute_left -= slice;
                used += slice;
                if (*c.compute_left == 0) {
                    c.compute_left.reset();
                    ++c.pc;
                }
            }
        }
    }
    sched.tick();
}

std::size_t MiniDocker::settle(std::size_t max_quanta) {
    std::size_t n = 0;
    auto any_running = [&] {
        return std::any_of(containers_.begin(), containers_.end(),
                           [](const auto& kv) { return kv.second->state == ContainerState::Running; });
    };
    while (n < max_quanta && any_running()) {
        run_quantum();
        ++n;
    }
    return n;
}

void MiniDocker::recover() {
    fs_.crash_recover();
    for (const auto& id : order_) {
        auto& c = *containers_.at(id);
        end_thread(c, 0, "", true);
        c.exit_code.reset();
        c.compute_left.reset();
        c.pc = 0;
        c.view->reset_upper();
        if (c.state != ContainerState::Created) transition(c, ContainerState::Created, "recover");
    }
}

HttpResponse MiniDocker::handle_http(ByteView raw) {
    try {
        return handle(parse_request(raw));
    } catch (const Error& e) {
        return error_response(status_for(e.code()), to_string(e.code()), e.what());
    } catch (const std::exception& e) {
        return error_response(500, to_string(ErrorCode::ModuleError), e.what());
    }
}

HttpResponse MiniDocker::handle(const HttpRequest& request) {
    try {
        auto cmd = route(request);
        auto binds = [&] {
            std::vector<Bind> out;
            if (auto it = request.query.find("bind"); it != request.query.end()) {
                std::string_view rest = it->second;
                while (!rest.empty()) {
                    auto comma = rest.find(',');
                    out.push_back(Bind::parse(rest.substr(0, comma)));
                    rest = comma == std::string_view::npos ? std::string_view() : rest.substr(comma + 1);
                }
            }
            return out;
        };
        switch (cmd.command) {
        case Command::Pull: {
            auto m = pull(request.body, ImageRef::parse(cmd.target));
            return json_response(200, {{"status", "pulled"}, {"image", m.ref.str()}, {"layers", m.layers}});
        }
        case Command::Rmi: {
            auto ref = ImageRef::parse(cmd.target);
            json out = json::array({{{"Untagged", ref.str()}}});
            for (const auto& d : rmi(ref)) out.push_back({{"Deleted", d}});
            return json_response(200, out);
        }
        case Command::Create: return json_response(201, {{"Id", create(ImageRef::parse(cmd.target), binds())}});
        case Command::Run: return json_response(201, {{"Id", run(ImageRef::parse(cmd.target), binds())}});
        case Command::Start: start(cmd.target); break;
        case Command::Stop: stop(cmd.target); break;
        case Command::Restart: restart(cmd.target); break;
        case Command::Kill: kill(cmd.target); break;
        case Command::Rm: rm(cmd.target); break;
        case Command::Logs: return {200, "text/plain", logs(cmd.target)};
        case Command::Ps: {
            json out = json::array();
            for (const auto& i : ps()) out.push_back(container_json(i));
            return json_response(200, out);
        }
        }
        return {204, "application/json", {}};
    } catch (const Error& e) {
        return error_response(status_for(e.code()), to_string(e.code()), e.what());
    } catch (const std::exception& e) {
        return error_response(500, to_string(ErrorCode::ModuleError), e.what());
    }
}

}  // namespace csd::docker
