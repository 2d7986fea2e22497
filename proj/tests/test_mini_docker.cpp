#include <gtest/gtest.h>

#include <random>
#include <set>

#include "csd/mini_docker.hpp"
#include "test_util.hpp"

using namespace csd;
using namespace csd::docker;
using archive::TarEntry;
using nvme::PcieFunction;

namespace {

nvme::NamespaceTable layout() {
    std::vector<nvme::NamespaceSpec> spec{{nvme::NamespaceKind::Private, 0, 4000},
                                          {nvme::NamespaceKind::Sharable, 4000, 4000}};
    return nvme::define_namespaces(spec);
}

struct Rig {
    nvme::NvmeController ctl{layout()};
    fs::LambdaFs fs{ctl};
    vfw::IoNodeCache cache{256};
    vfw::LambdaFsBackend backend{fs, cache};
    vfw::VirtualFw fw{backend};
    MiniDocker docker{fs, fw, cache};
};

TarEntry file(std::string path, std::string_view text) { return {std::move(path), false, to_bytes(text)}; }
TarEntry dir(std::string path) { return {std::move(path), true, {}}; }

ImageSpec app_image(std::string script, std::string name = "app") {
    ImageSpec spec;
    spec.ref = ImageRef{std::move(name), "v1"};
    spec.entry = "/app/run.script";
    spec.layers.push_back({dir("app"), dir("etc"), file("etc/motd", "base motd\n"), file("etc/base.txt", "base\n")});
    spec.layers.push_back({dir("app"), file("app/run.script", script), file("etc/motd", "top motd\n")});
    spec.config = {{"env", {{"MODE", "test"}}}};
    return spec;
}

std::size_t count_files(fs::LambdaFs& fs, const std::string& dir) {
    return fs.list(PcieFunction::Firmware, dir).size();
}

}  // namespace

// --- digests and tar -------------------------------------------------------

TEST(Sha256, KnownVectors) {
    EXPECT_EQ(archive::sha256_hex({}), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    EXPECT_EQ(archive::sha256_hex(to_bytes("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Tar, ReadsArchiveFromReferenceWriter) {
    auto raw = to_bytes(read_golden("layer_python.tar"));
    EXPECT_EQ(archive::sha256_hex(raw), "7f61f5994b51e96a45c5e5ff2d75e11de6cbe23447ff12f89a19bcfbb4072fee");
    auto entries = archive::read_tar(raw);
    ASSERT_EQ(entries.size(), 4u);
    EXPECT_EQ(entries[0], dir("app"));
    EXPECT_EQ(entries[1], file("app/run.script", "log hello from layer\nexit 0\n"));
    std::string deep = "deep/" + std::string(60, 'd') + "/" + std::string(60, 'e') + "/file.txt";
    EXPECT_EQ(entries[2].path, deep);
    EXPECT_EQ(entries[2].data, Bytes(700, 'x'));
    EXPECT_EQ(entries[3], file("empty.txt", ""));
}

TEST(Tar, RoundTripAndHeaderChecksum) {
    std::string deep = "deep/" + std::string(60, 'd') + "/" + std::string(60, 'e') + "/file.txt";
    std::vector<TarEntry> entries{dir("a"), file("a/b.txt", "hello"), {deep, false, Bytes(1025, 7)}, file("z", "")};
    auto raw = archive::write_tar(entries);
    EXPECT_EQ(raw.size() % 512, 0u);
    EXPECT_EQ(archive::read_tar(raw), entries);
    // Checksum: sum of header bytes with the checksum field read as spaces.
    unsigned sum = 0;
    for (std::size_t i = 0; i < 512; ++i) sum += (i >= 148 && i < 156) ? ' ' : raw[i];
    EXPECT_EQ(std::stoul(std::string(raw.begin() + 148, raw.begin() + 154), nullptr, 8), sum);
    EXPECT_EQ(archive::write_tar(entries), raw);
}

TEST(Tar, RejectsDamage) {
    auto raw = archive::write_tar({file("a.txt", "hello")});
    auto flipped = raw;
    flipped[3] ^= 1;
    EXPECT_CSD_ERROR(archive::read_tar(flipped), ErrorCode::InvalidArgument);
    Bytes cut(raw.begin(), raw.begin() + 514);
    EXPECT_CSD_ERROR(archive::read_tar(cut), ErrorCode::InvalidArgument);
    EXPECT_CSD_ERROR(archive::write_tar({file("../etc/passwd", "x")}), ErrorCode::InvalidArgument);
    EXPECT_CSD_ERROR(archive::write_tar({file("/abs", "x")}), ErrorCode::InvalidArgument);
}

// --- HTTP ------------------------------------------------------------------

TEST(Http, ParsesRequest) {
    auto raw = to_bytes("POST /images/create?fromImage=my%2Fapp&tag=v1 HTTP/1.1\r\nHost: 10.0.0.2\r\n"
                        "Content-Length: 5\r\n\r\nhello");
    ASSERT_EQ(http_message_length(raw), raw.size());
    auto req = parse_request(raw);
    EXPECT_EQ(req.method, "POST");
    EXPECT_EQ(req.path, "/images/create");
    EXPECT_EQ(req.query.at("fromImage"), "my/app");
    EXPECT_EQ(req.query.at("tag"), "v1");
    EXPECT_EQ(req.headers.at("host"), "10.0.0.2");
    EXPECT_EQ(to_text(req.body), "hello");
}

TEST(Http, IncompleteAndMalformed) {
    EXPECT_EQ(http_message_length(to_bytes("GET /containers/json HTTP/1.1\r\nHost: x\r\n")), std::nullopt);
    auto truncated = to_bytes("POST /images/create HTTP/1.1\r\nContent-Length: 10\r\n\r\nabc");
    EXPECT_EQ(http_message_length(truncated), truncated.size() + 7);
    EXPECT_CSD_ERROR(parse_request(truncated), ErrorCode::MalformedRequest);
    EXPECT_CSD_ERROR(parse_request(to_bytes("GARBAGE\r\n\r\n")), ErrorCode::MalformedRequest);
    EXPECT_CSD_ERROR(parse_request(to_bytes("POST /x HTTP/1.1\r\n\r\nbody-without-length")), ErrorCode::MalformedRequest);
    EXPECT_CSD_ERROR(parse_request(to_bytes("GET /x HTTP/1.1\r\nContent-Length: ten\r\n\r\n")), ErrorCode::MalformedRequest);
}

TEST(Http, FormatRoundTrip) {
    auto raw = format_request("POST", "/containers/create?image=" + percent_encode("app:v1"), to_bytes("{}"));
    auto req = parse_request(raw);
    EXPECT_EQ(req.query.at("image"), "app:v1");
    EXPECT_EQ(to_text(req.body), "{}");

    HttpResponse resp{404, "application/json", to_bytes(R"({"message":"x"})")};
    auto back = HttpResponse::parse(resp.serialize());
    EXPECT_EQ(back.status, 404);
    EXPECT_EQ(back.body, resp.body);
    EXPECT_EQ(back.content_type, "application/json");
}

// --- command surface -------------------------------------------------------

TEST(Route, ElevenCommands) {
    struct Case {
        std::string method, target;
        Command expected;
        std::string object;
    };
    std::vector<Case> cases{
        {"POST", "/images/create?fromImage=app&tag=v1", Command::Pull, "app:v1"},
        {"DELETE", "/images/app:v1", Command::Rmi, "app:v1"},
        {"POST", "/containers/create?image=app:v1", Command::Create, "app:v1"},
        {"POST", "/containers/run?image=app:v1", Command::Run, "app:v1"},
        {"POST", "/containers/abc/start", Command::Start, "abc"},
        {"POST", "/containers/abc/stop", Command::Stop, "abc"},
        {"POST", "/containers/abc/restart", Command::Restart, "abc"},
        {"POST", "/containers/abc/kill", Command::Kill, "abc"},
        {"DELETE", "/containers/abc", Command::Rm, "abc"},
        {"GET", "/containers/abc/logs", Command::Logs, "abc"},
        {"GET", "/containers/json", Command::Ps, ""},
    };
    std::set<Command> seen;
    for (const auto& c : cases) {
        auto routed = route(parse_request(format_request(c.method, c.target)));
        EXPECT_EQ(routed.command, c.expected) << c.target;
        EXPECT_EQ(routed.target, c.object) << c.target;
        seen.insert(routed.command);
    }
    EXPECT_EQ(seen.size(), kCommandCount);
}

TEST(Route, OtherDockerCommandsRejected) {
    std::vector<std::pair<std::string, std::string>> others{
        {"POST", "/build"},
        {"GET", "/images/json"},
        {"POST", "/images/app:v1/push"},
        {"POST", "/images/app:v1/tag?repo=x"},
        {"GET", "/images/app:v1/json"},
        {"GET", "/images/app:v1/history"},
        {"GET", "/images/search?term=x"},
        {"POST", "/images/load"},
        {"GET", "/images/get"},
        {"POST", "/images/prune"},
        {"POST", "/commit?container=abc"},
        {"POST", "/containers/abc/exec"},
        {"POST", "/containers/abc/pause"},
        {"POST", "/containers/abc/unpause"},
        {"POST", "/containers/abc/attach"},
        {"POST", "/containers/abc/wait"},
        {"POST", "/containers/abc/rename?name=y"},
        {"POST", "/containers/abc/update"},
        {"POST", "/containers/abc/resize"},
        {"GET", "/containers/abc/json"},
        {"GET", "/containers/abc/top"},
        {"GET", "/containers/abc/stats"},
        {"GET", "/containers/abc/changes"},
        {"GET", "/containers/abc/export"},
        {"PUT", "/containers/abc/archive"},
        {"POST", "/containers/prune"},
        {"GET", "/version"},
        {"GET", "/info"},
        {"GET", "/events"},
        {"POST", "/auth"},
        {"GET", "/networks"},
        {"POST", "/networks/create"},
        {"GET", "/volumes"},
        {"POST", "/volumes/create"},
        {"POST", "/swarm/init"},
        {"GET", "/services"},
        {"GET", "/nodes"},
        {"GET", "/secrets"},
        {"GET", "/plugins"},
        {"GET", "/system/df"},
        {"PUT", "/containers/json"},
        {"GET", "/containers/abc/start"},
    };
    for (const auto& [method, target] : others)
        EXPECT_CSD_ERROR(route(parse_request(format_request(method, target))), ErrorCode::UnsupportedCommand);
}

TEST(Handle, ErrorsBecomeStatuses) {
    Rig r;
    auto build = HttpResponse::parse(r.docker.handle_http(format_request("POST", "/build")).serialize());
    EXPECT_EQ(build.status, 501);
    EXPECT_EQ(nlohmann::json::parse(build.text()).at("error"), "UnsupportedCommand");

    auto bundle = make_image_bundle(app_image("log hi\n"));
    auto raw = format_request("POST", "/images/create?fromImage=app&tag=v1", bundle);
    raw.resize(raw.size() - 100);
    auto truncated = r.docker.handle_http(raw);
    EXPECT_EQ(truncated.status, 400);
    EXPECT_EQ(nlohmann::json::parse(truncated.text()).at("error"), "MalformedRequest");
    EXPECT_EQ(count_files(r.fs, kBlobDir), 0u);

    auto missing = r.docker.handle_http(format_request("POST", "/containers/nope/start"));
    EXPECT_EQ(missing.status, 404);
    auto ps = r.docker.handle_http(format_request("GET", "/containers/json"));
    EXPECT_EQ(ps.status, 200);
    EXPECT_EQ(nlohmann::json::parse(ps.text()), nlohmann::json::array());
}

// --- images ----------------------------------------------------------------

TEST(ImageRef, Parse) {
    EXPECT_EQ(ImageRef::parse("app"), (ImageRef{"app", "latest"}));
    EXPECT_EQ(ImageRef::parse("lib/app:1.0"), (ImageRef{"lib/app", "1.0"}));
    EXPECT_CSD_ERROR(ImageRef::parse(""), ErrorCode::InvalidArgument);
    EXPECT_CSD_ERROR(ImageRef::parse("App:x"), ErrorCode::InvalidArgument);
    EXPECT_CSD_ERROR(ImageRef::parse("app:"), ErrorCode::InvalidArgument);
}

TEST(Pull, StoresContentAddressedBlobs) {
    Rig r;
    auto spec = app_image("log hi\n");
    auto m = r.docker.pull(make_image_bundle(spec));
    EXPECT_EQ(m.ref, spec.ref);
    ASSERT_EQ(m.layers.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        auto expected = "sha256:" + archive::sha256_hex(archive::write_tar(spec.layers[i]));
        EXPECT_EQ(m.layers[i], expected);
        EXPECT_TRUE(r.fs.exists(PcieFunction::Firmware, blob_path(expected)));
    }
    // Two layer blobs plus the config blob, one manifest.
    EXPECT_EQ(count_files(r.fs, kBlobDir), 3u);
    EXPECT_EQ(count_files(r.fs, kManifestDir), 1u);
    EXPECT_CSD_ERROR(r.fs.exists(PcieFunction::Host, kBlobDir), ErrorCode::NamespaceNotVisible);

    auto stored = nlohmann::json::parse(to_text(r.fs.read_file(PcieFunction::Firmware, manifest_path(spec.ref))));
    EXPECT_EQ(ImageManifest::from_json(stored).layers, m.layers);

    r.docker.pull(make_image_bundle(spec));
    EXPECT_EQ(count_files(r.fs, kBlobDir), 3u);
    EXPECT_EQ(count_files(r.fs, kManifestDir), 1u);
}

TEST(Pull, CorruptLayerPersistsNothing) {
    Rig r;
    auto bundle = make_image_bundle(app_image("log hi\n"));
    auto entries = archive::read_tar(bundle);
    for (auto& e : entries)
        if (e.path.rfind("blobs/", 0) == 0 && e.data.size() > 600) {
            e.data[600] ^= 0x20;
            break;
        }
    EXPECT_CSD_ERROR(r.docker.pull(archive::write_tar(entries)), ErrorCode::DigestMismatch);
    EXPECT_EQ(count_files(r.fs, kBlobDir), 0u);
    EXPECT_EQ(count_files(r.fs, kManifestDir), 0u);
}

TEST(Pull, RejectsMismatchedRefAndMissingBlob) {
    Rig r;
    auto bundle = make_image_bundle(app_image("log hi\n"));
    EXPECT_CSD_ERROR(r.docker.pull(bundle, ImageRef{"other", "v1"}), ErrorCode::MalformedRequest);
    auto entries = archive::read_tar(bundle);
    entries.pop_back();
    EXPECT_CSD_ERROR(r.docker.pull(archive::write_tar(entries)), ErrorCode::MalformedRequest);
    EXPECT_CSD_ERROR(r.docker.pull(to_bytes("not a tar")), ErrorCode::MalformedRequest);
}

TEST(Rmi, InUseAndSharedLayers) {
    Rig r;
    auto a = app_image("log a\n", "a");
    auto b = app_image("log b\n", "b");
    r.docker.pull(make_image_bundle(a));
    r.docker.pull(make_image_bundle(b));
    // Layer 0 and the config are shared; each top layer differs.
    EXPECT_EQ(count_files(r.fs, kBlobDir), 4u);

    auto id = r.docker.create(a.ref);
    EXPECT_CSD_ERROR(r.docker.rmi(a.ref), ErrorCode::ImageInUse);
    r.docker.rm(id);
    auto deleted = r.docker.rmi(a.ref);
    EXPECT_EQ(deleted.size(), 1u);
    EXPECT_EQ(count_files(r.fs, kBlobDir), 3u);
    EXPECT_CSD_ERROR(r.docker.rmi(a.ref), ErrorCode::ImageNotFound);
    EXPECT_CSD_ERROR(r.docker.create(a.ref), ErrorCode::ImageNotFound);
    r.docker.rmi(b.ref);
    EXPECT_EQ(count_files(r.fs, kBlobDir), 0u);
}

// --- overlay ---------------------------------------------------------------

namespace {

// Copy-up-free reference: a map per layer plus a whiteout set.
struct ReferenceOverlay {
    std::vector<std::map<std::string, std::string>> lowers;
    std::map<std::string, std::string> upper;
    std::set<std::string> whiteouts;

    std::optional<std::string> read(const std::string& p) const {
        if (auto it = upper.find(p); it != upper.end()) return it->second;
        if (whiteouts.contains(p)) return std::nullopt;
        for (auto l = lowers.rbegin(); l != lowers.rend(); ++l)
            if (auto it = l->find(p); it != l->end()) return it->second;
        return std::nullopt;
    }
    void write(const std::string& p, const std::string& v) { upper[p] = v; }
    bool remove(const std::string& p) {
        if (!read(p)) return false;
        upper.erase(p);
        whiteouts.insert(p);
        return true;
    }
};

std::shared_ptr<const Layer> layer_of(const std::vector<TarEntry>& entries) {
    return std::make_shared<const Layer>(Layer::from_tar(archive::write_tar(entries)));
}

}  // namespace

TEST(MergedView, PrecedenceWritesAndWhiteouts) {
    Rig r;
    r.fs.mkdirs(PcieFunction::Firmware, "/containers/t/rootfs");
    auto l0 = layer_of({dir("etc"), file("etc/motd", "zero"), file("etc/only0", "only zero")});
    auto l1 = layer_of({dir("etc"), file("etc/motd", "one")});
    MergedView view(r.fs, "/containers/t/rootfs", {l0, l1});

    EXPECT_EQ(to_text(view.read("/etc/motd")), "one");
    EXPECT_TRUE(view.is_directory("/etc"));
    EXPECT_CSD_ERROR(view.read("/etc"), ErrorCode::IsADirectory);

    view.write("/etc/new", to_bytes("fresh"));
    EXPECT_EQ(to_text(view.read("/etc/new")), "fresh");
    EXPECT_EQ(l0->nodes.count("/etc/new") + l1->nodes.count("/etc/new"), 0u);
    EXPECT_TRUE(r.fs.exists(PcieFunction::Firmware, "/containers/t/rootfs/etc/new"));

    view.unlink("/etc/only0");
    EXPECT_FALSE(view.exists("/etc/only0"));
    EXPECT_CSD_ERROR(view.read("/etc/only0"), ErrorCode::PathNotFound);
    EXPECT_EQ(to_text(l0->nodes.at("/etc/only0").data), "only zero");
    EXPECT_TRUE(r.fs.exists(PcieFunction::Firmware, "/containers/t/rootfs/etc/.wh.only0"));
    EXPECT_EQ(view.list("/etc"), (std::vector<std::string>{"motd", "new"}));

    view.write("/etc/only0", to_bytes("back"));
    EXPECT_EQ(to_text(view.read("/etc/only0")), "back");
    EXPECT_FALSE(r.fs.exists(PcieFunction::Firmware, "/containers/t/rootfs/etc/.wh.only0"));

    EXPECT_CSD_ERROR(view.write("/nodir/x", to_bytes("x")), ErrorCode::PathNotFound);
    EXPECT_CSD_ERROR(view.write("/etc/.wh.motd", to_bytes("x")), ErrorCode::InvalidArgument);

    view.reset_upper();
    EXPECT_EQ(to_text(view.read("/etc/only0")), "only zero");
    EXPECT_FALSE(view.exists("/etc/new"));
}

TEST(MergedView, MatchesReferenceUnderRandomOps) {
    Rig r;
    r.fs.mkdirs(PcieFunction::Firmware, "/containers/t/rootfs");
    std::vector<std::string> names{"a", "b", "c", "d", "e", "f"};
    ReferenceOverlay ref;
    std::vector<std::shared_ptr<const Layer>> lowers;
    std::mt19937 rng(11);
    for (int l = 0; l < 3; ++l) {
        std::vector<TarEntry> entries{dir("d")};
        std::map<std::string, std::string> m;
        for (const auto& n : names)
            if (rng() % 2) {
                auto v = n + std::to_string(l);
                entries.push_back(file("d/" + n, v));
                m["/d/" + n] = v;
            }
        lowers.push_back(layer_of(entries));
        ref.lowers.push_back(m);
    }
    MergedView view(r.fs, "/containers/t/rootfs", lowers);
    for (int i = 0; i < 2000; ++i) {
        auto path = "/d/" + names[rng() % names.size()];
        switch (rng() % 3) {
        case 0: {
            auto v = "w" + std::to_string(i);
            view.write(path, to_bytes(v));
            ref.write(path, v);
            break;
        }
        case 1:
            if (ref.remove(path)) view.unlink(path);
            else EXPECT_CSD_ERROR(view.unlink(path), ErrorCode::PathNotFound);
            break;
        default: break;
        }
        for (const auto& n : names) {
            auto p = "/d/" + n;
            auto expected = ref.read(p);
            ASSERT_EQ(view.exists(p), expected.has_value()) << p << " step " << i;
            if (expected) ASSERT_EQ(to_text(view.read(p)), *expected) << p << " step " << i;
        }
    }
}

// --- scripts ---------------------------------------------------------------

TEST(Script, Parse) {
    auto ops = parse_script("# comment\n\nlog hello world\nwrite /x a b\ncompute 500\nsend 80 hi\nexit 3\n");
    ASSERT_EQ(ops.size(), 5u);
    EXPECT_EQ(ops[0].kind, ScriptOp::Kind::Log);
    EXPECT_EQ(ops[0].text, "hello world");
    EXPECT_EQ(ops[1].path, "/x");
    EXPECT_EQ(ops[1].text, "a b");
    EXPECT_EQ(ops[2].number, 500);
    EXPECT_EQ(ops[3].number, 80);
    EXPECT_EQ(ops[3].text, "hi");
    EXPECT_EQ(ops[4].number, 3);
    EXPECT_CSD_ERROR(parse_script("dance\n"), ErrorCode::InvalidArgument);
    EXPECT_CSD_ERROR(parse_script("compute lots\n"), ErrorCode::InvalidArgument);
    EXPECT_CSD_ERROR(parse_script("write relative x\n"), ErrorCode::InvalidArgument);
}

// --- lifecycle -------------------------------------------------------------

TEST(Lifecycle, RunWritesLogUnderRootfs) {
    Rig r;
    auto spec = app_image("log hello\nwrite /tmp.txt abc\ncat /tmp.txt\ncat /etc/motd\ncat /missing\nerr oops\n");
    r.docker.pull(make_image_bundle(spec));
    auto id = r.docker.run(spec.ref);
    EXPECT_EQ(r.docker.info(id)->state, ContainerState::Running);
    r.docker.settle();
    auto info = r.docker.info(id);
    EXPECT_EQ(info->state, ContainerState::Stopped);
    EXPECT_EQ(info->exit_code, 0);
    std::string expected = "hello\nabc\ntop motd\ncat /missing: errno -2\noops\n";
    EXPECT_EQ(to_text(r.docker.logs(id)), expected);
    EXPECT_EQ(to_text(r.fs.read_file(PcieFunction::Firmware, "/containers/" + id + "/rootfs/log")), expected);
    EXPECT_TRUE(r.fs.exists(PcieFunction::Firmware, "/containers/" + id + "/config.json"));
    EXPECT_GT(r.fw.stats().syscalls, 0u);
}

TEST(Lifecycle, EndToEndOverHttp) {
    Rig r;
    auto spec = app_image("log ready\nexit 0\n");
    auto pulled = r.docker.handle_http(format_request("POST", "/images/create?fromImage=app&tag=v1", make_image_bundle(spec)));
    ASSERT_EQ(pulled.status, 200) << pulled.text();
    auto ran = r.docker.handle_http(format_request("POST", "/containers/run?image=app:v1"));
    ASSERT_EQ(ran.status, 201) << ran.text();
    auto id = nlohmann::json::parse(ran.text()).at("Id").get<std::string>();
    r.docker.settle();
    auto logs = r.docker.handle_http(format_request("GET", "/containers/" + id + "/logs"));
    EXPECT_EQ(logs.status, 200);
    EXPECT_EQ(logs.text(), "ready\n");
    auto ps = nlohmann::json::parse(r.docker.handle_http(format_request("GET", "/containers/json")).text());
    ASSERT_EQ(ps.size(), 1u);
    EXPECT_EQ(ps[0].at("State"), "stopped");
    EXPECT_EQ(r.docker.handle_http(format_request("DELETE", "/containers/" + id)).status, 204);
    EXPECT_EQ(nlohmann::json::parse(r.docker.handle_http(format_request("GET", "/containers/json")).text()).size(), 0u);
}

TEST(Lifecycle, StopWaitsOneQuantumKillDoesNot) {
    Rig r;
    // 3 ms of compute outlasts the single-quantum grace period.
    auto spec = app_image("log begin\ncompute 3000000\nlog end\n");
    r.docker.pull(make_image_bundle(spec));
    auto a = r.docker.run(spec.ref);
    r.docker.stop(a);
    EXPECT_EQ(r.docker.info(a)->state, ContainerState::Stopped);
    EXPECT_EQ(r.docker.info(a)->exit_code, kExitTerminated);
    EXPECT_EQ(to_text(r.docker.logs(a)), "begin\n");

    auto b = r.docker.run(spec.ref);
    r.docker.kill(b);
    EXPECT_EQ(r.docker.info(b)->exit_code, kExitKilled);
    EXPECT_EQ(to_text(r.docker.logs(b)), "");

    // A short script finishes inside the grace quantum and exits cleanly.
    auto quick = app_image("log done\n", "quick");
    r.docker.pull(make_image_bundle(quick));
    auto c = r.docker.run(quick.ref);
    r.docker.stop(c);
    EXPECT_EQ(r.docker.info(c)->exit_code, 0);
}

TEST(Lifecycle, RestartKeepsUpperLayer) {
    Rig r;
    auto spec = app_image("append /count x\ncat /count\n");
    r.docker.pull(make_image_bundle(spec));
    auto id = r.docker.run(spec.ref);
    r.docker.settle();
    r.docker.restart(id);
    r.docker.settle();
    EXPECT_EQ(to_text(r.docker.logs(id)), "x\nxx\n");
}

TEST(Lifecycle, IllegalCommands) {
    Rig r;
    auto spec = app_image("compute 50000000\n");
    r.docker.pull(make_image_bundle(spec));
    auto id = r.docker.create(spec.ref);
    EXPECT_CSD_ERROR(r.docker.stop(id), ErrorCode::IllegalState);
    EXPECT_CSD_ERROR(r.docker.kill(id), ErrorCode::IllegalState);
    r.docker.start(id);
    EXPECT_CSD_ERROR(r.docker.start(id), ErrorCode::IllegalState);
    EXPECT_CSD_ERROR(r.docker.rm(id), ErrorCode::IllegalState);
    r.docker.kill(id);
    r.docker.rm(id);
    EXPECT_CSD_ERROR(r.docker.start(id), ErrorCode::ContainerNotFound);
    EXPECT_CSD_ERROR(r.docker.logs(id), ErrorCode::ContainerNotFound);
    EXPECT_FALSE(r.fs.exists(PcieFunction::Firmware, "/containers/" + id));
}

TEST(Lifecycle, MissingEntryScript) {
    Rig r;
    auto spec = app_image("log x\n");
    spec.entry = "/app/absent.script";
    r.docker.pull(make_image_bundle(spec));
    auto id = r.docker.create(spec.ref);
    EXPECT_CSD_ERROR(r.docker.start(id), ErrorCode::NoEntryScript);
    EXPECT_EQ(r.docker.info(id)->state, ContainerState::Created);
}

TEST(Lifecycle, BindPathUsesInodeLock) {
    Rig r;
    r.fs.mkdir(PcieFunction::Host, "/shared");
    r.fs.write_file(PcieFunction::Host, "/shared/in.txt", to_bytes("from host"));
    auto spec = app_image("cat /mnt/in.txt\nwrite /mnt/out.txt from container\n");
    r.docker.pull(make_image_bundle(spec));
    auto id = r.docker.create(spec.ref, {Bind::parse("/shared:/mnt")});
    r.docker.start(id);
    r.docker.settle();
    EXPECT_EQ(to_text(r.docker.logs(id)), "from host\n");
    EXPECT_EQ(to_text(r.fs.read_file(PcieFunction::Host, "/shared/out.txt")), "from container");
    EXPECT_EQ(r.fs.locks().live_count(), 0u);

    // While the host holds the file (and so its directory) the container
    // backs off on both the read and the write in the same directory.
    auto held = r.fs.open(Side::Host, "/shared/in.txt");
    r.docker.restart(id);
    r.docker.settle();
    EXPECT_EQ(to_text(r.docker.logs(id)), "from host\ncat /mnt/in.txt: errno -11\nwrite /mnt/out.txt: errno -11\n");
    EXPECT_EQ(r.fs.locks().waiting_count(), 0u);
    r.fs.close(held.handle);

    EXPECT_CSD_ERROR(r.docker.create(spec.ref, {Bind::parse("/images:/mnt")}), ErrorCode::PrivatePathBind);
}

TEST(Lifecycle, SendGoesThroughNetworkHandler) {
    Rig r;
    std::vector<ether::TcpSegment> wire;
    r.fw.set_segment_sink([&](const ether::TcpSegment& s) { wire.push_back(s); });
    auto spec = app_image("send 9000 result=42\n");
    r.docker.pull(make_image_bundle(spec));
    r.docker.run(spec.ref);
    r.docker.settle();
    ASSERT_EQ(wire.size(), 1u);
    EXPECT_EQ(wire[0].dst_port, 9000);
    EXPECT_EQ(to_text(wire[0].data), "result=42");
}

TEST(Lifecycle, RecoveryResetsToCreated) {
    Rig r;
    auto spec = app_image("write /state dirty\ncompute 50000000\n");
    r.docker.pull(make_image_bundle(spec));
    auto a = r.docker.run(spec.ref);
    r.docker.run_quantum();
    auto b = r.docker.create(spec.ref);
    r.fs.mkdir(PcieFunction::Host, "/shared");
    r.fs.create(PcieFunction::Host, "/shared/f");
    r.fs.open(Side::Host, "/shared/f");
    ASSERT_TRUE(r.docker.rootfs(a)->exists("/state"));

    r.docker.recover();
    EXPECT_EQ(r.docker.info(a)->state, ContainerState::Created);
    EXPECT_EQ(r.docker.info(b)->state, ContainerState::Created);
    EXPECT_FALSE(r.docker.rootfs(a)->exists("/state"));
    EXPECT_EQ(r.fs.locks().live_count(), 0u);
    EXPECT_TRUE(r.fw.scheduler().running().empty());
    for (const auto& t : r.docker.transitions()) EXPECT_TRUE(legal_transition(t.from, t.to));
    r.docker.start(a);
    EXPECT_EQ(r.docker.info(a)->state, ContainerState::Running);
}

// --- lifecycle property: implementation vs reference machine ---------------

namespace {

enum class Op { Create, Start, Stop, Kill, Restart, Rm, Run, Settle, Quantum };

// Expected post-state for a command on a container, or nullopt when the
// command must be refused with IllegalState.
std::optional<ContainerState> reference_next(Op op, ContainerState s) {
    using S = ContainerState;
    switch (op) {
    case Op::Start: return s == S::Created || s == S::Stopped ? std::optional(S::Running) : std::nullopt;
    case Op::Stop:
    case Op::Kill: return s == S::Running ? std::optional(S::Stopped) : std::nullopt;
    case Op::Restart: return s == S::Removed ? std::nullopt : std::optional(S::Running);
    case Op::Rm: return s == S::Created || s == S::Stopped ? std::optional(S::Removed) : std::nullopt;
    default: return s;
    }
}

}  // namespace

TEST(Lifecycle, RandomSequencesMatchReference) {
    Rig r;
    auto spec = app_image("log a\ncompute 1500000\nlog b\n");
    r.docker.pull(make_image_bundle(spec));
    std::mt19937 rng(5);
    std::vector<std::string> ids;
    std::set<ContainerState> reached;
    for (int i = 0; i < 1500; ++i) {
        auto op = static_cast<Op>(rng() % 9);
        if (op == Op::Create || op == Op::Run || ids.empty()) {
            ids.push_back(op == Op::Run ? r.docker.run(spec.ref) : r.docker.create(spec.ref));
            continue;
        }
        if (op == Op::Settle) {
            r.docker.settle();
            continue;
        }
        if (op == Op::Quantum) {
            r.docker.run_quantum();
            continue;
        }
        const auto& id = ids[rng() % ids.size()];
        auto before = r.docker.info(id);
        auto state = before ? before->state : ContainerState::Removed;
        auto expected = reference_next(op, state);
        auto apply = [&] {
            switch (op) {
            case Op::Start: r.docker.start(id); break;
            case Op::Stop: r.docker.stop(id); break;
            case Op::Kill: r.docker.kill(id); break;
            case Op::Restart: r.docker.restart(id); break;
            case Op::Rm: r.docker.rm(id); break;
            default: break;
            }
        };
        if (state == ContainerState::Removed) {
            EXPECT_CSD_ERROR(apply(), ErrorCode::ContainerNotFound);
        } else if (!expected) {
            EXPECT_CSD_ERROR(apply(), ErrorCode::IllegalState);
        } else {
            apply();
            auto after = r.docker.info(id);
            auto now = after ? after->state : ContainerState::Removed;
            // A stop can let a nearly finished script exit on its own.
            EXPECT_EQ(now, *expected) << to_string(state) << " op " << static_cast<int>(op);
        }
        if (auto after = r.docker.info(id)) reached.insert(after->state);
        else reached.insert(ContainerState::Removed);
    }
    for (const auto& t : r.docker.transitions()) {
        EXPECT_TRUE(legal_transition(t.from, t.to)) << t.cause;
        reached.insert(t.to);
    }
    EXPECT_EQ(reached.size(), 4u);
}

TEST(Lifecycle, LowerLayersNeverChange) {
    Rig r;
    auto spec = app_image("write /etc/motd overwritten\nrm /etc/base.txt\nappend /app/run.script junk\nmkdir /newdir\n");
    auto m = r.docker.pull(make_image_bundle(spec));
    auto before = r.docker.blob_hashes();
    for (const auto& [digest, hash] : before) EXPECT_EQ(digest, "sha256:" + hash);
    for (int i = 0; i < 5; ++i) r.docker.run(spec.ref);
    r.docker.settle();
    EXPECT_EQ(r.docker.blob_hashes(), before);
    auto fresh = r.docker.create(spec.ref);
    EXPECT_EQ(to_text(r.docker.rootfs(fresh)->read("/etc/motd")), "top motd\n");
    EXPECT_TRUE(r.docker.rootfs(fresh)->exists("/etc/base.txt"));
}
