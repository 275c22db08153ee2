#include <doctest.h>

#include <httplib.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <thread>

#include "matseg/ingest.hpp"
#include "matseg/sha256.hpp"

using namespace matseg;
namespace fs = std::filesystem;

namespace {

// In-process scripted HTTP server for protocol tests.
class MockServer {
 public:
  MockServer() {
    server_.Get("/ok", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("payload-ok", "application/octet-stream");
    });
    server_.Get("/gone", [](const httplib::Request&, httplib::Response& res) {
      res.status = 404;
    });
    server_.Get("/removed", [](const httplib::Request&, httplib::Response& res) {
      res.status = 410;
    });
    server_.Get("/limited", [this](const httplib::Request&, httplib::Response& res) {
      ++limited_hits_;
      if (limited_hits_ <= 2) {
        res.status = 429;
        res.set_header("Retry-After", "0");
      } else {
        res.set_content("finally", "application/octet-stream");
      }
    });
    server_.Get("/always-limited",
                [](const httplib::Request&, httplib::Response& res) {
                  res.status = 429;
                  res.set_header("Retry-After", "0");
                });
    server_.Get("/corrupt", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("not-what-you-wanted", "application/octet-stream");
    });
    server_.Get("/flaky", [this](const httplib::Request&, httplib::Response& res) {
      ++flaky_hits_;
      if (flaky_hits_ <= 1) {
        res.status = 500;
      } else {
        res.set_content("recovered", "application/octet-stream");
      }
    });
    server_.Get("/redirect", [this](const httplib::Request&, httplib::Response& res) {
      res.set_redirect("http://127.0.0.1:" + std::to_string(port_) + "/ok");
    });

    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  std::string url(const std::string& path) const {
    return "http://127.0.0.1:" + std::to_string(port_) + path;
  }
  int hits_on_limited() const { return limited_hits_; }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<int> limited_hits_{0};
  std::atomic<int> flaky_hits_{0};
};

FetchPolicy fast_policy() {
  FetchPolicy p;
  p.base_backoff = std::chrono::milliseconds(5);
  p.max_backoff = std::chrono::milliseconds(20);
  p.jitter = false;
  p.max_parallel = 4;
  p.connect_timeout = std::chrono::milliseconds(2000);
  p.read_timeout = std::chrono::milliseconds(2000);
  return p;
}

fs::path fresh_dir(const char* name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("manifest jsonl parsing and validation") {
  const std::string good =
      R"({"id": "a", "url": "http://x/y", "path": "a.png"})"
      "\n"
      R"({"id": "b", "url": "https://x/z", "sha256": "ff", "path": "sub/b.png"})"
      "\n";
  const auto entries = parse_manifest_jsonl(good);
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].sample_id == "a");
  CHECK(entries[0].expected_sha256.empty());
  CHECK(entries[1].expected_sha256 == "ff");

  CHECK_THROWS_AS(parse_manifest_jsonl(R"({"id": "a"})"), IngestError);
  CHECK_THROWS_AS(
      parse_manifest_jsonl(
          R"({"id": "a", "url": "http://x", "path": "/abs.png"})"),
      IngestError);
  CHECK_THROWS_AS(
      parse_manifest_jsonl(
          R"({"id": "a", "url": "http://x", "path": "../up.png"})"),
      IngestError);
  CHECK_THROWS_AS(
      parse_manifest_jsonl(
          R"({"id": "a", "url": "ftp://x", "path": "a.png"})"),
      IngestError);
  const std::string dup =
      R"({"id": "a", "url": "http://x/1", "path": "1.png"})"
      "\n"
      R"({"id": "a", "url": "http://x/2", "path": "2.png"})";
  CHECK_THROWS_AS(parse_manifest_jsonl(dup), IngestError);
}

TEST_CASE("empty manifest reports total 0 with a null rate") {
  const auto dir = fresh_dir("matseg_ingest_empty");
  const FetchResult r = fetch_all({}, dir, fast_policy());
  CHECK(r.report.total == 0);
  CHECK_FALSE(r.report.recovery_rate.has_value());
  CHECK(r.report.to_json().find("\"recovery_rate\": null") != std::string::npos);
}

TEST_CASE("status classification matches the policy table") {
  MockServer server;
  const auto dir = fresh_dir("matseg_ingest_classify");
  const std::string payload_hash = sha256_hex(std::string("payload-ok"));

  std::vector<ManifestEntry> manifest{
      {"ok", server.url("/ok"), payload_hash, "ok.bin"},
      {"gone", server.url("/gone"), "", "gone.bin"},
      {"removed", server.url("/removed"), "", "removed.bin"},
      {"limited", server.url("/limited"), "", "limited.bin"},
      {"corrupt", server.url("/corrupt"), payload_hash, "corrupt.bin"},
      {"flaky", server.url("/flaky"), "", "flaky.bin"},
      {"refused", "http://127.0.0.1:1/never", "", "refused.bin"},
      {"redirect", server.url("/redirect"), payload_hash, "redirect.bin"},
  };
  FetchPolicy policy = fast_policy();
  policy.max_parallel = 1;  // keep the scripted hit counters deterministic
  const FetchResult r = fetch_all(manifest, dir, policy);

  REQUIRE(r.outcomes.size() == 8);
  // Outcomes arrive in manifest order.
  CHECK(r.outcomes[0].sample_id == "ok");
  CHECK(r.outcomes[0].status == FetchStatus::kOk);
  CHECK(r.outcomes[0].attempts == 1);
  CHECK(fs::exists(dir / "ok.bin"));

  // 404 and 410: expired, exactly one attempt, no retry.
  for (std::size_t i : {std::size_t(1), std::size_t(2)}) {
    CHECK(r.outcomes[i].status == FetchStatus::kExpiredUrl);
    CHECK(r.outcomes[i].attempts == 1);
  }

  // 429 twice then success; Retry-After honored.
  CHECK(r.outcomes[3].status == FetchStatus::kOk);
  CHECK(r.outcomes[3].attempts == 3);

  // Checksum mismatch: exactly one re-download, then final corrupt.
  CHECK(r.outcomes[4].status == FetchStatus::kCorrupt);
  CHECK(r.outcomes[4].attempts == 2);
  CHECK_FALSE(fs::exists(dir / "corrupt.bin"));

  // 500 then success.
  CHECK(r.outcomes[5].status == FetchStatus::kOk);
  CHECK(r.outcomes[5].attempts == 2);

  // Connection refused: network failure, retried up to the bound.
  CHECK(r.outcomes[6].status == FetchStatus::kNetworkFailure);
  CHECK(r.outcomes[6].attempts == policy.max_attempts);

  // Redirect followed transparently.
  CHECK(r.outcomes[7].status == FetchStatus::kOk);

  // Report counts conserve.
  const auto& rep = r.report;
  CHECK(rep.total == 8);
  CHECK(rep.ok + rep.expired_url + rep.rate_limited + rep.network_failure +
            rep.corrupt ==
        rep.total);
  CHECK(rep.ok == 4);
  CHECK(rep.expired_url == 2);
  CHECK(rep.corrupt == 1);
  CHECK(rep.network_failure == 1);
  CHECK(rep.failures.size() == 4);
}

TEST_CASE("fetch is idempotent: verified files are skipped on re-run") {
  MockServer server;
  const auto dir = fresh_dir("matseg_ingest_idem");
  const std::string payload_hash = sha256_hex(std::string("payload-ok"));
  std::vector<ManifestEntry> manifest{
      {"ok", server.url("/ok"), payload_hash, "ok.bin"},
  };
  const FetchResult first = fetch_all(manifest, dir, fast_policy());
  CHECK(first.outcomes[0].attempts == 1);
  CHECK_FALSE(first.outcomes[0].skipped_existing);

  const FetchResult second = fetch_all(manifest, dir, fast_policy());
  CHECK(second.outcomes[0].status == FetchStatus::kOk);
  CHECK(second.outcomes[0].attempts == 0);
  CHECK(second.outcomes[0].skipped_existing);

  // Same final file set.
  CHECK(fs::exists(dir / "ok.bin"));
  CHECK(*sha256_file(dir / "ok.bin") == payload_hash);
}

TEST_CASE("retry bound holds for every entry") {
  MockServer server;
  const auto dir = fresh_dir("matseg_ingest_bound");
  FetchPolicy policy = fast_policy();
  policy.max_attempts = 3;
  std::vector<ManifestEntry> manifest{
      {"never", server.url("/always-limited"), "", "never.bin"},
  };
  const FetchResult r = fetch_all(manifest, dir, policy);
  CHECK(r.outcomes[0].status == FetchStatus::kRateLimited);
  CHECK(r.outcomes[0].attempts == 3);
}

TEST_CASE("recovery rate formatting matches the reporting convention") {
  CHECK(format_recovery_rate(41396, 44560) == "92.9%");
  CHECK(format_recovery_rate(0, 10) == "0.0%");
  CHECK(format_recovery_rate(10, 10) == "100.0%");
  CHECK(format_recovery_rate(0, 0) == "n/a");

  FetchReport rep;
  rep.total = 44560;
  rep.ok = 41396;
  rep.expired_url = 3164;
  rep.recovery_rate = double(rep.ok) / double(rep.total);
  const std::string j = rep.to_json();
  CHECK(j.find("\"recovery_rate_percent\": \"92.9%\"") != std::string::npos);
}

TEST_CASE("verify_local classifies ok, corrupt, and missing") {
  const auto dir = fresh_dir("matseg_verify_local");
  {
    std::ofstream f(dir / "good.bin", std::ios::binary);
    f << "hello";
  }
  {
    std::ofstream f(dir / "bad.bin", std::ios::binary);
    f << "hellp";  // one byte off
  }
  const std::string good_hash = sha256_hex(std::string("hello"));
  std::vector<ManifestEntry> manifest{
      {"good", "http://unused/a", good_hash, "good.bin"},
      {"bad", "http://unused/b", good_hash, "bad.bin"},
      {"absent", "http://unused/c", good_hash, "absent.bin"},
      {"nohash", "http://unused/d", "", "good.bin"},
  };
  const LocalReport rep = verify_local(manifest, dir);
  CHECK(rep.total == 4);
  CHECK(rep.ok == 2);
  CHECK(rep.corrupt == 1);
  CHECK(rep.missing == 1);
  CHECK(rep.outcomes[0].status == LocalStatus::kOk);
  CHECK(rep.outcomes[1].status == LocalStatus::kCorrupt);
  CHECK(rep.outcomes[2].status == LocalStatus::kMissing);
  CHECK(rep.outcomes[3].status == LocalStatus::kOk);
}

TEST_CASE("verify_local agrees with an external hashing tool when present") {
  const auto dir = fresh_dir("matseg_verify_external");
  {
    std::ofstream f(dir / "x.bin", std::ios::binary);
    f << "cross-check me";
  }
  const auto ours = sha256_file(dir / "x.bin");
  REQUIRE(ours.has_value());

  const std::string cmd =
      "command -v sha256sum > /dev/null 2>&1 && sha256sum '" +
      (dir / "x.bin").string() + "' > '" + (dir / "out.txt").string() + "'";
  if (std::system(cmd.c_str()) == 0) {
    std::ifstream in(dir / "out.txt");
    std::string external;
    in >> external;
    CHECK(external == *ours);
  } else {
    MESSAGE("sha256sum unavailable; skipping external cross-check");
  }
}
