#pragma once

// Manifest-driven dataset recovery: concurrent HTTP fetching with bounded
// retries and exponential backoff, checksum verification, a failure taxonomy
// matching the observed recovery failure modes, resumable state derived from
// on-disk files, and a recovery-rate report.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace matseg {

class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ManifestEntry {
  std::string sample_id;
  std::string url;
  std::string expected_sha256;  // empty = no checksum in the manifest
  std::string path;             // relative output path
};

// JSONL, one object per line: {"id", "url", "sha256"?, "path"}.
std::vector<ManifestEntry> parse_manifest_jsonl(const std::string& text);
std::vector<ManifestEntry> load_manifest_jsonl(const std::filesystem::path& path);

enum class FetchStatus { kOk, kExpiredUrl, kRateLimited, kNetworkFailure, kCorrupt };
const char* to_string(FetchStatus status);

struct FetchPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds base_backoff{1000};
  std::chrono::milliseconds max_backoff{30000};
  bool jitter = true;
  int max_parallel = 8;
  std::chrono::milliseconds connect_timeout{5000};
  std::chrono::milliseconds read_timeout{15000};
  std::uint64_t jitter_seed = 0;
};

struct FetchOutcome {
  std::string sample_id;
  FetchStatus status = FetchStatus::kNetworkFailure;
  int attempts = 0;  // 0 when an already-verified file was skipped
  std::uint64_t bytes = 0;
  std::optional<int> final_http_code;
  bool skipped_existing = false;
  std::string detail;
};

struct FetchReport {
  std::size_t total = 0;
  std::size_t ok = 0;
  std::size_t expired_url = 0;
  std::size_t rate_limited = 0;
  std::size_t network_failure = 0;
  std::size_t corrupt = 0;
  std::optional<double> recovery_rate;  // absent (null in JSON) when total == 0
  std::vector<FetchOutcome> failures;
  std::string to_json() const;
};

// "92.9%" for 41396 / 44560.
std::string format_recovery_rate(std::uint64_t ok, std::uint64_t total);

struct FetchResult {
  std::vector<FetchOutcome> outcomes;  // manifest order
  FetchReport report;
};

// Classification: 404/410 (and other definitive 4xx) -> ExpiredUrl with no
// retry; 429/503 -> RateLimited, retried with backoff honoring Retry-After;
// transport errors and 5xx -> NetworkFailure, retried; checksum mismatch ->
// one re-download, then Corrupt. Files already on disk that pass their
// checksum are skipped. The only fatal error is an unwritable output dir.
FetchResult fetch_all(const std::vector<ManifestEntry>& manifest,
                      const std::filesystem::path& out_dir,
                      const FetchPolicy& policy = {});

enum class LocalStatus { kOk, kCorrupt, kMissing };
const char* to_string(LocalStatus status);

struct LocalOutcome {
  std::string sample_id;
  LocalStatus status = LocalStatus::kMissing;
  std::uint64_t bytes = 0;
};

struct LocalReport {
  std::size_t total = 0;
  std::size_t ok = 0;
  std::size_t corrupt = 0;
  std::size_t missing = 0;
  std::vector<LocalOutcome> outcomes;
  std::string to_json() const;
};

// Offline re-hash of present files; never touches the network. Entries with
// no checksum count as Ok on existence.
LocalReport verify_local(const std::vector<ManifestEntry>& manifest,
                         const std::filesystem::path& dir);

}  // namespace matseg
