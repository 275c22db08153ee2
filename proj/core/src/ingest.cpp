// httplib configuration (redirect cap, TLS) comes from the build system so
// every translation unit sees the same instantiation.
#include <httplib.h>

#include "matseg/ingest.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "matseg/rng.hpp"
#include "matseg/sha256.hpp"

namespace matseg {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

bool safe_relative_path(const std::string& p) {
  if (p.empty()) return false;
  const std::filesystem::path path(p);
  if (path.is_absolute()) return false;
  for (const auto& part : path) {
    if (part == "..") return false;
  }
  return true;
}

}  // namespace

std::vector<ManifestEntry> parse_manifest_jsonl(const std::string& text) {
  std::vector<ManifestEntry> entries;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> seen_ids;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw IngestError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    ManifestEntry entry;
    try {
      entry.sample_id = j.at("id").get<std::string>();
      entry.url = j.at("url").get<std::string>();
      entry.path = j.at("path").get<std::string>();
      entry.expected_sha256 = j.value("sha256", std::string());
    } catch (const json::exception& e) {
      throw IngestError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!safe_relative_path(entry.path)) {
      throw IngestError("manifest line " + std::to_string(line_no) +
                        ": path must be relative without '..'");
    }
    if (entry.url.rfind("http://", 0) != 0 && entry.url.rfind("https://", 0) != 0) {
      throw IngestError("manifest line " + std::to_string(line_no) +
                        ": unsupported url scheme");
    }
    entries.push_back(std::move(entry));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    for (std::size_t k = i + 1; k < entries.size(); ++k) {
      if (entries[i].sample_id == entries[k].sample_id) {
        throw IngestError("duplicate sample id: " + entries[i].sample_id);
      }
    }
  }
  return entries;
}

std::vector<ManifestEntry> load_manifest_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open manifest " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_manifest_jsonl(buf.str());
}

const char* to_string(FetchStatus status) {
  switch (status) {
    case FetchStatus::kOk: return "ok";
    case FetchStatus::kExpiredUrl: return "expired_url";
    case FetchStatus::kRateLimited: return "rate_limited";
    case FetchStatus::kNetworkFailure: return "network_failure";
    case FetchStatus::kCorrupt: return "corrupt";
  }
  return "?";
}

const char* to_string(LocalStatus status) {
  switch (status) {
    case LocalStatus::kOk: return "ok";
    case LocalStatus::kCorrupt: return "corrupt";
    case LocalStatus::kMissing: return "missing";
  }
  return "?";
}

std::string format_recovery_rate(std::uint64_t ok, std::uint64_t total) {
  if (total == 0) return "n/a";
  const double pct =
      100.0 * static_cast<double>(ok) / static_cast<double>(total);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f%%", pct);
  return buf;
}

std::string FetchReport::to_json() const {
  ordered_json j;
  j["total"] = total;
  j["counts"] = {{"ok", ok},
                 {"expired_url", expired_url},
                 {"rate_limited", rate_limited},
                 {"network_failure", network_failure},
                 {"corrupt", corrupt}};
  if (recovery_rate) {
    j["recovery_rate"] = *recovery_rate;
    j["recovery_rate_percent"] = format_recovery_rate(ok, total);
  } else {
    j["recovery_rate"] = nullptr;
    j["recovery_rate_percent"] = nullptr;
  }
  ordered_json fails = ordered_json::array();
  for (const auto& f : failures) {
    ordered_json o;
    o["id"] = f.sample_id;
    o["status"] = to_string(f.status);
    o["attempts"] = f.attempts;
    o["bytes"] = f.bytes;
    if (f.final_http_code) {
      o["http_code"] = *f.final_http_code;
    } else {
      o["http_code"] = nullptr;
    }
    o["detail"] = f.detail;
    fails.push_back(o);
  }
  j["failures"] = fails;
  return j.dump(2) + "\n";
}

namespace {

struct ParsedUrl {
  std::string host_port;  // "host" or "host:port", scheme-prefixed for httplib
  std::string target;     // path + query
};

ParsedUrl parse_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw IngestError("bad url: " + url);
  const auto rest = url.substr(scheme_end + 3);
  const auto slash = rest.find('/');
  ParsedUrl p;
  p.host_port = url.substr(0, scheme_end + 3) +
                (slash == std::string::npos ? rest : rest.substr(0, slash));
  p.target = slash == std::string::npos ? "/" : rest.substr(slash);
  return p;
}

std::optional<long> parse_retry_after(const httplib::Response& res) {
  if (!res.has_header("Retry-After")) return std::nullopt;
  const std::string v = res.get_header_value("Retry-After");
  if (v.empty()) return std::nullopt;
  for (char c : v) {
    if (!std::isdigit(static_cast<unsigned char>(c))) return std::nullopt;
  }
  try {
    return std::stol(v);
  } catch (...) {
    return std::nullopt;
  }
}

enum class Classified { kSuccess, kExpired, kRateLimited, kNetwork };

Classified classify_code(int code) {
  if (code >= 200 && code < 300) return Classified::kSuccess;
  if (code == 429 || code == 503) return Classified::kRateLimited;
  if (code >= 400 && code < 500) return Classified::kExpired;  // gone for good
  return Classified::kNetwork;  // 5xx and anything exotic: worth retrying
}

FetchOutcome fetch_one(const ManifestEntry& entry,
                       const std::filesystem::path& out_dir,
                       const FetchPolicy& policy, std::size_t entry_index) {
  FetchOutcome outcome;
  outcome.sample_id = entry.sample_id;

  const std::filesystem::path dest = out_dir / entry.path;

  // Resume: a present file that passes its checksum is done. Resumable state
  // is the on-disk content itself, so interrupted runs need no journal.
  if (std::filesystem::exists(dest)) {
    bool verified = true;
    if (!entry.expected_sha256.empty()) {
      const auto digest = sha256_file(dest);
      verified = digest && *digest == entry.expected_sha256;
    }
    if (verified) {
      outcome.status = FetchStatus::kOk;
      outcome.skipped_existing = true;
      outcome.bytes = std::filesystem::file_size(dest);
      outcome.detail = "already present and verified";
      return outcome;
    }
    std::filesystem::remove(dest);
  }

  std::filesystem::create_directories(dest.parent_path().empty()
                                          ? out_dir
                                          : dest.parent_path());

  ParsedUrl url;
  try {
    url = parse_url(entry.url);
  } catch (const IngestError& e) {
    outcome.status = FetchStatus::kExpiredUrl;
    outcome.attempts = 1;
    outcome.detail = e.what();
    return outcome;
  }

  Rng backoff_rng(policy.jitter_seed, entry_index);
  bool redownloaded_after_corrupt = false;

  while (outcome.attempts < policy.max_attempts) {
    ++outcome.attempts;

    httplib::Client client(url.host_port);
    client.set_follow_location(true);
    client.set_connection_timeout(policy.connect_timeout);
    client.set_read_timeout(policy.read_timeout);

    auto res = client.Get(url.target);

    std::optional<long> retry_after;
    Classified cls;
    if (!res) {
      cls = Classified::kNetwork;
      outcome.detail = httplib::to_string(res.error());
      outcome.final_http_code.reset();
    } else {
      outcome.final_http_code = res->status;
      retry_after = parse_retry_after(*res);
      cls = classify_code(res->status);
      outcome.detail = "http " + std::to_string(res->status);
    }

    if (cls == Classified::kSuccess) {
      // Write via a temp file so partially written payloads never count as
      // resumable state.
      const std::filesystem::path tmp = dest.string() + ".part";
      {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
          throw IngestError("output dir not writable: " + tmp.string());
        }
        f.write(res->body.data(), static_cast<std::streamsize>(res->body.size()));
        if (!f) throw IngestError("short write: " + tmp.string());
      }
      if (!entry.expected_sha256.empty()) {
        const auto digest = sha256_file(tmp);
        if (!digest || *digest != entry.expected_sha256) {
          std::filesystem::remove(tmp);
          outcome.status = FetchStatus::kCorrupt;
          outcome.detail = "sha256 mismatch";
          if (!redownloaded_after_corrupt &&
              outcome.attempts < policy.max_attempts) {
            redownloaded_after_corrupt = true;  // exactly one re-download
            continue;
          }
          return outcome;
        }
      }
      std::filesystem::rename(tmp, dest);
      outcome.status = FetchStatus::kOk;
      outcome.bytes = res->body.size();
      return outcome;
    }

    if (cls == Classified::kExpired) {
      outcome.status = FetchStatus::kExpiredUrl;
      return outcome;  // no retry: the resource is gone
    }

    outcome.status = cls == Classified::kRateLimited
                         ? FetchStatus::kRateLimited
                         : FetchStatus::kNetworkFailure;
    if (outcome.attempts >= policy.max_attempts) {
      return outcome;
    }

    // Exponential backoff with optional jitter; Retry-After wins when given.
    std::chrono::milliseconds delay(policy.base_backoff.count()
                                    << (outcome.attempts - 1));
    if (policy.jitter) {
      delay += std::chrono::milliseconds(static_cast<long>(
          backoff_rng.uniform() * static_cast<double>(delay.count()) * 0.5));
    }
    if (retry_after) {
      delay = std::chrono::milliseconds(*retry_after * 1000);
    }
    delay = std::min(delay, policy.max_backoff);
    if (delay.count() > 0) std::this_thread::sleep_for(delay);
  }
  return outcome;
}

}  // namespace

FetchResult fetch_all(const std::vector<ManifestEntry>& manifest,
                      const std::filesystem::path& out_dir,
                      const FetchPolicy& policy) {
  if (policy.max_attempts < 1) throw IngestError("max_attempts must be >= 1");
  if (policy.max_parallel < 1) throw IngestError("max_parallel must be >= 1");

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  {
    // Unwritable output dir is the only fatal error.
    const auto probe = out_dir / ".write_probe";
    std::ofstream f(probe, std::ios::trunc);
    if (!f) throw IngestError("output dir not writable: " + out_dir.string());
    f.close();
    std::filesystem::remove(probe);
  }

  FetchResult result;
  result.outcomes.resize(manifest.size());

  std::atomic<std::size_t> next{0};
  const int workers =
      static_cast<int>(std::min<std::size_t>(manifest.size(),
                                             static_cast<std::size_t>(policy.max_parallel)));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(std::max(workers, 0)));
  std::atomic<bool> fatal{false};
  std::string fatal_message;
  std::mutex fatal_mutex;
  for (int wi = 0; wi < workers; ++wi) {
    pool.emplace_back([&]() {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= manifest.size() || fatal.load()) break;
        try {
          result.outcomes[i] = fetch_one(manifest[i], out_dir, policy, i);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lock(fatal_mutex);
          fatal = true;
          fatal_message = e.what();
          break;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (fatal) throw IngestError(fatal_message);

  auto& report = result.report;
  report.total = manifest.size();
  for (const auto& o : result.outcomes) {
    switch (o.status) {
      case FetchStatus::kOk: ++report.ok; break;
      case FetchStatus::kExpiredUrl: ++report.expired_url; break;
      case FetchStatus::kRateLimited: ++report.rate_limited; break;
      case FetchStatus::kNetworkFailure: ++report.network_failure; break;
      case FetchStatus::kCorrupt: ++report.corrupt; break;
    }
    if (o.status != FetchStatus::kOk) {
      report.failures.push_back(o);
    }
  }
  if (report.total > 0) {
    report.recovery_rate = static_cast<double>(report.ok) /
                           static_cast<double>(report.total);
  }
  return result;
}

std::string LocalReport::to_json() const {
  ordered_json j;
  j["total"] = total;
  j["counts"] = {{"ok", ok}, {"corrupt", corrupt}, {"missing", missing}};
  ordered_json entries = ordered_json::array();
  for (const auto& o : outcomes) {
    entries.push_back({{"id", o.sample_id},
                       {"status", to_string(o.status)},
                       {"bytes", o.bytes}});
  }
  j["entries"] = entries;
  return j.dump(2) + "\n";
}

LocalReport verify_local(const std::vector<ManifestEntry>& manifest,
                         const std::filesystem::path& dir) {
  LocalReport report;
  report.total = manifest.size();
  for (const auto& entry : manifest) {
    LocalOutcome o;
    o.sample_id = entry.sample_id;
    const auto dest = dir / entry.path;
    if (!std::filesystem::exists(dest)) {
      o.status = LocalStatus::kMissing;
      ++report.missing;
    } else {
      o.bytes = std::filesystem::file_size(dest);
      if (entry.expected_sha256.empty()) {
        o.status = LocalStatus::kOk;
        ++report.ok;
      } else {
        const auto digest = sha256_file(dest);
        if (digest && *digest == entry.expected_sha256) {
          o.status = LocalStatus::kOk;
          ++report.ok;
        } else {
          o.status = LocalStatus::kCorrupt;
          ++report.corrupt;
        }
      }
    }
    report.outcomes.push_back(std::move(o));
  }
  return report;
}

}  // namespace matseg
