#pragma once

// Optional remote alias lookup. An HTTP GET to a URL template with {subject}
// and {relation} placeholders returns acceptable objects as plain text, one
// per line. Results are cached on disk, one record per line:
//   subject \t relation \t object1 \t object2 ...
// Any failure (network, status, malformed body) falls back to the offline map
// with a warning; it is never fatal. Plain http only (no TLS in this build).

#include <sys/file.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "httplib.h"
#include "hallucitrace/dataset.hpp"

namespace hallucitrace {

struct RemoteAliasConfig {
  std::string url_template;  // e.g. http://localhost:8080/aliases?s={subject}&r={relation}
  std::filesystem::path cache_path;  // empty = no disk cache
  double timeout_seconds = 5.0;
};

enum class AliasSource { cache, remote, offline };

inline const char* to_string(AliasSource s) {
  switch (s) {
    case AliasSource::cache: return "cache";
    case AliasSource::remote: return "remote";
    case AliasSource::offline: return "offline";
  }
  return "?";
}

struct AliasLookup {
  std::vector<std::string> objects;  // offline objects first, then new remote ones
  AliasSource source = AliasSource::offline;
  std::string warning;               // set when the fallback was taken
};

namespace detail {

inline std::string percent_encode(const std::string& s) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += hex[c >> 4];
      out += hex[c & 15];
    }
  }
  return out;
}

inline std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size()) s.replace(pos, from.size(), to);
  return s;
}

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;    // path and query, at least "/"
};

inline std::optional<SplitUrl> split_url(const std::string& url) {
  const std::string scheme = "http://";
  if (url.rfind(scheme, 0) != 0) return std::nullopt;
  const auto slash = url.find('/', scheme.size());
  if (slash == scheme.size()) return std::nullopt;
  if (slash == std::string::npos) return SplitUrl{url, "/"};
  return SplitUrl{url.substr(0, slash), url.substr(slash)};
}

/// One object per non-empty line; a line holding whitespace inside a name is malformed.
inline std::optional<std::vector<std::string>> parse_alias_body(const std::string& body) {
  std::vector<std::string> out;
  std::istringstream in(body);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t");
    line = line.substr(first, last - first + 1);
    if (line.find_first_of(" \t") != std::string::npos) return std::nullopt;
    if (std::find(out.begin(), out.end(), line) == out.end()) out.push_back(line);
  }
  return out;
}

}  // namespace detail

class RemoteAliasResolver {
 public:
  using Warn = std::function<void(const std::string&)>;

  explicit RemoteAliasResolver(RemoteAliasConfig cfg, Warn warn = {}) : cfg_(std::move(cfg)), warn_(std::move(warn)) {
    if (!warn_) warn_ = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
    load_cache();
  }

  /// Offline objects merged with the remote (or cached) answer for (subject, relation).
  AliasLookup resolve(const std::string& subject, const std::string& relation, const AliasMap& offline) {
    std::lock_guard lock(mu_);
    AliasLookup out;
    out.objects = offline.objects(subject, relation);
    const auto key = std::make_pair(subject, relation);
    if (auto it = cache_.find(key); it != cache_.end()) {
      merge(out.objects, it->second);
      out.source = AliasSource::cache;
      return out;
    }
    auto fetched = fetch(subject, relation, out.warning);
    if (!fetched) {
      warn_(out.warning);
      return out;
    }
    cache_[key] = *fetched;
    append_cache(subject, relation, *fetched);
    merge(out.objects, *fetched);
    out.source = AliasSource::remote;
    return out;
  }

  /// Resolves every (subject, relation) key of `offline` and returns the merged map.
  AliasMap resolve_all(const AliasMap& offline) {
    AliasMap out = offline;
    for (const auto& [key, objs] : offline.entries()) {
      for (const auto& o : resolve(key.first, key.second, offline).objects) out.add(key.first, key.second, o);
    }
    return out;
  }

  std::size_t network_calls() const { return network_calls_; }
  std::size_t cached_entries() const { return cache_.size(); }

 private:
  static void merge(std::vector<std::string>& into, const std::vector<std::string>& more) {
    for (const auto& o : more)
      if (std::find(into.begin(), into.end(), o) == into.end()) into.push_back(o);
  }

  std::optional<std::vector<std::string>> fetch(const std::string& subject, const std::string& relation,
                                                std::string& warning) {
    const std::string url = detail::replace_all(
        detail::replace_all(cfg_.url_template, "{subject}", detail::percent_encode(subject)), "{relation}",
        detail::percent_encode(relation));
    auto parts = detail::split_url(url);
    if (!parts) {
      warning = "alias endpoint '" + cfg_.url_template + "' is not an http:// URL; using the offline map";
      return std::nullopt;
    }
    ++network_calls_;
    httplib::Client client(parts->origin);
    const auto secs = static_cast<time_t>(cfg_.timeout_seconds);
    const auto usecs = static_cast<time_t>((cfg_.timeout_seconds - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    auto res = client.Get(parts->path);
    const std::string where = "alias lookup for (" + subject + ", " + relation + ")";
    if (!res) {
      warning = where + " failed: " + httplib::to_string(res.error()) + "; using the offline map";
      return std::nullopt;
    }
    if (res->status != 200) {
      warning = where + " returned HTTP " + std::to_string(res->status) + "; using the offline map";
      return std::nullopt;
    }
    auto parsed = detail::parse_alias_body(res->body);
    if (!parsed) warning = where + " returned a malformed body; using the offline map";
    return parsed;
  }

  void load_cache() {
    if (cfg_.cache_path.empty() || !std::filesystem::exists(cfg_.cache_path)) return;
    std::ifstream in(cfg_.cache_path);
    for (std::string line; std::getline(in, line);) {
      std::vector<std::string> fields;
      std::istringstream ls(line);
      for (std::string f; std::getline(ls, f, '\t');) fields.push_back(f);
      if (fields.size() < 2) {
        if (!line.empty()) warn_("ignoring malformed alias cache line in " + cfg_.cache_path.string());
        continue;
      }
      cache_[{fields[0], fields[1]}] = std::vector<std::string>(fields.begin() + 2, fields.end());
    }
  }

  // Appends under an advisory file lock so concurrent processes do not interleave records.
  void append_cache(const std::string& subject, const std::string& relation, const std::vector<std::string>& objs) {
    if (cfg_.cache_path.empty()) return;
    std::string record = subject + '\t' + relation;
    for (const auto& o : objs) record += '\t' + o;
    record += '\n';
    std::FILE* f = std::fopen(cfg_.cache_path.c_str(), "a");
    if (!f) {
      warn_("cannot write alias cache " + cfg_.cache_path.string());
      return;
    }
    ::flock(fileno(f), LOCK_EX);
    std::fputs(record.c_str(), f);
    std::fflush(f);
    ::flock(fileno(f), LOCK_UN);
    std::fclose(f);
  }

  RemoteAliasConfig cfg_;
  Warn warn_;
  std::mutex mu_;
  std::map<AliasMap::Key, std::vector<std::string>> cache_;
  std::size_t network_calls_ = 0;
};

}  // namespace hallucitrace
