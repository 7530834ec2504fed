// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value run configuration. Lines are `key = value`; `#` starts a
// comment; blank lines are ignored. Keys are unique.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace akt {

class RunConfig {
 public:
  RunConfig() = default;

  /// ConfigError names `origin` and the line on malformed input.
  static RunConfig parse(std::string_view text, std::string_view origin = "<config>");
  static RunConfig load(const std::string& path);

  /// Applies a `key=value` override (later assignments win).
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);
  /// Sets `key` only when absent.
  void set_default(const std::string& key, const std::string& value);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  /// Comma-separated list; empty value gives an empty list.
  std::vector<std::string> get_list(const std::string& key) const;

  /// ConfigError listing any key not in `known`.
  void require_known(const std::vector<std::string>& known) const;

  /// Canonical text: one `key=value` line per entry in key order. Parsing it
  /// gives back an equal config.
  std::string echo() const;

  bool operator==(const RunConfig&) const = default;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace akt
