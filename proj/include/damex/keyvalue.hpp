// SPDX-License-Identifier: Apache-2.0
//
// Line-oriented `key = value` reader used by run configs and mapping tables.
// `[section]` headers prefix the keys that follow with `section.`; `#`
// starts a comment.
#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace damex {

struct ConfigEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

/// Throws ConfigError (with line number) on malformed lines or duplicate keys.
std::vector<ConfigEntry> parse_key_values(std::string_view text);

std::string_view trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

}  // namespace damex
