#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "insta/errors.hpp"

namespace insta {

enum class PlaceholderKind { text, candidate };

struct PlaceholderToken {
  std::size_t begin = 0;  // offset of the opening "{{"
  std::size_t end = 0;    // one past the closing "}}"
  std::string name;       // inner content, whitespace-trimmed
  PlaceholderKind kind = PlaceholderKind::text;

  friend bool operator==(const PlaceholderToken&, const PlaceholderToken&) = default;
};

namespace detail {
inline std::string_view trim(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}
}  // namespace detail

// Every {{...}} occurrence, left to right. Unmatched openers, stray closers
// and braces nested inside a placeholder are errors.
inline std::vector<PlaceholderToken> parse_placeholders(std::string_view raw) {
  std::vector<PlaceholderToken> tokens;
  std::size_t i = 0;
  while (i + 1 < raw.size()) {
    if (raw[i] == '{' && raw[i + 1] == '{') {
      const auto close = raw.find("}}", i + 2);
      if (close == std::string_view::npos) {
        throw UnbalancedPlaceholderError(i, "unterminated '{{'");
      }
      const auto inner = raw.substr(i + 2, close - i - 2);
      if (inner.find_first_of("{}") != std::string_view::npos) {
        throw UnbalancedPlaceholderError(i, "nested braces inside placeholder");
      }
      tokens.push_back({i, close + 2, std::string(detail::trim(inner)), PlaceholderKind::text});
      i = close + 2;
    } else if (raw[i] == '}' && raw[i + 1] == '}') {
      throw UnbalancedPlaceholderError(i, "'}}' without matching '{{'");
    } else {
      ++i;
    }
  }
  return tokens;
}

// Offsets of Jinja control blocks ({% ... %}). They are left untouched.
inline std::vector<std::size_t> find_control_blocks(std::string_view raw) {
  std::vector<std::size_t> out;
  for (auto p = raw.find("{%"); p != std::string_view::npos; p = raw.find("{%", p + 2)) {
    out.push_back(p);
  }
  return out;
}

// Replace each placeholder by fields[name].
inline std::string substitute(std::string_view raw, const std::map<std::string, std::string>& fields) {
  std::string out;
  out.reserve(raw.size());
  std::size_t cursor = 0;
  for (const auto& tok : parse_placeholders(raw)) {
    out.append(raw.substr(cursor, tok.begin - cursor));
    auto it = fields.find(tok.name);
    if (it == fields.end()) {
      throw UnresolvedPlaceholderError("no field '" + tok.name + "' for placeholder");
    }
    out.append(it->second);
    cursor = tok.end;
  }
  out.append(raw.substr(cursor));
  return out;
}

}  // namespace insta
