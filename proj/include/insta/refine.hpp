#pragma once

#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "insta/corpus.hpp"
#include "insta/errors.hpp"
#include "insta/placeholders.hpp"

namespace insta {

// Placeholder names that denote answer options. Plain patterns are globs in
// which only '*' and '?' are special (brackets are literal, so "choices[*]"
// matches "choices[0]"); a "re:" prefix selects an ECMAScript regex that
// must match the whole name.
class NamePattern {
 public:
  explicit NamePattern(std::string pattern) : source_(std::move(pattern)) {
    if (source_.rfind("re:", 0) == 0) {
      try {
        regex_.emplace(source_.substr(3), std::regex::ECMAScript);
      } catch (const std::regex_error& e) {
        throw ConfigError("bad candidate pattern '" + source_ + "': " + e.what());
      }
    }
  }

  const std::string& source() const { return source_; }

  bool matches(std::string_view name) const {
    if (regex_) return std::regex_match(name.begin(), name.end(), *regex_);
    return glob(source_, name);
  }

 private:
  static bool glob(std::string_view pat, std::string_view s) {
    std::size_t p = 0, i = 0, star = std::string_view::npos, mark = 0;
    while (i < s.size()) {
      if (p < pat.size() && (pat[p] == '?' || pat[p] == s[i])) {
        ++p;
        ++i;
      } else if (p < pat.size() && pat[p] == '*') {
        star = p++;
        mark = i;
      } else if (star != std::string_view::npos) {
        p = star + 1;
        i = ++mark;
      } else {
        return false;
      }
    }
    while (p < pat.size() && pat[p] == '*') ++p;
    return p == pat.size();
  }

  std::string source_;
  std::optional<std::regex> regex_;
};

struct RefinementConfig {
  std::vector<NamePattern> candidate_name_patterns = default_patterns();
  bool enabled = true;

  static std::vector<NamePattern> default_patterns() {
    return {NamePattern("choices[*]"), NamePattern("answer_choices*"), NamePattern("options[*]")};
  }
};

inline constexpr std::string_view kTextPlaceholder = "{{text}}";
inline constexpr std::string_view kCandidatePlaceholder = "{{candidate}}";

inline PlaceholderKind classify_placeholder(const PlaceholderToken& tok, const RefinementConfig& cfg) {
  // Already-canonical names are fixed points, which makes refinement idempotent.
  if (tok.name == "candidate") return PlaceholderKind::candidate;
  if (tok.name == "text") return PlaceholderKind::text;
  for (const auto& p : cfg.candidate_name_patterns) {
    if (p.matches(tok.name)) return PlaceholderKind::candidate;
  }
  return PlaceholderKind::text;
}

struct Replacement {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::string from;
  std::string to;
};

struct RefinedText {
  std::string text;
  std::vector<Replacement> replacements;
  std::vector<std::string> warnings;
};

inline RefinedText refine_text(std::string_view raw, const RefinementConfig& cfg) {
  RefinedText out;
  if (!cfg.enabled) {
    out.text = std::string(raw);
    return out;
  }
  auto tokens = parse_placeholders(raw);
  for (auto pos : find_control_blocks(raw)) {
    out.warnings.push_back("control block at byte " + std::to_string(pos) + " passed through verbatim");
  }
  out.text.reserve(raw.size());
  std::size_t cursor = 0;
  for (auto& tok : tokens) {
    tok.kind = classify_placeholder(tok, cfg);
    const auto to = tok.kind == PlaceholderKind::candidate ? kCandidatePlaceholder : kTextPlaceholder;
    out.text.append(raw.substr(cursor, tok.begin - cursor));
    out.text.append(to);
    const auto from = raw.substr(tok.begin, tok.end - tok.begin);
    if (from != to) out.replacements.push_back({tok.begin, tok.end, std::string(from), std::string(to)});
    cursor = tok.end;
  }
  out.text.append(raw.substr(cursor));
  return out;
}

inline Instruction refine_instruction(Instruction instr, const RefinementConfig& cfg) {
  instr.refined_text = refine_text(instr.text, cfg).text;
  return instr;
}

struct RefineOutcome {
  MetaDataset corpus;
  nlohmann::json report;
};

// Refines original and augmented instructions; excluded ones are left as is.
inline RefineOutcome refine_corpus(const MetaDataset& ds, const RefinementConfig& cfg) {
  std::vector<Task> tasks = ds.tasks();
  nlohmann::json entries = nlohmann::json::array();
  std::size_t replaced = 0;
  for (auto& task : tasks) {
    for (auto& in : task.instructions) {
      if (in.role == InstructionRole::excluded) continue;
      auto r = refine_text(in.text, cfg);
      in.refined_text = r.text;
      nlohmann::json reps = nlohmann::json::array();
      for (const auto& rep : r.replacements) {
        reps.push_back({{"begin", rep.begin}, {"end", rep.end}, {"from", rep.from}, {"to", rep.to}});
      }
      replaced += r.replacements.size();
      entries.push_back({{"task_id", task.id},
                         {"instruction_id", in.id},
                         {"replacements", std::move(reps)},
                         {"warnings", r.warnings}});
    }
  }
  nlohmann::json report{{"enabled", cfg.enabled}, {"total_replacements", replaced}, {"instructions", entries}};
  nlohmann::json pats = nlohmann::json::array();
  for (const auto& p : cfg.candidate_name_patterns) pats.push_back(p.source());
  report["candidate_name_patterns"] = pats;
  return {MetaDataset::build(ds.name(), std::move(tasks), ds.base_dir()), std::move(report)};
}

}  // namespace insta
