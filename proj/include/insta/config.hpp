#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <toml.hpp>

#include "insta/align.hpp"
#include "insta/errors.hpp"
#include "insta/mixture.hpp"
#include "insta/refine.hpp"
#include "insta/select.hpp"

namespace insta {

struct BackendSettings {
  std::string spec = "ref";  // ref | ref:<dim> | remote:<url>
  std::size_t dim = 1024;
  std::string model;
  std::int64_t timeout_ms = 10000;
  std::size_t batch_size = 32;
};

struct SelectSettings {
  std::optional<std::string> target;
  std::size_t k = 5;
  std::string method = "insta";
  std::size_t n = 32;
  std::uint64_t seed = 0;
  bool use_refined = false;
  std::string aggregate = "max";
  std::optional<std::string> head;
};

struct MixtureSettings {
  std::optional<std::string> selection;
  std::size_t cap = 50000;
  std::uint64_t seed = 13;
  std::string render = "none";
};

// Everything a pipeline run can be configured with. Precedence is
// command-line flag > config file > the defaults below.
struct PipelineConfig {
  std::optional<std::string> corpus;
  bool refine_enabled = true;
  std::vector<std::string> candidate_name_patterns{"choices[*]", "answer_choices*", "options[*]"};
  BackendSettings backend;
  TrainConfig train;
  SelectSettings select;
  MixtureSettings mixture;
  std::optional<std::string> output_dir;
  std::size_t jobs = 1;

  RefinementConfig refinement() const {
    RefinementConfig rc;
    rc.enabled = refine_enabled;
    rc.candidate_name_patterns.clear();
    for (const auto& p : candidate_name_patterns) rc.candidate_name_patterns.emplace_back(p);
    return rc;
  }

  void validate() const {
    refinement();  // compiles patterns
    train.validate();
    if (select.k == 0) throw ConfigError("select.k must be at least 1");
    if (select.n == 0) throw ConfigError("select.n must be at least 1");
    parse_method(select.method);
    if (select.aggregate != "max" && select.aggregate != "mean") throw ConfigError("select.aggregate must be max|mean");
    if (mixture.cap == 0) throw ConfigError("mixture.cap must be positive");
    parse_prompt_style(mixture.render);
    if (backend.batch_size == 0) throw ConfigError("backend.batch_size must be positive");
    if (backend.timeout_ms <= 0) throw ConfigError("backend.timeout_ms must be positive");
    if (jobs == 0) throw ConfigError("jobs must be at least 1");
  }
};

namespace detail {

class TomlReader {
 public:
  TomlReader(const toml::table& root, std::string file) : root_(root), file_(std::move(file)) {}

  const toml::table* section(std::string_view name, std::set<std::string> known) {
    sections_.insert(std::string(name));
    const auto* node = root_.get(name);
    if (!node) return nullptr;
    const auto* tbl = node->as_table();
    if (!tbl) throw ConfigError(file_ + ": [" + std::string(name) + "] must be a table");
    for (const auto& [k, v] : *tbl) {
      if (!known.count(std::string(k.str()))) {
        throw ConfigError(file_ + ": unknown key '" + std::string(name) + "." + std::string(k.str()) + "'");
      }
    }
    return tbl;
  }

  void check_top_level() const {
    for (const auto& [k, v] : root_) {
      if (!sections_.count(std::string(k.str()))) throw ConfigError(file_ + ": unknown section '" + std::string(k.str()) + "'");
    }
  }

  template <typename T>
  void get(const toml::table* tbl, std::string_view key, T& out) const {
    if (!tbl) return;
    const auto* node = tbl->get(key);
    if (!node) return;
    if constexpr (std::is_same_v<T, bool>) {
      auto v = node->value<bool>();
      if (!v || !node->is_boolean()) throw bad(key, "boolean");
      out = *v;
    } else if constexpr (std::is_same_v<T, std::string> || std::is_same_v<T, std::optional<std::string>>) {
      if (!node->is_string()) throw bad(key, "string");
      out = *node->value<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!node->is_number()) throw bad(key, "number");
      out = *node->value<double>();
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      const auto* arr = node->as_array();
      if (!arr) throw bad(key, "array of strings");
      out.clear();
      for (const auto& el : *arr) {
        if (!el.is_string()) throw bad(key, "array of strings");
        out.push_back(*el.value<std::string>());
      }
    } else if constexpr (std::is_same_v<T, std::optional<std::size_t>>) {
      std::size_t v = 0;
      get(tbl, key, v);
      out = v;
    } else if constexpr (std::is_same_v<T, std::optional<std::filesystem::path>>) {
      if (!node->is_string()) throw bad(key, "string");
      out = std::filesystem::path(*node->value<std::string>());
    } else {
      static_assert(std::is_integral_v<T>);
      if (!node->is_integer()) throw bad(key, "integer");
      const auto v = *node->value<std::int64_t>();
      if constexpr (std::is_unsigned_v<T>) {
        if (v < 0) throw bad(key, "non-negative integer");
      }
      out = static_cast<T>(v);
    }
  }

 private:
  ConfigError bad(std::string_view key, const char* expected) const {
    return ConfigError(file_ + ": key '" + std::string(key) + "' must be a " + expected);
  }

  const toml::table& root_;
  std::string file_;
  std::set<std::string> sections_;
};

}  // namespace detail

// Applies a TOML file on top of cfg. Unknown sections or keys are errors.
inline void apply_config_file(PipelineConfig& cfg, const std::filesystem::path& path) {
  toml::table root;
  try {
    root = toml::parse_file(path.string());
  } catch (const toml::parse_error& e) {
    throw ConfigError(path.string() + ": " + std::string(e.description()));
  }
  detail::TomlReader r(root, path.string());
  if (auto* t = r.section("corpus", {"path"})) r.get(t, "path", cfg.corpus);
  if (auto* t = r.section("refine", {"enabled", "candidate_name_patterns"})) {
    r.get(t, "enabled", cfg.refine_enabled);
    r.get(t, "candidate_name_patterns", cfg.candidate_name_patterns);
  }
  if (auto* t = r.section("backend", {"spec", "dim", "model", "timeout_ms", "batch_size"})) {
    r.get(t, "spec", cfg.backend.spec);
    r.get(t, "dim", cfg.backend.dim);
    r.get(t, "model", cfg.backend.model);
    r.get(t, "timeout_ms", cfg.backend.timeout_ms);
    r.get(t, "batch_size", cfg.backend.batch_size);
  }
  if (auto* t = r.section("train", {"lr", "epochs", "batch_size", "seed", "val_fraction", "aux", "n_pos", "n_neg",
                                    "use_refined", "dim_out"})) {
    r.get(t, "lr", cfg.train.learning_rate);
    r.get(t, "epochs", cfg.train.epochs);
    r.get(t, "batch_size", cfg.train.batch_size);
    r.get(t, "seed", cfg.train.seed);
    r.get(t, "val_fraction", cfg.train.val_fraction);
    r.get(t, "aux", cfg.train.auxiliary_pairs_path);
    r.get(t, "n_pos", cfg.train.n_pos);
    r.get(t, "n_neg", cfg.train.n_neg);
    r.get(t, "use_refined", cfg.train.use_refined);
    r.get(t, "dim_out", cfg.train.dim_out);
  }
  if (auto* t = r.section("select", {"target", "k", "method", "n", "seed", "use_refined", "aggregate", "head"})) {
    r.get(t, "target", cfg.select.target);
    r.get(t, "k", cfg.select.k);
    r.get(t, "method", cfg.select.method);
    r.get(t, "n", cfg.select.n);
    r.get(t, "seed", cfg.select.seed);
    r.get(t, "use_refined", cfg.select.use_refined);
    r.get(t, "aggregate", cfg.select.aggregate);
    r.get(t, "head", cfg.select.head);
  }
  if (auto* t = r.section("mixture", {"selection", "cap", "seed", "render"})) {
    r.get(t, "selection", cfg.mixture.selection);
    r.get(t, "cap", cfg.mixture.cap);
    r.get(t, "seed", cfg.mixture.seed);
    r.get(t, "render", cfg.mixture.render);
  }
  if (auto* t = r.section("output", {"dir"})) r.get(t, "dir", cfg.output_dir);
  if (auto* t = r.section("run", {"jobs"})) r.get(t, "jobs", cfg.jobs);
  r.check_top_level();
}

}  // namespace insta
