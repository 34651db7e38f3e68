#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "insta/corpus.hpp"
#include "insta/errors.hpp"
#include "insta/placeholders.hpp"
#include "insta/rng.hpp"
#include "insta/select.hpp"

namespace insta {

enum class PromptStyle { none, def, def_pos2 };

inline std::string_view to_string(PromptStyle s) {
  switch (s) {
    case PromptStyle::none: return "none";
    case PromptStyle::def: return "def";
    case PromptStyle::def_pos2: return "def_pos2";
  }
  return "?";
}

inline PromptStyle parse_prompt_style(std::string_view s) {
  if (s == "none") return PromptStyle::none;
  if (s == "def") return PromptStyle::def;
  if (s == "def_pos2") return PromptStyle::def_pos2;
  throw ConfigError("unknown rendering '" + std::string(s) + "' (none|def|def_pos2)");
}

// Prompt layouts:
//
//   def:      Definition: <definition>\n\n
//             Now complete the following example-\nInput: <input>\nOutput:
//
//   def_pos2: Definition: <definition>\n\n
//             Positive Example 1-\nInput: <in1>\nOutput: <out1>\n\n
//             Positive Example 2-\nInput: <in2>\nOutput: <out2>\n\n
//             Now complete the following example-\nInput: <input>\nOutput:
//
// The definition is the raw instruction with placeholders filled from the
// instance; the input is the instance's "input" field (empty when absent).
inline std::string render_prompt(const Instruction& instr, const Instance& inst, PromptStyle style,
                                 const std::vector<TaskExample>& positive_examples) {
  if (style == PromptStyle::none) throw ConfigError("render_prompt needs a prompt style");
  if (style == PromptStyle::def_pos2 && positive_examples.size() < 2) {
    throw MissingExamplesError("def_pos2 needs two positive examples for task " + instr.task_id + ", have " +
                               std::to_string(positive_examples.size()));
  }
  const std::string definition = substitute(instr.text, inst.fields);
  const auto it = inst.fields.find("input");
  const std::string_view input = it == inst.fields.end() ? std::string_view{} : std::string_view(it->second);

  std::string out = "Definition: " + definition + "\n\n";
  if (style == PromptStyle::def_pos2) {
    for (std::size_t e = 0; e < 2; ++e) {
      out += "Positive Example " + std::to_string(e + 1) + "-\n";
      out += "Input: " + positive_examples[e].input + "\n";
      out += "Output: " + positive_examples[e].output + "\n\n";
    }
  }
  out += "Now complete the following example-\nInput: ";
  out += input;
  out += "\nOutput:";
  return out;
}

struct MixtureRecord {
  std::string instance_id;
  std::optional<std::string> rendered_input;
  std::optional<std::string> target;
};

struct MixtureEntry {
  TaskId task;
  std::vector<MixtureRecord> records;
};

struct MixtureManifest {
  TaskId target;
  std::string method;
  std::size_t cap_per_task = 0;
  std::uint64_t seed = 0;
  PromptStyle rendering = PromptStyle::none;
  std::vector<MixtureEntry> entries;  // sorted by task id
  std::size_t total_instances = 0;
};

// Seeded per-task sampling without replacement, min(cap, instance_count)
// instances per selected task. Each task draws from its own stream derived
// from (seed, task id), so the sample of one task does not depend on which
// other tasks were selected.
inline MixtureManifest build_mixture(const SelectionResult& sel, const MetaDataset& ds, std::size_t cap_per_task,
                                     std::uint64_t seed, PromptStyle rendering = PromptStyle::none) {
  if (cap_per_task == 0) throw ConfigError("cap per task must be positive");
  MixtureManifest m;
  m.target = sel.target;
  m.method = sel.method;
  m.cap_per_task = cap_per_task;
  m.seed = seed;
  m.rendering = rendering;

  auto tasks = sel.task_ids();
  std::sort(tasks.begin(), tasks.end());
  tasks.erase(std::unique(tasks.begin(), tasks.end()), tasks.end());
  for (const auto& tid : tasks) {
    const Task& task = ds.task(tid);
    if (!task.instances_path) throw MissingInstancesError("selected task " + tid + " has no instances");
    const auto instances = ds.instances(task);
    Rng rng(derive_seed(seed, "mixture:" + tid));
    auto picked = rng.sample_indices(instances->size(), std::min(cap_per_task, instances->size()));
    std::sort(picked.begin(), picked.end());

    std::vector<const Instruction*> prompts;
    if (rendering != PromptStyle::none) {
      prompts = task.visible_instructions();
      if (prompts.empty()) throw MissingExamplesError("task " + tid + " has no instruction to render with");
    }
    Rng prompt_rng(derive_seed(seed, "render:" + tid));

    MixtureEntry entry{tid, {}};
    entry.records.reserve(picked.size());
    for (auto idx : picked) {
      const Instance& inst = (*instances)[idx];
      MixtureRecord rec{inst.id, std::nullopt, std::nullopt};
      if (rendering != PromptStyle::none) {
        const Instruction& instr = *prompts[prompt_rng.below(prompts.size())];
        rec.rendered_input = render_prompt(instr, inst, rendering, task.positive_examples);
      }
      if (auto it = inst.fields.find("output"); it != inst.fields.end()) rec.target = it->second;
      entry.records.push_back(std::move(rec));
    }
    m.total_instances += entry.records.size();
    m.entries.push_back(std::move(entry));
  }
  return m;
}

// JSON Lines: a header record, then one record per sampled instance.
inline std::string serialize_mixture(const MixtureManifest& m) {
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& e : m.entries) counts[e.task] = e.records.size();
  nlohmann::json header{{"type", "header"},
                        {"target", m.target},
                        {"method", m.method},
                        {"cap_per_task", m.cap_per_task},
                        {"seed", m.seed},
                        {"rendering", to_string(m.rendering)},
                        {"total_instances", m.total_instances},
                        {"counts", counts}};
  std::string out = header.dump() + "\n";
  for (const auto& e : m.entries) {
    for (const auto& r : e.records) {
      nlohmann::json j{{"type", "instance"}, {"task", e.task}, {"instance", r.instance_id}};
      if (r.rendered_input) j["rendered_input"] = *r.rendered_input;
      if (r.target) j["target"] = *r.target;
      out += j.dump();
      out += '\n';
    }
  }
  return out;
}

}  // namespace insta
