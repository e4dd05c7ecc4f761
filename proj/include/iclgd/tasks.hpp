#pragma once

// Synthetic in-context classification episodes. Each episode samples a fresh
// mapping from input patterns to labels, so the label of a query is only
// inferable from the demonstrations in context -- the mechanism that forces a
// model to use the prompt rather than memorize labels.
//
// Vocabulary layout: input symbols [0, n_input), label symbols
// [n_input, n_input + C), then the arrow separator and the pair delimiter.

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "iclgd/prng.hpp"

namespace iclgd {

struct TaskConfig {
  std::size_t n_input_symbols = 16;
  std::size_t n_labels = 4;
  std::size_t pattern_length = 1;
  std::size_t k_demonstrations = 8;

  std::size_t vocab_size() const { return n_input_symbols + n_labels + 2; }
  int label_id(std::size_t c) const {
    return static_cast<int>(n_input_symbols + c);
  }
  int arrow_id() const { return static_cast<int>(n_input_symbols + n_labels); }
  int delim_id() const {
    return static_cast<int>(n_input_symbols + n_labels + 1);
  }

  void validate() const {
    if (n_input_symbols < 1 || n_labels < 2 || pattern_length < 1) {
      throw std::invalid_argument("TaskConfig: invalid sizes");
    }
  }

  // Token count of the ICL layout: k demos of (pattern, arrow, label, delim)
  // followed by (query pattern, arrow).
  std::size_t icl_prompt_len() const {
    return k_demonstrations * (pattern_length + 3) + pattern_length + 1;
  }
};

struct Demonstration {
  std::vector<int> pattern;  // input symbol ids
  int label = -1;            // label token id
};

struct Episode {
  std::vector<Demonstration> demos;
  std::vector<int> query;
  int gold = -1;             // label token id
  std::uint64_t mapping_seed = 0;
};

namespace detail {
inline std::uint64_t pattern_key(const std::vector<int>& pattern) {
  std::uint64_t h = 1469598103934665603ull;
  for (int s : pattern) {
    h ^= static_cast<std::uint64_t>(s);
    h *= 1099511628211ull;
  }
  return h;
}
}  // namespace detail

// Label assigned to a pattern class under this episode's mapping: uniform over
// labels, keyed by (mapping seed, pattern), independent across episodes.
inline int episode_label(const TaskConfig& cfg, std::uint64_t mapping_seed,
                         const std::vector<int>& pattern) {
  Prng s = Prng(mapping_seed).split(detail::pattern_key(pattern));
  return cfg.label_id(s.below(cfg.n_labels));
}

// Sample one episode: fresh label mapping, k demonstrations with the query's
// class guaranteed present. k = 0 is a deliberate degenerate mode (no
// demonstrations, label uninferable) used for baseline measurements.
inline Episode sample_episode(const TaskConfig& cfg, Prng& prng) {
  cfg.validate();
  Episode e;
  e.mapping_seed = prng.next_u64();
  auto sample_pattern = [&] {
    std::vector<int> p(cfg.pattern_length);
    for (auto& s : p) s = static_cast<int>(prng.below(cfg.n_input_symbols));
    return p;
  };
  e.query = sample_pattern();
  e.gold = episode_label(cfg, e.mapping_seed, e.query);
  if (cfg.k_demonstrations == 0) return e;
  e.demos.resize(cfg.k_demonstrations);
  bool covered = false;
  for (auto& d : e.demos) {
    d.pattern = sample_pattern();
    d.label = episode_label(cfg, e.mapping_seed, d.pattern);
    if (d.pattern == e.query) covered = true;
  }
  if (!covered) {
    auto& d = e.demos[prng.below(cfg.k_demonstrations)];
    d.pattern = e.query;
    d.label = e.gold;
  }
  return e;
}

inline std::vector<int> format_zsl_prompt(const TaskConfig& cfg,
                                          const Episode& e) {
  std::vector<int> t = e.query;
  t.push_back(cfg.arrow_id());
  return t;
}

// d1 -> y1 ; d2 -> y2 ; ... ; query ->   (the model predicts the next token
// at the trailing arrow).
inline std::vector<int> format_icl_prompt(const TaskConfig& cfg,
                                          const Episode& e,
                                          std::size_t max_seq_len = 0) {
  std::vector<int> t;
  for (const auto& d : e.demos) {
    t.insert(t.end(), d.pattern.begin(), d.pattern.end());
    t.push_back(cfg.arrow_id());
    t.push_back(d.label);
    t.push_back(cfg.delim_id());
  }
  t.insert(t.end(), e.query.begin(), e.query.end());
  t.push_back(cfg.arrow_id());
  if (max_seq_len != 0 && t.size() > max_seq_len) {
    throw std::invalid_argument("format_icl_prompt: prompt exceeds max_seq_len");
  }
  return t;
}

// Position range of the bare test prompt inside the ICL prompt.
inline std::pair<std::size_t, std::size_t> icl_test_span(
    const TaskConfig& cfg, const Episode& e) {
  std::size_t span = e.query.size() + 1;
  std::size_t total = e.demos.size() * (cfg.pattern_length + 3) + span;
  return {total - span, span};
}

// A single demonstration formatted for finetuning: pattern -> label.
inline std::vector<int> format_demo_prompt(const TaskConfig& cfg,
                                           const Demonstration& d) {
  std::vector<int> t = d.pattern;
  t.push_back(cfg.arrow_id());
  t.push_back(d.label);
  return t;
}

// Inverse of format_icl_prompt for symbolic ids (mapping seed not recovered).
inline Episode detokenize_icl_prompt(const TaskConfig& cfg,
                                     const std::vector<int>& tokens) {
  Episode e;
  std::size_t i = 0;
  std::size_t unit = cfg.pattern_length + 3;
  while (tokens.size() - i > cfg.pattern_length + 1) {
    Demonstration d;
    d.pattern.assign(tokens.begin() + i, tokens.begin() + i + cfg.pattern_length);
    if (tokens[i + cfg.pattern_length] != cfg.arrow_id() ||
        tokens[i + unit - 1] != cfg.delim_id()) {
      throw std::invalid_argument("detokenize: malformed demonstration");
    }
    d.label = tokens[i + cfg.pattern_length + 1];
    e.demos.push_back(std::move(d));
    i += unit;
  }
  e.query.assign(tokens.begin() + i, tokens.end() - 1);
  if (tokens.back() != cfg.arrow_id()) {
    throw std::invalid_argument("detokenize: missing trailing arrow");
  }
  return e;
}

// Generic JSONL loader. Each line is either
//   {"input": [ids], "label": id}                              (no demos) or
//   {"demos": [{"input": [...], "label": id}, ...],
//    "query": [...], "gold": id}.
inline std::vector<Episode> load_jsonl(const std::string& path,
                                       const TaskConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_jsonl: cannot open " + path);
  std::vector<Episode> out;
  std::string line;
  std::size_t lineno = 0;
  auto bail = [&](const std::string& msg) {
    throw std::runtime_error("load_jsonl: line " + std::to_string(lineno) +
                             ": " + msg);
  };
  auto check_symbol = [&](int id) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.n_input_symbols) {
      bail("input symbol id " + std::to_string(id) + " out of range");
    }
  };
  auto check_label = [&](int id) {
    if (id < static_cast<int>(cfg.n_input_symbols) ||
        id >= cfg.arrow_id()) {
      bail("label id " + std::to_string(id) + " out of range");
    }
  };
  auto parse_pattern = [&](const nlohmann::json& j) {
    if (!j.is_array()) bail("pattern must be an array of ids");
    std::vector<int> p;
    for (const auto& v : j) {
      if (!v.is_number_integer()) bail("pattern entries must be integers");
      p.push_back(v.get<int>());
      check_symbol(p.back());
    }
    return p;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) bail("malformed JSON");
    Episode e;
    if (j.contains("input")) {
      e.query = parse_pattern(j.at("input"));
      if (!j.contains("label")) bail("missing \"label\"");
      e.gold = j.at("label").get<int>();
      check_label(e.gold);
    } else if (j.contains("demos")) {
      for (const auto& dj : j.at("demos")) {
        Demonstration d;
        d.pattern = parse_pattern(dj.at("input"));
        d.label = dj.at("label").get<int>();
        check_label(d.label);
        e.demos.push_back(std::move(d));
      }
      if (!j.contains("query") || !j.contains("gold")) {
        bail("missing \"query\" or \"gold\"");
      }
      e.query = parse_pattern(j.at("query"));
      e.gold = j.at("gold").get<int>();
      check_label(e.gold);
    } else {
      bail("expected \"input\" or \"demos\"");
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace iclgd
