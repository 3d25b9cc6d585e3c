#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "protogap/model.hpp"

namespace protogap {

/// Flat token stream. On disk: u32 little-endian ids, plus a JSON sidecar
/// at `<path>.json` with at least {vocab_size, source}.
struct TokenCorpus {
  std::vector<TokenId> tokens;
  std::string source;
  std::size_t vocab_size = 0;

  /// Throws SpecError if any id >= vocab_size.
  void validate() const;
};

void save_corpus(const TokenCorpus& corpus, const std::filesystem::path& path);
TokenCorpus load_corpus(const std::filesystem::path& path);
std::filesystem::path sidecar_path(const std::filesystem::path& corpus_path);

/// The prompt set over which swap distances are averaged.
struct PromptSet {
  std::vector<std::vector<TokenId>> prompts;
  std::size_t nominal_length = 0;
  std::string provenance;

  /// Nonempty, every prompt at least two tokens.
  void validate() const;
  std::size_t size() const { return prompts.size(); }
};

/// Consecutive non-overlapping chunks of `length` tokens, at most `count`.
PromptSet prompts_from_corpus(const TokenCorpus& corpus, std::size_t length, std::size_t count);

/// JSON prompt file: {"provenance": "...", "prompts": [[ids...], ...]}.
PromptSet load_prompt_json(const std::filesystem::path& path);
void save_prompt_json(const PromptSet& prompts, const std::filesystem::path& path);

}  // namespace protogap
