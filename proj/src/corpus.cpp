#include "protogap/corpus.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "protogap/error.hpp"

namespace protogap {

std::filesystem::path sidecar_path(const std::filesystem::path& corpus_path) {
  return std::filesystem::path(corpus_path.string() + ".json");
}

void TokenCorpus::validate() const {
  if (vocab_size == 0) throw SpecError("corpus vocab_size must be positive");
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    if (tokens[k] >= vocab_size) {
      throw SpecError("corpus token " + std::to_string(k) + " has id " + std::to_string(tokens[k]) +
                      " >= vocab_size " + std::to_string(vocab_size));
    }
  }
}

void save_corpus(const TokenCorpus& corpus, const std::filesystem::path& path) {
  corpus.validate();
  {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(corpus.tokens.data()),
            static_cast<std::streamsize>(corpus.tokens.size() * sizeof(TokenId)));
  }
  nlohmann::ordered_json side;
  side["vocab_size"] = corpus.vocab_size;
  side["source"] = corpus.source;
  side["token_count"] = corpus.tokens.size();
  std::ofstream s(sidecar_path(path));
  if (!s) throw IoError("cannot write sidecar for '" + path.string() + "'");
  s << side.dump(2) << "\n";
}

TokenCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open corpus '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string bytes = ss.str();
  if (bytes.size() % sizeof(TokenId) != 0) throw ParseError("corpus byte length is not a multiple of 4");

  TokenCorpus c;
  c.tokens.resize(bytes.size() / sizeof(TokenId));
  std::memcpy(c.tokens.data(), bytes.data(), bytes.size());

  std::ifstream s(sidecar_path(path));
  if (!s) throw IoError("missing sidecar '" + sidecar_path(path).string() + "'");
  try {
    const auto side = nlohmann::json::parse(s);
    c.vocab_size = side.at("vocab_size").get<std::size_t>();
    c.source = side.value("source", std::string{});
    if (side.contains("token_count") && side["token_count"].get<std::size_t>() != c.tokens.size()) {
      throw ParseError("sidecar token_count disagrees with the corpus length");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad corpus sidecar: ") + e.what());
  }
  c.validate();
  return c;
}

void PromptSet::validate() const {
  if (prompts.empty()) throw SpecError("prompt set is empty");
  for (std::size_t k = 0; k < prompts.size(); ++k) {
    if (prompts[k].size() < 2) throw SpecError("prompt " + std::to_string(k) + " has fewer than two tokens");
  }
}

PromptSet prompts_from_corpus(const TokenCorpus& corpus, std::size_t length, std::size_t count) {
  if (length < 2) throw SpecError("prompt length must be at least 2");
  PromptSet ps;
  ps.nominal_length = length;
  ps.provenance = corpus.source + " chunks of " + std::to_string(length);
  for (std::size_t start = 0; start + length <= corpus.tokens.size() && ps.prompts.size() < count; start += length) {
    ps.prompts.emplace_back(corpus.tokens.begin() + start, corpus.tokens.begin() + start + length);
  }
  ps.validate();
  return ps;
}

PromptSet load_prompt_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open prompt file '" + path.string() + "'");
  PromptSet ps;
  try {
    const auto j = nlohmann::json::parse(f);
    ps.provenance = j.value("provenance", path.filename().string());
    ps.prompts = j.at("prompts").get<std::vector<std::vector<TokenId>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad prompt file: ") + e.what());
  }
  for (const auto& p : ps.prompts) ps.nominal_length = std::max(ps.nominal_length, p.size());
  ps.validate();
  return ps;
}

void save_prompt_json(const PromptSet& prompts, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["provenance"] = prompts.provenance;
  j["prompts"] = prompts.prompts;
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << j.dump() << "\n";
}

}  // namespace protogap
