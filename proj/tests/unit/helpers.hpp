#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "protogap/corpus.hpp"
#include "protogap/fixtures.hpp"

namespace testutil {

inline protogap::PromptSet random_prompts(std::size_t count, std::size_t length, std::size_t vocab,
                                          std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<protogap::TokenId> tok(0, static_cast<protogap::TokenId>(vocab - 1));
  protogap::PromptSet ps;
  ps.nominal_length = length;
  ps.provenance = "test";
  for (std::size_t p = 0; p < count; ++p) {
    std::vector<protogap::TokenId> seq(length);
    for (auto& t : seq) t = tok(rng);
    ps.prompts.push_back(std::move(seq));
  }
  return ps;
}

inline double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(double(a[k]) - double(b[k])));
  return m;
}

inline std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("protogap_test_" + name)).string();
}

}  // namespace testutil
