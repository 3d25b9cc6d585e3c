#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "protogap/checkpoint.hpp"
#include "protogap/corpus.hpp"
#include "protogap/error.hpp"
#include "protogap/fixtures.hpp"
#include "protogap/report.hpp"

using namespace protogap;

int main(int argc, char** argv) {
  CLI::App app{"protogap-fixture: synthetic checkpoints, corpora and golden logits"};
  app.require_subcommand(1);

  std::string kind = "random";
  std::string out;
  fixtures::FixtureOptions fo;
  std::string pe = "absolute";
  auto* ckpt = app.add_subcommand("checkpoint", "write a fixture checkpoint");
  ckpt->add_option("--kind", kind, "golden | identical | uniform | blind | random");
  ckpt->add_option("--out", out)->required();
  ckpt->add_option("--layers", fo.n_layers);
  ckpt->add_option("--d-model", fo.d_model);
  ckpt->add_option("--heads", fo.n_heads);
  ckpt->add_option("--kv-heads", fo.n_kv_heads);
  ckpt->add_option("--d-ff", fo.d_ff);
  ckpt->add_option("--vocab", fo.vocab_size);
  ckpt->add_option("--max-position", fo.max_position);
  ckpt->add_option("--pe", pe, "absolute | rotary | alibi");
  ckpt->add_option("--scale", fo.weight_scale);
  ckpt->add_option("--seed", fo.seed);

  std::size_t length = 4096;
  std::size_t vocab = 16;
  std::uint64_t corpus_seed = 7;
  auto* corpus = app.add_subcommand("corpus", "write a random token corpus");
  corpus->add_option("--out", out)->required();
  corpus->add_option("--length", length);
  corpus->add_option("--vocab", vocab);
  corpus->add_option("--seed", corpus_seed);

  std::string ckpt_path;
  std::size_t n_seq = 2;
  std::size_t seq_len = 8;
  auto* golden = app.add_subcommand("golden", "write golden logits for a checkpoint");
  golden->add_option("--checkpoint", ckpt_path)->required();
  golden->add_option("--out", out)->required();
  golden->add_option("--sequences", n_seq);
  golden->add_option("--length", seq_len);
  golden->add_option("--seed", corpus_seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (ckpt->parsed()) {
      Checkpoint ck;
      if (kind == "golden") {
        ck = fixtures::golden_fixture();
      } else if (kind == "identical") {
        ck = fixtures::identical_layers_fixture(fo.n_layers);
      } else if (kind == "uniform") {
        ck = fixtures::uniform_logits_fixture(fo.vocab_size, fo.n_layers);
      } else if (kind == "blind") {
        ck = fixtures::blind_attention_fixture(fo.n_layers);
      } else if (kind == "random") {
        if (pe == "rotary") {
          fo.pe_type = PeType::rotary;
          fo.norm_kind = NormKind::rmsnorm;
          fo.activation = Activation::silu;
          fo.biases = false;
        } else if (pe == "alibi") {
          fo.pe_type = PeType::alibi;
        } else if (pe != "absolute") {
          std::cerr << "unknown --pe " << pe << "\n";
          return 2;
        }
        ck = fixtures::random_checkpoint(fo);
      } else {
        std::cerr << "unknown --kind " << kind << "\n";
        return 2;
      }
      save_checkpoint(ck, out);
      std::cout << out << " " << file_hash(out) << "\n";
    } else if (corpus->parsed()) {
      save_corpus(fixtures::random_corpus(length, vocab, corpus_seed), out);
      std::cout << out << " " << length << " tokens\n";
    } else if (golden->parsed()) {
      const Checkpoint ck = load_checkpoint(ckpt_path);
      const TokenCorpus c = fixtures::random_corpus(n_seq * seq_len, ck.config.vocab_size, corpus_seed);
      std::vector<std::vector<TokenId>> seqs;
      for (std::size_t s = 0; s < n_seq; ++s) {
        seqs.emplace_back(c.tokens.begin() + s * seq_len, c.tokens.begin() + (s + 1) * seq_len);
      }
      save_golden(make_golden(ck, seqs), out);
      std::cout << out << " " << n_seq << " sequences\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
