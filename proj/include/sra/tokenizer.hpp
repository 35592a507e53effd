#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace sra {

// Two deliberately different segmentation schemes so that the same text is
// carved into incompatible token boundaries by two models.
enum class TokenizerScheme {
  PairMerge,  // iterative most-frequent-pair merges over the raw char stream
  Lexicon,    // greedy longest match against a learned substring lexicon
};

std::string scheme_name(TokenizerScheme scheme);
TokenizerScheme scheme_from_name(const std::string& name);

// Token ids plus, per token, the 1-based count of source chars consumed up to
// and including that token. Special tokens carry offset 0 so downstream code
// can recognize and skip them without consulting the vocabulary.
struct Encoded {
  std::vector<int> ids;
  std::vector<int> offsets;
};

// A token string shared by two tokenizers, with its id in each.
struct SharedToken {
  std::string text;
  int id_a;
  int id_b;
};

class ToyTokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;

  // Trains on the corpus until `vocab_size` entries exist (specials and the
  // single-char alphabet included) or no candidate occurs at least twice.
  // `seed` only affects Lexicon tie-breaking among equal-score candidates.
  static ToyTokenizer train(TokenizerScheme scheme, const std::vector<std::string>& corpus,
                            int vocab_size, uint64_t seed = 0);

  Encoded encode_with_offsets(const std::string& text, bool add_specials = true) const;
  std::string decode(const std::vector<int>& ids) const;

  TokenizerScheme scheme() const { return scheme_; }
  int vocab_size() const { return static_cast<int>(id_to_token_.size()); }
  const std::string& token_string(int id) const;
  int token_id(const std::string& text) const;  // -1 when absent

  void save(const std::string& path) const;
  static ToyTokenizer load(const std::string& path);

 private:
  TokenizerScheme scheme_ = TokenizerScheme::PairMerge;
  std::vector<std::string> id_to_token_;
  std::map<std::string, int> token_to_id_;
  // PairMerge: learned merges in application order. Lexicon: multi-char
  // entries in selection order (the encoder only needs the set).
  std::vector<std::pair<std::string, std::string>> merges_;
  std::set<std::string> lexicon_;
  int max_lexicon_len_ = 0;

  int add_token(const std::string& text);
  std::vector<std::string> segment(const std::string& text) const;
};

// Token strings present in both vocabularies, sorted by text.
std::vector<SharedToken> shared_vocabulary(const ToyTokenizer& a, const ToyTokenizer& b);

}  // namespace sra
