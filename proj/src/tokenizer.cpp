#include "sra/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "sra/rng.hpp"

namespace sra {

namespace {

constexpr const char* kSpecials[] = {"<pad>", "<bos>", "<eos>"};

// Left-to-right, non-overlapping replacement of the adjacent pair (l, r).
// Training and encoding share this routine so segmentations agree.
void apply_merge(std::vector<std::string>& toks, const std::string& l, const std::string& r) {
  size_t w = 0;
  for (size_t i = 0; i < toks.size();) {
    if (i + 1 < toks.size() && toks[i] == l && toks[i + 1] == r) {
      toks[w++] = l + r;
      i += 2;
    } else {
      if (w != i) {
        toks[w] = std::move(toks[i]);
      }
      ++w;
      ++i;
    }
  }
  toks.resize(w);
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\\':
        out += "\\\\";
        break;
      case '\t':
        out += "\\t";
        break;
      case '\n':
        out += "\\n";
        break;
      default:
        out += c;
    }
  }
  return out;
}

std::string unescape(const std::string& s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      ++i;
      switch (s[i]) {
        case '\\':
          out += '\\';
          break;
        case 't':
          out += '\t';
          break;
        case 'n':
          out += '\n';
          break;
        default:
          throw std::runtime_error("tokenizer file: bad escape sequence");
      }
    } else {
      out += s[i];
    }
  }
  return out;
}

}  // namespace

std::string scheme_name(TokenizerScheme scheme) {
  return scheme == TokenizerScheme::PairMerge ? "pair_merge" : "lexicon";
}

TokenizerScheme scheme_from_name(const std::string& name) {
  if (name == "pair_merge") {
    return TokenizerScheme::PairMerge;
  }
  if (name == "lexicon") {
    return TokenizerScheme::Lexicon;
  }
  throw std::invalid_argument("unknown tokenizer scheme '" + name + "'");
}

int ToyTokenizer::add_token(const std::string& text) {
  if (token_to_id_.count(text)) {
    throw std::invalid_argument("duplicate token '" + text + "'");
  }
  const int id = static_cast<int>(id_to_token_.size());
  id_to_token_.push_back(text);
  token_to_id_.emplace(text, id);
  return id;
}

ToyTokenizer ToyTokenizer::train(TokenizerScheme scheme, const std::vector<std::string>& corpus,
                                 int vocab_size, uint64_t seed) {
  if (corpus.empty()) {
    throw std::invalid_argument("train: empty corpus");
  }
  ToyTokenizer tok;
  tok.scheme_ = scheme;
  for (const char* s : kSpecials) {
    tok.add_token(s);
  }
  std::set<char> alphabet;
  for (const std::string& line : corpus) {
    for (char c : line) {
      alphabet.insert(c);
    }
  }
  for (char c : alphabet) {
    tok.add_token(std::string(1, c));
  }
  if (vocab_size < tok.vocab_size()) {
    throw std::invalid_argument("train: vocab_size " + std::to_string(vocab_size) +
                                " cannot cover specials plus a " +
                                std::to_string(alphabet.size()) + "-char alphabet");
  }

  if (scheme == TokenizerScheme::PairMerge) {
    std::vector<std::vector<std::string>> seqs;
    seqs.reserve(corpus.size());
    for (const std::string& line : corpus) {
      std::vector<std::string> chars;
      chars.reserve(line.size());
      for (char c : line) {
        chars.emplace_back(1, c);
      }
      seqs.push_back(std::move(chars));
    }
    while (tok.vocab_size() < vocab_size) {
      // map iteration is ordered, so with strict > the lexicographically
      // smallest pair wins among equal counts
      std::map<std::pair<std::string, std::string>, int64_t> counts;
      for (const auto& seq : seqs) {
        for (size_t i = 0; i + 1 < seq.size(); ++i) {
          ++counts[{seq[i], seq[i + 1]}];
        }
      }
      std::pair<std::string, std::string> best;
      int64_t best_count = 0;
      for (const auto& [pair, count] : counts) {
        if (count > best_count) {
          best = pair;
          best_count = count;
        }
      }
      if (best_count < 2) {
        break;
      }
      tok.add_token(best.first + best.second);
      tok.merges_.push_back(best);
      for (auto& seq : seqs) {
        apply_merge(seq, best.first, best.second);
      }
    }
  } else {
    std::map<std::string, int64_t> counts;
    for (const std::string& line : corpus) {
      for (size_t len = 2; len <= 6; ++len) {
        if (line.size() < len) {
          continue;
        }
        for (size_t i = 0; i + len <= line.size(); ++i) {
          ++counts[line.substr(i, len)];
        }
      }
    }
    struct Candidate {
      int64_t score;
      uint64_t tie;
      std::string text;
    };
    std::vector<Candidate> cands;
    for (const auto& [text, count] : counts) {
      if (count < 2) {
        continue;
      }
      const int64_t score = count * static_cast<int64_t>(text.size() - 1);
      cands.push_back({score, fnv1a64(text.data(), text.size()) ^ seed, text});
    }
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) {
        return a.score > b.score;
      }
      if (a.tie != b.tie) {
        return a.tie < b.tie;
      }
      return a.text < b.text;
    });
    for (const Candidate& c : cands) {
      if (tok.vocab_size() >= vocab_size) {
        break;
      }
      tok.add_token(c.text);
      tok.lexicon_.insert(c.text);
      tok.max_lexicon_len_ = std::max(tok.max_lexicon_len_, static_cast<int>(c.text.size()));
    }
  }
  return tok;
}

std::vector<std::string> ToyTokenizer::segment(const std::string& text) const {
  std::vector<std::string> toks;
  if (scheme_ == TokenizerScheme::PairMerge) {
    toks.reserve(text.size());
    for (char c : text) {
      toks.emplace_back(1, c);
    }
    for (const auto& [l, r] : merges_) {
      apply_merge(toks, l, r);
    }
  } else {
    size_t pos = 0;
    while (pos < text.size()) {
      size_t best_len = 1;
      const size_t cap = std::min<size_t>(max_lexicon_len_, text.size() - pos);
      for (size_t len = cap; len >= 2; --len) {
        if (lexicon_.count(text.substr(pos, len))) {
          best_len = len;
          break;
        }
      }
      toks.push_back(text.substr(pos, best_len));
      pos += best_len;
    }
  }
  return toks;
}

Encoded ToyTokenizer::encode_with_offsets(const std::string& text, bool add_specials) const {
  Encoded out;
  if (add_specials) {
    out.ids.push_back(kBos);
    out.offsets.push_back(0);
  }
  int consumed = 0;
  for (const std::string& t : segment(text)) {
    auto it = token_to_id_.find(t);
    if (it == token_to_id_.end()) {
      throw std::invalid_argument("encode: char '" + t + "' not in vocabulary");
    }
    consumed += static_cast<int>(t.size());
    out.ids.push_back(it->second);
    out.offsets.push_back(consumed);
  }
  if (add_specials) {
    out.ids.push_back(kEos);
    out.offsets.push_back(0);
  }
  return out;
}

std::string ToyTokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPad || id == kBos || id == kEos) {
      continue;
    }
    out += token_string(id);
  }
  return out;
}

const std::string& ToyTokenizer::token_string(int id) const {
  if (id < 0 || id >= vocab_size()) {
    throw std::invalid_argument("token id " + std::to_string(id) + " out of range");
  }
  return id_to_token_[id];
}

int ToyTokenizer::token_id(const std::string& text) const {
  auto it = token_to_id_.find(text);
  return it == token_to_id_.end() ? -1 : it->second;
}

void ToyTokenizer::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) {
    throw std::runtime_error("cannot open '" + path + "' for writing");
  }
  f << "sra-tok v1 " << scheme_name(scheme_) << "\n";
  f << vocab_size() << "\n";
  for (int id = 0; id < vocab_size(); ++id) {
    f << id << "\t" << escape(id_to_token_[id]) << "\n";
  }
  if (scheme_ == TokenizerScheme::PairMerge) {
    f << "RULES " << merges_.size() << "\n";
    for (const auto& [l, r] : merges_) {
      f << escape(l) << "\t" << escape(r) << "\n";
    }
  } else {
    f << "RULES " << lexicon_.size() << "\n";
    for (const std::string& t : lexicon_) {
      f << escape(t) << "\n";
    }
  }
  if (!f) {
    throw std::runtime_error("write to '" + path + "' failed");
  }
}

ToyTokenizer ToyTokenizer::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) {
    throw std::runtime_error("cannot open '" + path + "'");
  }
  std::string line;
  if (!std::getline(f, line)) {
    throw std::runtime_error("tokenizer file: empty");
  }
  std::istringstream header(line);
  std::string magic, version, scheme_str;
  header >> magic >> version >> scheme_str;
  if (magic != "sra-tok" || version != "v1") {
    throw std::runtime_error("tokenizer file: bad header '" + line + "'");
  }
  ToyTokenizer tok;
  tok.scheme_ = scheme_from_name(scheme_str);

  if (!std::getline(f, line)) {
    throw std::runtime_error("tokenizer file: missing vocab size");
  }
  const int n = std::stoi(line);
  for (int i = 0; i < n; ++i) {
    if (!std::getline(f, line)) {
      throw std::runtime_error("tokenizer file: truncated vocab");
    }
    const size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error("tokenizer file: bad vocab line '" + line + "'");
    }
    const int id = std::stoi(line.substr(0, tab));
    if (id != i) {
      throw std::runtime_error("tokenizer file: ids must be dense and ordered");
    }
    tok.add_token(unescape(line.substr(tab + 1)));
  }
  for (int i = 0; i < 3; ++i) {
    if (tok.id_to_token_[i] != kSpecials[i]) {
      throw std::runtime_error("tokenizer file: special tokens out of place");
    }
  }

  if (!std::getline(f, line)) {
    throw std::runtime_error("tokenizer file: missing rules header");
  }
  std::istringstream rules_header(line);
  std::string tag;
  int rule_count = 0;
  rules_header >> tag >> rule_count;
  if (tag != "RULES") {
    throw std::runtime_error("tokenizer file: expected RULES, got '" + line + "'");
  }
  for (int i = 0; i < rule_count; ++i) {
    if (!std::getline(f, line)) {
      throw std::runtime_error("tokenizer file: truncated rules");
    }
    if (tok.scheme_ == TokenizerScheme::PairMerge) {
      const size_t tab = line.find('\t');
      if (tab == std::string::npos) {
        throw std::runtime_error("tokenizer file: bad merge line '" + line + "'");
      }
      tok.merges_.emplace_back(unescape(line.substr(0, tab)), unescape(line.substr(tab + 1)));
    } else {
      const std::string t = unescape(line);
      tok.lexicon_.insert(t);
      tok.max_lexicon_len_ = std::max(tok.max_lexicon_len_, static_cast<int>(t.size()));
    }
  }
  return tok;
}

std::vector<SharedToken> shared_vocabulary(const ToyTokenizer& a, const ToyTokenizer& b) {
  std::vector<SharedToken> out;
  for (int id = 0; id < a.vocab_size(); ++id) {
    const std::string& text = a.token_string(id);
    const int idb = b.token_id(text);
    if (idb >= 0) {
      out.push_back({text, id, idb});
    }
  }
  std::sort(out.begin(), out.end(),
            [](const SharedToken& x, const SharedToken& y) { return x.text < y.text; });
  return out;
}

}  // namespace sra
