#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bofi/tensor.hpp"

namespace bofi {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
/// Placeholder filling the non-autoregressive input canvas. PAD never occurs
/// in an unbatched sequence, so it doubles as the mask symbol.
inline constexpr TokenId kMask = kPad;
inline constexpr int kNumReserved = 4;

inline constexpr int kDefaultMaxLen = 16;

class Vocab {
 public:
  Vocab();  // reserved tokens only

  /// Rebuilds a vocabulary from its full word list (reserved words first).
  static Vocab from_words(std::vector<std::string> words);

  TokenId id(std::string_view word) const;
  const std::string& word(TokenId id) const;
  bool contains(std::string_view word) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.words_ == b.words_; }

 private:
  void add(std::string word);

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Keeps words seen at least min_count times. Ids are assigned by descending
/// frequency, ties broken lexicographically, so input order never matters.
Vocab build_vocab(std::span<const std::vector<std::string>> sentences, int min_count);

std::vector<TokenId> encode_tokens(std::span<const std::string> words, const Vocab& vocab);
std::vector<std::string> decode_tokens(std::span<const TokenId> ids, const Vocab& vocab);

struct CaptionRecord {
  std::string id;
  std::vector<std::string> tokens;
  std::optional<std::string> tree;
  Mat regions;  // one row per region, d_r columns
  std::vector<std::vector<std::string>> refs;
};

Vocab build_vocab(std::span<const CaptionRecord> records, int min_count);

struct SceneObject {
  int category = 0;
  int attribute = 0;
  int size = 0;
  int material = 0;
};

struct SceneRelation {
  int subject = 0;
  int relation = 0;
  int object = 0;
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  std::vector<SceneRelation> relations;
  std::uint64_t seed = 0;
};

/// Templates are bracketed trees whose leaves may be placeholders:
/// OBJ, ATTR, SIZE, MAT (optionally suffixed with an object slot 2..9) and
/// REL (the scene relation, expanded into tagged leaves). A template that does
/// not start with '(' is a flat noun phrase, e.g. "a ATTR OBJ".
struct SynthConfig {
  int n_scenes = 2000;
  int n_categories = 20;
  int n_attributes = 10;
  int n_sizes = 4;
  int n_materials = 5;
  int n_relations = 10;
  int d_r = 32;
  int n_refs = 5;
  double noise = 0.1;
  std::vector<std::string> templates = default_templates();

  static std::vector<std::string> default_templates();
};

/// Pure function of (config, seed). Throws ConfigError on unknown placeholders
/// or lexicon sizes beyond the built-in word lists.
std::vector<CaptionRecord> generate_synthetic_corpus(const SynthConfig& config, std::uint64_t seed);

/// Renders one template for a scene; exposed for tests.
std::string render_template(std::string_view tmpl, const SceneSpec& scene);

void write_dataset(std::span<const CaptionRecord> records, std::ostream& out);
void write_dataset(std::span<const CaptionRecord> records, const std::filesystem::path& path);

/// Parses and validates dataset JSONL. Captions longer than max_len are
/// truncated and lose their tree; unparsable trees, or trees whose leaves do
/// not match the tokens, are dropped. Throws DataError with the line number or
/// record id.
std::vector<CaptionRecord> read_dataset(std::istream& in, int max_len = kDefaultMaxLen);
std::vector<CaptionRecord> read_dataset(const std::filesystem::path& path, int max_len = kDefaultMaxLen);

}  // namespace bofi
