#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bofi/error.hpp"

namespace bofi {

/// Constituency tree node. A leaf carries a token and no children; a
/// nonterminal carries a label and at least one child.
struct ParseNode {
  std::string label;
  std::string token;
  std::vector<ParseNode> children;

  bool is_leaf() const { return children.empty(); }

  static ParseNode leaf(std::string token);
  static ParseNode node(std::string label, std::vector<ParseNode> children);
};

class TreeParseError : public DataError {
 public:
  TreeParseError(const std::string& what, std::size_t offset);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Reads Penn-style bracketed text, e.g. "(NP (DT a) (NN dog))". Bare tokens
/// inside a constituent are accepted as leaves.
ParseNode parse_bracketed(std::string_view text);

/// Inverse of parse_bracketed for well-formed trees (single spaces).
std::string to_bracketed(const ParseNode& tree);

std::vector<std::string> leaves(const ParseNode& tree);

enum class BoxType : int { NP = 0, VP = 1, CP = 2, OTHER = 3, EOB = 4 };
inline constexpr int kNumBoxTypes = 5;

std::string_view box_type_name(BoxType t);
BoxType box_type_from_name(std::string_view name);  // throws ConfigError

/// Treebank label -> box type. "NP*" -> NP, "VP*" -> VP, CC/CONJP/CP -> CP,
/// everything else OTHER.
BoxType normalize_label(std::string_view label);

struct BoxSpec {
  BoxType type = BoxType::OTHER;
  int length = 1;

  friend bool operator==(const BoxSpec&, const BoxSpec&) = default;
};

using BoundingSequence = std::vector<BoxSpec>;

int total_length(std::span<const BoxSpec> boxes);

/// Checks 1 <= N <= max_boxes, 1 <= l_i <= max_box_len, and that EOB is absent.
void validate_bounding(std::span<const BoxSpec> boxes, int max_boxes, int max_box_len);

struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct Segmentation {
  BoundingSequence boxes;
  std::vector<TokenSpan> spans;
};

inline constexpr int kFinestLevel = -1;

/// Cuts the tree into typed boxes at split level k (k >= 1), or at the finest
/// level (k == -1) where no box contains a further NP/VP/CP constituent.
///
/// A nonterminal is emitted whole when it sits at depth >= k (the root's
/// children are depth 1) or has no NP/VP/CP constituent strictly below it;
/// otherwise its children are visited in order. Emitted pieces that are OTHER
/// and are direct siblings merge into one OTHER box.
Segmentation extract_boxes(const ParseNode& tree, int level);

/// Per-token type tags: box i contributes its type l_i times.
std::vector<BoxType> expand_bounding(std::span<const BoxSpec> boxes);

/// Per-token slot information consumed by the filling decoder.
struct SlotTag {
  BoxType type = BoxType::OTHER;
  int box = 0;  // 0-based box index
  int pos = 0;  // 0-based position within the box

  friend bool operator==(const SlotTag&, const SlotTag&) = default;
};

std::vector<SlotTag> slot_tags(std::span<const BoxSpec> boxes);

/// Groups tags back into boxes using the box index; inverse of slot_tags.
BoundingSequence regroup(std::span<const SlotTag> tags);

/// "NP:3,VP:2,NP:2" -> boxes. Throws ConfigError on malformed input.
BoundingSequence parse_box_list(std::string_view text);
std::string format_box_list(std::span<const BoxSpec> boxes);

struct BoxStatistics {
  std::map<int, long> count_hist;   // N -> records
  std::map<int, long> length_hist;  // l -> boxes
  std::map<BoxType, long> type_freq;
};

BoxStatistics box_statistics(std::span<const BoundingSequence> corpus);

}  // namespace bofi
